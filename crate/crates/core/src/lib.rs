//! Hyperspectral change detection on co-registered image pairs.
//!
//! The pipeline unmixes both dates against shared endmembers (ATGP, FCLS and
//! a bilinear Fan model), fuses spectra and abundances into one mixed-affinity
//! matrix per pixel, and classifies those matrices with a small CNN trained on
//! CVA pseudo-labels.

pub mod affinity;
pub mod error;
pub mod hsicube;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod predetect;
pub mod synth;
pub mod unmixing;

pub use affinity::{stack_sources, AffinityPair, MixedAffinityMatrix, RegionLayout, StackedCube};
pub use error::{Error, ErrorClass, Result};
pub use hsicube::{BinaryMap, CubePair, HyperCube};
pub use metrics::{evaluate, Metrics};
pub use nn::{Network, Precision, TrainConfig, TrainReport};
pub use pipeline::{infer, run_end_to_end, RunConfig, RunOutput};
pub use predetect::{LabeledSampleSet, PredetectConfig};
pub use synth::{gen_scene, Scene, SceneConfig};
pub use unmixing::{AbundanceCube, EndmemberSet};
