//! Benchmark fixtures shared by the criterion suites.

use hsicd_core::affinity::{stack_sources, AffinityPair, DEFAULT_AFFINITY_EPS};
use hsicd_core::synth::{gen_scene, Scene, SceneConfig};
use hsicd_core::unmixing::{AbundanceCube, AbundanceKind};

/// The default 64x64, 32-band, 4-endmember scene.
pub fn scene() -> Scene {
    gen_scene(&SceneConfig::default()).expect("default scene")
}

/// Affinity source built from the scene's true abundances, standing in for
/// both the linear and the nonlinear estimates.
pub fn affinity(scene: &Scene) -> AffinityPair {
    let stack = |t: usize| {
        let (cube, ab) = match t {
            0 => (scene.pair.time1(), &scene.abundances1),
            _ => (scene.pair.time2(), &scene.abundances2),
        };
        let (h, w, m) = (ab.height(), ab.width(), ab.endmembers());
        let lin = AbundanceCube::new(h, w, m, AbundanceKind::Linear, ab.data().to_vec()).unwrap();
        let non = AbundanceCube::new(h, w, m, AbundanceKind::Nonlinear, ab.data().to_vec()).unwrap();
        stack_sources(cube, &lin, &non).unwrap()
    };
    AffinityPair::new(stack(0), stack(1), DEFAULT_AFFINITY_EPS).unwrap()
}
