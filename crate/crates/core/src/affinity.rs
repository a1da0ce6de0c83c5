//! Stacked multi-source cubes and per-pixel mixed-affinity matrices.
//!
//! A stacked pixel is the `n = b + 2m` vector `[spectrum | linear abundances |
//! nonlinear abundances]`. The affinity matrix compares every component of
//! the time-1 vector (rows) with every component of the time-2 vector
//! (columns): `K[i][j] = 1 - (p1[i] - p2[j]) / p2[j]`, with the
//! spectrum/abundance cross blocks forced to zero.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsicube::HyperCube;
use crate::nn::{SampleSource, Scalar};
use crate::unmixing::{AbundanceCube, AbundanceKind};

/// Default magnitude floor for affinity denominators.
pub const DEFAULT_AFFINITY_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct StackedCube {
    height: usize,
    width: usize,
    bands: usize,
    endmembers: usize,
    data: Vec<f64>,
}

impl StackedCube {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn layout(&self) -> RegionLayout {
        RegionLayout {
            bands: self.bands,
            endmembers: self.endmembers,
        }
    }

    pub fn depth(&self) -> usize {
        self.bands + 2 * self.endmembers
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        let n = self.depth();
        &self.data[index * n..(index + 1) * n]
    }

    fn congruent(&self, other: &StackedCube) -> bool {
        self.height == other.height
            && self.width == other.width
            && self.bands == other.bands
            && self.endmembers == other.endmembers
    }
}

/// Concatenates spectrum, linear and nonlinear abundances per pixel.
pub fn stack_sources(
    cube: &HyperCube,
    linear: &AbundanceCube,
    nonlinear: &AbundanceCube,
) -> Result<StackedCube> {
    if linear.kind() != AbundanceKind::Linear || nonlinear.kind() != AbundanceKind::Nonlinear {
        return Err(Error::Shape("expected one linear and one nonlinear abundance cube".into()));
    }
    for ab in [linear, nonlinear] {
        if ab.height() != cube.height() || ab.width() != cube.width() {
            return Err(Error::Shape(format!(
                "abundance cube is {}x{}, scene is {}x{}",
                ab.height(),
                ab.width(),
                cube.height(),
                cube.width()
            )));
        }
    }
    if linear.endmembers() != nonlinear.endmembers() {
        return Err(Error::Shape("linear and nonlinear cubes disagree on m".into()));
    }
    let b = cube.bands();
    let m = linear.endmembers();
    let n = b + 2 * m;
    let spectra = cube.spectra();
    let mut data = Vec::with_capacity(cube.pixel_count() * n);
    for p in 0..cube.pixel_count() {
        data.extend_from_slice(&spectra[p * b..(p + 1) * b]);
        data.extend_from_slice(linear.pixel(p));
        data.extend_from_slice(nonlinear.pixel(p));
    }
    Ok(StackedCube {
        height: cube.height(),
        width: cube.width(),
        bands: b,
        endmembers: m,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    /// spectrum vs spectrum
    A,
    /// linear vs linear abundances
    B,
    /// spectrum vs abundance (always zero)
    C,
    /// linear vs nonlinear abundances, either orientation
    D,
    /// nonlinear vs nonlinear abundances
    E,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionLayout {
    pub bands: usize,
    pub endmembers: usize,
}

impl RegionLayout {
    pub fn new(bands: usize, endmembers: usize) -> Self {
        Self { bands, endmembers }
    }

    pub fn size(&self) -> usize {
        self.bands + 2 * self.endmembers
    }

    fn segment(&self, i: usize) -> u8 {
        if i < self.bands {
            0
        } else if i < self.bands + self.endmembers {
            1
        } else {
            2
        }
    }

    pub fn region_of(&self, i: usize, j: usize) -> Result<Region> {
        let n = self.size();
        if i >= n || j >= n {
            return Err(Error::Shape(format!("({i}, {j}) outside a {n}x{n} affinity matrix")));
        }
        Ok(match (self.segment(i), self.segment(j)) {
            (0, 0) => Region::A,
            (0, _) | (_, 0) => Region::C,
            (1, 1) => Region::B,
            (2, 2) => Region::E,
            _ => Region::D,
        })
    }
}

/// Row-major n x n matrix for one pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedAffinityMatrix {
    layout: RegionLayout,
    values: Vec<f64>,
}

impl MixedAffinityMatrix {
    pub fn layout(&self) -> RegionLayout {
        self.layout
    }

    pub fn size(&self) -> usize {
        self.layout.size()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size() + j]
    }

    pub fn to_text(&self) -> String {
        let n = self.size();
        let mut s = String::new();
        for row in self.values.chunks_exact(n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            let _ = writeln!(s, "{}", cells.join(" "));
        }
        s
    }
}

/// Fills `out` (row-major n x n) with the affinity of two stacked vectors.
pub fn fill_affinity<T: Scalar>(p1: &[f64], p2: &[f64], layout: RegionLayout, eps: f64, out: &mut [T]) {
    let n = layout.size();
    debug_assert_eq!(out.len(), n * n);
    let denoms: Vec<f64> = p2
        .iter()
        .map(|&d| {
            if d.abs() >= eps {
                d
            } else if d < 0.0 {
                -eps
            } else {
                eps
            }
        })
        .collect();
    let b = layout.bands;
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let in_c = (i < b) != (j < b);
            let k = if in_c {
                0.0
            } else {
                1.0 - (p1[i] - p2[j]) / denoms[j]
            };
            row[j] = T::from_f64(k);
        }
    }
}

pub fn mixed_affinity(
    p1: &[f64],
    p2: &[f64],
    layout: RegionLayout,
    eps: f64,
) -> Result<MixedAffinityMatrix> {
    let n = layout.size();
    if p1.len() != n || p2.len() != n {
        return Err(Error::Shape(format!(
            "stacked vectors of length {}/{} for n = {n}",
            p1.len(),
            p2.len()
        )));
    }
    if let Some(index) = p1.iter().chain(p2).position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut values = vec![0.0f64; n * n];
    fill_affinity(p1, p2, layout, eps, &mut values);
    Ok(MixedAffinityMatrix { layout, values })
}

/// Affinity matrices for the requested pixels, in request order.
pub fn affinity_batch(
    s1: &StackedCube,
    s2: &StackedCube,
    pixel_indices: &[usize],
    eps: f64,
) -> Result<Vec<MixedAffinityMatrix>> {
    if !s1.congruent(s2) {
        return Err(Error::Shape("stacked cubes are not congruent".into()));
    }
    if let Some(&bad) = pixel_indices.iter().find(|&&p| p >= s1.pixel_count()) {
        return Err(Error::Shape(format!(
            "pixel index {bad} out of range ({} pixels)",
            s1.pixel_count()
        )));
    }
    pixel_indices
        .par_iter()
        .map(|&p| mixed_affinity(s1.pixel(p), s2.pixel(p), s1.layout(), eps))
        .collect()
}

/// Source of network inputs: one affinity matrix per pixel of a scene.
#[derive(Debug, Clone)]
pub struct AffinityPair {
    pub time1: StackedCube,
    pub time2: StackedCube,
    pub eps: f64,
}

impl AffinityPair {
    pub fn new(time1: StackedCube, time2: StackedCube, eps: f64) -> Result<Self> {
        if !time1.congruent(&time2) {
            return Err(Error::Shape("stacked cubes are not congruent".into()));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::Config(format!("affinity eps must be positive, got {eps}")));
        }
        Ok(Self { time1, time2, eps })
    }

    pub fn layout(&self) -> RegionLayout {
        self.time1.layout()
    }

    pub fn pixel_count(&self) -> usize {
        self.time1.pixel_count()
    }

    pub fn fill<T: Scalar>(&self, pixel: usize, out: &mut [T]) {
        fill_affinity(
            self.time1.pixel(pixel),
            self.time2.pixel(pixel),
            self.layout(),
            self.eps,
            out,
        );
    }
}

impl SampleSource for AffinityPair {
    fn matrix_size(&self) -> usize {
        self.layout().size()
    }

    fn sample_count(&self) -> usize {
        self.pixel_count()
    }

    fn fill_sample<T: Scalar>(&self, index: usize, out: &mut [T]) {
        self.fill(index, out);
    }
}
