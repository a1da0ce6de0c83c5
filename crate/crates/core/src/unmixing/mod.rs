//! Endmember extraction and abundance estimation under the linear and the
//! bilinear (Fan) mixture models.
//!
//! Both estimators share one endmember set, extracted by ATGP from the pooled
//! pixels of the two acquisitions.

mod atgp;
mod bilinear;
mod linear;
pub mod nnls;
mod simplex;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsicube::HyperCube;

pub use atgp::atgp;
pub use bilinear::{bfm_forward, bfm_residual, bfm_unmix, BfmOptions};
pub use linear::{fcls, linear_residual, FCLS_DELTA};
pub use simplex::project_to_simplex;

/// Tolerance for the nonnegativity and sum-to-one checks.
pub const ABUNDANCE_TOL: f64 = 1e-6;

/// Endmember matrix `X` (b x m), stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct EndmemberSet {
    bands: usize,
    columns: Vec<Vec<f64>>,
    source_indices: Option<Vec<usize>>,
}

impl EndmemberSet {
    pub fn new(columns: Vec<Vec<f64>>, source_indices: Option<Vec<usize>>) -> Result<Self> {
        let Some(first) = columns.first() else {
            return Err(Error::Shape("endmember set must hold at least one column".into()));
        };
        let bands = first.len();
        if bands == 0 || columns.iter().any(|c| c.len() != bands) {
            return Err(Error::Shape("endmember columns must share a positive length".into()));
        }
        if columns.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("endmember values must be finite".into()));
        }
        for i in 0..columns.len() {
            for j in i + 1..columns.len() {
                if columns[i] == columns[j] {
                    return Err(Error::Degenerate(format!("endmembers {i} and {j} are identical")));
                }
            }
        }
        if let Some(idx) = &source_indices {
            if idx.len() != columns.len() {
                return Err(Error::Shape("one source index per endmember required".into()));
            }
        }
        Ok(Self {
            bands,
            columns,
            source_indices,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn count(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, i: usize) -> &[f64] {
        &self.columns[i]
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.columns
    }

    pub fn source_indices(&self) -> Option<&[usize]> {
        self.source_indices.as_deref()
    }

    /// `X w`
    pub fn mix(&self, w: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.bands];
        for (col, &wi) in self.columns.iter().zip(w) {
            for (o, &x) in out.iter_mut().zip(col) {
                *o += wi * x;
            }
        }
        out
    }

    /// Text matrix: `bands` lines of `m` space-separated values.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in 0..self.bands {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{:e}", c[k])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let rows: Vec<Vec<f64>> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .enumerate()
            .map(|(r, line)| {
                line.split_whitespace()
                    .map(|tok| {
                        tok.parse::<f64>().map_err(|_| {
                            Error::format("endmembers", format!("row {r}: `{tok}` is not a number"))
                        })
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        let m = rows.first().map_or(0, Vec::len);
        if m == 0 || rows.iter().any(|r| r.len() != m) {
            return Err(Error::format("endmembers", "ragged or empty matrix"));
        }
        let columns = (0..m).map(|j| rows.iter().map(|r| r[j]).collect()).collect();
        Self::new(columns, None)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbundanceKind {
    Linear,
    Nonlinear,
}

/// Per-pixel endmember fractions satisfying nonnegativity and sum-to-one.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceVector {
    values: Vec<f64>,
    kind: AbundanceKind,
}

impl AbundanceVector {
    pub fn new(values: Vec<f64>, kind: AbundanceKind) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Shape("abundance vector is empty".into()));
        }
        check_simplex(&values)?;
        Ok(Self { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> AbundanceKind {
        self.kind
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

fn check_simplex(values: &[f64]) -> Result<()> {
    if let Some(i) = values
        .iter()
        .position(|v| !v.is_finite() || *v < -ABUNDANCE_TOL || *v > 1.0 + ABUNDANCE_TOL)
    {
        return Err(Error::Degenerate(format!(
            "abundance {} at position {i} outside [0, 1]",
            values[i]
        )));
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > ABUNDANCE_TOL {
        return Err(Error::Degenerate(format!("abundances sum to {sum}, not 1")));
    }
    Ok(())
}

/// Abundances for every pixel of an h x w scene, pixel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceCube {
    height: usize,
    width: usize,
    endmembers: usize,
    kind: AbundanceKind,
    data: Vec<f64>,
}

impl AbundanceCube {
    pub fn new(
        height: usize,
        width: usize,
        endmembers: usize,
        kind: AbundanceKind,
        data: Vec<f64>,
    ) -> Result<Self> {
        if endmembers == 0 {
            return Err(Error::Shape("abundance cube needs at least one endmember".into()));
        }
        if data.len() != height * width * endmembers {
            return Err(Error::Shape(format!(
                "abundance cube holds {} values, expected {}",
                data.len(),
                height * width * endmembers
            )));
        }
        for px in data.chunks_exact(endmembers) {
            check_simplex(px)?;
        }
        Ok(Self {
            height,
            width,
            endmembers,
            kind,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn endmembers(&self) -> usize {
        self.endmembers
    }

    pub fn kind(&self) -> AbundanceKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, index: usize) -> &[f64] {
        &self.data[index * self.endmembers..(index + 1) * self.endmembers]
    }

    /// Endmember planes as a band-sequential cube (one band per endmember).
    pub fn to_hypercube(&self) -> Result<HyperCube> {
        let n = self.height * self.width;
        let mut planes = vec![0.0f32; n * self.endmembers];
        for p in 0..n {
            for k in 0..self.endmembers {
                planes[k * n + p] = self.data[p * self.endmembers + k] as f32;
            }
        }
        HyperCube::new(self.height, self.width, self.endmembers, planes)
    }

    /// Inverse of [`to_hypercube`](Self::to_hypercube). Values pass through f32,
    /// so each pixel is renormalized to sum exactly to one.
    pub fn from_hypercube(cube: &HyperCube, kind: AbundanceKind) -> Result<Self> {
        let mut data = cube.spectra();
        for px in data.chunks_exact_mut(cube.bands()) {
            let s: f64 = px.iter().sum();
            if s > 0.0 {
                px.iter_mut().for_each(|v| *v /= s);
            }
        }
        Self::new(cube.height(), cube.width(), cube.bands(), kind, data)
    }
}

const MAX_REPORTED_FAILURES: usize = 100;
const CHUNK: usize = 256;

/// Applies `solve` to every pixel spectrum, in parallel over fixed chunks.
/// Aborts once `MAX_REPORTED_FAILURES` pixels have failed.
fn unmix_cube<F>(
    endmembers: &EndmemberSet,
    cube: &HyperCube,
    kind: AbundanceKind,
    solve: F,
) -> Result<AbundanceCube>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync,
{
    if cube.bands() != endmembers.bands() {
        return Err(Error::Shape(format!(
            "cube has {} bands, endmembers have {}",
            cube.bands(),
            endmembers.bands()
        )));
    }
    let b = cube.bands();
    let spectra = cube.spectra();
    let n = cube.pixel_count();
    let m = endmembers.count();
    let mut data = Vec::with_capacity(n * m);
    let mut failures: Vec<(usize, Error)> = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let end = (start + CHUNK).min(n);
        let results: Vec<Result<Vec<f64>>> = (start..end)
            .into_par_iter()
            .map(|p| solve(p, &spectra[p * b..(p + 1) * b]))
            .collect();
        for (offset, r) in results.into_iter().enumerate() {
            match r {
                Ok(w) => data.extend_from_slice(&w),
                Err(e) => {
                    data.extend(std::iter::repeat_n(0.0, m));
                    failures.push((start + offset, e));
                }
            }
        }
        if failures.len() >= MAX_REPORTED_FAILURES {
            break;
        }
    }
    if let Some((p, first)) = failures.first() {
        return Err(Error::PixelFailures {
            count: failures.len(),
            row: p / cube.width(),
            col: p % cube.width(),
            first: Box::new(clone_error(first)),
        });
    }
    AbundanceCube::new(cube.height(), cube.width(), m, kind, data)
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::Degenerate(s) => Error::Degenerate(s.clone()),
        Error::Convergence { iterations, best } => Error::Convergence {
            iterations: *iterations,
            best: best.clone(),
        },
        Error::Numeric { iteration, detail } => Error::Numeric {
            iteration: *iteration,
            detail: detail.clone(),
        },
        other => Error::Numeric {
            iteration: 0,
            detail: other.to_string(),
        },
    }
}

/// FCLS abundances for every pixel.
pub fn fcls_cube(endmembers: &EndmemberSet, cube: &HyperCube) -> Result<AbundanceCube> {
    unmix_cube(endmembers, cube, AbundanceKind::Linear, |_, px| {
        fcls(endmembers, px, FCLS_DELTA).map(AbundanceVector::into_values)
    })
}

/// BFM abundances for every pixel, each initialized from its FCLS solution.
pub fn bfm_cube(
    endmembers: &EndmemberSet,
    cube: &HyperCube,
    options: &BfmOptions,
) -> Result<AbundanceCube> {
    unmix_cube(endmembers, cube, AbundanceKind::Nonlinear, |_, px| {
        let init = fcls(endmembers, px, FCLS_DELTA)?;
        bfm_unmix(endmembers, px, &init, options).map(AbundanceVector::into_values)
    })
}

/// Same as [`bfm_cube`] but starting from an already computed linear cube.
pub fn bfm_cube_from(
    endmembers: &EndmemberSet,
    cube: &HyperCube,
    linear: &AbundanceCube,
    options: &BfmOptions,
) -> Result<AbundanceCube> {
    if linear.height() != cube.height()
        || linear.width() != cube.width()
        || linear.endmembers() != endmembers.count()
    {
        return Err(Error::Shape("linear abundance cube does not match the scene".into()));
    }
    unmix_cube(endmembers, cube, AbundanceKind::Nonlinear, |p, px| {
        let init = AbundanceVector::new(linear.pixel(p).to_vec(), AbundanceKind::Linear)?;
        bfm_unmix(endmembers, px, &init, options).map(AbundanceVector::into_values)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_endmembers() -> EndmemberSet {
        EndmemberSet::new(vec![vec![0.8, 0.2, 0.1], vec![0.2, 0.8, 0.4]], None).unwrap()
    }

    #[test]
    fn endmember_invariants() {
        assert!(EndmemberSet::new(vec![], None).is_err());
        assert!(EndmemberSet::new(vec![vec![1.0], vec![1.0]], None).is_err());
        assert!(EndmemberSet::new(vec![vec![1.0], vec![f64::NAN]], None).is_err());
        assert!(EndmemberSet::new(vec![vec![1.0, 2.0], vec![1.0]], None).is_err());
    }

    #[test]
    fn endmember_text_roundtrip() {
        let x = two_endmembers();
        let text = x.to_text();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(text.lines().next().unwrap().split(' ').count(), 2);
        assert_eq!(EndmemberSet::from_text(&text).unwrap(), x);
        assert!(EndmemberSet::from_text("1 2\n3\n").is_err());
    }

    #[test]
    fn abundance_vector_checks() {
        assert!(AbundanceVector::new(vec![0.5, 0.5], AbundanceKind::Linear).is_ok());
        assert!(AbundanceVector::new(vec![0.6, 0.5], AbundanceKind::Linear).is_err());
        assert!(AbundanceVector::new(vec![1.1, -0.1], AbundanceKind::Linear).is_err());
        assert!(AbundanceCube::new(1, 1, 0, AbundanceKind::Linear, vec![]).is_err());
    }

    #[test]
    fn pure_pixels_give_indicator_planes() {
        let x = two_endmembers();
        let mut data = vec![0.0f32; 4 * 3];
        let pure = [0usize, 1, 1, 0];
        for (p, &e) in pure.iter().enumerate() {
            for k in 0..3 {
                data[k * 4 + p] = x.column(e)[k] as f32;
            }
        }
        let cube = HyperCube::new(2, 2, 3, data).unwrap();
        // f32 storage perturbs the spectra slightly
        for ab in [
            fcls_cube(&x, &cube).unwrap(),
            bfm_cube(&x, &cube, &BfmOptions::default()).unwrap(),
        ] {
            for (p, &e) in pure.iter().enumerate() {
                assert!((ab.pixel(p)[e] - 1.0).abs() < 1e-4, "{:?}", ab.pixel(p));
            }
        }
    }

    #[test]
    fn constant_cube_gives_constant_planes() {
        let x = two_endmembers();
        let px = x.mix(&[0.3, 0.7]);
        let data: Vec<f32> = (0..3).flat_map(|k| vec![px[k] as f32; 6]).collect();
        let cube = HyperCube::new(2, 3, 3, data).unwrap();
        let ab = fcls_cube(&x, &cube).unwrap();
        for p in 0..6 {
            assert_eq!(ab.pixel(p), ab.pixel(0));
        }
        assert!((ab.pixel(0)[0] - 0.3).abs() < 1e-6);
    }

    #[test]
    fn band_mismatch_is_rejected() {
        let cube = HyperCube::new(1, 1, 2, vec![0.1, 0.2]).unwrap();
        assert!(matches!(fcls_cube(&two_endmembers(), &cube), Err(Error::Shape(_))));
    }

    #[test]
    fn hypercube_roundtrip() {
        let ab = AbundanceCube::new(1, 2, 2, AbundanceKind::Linear, vec![0.25, 0.75, 1.0, 0.0])
            .unwrap();
        let cube = ab.to_hypercube().unwrap();
        assert_eq!(cube.band(0), &[0.25, 1.0]);
        assert_eq!(AbundanceCube::from_hypercube(&cube, AbundanceKind::Linear).unwrap(), ab);
    }
}
