use super::nnls::{nnls, ColMatrix};
use super::{AbundanceKind, AbundanceVector, EndmemberSet};
use crate::error::{Error, Result};

/// Weight applied to the data rows of the sum-to-one augmented system.
pub const FCLS_DELTA: f64 = 1e-3;

/// Fully constrained least squares abundances of one pixel.
///
/// Solves NNLS on `[delta * X; 1^T] w = [delta * r; 1]`, which enforces the
/// sum-to-one constraint softly with weight `1 / delta`, then divides by the
/// sum so it holds to rounding.
pub fn fcls(endmembers: &EndmemberSet, pixel: &[f64], delta: f64) -> Result<AbundanceVector> {
    let b = endmembers.bands();
    if pixel.len() != b {
        return Err(Error::Shape(format!(
            "pixel has {} bands, endmembers have {b}",
            pixel.len()
        )));
    }
    let cols = endmembers
        .columns()
        .iter()
        .map(|c| {
            let mut col: Vec<f64> = c.iter().map(|v| delta * v).collect();
            col.push(1.0);
            col
        })
        .collect();
    let a = ColMatrix::from_columns(b + 1, cols)?;
    let mut y: Vec<f64> = pixel.iter().map(|v| delta * v).collect();
    y.push(1.0);
    let mut w = nnls(&a, &y, None)?;
    let sum: f64 = w.iter().sum();
    if sum <= 0.0 {
        return Err(Error::Degenerate("FCLS returned all-zero abundances".into()));
    }
    w.iter_mut().for_each(|v| *v /= sum);
    AbundanceVector::new(w, AbundanceKind::Linear)
}

/// `||X w - r||`
pub fn linear_residual(endmembers: &EndmemberSet, w: &[f64], pixel: &[f64]) -> f64 {
    endmembers
        .mix(w)
        .iter()
        .zip(pixel)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(cols: &[&[f64]]) -> EndmemberSet {
        EndmemberSet::new(cols.iter().map(|c| c.to_vec()).collect(), None).unwrap()
    }

    /// Exhaustive search over the unit simplex on a grid of `step`.
    fn simplex_grid_oracle(x: &EndmemberSet, pixel: &[f64], step: f64) -> Vec<f64> {
        let m = x.count();
        let ticks = (1.0 / step).round() as usize;
        let mut best = (f64::INFINITY, vec![]);
        let mut w = vec![0usize; m];
        fn rec(
            k: usize,
            left: usize,
            w: &mut Vec<usize>,
            eval: &mut dyn FnMut(&[usize]),
        ) {
            if k + 1 == w.len() {
                w[k] = left;
                eval(w);
                return;
            }
            for v in 0..=left {
                w[k] = v;
                rec(k + 1, left - v, w, eval);
            }
        }
        let mut eval = |w: &[usize]| {
            let wf: Vec<f64> = w.iter().map(|&v| v as f64 / ticks as f64).collect();
            let r = linear_residual(x, &wf, pixel);
            if r < best.0 {
                best = (r, wf);
            }
        };
        rec(0, ticks, &mut w, &mut eval);
        best.1
    }

    #[test]
    fn identity_endmembers_reproduce_pixel() {
        let x = set(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = fcls(&x, &[0.3, 0.7], FCLS_DELTA).unwrap();
        assert!((w.values()[0] - 0.3).abs() < 1e-12);
        assert!((w.values()[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn symmetric_midpoint() {
        let x = set(&[&[0.8, 0.2], &[0.2, 0.8]]);
        let w = fcls(&x, &[0.5, 0.5], FCLS_DELTA).unwrap();
        assert!((w.values()[0] - 0.5).abs() < 1e-12);
        assert!((w.values()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn outside_simplex_matches_grid_oracle() {
        let x = set(&[&[0.8, 0.2], &[0.2, 0.8]]);
        let pixel = [1.0, 0.0];
        let w = fcls(&x, &pixel, FCLS_DELTA).unwrap();
        let oracle = simplex_grid_oracle(&x, &pixel, 1e-3);
        assert_eq!(oracle, vec![1.0, 0.0]);
        for (a, b) in w.values().iter().zip(&oracle) {
            assert!((a - b).abs() <= 2e-3, "{:?} vs {oracle:?}", w.values());
        }
    }

    #[test]
    fn random_three_endmember_problems_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..5).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let x = EndmemberSet::new(cols, None).unwrap();
            let pixel: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..1.0)).collect();
            let w = fcls(&x, &pixel, FCLS_DELTA).unwrap();
            let s: f64 = w.values().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.values().iter().all(|&v| v >= 0.0));
            let oracle = simplex_grid_oracle(&x, &pixel, 1e-3);
            for (a, b) in w.values().iter().zip(&oracle) {
                assert!((a - b).abs() <= 2e-3, "{:?} vs {oracle:?}", w.values());
            }
        }
    }

    #[test]
    fn zero_pixel_with_zero_endmember_rows_still_sums_to_one() {
        let x = set(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let w = fcls(&x, &[0.0, 0.0], FCLS_DELTA).unwrap();
        assert!((w.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_length_pixel() {
        let x = set(&[&[1.0, 0.0]]);
        assert!(matches!(fcls(&x, &[1.0], FCLS_DELTA), Err(Error::Shape(_))));
    }
}
