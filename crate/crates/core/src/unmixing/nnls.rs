//! Lawson–Hanson active-set non-negative least squares.

use crate::error::{Error, Result};

/// Dense column-major matrix view used by the solver: `cols[j][i] = A[i][j]`.
#[derive(Debug, Clone)]
pub struct ColMatrix {
    rows: usize,
    cols: Vec<Vec<f64>>,
}

impl ColMatrix {
    pub fn from_columns(rows: usize, cols: Vec<Vec<f64>>) -> Result<Self> {
        if rows == 0 || cols.is_empty() {
            return Err(Error::Shape("nnls needs at least one row and one column".into()));
        }
        if cols.iter().any(|c| c.len() != rows) {
            return Err(Error::Shape("nnls columns have inconsistent lengths".into()));
        }
        Ok(Self { rows, cols })
    }

    /// Builds from a row-major slice of `rows x cols` values.
    pub fn from_row_major(rows: usize, ncols: usize, values: &[f64]) -> Result<Self> {
        if values.len() != rows * ncols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{ncols} matrix",
                values.len()
            )));
        }
        let cols = (0..ncols)
            .map(|j| (0..rows).map(|i| values[i * ncols + j]).collect())
            .collect();
        Self::from_columns(rows, cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.cols[j]
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (col, &xj) in self.cols.iter().zip(x) {
            if xj != 0.0 {
                for (o, &a) in out.iter_mut().zip(col) {
                    *o += a * xj;
                }
            }
        }
        out
    }

    /// `A^T v`
    pub fn tmul(&self, v: &[f64]) -> Vec<f64> {
        self.cols.iter().map(|c| dot(c, v)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `||Ax - y||` subject to `x >= 0`.
///
/// `max_outer` caps the number of variables moved into the passive set;
/// `None` uses `3 * q`.
pub fn nnls(a: &ColMatrix, y: &[f64], max_outer: Option<usize>) -> Result<Vec<f64>> {
    if y.len() != a.rows() {
        return Err(Error::Shape(format!(
            "rhs has {} entries, matrix has {} rows",
            y.len(),
            a.rows()
        )));
    }
    let q = a.ncols();
    let cap = max_outer.unwrap_or(3 * q);
    let norm_a = a
        .cols
        .iter()
        .map(|c| dot(c, c))
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let tol = 10.0 * f64::EPSILON * norm_a * (a.rows().max(q) as f64) * (1.0 + norm2(y));

    let mut x = vec![0.0; q];
    let mut passive = vec![false; q];
    // columns found numerically dependent on the passive set
    let mut excluded = vec![false; q];
    let mut outer = 0;
    loop {
        let residual = sub(y, &a.mul(&x));
        let w = a.tmul(&residual);
        let candidate = (0..q)
            .filter(|&j| !passive[j] && !excluded[j])
            .max_by(|&i, &j| w[i].total_cmp(&w[j]).then(j.cmp(&i)));
        let Some(t) = candidate.filter(|&j| w[j] > tol) else {
            return Ok(x);
        };
        if outer == cap {
            return Err(Error::Convergence {
                iterations: outer,
                best: x,
            });
        }
        outer += 1;
        passive[t] = true;

        let mut first = true;
        loop {
            let idx: Vec<usize> = (0..q).filter(|&j| passive[j]).collect();
            let solved = least_squares(a, &idx, y);
            let entering_ok = solved.as_ref().is_some_and(|s| {
                idx.iter().zip(s).all(|(&j, &v)| j != t || v > 0.0)
            });
            if first && !entering_ok {
                passive[t] = false;
                excluded[t] = true;
                break;
            }
            first = false;
            let Some(s_p) = solved else {
                return Err(Error::Convergence {
                    iterations: outer,
                    best: x,
                });
            };
            if s_p.iter().all(|&v| v > 0.0) {
                for (&j, &v) in idx.iter().zip(&s_p) {
                    x[j] = v;
                }
                break;
            }
            let alpha = idx
                .iter()
                .zip(&s_p)
                .filter(|(_, &v)| v <= 0.0)
                .map(|(&j, &v)| x[j] / (x[j] - v))
                .fold(f64::INFINITY, f64::min);
            for (&j, &v) in idx.iter().zip(&s_p) {
                x[j] += alpha * (v - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
        if !excluded[t] {
            excluded.iter_mut().for_each(|e| *e = false);
        }
    }
}

/// Largest KKT violation of a candidate NNLS solution.
pub fn kkt_residual(a: &ColMatrix, y: &[f64], x: &[f64]) -> f64 {
    let w = a.tmul(&sub(y, &a.mul(x)));
    x.iter()
        .zip(&w)
        .map(|(&xi, &wi)| {
            let primal = (-xi).max(0.0);
            let dual = if xi > 0.0 { wi.abs() } else { wi.max(0.0) };
            primal.max(dual)
        })
        .fold(0.0, f64::max)
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unconstrained least squares on the columns `idx` via Householder QR.
/// Returns `None` if the selected columns are rank deficient.
fn least_squares(a: &ColMatrix, idx: &[usize], y: &[f64]) -> Option<Vec<f64>> {
    let p = a.rows();
    let k = idx.len();
    let mut r: Vec<Vec<f64>> = idx.iter().map(|&j| a.cols[j].clone()).collect();
    let mut rhs = y.to_vec();
    let scale = r.iter().map(|c| norm2(c)).fold(0.0, f64::max);
    for col in 0..k.min(p) {
        let alpha = norm2(&r[col][col..]);
        if alpha <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
            return None;
        }
        let sign = if r[col][col] >= 0.0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = r[col][col..].to_vec();
        v[0] += sign * alpha;
        let vnorm2 = dot(&v, &v);
        for c in r.iter_mut().skip(col) {
            let f = 2.0 * dot(&v, &c[col..]) / vnorm2;
            for (ci, vi) in c[col..].iter_mut().zip(&v) {
                *ci -= f * vi;
            }
        }
        let f = 2.0 * dot(&v, &rhs[col..]) / vnorm2;
        for (ri, vi) in rhs[col..].iter_mut().zip(&v) {
            *ri -= f * vi;
        }
    }
    if k > p {
        return None;
    }
    let mut x = vec![0.0; k];
    for i in (0..k).rev() {
        let mut s = rhs[i];
        for j in i + 1..k {
            s -= r[j][i] * x[j];
        }
        x[i] = s / r[i][i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn identity(n: usize) -> ColMatrix {
        let cols = (0..n)
            .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        ColMatrix::from_columns(n, cols).unwrap()
    }

    #[test]
    fn identity_passthrough_and_clamp() {
        let a = identity(2);
        assert_eq!(nnls(&a, &[0.3, 0.7], None).unwrap(), vec![0.3, 0.7]);
        assert_eq!(nnls(&a, &[-0.5, 1.0], None).unwrap(), vec![0.0, 1.0]);
        assert_eq!(nnls(&a, &[-0.5, -1.0], None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ColMatrix::from_columns(0, vec![vec![]]).is_err());
        assert!(ColMatrix::from_columns(2, vec![]).is_err());
        assert!(nnls(&identity(2), &[1.0], None).is_err());
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let a = identity(3);
        let err = nnls(&a, &[1.0, 2.0, 3.0], Some(1)).unwrap_err();
        match err {
            Error::Convergence { iterations, best } => {
                assert_eq!(iterations, 1);
                assert_eq!(best, vec![0.0, 0.0, 3.0]);
            }
            other => panic!("unexpected {other}"),
        }
    }

    /// Brute-force oracle: coordinate grid over the nonnegative orthant,
    /// refined around the best cell.
    fn grid_oracle(a: &ColMatrix, y: &[f64], hi: f64) -> Vec<f64> {
        let q = a.ncols();
        let mut center = vec![hi / 2.0; q];
        let mut half = hi / 2.0;
        let steps = 20;
        for _ in 0..70 {
            let mut best = (f64::INFINITY, center.clone());
            let total = (steps + 1usize).pow(q as u32);
            for code in 0..total {
                let mut c = code;
                let x: Vec<f64> = (0..q)
                    .map(|d| {
                        let k = c % (steps + 1);
                        c /= steps + 1;
                        (center[d] - half + 2.0 * half * k as f64 / steps as f64).max(0.0)
                    })
                    .collect();
                let r = norm2(&sub(y, &a.mul(&x)));
                if r < best.0 {
                    best = (r, x);
                }
            }
            center = best.1;
            half *= 0.6;
        }
        center
    }

    #[test]
    fn matches_grid_oracle_on_random_cone_problems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let cols: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let a = ColMatrix::from_columns(6, cols).unwrap();
            let truth: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
            let y = a.mul(&truth);
            let x = nnls(&a, &y, None).unwrap();
            let oracle = grid_oracle(&a, &y, 2.0);
            for (u, v) in x.iter().zip(&oracle) {
                assert!((u - v).abs() < 1e-6, "{x:?} vs {oracle:?}");
            }
            assert!(kkt_residual(&a, &y, &x) <= 1e-8 * norm2(&y));
        }
    }

    #[test]
    fn kkt_holds_for_random_infeasible_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let p = rng.random_range(2..12);
            let q = rng.random_range(1..p.min(7) + 1);
            let vals: Vec<f64> = (0..p * q).map(|_| rng.random_range(-1.0..1.0)).collect();
            let a = ColMatrix::from_row_major(p, q, &vals).unwrap();
            let y: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = nnls(&a, &y, None).unwrap();
            assert!(x.iter().all(|&v| v >= 0.0));
            assert!(kkt_residual(&a, &y, &x) <= 1e-8 * norm2(&y), "{x:?}");
        }
    }
}
