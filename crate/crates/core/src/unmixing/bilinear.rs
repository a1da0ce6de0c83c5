use super::simplex::project_to_simplex;
use super::{AbundanceKind, AbundanceVector, EndmemberSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfmOptions {
    pub max_iters: usize,
    /// Stop once the relative decrease of the squared residual drops below this.
    pub rel_tol: f64,
}

impl Default for BfmOptions {
    fn default() -> Self {
        Self {
            max_iters: 500,
            rel_tol: 1e-8,
        }
    }
}

const MAX_HALVINGS: usize = 60;

/// Bilinear Fan model: `sum_i w_i x_i + sum_{i<j} w_i w_j (x_i * x_j)`.
pub fn bfm_forward(endmembers: &EndmemberSet, w: &[f64]) -> Vec<f64> {
    let m = endmembers.count();
    let mut out = endmembers.mix(w);
    for i in 0..m {
        for j in i + 1..m {
            let a = w[i] * w[j];
            if a == 0.0 {
                continue;
            }
            let (xi, xj) = (endmembers.column(i), endmembers.column(j));
            for k in 0..out.len() {
                out[k] += a * xi[k] * xj[k];
            }
        }
    }
    out
}

/// `||bfm_forward(w) - r||`
pub fn bfm_residual(endmembers: &EndmemberSet, w: &[f64], pixel: &[f64]) -> f64 {
    squared_error(endmembers, w, pixel).sqrt()
}

fn squared_error(endmembers: &EndmemberSet, w: &[f64], pixel: &[f64]) -> f64 {
    bfm_forward(endmembers, w)
        .iter()
        .zip(pixel)
        .map(|(a, b)| (a - b).powi(2))
        .sum()
}

/// Gradient of the squared residual with respect to `w`.
fn gradient(endmembers: &EndmemberSet, w: &[f64], pixel: &[f64]) -> Vec<f64> {
    let m = endmembers.count();
    let diff: Vec<f64> = bfm_forward(endmembers, w)
        .iter()
        .zip(pixel)
        .map(|(a, b)| a - b)
        .collect();
    (0..m)
        .map(|k| {
            let xk = endmembers.column(k);
            let mut g = 0.0;
            for (band, d) in diff.iter().enumerate() {
                // d f_b / d w_k = x_k[b] + sum_{j != k} w_j x_k[b] x_j[b]
                let mut partial = xk[band];
                for (j, &wj) in w.iter().enumerate() {
                    if j != k && wj != 0.0 {
                        partial += wj * xk[band] * endmembers.column(j)[band];
                    }
                }
                g += d * partial;
            }
            2.0 * g
        })
        .collect()
}

/// Nonlinear abundances under the bilinear Fan model.
///
/// Projected gradient descent on the squared residual, each step projected
/// back onto the simplex, with a backtracking step that starts at 1 and halves
/// until the projected point satisfies the sufficient-decrease condition.
pub fn bfm_unmix(
    endmembers: &EndmemberSet,
    pixel: &[f64],
    init: &AbundanceVector,
    options: &BfmOptions,
) -> Result<AbundanceVector> {
    let m = endmembers.count();
    if pixel.len() != endmembers.bands() || init.values().len() != m {
        return Err(Error::Shape(format!(
            "pixel/init lengths {}/{} do not match {} bands, {m} endmembers",
            pixel.len(),
            init.values().len(),
            endmembers.bands()
        )));
    }
    let mut w = project_to_simplex(init.values());
    let mut f = squared_error(endmembers, &w, pixel);
    if !f.is_finite() {
        return Err(Error::Numeric {
            iteration: 0,
            detail: "non-finite initial residual".into(),
        });
    }
    for iter in 1..=options.max_iters {
        if f == 0.0 {
            break;
        }
        let g = gradient(endmembers, &w, pixel);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let trial: Vec<f64> = w.iter().zip(&g).map(|(wi, gi)| wi - step * gi).collect();
            let cand = project_to_simplex(&trial);
            let f_new = squared_error(endmembers, &cand, pixel);
            if !f_new.is_finite() {
                return Err(Error::Numeric {
                    iteration: iter,
                    detail: "non-finite residual".into(),
                });
            }
            let mut lin = 0.0;
            let mut dist2 = 0.0;
            for ((c, wi), gi) in cand.iter().zip(&w).zip(&g) {
                lin += gi * (c - wi);
                dist2 += (c - wi).powi(2);
            }
            if dist2 == 0.0 {
                break;
            }
            if f_new <= f + lin + dist2 / (2.0 * step) && f_new < f {
                accepted = Some((cand, f_new));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, f_new)) = accepted else {
            break;
        };
        let improvement = (f - f_new) / f;
        w = cand;
        f = f_new;
        if improvement < options.rel_tol {
            break;
        }
    }
    AbundanceVector::new(w, AbundanceKind::Nonlinear)
}
