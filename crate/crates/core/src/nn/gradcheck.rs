//! Central finite-difference checks of every backward pass, in f64.
//!
//! Each check builds a random instance, takes a random linear functional
//! `L = sum(r * y)` of the layer output (the loss itself for the
//! cross-entropy check) and compares analytic and numeric derivatives of `L`
//! with respect to every input and parameter coordinate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{dense_backward, dense_forward, Dense};
use super::lsconv::{lsconv_backward, lsconv_forward, LsConv, RegionMask};
use super::network::{softmax_cross_entropy, Architecture, Mode, Network};
use super::norm::{batchnorm_backward, batchnorm_forward, BatchNorm};
use super::pool::{maxpool2_backward, maxpool2_forward, tanh_backward, tanh_forward};
use super::Tensor;
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor of the relative error.
///
/// Some derivatives are exactly zero (a conv bias followed by batch norm
/// cancels out) while their central difference carries rounding noise of
/// about 1e-8 at this step size; the floor judges those on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-2;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates skipped because the perturbation moved a pooling argmax.
    pub skipped: usize,
    pub max_rel_error: f64,
}

/// Runs the finite-difference comparison on the chosen `(group, index)` picks.
///
/// `loss` returns `None` when the perturbed point lies across a kink.
fn fd_check(
    groups: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    picks: &[(usize, usize)],
    mut loss: impl FnMut(&[Vec<f64>]) -> Result<Option<f64>>,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        checked: 0,
        skipped: 0,
        max_rel_error: 0.0,
    };
    for &(g, i) in picks {
        let orig = groups[g][i];
        groups[g][i] = orig + FD_STEP;
        let plus = loss(groups)?;
        groups[g][i] = orig - FD_STEP;
        let minus = loss(groups)?;
        groups[g][i] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            report.skipped += 1;
            continue;
        };
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel_error(analytic[g][i], numeric));
    }
    Ok(report)
}

fn every_coordinate(groups: &[Vec<f64>]) -> Vec<(usize, usize)> {
    groups
        .iter()
        .enumerate()
        .flat_map(|(g, v)| (0..v.len()).map(move |i| (g, i)))
        .collect()
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Locally-shared convolution on a random `1 x 1 x 8 x 8` input.
pub fn check_lsconv(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (cout, k, size) = (3, [1, 3, 5][rng.random_range(0..3)], 8);
    let mask = RegionMask::square(size, rng.random_range(0..=size));
    let bank = cout * k * k;
    let mut groups = vec![
        uniform(&mut rng, size * size, 1.0),
        uniform(&mut rng, bank, 1.0),
        uniform(&mut rng, bank, 1.0),
        uniform(&mut rng, cout, 1.0),
    ];
    let r = uniform(&mut rng, cout * size * size, 1.0);
    let build = |g: &[Vec<f64>]| -> Result<(Tensor<f64>, LsConv<f64>)> {
        let x = Tensor::from_vec(&[1, 1, size, size], g[0].clone())?;
        let conv = LsConv {
            in_channels: 1,
            out_channels: cout,
            kernel: k,
            spectral: g[1].clone(),
            abundance: g[2].clone(),
            bias: g[3].clone(),
        };
        Ok((x, conv))
    };
    let (x, conv) = build(&groups)?;
    let (_, cache) = lsconv_forward(&x, &conv, &mask)?;
    let dy = Tensor::from_vec(&[1, cout, size, size], r.clone())?;
    let (dx, grads) = lsconv_backward(&dy, &conv, &cache, true);
    let analytic = vec![dx.expect("asked for").into_data(), grads.spectral, grads.abundance, grads.bias];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let (x, conv) = build(g)?;
        let (y, _) = lsconv_forward(&x, &conv, &mask)?;
        Ok(Some(dot(y.data(), &r)))
    })
}

/// Train-mode batch norm on a random `3 x 4 x 2 x 2` input with row weights.
pub fn check_batchnorm(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [3, 4, 2, 2];
    let len: usize = shape.iter().product();
    let weights: Vec<f64> = (0..3).map(|_| rng.random_range(1..=3) as f64).collect();
    let mut groups = vec![
        uniform(&mut rng, len, 2.0),
        (0..4).map(|_| rng.random_range(0.5..1.5)).collect(),
        uniform(&mut rng, 4, 1.0),
    ];
    let r = uniform(&mut rng, len, 1.0);
    let build = |g: &[Vec<f64>]| -> Result<(Tensor<f64>, BatchNorm<f64>)> {
        let mut bn = BatchNorm::new(4);
        bn.gamma = g[1].clone();
        bn.beta = g[2].clone();
        Ok((Tensor::from_vec(&shape, g[0].clone())?, bn))
    };
    let (x, bn) = build(&groups)?;
    let (_, cache) = batchnorm_forward(&x, &bn, Mode::Train, Some(&weights), 1e-5)?;
    let dy = Tensor::from_vec(&shape, r.clone())?;
    let (dx, dg, db) = batchnorm_backward(&dy, &bn, &cache.expect("train mode").0);
    let analytic = vec![dx.into_data(), dg, db];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let (x, bn) = build(g)?;
        let (y, _) = batchnorm_forward(&x, &bn, Mode::Train, Some(&weights), 1e-5)?;
        Ok(Some(dot(y.data(), &r)))
    })
}

pub fn check_tanh(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 3, 4, 4];
    let len: usize = shape.iter().product();
    let mut groups = vec![uniform(&mut rng, len, 2.0)];
    let r = uniform(&mut rng, len, 1.0);
    let x = Tensor::from_vec(&shape, groups[0].clone())?;
    let y = tanh_forward(&x);
    let dx = tanh_backward(&Tensor::from_vec(&shape, r.clone())?, &y);
    let analytic = vec![dx.into_data()];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let y = tanh_forward(&Tensor::from_vec(&shape, g[0].clone())?);
        Ok(Some(dot(y.data(), &r)))
    })
}

/// Max pooling on a tie-free input with odd spatial dims.
pub fn check_maxpool(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [2, 2, 7, 6];
    let len: usize = shape.iter().product();
    // A shuffled ramp: distinct values at least 1e-2 apart.
    let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 1e-2).collect();
    for i in (1..len).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let mut groups = vec![values];
    let x = Tensor::from_vec(&shape, groups[0].clone())?;
    let (y, cache) = maxpool2_forward(&x)?;
    let r = uniform(&mut rng, y.data().len(), 1.0);
    let dx = maxpool2_backward(&Tensor::from_vec(y.shape(), r.clone())?, &cache);
    let analytic = vec![dx.into_data()];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let (y, c) = maxpool2_forward(&Tensor::from_vec(&shape, g[0].clone())?)?;
        Ok((c == cache).then(|| dot(y.data(), &r)))
    })
}

pub fn check_dense(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, inputs, outputs) = (3, 7, 5);
    let mut groups = vec![
        uniform(&mut rng, batch * inputs, 1.0),
        uniform(&mut rng, inputs * outputs, 1.0),
        uniform(&mut rng, outputs, 1.0),
    ];
    let r = uniform(&mut rng, batch * outputs, 1.0);
    let build = |g: &[Vec<f64>]| -> Result<(Tensor<f64>, Dense<f64>)> {
        let layer = Dense {
            inputs,
            outputs,
            weight: g[1].clone(),
            bias: g[2].clone(),
        };
        Ok((Tensor::from_vec(&[batch, inputs], g[0].clone())?, layer))
    };
    let (x, layer) = build(&groups)?;
    let (dx, dw, db) = dense_backward(&Tensor::from_vec(&[batch, outputs], r.clone())?, &x, &layer);
    let analytic = vec![dx.into_data(), dw, db];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let (x, layer) = build(g)?;
        Ok(Some(dot(dense_forward(&x, &layer)?.data(), &r)))
    })
}

/// Softmax cross-entropy on random logits, labels and row weights.
pub fn check_softmax_cross_entropy(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 5;
    let labels: Vec<u8> = (0..batch).map(|_| rng.random_range(0..=1)).collect();
    let weights: Vec<f64> = (0..batch).map(|_| rng.random_range(1..=3) as f64).collect();
    let mut groups = vec![uniform(&mut rng, batch * 2, 3.0)];
    let logits = Tensor::from_vec(&[batch, 2], groups[0].clone())?;
    let (_, grad) = softmax_cross_entropy(&logits, &labels, Some(&weights))?;
    let analytic = vec![grad.into_data()];
    let picks = every_coordinate(&groups);
    fd_check(&mut groups, &analytic, &picks, |g| {
        let logits = Tensor::from_vec(&[batch, 2], g[0].clone())?;
        Ok(Some(softmax_cross_entropy(&logits, &labels, Some(&weights))?.0))
    })
}

/// Whole network in train mode on a 2-sample batch.
///
/// Checks `per_tensor` random coordinates of every parameter tensor and of
/// the input. Perturbations that change any pooling argmax are skipped.
pub fn check_network(
    seed: u64,
    bands: usize,
    endmembers: usize,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::new(bands, endmembers)?;
    let n = arch.input_size();
    let mut net = Network::<f64>::new(arch, seed);
    // Non-trivial scale, shift and biases so every parameter matters.
    for p in net.params_mut() {
        if p.iter().all(|&v| v == 0.0 || v == 1.0) {
            for v in p.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
    }
    let x = Tensor::from_vec(&[2, 1, n, n], uniform(&mut rng, 2 * n * n, 1.0))?;
    let r = uniform(&mut rng, 4, 1.0);

    let (_, cache) = net.forward_train(&x, None)?;
    let base_argmax: Vec<Vec<u32>> = cache.pool_argmax().iter().map(|a| a.to_vec()).collect();
    let (grads, dx) = net.backward(&cache, &Tensor::from_vec(&[2, 2], r.clone())?, true);
    let mut analytic = grads.tensors;
    analytic.push(dx.expect("asked for").into_data());

    let mut groups: Vec<Vec<f64>> = net.params().iter().map(|p| p.to_vec()).collect();
    groups.push(x.data().to_vec());
    let mut picks = Vec::new();
    for (g, v) in groups.iter().enumerate() {
        let take = per_tensor.min(v.len());
        picks.extend(sample(&mut rng, v.len(), take).into_iter().map(|i| (g, i)));
    }
    let input = groups.len() - 1;
    fd_check(&mut groups, &analytic, &picks, |g| {
        for (p, v) in net.params_mut().into_iter().zip(g) {
            p.copy_from_slice(v);
        }
        let x = Tensor::from_vec(&[2, 1, n, n], g[input].clone())?;
        let (logits, c) = net.forward_train(&x, None)?;
        let same = c
            .pool_argmax()
            .iter()
            .zip(&base_argmax)
            .all(|(a, b)| *a == b.as_slice());
        Ok(same.then(|| dot(logits.data(), &r)))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAYER_TOL: f64 = 1e-6;

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
        assert!((rel_error(0.0, 1e-9) - 1e-7).abs() < 1e-20);
    }

    #[test]
    fn layers_match_finite_differences() {
        for seed in 0..3 {
            for (name, report) in [
                ("lsconv", check_lsconv(seed)),
                ("batchnorm", check_batchnorm(seed)),
                ("tanh", check_tanh(seed)),
                ("maxpool", check_maxpool(seed)),
                ("dense", check_dense(seed)),
                ("softmax", check_softmax_cross_entropy(seed)),
            ] {
                let report = report.unwrap();
                assert!(report.checked > 0);
                assert!(
                    report.max_rel_error <= LAYER_TOL,
                    "{name} seed {seed}: {report:?}"
                );
            }
        }
    }

    #[test]
    fn small_network_matches_finite_differences() {
        let report = check_network(1, 8, 4, 4).unwrap();
        assert!(report.checked > 50, "{report:?}");
        assert!(report.max_rel_error <= 1e-5, "{report:?}");
    }
}
