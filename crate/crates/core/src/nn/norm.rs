use rayon::prelude::*;

use super::{lane_sum, Mode, Scalar, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch normalization state.
///
/// Channels are axis 1; every other non-batch axis is reduced over.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    /// False until the first train-mode update.
    pub initialized: bool,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            initialized: false,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Folds batch statistics into the running estimates.
    ///
    /// `running = momentum * running + (1 - momentum) * batch`; the first
    /// update copies the batch statistics.
    pub fn update_running(&mut self, stats: &BnStats<T>, momentum: T) {
        if !self.initialized {
            self.running_mean.copy_from_slice(&stats.mean);
            self.running_var.copy_from_slice(&stats.var);
            self.initialized = true;
            return;
        }
        let keep = T::one() - momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = momentum * self.running_mean[c] + keep * stats.mean[c];
            self.running_var[c] = momentum * self.running_var[c] + keep * stats.var[c];
        }
    }
}

/// Batch mean and (biased) variance per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    weights: Vec<T>,
    channels: usize,
    spatial: usize,
}

/// What a train-mode forward leaves for the backward pass and the running statistics.
pub type TrainPass<T> = (BnCache<T>, BnStats<T>);

fn dims<T: Scalar>(x: &Tensor<T>, bn: &BatchNorm<T>) -> Result<(usize, usize, usize)> {
    let s = x.shape();
    if s.len() < 2 || s[1] != bn.channels() {
        return Err(Error::Shape(format!(
            "batch norm over {} channels got input {s:?}",
            bn.channels()
        )));
    }
    Ok((s[0], s[1], s[2..].iter().product()))
}

/// Batch normalization.
///
/// `weights` gives each batch row a multiplicity (a row standing for several
/// identical samples); `None` means all ones. Train mode returns the cache for
/// backward and the batch statistics; running statistics are not touched here.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    bn: &BatchNorm<T>,
    mode: Mode,
    weights: Option<&[T]>,
    eps: T,
) -> Result<(Tensor<T>, Option<TrainPass<T>>)> {
    let (batch, channels, spatial) = dims(x, bn)?;
    let xd = x.data();
    let mut out = Tensor::zeros(x.shape());
    let od = out.data_mut();
    let at = |s: usize, c: usize| (s * channels + c) * spatial;

    if mode == Mode::Eval {
        if !bn.initialized {
            return Err(Error::Numeric {
                iteration: 0,
                detail: "batch norm evaluated before any running-statistics update".into(),
            });
        }
        od.par_chunks_mut(spatial)
            .zip(xd.par_chunks(spatial))
            .enumerate()
            .for_each(|(i, (o, x))| {
                let c = i % channels;
                let inv = T::one() / (bn.running_var[c] + eps).sqrt();
                let (g, b, m) = (bn.gamma[c], bn.beta[c], bn.running_mean[c]);
                for (o, &v) in o.iter_mut().zip(x) {
                    *o = g * (v - m) * inv + b;
                }
            });
        return Ok((out, None));
    }

    let weights: Vec<T> = match weights {
        Some(w) if w.len() == batch => w.to_vec(),
        Some(w) => {
            return Err(Error::Shape(format!(
                "{} sample weights for a batch of {batch}",
                w.len()
            )))
        }
        None => vec![T::one(); batch],
    };
    let total: T = weights.iter().copied().sum();
    if total < T::from_f64(2.0) {
        return Err(Error::Shape(
            "batch norm in train mode needs at least two samples".into(),
        ));
    }
    let count = total * T::from_f64(spatial as f64);

    let plane = |s: usize, c: usize| &xd[at(s, c)..at(s, c) + spatial];
    let stats: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let mut sum = T::zero();
            for (s, &w) in weights.iter().enumerate() {
                let row = plane(s, c);
                sum += w * lane_sum(spatial, |p| row[p]);
            }
            let mu = sum / count;
            let mut sq = T::zero();
            for (s, &w) in weights.iter().enumerate() {
                let row = plane(s, c);
                sq += w * lane_sum(spatial, |p| (row[p] - mu) * (row[p] - mu));
            }
            (mu, sq / count)
        })
        .collect();
    let (mean, var): (Vec<T>, Vec<T>) = stats.into_iter().unzip();
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    od.par_chunks_mut(spatial)
        .zip(xhat.par_chunks_mut(spatial))
        .zip(xd.par_chunks(spatial))
        .enumerate()
        .for_each(|(i, ((o, h), x))| {
            let c = i % channels;
            let (mu, inv) = (mean[c], inv_std[c]);
            for ((o, h), &v) in o.iter_mut().zip(h.iter_mut()).zip(x) {
                *h = (v - mu) * inv;
                *o = bn.gamma[c] * *h + bn.beta[c];
            }
        });
    let cache = BnCache {
        xhat,
        inv_std,
        weights,
        channels,
        spatial,
    };
    Ok((out, Some((cache, BnStats { mean, var }))))
}

/// Returns `(dx, dgamma, dbeta)` for a train-mode forward.
pub fn batchnorm_backward<T: Scalar>(
    dy: &Tensor<T>,
    bn: &BatchNorm<T>,
    cache: &BnCache<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let (channels, spatial) = (cache.channels, cache.spatial);
    let batch = cache.weights.len();
    assert_eq!(dy.data().len(), batch * channels * spatial, "batch norm gradient shape");
    let dd = dy.data();
    let total: T = cache.weights.iter().copied().sum();
    let count = total * T::from_f64(spatial as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let dxd = dx.data_mut();
    let sums: Vec<(T, T)> = (0..channels)
        .into_par_iter()
        .map(|c| {
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for s in 0..batch {
                let base = (s * channels + c) * spatial;
                let (g, h) = (&dd[base..base + spatial], &cache.xhat[base..base + spatial]);
                s1 += lane_sum(spatial, |p| g[p]);
                s2 += lane_sum(spatial, |p| g[p] * h[p]);
            }
            (s1, s2)
        })
        .collect();
    let (dbeta, dgamma): (Vec<T>, Vec<T>) = sums.into_iter().unzip();
    dxd.par_chunks_mut(spatial)
        .zip(dd.par_chunks(spatial))
        .zip(cache.xhat.par_chunks(spatial))
        .enumerate()
        .for_each(|(i, ((dx, g), h))| {
            let (s, c) = (i / channels, i % channels);
            let w = cache.weights[s];
            let scale = bn.gamma[c] * cache.inv_std[c];
            let (m1, m2) = (dbeta[c] / count, dgamma[c] / count);
            for ((dx, &g), &h) in dx.iter_mut().zip(g).zip(h) {
                *dx = scale * (g - w * m1 - w * h * m2);
            }
        });
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_variance_channel_outputs_shift() {
        let mut bn = BatchNorm::<f64>::new(1);
        bn.beta[0] = 0.25;
        let x = Tensor::from_vec(&[3, 1], vec![2.0; 3]).unwrap();
        let (y, _) = batchnorm_forward(&x, &bn, Mode::Train, None, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn standardized_batch_is_a_fixed_point() {
        let bn = BatchNorm::<f64>::new(1);
        let x = Tensor::from_vec(&[4, 1], vec![-1.0, 1.0, -1.0, 1.0]).unwrap();
        let (y, _) = batchnorm_forward(&x, &bn, Mode::Train, None, 1e-5).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn eval_before_update_is_an_error() {
        let bn = BatchNorm::<f32>::new(2);
        let x = Tensor::zeros(&[2, 2, 3, 3]);
        assert!(batchnorm_forward(&x, &bn, Mode::Eval, None, 1e-5).is_err());
    }

    #[test]
    fn single_sample_train_batch_is_an_error() {
        let bn = BatchNorm::<f32>::new(2);
        let x = Tensor::zeros(&[1, 2]);
        assert!(batchnorm_forward(&x, &bn, Mode::Train, None, 1e-5).is_err());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut bn = BatchNorm::<f64>::new(1);
        let first = BnStats {
            mean: vec![2.0],
            var: vec![4.0],
        };
        bn.update_running(&first, 0.9);
        assert_eq!((bn.running_mean[0], bn.running_var[0]), (2.0, 4.0));
        let second = BnStats {
            mean: vec![12.0],
            var: vec![14.0],
        };
        bn.update_running(&second, 0.9);
        assert!((bn.running_mean[0] - 3.0).abs() < 1e-12);
        assert!((bn.running_var[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_rows_equal_duplicated_rows() {
        let bn = BatchNorm::<f64>::new(2);
        let rows = [[0.3, -1.2], [1.5, 0.4], [-0.7, 2.2]];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let x = Tensor::from_vec(&[3, 2], flat).unwrap();
        let w = [2.0, 1.0, 1.0];
        let (yw, cw) = batchnorm_forward(&x, &bn, Mode::Train, Some(&w), 1e-5).unwrap();
        let dup: Vec<f64> = [rows[0], rows[0], rows[1], rows[2]]
            .iter()
            .flatten()
            .copied()
            .collect();
        let xd = Tensor::from_vec(&[4, 2], dup).unwrap();
        let (yd, cd) = batchnorm_forward(&xd, &bn, Mode::Train, None, 1e-5).unwrap();
        assert!((yw.data()[0] - yd.data()[0]).abs() < 1e-12);
        assert!((yw.data()[5] - yd.data()[7]).abs() < 1e-12);

        // Upstream gradient of the weighted row is the sum over its copies.
        let g = [[0.5, -0.1], [0.2, 0.3], [-0.4, 0.9], [0.05, 0.6]];
        let gd = Tensor::from_vec(&[4, 2], g.iter().flatten().copied().collect()).unwrap();
        let gw = Tensor::from_vec(
            &[3, 2],
            vec![g[0][0] + g[1][0], g[0][1] + g[1][1], g[2][0], g[2][1], g[3][0], g[3][1]],
        )
        .unwrap();
        let (dxw, ggw, gbw) = batchnorm_backward(&gw, &bn, &cw.unwrap().0);
        let (dxd, ggd, gbd) = batchnorm_backward(&gd, &bn, &cd.unwrap().0);
        for c in 0..2 {
            assert!((ggw[c] - ggd[c]).abs() < 1e-12);
            assert!((gbw[c] - gbd[c]).abs() < 1e-12);
            assert!((dxw.data()[c] - dxd.data()[c] - dxd.data()[2 + c]).abs() < 1e-12);
            assert!((dxw.data()[4 + c] - dxd.data()[6 + c]).abs() < 1e-12);
        }
    }
}
