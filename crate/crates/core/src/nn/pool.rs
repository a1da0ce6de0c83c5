use rayon::prelude::*;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Elements per parallel task in elementwise layers.
const PAR_CHUNK: usize = 1 << 14;

pub fn tanh_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = Tensor::zeros(x.shape());
    y.data_mut()
        .par_chunks_mut(PAR_CHUNK)
        .zip(x.data().par_chunks(PAR_CHUNK))
        .for_each(|(d, s)| T::tanh_into(s, d));
    y
}

/// Backward through tanh given its forward output `y`.
pub fn tanh_backward<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = dy
        .data()
        .par_iter()
        .zip(y.data())
        .map(|(&g, &t)| g * (T::one() - t * t))
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolCache {
    input_shape: Vec<usize>,
    /// Flat input index of the winner for every output element.
    argmax: Vec<u32>,
}

impl PoolCache {
    pub fn argmax(&self) -> &[u32] {
        &self.argmax
    }
}

/// 2x2 non-overlapping max pooling; odd trailing rows and columns are dropped.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, PoolCache)> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::Shape(format!("max pooling needs a 4-d input of at least 2x2, got {s:?}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xd = x.data();
    let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
    let mut argmax = vec![0u32; planes * oh * ow];
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(p, (od, am))| {
            let base = p * h * w;
            for r in 0..oh {
                for c in 0..ow {
                    let mut best = base + 2 * r * w + 2 * c;
                    for (dr, dc) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * r + dr) * w + 2 * c + dc;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                    od[r * ow + c] = xd[best];
                    am[r * ow + c] = best as u32;
                }
            }
        });
    let cache = PoolCache {
        input_shape: s.to_vec(),
        argmax,
    };
    Ok((out, cache))
}

pub fn maxpool2_backward<T: Scalar>(dy: &Tensor<T>, cache: &PoolCache) -> Tensor<T> {
    assert_eq!(dy.data().len(), cache.argmax.len(), "pooling gradient shape");
    let s = &cache.input_shape;
    let (plane, pooled) = (s[2] * s[3], (s[2] / 2) * (s[3] / 2));
    let mut dx = Tensor::zeros(s);
    dx.data_mut()
        .par_chunks_mut(plane)
        .zip(cache.argmax.par_chunks(pooled))
        .zip(dy.data().par_chunks(pooled))
        .enumerate()
        .for_each(|(p, ((dx, am), g))| {
            for (&i, &g) in am.iter().zip(g) {
                dx[i as usize - p * plane] += g;
            }
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tanh_values() {
        let x = Tensor::from_vec(&[1, 2], vec![0.0f64, 1.0]).unwrap();
        let y = tanh_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 1f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn constant_block_and_odd_dims() {
        let x = Tensor::from_vec(&[1, 1, 3, 3], vec![7.0f64; 9]).unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[7.0]);
        // first encountered wins a tie
        assert_eq!(cache.argmax(), &[0]);
    }

    #[test]
    fn gradient_routes_to_argmax() {
        let x = Tensor::from_vec(&[1, 1, 2, 4], vec![1.0f64, 5.0, 0.0, 0.0, 2.0, 3.0, 9.0, 0.0])
            .unwrap();
        let (y, cache) = maxpool2_forward(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 9.0]);
        let dy = Tensor::from_vec(&[1, 1, 1, 2], vec![1.5, -2.0]).unwrap();
        let dx = maxpool2_backward(&dy, &cache);
        assert_eq!(dx.data(), &[0.0, 1.5, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0]);
    }

    #[test]
    fn too_small_input() {
        let x = Tensor::<f32>::zeros(&[1, 1, 1, 4]);
        assert!(maxpool2_forward(&x).is_err());
    }
}
