use super::{gemm, Scalar, Tensor, View};
use crate::error::{Error, Result};

/// Fully connected layer, `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }
}

pub fn dense_forward<T: Scalar>(x: &Tensor<T>, layer: &Dense<T>) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[1] != layer.inputs {
        return Err(Error::Shape(format!(
            "dense layer with {} inputs got {s:?}",
            layer.inputs
        )));
    }
    let batch = s[0];
    let mut out = vec![T::zero(); batch * layer.outputs];
    for row in out.chunks_mut(layer.outputs) {
        row.copy_from_slice(&layer.bias);
    }
    gemm(
        T::one(),
        View::rm(x.data(), batch, layer.inputs),
        View::rm(&layer.weight, layer.outputs, layer.inputs).t(),
        T::one(),
        &mut out,
        layer.outputs,
        1,
    );
    Tensor::from_vec(&[batch, layer.outputs], out)
}

/// Returns `(dx, dW, db)`.
pub fn dense_backward<T: Scalar>(
    dy: &Tensor<T>,
    x: &Tensor<T>,
    layer: &Dense<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let batch = x.shape()[0];
    assert_eq!(dy.shape(), &[batch, layer.outputs], "dense gradient shape");
    let mut dw = vec![T::zero(); layer.outputs * layer.inputs];
    gemm(
        T::one(),
        View::rm(dy.data(), batch, layer.outputs).t(),
        View::rm(x.data(), batch, layer.inputs),
        T::zero(),
        &mut dw,
        layer.inputs,
        1,
    );
    let mut db = vec![T::zero(); layer.outputs];
    for row in dy.data().chunks(layer.outputs) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![T::zero(); batch * layer.inputs];
    gemm(
        T::one(),
        View::rm(dy.data(), batch, layer.outputs),
        View::rm(&layer.weight, layer.outputs, layer.inputs),
        T::zero(),
        &mut dx,
        layer.inputs,
        1,
    );
    (
        Tensor::from_vec(&[batch, layer.inputs], dx).expect("shape"),
        dw,
        db,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weights_reproduce_input() {
        let mut layer = Dense::<f64>::zeros(3, 3);
        for i in 0..3 {
            layer.weight[i * 3 + i] = 1.0;
        }
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.25, -0.125]).unwrap();
        assert_eq!(dense_forward(&x, &layer).unwrap(), x);
    }

    #[test]
    fn zero_weights_broadcast_bias() {
        let mut layer = Dense::<f64>::zeros(4, 2);
        layer.bias = vec![0.5, -1.0];
        let x = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
        let y = dense_forward(&x, &layer).unwrap();
        assert_eq!(y.data(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn wrong_width_is_an_error() {
        let layer = Dense::<f32>::zeros(4, 2);
        assert!(dense_forward(&Tensor::zeros(&[1, 3]), &layer).is_err());
    }
}
