use super::Scalar;
use crate::error::{Error, Result};

/// Accumulated squared gradients, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState<T> {
    pub accumulators: Vec<Vec<T>>,
}

impl<T: Scalar> AdagradState<T> {
    pub fn zeros_like(params: &[&[T]]) -> Self {
        Self {
            accumulators: params.iter().map(|p| vec![T::zero(); p.len()]).collect(),
        }
    }
}

/// `acc += g^2; p -= lr * g / (sqrt(acc) + eps)`, elementwise.
pub fn adagrad_step<T: Scalar>(
    params: &mut [&mut [T]],
    grads: &[Vec<T>],
    state: &mut AdagradState<T>,
    lr: T,
    eps: T,
) -> Result<()> {
    let shapes_match = params.len() == grads.len()
        && params.len() == state.accumulators.len()
        && params
            .iter()
            .zip(grads)
            .zip(&state.accumulators)
            .all(|((p, g), a)| p.len() == g.len() && p.len() == a.len());
    if !shapes_match {
        return Err(Error::Shape(
            "parameter, gradient and accumulator shapes differ".into(),
        ));
    }
    for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut state.accumulators) {
        for ((w, &gi), a) in p.iter_mut().zip(g).zip(acc.iter_mut()) {
            *a += gi * gi;
            *w -= lr * gi / (a.sqrt() + eps);
        }
    }
    Ok(())
}
