//! A small from-scratch network engine for the change-detection classifier.
//!
//! Four locally-shared convolution blocks (conv + batch norm + tanh + 2x2 max
//! pooling) followed by two fully connected layers. Everything is generic
//! over [`Scalar`] so the same code runs in f32 for training and in f64 for
//! gradient checks.

mod adagrad;
mod checkpoint;
mod dense;
pub mod gradcheck;
mod lsconv;
mod network;
mod norm;
mod pool;
mod train;

use std::fmt;

use num_traits::{Float, NumAssign};

pub use adagrad::{adagrad_step, AdagradState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dense::{dense_backward, dense_forward, Dense};
pub use lsconv::{lsconv_backward, lsconv_forward, LsConv, LsConvCache, LsConvGrads, RegionMask};
pub use network::{
    derive_region_masks, softmax_cross_entropy, Architecture, ForwardCache, Gradients, Mode,
    Network, CHANNELS, FC1_WIDTH, FC2_WIDTH, KERNELS,
};
pub use norm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache};
pub use pool::{maxpool2_backward, maxpool2_forward, tanh_backward, tanh_forward, PoolCache};
pub use train::{train, LossPoint, SampleSource, TrainConfig, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

/// Floating-point element type of the network.
pub trait Scalar:
    Float + NumAssign + Default + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    const PRECISION: Precision;
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Elementwise tanh of `src` into `dst`.
    fn tanh_into(src: &[Self], dst: &mut [Self]);

    /// `C <- alpha * A B + beta * C` on strided views.
    ///
    /// # Safety
    /// All views must stay in bounds of their backing storage and `c` must not
    /// alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::F32;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }

    /// Odd rational approximation on a clamped range; a few ulp from tanh
    /// and, unlike the libm call, vectorizable.
    fn tanh_into(src: &[f32], dst: &mut [f32]) {
        const CLAMP: f32 = 7.998_811_7;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_672e-11,
            2.000_188e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_7e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        for (d, &v) in dst.iter_mut().zip(src) {
            let x = v.clamp(-CLAMP, CLAMP);
            let x2 = x * x;
            let mut p = A[6];
            for &a in A[..6].iter().rev() {
                p = p * x2 + a;
            }
            let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
            *d = x * p / q;
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::F64;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut raw = [0u8; 8];
        raw.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(raw)
    }

    fn tanh_into(src: &[f64], dst: &mut [f64]) {
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = v.tanh();
        }
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T> View<'a, T> {
    pub(crate) fn new(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        assert!(
            rows == 0 || cols == 0 || (rows - 1) * rs + (cols - 1) * cs < data.len(),
            "matrix view out of bounds"
        );
        Self {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    /// Dense row-major `rows x cols`.
    pub(crate) fn rm(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::new(data, rows, cols, cols, 1)
    }

    pub(crate) fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `C <- alpha * A B + beta * C`, with `C` a strided window of `c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm output out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * rsc + j * csc];
                *v = if beta == T::zero() { T::zero() } else { beta * *v };
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above and `c` is a unique borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Dense tensor in NCHW (or N x features) order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> crate::Result<Self> {
        let count: usize = shape.iter().product();
        if data.len() != count {
            return Err(crate::Error::Shape(format!(
                "{} values for tensor shape {shape:?}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Same values viewed under another shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Reduction over `f(i)` for `i in 0..len` with eight interleaved
/// accumulators, which lets the compiler vectorize float sums. The order is
/// fixed, so the result is deterministic.
#[inline]
pub(crate) fn lane_sum<T: Scalar>(len: usize, f: impl Fn(usize) -> T) -> T {
    let mut acc = [T::zero(); 8];
    let full = len / 8 * 8;
    for i in (0..full).step_by(8) {
        for (l, a) in acc.iter_mut().enumerate() {
            *a += f(i + l);
        }
    }
    let mut tail = T::zero();
    for i in full..len {
        tail += f(i);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(1.0, View::rm(&a, 2, 3), View::rm(&b, 3, 4), 0.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // (A^T)^T B through a transposed view of a 3x2 buffer
        let at: Vec<f64> = (0..3).flat_map(|k| (0..2).map(move |i| (i * 3 + k) as f64)).collect();
        let mut c2 = vec![0.0; 8];
        gemm(1.0, View::rm(&at, 3, 2).t(), View::rm(&b, 3, 4), 0.0, &mut c2, 4, 1);
        assert_eq!(c, c2);
    }

    #[test]
    fn fast_f32_tanh_is_accurate() {
        let xs: Vec<f32> = (-200_000..=200_000).map(|i| i as f32 * 1e-4).collect();
        let mut ys = vec![0f32; xs.len()];
        f32::tanh_into(&xs, &mut ys);
        let worst = xs
            .iter()
            .zip(&ys)
            .map(|(&x, &y)| ((x as f64).tanh() - y as f64).abs())
            .fold(0.0, f64::max);
        assert!(worst < 5e-7, "max abs error {worst}");
        let mut big = [0f32; 4];
        f32::tanh_into(&[50.0, -50.0, 0.0, f32::MAX], &mut big);
        assert_eq!(big[2], 0.0);
        assert!((big[0] - 1.0).abs() < 1e-6 && (big[1] + 1.0).abs() < 1e-6);
        // the rational fit wobbles by a few ulps near saturation
        assert!(ys.windows(2).all(|w| w[1] >= w[0] - 5e-7));
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]).reshape(&[3, 2]);
        assert_eq!(t.shape(), &[3, 2]);
    }
}
