use rayon::prelude::*;

use super::{gemm, lane_sum, Scalar, Tensor, View};
use crate::error::{Error, Result};

/// Which kernel bank produces each output position of one conv layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    size: usize,
    cells: Vec<bool>,
}

impl RegionMask {
    /// Square `size x size` mask whose top-left `extent x extent` block is spectral.
    pub fn square(size: usize, extent: usize) -> Self {
        let cells = (0..size * size)
            .map(|i| i / size < extent && i % size < extent)
            .collect();
        Self { size, cells }
    }

    pub fn from_cells(size: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != size * size {
            return Err(Error::Shape(format!(
                "{} mask cells for a {size}x{size} layer",
                cells.len()
            )));
        }
        Ok(Self { size, cells })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_spectral(&self, r: usize, c: usize) -> bool {
        self.cells[r * self.size + c]
    }

    /// Side of the leading spectral block (0 when the top-left cell is abundance).
    pub fn spectral_extent(&self) -> usize {
        (0..self.size)
            .take_while(|&i| self.is_spectral(i, i))
            .count()
    }

    fn split_positions(&self) -> (Vec<usize>, Vec<usize>) {
        let mut spectral = Vec::new();
        let mut abundance = Vec::new();
        for (i, &s) in self.cells.iter().enumerate() {
            if s {
                spectral.push(i);
            } else {
                abundance.push(i);
            }
        }
        (spectral, abundance)
    }
}

/// Convolution with two kernel banks selected per output position by a mask.
///
/// Banks are `out x in x k x k`, row-major. Same padding, stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LsConv<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spectral: Vec<T>,
    pub abundance: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LsConv<T> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        let n = out_channels * in_channels * kernel * kernel;
        Self {
            in_channels,
            out_channels,
            kernel,
            spectral: vec![T::zero(); n],
            abundance: vec![T::zero(); n],
            bias: vec![T::zero(); out_channels],
        }
    }
}

/// Forward input and region split, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LsConvCache<T> {
    input: Tensor<T>,
    spectral: Vec<usize>,
    abundance: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsConvGrads<T> {
    pub spectral: Vec<T>,
    pub abundance: Vec<T>,
    pub bias: Vec<T>,
}

/// Samples per work unit. Column matrices are built per chunk so they stay
/// in cache; the chunking is fixed, so results do not depend on the number
/// of threads.
const CHUNK: usize = 2;

/// A run of consecutive positions on one row of a region, and where it
/// starts within the region's columns for one sample.
#[derive(Debug, Clone, Copy)]
struct Run {
    col: usize,
    row: usize,
    c0: usize,
    len: usize,
}

fn runs(positions: &[usize], w: usize) -> Vec<Run> {
    let mut out: Vec<Run> = Vec::new();
    for (col, &p) in positions.iter().enumerate() {
        let (row, c) = (p / w, p % w);
        match out.last_mut() {
            Some(r) if r.row == row && r.c0 + r.len == c => r.len += 1,
            _ => out.push(Run { col, row, c0: c, len: 1 }),
        }
    }
    out
}

/// Per-layer geometry shared by the forward and backward passes.
///
/// Column matrices hold, for a chunk of samples, the spectral positions of
/// every sample followed by the abundance positions of every sample.
struct Plan {
    cin: usize,
    cout: usize,
    k: usize,
    h: usize,
    w: usize,
    ns: usize,
    na: usize,
    spectral: Vec<Run>,
    abundance: Vec<Run>,
}

impl Plan {
    fn new<T: Scalar>(conv: &LsConv<T>, h: usize, w: usize, spectral: &[usize], abundance: &[usize]) -> Self {
        Self {
            cin: conv.in_channels,
            cout: conv.out_channels,
            k: conv.kernel,
            h,
            w,
            ns: spectral.len(),
            na: abundance.len(),
            spectral: runs(spectral, w),
            abundance: runs(abundance, w),
        }
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Columns of a chunk of `nb` samples, and where the abundance block starts.
    fn columns(&self, nb: usize) -> (usize, usize) {
        (nb * self.plane(), nb * self.ns)
    }

    /// Calls `f(region runs, column offset of the sample's block, sample)`
    /// for both regions of every sample in a chunk.
    fn blocks(&self, nb: usize, mut f: impl FnMut(&[Run], usize, usize)) {
        let split = nb * self.ns;
        for s in 0..nb {
            f(&self.spectral, s * self.ns, s);
            f(&self.abundance, split + s * self.na, s);
        }
    }

    /// Source row and column shift of kernel tap `tap`.
    fn shift(&self, tap: usize) -> (isize, isize) {
        let pad = (self.k / 2) as isize;
        ((tap / self.k) as isize - pad, (tap % self.k) as isize - pad)
    }

    /// For a run shifted by `(di, dj)`: the source row and the valid
    /// sub-range `lo..hi` of the run, or `None` when all of it is padding.
    fn window(&self, run: &Run, di: isize, dj: isize) -> Option<(usize, usize, usize)> {
        let sr = run.row as isize + di;
        if sr < 0 || sr >= self.h as isize {
            return None;
        }
        let sc0 = run.c0 as isize + dj;
        let lo = (-sc0).clamp(0, run.len as isize) as usize;
        let hi = (self.w as isize - sc0).clamp(0, run.len as isize) as usize;
        if hi <= lo {
            return None;
        }
        Some(((sr as usize) * self.w + (sc0 + lo as isize) as usize, lo, hi))
    }

    /// im2col of `nb` samples into a `rows x columns` matrix.
    fn im2col<T: Scalar>(&self, x: &[T], nb: usize) -> Vec<T> {
        let (ncols, _) = self.columns(nb);
        let taps = self.k * self.k;
        let plane = self.plane();
        let mut cols = vec![T::zero(); self.rows() * ncols];
        for (row, dst) in cols.chunks_mut(ncols).enumerate() {
            let (ci, (di, dj)) = (row / taps, self.shift(row % taps));
            self.blocks(nb, |runs, base, s| {
                let src = &x[(s * self.cin + ci) * plane..][..plane];
                for run in runs {
                    let d = &mut dst[base + run.col..][..run.len];
                    if let Some((at, lo, hi)) = self.window(run, di, dj) {
                        d[lo..hi].copy_from_slice(&src[at..at + hi - lo]);
                    }
                }
            });
        }
        cols
    }

    /// Inverse of [`Plan::im2col`], accumulating into `dx`.
    fn col2im<T: Scalar>(&self, dcols: &[T], nb: usize, dx: &mut [T]) {
        let (ncols, _) = self.columns(nb);
        let taps = self.k * self.k;
        let plane = self.plane();
        for (row, src) in dcols.chunks(ncols).enumerate() {
            let (ci, (di, dj)) = (row / taps, self.shift(row % taps));
            self.blocks(nb, |runs, base, s| {
                let dst = &mut dx[(s * self.cin + ci) * plane..][..plane];
                for run in runs {
                    if let Some((at, lo, hi)) = self.window(run, di, dj) {
                        let v = &src[base + run.col + lo..base + run.col + hi];
                        for (o, &g) in dst[at..at + hi - lo].iter_mut().zip(v) {
                            *o += g;
                        }
                    }
                }
            });
        }
    }

    /// Calls `f(co, matrix offset, plane offset, len)` for every run of
    /// every output channel, mapping a `cout x columns` matrix onto the
    /// chunk's output planes.
    fn for_each_output_run(&self, nb: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (ncols, _) = self.columns(nb);
        let plane = self.plane();
        for co in 0..self.cout {
            self.blocks(nb, |runs, base, s| {
                let p0 = (s * self.cout + co) * plane;
                for run in runs {
                    f(co, co * ncols + base + run.col, p0 + run.row * self.w + run.c0, run.len);
                }
            });
        }
    }

}

/// `out[:, cols] = bank * input[:, cols]` for the spectral and abundance
/// column blocks, with `out` a `cout x ncols` buffer.
fn bank_gemm<T: Scalar>(
    conv: &LsConv<T>,
    rows: usize,
    cols: &[T],
    ncols: usize,
    split: usize,
    out: &mut [T],
) {
    let cout = conv.out_channels;
    if split > 0 {
        gemm(
            T::one(),
            View::rm(&conv.spectral, cout, rows),
            View::new(cols, rows, split, ncols, 1),
            T::zero(),
            out,
            ncols,
            1,
        );
    }
    if split < ncols {
        gemm(
            T::one(),
            View::rm(&conv.abundance, cout, rows),
            View::new(&cols[split..], rows, ncols - split, ncols, 1),
            T::zero(),
            &mut out[split..],
            ncols,
            1,
        );
    }
}

fn check_input<T: Scalar>(x: &Tensor<T>, conv: &LsConv<T>, mask: &RegionMask) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[1] != conv.in_channels || s[2] != mask.size || s[3] != mask.size {
        return Err(Error::Shape(format!(
            "lsconv input {s:?} does not match {} channels on a {}x{} mask",
            conv.in_channels, mask.size, mask.size
        )));
    }
    Ok(())
}

pub fn lsconv_forward<T: Scalar>(
    x: &Tensor<T>,
    conv: &LsConv<T>,
    mask: &RegionMask,
) -> Result<(Tensor<T>, LsConvCache<T>)> {
    check_input(x, conv, mask)?;
    let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let (spectral, abundance) = mask.split_positions();
    let plan = Plan::new(conv, h, w, &spectral, &abundance);
    let (cin, cout, hw) = (plan.cin, plan.cout, plan.plane());
    let rows = plan.rows();

    let mut out = Tensor::zeros(&[batch, cout, h, w]);
    out.data_mut()
        .par_chunks_mut(CHUNK * cout * hw)
        .zip(x.data().par_chunks(CHUNK * cin * hw))
        .for_each(|(out_chunk, x_chunk)| {
            let nb = x_chunk.len() / (cin * hw);
            let (ncols, split) = plan.columns(nb);
            let cols = plan.im2col(x_chunk, nb);
            let mut y = vec![T::zero(); cout * ncols];
            bank_gemm(conv, rows, &cols, ncols, split, &mut y);
            plan.for_each_output_run(nb, |co, m, p, len| {
                let b = conv.bias[co];
                for (o, &v) in out_chunk[p..p + len].iter_mut().zip(&y[m..m + len]) {
                    *o = v + b;
                }
            });
        });
    let cache = LsConvCache {
        input: x.clone(),
        spectral,
        abundance,
    };
    Ok((out, cache))
}

struct ChunkGrads<T> {
    spectral: Vec<T>,
    abundance: Vec<T>,
    bias: Vec<T>,
    dx: Option<Vec<T>>,
}

/// Gradients for both banks and the bias, plus the input gradient if asked.
pub fn lsconv_backward<T: Scalar>(
    dy: &Tensor<T>,
    conv: &LsConv<T>,
    cache: &LsConvCache<T>,
    need_input_grad: bool,
) -> (Option<Tensor<T>>, LsConvGrads<T>) {
    let x = &cache.input;
    let (batch, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
    let plan = Plan::new(conv, h, w, &cache.spectral, &cache.abundance);
    let (cin, cout, hw) = (plan.cin, plan.cout, plan.plane());
    assert_eq!(dy.shape(), &[batch, cout, h, w], "lsconv upstream gradient shape");
    let rows = plan.rows();

    let partials: Vec<ChunkGrads<T>> = dy
        .data()
        .par_chunks(CHUNK * cout * hw)
        .zip(x.data().par_chunks(CHUNK * cin * hw))
        .map(|(dy_chunk, x_chunk)| {
            let nb = x_chunk.len() / (cin * hw);
            let (ncols, split) = plan.columns(nb);
            let mut g = vec![T::zero(); cout * ncols];
            plan.for_each_output_run(nb, |_, m, p, len| {
                g[m..m + len].copy_from_slice(&dy_chunk[p..p + len]);
            });
            let bias = g
                .chunks(ncols)
                .map(|row| lane_sum(row.len(), |i| row[i]))
                .collect();
            let cols = plan.im2col(x_chunk, nb);
            let mut spectral = vec![T::zero(); cout * rows];
            let mut abundance = vec![T::zero(); cout * rows];
            if split > 0 {
                gemm(
                    T::one(),
                    View::new(&g, cout, split, ncols, 1),
                    View::new(&cols, split, rows, 1, ncols),
                    T::zero(),
                    &mut spectral,
                    rows,
                    1,
                );
            }
            if split < ncols {
                gemm(
                    T::one(),
                    View::new(&g[split..], cout, ncols - split, ncols, 1),
                    View::new(&cols[split..], ncols - split, rows, 1, ncols),
                    T::zero(),
                    &mut abundance,
                    rows,
                    1,
                );
            }
            let dx = need_input_grad.then(|| {
                let mut dcols = cols;
                if split > 0 {
                    gemm(
                        T::one(),
                        View::rm(&conv.spectral, cout, rows).t(),
                        View::new(&g, cout, split, ncols, 1),
                        T::zero(),
                        &mut dcols,
                        ncols,
                        1,
                    );
                }
                if split < ncols {
                    gemm(
                        T::one(),
                        View::rm(&conv.abundance, cout, rows).t(),
                        View::new(&g[split..], cout, ncols - split, ncols, 1),
                        T::zero(),
                        &mut dcols[split..],
                        ncols,
                        1,
                    );
                }
                let mut dx = vec![T::zero(); x_chunk.len()];
                plan.col2im(&dcols, nb, &mut dx);
                dx
            });
            ChunkGrads {
                spectral,
                abundance,
                bias,
                dx,
            }
        })
        .collect();

    let mut grads = LsConvGrads {
        spectral: vec![T::zero(); cout * rows],
        abundance: vec![T::zero(); cout * rows],
        bias: vec![T::zero(); cout],
    };
    let mut dx = need_input_grad.then(|| Vec::with_capacity(x.data().len()));
    for part in partials {
        for (a, b) in grads.spectral.iter_mut().zip(&part.spectral) {
            *a += *b;
        }
        for (a, b) in grads.abundance.iter_mut().zip(&part.abundance) {
            *a += *b;
        }
        for (a, b) in grads.bias.iter_mut().zip(&part.bias) {
            *a += *b;
        }
        if let (Some(dx), Some(chunk)) = (dx.as_mut(), part.dx) {
            dx.extend(chunk);
        }
    }
    let dx = dx.map(|d| Tensor::from_vec(x.shape(), d).expect("input shape"));
    (dx, grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn random_conv(rng: &mut ChaCha8Rng, cin: usize, cout: usize, k: usize) -> LsConv<f64> {
        let n = cout * cin * k * k;
        LsConv {
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            spectral: random_vec(rng, n),
            abundance: random_vec(rng, n),
            bias: random_vec(rng, cout),
        }
    }

    /// Direct same-padding convolution with one bank.
    fn plain_conv(x: &Tensor<f64>, bank: &[f64], bias: &[f64], cout: usize, k: usize) -> Vec<f64> {
        let s = x.shape();
        let (b, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let pad = k as isize / 2;
        let mut out = vec![0.0; b * cout * h * w];
        for n in 0..b {
            for co in 0..cout {
                for r in 0..h {
                    for c in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let rr = r as isize + ki as isize - pad;
                                    let cc = c as isize + kj as isize - pad;
                                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                                        continue;
                                    }
                                    acc += bank[((co * cin + ci) * k + ki) * k + kj]
                                        * x.data()[((n * cin + ci) * h + rr as usize) * w
                                            + cc as usize];
                                }
                            }
                        }
                        out[((n * cout + co) * h + r) * w + c] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn positionwise_bank_selection_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Extent 1 with k = 5 shifts whole runs into the padding.
        for (k, extent) in [(3, 4), (5, 1), (5, 2), (3, 1), (1, 3)] {
            let conv = random_conv(&mut rng, 2, 3, k);
            let x = Tensor::from_vec(&[2, 2, 6, 6], random_vec(&mut rng, 144)).unwrap();
            let mask = RegionMask::square(6, extent);
            let (y, _) = lsconv_forward(&x, &conv, &mask).unwrap();
            let ys = plain_conv(&x, &conv.spectral, &conv.bias, 3, k);
            let ya = plain_conv(&x, &conv.abundance, &conv.bias, 3, k);
            for (i, &v) in y.data().iter().enumerate() {
                let p = i % 36;
                let want = if mask.is_spectral(p / 6, p % 6) { ys[i] } else { ya[i] };
                assert!((v - want).abs() < 1e-12, "k={k} extent={extent}");
            }
        }
    }

    #[test]
    fn all_ones_mask_is_plain_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = random_conv(&mut rng, 1, 4, 5);
        let x = Tensor::from_vec(&[1, 1, 7, 7], random_vec(&mut rng, 49)).unwrap();
        let (y, _) = lsconv_forward(&x, &conv, &RegionMask::square(7, 7)).unwrap();
        let want = plain_conv(&x, &conv.spectral, &conv.bias, 4, 5);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn equal_banks_ignore_the_mask_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut conv = random_conv(&mut rng, 2, 3, 3);
        conv.abundance = conv.spectral.clone();
        let x = Tensor::from_vec(&[3, 2, 5, 5], random_vec(&mut rng, 150)).unwrap();
        let (a, _) = lsconv_forward(&x, &conv, &RegionMask::square(5, 2)).unwrap();
        let (b, _) = lsconv_forward(&x, &conv, &RegionMask::square(5, 5)).unwrap();
        let (c, _) = lsconv_forward(&x, &conv, &RegionMask::square(5, 0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn bank_gradients_accumulate_only_over_their_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let conv = random_conv(&mut rng, 1, 2, 3);
        let x = Tensor::from_vec(&[1, 1, 4, 4], random_vec(&mut rng, 16)).unwrap();
        let (_, cache) = lsconv_forward(&x, &conv, &RegionMask::square(4, 4)).unwrap();
        let dy = Tensor::from_vec(&[1, 2, 4, 4], random_vec(&mut rng, 32)).unwrap();
        let (_, g) = lsconv_backward(&dy, &conv, &cache, false);
        assert!(g.abundance.iter().all(|&v| v == 0.0));
        assert!(g.spectral.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let conv = LsConv::<f64>::zeros(2, 3, 3);
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        assert!(lsconv_forward(&x, &conv, &RegionMask::square(5, 2)).is_err());
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        assert!(lsconv_forward(&x, &conv, &RegionMask::square(6, 2)).is_err());
    }

    #[test]
    fn mask_extent() {
        assert_eq!(RegionMask::square(10, 8).spectral_extent(), 8);
        assert_eq!(RegionMask::square(5, 0).spectral_extent(), 0);
        assert!(RegionMask::from_cells(2, vec![true; 3]).is_err());
    }
}
