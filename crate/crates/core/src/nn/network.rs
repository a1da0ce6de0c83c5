use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dense::{dense_backward, dense_forward, Dense};
use super::lsconv::{lsconv_backward, lsconv_forward, LsConv, LsConvCache, RegionMask};
use super::norm::{batchnorm_backward, batchnorm_forward, BatchNorm, BnCache, BnStats};
use super::pool::{maxpool2_backward, maxpool2_forward, tanh_backward, tanh_forward, PoolCache};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHANNELS: [usize; 4] = [32, 64, 128, 96];
pub const KERNELS: [usize; 4] = [5, 3, 3, 1];
pub const FC1_WIDTH: usize = 512;
pub const FC2_WIDTH: usize = 2;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Smallest matrix side that survives four 2x2 pools.
pub const MIN_INPUT_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Input geometry of the network, fixed by the band and endmember counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    bands: usize,
    endmembers: usize,
    masks: Vec<RegionMask>,
}

/// Bank masks for the four conv layers.
///
/// Layer `k` sees a `floor(n / 2^k)` square input whose top-left
/// `ceil(b / 2^k)` block (clipped to the input) uses the spectral bank.
pub fn derive_region_masks(bands: usize, endmembers: usize) -> Result<Vec<RegionMask>> {
    let n = bands + 2 * endmembers;
    if n < MIN_INPUT_SIZE {
        return Err(Error::Shape(format!(
            "matrix side {n} is below the minimum {MIN_INPUT_SIZE} for four 2x2 pools"
        )));
    }
    Ok((0..4)
        .map(|k| {
            let size = n >> k;
            let extent = bands.div_ceil(1 << k).min(size);
            RegionMask::square(size, extent)
        })
        .collect())
}

impl Architecture {
    pub fn new(bands: usize, endmembers: usize) -> Result<Self> {
        if bands == 0 {
            return Err(Error::Shape("network needs at least one band".into()));
        }
        Ok(Self {
            bands,
            endmembers,
            masks: derive_region_masks(bands, endmembers)?,
        })
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn endmembers(&self) -> usize {
        self.endmembers
    }

    /// Side `n = b + 2m` of the input matrices.
    pub fn input_size(&self) -> usize {
        self.bands + 2 * self.endmembers
    }

    pub fn masks(&self) -> &[RegionMask] {
        &self.masks
    }

    /// Length of the flattened features entering the first dense layer.
    pub fn flatten_len(&self) -> usize {
        let side = self.input_size() >> 4;
        CHANNELS[3] * side * side
    }
}

/// Trainable parameters plus batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    arch: Architecture,
    pub convs: Vec<LsConv<T>>,
    pub conv_norms: Vec<BatchNorm<T>>,
    pub fc1: Dense<T>,
    pub fc1_norm: BatchNorm<T>,
    pub fc2: Dense<T>,
    pub bn_eps: f64,
}

/// Everything the backward pass needs from one train-mode forward.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    batch: usize,
    weights: Option<Vec<T>>,
    convs: Vec<LsConvCache<T>>,
    conv_norms: Vec<BnCache<T>>,
    activations: Vec<Tensor<T>>,
    pools: Vec<PoolCache>,
    flat: Tensor<T>,
    fc1_norm: BnCache<T>,
    hidden: Tensor<T>,
    stats: Vec<BnStats<T>>,
}

impl<T> ForwardCache<T> {
    /// Argmax indices of every pooling layer, in layer order.
    pub fn pool_argmax(&self) -> Vec<&[u32]> {
        self.pools.iter().map(|p| p.argmax()).collect()
    }
}

/// Gradients in the order of [`Network::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

fn glorot<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n)
        .map(|_| T::from_f64(rng.random_range(-limit..=limit)))
        .collect()
}

impl<T: Scalar> Network<T> {
    /// Glorot-uniform weights, zero biases, unit batch-norm scale.
    pub fn new(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::with_capacity(4);
        let mut cin = 1;
        for (&cout, &k) in CHANNELS.iter().zip(&KERNELS) {
            let mut conv = LsConv::zeros(cin, cout, k);
            let n = conv.spectral.len();
            conv.spectral = glorot(&mut rng, n, cin * k * k, cout * k * k);
            conv.abundance = glorot(&mut rng, n, cin * k * k, cout * k * k);
            convs.push(conv);
            cin = cout;
        }
        let flat = arch.flatten_len();
        let mut fc1 = Dense::zeros(flat, FC1_WIDTH);
        fc1.weight = glorot(&mut rng, flat * FC1_WIDTH, flat, FC1_WIDTH);
        let mut fc2 = Dense::zeros(FC1_WIDTH, FC2_WIDTH);
        fc2.weight = glorot(&mut rng, FC1_WIDTH * FC2_WIDTH, FC1_WIDTH, FC2_WIDTH);
        Self {
            arch,
            convs,
            conv_norms: CHANNELS.iter().map(|&c| BatchNorm::new(c)).collect(),
            fc1,
            fc1_norm: BatchNorm::new(FC1_WIDTH),
            fc2,
            bn_eps: DEFAULT_BN_EPS,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    /// Names of the trainable tensors, in gradient order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 1..=4 {
            for part in ["spectral", "abundance", "bias"] {
                names.push(format!("conv{k}.{part}"));
            }
            names.push(format!("bn{k}.gamma"));
            names.push(format!("bn{k}.beta"));
        }
        for name in [
            "fc1.weight",
            "fc1.bias",
            "bn5.gamma",
            "bn5.beta",
            "fc2.weight",
            "fc2.bias",
        ] {
            names.push(name.to_string());
        }
        names
    }

    /// Shapes matching [`Network::param_names`].
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.conv_norms) {
            let bank = vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
            shapes.push(bank.clone());
            shapes.push(bank);
            shapes.push(vec![conv.out_channels]);
            shapes.push(vec![norm.channels()]);
            shapes.push(vec![norm.channels()]);
        }
        shapes.push(vec![self.fc1.outputs, self.fc1.inputs]);
        shapes.push(vec![self.fc1.outputs]);
        shapes.push(vec![self.fc1_norm.channels()]);
        shapes.push(vec![self.fc1_norm.channels()]);
        shapes.push(vec![self.fc2.outputs, self.fc2.inputs]);
        shapes.push(vec![self.fc2.outputs]);
        shapes
    }

    pub fn params(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = Vec::new();
        for (conv, norm) in self.convs.iter().zip(&self.conv_norms) {
            out.extend([&conv.spectral[..], &conv.abundance, &conv.bias, &norm.gamma, &norm.beta]);
        }
        out.extend([
            &self.fc1.weight[..],
            &self.fc1.bias,
            &self.fc1_norm.gamma,
            &self.fc1_norm.beta,
            &self.fc2.weight,
            &self.fc2.bias,
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for (conv, norm) in self.convs.iter_mut().zip(self.conv_norms.iter_mut()) {
            out.push(&mut conv.spectral);
            out.push(&mut conv.abundance);
            out.push(&mut conv.bias);
            out.push(&mut norm.gamma);
            out.push(&mut norm.beta);
        }
        out.push(&mut self.fc1.weight);
        out.push(&mut self.fc1.bias);
        out.push(&mut self.fc1_norm.gamma);
        out.push(&mut self.fc1_norm.beta);
        out.push(&mut self.fc2.weight);
        out.push(&mut self.fc2.bias);
        out
    }

    /// Batch-norm layers in order, the dense one last.
    pub fn norms(&self) -> Vec<&BatchNorm<T>> {
        self.conv_norms.iter().chain([&self.fc1_norm]).collect()
    }

    pub fn norms_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        self.conv_norms
            .iter_mut()
            .chain([&mut self.fc1_norm])
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self
                .norms()
                .iter()
                .all(|n| n.running_mean.iter().chain(&n.running_var).all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.arch.input_size();
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != n || s[3] != n || s[0] == 0 {
            return Err(Error::Shape(format!(
                "network built for 1x{n}x{n} inputs got batch shape {s:?}"
            )));
        }
        Ok(())
    }

    /// Logits for a batch of `1 x n x n` matrices.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match mode {
            Mode::Train => Ok(self.forward_train(x, None)?.0),
            Mode::Eval => self.forward_eval(x),
        }
    }

    fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let eps = T::from_f64(self.bn_eps);
        let mut cur: Option<Tensor<T>> = None;
        for k in 0..4 {
            let input = cur.as_ref().unwrap_or(x);
            let (z, _) = lsconv_forward(input, &self.convs[k], &self.arch.masks[k])?;
            let (y, _) = batchnorm_forward(&z, &self.conv_norms[k], Mode::Eval, None, eps)?;
            let (p, _) = maxpool2_forward(&tanh_forward(&y))?;
            cur = Some(p);
        }
        let batch = x.batch();
        let flat = cur.expect("four layers").reshape(&[batch, self.arch.flatten_len()]);
        let z = dense_forward(&flat, &self.fc1)?;
        let (y, _) = batchnorm_forward(&z, &self.fc1_norm, Mode::Eval, None, eps)?;
        dense_forward(&tanh_forward(&y), &self.fc2)
    }

    /// Train-mode forward with batch statistics; `weights` are row multiplicities.
    pub fn forward_train(
        &self,
        x: &Tensor<T>,
        weights: Option<&[T]>,
    ) -> Result<(Tensor<T>, ForwardCache<T>)> {
        self.check_input(x)?;
        let eps = T::from_f64(self.bn_eps);
        let batch = x.batch();
        let mut convs = Vec::with_capacity(4);
        let mut conv_norms = Vec::with_capacity(4);
        let mut activations = Vec::with_capacity(4);
        let mut pools = Vec::with_capacity(4);
        let mut stats = Vec::with_capacity(5);
        let mut cur: Option<Tensor<T>> = None;
        for k in 0..4 {
            let input = cur.as_ref().unwrap_or(x);
            let (z, cc) = lsconv_forward(input, &self.convs[k], &self.arch.masks[k])?;
            let (y, bn) = batchnorm_forward(&z, &self.conv_norms[k], Mode::Train, weights, eps)?;
            let (bc, st) = bn.expect("train mode caches");
            let a = tanh_forward(&y);
            let (p, pc) = maxpool2_forward(&a)?;
            convs.push(cc);
            conv_norms.push(bc);
            stats.push(st);
            activations.push(a);
            pools.push(pc);
            cur = Some(p);
        }
        let flat = cur.expect("four layers").reshape(&[batch, self.arch.flatten_len()]);
        let z = dense_forward(&flat, &self.fc1)?;
        let (y, bn) = batchnorm_forward(&z, &self.fc1_norm, Mode::Train, weights, eps)?;
        let (fc1_norm, st) = bn.expect("train mode caches");
        stats.push(st);
        let hidden = tanh_forward(&y);
        let logits = dense_forward(&hidden, &self.fc2)?;
        let cache = ForwardCache {
            batch,
            weights: weights.map(|w| w.to_vec()),
            convs,
            conv_norms,
            activations,
            pools,
            flat,
            fc1_norm,
            hidden,
            stats,
        };
        Ok((logits, cache))
    }

    /// Parameter gradients (and the input gradient if asked) from `dlogits`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &Tensor<T>,
        need_input_grad: bool,
    ) -> (Gradients<T>, Option<Tensor<T>>) {
        let batch = cache.batch;
        let (dhidden, dw2, db2) = dense_backward(dlogits, &cache.hidden, &self.fc2);
        let dy = tanh_backward(&dhidden, &cache.hidden);
        let (dz, dg5, dbeta5) = batchnorm_backward(&dy, &self.fc1_norm, &cache.fc1_norm);
        let (dflat, dw1, db1) = dense_backward(&dz, &cache.flat, &self.fc1);
        let side = self.arch.input_size() >> 4;
        let mut d = dflat.reshape(&[batch, CHANNELS[3], side, side]);
        let mut conv_grads: Vec<[Vec<T>; 5]> = Vec::with_capacity(4);
        for k in (0..4).rev() {
            let da = maxpool2_backward(&d, &cache.pools[k]);
            let dy = tanh_backward(&da, &cache.activations[k]);
            let (dz, dg, db) = batchnorm_backward(&dy, &self.conv_norms[k], &cache.conv_norms[k]);
            let (dx, cg) =
                lsconv_backward(&dz, &self.convs[k], &cache.convs[k], k > 0 || need_input_grad);
            conv_grads.push([cg.spectral, cg.abundance, cg.bias, dg, db]);
            if let Some(dx) = dx {
                d = dx;
            }
        }
        let mut tensors = Vec::with_capacity(26);
        for g in conv_grads.into_iter().rev() {
            tensors.extend(g);
        }
        tensors.extend([dw1, db1, dg5, dbeta5, dw2, db2]);
        let dx = need_input_grad.then_some(d);
        (Gradients { tensors }, dx)
    }

    /// Folds the batch statistics of a train-mode forward into the running stats.
    pub fn apply_bn_updates(&mut self, cache: &ForwardCache<T>, momentum: f64) {
        let momentum = T::from_f64(momentum);
        for (norm, st) in self.norms_mut().into_iter().zip(&cache.stats) {
            norm.update_running(st, momentum);
        }
    }

    /// Class per sample: 1 only when the change logit is strictly larger.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<u8>> {
        let logits = self.forward_eval(x)?;
        Ok(logits
            .data()
            .chunks(FC2_WIDTH)
            .map(|l| u8::from(l[1] > l[0]))
            .collect())
    }
}

impl<T: Scalar> ForwardCache<T> {
    pub fn weights(&self) -> Option<&[T]> {
        self.weights.as_deref()
    }

    pub fn stats_finite(&self) -> bool {
        self.stats
            .iter()
            .all(|s| s.mean.iter().chain(&s.var).all(|v| v.is_finite()))
    }
}

/// Mean (or multiplicity-weighted mean) cross-entropy over a batch of 2-class logits.
///
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    weights: Option<&[T]>,
) -> Result<(T, Tensor<T>)> {
    let s = logits.shape();
    if s.len() != 2 || s[1] != FC2_WIDTH || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "logits {s:?} do not match {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Shape("labels must be 0 or 1".into()));
    }
    if weights.is_some_and(|w| w.len() != labels.len()) {
        return Err(Error::Shape("sample weights do not match the batch".into()));
    }
    let weight = |i: usize| weights.map_or(T::one(), |w| w[i]);
    let total: T = (0..labels.len()).map(weight).sum();
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(s);
    let gd = grad.data_mut();
    for (i, (row, &label)) in logits.data().chunks(FC2_WIDTH).zip(labels).enumerate() {
        let m = row[0].max(row[1]);
        let e0 = (row[0] - m).exp();
        let e1 = (row[1] - m).exp();
        let z = e0 + e1;
        let y = label as usize;
        let w = weight(i);
        loss += w * (m + z.ln() - row[y]);
        let probs = [e0 / z, e1 / z];
        for c in 0..FC2_WIDTH {
            let target = if c == y { T::one() } else { T::zero() };
            gd[i * FC2_WIDTH + c] = w * (probs[c] - target) / total;
        }
    }
    Ok((loss / total, grad))
}
