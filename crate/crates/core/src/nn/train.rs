use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adagrad::{adagrad_step, AdagradState};
use super::network::{softmax_cross_entropy, Network};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::predetect::LabeledSampleSet;

/// Anything that can produce an `n x n` network input per sample index.
pub trait SampleSource: Sync {
    fn matrix_size(&self) -> usize;
    fn sample_count(&self) -> usize;
    fn fill_sample<T: Scalar>(&self, index: usize, out: &mut [T]);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adagrad_eps: f64,
    pub steps: usize,
    pub seed: u64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Loss trace granularity in steps.
    pub trace_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 96,
            learning_rate: 1e-4,
            adagrad_eps: 1e-8,
            steps: 30_000,
            seed: 0,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            trace_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: &dyn std::fmt::Display| {
            Err(Error::Config(format!("{what} must be positive, got {v}")))
        };
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2, got {}",
                self.batch_size
            )));
        }
        if self.steps == 0 {
            return bad("steps", &self.steps);
        }
        if self.trace_every == 0 {
            return bad("trace_every", &self.trace_every);
        }
        // A zero learning rate is allowed: it freezes the weights.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", &self.learning_rate);
        }
        if !(self.adagrad_eps > 0.0 && self.adagrad_eps.is_finite()) {
            return bad("adagrad_eps", &self.adagrad_eps);
        }
        if !(self.bn_eps > 0.0 && self.bn_eps.is_finite()) {
            return bad("bn_eps", &self.bn_eps);
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::Config(format!(
                "bn_momentum must lie in (0, 1), got {}",
                self.bn_momentum
            )));
        }
        Ok(())
    }
}

/// Mean training loss over the window ending at `step`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub loss_trace: Vec<LossPoint>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for p in &self.loss_trace {
            let _ = writeln!(out, "{},{:e}", p.step, p.loss);
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace.last().map(|p| p.loss)
    }
}

/// Adagrad training on pseudo-labelled samples.
///
/// Each step draws `batch_size` samples uniformly with replacement. Repeated
/// draws are merged into one batch row with a multiplicity weight, which gives
/// the same loss, gradients and batch statistics as the expanded batch.
///
/// On a non-finite loss, gradient or batch statistic the step is abandoned
/// before anything is modified, so `net` and `state` hold the last finite
/// state when [`Error::Divergence`] is returned.
pub fn train<T: Scalar, S: SampleSource>(
    net: &mut Network<T>,
    state: &mut AdagradState<T>,
    samples: &LabeledSampleSet,
    source: &S,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    let n = net.architecture().input_size();
    if source.matrix_size() != n {
        return Err(Error::Shape(format!(
            "samples are {0}x{0} matrices, network expects {n}x{n}",
            source.matrix_size()
        )));
    }
    let items = samples.samples();
    if let Some(bad) = items.iter().find(|s| s.pixel >= source.sample_count()) {
        return Err(Error::Shape(format!(
            "sample pixel {} outside a source of {}",
            bad.pixel,
            source.sample_count()
        )));
    }
    let plane = n * n;
    let mut matrices = vec![T::zero(); items.len() * plane];
    for (s, chunk) in items.iter().zip(matrices.chunks_mut(plane)) {
        source.fill_sample(s.pixel, chunk);
    }

    net.bn_eps = config.bn_eps;
    let lr = T::from_f64(config.learning_rate);
    let eps = T::from_f64(config.adagrad_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut counts = vec![0usize; items.len()];
    let mut trace = Vec::new();
    let mut window = (0.0, 0usize);
    for step in 1..=config.steps {
        counts.fill(0);
        for _ in 0..config.batch_size {
            counts[rng.random_range(0..items.len())] += 1;
        }
        let rows: Vec<usize> = (0..items.len()).filter(|&i| counts[i] > 0).collect();
        let mut x = Vec::with_capacity(rows.len() * plane);
        for &i in &rows {
            x.extend_from_slice(&matrices[i * plane..(i + 1) * plane]);
        }
        let x = Tensor::from_vec(&[rows.len(), 1, n, n], x)?;
        let labels: Vec<u8> = rows.iter().map(|&i| items[i].label).collect();
        let weights: Vec<T> = rows.iter().map(|&i| T::from_f64(counts[i] as f64)).collect();

        let (logits, cache) = net.forward_train(&x, Some(&weights))?;
        let (loss, dlogits) = softmax_cross_entropy(&logits, &labels, Some(&weights))?;
        if !loss.is_finite() {
            return Err(Error::Divergence { step });
        }
        let (grads, _) = net.backward(&cache, &dlogits, false);
        if !grads.all_finite() || !cache.stats_finite() {
            return Err(Error::Divergence { step });
        }
        adagrad_step(&mut net.params_mut(), &grads.tensors, state, lr, eps)?;
        net.apply_bn_updates(&cache, config.bn_momentum);

        window.0 += loss.to_f64();
        window.1 += 1;
        if step % config.trace_every == 0 || step == config.steps {
            let point = LossPoint {
                step,
                loss: window.0 / window.1 as f64,
            };
            log::debug!("step {step}: loss {:.6}", point.loss);
            trace.push(point);
            window = (0.0, 0);
        }
    }
    Ok(TrainReport { loss_trace: trace })
}

#[cfg(test)]
mod tests {
    use super::super::network::Architecture;
    use super::*;
    use crate::predetect::{LabeledSample, PredetectConfig};
    use rand_distr::{Distribution, Normal};

    /// Two Gaussian blobs in matrix space, 20 of class 1 and 40 of class 0.
    struct Blobs {
        n: usize,
        data: Vec<Vec<f64>>,
    }

    impl SampleSource for Blobs {
        fn matrix_size(&self) -> usize {
            self.n
        }

        fn sample_count(&self) -> usize {
            self.data.len()
        }

        fn fill_sample<T: Scalar>(&self, index: usize, out: &mut [T]) {
            for (o, &v) in out.iter_mut().zip(&self.data[index]) {
                *o = T::from_f64(v);
            }
        }
    }

    fn blobs(seed: u64) -> (Blobs, LabeledSampleSet) {
        let n = 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let centers: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut data = Vec::new();
        let mut samples = Vec::new();
        for i in 0..60 {
            let label = u8::from(i < 20);
            let c = &centers[label as usize];
            data.push(c.iter().map(|v| v + noise.sample(&mut rng)).collect());
            samples.push(LabeledSample { pixel: i, label });
        }
        let set = LabeledSampleSet::new(samples, PredetectConfig::default()).unwrap();
        (Blobs { n, data }, set)
    }

    fn small_net() -> Network<f32> {
        Network::new(Architecture::new(8, 4).unwrap(), 11)
    }

    fn config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (source, set) = blobs(1);
        let mut net = small_net();
        let mut state = AdagradState::zeros_like(&net.params());
        let report = train(&mut net, &mut state, &set, &source, &config(2000)).unwrap();
        assert_eq!(report.loss_trace.len(), 20);
        let mut x = Vec::new();
        for i in 0..set.len() {
            let mut buf = vec![0f32; 256];
            source.fill_sample(i, &mut buf);
            x.extend(buf);
        }
        let x = Tensor::from_vec(&[set.len(), 1, 16, 16], x).unwrap();
        let pred = net.predict(&x).unwrap();
        let correct = set
            .samples()
            .iter()
            .filter(|s| pred[s.pixel] == s.label)
            .count();
        let acc = correct as f64 / set.len() as f64;
        assert!(acc >= 0.99, "training accuracy {acc}");
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (source, set) = blobs(2);
        let mut net = small_net();
        let before: Vec<Vec<f32>> = net.params().iter().map(|p| p.to_vec()).collect();
        let mut state = AdagradState::zeros_like(&net.params());
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..config(20)
        };
        train(&mut net, &mut state, &set, &source, &cfg).unwrap();
        let after: Vec<Vec<f32>> = net.params().iter().map(|p| p.to_vec()).collect();
        for (a, b) in before.iter().zip(&after) {
            let same = a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same);
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let (source, set) = blobs(3);
        let run = || {
            let mut net = small_net();
            let mut state = AdagradState::zeros_like(&net.params());
            let report = train(&mut net, &mut state, &set, &source, &config(200)).unwrap();
            (report, net)
        };
        let (r1, n1) = run();
        let (r2, n2) = run();
        assert_eq!(r1, r2);
        assert_eq!(n1, n2);
        assert!(r1.to_csv().starts_with("step,loss\n100,"));
    }

    #[test]
    fn accumulators_never_decrease() {
        let (source, set) = blobs(4);
        let mut net = small_net();
        let mut state = AdagradState::zeros_like(&net.params());
        let mut prev = state.clone();
        for _ in 0..3 {
            train(&mut net, &mut state, &set, &source, &config(5)).unwrap();
            for (a, b) in state.accumulators.iter().flatten().zip(prev.accumulators.iter().flatten()) {
                assert!(a >= b);
            }
            prev = state.clone();
        }
    }

    #[test]
    fn divergence_keeps_last_finite_state() {
        let (mut source, set) = blobs(5);
        source.data[0][0] = f64::INFINITY;
        let mut net = small_net();
        let mut state = AdagradState::zeros_like(&net.params());
        let err = train(&mut net, &mut state, &set, &source, &config(50)).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err:?}");
        assert!(net.all_finite());
        assert!(state.accumulators.iter().flatten().all(|v| v.is_finite()));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            bn_momentum: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            steps: 0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
