//! End-to-end change detection: unmixing, affinity fusion, pseudo-label
//! training, inference and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::affinity::{stack_sources, AffinityPair, StackedCube, DEFAULT_AFFINITY_EPS};
use crate::error::{Error, Result};
use crate::hsicube::{normalize_pair, read_envi, read_map, write_map, BinaryMap, CubePair, HyperCube};
use crate::metrics::{evaluate, Metrics};
use crate::nn::{
    save_checkpoint, train, AdagradState, Architecture, Mode, Network, SampleSource, Scalar,
    Tensor, TrainConfig, TrainReport,
};
use crate::predetect::{cva_change_map, cva_magnitude, select_pseudo_labels, PredetectConfig};
use crate::unmixing::{atgp, bfm_cube_from, fcls_cube, AbundanceCube, BfmOptions, EndmemberSet};

/// Pixels per forward pass during inference.
pub const INFER_BATCH: usize = 96;

/// Offsets added to the run seed for each randomized stage.
pub const PREDETECT_SEED_OFFSET: u64 = 1;
pub const INIT_SEED_OFFSET: u64 = 2;
pub const TRAIN_SEED_OFFSET: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub time1: PathBuf,
    pub time2: PathBuf,
    pub truth: Option<PathBuf>,
    /// Bands to keep, in order; `None` keeps all.
    pub keep_bands: Option<Vec<usize>>,
    pub out_dir: PathBuf,
    pub endmembers: usize,
    pub predetect: PredetectConfig,
    pub train: TrainConfig,
    pub bfm: BfmOptions,
    pub affinity_eps: f64,
    /// Root seed. Stage seeds are derived from it and override the seeds
    /// inside `predetect` and `train`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            time1: PathBuf::new(),
            time2: PathBuf::new(),
            truth: None,
            keep_bands: None,
            out_dir: PathBuf::from("out"),
            endmembers: 4,
            predetect: PredetectConfig::default(),
            train: TrainConfig::default(),
            bfm: BfmOptions::default(),
            affinity_eps: DEFAULT_AFFINITY_EPS,
            seed: 0,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{value}` is not a valid value for `{key}`")))
}

/// Parses a band list such as `0-9,12,15-20` (inclusive ranges).
pub fn parse_band_list(text: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (parse("keep_bands", a.trim())?, parse("keep_bands", b.trim())?);
                if b < a {
                    return Err(Error::Config(format!("descending band range `{part}`")));
                }
                out.extend(a..=b);
            }
            None => out.push(parse("keep_bands", part)?),
        }
    }
    Ok(out)
}

impl RunConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key.trim() {
            "time1" => self.time1 = value.into(),
            "time2" => self.time2 = value.into(),
            "truth" => self.truth = (!value.is_empty()).then(|| value.into()),
            "keep_bands" => self.keep_bands = Some(parse_band_list(value)?),
            "out_dir" => self.out_dir = value.into(),
            "endmembers" | "m" => self.endmembers = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "affinity_eps" => self.affinity_eps = parse(key, value)?,
            "changed_percentile" => self.predetect.changed_percentile = parse(key, value)?,
            "unchanged_percentile" => self.predetect.unchanged_percentile = parse(key, value)?,
            "positive_fraction" => self.predetect.positive_fraction = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "learning_rate" => self.train.learning_rate = parse(key, value)?,
            "adagrad_eps" => self.train.adagrad_eps = parse(key, value)?,
            "steps" => self.train.steps = parse(key, value)?,
            "bn_momentum" => self.train.bn_momentum = parse(key, value)?,
            "bn_eps" => self.train.bn_eps = parse(key, value)?,
            "trace_every" => self.train.trace_every = parse(key, value)?,
            "bfm_max_iters" => self.bfm.max_iters = parse(key, value)?,
            "bfm_rel_tol" => self.bfm.rel_tol = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn predetect_config(&self) -> PredetectConfig {
        PredetectConfig {
            seed: self.seed.wrapping_add(PREDETECT_SEED_OFFSET),
            ..self.predetect
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed.wrapping_add(TRAIN_SEED_OFFSET),
            ..self.train.clone()
        }
    }

    pub fn init_seed(&self) -> u64 {
        self.seed.wrapping_add(INIT_SEED_OFFSET)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, path) in [("time1", Some(&self.time1)), ("time2", Some(&self.time2)), ("truth", self.truth.as_ref())] {
            if let Some(p) = path {
                if p.as_os_str().is_empty() || !p.exists() {
                    return Err(Error::Config(format!("{name} path `{}` does not exist", p.display())));
                }
            }
        }
        if self.endmembers == 0 {
            return Err(Error::Config("endmembers must be positive".into()));
        }
        if !(self.affinity_eps > 0.0 && self.affinity_eps.is_finite()) {
            return Err(Error::Config(format!("affinity_eps must be positive, got {}", self.affinity_eps)));
        }
        self.predetect.validate()?;
        self.train.validate()
    }
}

/// Batched eval-mode inference over every pixel of `source`.
pub fn infer<T: Scalar>(net: &Network<T>, source: &AffinityPair) -> Result<BinaryMap> {
    let n = net.architecture().input_size();
    if source.matrix_size() != n {
        return Err(Error::Shape(format!(
            "network expects {n}x{n} matrices, scene gives {0}x{0}",
            source.matrix_size()
        )));
    }
    let pixels = source.pixel_count();
    let plane = n * n;
    let mut labels = Vec::with_capacity(pixels);
    let mut start = 0;
    while start < pixels {
        let end = (start + INFER_BATCH).min(pixels);
        let mut x = vec![T::zero(); (end - start) * plane];
        for (p, chunk) in (start..end).zip(x.chunks_mut(plane)) {
            source.fill_sample(p, chunk);
        }
        let x = Tensor::from_vec(&[end - start, 1, n, n], x)?;
        labels.extend(net.predict(&x)?);
        start = end;
    }
    BinaryMap::new(source.time1.height(), source.time1.width(), labels)
}

/// Everything a run produces in memory; files go to the output directory.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub change_map: BinaryMap,
    pub cva_map: BinaryMap,
    pub metrics: Option<Metrics>,
    pub cva_metrics: Option<Metrics>,
    pub report: TrainReport,
    pub endmembers: EndmemberSet,
}

fn stage<R>(name: &'static str, f: impl FnOnce() -> Result<R>) -> Result<R> {
    let start = Instant::now();
    let out = f().map_err(|e| Error::Stage {
        stage: name,
        source: Box::new(e),
    });
    log::info!("stage {name}: {:.3} s", start.elapsed().as_secs_f64());
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Linear and nonlinear abundances of both dates.
pub struct Unmixed {
    pub endmembers: EndmemberSet,
    pub linear: [AbundanceCube; 2],
    pub nonlinear: [AbundanceCube; 2],
}

/// ATGP on the pooled pixels of both dates, then FCLS and BFM per date.
pub fn unmix_pair(pair: &CubePair, m: usize, bfm: &BfmOptions) -> Result<Unmixed> {
    let b = pair.time1().bands();
    let mut pooled = pair.time1().spectra();
    pooled.extend(pair.time2().spectra());
    let endmembers = atgp(&pooled, b, m)?;
    let unmix = |cube: &HyperCube| -> Result<(AbundanceCube, AbundanceCube)> {
        let lin = fcls_cube(&endmembers, cube)?;
        let non = bfm_cube_from(&endmembers, cube, &lin, bfm)?;
        Ok((lin, non))
    };
    let (l1, n1) = unmix(pair.time1())?;
    let (l2, n2) = unmix(pair.time2())?;
    Ok(Unmixed {
        endmembers,
        linear: [l1, l2],
        nonlinear: [n1, n2],
    })
}

/// Normalized pair, its unmixing and the per-pixel affinity source.
pub struct Prepared {
    pub pair: CubePair,
    pub unmixed: Unmixed,
    pub affinity: AffinityPair,
}

/// Read, band selection, normalization, unmixing and stacking, each as a
/// timed stage. Endmembers go to `out/endmembers.txt` when `out` is given.
pub fn prepare(config: &RunConfig, out: Option<&Path>) -> Result<Prepared> {
    let pair = stage("read", || {
        CubePair::new(read_envi(&config.time1)?, read_envi(&config.time2)?)
    })?;
    let pair = match &config.keep_bands {
        Some(keep) => stage("select_bands", || pair.select_bands(keep))?,
        None => pair,
    };
    let pair = stage("normalize", || Ok(normalize_pair(&pair)))?;
    let unmixed = stage("unmix", || {
        let u = unmix_pair(&pair, config.endmembers, &config.bfm)?;
        if let Some(out) = out {
            u.endmembers.write(out.join("endmembers.txt"))?;
        }
        Ok(u)
    })?;
    let affinity = stage("stack", || {
        let stack = |t: usize, cube: &HyperCube| -> Result<StackedCube> {
            stack_sources(cube, &unmixed.linear[t], &unmixed.nonlinear[t])
        };
        AffinityPair::new(
            stack(0, pair.time1())?,
            stack(1, pair.time2())?,
            config.affinity_eps,
        )
    })?;
    Ok(Prepared {
        pair,
        unmixed,
        affinity,
    })
}

/// Runs the full method, writing artifacts into `config.out_dir`:
/// `endmembers.txt`, `samples.csv`, `cva_map.pgm`, `loss.csv`,
/// `checkpoint/`, `change_map.pgm` and, with ground truth, `metrics.txt`
/// and `cva_metrics.txt`.
///
/// Ground truth is only read in the final evaluate stage. A failing stage
/// aborts the run and leaves earlier artifacts in place.
pub fn run_end_to_end(config: &RunConfig) -> Result<RunOutput> {
    stage("config", || config.validate())?;
    let out = config.out_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let prepared = prepare(config, Some(out))?;
    let (pair, affinity) = (&prepared.pair, &prepared.affinity);

    let (samples, cva_map) = stage("predetect", || {
        let mag = cva_magnitude(pair);
        let cva_map = cva_change_map(&mag, mag.median())?;
        write_map(&cva_map, out.join("cva_map.pgm"))?;
        let samples = select_pseudo_labels(&mag, &config.predetect_config())?;
        samples.write(out.join("samples.csv"))?;
        Ok((samples, cva_map))
    })?;

    let (net, report) = stage("train", || {
        let arch = Architecture::new(pair.time1().bands(), config.endmembers)?;
        let mut net = Network::<f32>::new(arch, config.init_seed());
        let mut state = AdagradState::zeros_like(&net.params());
        let result = train(&mut net, &mut state, &samples, affinity, &config.train_config());
        save_checkpoint(&net, &state, out.join("checkpoint"))?;
        let report = result?;
        write_text(&out.join("loss.csv"), &report.to_csv())?;
        Ok((net, report))
    })?;

    let change_map = stage("infer", || {
        let map = infer(&net, affinity)?;
        write_map(&map, out.join("change_map.pgm"))?;
        Ok(map)
    })?;

    let (metrics, cva_metrics) = match &config.truth {
        Some(path) => stage("evaluate", || {
            let truth = read_map(path, Some((change_map.height(), change_map.width())))?;
            let net_m = evaluate(&change_map, &truth)?;
            let cva_m = evaluate(&cva_map, &truth)?;
            write_text(&out.join("metrics.txt"), &format!("{net_m}\n"))?;
            write_text(&out.join("cva_metrics.txt"), &format!("{cva_m}\n"))?;
            Ok((Some(net_m), Some(cva_m)))
        })?,
        None => (None, None),
    };

    Ok(RunOutput {
        change_map,
        cva_map,
        metrics,
        cva_metrics,
        report,
        endmembers: prepared.unmixed.endmembers,
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs `repeats` times with seeds `seed, seed + 1, ...`, each into
/// `out_dir/run<i>`, and writes `summary.txt` with OA and Kappa mean and
/// standard deviation when ground truth is available.
pub fn run_repeated(config: &RunConfig, repeats: usize) -> Result<Vec<RunOutput>> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be positive".into()));
    }
    let mut outputs = Vec::with_capacity(repeats);
    for i in 0..repeats {
        let cfg = RunConfig {
            seed: config.seed.wrapping_add(i as u64),
            out_dir: config.out_dir.join(format!("run{i}")),
            ..config.clone()
        };
        outputs.push(run_end_to_end(&cfg)?);
    }
    let metrics: Vec<Metrics> = outputs.iter().filter_map(|o| o.metrics).collect();
    if metrics.len() == repeats {
        let (oa, oa_sd) = mean_std(&metrics.iter().map(|m| m.oa).collect::<Vec<_>>());
        let (k, k_sd) = mean_std(&metrics.iter().map(|m| m.kappa).collect::<Vec<_>>());
        let mut s = String::new();
        let _ = writeln!(s, "runs={repeats}");
        let _ = writeln!(s, "oa_mean={oa}, oa_std={oa_sd}");
        let _ = writeln!(s, "kappa_mean={k}, kappa_std={k_sd}");
        write_text(&config.out_dir.join("summary.txt"), &s)?;
    }
    Ok(outputs)
}

/// Eval-mode logits of single pixels, for callers that want scores rather
/// than labels.
pub fn pixel_logits<T: Scalar>(net: &Network<T>, source: &AffinityPair, pixel: usize) -> Result<[T; 2]> {
    let n = net.architecture().input_size();
    let mut x = vec![T::zero(); n * n];
    source.fill_sample(pixel, &mut x);
    let y = net.forward(&Tensor::from_vec(&[1, 1, n, n], x)?, Mode::Eval)?;
    Ok([y.data()[0], y.data()[1]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{gen_scene, SceneConfig};
    use crate::unmixing::AbundanceKind;

    #[test]
    fn config_text_and_overrides() {
        let mut cfg = RunConfig::from_text(
            "# run\ntime1 = a.hdr\ntime2=b.hdr\nsteps = 10 # short\nkeep_bands = 0-2, 5\n",
        )
        .unwrap();
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.keep_bands, Some(vec![0, 1, 2, 5]));
        cfg.set("steps", "20").unwrap();
        assert_eq!(cfg.train.steps, 20);
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("steps", "x").is_err());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn stage_seeds_are_offsets() {
        let cfg = RunConfig {
            seed: 10,
            ..RunConfig::default()
        };
        assert_eq!(cfg.predetect_config().seed, 11);
        assert_eq!(cfg.init_seed(), 12);
        assert_eq!(cfg.train_config().seed, 13);
    }

    fn small_pair() -> AffinityPair {
        let scene = gen_scene(&SceneConfig {
            height: 10,
            width: 11,
            bands: 8,
            endmembers: 4,
            ..SceneConfig::default()
        })
        .unwrap();
        let stack = |cube: &HyperCube, ab: &AbundanceCube| {
            let lin = AbundanceCube::new(cube.height(), cube.width(), 4, AbundanceKind::Linear, ab.data().to_vec()).unwrap();
            let non = AbundanceCube::new(cube.height(), cube.width(), 4, AbundanceKind::Nonlinear, ab.data().to_vec()).unwrap();
            stack_sources(cube, &lin, &non).unwrap()
        };
        let s1 = stack(scene.pair.time1(), &scene.abundances1);
        let s2 = stack(scene.pair.time2(), &scene.abundances2);
        AffinityPair::new(s1, s2, DEFAULT_AFFINITY_EPS).unwrap()
    }

    fn warmed_net() -> Network<f32> {
        let mut net = Network::new(Architecture::new(8, 4).unwrap(), 3);
        for bn in net.norms_mut() {
            bn.initialized = true;
        }
        net
    }

    #[test]
    fn batched_inference_matches_pixel_loop() {
        let pair = small_pair();
        let net = warmed_net();
        let map = infer(&net, &pair).unwrap();
        assert_eq!((map.height(), map.width()), (10, 11));
        for p in 0..pair.pixel_count() {
            let [l0, l1] = pixel_logits(&net, &pair, p).unwrap();
            assert_eq!(map.labels()[p], u8::from(l1 > l0), "pixel {p}");
        }
    }

    #[test]
    fn constant_network_marks_nothing() {
        let pair = small_pair();
        let mut net = warmed_net();
        net.fc2.weight.fill(0.0);
        net.fc2.bias.copy_from_slice(&[1.0, -1.0]);
        let map = infer(&net, &pair).unwrap();
        assert_eq!(map.count_changed(), 0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let pair = small_pair();
        let net = Network::<f32>::new(Architecture::new(12, 4).unwrap(), 0);
        assert!(matches!(infer(&net, &pair), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_std_values() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
    }
}
