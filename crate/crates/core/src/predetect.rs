//! CVA pre-detection: change magnitude, pseudo-label selection and the
//! thresholded CVA baseline map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hsicube::{BinaryMap, CubePair};

#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl MagnitudeMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} magnitudes for a {height}x{width} map",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn median(&self) -> f64 {
        let mut v = self.values.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// Euclidean norm of the per-pixel spectral difference.
pub fn cva_magnitude(pair: &CubePair) -> MagnitudeMap {
    let (t1, t2) = (pair.time1(), pair.time2());
    let n = t1.pixel_count();
    let mut acc = vec![0.0f64; n];
    for k in 0..t1.bands() {
        for ((a, &x), &y) in acc.iter_mut().zip(t1.band(k)).zip(t2.band(k)) {
            let d = x as f64 - y as f64;
            *a += d * d;
        }
    }
    MagnitudeMap {
        height: t1.height(),
        width: t1.width(),
        values: acc.into_iter().map(f64::sqrt).collect(),
    }
}

/// Label 1 where the magnitude strictly exceeds `threshold`.
pub fn cva_change_map(mag: &MagnitudeMap, threshold: f64) -> Result<BinaryMap> {
    if !threshold.is_finite() {
        return Err(Error::Config(format!("threshold must be finite, got {threshold}")));
    }
    let labels = mag.values.iter().map(|&v| u8::from(v > threshold)).collect();
    BinaryMap::new(mag.height, mag.width, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredetectConfig {
    /// Top share (percent) of magnitudes forming the changed pool.
    pub changed_percentile: f64,
    /// Bottom share (percent) of magnitudes forming the unchanged pool.
    pub unchanged_percentile: f64,
    /// Share of the changed pool drawn as positives.
    pub positive_fraction: f64,
    pub seed: u64,
}

impl Default for PredetectConfig {
    fn default() -> Self {
        Self {
            changed_percentile: 5.0,
            unchanged_percentile: 60.0,
            positive_fraction: 0.10,
            seed: 0,
        }
    }
}

impl PredetectConfig {
    pub fn validate(&self) -> Result<()> {
        let pct_ok = |v: f64| v > 0.0 && v < 100.0;
        if !pct_ok(self.changed_percentile) || !pct_ok(self.unchanged_percentile) {
            return Err(Error::Config("percentiles must lie in (0, 100)".into()));
        }
        if self.changed_percentile + self.unchanged_percentile > 100.0 {
            return Err(Error::Config(format!(
                "changed ({}%) and unchanged ({}%) windows overlap",
                self.changed_percentile, self.unchanged_percentile
            )));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "positive fraction {} outside (0, 1]",
                self.positive_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LabeledSample {
    pub pixel: usize,
    pub label: u8,
}

/// Pseudo-labelled training pixels: positives first, then negatives, each in
/// ascending pixel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSampleSet {
    samples: Vec<LabeledSample>,
    config: PredetectConfig,
}

impl LabeledSampleSet {
    pub fn new(samples: Vec<LabeledSample>, config: PredetectConfig) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if s.label > 1 {
                return Err(Error::format("label", format!("label {} is not 0 or 1", s.label)));
            }
            if !seen.insert(s.pixel) {
                return Err(Error::format("pixel_index", format!("pixel {} listed twice", s.pixel)));
            }
        }
        let set = Self { samples, config };
        if set.negatives() != 2 * set.positives() || set.positives() == 0 {
            return Err(Error::Capacity(format!(
                "{} positives and {} negatives do not form a 1:2 set",
                set.positives(),
                set.negatives()
            )));
        }
        Ok(set)
    }

    pub fn samples(&self) -> &[LabeledSample] {
        &self.samples
    }

    pub fn config(&self) -> &PredetectConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.config.seed
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.samples.len() - self.positives()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let c = &self.config;
        let mut s = format!(
            "# changed_percentile={} unchanged_percentile={} positive_fraction={} seed={}\npixel_index,label\n",
            c.changed_percentile, c.unchanged_percentile, c.positive_fraction, c.seed
        );
        for smp in &self.samples {
            let _ = writeln!(s, "{},{}", smp.pixel, smp.label);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut config = PredetectConfig::default();
        let mut samples = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                for kv in comment.split_whitespace() {
                    let Some((k, v)) = kv.split_once('=') else { continue };
                    let bad = || Error::format(k, format!("bad value `{v}`"));
                    match k {
                        "changed_percentile" => config.changed_percentile = v.parse().map_err(|_| bad())?,
                        "unchanged_percentile" => config.unchanged_percentile = v.parse().map_err(|_| bad())?,
                        "positive_fraction" => config.positive_fraction = v.parse().map_err(|_| bad())?,
                        "seed" => config.seed = v.parse().map_err(|_| bad())?,
                        _ => {}
                    }
                }
                continue;
            }
            if !saw_header {
                if line != "pixel_index,label" {
                    return Err(Error::format("header", format!("expected `pixel_index,label`, got `{line}`")));
                }
                saw_header = true;
                continue;
            }
            let parsed = line.split_once(',').and_then(|(p, l)| {
                Some(LabeledSample {
                    pixel: p.trim().parse().ok()?,
                    label: l.trim().parse().ok()?,
                })
            });
            samples.push(parsed.ok_or_else(|| {
                Error::format("samples", format!("line {}: `{line}`", lineno + 1))
            })?);
        }
        Self::new(samples, config)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Selects high-confidence pseudo-labels from the CVA magnitude.
///
/// Pixels are ranked by (magnitude, index). The changed pool is the top
/// `changed_percentile` percent of ranks and the unchanged pool the bottom
/// `unchanged_percentile` percent. Positives are a seeded uniform draw of
/// `max(1, floor(positive_fraction * |changed pool|))` pixels from the changed
/// pool, negatives twice as many from the unchanged pool.
pub fn select_pseudo_labels(mag: &MagnitudeMap, config: &PredetectConfig) -> Result<LabeledSampleSet> {
    config.validate()?;
    let n = mag.values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| mag.values[a].total_cmp(&mag.values[b]).then(a.cmp(&b)));

    let changed_len = (n as f64 * config.changed_percentile / 100.0).floor() as usize;
    let unchanged_len = (n as f64 * config.unchanged_percentile / 100.0).floor() as usize;
    if changed_len == 0 {
        return Err(Error::Capacity(format!(
            "changed pool is empty ({n} pixels at {}%)",
            config.changed_percentile
        )));
    }
    let changed_pool = &order[n - changed_len..];
    let unchanged_pool = &order[..unchanged_len];

    let wanted = ((config.positive_fraction * changed_len as f64).floor() as usize).max(1);
    // the 1:2 ratio is kept exact by shrinking the positive draw when the
    // unchanged pool is short
    let positives = wanted.min(unchanged_len / 2);
    if positives == 0 {
        return Err(Error::Capacity(format!(
            "unchanged pool of {unchanged_len} pixels cannot hold 2 negatives per positive \
             (achievable: {} positives, {} negatives)",
            unchanged_len / 2,
            2 * (unchanged_len / 2)
        )));
    }
    if positives < wanted {
        log::warn!(
            "pseudo-label draw truncated to {positives} positives (wanted {wanted}) to keep the 1:2 ratio"
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pos: Vec<usize> = rand::seq::index::sample(&mut rng, changed_len, positives)
        .into_iter()
        .map(|i| changed_pool[i])
        .collect();
    let mut neg: Vec<usize> = rand::seq::index::sample(&mut rng, unchanged_len, 2 * positives)
        .into_iter()
        .map(|i| unchanged_pool[i])
        .collect();
    pos.sort_unstable();
    neg.sort_unstable();
    let samples = pos
        .into_iter()
        .map(|pixel| LabeledSample { pixel, label: 1 })
        .chain(neg.into_iter().map(|pixel| LabeledSample { pixel, label: 0 }))
        .collect();
    LabeledSampleSet::new(samples, *config)
}
