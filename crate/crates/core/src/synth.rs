//! Synthetic bitemporal scenes with known endmembers, abundances and change.
//!
//! Time-1 abundances come from smooth random fields projected onto the
//! simplex and pulled towards the centroid, so that only the planted pixels
//! are pure. Inside a set of elliptical blobs the dominant endmember is
//! swapped at time 2; the blob mask is the ground truth.

use std::f64::consts::PI;
use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hsicube::{write_envi, write_map, BinaryMap, CubePair, HyperCube};
use crate::unmixing::{bfm_forward, project_to_simplex, AbundanceCube, AbundanceKind, EndmemberSet};

/// Minimum pairwise spectral angle between generated endmembers, in degrees.
pub const MIN_ENDMEMBER_ANGLE_DEG: f64 = 15.0;
const ENDMEMBER_ATTEMPTS: usize = 100;
const BLOB_PLACEMENTS: usize = 1000;
/// Achieved change fraction must land within this distance of the target.
pub const CHANGE_FRACTION_TOL: f64 = 0.01;
/// Weight of the uniform mixture blended into every non-planted pixel.
const PURITY_MIX: f64 = 0.2;
const FIELD_TERMS: usize = 4;
const FIELD_GAIN: f64 = 1.5;
const SPECTRUM_FLOOR: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixing {
    Linear,
    Bilinear,
}

impl fmt::Display for Mixing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mixing::Linear => "linear",
            Mixing::Bilinear => "bilinear",
        })
    }
}

impl FromStr for Mixing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Mixing::Linear),
            "bilinear" => Ok(Mixing::Bilinear),
            other => Err(Error::Config(format!("unknown mixing model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmembers: usize,
    pub mixing: Mixing,
    /// Signal-to-noise ratio of the additive white Gaussian noise;
    /// `f64::INFINITY` for a noiseless scene.
    pub snr_db: f64,
    pub change_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 32,
            endmembers: 4,
            mixing: Mixing::Linear,
            snr_db: 30.0,
            change_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.bands == 0 {
            return Err(Error::Config("scene dimensions must be positive".into()));
        }
        if self.endmembers < 2 || self.endmembers > self.bands {
            return Err(Error::Config(format!(
                "need 2 <= m <= b, got m={} b={}",
                self.endmembers, self.bands
            )));
        }
        if !(self.change_fraction > 0.0 && self.change_fraction < 1.0) {
            return Err(Error::Config(format!(
                "change_fraction {} outside (0, 1)",
                self.change_fraction
            )));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::Config(format!("invalid snr_db {}", self.snr_db)));
        }
        if self.endmembers > self.height * self.width {
            return Err(Error::Config("scene too small to plant one pure pixel per endmember".into()));
        }
        Ok(())
    }
}

/// A generated scene together with every truth used to build it.
#[derive(Debug, Clone)]
pub struct Scene {
    pub config: SceneConfig,
    pub pair: CubePair,
    pub truth: BinaryMap,
    /// True endmembers; `source_indices` holds the planted pure pixels.
    pub endmembers: EndmemberSet,
    pub abundances1: AbundanceCube,
    pub abundances2: AbundanceCube,
    /// Planted pure pixel of each endmember (row-major index).
    pub planted: Vec<usize>,
}

impl Scene {
    pub fn changed_fraction(&self) -> f64 {
        self.truth.count_changed() as f64 / self.truth.labels().len() as f64
    }

    /// Text sidecar: scene configuration, planted pixels and the endmember
    /// matrix (`bands` rows of `m` values).
    pub fn sidecar(&self) -> String {
        let c = &self.config;
        let mut s = String::from("# hsicd synthetic scene\n");
        let planted: Vec<String> = self.planted.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "height = {}", c.height);
        let _ = writeln!(s, "width = {}", c.width);
        let _ = writeln!(s, "bands = {}", c.bands);
        let _ = writeln!(s, "endmembers = {}", c.endmembers);
        let _ = writeln!(s, "mixing = {}", c.mixing);
        let _ = writeln!(s, "snr_db = {}", c.snr_db);
        let _ = writeln!(s, "change_fraction = {}", c.change_fraction);
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "achieved_change_fraction = {}", self.changed_fraction());
        let _ = writeln!(s, "planted = {}", planted.join(" "));
        s.push_str("[endmembers]\n");
        s.push_str(&self.endmembers.to_text());
        s
    }

    /// Writes `t1.hdr/.img`, `t2.hdr/.img`, `truth.pgm` and `scene.txt`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_envi(self.pair.time1(), dir.join("t1.hdr"))?;
        write_envi(self.pair.time2(), dir.join("t2.hdr"))?;
        write_map(&self.truth, dir.join("truth.pgm"))?;
        let sidecar = dir.join("scene.txt");
        std::fs::write(&sidecar, self.sidecar()).map_err(|e| Error::io(&sidecar, e))
    }
}

/// Spectral angle in radians.
pub fn spectral_angle(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos()
}

fn random_spectrum(bands: usize, rng: &mut impl Rng) -> Vec<f64> {
    let bumps = rng.random_range(2..=4);
    let span = bands.max(2) as f64;
    let params: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            let centre = rng.random_range(0.0..span);
            let width = rng.random_range(span / 16.0..span / 4.0).max(0.5);
            let height = rng.random_range(0.2..1.0);
            (centre, width, height)
        })
        .collect();
    let mut s: Vec<f64> = (0..bands)
        .map(|k| {
            let x = k as f64;
            SPECTRUM_FLOOR
                + params
                    .iter()
                    .map(|&(c, w, h)| h * (-0.5 * ((x - c) / w).powi(2)).exp())
                    .sum::<f64>()
        })
        .collect();
    let peak = s.iter().copied().fold(0.0, f64::max);
    s.iter_mut().for_each(|v| *v /= peak);
    s
}

/// `m` positive spectra built from 2 to 4 Gaussian bumps each, peak value 1,
/// pairwise separated by at least [`MIN_ENDMEMBER_ANGLE_DEG`].
pub fn gen_endmembers(m: usize, bands: usize, seed: u64) -> Result<EndmemberSet> {
    if m == 0 || bands == 0 {
        return Err(Error::Config("gen_endmembers needs m >= 1 and b >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let min_angle = MIN_ENDMEMBER_ANGLE_DEG.to_radians();
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut attempts = 0;
    while columns.len() < m {
        if attempts == ENDMEMBER_ATTEMPTS {
            return Err(Error::Capacity(format!(
                "no {m} endmembers {MIN_ENDMEMBER_ANGLE_DEG} degrees apart in {bands} bands \
                 after {ENDMEMBER_ATTEMPTS} attempts"
            )));
        }
        attempts += 1;
        let s = random_spectrum(bands, &mut rng);
        if columns.iter().all(|c| spectral_angle(c, &s) >= min_angle) {
            columns.push(s);
        }
    }
    EndmemberSet::new(columns, None)
}

/// Sum of a few random plane waves; smooth over the grid.
fn smooth_field(height: usize, width: usize, rng: &mut impl Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let waves: Vec<[f64; 4]> = (0..FIELD_TERMS)
        .map(|_| {
            [
                normal.sample(rng),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(0.0..2.0 * PI),
            ]
        })
        .collect();
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let (y, x) = (r as f64 / height as f64, c as f64 / width as f64);
            out.push(
                waves
                    .iter()
                    .map(|&[a, u, v, phase]| a * (2.0 * PI * (u * y + v * x) + phase).cos())
                    .sum(),
            );
        }
    }
    out
}

/// Places elliptical blobs until the covered share is within
/// [`CHANGE_FRACTION_TOL`] of `target`.
fn place_blobs(height: usize, width: usize, target: f64, rng: &mut impl Rng) -> Result<Vec<u8>> {
    let total = (height * width) as f64;
    let mut mask = vec![0u8; height * width];
    let mut covered = 0usize;
    for _ in 0..BLOB_PLACEMENTS {
        let frac = covered as f64 / total;
        if (frac - target).abs() <= CHANGE_FRACTION_TOL {
            return Ok(mask);
        }
        let deficit = (target - frac).max(0.0) * total;
        let r_max = (deficit / PI)
            .sqrt()
            .min(height.min(width) as f64 / 4.0)
            .max(1.0);
        let a = rng.random_range(0.5..=r_max.max(0.6));
        let b = rng.random_range(0.5..=r_max.max(0.6));
        let theta = rng.random_range(0.0..PI);
        let cy = rng.random_range(0.0..height as f64);
        let cx = rng.random_range(0.0..width as f64);
        let (sin, cos) = theta.sin_cos();
        let mut added = Vec::new();
        for r in 0..height {
            for c in 0..width {
                let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                let u = (dx * cos + dy * sin) / a;
                let v = (-dx * sin + dy * cos) / b;
                let i = r * width + c;
                if u * u + v * v <= 1.0 && mask[i] == 0 {
                    added.push(i);
                }
            }
        }
        if (covered + added.len()) as f64 / total > target + CHANGE_FRACTION_TOL {
            continue;
        }
        covered += added.len();
        for i in added {
            mask[i] = 1;
        }
    }
    let frac = covered as f64 / total;
    if (frac - target).abs() <= CHANGE_FRACTION_TOL {
        return Ok(mask);
    }
    Err(Error::Capacity(format!(
        "change fraction {target} not reached in {BLOB_PLACEMENTS} blob placements (got {frac:.4})"
    )))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn argmin(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, &x)| if x < best.1 { (i, x) } else { best })
        .0
}

fn render(
    endmembers: &EndmemberSet,
    abundances: &[f64],
    config: &SceneConfig,
    noise_rng: &mut impl Rng,
) -> Result<HyperCube> {
    let (m, b) = (config.endmembers, config.bands);
    let pixels = config.height * config.width;
    let mut data = vec![0f64; pixels * b];
    for p in 0..pixels {
        let w = &abundances[p * m..(p + 1) * m];
        let x = match config.mixing {
            Mixing::Linear => endmembers.mix(w),
            Mixing::Bilinear => bfm_forward(endmembers, w),
        };
        for (k, v) in x.into_iter().enumerate() {
            data[k * pixels + p] = v;
        }
    }
    if config.snr_db.is_finite() {
        let power = data.iter().map(|v| v * v).sum::<f64>() / data.len() as f64;
        let sigma = (power / 10f64.powf(config.snr_db / 10.0)).sqrt();
        let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        data.iter_mut().for_each(|v| *v += noise.sample(noise_rng));
    }
    HyperCube::new(
        config.height,
        config.width,
        b,
        data.into_iter().map(|v| v as f32).collect(),
    )
}

/// Generates a bitemporal scene. Deterministic per `config.seed`.
pub fn gen_scene(config: &SceneConfig) -> Result<Scene> {
    config.validate()?;
    let (h, w, m) = (config.height, config.width, config.endmembers);
    let pixels = h * w;
    let endmembers = gen_endmembers(m, config.bands, config.seed)?;
    let stream = |k: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(k);
        rng
    };
    let mut field_rng = stream(1);
    let mut blob_rng = stream(2);
    let mut plant_rng = stream(3);

    let fields: Vec<Vec<f64>> = (0..m).map(|_| smooth_field(h, w, &mut field_rng)).collect();
    let mut ab1 = Vec::with_capacity(pixels * m);
    for p in 0..pixels {
        let v: Vec<f64> = fields.iter().map(|f| FIELD_GAIN * f[p]).collect();
        ab1.extend(
            project_to_simplex(&v)
                .into_iter()
                .map(|a| (1.0 - PURITY_MIX) * a + PURITY_MIX / m as f64),
        );
    }

    let mask = place_blobs(h, w, config.change_fraction, &mut blob_rng)?;
    let still: Vec<usize> = (0..pixels).filter(|&p| mask[p] == 0).collect();
    if still.len() < m {
        return Err(Error::Capacity("no room left for planted pure pixels".into()));
    }
    let planted: Vec<usize> = sample(&mut plant_rng, still.len(), m)
        .into_iter()
        .map(|i| still[i])
        .collect();
    for (k, &p) in planted.iter().enumerate() {
        let px = &mut ab1[p * m..(p + 1) * m];
        px.fill(0.0);
        px[k] = 1.0;
    }

    // Each blob pixel swaps its dominant endmember with a per-scene target
    // drawn from the blob stream; a pixel already dominated by the target
    // swaps with its weakest endmember instead.
    let target = blob_rng.random_range(0..m);
    let mut ab2 = ab1.clone();
    for p in (0..pixels).filter(|&p| mask[p] == 1) {
        let px = &mut ab2[p * m..(p + 1) * m];
        let d = argmax(px);
        let other = if d == target { argmin(px) } else { target };
        px.swap(d, other);
    }

    let time1 = render(&endmembers, &ab1, config, &mut stream(4))?;
    let time2 = render(&endmembers, &ab2, config, &mut stream(5))?;
    let kind = match config.mixing {
        Mixing::Linear => AbundanceKind::Linear,
        Mixing::Bilinear => AbundanceKind::Nonlinear,
    };
    let endmembers = EndmemberSet::new(endmembers.columns().to_vec(), Some(planted.clone()))?;
    Ok(Scene {
        config: config.clone(),
        pair: CubePair::new(time1, time2)?,
        truth: BinaryMap::new(h, w, mask)?,
        endmembers,
        abundances1: AbundanceCube::new(h, w, m, kind, ab1)?,
        abundances2: AbundanceCube::new(h, w, m, kind, ab2)?,
        planted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SceneConfig {
        SceneConfig {
            height: 32,
            width: 32,
            bands: 16,
            endmembers: 3,
            seed,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn single_endmember_is_positive() {
        let e = gen_endmembers(1, 20, 3).unwrap();
        let c = e.column(0);
        assert!(c.iter().all(|&v| v > 0.0));
        assert!((c.iter().copied().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn endmembers_reproduce_and_stay_apart() {
        assert_eq!(gen_endmembers(4, 32, 9).unwrap(), gen_endmembers(4, 32, 9).unwrap());
        for seed in 0..50 {
            let e = gen_endmembers(4, 32, seed).unwrap();
            for i in 0..4 {
                for j in i + 1..4 {
                    let deg = spectral_angle(e.column(i), e.column(j)).to_degrees();
                    assert!(deg >= MIN_ENDMEMBER_ANGLE_DEG, "seed {seed}: {deg}");
                }
            }
        }
    }

    #[test]
    fn change_fraction_is_met() {
        for seed in 0..5 {
            let s = gen_scene(&small(seed)).unwrap();
            assert!((s.changed_fraction() - 0.2).abs() <= 0.03);
        }
    }

    #[test]
    fn noiseless_unchanged_pixels_are_identical() {
        let cfg = SceneConfig {
            snr_db: f64::INFINITY,
            ..small(1)
        };
        let s = gen_scene(&cfg).unwrap();
        let (a, b) = (s.pair.time1(), s.pair.time2());
        for p in 0..a.pixel_count() {
            let same = a.spectrum(p) == b.spectrum(p);
            assert_eq!(same, s.truth.labels()[p] == 0, "pixel {p}");
        }
    }

    #[test]
    fn empirical_snr_matches() {
        let cfg = SceneConfig {
            snr_db: 20.0,
            ..small(2)
        };
        let noisy = gen_scene(&cfg).unwrap();
        let clean = gen_scene(&SceneConfig {
            snr_db: f64::INFINITY,
            ..cfg.clone()
        })
        .unwrap();
        let (x, y) = (clean.pair.time1().data(), noisy.pair.time1().data());
        let signal: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
        let noise: f64 = x.iter().zip(y).map(|(&a, &b)| (b as f64 - a as f64).powi(2)).sum();
        let snr = 10.0 * (signal / noise).log10();
        assert!((snr - 20.0).abs() <= 0.5, "snr {snr}");
    }

    #[test]
    fn planted_pixels_are_the_only_pure_ones() {
        let s = gen_scene(&small(4)).unwrap();
        let m = s.config.endmembers;
        for p in 0..s.truth.labels().len() {
            let top = s.abundances1.pixel(p).iter().copied().fold(0.0, f64::max);
            assert_eq!(top == 1.0, s.planted.contains(&p));
            assert!(top <= 1.0 - PURITY_MIX + PURITY_MIX / m as f64 || top == 1.0);
        }
        assert_eq!(s.endmembers.source_indices(), Some(&s.planted[..]));
    }

    #[test]
    fn deterministic_per_seed() {
        let a = gen_scene(&small(6)).unwrap();
        let b = gen_scene(&small(6)).unwrap();
        assert_eq!(a.pair, b.pair);
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.sidecar(), b.sidecar());
    }

    #[test]
    fn invalid_configs() {
        let bad = SceneConfig {
            change_fraction: 1.0,
            ..small(0)
        };
        assert!(matches!(gen_scene(&bad), Err(Error::Config(_))));
        let bad = SceneConfig {
            endmembers: 20,
            ..small(0)
        };
        assert!(gen_scene(&bad).is_err());
        assert!("cubic".parse::<Mixing>().is_err());
    }
}
