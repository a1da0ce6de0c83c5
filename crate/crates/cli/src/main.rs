use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hsicd_core::affinity::mixed_affinity;
use hsicd_core::hsicube::{normalize_pair, read_envi, read_map, write_envi, write_map, CubePair};
use hsicd_core::nn::{load_checkpoint, save_checkpoint, train, AdagradState, Architecture, Network};
use hsicd_core::pipeline::{
    infer, mean_std, prepare, run_end_to_end, run_repeated, RunConfig,
};
use hsicd_core::predetect::{cva_change_map, cva_magnitude, select_pseudo_labels, LabeledSampleSet};
use hsicd_core::synth::{gen_scene, Mixing, SceneConfig};
use hsicd_core::{evaluate, Error, ErrorClass, Result};

#[derive(Parser)]
#[command(name = "hsicd", version, about = "Hyperspectral change detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bitemporal scene with ground truth.
    Synth(SynthArgs),
    /// Extract endmembers and write linear and nonlinear abundance cubes.
    Unmix(UnmixArgs),
    /// CVA magnitude, baseline change map and pseudo-labels.
    Predetect(ConfigArgs),
    /// Train the network on pseudo-labels and save a checkpoint.
    Train(TrainArgs),
    /// Apply a trained checkpoint to a scene.
    Infer(InferArgs),
    /// Compare a change map against ground truth.
    Evaluate(EvaluateArgs),
    /// Full pipeline: unmix, predetect, train, infer, evaluate.
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(short, long, default_value_t = 4)]
    endmembers: usize,
    /// `linear` or `bilinear`.
    #[arg(long, default_value = "linear")]
    mixing: String,
    /// Noise level in dB; `inf` for a noiseless scene.
    #[arg(long, default_value_t = 30.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.2)]
    change_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short, long)]
    out: PathBuf,
}

/// Settings shared by every stage that needs a scene. A config file is
/// applied first; flags and `--set` entries override it.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` configuration file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    time1: Option<PathBuf>,
    #[arg(long)]
    time2: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Bands to keep, e.g. `0-9,12`.
    #[arg(long)]
    keep_bands: Option<String>,
    #[arg(short, long)]
    endmembers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Any configuration key, as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            cfg.apply_text(&text)?;
        }
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.to_string_lossy().into_owned());
        let flags = [
            ("time1", path(&self.time1)),
            ("time2", path(&self.time2)),
            ("truth", path(&self.truth)),
            ("keep_bands", self.keep_bands.clone()),
            ("endmembers", self.endmembers.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("out_dir", path(&self.out)),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for entry in &self.sets {
            let (k, v) = entry
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got `{entry}`")))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct UnmixArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Also write the mixed-affinity matrix of this pixel (row-major index).
    #[arg(long, value_name = "PIXEL")]
    dump_affinity: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pseudo-label CSV from `predetect`; recomputed when absent.
    #[arg(long)]
    samples: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    /// Also write the metrics line to this file.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Independent runs with seeds `seed, seed + 1, ...`.
    #[arg(long, default_value_t = 1)]
    repeats: usize,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn check_inputs(cfg: &RunConfig) -> Result<()> {
    RunConfig {
        truth: None,
        ..cfg.clone()
    }
    .validate()
}

/// Read, select bands and normalize, as the pipeline does before CVA.
fn load_pair(cfg: &RunConfig) -> Result<CubePair> {
    let pair = CubePair::new(read_envi(&cfg.time1)?, read_envi(&cfg.time2)?)?;
    let pair = match &cfg.keep_bands {
        Some(keep) => pair.select_bands(keep)?,
        None => pair,
    };
    Ok(normalize_pair(&pair))
}

fn synth(args: &SynthArgs) -> Result<()> {
    let cfg = SceneConfig {
        height: args.height,
        width: args.width,
        bands: args.bands,
        endmembers: args.endmembers,
        mixing: args.mixing.parse::<Mixing>()?,
        snr_db: args.snr_db,
        change_fraction: args.change_fraction,
        seed: args.seed,
    };
    let scene = gen_scene(&cfg)?;
    scene.write(&args.out)?;
    println!(
        "wrote {}: changed fraction {:.4}",
        args.out.display(),
        scene.changed_fraction()
    );
    Ok(())
}

fn unmix(args: &UnmixArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    check_inputs(&cfg)?;
    let out = cfg.out_dir.as_path();
    create_dir(out)?;
    let prepared = prepare(&cfg, Some(out))?;
    let u = &prepared.unmixed;
    for (t, name) in ["t1", "t2"].iter().enumerate() {
        write_envi(&u.linear[t].to_hypercube()?, out.join(format!("linear_{name}.hdr")))?;
        write_envi(&u.nonlinear[t].to_hypercube()?, out.join(format!("nonlinear_{name}.hdr")))?;
    }
    if let Some(p) = args.dump_affinity {
        let a = &prepared.affinity;
        if p >= a.pixel_count() {
            return Err(Error::Shape(format!(
                "pixel {p} outside a scene of {} pixels",
                a.pixel_count()
            )));
        }
        let m = mixed_affinity(a.time1.pixel(p), a.time2.pixel(p), a.layout(), a.eps)?;
        write_text(&out.join(format!("affinity_{p}.txt")), &m.to_text())?;
    }
    println!("endmembers and abundances written to {}", out.display());
    Ok(())
}

fn predetect(args: &ConfigArgs) -> Result<()> {
    let cfg = args.resolve()?;
    check_inputs(&cfg)?;
    let out = cfg.out_dir.as_path();
    create_dir(out)?;
    let pair = load_pair(&cfg)?;
    let mag = cva_magnitude(&pair);
    write_map(&cva_change_map(&mag, mag.median())?, out.join("cva_map.pgm"))?;
    let samples = select_pseudo_labels(&mag, &cfg.predetect_config())?;
    samples.write(out.join("samples.csv"))?;
    println!(
        "{} positives, {} negatives written to {}",
        samples.positives(),
        samples.negatives(),
        out.join("samples.csv").display()
    );
    Ok(())
}

fn train_cmd(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    check_inputs(&cfg)?;
    let out = cfg.out_dir.as_path();
    create_dir(out)?;
    let prepared = prepare(&cfg, Some(out))?;
    let samples = match &args.samples {
        Some(path) => LabeledSampleSet::read(path)?,
        None => select_pseudo_labels(&cva_magnitude(&prepared.pair), &cfg.predetect_config())?,
    };
    let arch = Architecture::new(prepared.pair.time1().bands(), cfg.endmembers)?;
    let mut net = Network::<f32>::new(arch, cfg.init_seed());
    let mut state = AdagradState::zeros_like(&net.params());
    let result = train(&mut net, &mut state, &samples, &prepared.affinity, &cfg.train_config());
    save_checkpoint(&net, &state, out.join("checkpoint"))?;
    let report = result?;
    write_text(&out.join("loss.csv"), &report.to_csv())?;
    println!(
        "final loss {:.6}; checkpoint in {}",
        report.final_loss().unwrap_or(f64::NAN),
        out.join("checkpoint").display()
    );
    Ok(())
}

fn infer_cmd(args: &InferArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    check_inputs(&cfg)?;
    let out = cfg.out_dir.as_path();
    create_dir(out)?;
    let (net, _) = load_checkpoint::<f32>(&args.checkpoint)?;
    let prepared = prepare(&cfg, None)?;
    let map = infer(&net, &prepared.affinity)?;
    write_map(&map, out.join("change_map.pgm"))?;
    println!(
        "{} of {} pixels changed; map in {}",
        map.count_changed(),
        map.labels().len(),
        out.join("change_map.pgm").display()
    );
    Ok(())
}

fn evaluate_cmd(args: &EvaluateArgs) -> Result<()> {
    let pred = read_map(&args.pred, None)?;
    let truth = read_map(&args.truth, Some((pred.height(), pred.width())))?;
    let m = evaluate(&pred, &truth)?;
    println!("{m}");
    if let Some(path) = &args.out {
        write_text(path, &format!("{m}\n"))?;
    }
    Ok(())
}

fn run_cmd(args: &RunArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    if args.repeats == 1 {
        let out = run_end_to_end(&cfg)?;
        println!("change map: {}", cfg.out_dir.join("change_map.pgm").display());
        if let (Some(m), Some(c)) = (out.metrics, out.cva_metrics) {
            println!("{m}");
            println!("cva baseline: {c}");
        }
        return Ok(());
    }
    let outs = run_repeated(&cfg, args.repeats)?;
    let metrics: Vec<_> = outs.iter().filter_map(|o| o.metrics).collect();
    for (i, m) in metrics.iter().enumerate() {
        println!("run {i}: {m}");
    }
    if metrics.len() == outs.len() {
        let (oa, oa_sd) = mean_std(&metrics.iter().map(|m| m.oa).collect::<Vec<_>>());
        let (k, k_sd) = mean_std(&metrics.iter().map(|m| m.kappa).collect::<Vec<_>>());
        println!("oa {oa:.4} +- {oa_sd:.4}, kappa {k:.4} +- {k_sd:.4}");
    }
    Ok(())
}

/// Process exit code for an error.
fn exit_code(err: &Error) -> u8 {
    let mut root = err;
    while let Error::Stage { source, .. } = root {
        root = source;
    }
    if matches!(root, Error::Divergence { .. }) {
        return 8;
    }
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Io => 3,
        ErrorClass::Format => 4,
        ErrorClass::Shape => 5,
        ErrorClass::Numeric => 6,
        ErrorClass::Capacity => 7,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Unmix(a) => unmix(a),
        Command::Predetect(a) => predetect(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run(a) => run_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
