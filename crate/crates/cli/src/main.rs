//! `keynet`: dataset generation, training, detection, evaluation, parameter
//! counting and keypoint overlays from the command line.

mod commands;
mod images;
mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use keynet::config::{parse_override, parse_pairs, KeyValue};
use keynet::datagen::DatagenConfig;
use keynet::eval::{DEFAULT_EPS, DEFAULT_NMS, DEFAULT_SCALE_FACTOR, DEFAULT_SCALE_LEVELS};
use keynet::model::{read_checkpoint, KeyNetConfig};
use keynet::train::TrainConfig;

use commands::{execute, exit_code, route_config, usage};
use manifest::{RunManifest, VERSION};

#[derive(Parser, Debug)]
#[command(name = "keynet", version, about = "Keypoint detector training and evaluation")]
struct Cli {
    /// Worker threads for data-parallel stages. Results do not depend on it.
    #[arg(long, global = true, env = "KEYNET_THREADS", default_value_t = 1)]
    threads: usize,
    /// Where to write the run manifest [default: <out dir>/manifest.txt,
    /// <out file>.manifest, or ./keynet-<command>.manifest]
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a dataset of warped image pairs
    Datagen(DatagenArgs),
    /// Train a detector on a generated dataset
    Train(TrainArgs),
    /// Detect keypoints in one image
    Detect(DetectArgs),
    /// Repeatability of a detector on a dataset of pairs
    Eval(EvalArgs),
    /// Learnable parameter count, per layer and in total
    Params(ParamsArgs),
    /// Draw keypoints onto an image as circles (PGM output)
    Plot(PlotArgs),
    /// Run again from a manifest written by an earlier run
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true))]
struct DatagenArgs {
    /// Directory of source images (.pgm, .png, .jpg)
    #[arg(long, group = "source")]
    corpus: Option<PathBuf>,
    /// Use this many generated textured images as the source corpus
    #[arg(long, group = "source", value_name = "N")]
    synthetic: Option<usize>,
    /// Side length of generated source images
    #[arg(long, default_value_t = 480)]
    synthetic_size: usize,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Number of pairs
    #[arg(long)]
    pairs: usize,
    /// Random seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Minimum gradient energy of an accepted crop [default: library default]
    #[arg(long)]
    threshold: Option<f64>,
    /// Side length of the square crops [default: 192]
    #[arg(long)]
    crop_size: Option<usize>,
    /// Disable photometric jitter of the second view [default: jitter on]
    #[arg(long)]
    no_jitter: bool,
    /// Generator setting `key=value` (scale, skew, rotation_deg, crop_size,
    /// texture_threshold, jitter, max_attempts); repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the log
    #[arg(long)]
    out: PathBuf,
    /// Validation dataset directory [default: none]
    #[arg(long)]
    val: Option<PathBuf>,
    /// Flat key=value file with model and training settings [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the tiny architecture (one level, one block, one filter)
    /// [default: off]
    #[arg(long)]
    tiny: bool,
    /// Model or training setting `key=value`, applied after --config;
    /// repeatable [default: none]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue from a checkpoint written by an earlier run [default: none]
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Number of epochs [default: 30]
    #[arg(long)]
    epochs: Option<usize>,
    /// Random seed for initialisation and shuffling [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Keep a checkpoint of every epoch [default: off]
    #[arg(long)]
    keep_epochs: bool,
}

#[derive(Args, Debug)]
struct DetectionArgs {
    /// Keypoints kept per image
    #[arg(long, default_value_t = 1000)]
    top_k: usize,
    /// Non-maximum suppression window (odd)
    #[arg(long, default_value_t = DEFAULT_NMS)]
    nms: usize,
    /// Detect over a scale pyramid [default: off]
    #[arg(long)]
    multiscale: bool,
    /// Pyramid levels for --multiscale
    #[arg(long, default_value_t = DEFAULT_SCALE_LEVELS)]
    levels: usize,
    /// Scale factor between pyramid levels for --multiscale
    #[arg(long, default_value_t = DEFAULT_SCALE_FACTOR)]
    factor: f64,
}

impl DetectionArgs {
    fn record(&self, m: &mut RunManifest) {
        push(m, "top_k", self.top_k);
        push(m, "nms", self.nms);
        push(m, "multiscale", self.multiscale);
        push(m, "levels", self.levels);
        push(m, "factor", self.factor);
    }
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// Input image (.pgm, .png, .jpg)
    #[arg(long)]
    image: PathBuf,
    /// Model checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    /// PGM mask restricting detections [default: none]
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Keypoint file to write [default: standard output]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    detection: DetectionArgs,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("detector").required(true))]
struct EvalArgs {
    /// Dataset of pairs
    #[arg(long)]
    pairs: PathBuf,
    /// Model checkpoint
    #[arg(long, group = "detector")]
    checkpoint: Option<PathBuf>,
    /// Evaluate N uniformly random keypoints per image instead of a model
    #[arg(long, group = "detector", value_name = "N")]
    random_keypoints: Option<usize>,
    /// Seed of the random keypoints
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale handling: L (location only) or SL (detected scales)
    #[arg(long, default_value = "L")]
    mode: String,
    /// Maximum overlap error of a correspondence
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    /// Per-pair results as TSV [default: none]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    detection: DetectionArgs,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    /// Tiny architecture [default: off]
    #[arg(long)]
    tiny: bool,
    /// Flat key=value file with model settings [default: none]
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Image to draw on
    #[arg(long)]
    image: PathBuf,
    /// Keypoint file as written by `detect`
    #[arg(long)]
    keypoints: PathBuf,
    /// Output PGM file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    /// Manifest of the run to repeat
    manifest_file: PathBuf,
    /// Redirect the output directory or file of the run [default: as recorded]
    #[arg(long)]
    out: Option<PathBuf>,
}

fn push(m: &mut RunManifest, key: &str, value: impl ToString) {
    m.config.push((key.into(), value.to_string()));
}

fn overrides(set: &[String]) -> Result<Vec<(String, String)>> {
    set.iter()
        .map(|s| parse_override(s).map_err(|e| usage(format!("--set {s:?}: {e}"))))
        .collect()
}

fn read_config_file(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("reading {}: {e}", path.display())))?;
    parse_pairs(&text).with_context(|| format!("{}", path.display()))
}

/// Model and training settings from file, `--tiny` and overrides.
fn model_and_train(
    tiny: bool,
    file: Option<&Path>,
    set: &[String],
) -> Result<(KeyNetConfig, TrainConfig)> {
    let mut model = if tiny {
        KeyNetConfig::tiny()
    } else {
        KeyNetConfig::default()
    };
    let mut tc = TrainConfig::default();
    let mut pairs = match file {
        Some(f) => read_config_file(f)?,
        None => Vec::new(),
    };
    pairs.extend(overrides(set)?);
    route_config(&pairs, &mut model, &mut tc)?;
    Ok((model, tc))
}

fn resolve(cmd: Command, threads: usize) -> Result<RunManifest> {
    let name = match &cmd {
        Command::Datagen(_) => "datagen",
        Command::Train(_) => "train",
        Command::Detect(_) => "detect",
        Command::Eval(_) => "eval",
        Command::Params(_) => "params",
        Command::Plot(_) => "plot",
        Command::Replay(_) => "replay",
    };
    let mut m = RunManifest::new(name, threads);
    match cmd {
        Command::Datagen(a) => {
            let mut cfg = DatagenConfig::default();
            if let Some(t) = a.threshold {
                cfg.texture_threshold = t;
            }
            if let Some(s) = a.crop_size {
                cfg.ranges.crop_size = s;
            }
            cfg.jitter = !a.no_jitter;
            cfg.apply(&overrides(&a.set)?)?;
            match (&a.corpus, a.synthetic) {
                (Some(dir), _) => m.set_path("corpus", dir),
                (None, Some(n)) => {
                    push(&mut m, "synthetic_sources", n);
                    push(&mut m, "synthetic_size", a.synthetic_size);
                }
                (None, None) => unreachable!("clap requires a source"),
            }
            m.set_path("out_dir", &a.out);
            push(&mut m, "seed", a.seed);
            push(&mut m, "pairs", a.pairs);
            m.config.extend(cfg.entries());
        }
        Command::Train(a) => {
            let (mut model, mut tc) = model_and_train(a.tiny, a.config.as_deref(), &a.set)?;
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            tc.validate()?;
            m.set_path("data", &a.data);
            if let Some(v) = &a.val {
                m.set_path("val", v);
            }
            if let Some(ck) = &a.resume {
                let stored = read_checkpoint(ck)
                    .with_context(|| format!("reading {}", ck.display()))?
                    .config;
                if model != KeyNetConfig::default() && model != stored {
                    return Err(usage("model settings cannot change when resuming"));
                }
                model = stored;
                m.set_path("resume", ck);
            }
            m.set_path("out_dir", &a.out);
            m.config.extend(model.entries());
            m.config.extend(tc.entries());
            push(&mut m, "keep_epoch_checkpoints", a.keep_epochs);
        }
        Command::Detect(a) => {
            m.set_path("image", &a.image);
            m.set_path("checkpoint", &a.checkpoint);
            if let Some(p) = &a.mask {
                m.set_path("mask", p);
            }
            if let Some(p) = &a.out {
                m.set_path("out", p);
            }
            a.detection.record(&mut m);
        }
        Command::Eval(a) => {
            let mode: keynet::eval::ScaleMode = a.mode.parse().map_err(usage)?;
            m.set_path("pairs", &a.pairs);
            if let Some(ck) = &a.checkpoint {
                m.set_path("checkpoint", ck);
            }
            if let Some(p) = &a.out {
                m.set_path("out", p);
            }
            push(&mut m, "mode", mode);
            push(&mut m, "eps", a.eps);
            push(&mut m, "random_keypoints", a.random_keypoints.unwrap_or(0));
            push(&mut m, "seed", a.seed);
            a.detection.record(&mut m);
        }
        Command::Params(a) => {
            let (model, _) = model_and_train(a.tiny, a.config.as_deref(), &[])?;
            m.config.extend(model.entries());
        }
        Command::Plot(a) => {
            m.set_path("image", &a.image);
            m.set_path("keypoints", &a.keypoints);
            m.set_path("out", &a.out);
        }
        Command::Replay(a) => {
            let mut m = RunManifest::read(&a.manifest_file).map_err(|e| usage(format!("{e:#}")))?;
            if m.version != VERSION {
                log::warn!("manifest written by version {}, running {VERSION}", m.version);
            }
            if let Some(out) = &a.out {
                let abs = std::path::absolute(out)?;
                match m.paths.iter_mut().find(|(k, _)| k == "out_dir" || k == "out") {
                    Some((_, p)) => *p = abs,
                    None => return Err(usage(format!("a {} run has no output to redirect", m.command))),
                }
            }
            return Ok(m);
        }
    }
    Ok(m)
}

fn run(cli: Cli) -> Result<()> {
    let replay = matches!(cli.command, Command::Replay(_));
    let m = resolve(cli.command, cli.threads)?;
    let threads = if replay { m.threads } else { cli.threads };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build_global()
        .context("starting the thread pool")?;
    let location = cli.manifest.unwrap_or_else(|| m.default_location());
    m.write(&location)?;
    execute(&m)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
