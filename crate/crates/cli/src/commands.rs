//! Subcommand execution. Every command runs from a [`RunManifest`] alone, so
//! a fresh invocation and a replay take the same path.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use keynet::config::{ConfigError, KeyValue};
use keynet::datagen::{
    generate_pairs, list_pairs, read_dataset, read_pair, synthetic_source, write_dataset, DatagenConfig, DatasetMeta,
};
use keynet::eval::{
    detect_with, evaluate_pairs, format_keypoints, read_keypoints, DetectConfig, Detector, EvalConfig, NetDetector,
    RandomDetector, ScaleMode,
};
use keynet::model::{count_params, load_checkpoint, KeyNet, KeyNetConfig};
use keynet::pgm;
use keynet::train::{self, resume_from, RunOutput, TrainConfig, Trainer, FINAL_CHECKPOINT};

use crate::images::{list_images, load_gray, overlay};
use crate::manifest::RunManifest;

/// Writes one line to standard output. A closed pipe ends output quietly.
fn emit(line: std::fmt::Arguments) -> Result<()> {
    match writeln!(std::io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

macro_rules! say {
    ($($t:tt)*) => {
        emit(format_args!($($t)*))?
    };
}

/// A problem with the invocation itself rather than with the data.
#[derive(Debug)]
pub struct Usage(pub String);

impl Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Exit code for an error: 1 for usage and configuration errors, 2 for
/// everything else.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    let is_usage = err
        .chain()
        .any(|e| e.is::<Usage>() || e.is::<ConfigError>());
    if is_usage {
        1
    } else {
        2
    }
}

/// Typed access to the `config.*` entries of a manifest.
pub struct Conf<'a>(&'a [(String, String)]);

impl<'a> Conf<'a> {
    pub fn new(m: &'a RunManifest) -> Self {
        Self(&m.config)
    }

    fn raw(&self, key: &str) -> Option<&'a str> {
        self.0.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get<V: FromStr>(&self, key: &str) -> Result<V>
    where
        V::Err: Display,
    {
        let v = self
            .raw(key)
            .ok_or_else(|| usage(format!("manifest has no config.{key}")))?;
        v.parse()
            .map_err(|e: V::Err| usage(format!("config.{key} = {v:?}: {e}")))
    }

    /// Entries whose keys are not in `skip`.
    pub fn rest(&self, skip: &[&str]) -> Vec<(String, String)> {
        self.0
            .iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .cloned()
            .collect()
    }
}

/// Applies `pairs` to the model configuration, or to the training
/// configuration for keys the model does not know.
pub fn route_config(
    pairs: &[(String, String)],
    model: &mut KeyNetConfig,
    train: &mut TrainConfig,
) -> Result<(), ConfigError> {
    for (k, v) in pairs {
        match model.set(k, v) {
            Err(ConfigError::UnknownKey(_)) => train.set(k, v)?,
            other => other?,
        }
    }
    model.validate()?;
    train.validate()
}

pub fn execute(m: &RunManifest) -> Result<()> {
    match m.command.as_str() {
        "datagen" => datagen(m),
        "train" => run_train(m),
        "detect" => detect(m),
        "eval" => eval(m),
        "params" => params(m),
        "plot" => plot(m),
        other => Err(usage(format!("unknown command {other:?}"))),
    }
}

pub const DATAGEN_KEYS: [&str; 4] = ["seed", "pairs", "synthetic_sources", "synthetic_size"];

/// Source image `i` of a synthetic corpus.
pub fn synthetic_corpus(count: usize, size: usize, seed: u64) -> Vec<keynet::Tensor<f32>> {
    (0..count)
        .map(|i| synthetic_source(seed.wrapping_mul(1_000_003).wrapping_add(i as u64), size, size))
        .collect()
}

fn datagen(m: &RunManifest) -> Result<()> {
    let c = Conf::new(m);
    let seed: u64 = c.get("seed")?;
    let count: usize = c.get("pairs")?;
    let mut cfg = DatagenConfig::default();
    cfg.apply(&c.rest(&DATAGEN_KEYS))?;
    let sources = match m.path("corpus") {
        Some(dir) => list_images(dir)?
            .iter()
            .map(|p| load_gray(p))
            .collect::<Result<Vec<_>>>()?,
        None => synthetic_corpus(c.get("synthetic_sources")?, c.get("synthetic_size")?, seed),
    };
    let out = m.require_path("out_dir")?;
    let (pairs, stats) = generate_pairs(&sources, count, &cfg, seed)?;
    let meta = DatasetMeta {
        config: cfg,
        seed,
        pairs: count,
        stats,
    };
    write_dataset(out, &pairs, &meta)?;
    say!(
        "wrote {} pairs to {} (texture rejection rate {:.3})",
        pairs.len(),
        out.display(),
        meta.stats.rejection_rate()
    );
    Ok(())
}

pub const TRAIN_KEYS: [&str; 1] = ["keep_epoch_checkpoints"];

fn run_train(m: &RunManifest) -> Result<()> {
    let c = Conf::new(m);
    let mut model = KeyNetConfig::default();
    let mut tc = TrainConfig::default();
    route_config(&c.rest(&TRAIN_KEYS), &mut model, &mut tc)?;
    let data = read_dataset(m.require_path("data")?)?.pairs;
    let val = match m.path("val") {
        Some(dir) => Some(read_dataset(dir)?.pairs),
        None => None,
    };
    let out = RunOutput {
        dir: m.require_path("out_dir")?.to_path_buf(),
        per_epoch: c.get("keep_epoch_checkpoints")?,
    };
    let mut trainer = match m.path("resume") {
        Some(ck) => {
            let t = resume_from(ck, tc)?;
            if t.model != model {
                bail!("{} holds a different model configuration than the manifest", ck.display());
            }
            t
        }
        None => Trainer::new(model, tc)?,
    };
    let log = train::train(&mut trainer, &data, val.as_deref(), Some(&out))?;
    if let Some(last) = log.last() {
        say!("epoch {} step {} loss {:.6}", last.epoch, last.step, last.loss);
        if let Some(v) = log.iter().rev().find_map(|e| e.val_repeatability) {
            say!("validation repeatability {v:.2}%");
        }
    }
    say!("checkpoint {}", out.dir.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn detect_config(c: &Conf) -> Result<DetectConfig> {
    let cfg = DetectConfig {
        top_k: c.get("top_k")?,
        nms_size: c.get("nms")?,
        multiscale: if c.get("multiscale")? {
            Some((c.get("levels")?, c.get("factor")?))
        } else {
            None
        },
    };
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<KeyNet<f32>> {
    let (weights, config) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(KeyNet { config, weights })
}

fn detect(m: &RunManifest) -> Result<()> {
    let c = Conf::new(m);
    let cfg = detect_config(&c)?;
    let image = load_gray(m.require_path("image")?)?;
    let model = load_model(m.require_path("checkpoint")?)?;
    let (h, w) = image.hw();
    let mask = match m.path("mask") {
        Some(p) => {
            let (mw, mh, mask) = pgm::read_mask(p)?;
            if (mh, mw) != (h, w) {
                bail!("mask {} is {mw}x{mh} but the image is {w}x{h}", p.display());
            }
            Some(mask)
        }
        None => None,
    };
    let det = detect_with(&model, &image, mask.as_deref(), &cfg)?;
    if det.short() {
        eprintln!(
            "warning: {} keypoints found, {} requested",
            det.keypoints.len(),
            det.requested
        );
    }
    let text = format_keypoints(&det.keypoints);
    match m.path("out") {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(format_args!("{}", text.trim_end()))?,
    }
    Ok(())
}

fn eval(m: &RunManifest) -> Result<()> {
    let c = Conf::new(m);
    let cfg = EvalConfig {
        eps: c.get("eps")?,
        mode: c.get::<ScaleMode>("mode")?,
    };
    let random: usize = c.get("random_keypoints")?;
    let dir = m.require_path("pairs")?;
    let dirs = list_pairs(dir)?;
    if dirs.is_empty() {
        bail!("{} contains no pairs", dir.display());
    }
    let pairs = dirs.iter().map(|d| read_pair(d)).collect::<Result<Vec<_>, _>>()?;
    let model;
    let detector: Box<dyn Detector> = if random > 0 {
        Box::new(RandomDetector {
            seed: c.get("seed")?,
            count: random,
        })
    } else {
        model = load_model(m.require_path("checkpoint")?)?;
        Box::new(NetDetector {
            model: &model,
            config: detect_config(&c)?,
        })
    };
    let s = evaluate_pairs(detector.as_ref(), &pairs, &cfg)?;
    if let Some(p) = m.path("out") {
        let mut tsv = String::from("pair\trepeatability\tcorrespondences\tmean_overlap_error\tscale_range\n");
        for (d, r) in dirs.iter().zip(&s.per_pair) {
            let name = d.file_name().unwrap_or_default().to_string_lossy();
            tsv.push_str(&format!(
                "{name}\t{}\t{}\t{}\t{}\n",
                r.repeatability, r.num_correspondences, r.mean_overlap_error, r.scale_range
            ));
        }
        fs::write(p, tsv).with_context(|| format!("writing {}", p.display()))?;
    }
    say!("pairs\t{}", pairs.len());
    say!("mode\t{}", cfg.mode);
    say!("repeatability\t{:.4}", s.mean_repeatability);
    say!("mean_overlap_error\t{:.4}", s.mean_overlap_error);
    say!("scale_range\t{:.4}", s.scale_range);
    Ok(())
}

fn params(m: &RunManifest) -> Result<()> {
    let mut model = KeyNetConfig::default();
    let mut tc = TrainConfig::default();
    route_config(&m.config, &mut model, &mut tc)?;
    let count = count_params(&model);
    say!("{:<10}{:>8}{:>8}{:>12}{:>8}", "layer", "kernel", "bias", "batch_norm", "total");
    for l in &count.layers {
        say!(
            "{:<10}{:>8}{:>8}{:>12}{:>8}",
            l.name,
            l.kernel,
            l.bias,
            l.batch_norm,
            l.total()
        );
    }
    say!("total {}", count.total());
    Ok(())
}

fn plot(m: &RunManifest) -> Result<()> {
    let image = load_gray(m.require_path("image")?)?;
    let kp_path = m.require_path("keypoints")?;
    let kps = read_keypoints(kp_path).map_err(|e| anyhow!("{}: {e}", kp_path.display()))?;
    let (w, h, px) = overlay(&image, &kps);
    let out = m.require_path("out")?;
    fs::write(out, pgm::encode(w, h, 255, &px)).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}
