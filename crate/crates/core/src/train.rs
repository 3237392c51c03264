//! Siamese training: both views of every pair go through the same weights in
//! one batch, the symmetric covariant loss is averaged over pairs and Adam
//! updates the single shared parameter set.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Tape, Var};
use crate::config::{parse_value, ConfigError, KeyValue};
use crate::datagen::PairSample;
use crate::eval::{evaluate_pairs, DetectConfig, EvalConfig, NetDetector, ScaleMode};
use crate::model::{
    forward_graph, read_checkpoint, write_checkpoint, BnSource, Checkpoint, CheckpointError, KeyNet,
    KeyNetConfig, KeyNetWeights, ParamVars, ResponseMap,
};
use crate::msip::{msip_loss_from_targets, msip_targets, MsipConfig, MsipError, PairGeometry, PairTargets};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.knet";

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training set is empty")]
    EmptyDataset,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("pair {index} is {got}x{got}, the detector needs at least {need}x{need}")]
    PairSize { index: usize, got: usize, need: usize },
    #[error(
        "non-finite loss at epoch {epoch}, step {step} (batch {batch} of the epoch, pairs {pairs:?}); dump: {dump}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        batch: usize,
        pairs: Vec<usize>,
        dump: String,
    },
    #[error("checkpoint {path}: {msg}")]
    Resume { path: String, msg: String },
    #[error("{path}: {error}")]
    Io {
        path: String,
        error: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Msip(#[from] MsipError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, error: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        error,
    }
}

/// Optimisation hyper-parameters. Loss settings come from [`KeyNetConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Pairs per step; each pair contributes two images to the batch.
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub epochs: usize,
    /// Weight of the squared-norm penalty on convolution kernels.
    pub l2_weight: f64,
    pub seed: u64,
    /// Validate every this many epochs; 0 validates after the last epoch only.
    pub val_every: usize,
    pub val_top_k: usize,
    pub val_nms: usize,
    pub val_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            lr_decay: 0.5,
            lr_decay_every: 20,
            epochs: 30,
            l2_weight: 1e-5,
            seed: 0,
            val_every: 0,
            val_top_k: 100,
            val_nms: 15,
            val_eps: 0.4,
        }
    }
}

impl TrainConfig {
    /// Learning rate used throughout 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = epoch.checked_div(self.lr_decay_every).unwrap_or(0);
        self.lr * self.lr_decay.powi(decays as i32)
    }

    fn validates_after(&self, epoch: usize) -> bool {
        epoch + 1 == self.epochs || (self.val_every > 0 && (epoch + 1).is_multiple_of(self.val_every))
    }
}

impl KeyValue for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "lr_decay" => self.lr_decay = parse_value(key, value)?,
            "lr_decay_every" => self.lr_decay_every = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "l2_weight" => self.l2_weight = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "val_every" => self.val_every = parse_value(key, value)?,
            "val_top_k" => self.val_top_k = parse_value(key, value)?,
            "val_nms" => self.val_nms = parse_value(key, value)?,
            "val_eps" => self.val_eps = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_decay", self.lr_decay.to_string()),
            ("lr_decay_every", self.lr_decay_every.to_string()),
            ("epochs", self.epochs.to_string()),
            ("l2_weight", self.l2_weight.to_string()),
            ("seed", self.seed.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_top_k", self.val_top_k.to_string()),
            ("val_nms", self.val_nms.to_string()),
            ("val_eps", self.val_eps.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad("lr must be positive");
        }
        if !(self.lr_decay > 0.0) || !self.lr_decay.is_finite() {
            return bad("lr_decay must be positive");
        }
        if !(self.l2_weight >= 0.0) || !self.l2_weight.is_finite() {
            return bad("l2_weight must be non-negative");
        }
        if self.val_top_k == 0 || self.val_nms == 0 {
            return bad("val_top_k and val_nms must be at least 1");
        }
        if !(self.val_eps > 0.0 && self.val_eps <= 1.0) {
            return bad("val_eps must lie in (0, 1]");
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per learnable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Real = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    /// Steps taken so far.
    pub t: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }
}

/// One Adam update. `l2[k]` adds `l2[k] * theta` to the gradient of
/// parameter `k` before the moments are updated.
pub fn adam_step<T: Real>(
    params: &mut [&mut Tensor<T>],
    grads: &[&Tensor<T>],
    l2: &[f64],
    state: &mut AdamState<T>,
    lr: f64,
) {
    assert_eq!(params.len(), grads.len(), "one gradient per parameter");
    assert_eq!(params.len(), l2.len(), "one decay weight per parameter");
    assert_eq!(params.len(), state.m.len(), "optimiser state matches parameters");
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let (b1, b2) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2));
    let (r1, r2) = (T::lit(1.0 - ADAM_BETA1), T::lit(1.0 - ADAM_BETA2));
    let step = T::lit(lr / c1);
    let inv_c2 = T::lit(1.0 / c2);
    let eps = T::lit(ADAM_EPS);
    for (k, p) in params.iter_mut().enumerate() {
        assert_eq!(p.shape(), grads[k].shape(), "gradient shape of parameter {k}");
        let decay = T::lit(l2[k]);
        let m = state.m[k].data_mut();
        let v = state.v[k].data_mut();
        for (i, (theta, &g)) in p.data_mut().iter_mut().zip(grads[k].data()).enumerate() {
            let g = g + decay * *theta;
            m[i] = b1 * m[i] + r1 * g;
            v[i] = b2 * v[i] + r2 * g * g;
            *theta -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
        }
    }
}

/// `[2P, 1, H, W]` batch: first views of all pairs, then second views.
pub fn stack_views<T: Real>(pairs: &[&PairSample]) -> Tensor<T> {
    let s = pairs[0].size();
    let mut data = Vec::with_capacity(2 * pairs.len() * s * s);
    for side in 0..2 {
        for p in pairs {
            let img = if side == 0 { &p.image_a } else { &p.image_b };
            data.extend(img.data().iter().map(|&v| T::lit(v as f64)));
        }
    }
    Tensor::new([2 * pairs.len(), 1, s, s], data).expect("pairs share one crop size")
}

/// Loss of one batch recorded on a tape.
pub struct BatchLoss<'t, T: Real> {
    /// Mean covariant loss over the pairs.
    pub loss: Var<'t, T>,
    pub value: f64,
    /// Mean unweighted loss per window size.
    pub per_level: Vec<f64>,
    pub stats: Vec<BatchStats<T>>,
    /// Pairs with at least one window size without valid windows.
    pub degenerate: usize,
}

/// Runs both views through the network as one batch and averages the
/// covariant loss over pairs. Without `targets` the hard targets are taken
/// from the responses of this forward pass.
pub fn batch_loss<'t, T: Real>(
    tape: &'t Tape<T>,
    config: &KeyNetConfig,
    params: &ParamVars<'t, T>,
    images: &Tensor<T>,
    geoms: &[PairGeometry<'_>],
    targets: Option<&[PairTargets]>,
) -> Result<BatchLoss<'t, T>, MsipError> {
    let cfg = MsipConfig::from_model(config);
    let n = geoms.len();
    let out = forward_graph(tape, config, params, images, BnSource::Batch)?;
    let (h, w) = images.hw();
    let scale = T::one() / T::lit(n as f64);
    let mut total: Option<Var<'t, T>> = None;
    let mut value = 0.0;
    let mut per_level = vec![0.0; cfg.windows.len()];
    let mut degenerate = 0;
    for (i, geom) in geoms.iter().enumerate() {
        let ra = out.response.select(i)?.reshape([h, w])?;
        let rb = out.response.select(n + i)?.reshape([h, w])?;
        let owned;
        let t = match targets {
            Some(t) => &t[i],
            None => {
                let map = |v: Var<'t, T>| ResponseMap::new((*v.value()).clone().reshape([1, h, w])?);
                owned = msip_targets(&map(ra)?, &map(rb)?, geom, &cfg)?;
                &owned
            }
        };
        let (l, v) = msip_loss_from_targets(ra, rb, t, &cfg)?;
        value += v.total / n as f64;
        for (acc, lv) in per_level.iter_mut().zip(&v.per_level) {
            *acc += lv.loss / n as f64;
        }
        degenerate += v.degenerate() as usize;
        let l = l.scale(scale);
        total = Some(match total {
            Some(t) => t.add(l)?,
            None => l,
        });
    }
    Ok(BatchLoss {
        loss: total.expect("at least one pair"),
        value,
        per_level,
        stats: out.stats,
        degenerate,
    })
}

/// `sum_k l2[k] / 2 * |theta_k|^2`, whose gradient is the decay term of
/// [`adam_step`].
pub fn l2_penalty<T: Real>(weights: &KeyNetWeights<T>, l2_weight: f64) -> f64 {
    weights
        .params()
        .iter()
        .zip(weights.kernel_mask())
        .filter(|(_, k)| *k)
        .map(|(p, _)| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        * 0.5
        * l2_weight
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    /// Covariant loss plus the kernel penalty, before the update.
    pub loss: f64,
    pub msip: f64,
    pub per_level: Vec<f64>,
    pub degenerate: usize,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogEntry {
    /// 1-based.
    pub epoch: usize,
    /// 1-based, counted over the whole run.
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub msip: f64,
    pub per_level: Vec<f64>,
    pub val_repeatability: Option<f64>,
    pub wall_s: f64,
}

impl TrainLogEntry {
    pub fn header(windows: &[usize]) -> String {
        let mut s = String::from("epoch\tstep\tlr\tloss\tmsip");
        for n in windows {
            let _ = write!(s, "\tloss_n{n}");
        }
        s.push_str("\tval_repeatability\twall_s");
        s
    }

    pub fn to_line(&self) -> String {
        let mut s = format!(
            "{}\t{}\t{}\t{}\t{}",
            self.epoch, self.step, self.lr, self.loss, self.msip
        );
        for l in &self.per_level {
            let _ = write!(s, "\t{l}");
        }
        match self.val_repeatability {
            Some(r) => {
                let _ = write!(s, "\t{r}");
            }
            None => s.push_str("\t-"),
        }
        let _ = write!(s, "\t{:.3}", self.wall_s);
        s
    }
}

/// Weights, optimiser state and progress of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: KeyNetConfig,
    pub config: TrainConfig,
    pub weights: KeyNetWeights<f32>,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed steps.
    pub step: usize,
}

impl Trainer {
    /// Fresh weights initialised from `config.seed`.
    pub fn new(model: KeyNetConfig, config: TrainConfig) -> Result<Self, TrainError> {
        model.validate()?;
        config.validate()?;
        MsipConfig::from_model(&model).validate()?;
        let weights = KeyNetWeights::init(&model, config.seed);
        let adam = AdamState::new(&weights.params().iter().map(|p| &p.value).collect::<Vec<_>>());
        Ok(Self {
            model,
            config,
            weights,
            adam,
            epoch: 0,
            step: 0,
        })
    }

    /// One Adam step on `pairs`.
    pub fn step(&mut self, pairs: &[&PairSample], lr: f64) -> Result<StepResult, TrainError> {
        let images = stack_views::<f32>(pairs);
        let geoms: Vec<PairGeometry<'_>> = pairs.iter().map(|p| p.geometry()).collect();
        let tape = Tape::<f32>::new();
        let params = ParamVars::bind(&tape, &self.model, &self.weights);
        let vars = params.flat();
        let batch = batch_loss(&tape, &self.model, &params, &images, &geoms, None)?;
        let penalty = l2_penalty(&self.weights, self.config.l2_weight);
        let result = StepResult {
            loss: batch.value + penalty,
            msip: batch.value,
            per_level: batch.per_level,
            degenerate: batch.degenerate,
        };
        if !result.loss.is_finite() {
            return Err(self.non_finite());
        }
        let grads = tape.backward(batch.loss)?;
        let zeros: Vec<Tensor<f32>> = self
            .weights
            .params()
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        let g: Vec<&Tensor<f32>> = vars
            .iter()
            .zip(&zeros)
            .map(|(v, z)| grads.get(*v).unwrap_or(z))
            .collect();
        if g.iter().any(|t| !t.all_finite()) {
            return Err(self.non_finite());
        }
        self.weights.update_running_stats(&batch.stats, self.model.bn_momentum);
        let l2: Vec<f64> = self
            .weights
            .kernel_mask()
            .iter()
            .map(|&k| if k { self.config.l2_weight } else { 0.0 })
            .collect();
        let mut values: Vec<&mut Tensor<f32>> =
            self.weights.params_mut().into_iter().map(|p| &mut p.value).collect();
        adam_step(&mut values, &g, &l2, &mut self.adam, lr);
        self.step += 1;
        Ok(result)
    }

    /// Same state under a different training configuration.
    pub fn with_config(mut self, config: TrainConfig) -> Self {
        self.config = config;
        self
    }

    fn non_finite(&self) -> TrainError {
        TrainError::NonFinite {
            epoch: self.epoch + 1,
            step: self.step + 1,
            batch: 0,
            pairs: Vec::new(),
            dump: String::new(),
        }
    }

    /// Pair order of 0-based epoch `epoch`. Depends only on the seed and the
    /// epoch, so a resumed run sees the same order.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    pub fn model(&self) -> KeyNet<f32> {
        KeyNet {
            config: self.model.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Weights, optimiser moments and progress.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.model.clone(), self.weights.clone());
        ck.meta.push(("train.epoch".into(), self.epoch.to_string()));
        ck.meta.push(("train.step".into(), self.step.to_string()));
        ck.meta.push(("train.adam_t".into(), self.adam.t.to_string()));
        for (k, v) in self.config.entries() {
            ck.meta.push((format!("train.{k}"), v));
        }
        for (k, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            ck.extras.push((format!("adam.m.{k}"), m.clone()));
            ck.extras.push((format!("adam.v.{k}"), v.clone()));
        }
        ck
    }

    /// Continues from `ck`. The architecture comes from the checkpoint;
    /// `config` may extend the number of epochs.
    pub fn resume(ck: &Checkpoint, config: TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let fail = |msg: String| TrainError::Resume {
            path: path.display().to_string(),
            msg,
        };
        let mut t = Self::new(ck.config.clone(), config)?;
        t.weights = ck.weights.clone();
        let num = |key: &str| -> Result<u64, TrainError> {
            let v = ck.meta(key).ok_or_else(|| fail(format!("missing {key}")))?;
            v.parse().map_err(|_| fail(format!("invalid {key} {v:?}")))
        };
        t.epoch = num("train.epoch")? as usize;
        t.step = num("train.step")? as usize;
        t.adam.t = num("train.adam_t")?;
        for k in 0..t.adam.m.len() {
            for (name, slot) in [("m", &mut t.adam.m[k]), ("v", &mut t.adam.v[k])] {
                let key = format!("adam.{name}.{k}");
                let src = ck.extra(&key).ok_or_else(|| fail(format!("missing {key}")))?;
                if src.shape() != slot.shape() {
                    return Err(fail(format!("{key} has shape {:?}", src.shape())));
                }
                *slot = src.clone();
            }
        }
        Ok(t)
    }

    /// Mean repeatability of the current weights on `pairs`.
    pub fn validate(&self, pairs: &[PairSample]) -> Result<f64, TrainError> {
        validate(
            &self.model(),
            pairs,
            self.config.val_top_k,
            self.config.val_nms,
            &EvalConfig {
                eps: self.config.val_eps,
                mode: ScaleMode::L,
            },
        )
    }
}

/// Mean repeatability in percent of single-scale detections on `pairs`.
pub fn validate(
    model: &KeyNet<f32>,
    pairs: &[PairSample],
    top_k: usize,
    nms: usize,
    cfg: &EvalConfig,
) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyValidation);
    }
    let det = NetDetector {
        model,
        config: DetectConfig {
            top_k,
            nms_size: nms,
            multiscale: None,
        },
    };
    Ok(evaluate_pairs(&det, pairs, cfg)?.mean_repeatability)
}

/// Where a run writes its artefacts.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
    /// Keep `checkpoint_epoch_XXX.knet` files besides the rolling final one.
    pub per_epoch: bool,
}

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("checkpoint_epoch_{epoch:03}.knet")
}

fn check_pairs(pairs: &[PairSample], model: &KeyNetConfig) -> Result<(), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let s = pairs[0].size();
    let need = model.min_input_size();
    for (index, p) in pairs.iter().enumerate() {
        if p.size() != s || s < need {
            return Err(TrainError::PairSize {
                index,
                got: p.size(),
                need: need.max(s),
            });
        }
    }
    Ok(())
}

fn dump_batch(out: Option<&RunOutput>, epoch: usize, batch: usize, pairs: &[&PairSample], ids: &[usize]) -> String {
    let Some(out) = out else {
        return "not written (no output directory)".into();
    };
    let dir = out.dir.join(format!("nonfinite_epoch{epoch:03}_batch{batch:04}"));
    let written = pairs
        .iter()
        .enumerate()
        .try_for_each(|(i, p)| crate::datagen::write_pair(&dir.join(crate::datagen::pair_dir_name(i)), p))
        .map_err(|e| e.to_string())
        .and_then(|_| {
            let index: String = ids.iter().map(|i| format!("{i}\n")).collect();
            fs::write(dir.join("pair_indices.txt"), index).map_err(|e| e.to_string())
        });
    match written {
        Ok(()) => dir.display().to_string(),
        Err(e) => format!("failed: {e}"),
    }
}

/// Trains until `trainer.config.epochs` epochs are complete, starting from
/// whatever progress `trainer` already holds. Returns the log entries of
/// this call; with an output directory the log is appended to and a
/// checkpoint is written after every epoch.
pub fn train(
    trainer: &mut Trainer,
    train_pairs: &[PairSample],
    val_pairs: Option<&[PairSample]>,
    out: Option<&RunOutput>,
) -> Result<Vec<TrainLogEntry>, TrainError> {
    check_pairs(train_pairs, &trainer.model)?;
    if val_pairs.is_some_and(|v| v.is_empty()) {
        return Err(TrainError::EmptyValidation);
    }
    let windows = trainer.model.msip_window_sizes.clone();
    let mut log_file = None;
    if let Some(out) = out {
        fs::create_dir_all(&out.dir).map_err(|e| io_err(&out.dir, e))?;
        let path = out.dir.join(LOG_FILE);
        if !path.exists() || trainer.step == 0 {
            let header = TrainLogEntry::header(&windows) + "\n";
            fs::write(&path, header).map_err(|e| io_err(&path, e))?;
        }
        log_file = Some(path);
    }
    let start = Instant::now();
    let mut log = Vec::new();
    let bs = trainer.config.batch_size;
    while trainer.epoch < trainer.config.epochs {
        let epoch = trainer.epoch;
        let lr = trainer.config.lr_at(epoch);
        let order = trainer.epoch_order(epoch, train_pairs.len());
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        let mut lines = String::new();
        for (bi, ids) in batches.iter().enumerate() {
            let pairs: Vec<&PairSample> = ids.iter().map(|&i| &train_pairs[i]).collect();
            let r = match trainer.step(&pairs, lr) {
                Ok(r) => r,
                Err(TrainError::NonFinite { epoch, step, .. }) => {
                    return Err(TrainError::NonFinite {
                        epoch,
                        step,
                        batch: bi,
                        pairs: ids.to_vec(),
                        dump: dump_batch(out, epoch, bi, &pairs, ids),
                    });
                }
                Err(e) => return Err(e),
            };
            if r.degenerate > 0 {
                log::warn!(
                    "epoch {} step {}: {} pair(s) without valid windows at some size",
                    epoch + 1,
                    trainer.step,
                    r.degenerate
                );
            }
            let last = bi + 1 == batches.len();
            let val = match (last && trainer.config.validates_after(epoch), val_pairs) {
                (true, Some(v)) => Some(trainer.validate(v)?),
                _ => None,
            };
            let entry = TrainLogEntry {
                epoch: epoch + 1,
                step: trainer.step,
                lr,
                loss: r.loss,
                msip: r.msip,
                per_level: r.per_level,
                val_repeatability: val,
                wall_s: start.elapsed().as_secs_f64(),
            };
            lines.push_str(&entry.to_line());
            lines.push('\n');
            log::info!(
                "epoch {} step {} lr {} loss {:.4}{}",
                entry.epoch,
                entry.step,
                lr,
                entry.loss,
                val.map(|v| format!(" val {v:.2}%")).unwrap_or_default()
            );
            log.push(entry);
        }
        trainer.epoch += 1;
        if let (Some(out), Some(path)) = (out, &log_file) {
            use std::io::Write;
            let mut f = fs::OpenOptions::new()
                .append(true)
                .open(path)
                .map_err(|e| io_err(path, e))?;
            f.write_all(lines.as_bytes()).map_err(|e| io_err(path, e))?;
            let ck = trainer.checkpoint();
            if out.per_epoch {
                write_checkpoint(&ck, &out.dir.join(epoch_checkpoint_name(trainer.epoch)))?;
            }
            write_checkpoint(&ck, &out.dir.join(FINAL_CHECKPOINT))?;
        }
    }
    Ok(log)
}

/// Loads a checkpoint written by [`train`] and continues it under `config`.
pub fn resume_from(path: &Path, config: TrainConfig) -> Result<Trainer, TrainError> {
    let ck = read_checkpoint(path)?;
    Trainer::resume(&ck, config, path)
}

#[cfg(test)]
mod tests;
