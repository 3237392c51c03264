//! The detector network.
//!
//! The input image is turned into a small pyramid. Every level goes through
//! the fixed derivative bank and the same stack of learned
//! `conv -> batch norm -> ReLU` blocks; the streams are upsampled back to full
//! resolution, stacked along channels and merged by one linear convolution
//! into the response map.

mod checkpoint;

use std::f64::consts::E;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};

use crate::autograd::{BatchNormMode, BatchStats, Tape, Var, Variable};
use crate::config::{format_list, parse_list, parse_value, ConfigError, KeyValue};
use crate::filters::{derivative_maps_batch, gaussian_blur, BANK_CHANNELS};
use crate::kernels::bilinear_resize;
use crate::real::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Architecture and loss hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyNetConfig {
    pub pyramid_levels: usize,
    pub downsample_factor: f64,
    pub num_learnable_blocks: usize,
    /// `M`, output channels of every learned block.
    pub filters_per_block: usize,
    pub kernel_size: usize,
    /// Whether a learned convolution merges the streams. Without it the
    /// response is the channel mean of the stacked streams.
    pub fusion_layer: bool,
    pub softmax_base: f64,
    pub msip_window_sizes: Vec<usize>,
    pub msip_weights: Vec<f64>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Gaussian smoothing applied before the derivative bank; 0 disables it.
    pub bank_presmooth_sigma: f64,
}

impl Default for KeyNetConfig {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            downsample_factor: 1.2,
            num_learnable_blocks: 3,
            filters_per_block: 8,
            kernel_size: 5,
            fusion_layer: true,
            softmax_base: E,
            msip_window_sizes: vec![8, 16, 24, 32, 40],
            msip_weights: vec![256.0, 64.0, 16.0, 4.0, 1.0],
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            bank_presmooth_sigma: 0.0,
        }
    }
}

impl KeyNetConfig {
    /// One learned block with a single filter on a single pyramid level.
    pub fn tiny() -> Self {
        Self {
            pyramid_levels: 1,
            num_learnable_blocks: 1,
            filters_per_block: 1,
            ..Self::default()
        }
    }

    /// Smallest accepted image side.
    pub fn min_input_size(&self) -> usize {
        self.msip_window_sizes
            .iter()
            .copied()
            .max()
            .unwrap_or(1)
            .max(self.kernel_size)
    }

    /// Channels of one pyramid stream.
    pub fn stream_channels(&self) -> usize {
        if self.num_learnable_blocks == 0 {
            BANK_CHANNELS
        } else {
            self.filters_per_block
        }
    }

    /// Input depth of the fusion layer.
    pub fn fusion_channels(&self) -> usize {
        self.pyramid_levels * self.stream_channels()
    }

    /// Anti-aliasing blur applied before each downsampling step.
    pub fn pyramid_sigma(&self) -> f64 {
        0.8 * (self.downsample_factor * self.downsample_factor - 1.0).sqrt()
    }

    /// Spatial size of every pyramid level for an `h x w` input.
    pub fn pyramid_sizes(&self, h: usize, w: usize) -> Vec<(usize, usize)> {
        (0..self.pyramid_levels)
            .map(|l| {
                let f = self.downsample_factor.powi(l as i32);
                let s = |n: usize| ((n as f64 / f).round() as usize).max(1);
                (s(h), s(w))
            })
            .collect()
    }
}

impl KeyValue for KeyNetConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "pyramid_levels" => self.pyramid_levels = parse_value(key, value)?,
            "downsample_factor" => self.downsample_factor = parse_value(key, value)?,
            "num_learnable_blocks" => self.num_learnable_blocks = parse_value(key, value)?,
            "filters_per_block" => self.filters_per_block = parse_value(key, value)?,
            "kernel_size" => self.kernel_size = parse_value(key, value)?,
            "fusion_layer" => self.fusion_layer = parse_value(key, value)?,
            "softmax_base" => {
                self.softmax_base = if value == "e" {
                    E
                } else {
                    parse_value(key, value)?
                }
            }
            "msip_window_sizes" => self.msip_window_sizes = parse_list(key, value)?,
            "msip_weights" => self.msip_weights = parse_list(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, value)?,
            "bn_eps" => self.bn_eps = parse_value(key, value)?,
            "bank_presmooth_sigma" => self.bank_presmooth_sigma = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("pyramid_levels", self.pyramid_levels.to_string()),
            ("downsample_factor", self.downsample_factor.to_string()),
            ("num_learnable_blocks", self.num_learnable_blocks.to_string()),
            ("filters_per_block", self.filters_per_block.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("fusion_layer", self.fusion_layer.to_string()),
            ("softmax_base", self.softmax_base.to_string()),
            ("msip_window_sizes", format_list(&self.msip_window_sizes)),
            ("msip_weights", format_list(&self.msip_weights)),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("bn_eps", self.bn_eps.to_string()),
            ("bank_presmooth_sigma", self.bank_presmooth_sigma.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let fail = |m: String| Err(ConfigError::Invalid(m));
        if self.pyramid_levels < 1 {
            return fail("pyramid_levels must be at least 1".into());
        }
        if !(self.downsample_factor > 1.0) {
            return fail(format!(
                "downsample_factor must exceed 1, got {}",
                self.downsample_factor
            ));
        }
        if self.num_learnable_blocks > 0 && self.filters_per_block == 0 {
            return fail("filters_per_block must be at least 1".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        if !(self.softmax_base > 1.0) {
            return fail(format!("softmax_base must exceed 1, got {}", self.softmax_base));
        }
        if self.msip_window_sizes.len() != self.msip_weights.len() {
            return fail(format!(
                "{} window sizes but {} weights",
                self.msip_window_sizes.len(),
                self.msip_weights.len()
            ));
        }
        if self.msip_window_sizes.windows(2).any(|p| p[0] >= p[1]) {
            return fail("msip_window_sizes must be strictly increasing".into());
        }
        if self.msip_window_sizes.first().is_some_and(|&n| n < 2) {
            return fail("msip windows must be at least 2 pixels".into());
        }
        if self.msip_weights.iter().any(|&w| !(w >= 0.0)) {
            return fail("msip_weights must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return fail("bn_momentum must lie in [0,1) and bn_eps be positive".into());
        }
        if !(self.bank_presmooth_sigma >= 0.0) {
            return fail("bank_presmooth_sigma must be non-negative".into());
        }
        Ok(())
    }
}

/// Learnable scalars of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCount {
    pub name: String,
    pub kernel: usize,
    pub bias: usize,
    pub batch_norm: usize,
}

impl LayerCount {
    pub fn total(&self) -> usize {
        self.kernel + self.bias + self.batch_norm
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub layers: Vec<LayerCount>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.layers.iter().map(LayerCount::total).sum()
    }

    pub fn kernels(&self) -> usize {
        self.layers.iter().map(|l| l.kernel).sum()
    }
}

/// Number of learnable scalars, per layer. The derivative bank and the
/// batch-norm running statistics are not learnable and count zero.
pub fn count_params(config: &KeyNetConfig) -> ParamCount {
    let k2 = config.kernel_size * config.kernel_size;
    let m = config.filters_per_block;
    let mut layers = Vec::new();
    let mut c_in = BANK_CHANNELS;
    for b in 0..config.num_learnable_blocks {
        layers.push(LayerCount {
            name: format!("block{b}"),
            kernel: m * c_in * k2,
            bias: m,
            batch_norm: 2 * m,
        });
        c_in = m;
    }
    if config.fusion_layer {
        layers.push(LayerCount {
            name: "fusion".into(),
            kernel: config.fusion_channels() * k2,
            bias: 1,
            batch_norm: 0,
        });
    }
    ParamCount { layers }
}

/// One learned `conv -> batch norm -> ReLU` block.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T: Real = f32> {
    pub kernel: Variable<T>,
    pub bias: Variable<T>,
    pub gamma: Variable<T>,
    pub beta: Variable<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Fusion<T: Real = f32> {
    pub kernel: Variable<T>,
    pub bias: Variable<T>,
}

/// All weights. The block list is a single set shared by every pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyNetWeights<T: Real = f32> {
    pub blocks: Vec<Block<T>>,
    pub fusion: Option<Fusion<T>>,
}

/// Expected `(name, shape)` of every stored tensor, in canonical order.
pub fn tensor_layout(config: &KeyNetConfig) -> Vec<(String, Vec<usize>)> {
    let k = config.kernel_size;
    let m = config.filters_per_block;
    let mut out = Vec::new();
    let mut c_in = BANK_CHANNELS;
    for b in 0..config.num_learnable_blocks {
        out.push((format!("block{b}.kernel"), vec![m, c_in, k, k]));
        out.push((format!("block{b}.bias"), vec![m]));
        out.push((format!("block{b}.bn_gamma"), vec![m]));
        out.push((format!("block{b}.bn_beta"), vec![m]));
        out.push((format!("block{b}.bn_running_mean"), vec![m]));
        out.push((format!("block{b}.bn_running_var"), vec![m]));
        c_in = m;
    }
    if config.fusion_layer {
        out.push(("fusion.kernel".into(), vec![1, config.fusion_channels(), k, k]));
        out.push(("fusion.bias".into(), vec![1]));
    }
    out
}

impl<T: Real> KeyNetWeights<T> {
    /// He-normal kernels (`std = sqrt(2 / fan_in)`), zero biases, unit
    /// batch-norm scale and zero offset. Deterministic in `seed`.
    pub fn init(config: &KeyNetConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut he = |shape: [usize; 4]| {
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            Variable::new(Tensor::from_fn(shape, |_| T::lit(normal.sample(&mut rng))))
        };
        let k = config.kernel_size;
        let m = config.filters_per_block;
        let mut blocks = Vec::new();
        let mut c_in = BANK_CHANNELS;
        for _ in 0..config.num_learnable_blocks {
            blocks.push(Block {
                kernel: he([m, c_in, k, k]),
                bias: Variable::new(Tensor::zeros([m])),
                gamma: Variable::new(Tensor::ones([m])),
                beta: Variable::new(Tensor::zeros([m])),
                running_mean: Tensor::zeros([m]),
                running_var: Tensor::ones([m]),
            });
            c_in = m;
        }
        let fusion = config.fusion_layer.then(|| Fusion {
            kernel: he([1, config.fusion_channels(), k, k]),
            bias: Variable::new(Tensor::zeros([1])),
        });
        Self { blocks, fusion }
    }

    /// Learnable variables in canonical order: per block kernel, bias, gamma,
    /// beta; then fusion kernel and bias.
    pub fn params(&self) -> Vec<&Variable<T>> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([&b.kernel, &b.bias, &b.gamma, &b.beta]);
        }
        if let Some(f) = &self.fusion {
            v.extend([&f.kernel, &f.bias]);
        }
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Variable<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.extend([&mut b.kernel, &mut b.bias, &mut b.gamma, &mut b.beta]);
        }
        if let Some(f) = &mut self.fusion {
            v.extend([&mut f.kernel, &mut f.bias]);
        }
        v
    }

    /// Which entries of [`Self::params`] are convolution kernels.
    pub fn kernel_mask(&self) -> Vec<bool> {
        let mut v = Vec::new();
        for _ in &self.blocks {
            v.extend([true, false, false, false]);
        }
        if self.fusion.is_some() {
            v.extend([true, false]);
        }
        v
    }

    /// Every stored tensor (learnable and running statistics) in the order
    /// of [`tensor_layout`].
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.kernel"), &b.kernel.value));
            out.push((format!("block{i}.bias"), &b.bias.value));
            out.push((format!("block{i}.bn_gamma"), &b.gamma.value));
            out.push((format!("block{i}.bn_beta"), &b.beta.value));
            out.push((format!("block{i}.bn_running_mean"), &b.running_mean));
            out.push((format!("block{i}.bn_running_var"), &b.running_var));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion.kernel".into(), &f.kernel.value));
            out.push(("fusion.bias".into(), &f.bias.value));
        }
        out
    }

    /// Rebuilds weights from tensors in [`tensor_layout`] order.
    pub fn from_tensors(config: &KeyNetConfig, tensors: Vec<Tensor<T>>) -> TensorResult<Self> {
        let layout = tensor_layout(config);
        if layout.len() != tensors.len() {
            return Err(TensorError::Invalid {
                op: "weights",
                msg: format!("expected {} tensors, got {}", layout.len(), tensors.len()),
            });
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(TensorError::Shape {
                    op: "weights",
                    expected: format!("{name} {shape:?}"),
                    got: t.shape().to_vec(),
                });
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut blocks = Vec::new();
        for _ in 0..config.num_learnable_blocks {
            blocks.push(Block {
                kernel: Variable::new(next()),
                bias: Variable::new(next()),
                gamma: Variable::new(next()),
                beta: Variable::new(next()),
                running_mean: next(),
                running_var: next(),
            });
        }
        let fusion = config.fusion_layer.then(|| Fusion {
            kernel: Variable::new(next()),
            bias: Variable::new(next()),
        });
        Ok(Self { blocks, fusion })
    }

    pub fn cast<U: Real>(&self) -> KeyNetWeights<U> {
        let var = |v: &Variable<T>| Variable {
            value: v.value.cast(),
            grad: v.grad.cast(),
            requires_grad: v.requires_grad,
        };
        KeyNetWeights {
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    kernel: var(&b.kernel),
                    bias: var(&b.bias),
                    gamma: var(&b.gamma),
                    beta: var(&b.beta),
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                })
                .collect(),
            fusion: self.fusion.as_ref().map(|f| Fusion {
                kernel: var(&f.kernel),
                bias: var(&f.bias),
            }),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Folds the batch statistics of one training forward pass into the
    /// running estimates. `stats` is ordered level-major, as returned by
    /// [`forward_graph`]. Running variances use the unbiased estimate.
    pub fn update_running_stats(&mut self, stats: &[BatchStats<T>], momentum: f64) {
        let n_blocks = self.blocks.len().max(1);
        let mom = T::lit(momentum);
        let rest = T::one() - mom;
        for (i, s) in stats.iter().enumerate() {
            let b = &mut self.blocks[i % n_blocks];
            let correction = if s.count > 1 {
                T::lit(s.count as f64 / (s.count - 1) as f64)
            } else {
                T::one()
            };
            for (r, &m) in b.running_mean.data_mut().iter_mut().zip(&s.mean) {
                *r = mom * *r + rest * m;
            }
            for (r, &v) in b.running_var.data_mut().iter_mut().zip(&s.var) {
                *r = mom * *r + rest * v * correction;
            }
        }
    }
}

/// Learnable weights recorded on a tape.
#[derive(Clone, Debug)]
pub struct ParamVars<'t, T: Real> {
    pub blocks: Vec<[Var<'t, T>; 4]>,
    pub fusion: Option<[Var<'t, T>; 2]>,
}

impl<'t, T: Real> ParamVars<'t, T> {
    /// Groups vars given in the canonical [`KeyNetWeights::params`] order.
    pub fn from_vars(config: &KeyNetConfig, vars: &[Var<'t, T>]) -> TensorResult<Self> {
        let want = 4 * config.num_learnable_blocks + if config.fusion_layer { 2 } else { 0 };
        if vars.len() != want {
            return Err(TensorError::Invalid {
                op: "params",
                msg: format!("expected {want} parameter vars, got {}", vars.len()),
            });
        }
        let blocks = vars[..4 * config.num_learnable_blocks]
            .chunks(4)
            .map(|c| [c[0], c[1], c[2], c[3]])
            .collect();
        let fusion = config.fusion_layer.then(|| {
            let n = vars.len();
            [vars[n - 2], vars[n - 1]]
        });
        Ok(Self { blocks, fusion })
    }

    pub fn bind(tape: &'t Tape<T>, config: &KeyNetConfig, weights: &KeyNetWeights<T>) -> Self {
        let vars: Vec<Var<'t, T>> = weights.params().into_iter().map(|p| tape.variable(p)).collect();
        Self::from_vars(config, &vars).expect("weights match their config")
    }

    /// Records the weights as constants, for inference.
    pub fn constants(tape: &'t Tape<T>, config: &KeyNetConfig, weights: &KeyNetWeights<T>) -> Self {
        let vars: Vec<Var<'t, T>> = weights
            .params()
            .into_iter()
            .map(|p| tape.constant(p.value.clone()))
            .collect();
        Self::from_vars(config, &vars).expect("weights match their config")
    }

    /// All vars in canonical order.
    pub fn flat(&self) -> Vec<Var<'t, T>> {
        let mut v: Vec<Var<'t, T>> = self.blocks.iter().flatten().copied().collect();
        if let Some(f) = &self.fusion {
            v.extend(f.iter().copied());
        }
        v
    }
}

/// Where batch normalization takes its statistics from.
#[derive(Clone, Copy, Debug)]
pub enum BnSource<'a, T: Real> {
    /// Statistics of the current batch (training).
    Batch,
    /// Running statistics stored in the weights (inference).
    Running(&'a KeyNetWeights<T>),
}

pub struct GraphOutput<'t, T: Real> {
    /// `[B, 1, H, W]` response maps.
    pub response: Var<'t, T>,
    /// Batch statistics per (level, block), level-major; empty at inference.
    pub stats: Vec<BatchStats<T>>,
}

fn check_images<T: Real>(config: &KeyNetConfig, images: &Tensor<T>) -> TensorResult<()> {
    let (_, c, h, w) = images.image_dims("keynet forward")?;
    if c != 1 {
        return Err(TensorError::Invalid {
            op: "keynet forward",
            msg: format!("expected single-channel images, got {:?}", images.shape()),
        });
    }
    let min = config.min_input_size();
    if h < min || w < min {
        return Err(TensorError::Invalid {
            op: "keynet forward",
            msg: format!("image is {h}x{w}; the detector requires at least {min}x{min} pixels"),
        });
    }
    Ok(())
}

/// Blurred and downsampled copies of `[B, 1, H, W]` images, level 0 first.
/// Each level is produced from the previous one.
pub fn image_pyramid<T: Real>(
    config: &KeyNetConfig,
    images: &Tensor<T>,
) -> TensorResult<Vec<Tensor<T>>> {
    let (h, w) = images.hw();
    let sizes = config.pyramid_sizes(h, w);
    let sigma = config.pyramid_sigma();
    let mut levels = vec![images.clone()];
    for &(lh, lw) in &sizes[1..] {
        let prev = levels.last().expect("level 0");
        let blurred = gaussian_blur(prev, sigma)?;
        levels.push(bilinear_resize(&blurred, lh, lw)?);
    }
    Ok(levels)
}

/// Records the network on `tape` for a `[B, 1, H, W]` batch.
pub fn forward_graph<'t, T: Real>(
    tape: &'t Tape<T>,
    config: &KeyNetConfig,
    params: &ParamVars<'t, T>,
    images: &Tensor<T>,
    bn: BnSource<'_, T>,
) -> TensorResult<GraphOutput<'t, T>> {
    check_images(config, images)?;
    let (h, w) = images.hw();
    let eps = T::lit(config.bn_eps);
    let mut stats = Vec::new();
    let mut streams = Vec::with_capacity(config.pyramid_levels);
    for level in image_pyramid(config, images)? {
        let level = if config.bank_presmooth_sigma > 0.0 {
            gaussian_blur(&level, config.bank_presmooth_sigma)?
        } else {
            level
        };
        let mut x = tape.constant(derivative_maps_batch(&level)?);
        for (j, [kernel, bias, gamma, beta]) in params.blocks.iter().enumerate() {
            let y = x.conv2d(*kernel, Some(*bias))?;
            let mode = match bn {
                BnSource::Batch => BatchNormMode::Train { eps },
                BnSource::Running(wts) => {
                    let b = &wts.blocks[j];
                    BatchNormMode::Eval {
                        mean: b.running_mean.data().to_vec(),
                        var: b.running_var.data().to_vec(),
                        eps,
                    }
                }
            };
            let (y, s) = y.batch_norm(*gamma, *beta, &mode)?;
            stats.extend(s);
            x = y.relu();
        }
        streams.push(x.bilinear_resize(h, w)?);
    }
    let stacked = if streams.len() == 1 {
        streams[0]
    } else {
        Var::concat(&streams, 1)?
    };
    let response = match &params.fusion {
        Some([kernel, bias]) => stacked.conv2d(*kernel, Some(*bias))?,
        None => {
            let c = config.fusion_channels();
            let mean = tape.constant(Tensor::full([1, c, 1, 1], T::one() / T::lit(c as f64)));
            stacked.conv2d(mean, None)?
        }
    };
    Ok(GraphOutput { response, stats })
}

/// Score for every pixel of a single image.
#[derive(Clone, Debug, PartialEq)]
pub struct ResponseMap<T: Real = f32> {
    /// `[1, H, W]`
    pub scores: Tensor<T>,
}

impl<T: Real> ResponseMap<T> {
    pub fn new(scores: Tensor<T>) -> TensorResult<Self> {
        let (b, c, _, _) = scores.image_dims("response map")?;
        if b != 1 || c != 1 {
            return Err(TensorError::Shape {
                op: "response map",
                expected: "[1, H, W]".into(),
                got: scores.shape().to_vec(),
            });
        }
        let (h, w) = scores.hw();
        Ok(Self {
            scores: scores.reshape([1, h, w])?,
        })
    }

    pub fn hw(&self) -> (usize, usize) {
        self.scores.hw()
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.scores.at2(r, c)
    }
}

/// A configuration together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyNet<T: Real = f32> {
    pub config: KeyNetConfig,
    pub weights: KeyNetWeights<T>,
}

impl<T: Real> KeyNet<T> {
    pub fn new(config: KeyNetConfig, seed: u64) -> Result<Self, ConfigError> {
        config.validate()?;
        let weights = KeyNetWeights::init(&config, seed);
        Ok(Self { config, weights })
    }

    /// Inference on a `[B, 1, H, W]` batch using running batch-norm
    /// statistics.
    pub fn forward_batch(&self, images: &Tensor<T>) -> TensorResult<Tensor<T>> {
        let tape = Tape::new();
        let params = ParamVars::constants(&tape, &self.config, &self.weights);
        let out = forward_graph(
            &tape,
            &self.config,
            &params,
            images,
            BnSource::Running(&self.weights),
        )?;
        let v = out.response.value();
        Ok((*v).clone())
    }

    /// Response map of one `[1, H, W]` image.
    pub fn forward(&self, image: &Tensor<T>) -> TensorResult<ResponseMap<T>> {
        let (b, c, h, w) = image.image_dims("keynet forward")?;
        if b != 1 || c != 1 {
            return Err(TensorError::Invalid {
                op: "keynet forward",
                msg: format!("expected one single-channel image, got {:?}", image.shape()),
            });
        }
        let batch = image.clone().reshape([1, 1, h, w])?;
        ResponseMap::new(self.forward_batch(&batch)?)
    }
}
