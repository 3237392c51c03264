//! Finite-difference check of the whole training objective: image pyramid,
//! derivative bank, learned blocks with batch normalisation, fusion and the
//! multi-scale covariant loss of one pair, with respect to every learnable
//! tensor.
//!
//! The objective is piecewise smooth: every ReLU has a kink at zero, and on a
//! 64x64 pair some of the ~10^5 pre-activations always lie within reach of a
//! 1e-3 stencil. The differences are therefore taken on the smooth piece that
//! contains the check point, by replacing each ReLU with multiplication by
//! its activation pattern frozen at that point. The rebuilt graph is first
//! shown to reproduce the library loss and gradients bit for bit.

use keynet::autograd::{grad_check, BatchNormMode, GradCheckOptions, GradCheckReport, ScalarFn};
use keynet::datagen::{generate_pairs, synthetic_source, DatagenConfig, PairSample, WarpRanges};
use keynet::filters::{derivative_maps_batch, gaussian_blur};
use keynet::model::{forward_graph, image_pyramid, BnSource, KeyNetConfig, KeyNetWeights, ParamVars, ResponseMap};
use keynet::msip::{msip_loss_from_targets, msip_targets, MsipConfig, PairTargets};
use keynet::train::{batch_loss, stack_views};
use keynet::{Real, Tape, Tensor, TensorError, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const COORDS_PER_TENSOR: usize = 6;
pub const SIZE: usize = 64;

/// The training objective of one pair, with ReLU activation patterns either
/// computed (`masks == None`) or fixed.
struct Objective {
    config: KeyNetConfig,
    pair: PairSample,
    targets: Vec<PairTargets>,
    /// One `{0, 1}` tensor per (level, block), level-major.
    masks: Option<Vec<Tensor<f64>>>,
}

/// Output of the rebuilt graph.
struct Rebuilt<'t, T: Real> {
    loss: Var<'t, T>,
    /// Pre-activation of every block, level-major.
    pre: Vec<Tensor<T>>,
}

impl Objective {
    fn rebuild<'t, T: Real>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> TensorResult<Rebuilt<'t, T>> {
        let cfg = &self.config;
        let params = ParamVars::from_vars(cfg, x)?;
        let images = stack_views::<T>(&[&self.pair]);
        let (h, w) = images.hw();
        let eps = T::lit(cfg.bn_eps);
        let mut pre = Vec::new();
        let mut streams = Vec::new();
        for level in image_pyramid(cfg, &images)? {
            let level = if cfg.bank_presmooth_sigma > 0.0 {
                gaussian_blur(&level, cfg.bank_presmooth_sigma)?
            } else {
                level
            };
            let mut act = tape.constant(derivative_maps_batch(&level)?);
            for [kernel, bias, gamma, beta] in &params.blocks {
                let y = act.conv2d(*kernel, Some(*bias))?;
                let (y, _) = y.batch_norm(*gamma, *beta, &BatchNormMode::Train { eps })?;
                act = match &self.masks {
                    None => y.relu(),
                    Some(m) => y.mul(tape.constant(m[pre.len()].cast()))?,
                };
                pre.push((*y.value()).clone());
            }
            streams.push(act.bilinear_resize(h, w)?);
        }
        let stacked = if streams.len() == 1 {
            streams[0]
        } else {
            Var::concat(&streams, 1)?
        };
        let response = match &params.fusion {
            Some([kernel, bias]) => stacked.conv2d(*kernel, Some(*bias))?,
            None => {
                let c = cfg.fusion_channels();
                let mean = tape.constant(Tensor::full([1, c, 1, 1], T::one() / T::lit(c as f64)));
                stacked.conv2d(mean, None)?
            }
        };
        let ra = response.select(0)?.reshape([h, w])?;
        let rb = response.select(1)?.reshape([h, w])?;
        let (loss, _) = msip_loss_from_targets(ra, rb, &self.targets[0], &MsipConfig::from_model(cfg))
            .map_err(|e| TensorError::Invalid {
                op: "objective",
                msg: e.to_string(),
            })?;
        Ok(Rebuilt {
            loss: loss.scale(T::one()),
            pre,
        })
    }
}

impl ScalarFn for Objective {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        Ok(self.rebuild(tape, x)?.loss)
    }
}

fn one_pair() -> PairSample {
    let cfg = DatagenConfig {
        ranges: WarpRanges {
            crop_size: SIZE,
            ..WarpRanges::default()
        },
        ..DatagenConfig::default()
    };
    let src = synthetic_source(21, 2 * SIZE + 40, 2 * SIZE + 40);
    generate_pairs(&[src], 1, &cfg, 4).unwrap().0.remove(0)
}

/// Initial weights with every parameter, biases included, moved off its
/// initial value.
fn check_point(config: &KeyNetConfig) -> Vec<Tensor<f64>> {
    let weights = KeyNetWeights::<f64>::init(config, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut inputs: Vec<Tensor<f64>> = weights.params().iter().map(|p| p.value.clone()).collect();
    for t in inputs.iter_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
    }
    // Round once so that the f32 and f64 checks share the point exactly.
    inputs.iter().map(|t| t.cast::<f32>().cast()).collect()
}

fn objective(config: KeyNetConfig, inputs: &[Tensor<f64>]) -> Objective {
    let pair = one_pair();
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let params = ParamVars::from_vars(&config, &vars).unwrap();
    let images = stack_views::<f64>(&[&pair]);
    let out = forward_graph(&tape, &config, &params, &images, BnSource::Batch).unwrap();
    let r = out.response.value();
    let map = |i: usize| ResponseMap::new(Tensor::new([1, SIZE, SIZE], r.plane(i).to_vec()).unwrap()).unwrap();
    let targets = vec![msip_targets(&map(0), &map(1), &pair.geometry(), &MsipConfig::from_model(&config)).unwrap()];
    Objective {
        config,
        pair,
        targets,
        masks: None,
    }
}

/// Loss and parameter gradients through the library training path.
fn library_gradients(f: &Objective, inputs: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>) {
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let params = ParamVars::from_vars(&f.config, &vars).unwrap();
    let images = stack_views::<f64>(&[&f.pair]);
    let b = batch_loss(&tape, &f.config, &params, &images, &[f.pair.geometry()], Some(&f.targets)).unwrap();
    let loss = b.loss.item();
    let g = tape.backward(b.loss).unwrap();
    (loss, vars.iter().map(|v| g.get(*v).unwrap().clone()).collect())
}

fn rebuilt_gradients(f: &Objective, inputs: &[Tensor<f64>]) -> (f64, Vec<Tensor<f64>>, Vec<Tensor<f64>>) {
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let r = f.rebuild(&tape, &vars).unwrap();
    let loss = r.loss.item();
    let g = tape.backward(r.loss).unwrap();
    (loss, vars.iter().map(|v| g.get(*v).unwrap().clone()).collect(), r.pre)
}

fn sampled_coords(inputs: &[Tensor<f64>], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    inputs
        .iter()
        .map(|t| {
            let n = t.numel();
            if n <= COORDS_PER_TENSOR {
                (0..n).collect()
            } else {
                let mut c: Vec<usize> = (0..COORDS_PER_TENSOR).map(|_| rng.gen_range(0..n)).collect();
                c.sort_unstable();
                c.dedup();
                c
            }
        })
        .collect()
}

/// Outcome of the whole-objective check at one parameter point.
#[derive(Debug)]
pub struct ChainReport {
    /// The rebuilt graph reproduces library loss and gradients bit for bit,
    /// with computed and with frozen activation patterns.
    pub matches_library: bool,
    pub f64: GradCheckReport,
    /// Excludes the biases that feed batch normalisation.
    pub f32: GradCheckReport,
    /// Largest single-precision value of those biases' gradients over the
    /// gradient scale. Their exact gradient is zero.
    pub zero_grad_noise: f64,
}

pub fn run(config: KeyNetConfig) -> ChainReport {
    let inputs = check_point(&config);
    let mut f = objective(config, &inputs);

    let (lib_loss, lib_grads) = library_gradients(&f, &inputs);
    let (loss, grads, pre) = rebuilt_gradients(&f, &inputs);
    let mut matches_library = loss == lib_loss && grads == lib_grads;

    f.masks = Some(
        pre.iter()
            .map(|p| p.map(|v| if v > 0.0 { 1.0 } else { 0.0 }))
            .collect(),
    );
    let (frozen_loss, frozen_grads, _) = rebuilt_gradients(&f, &inputs);
    matches_library &= frozen_loss == lib_loss && frozen_grads == lib_grads;

    let opts = GradCheckOptions {
        coords: Some(sampled_coords(&inputs, 9)),
        ..GradCheckOptions::default()
    };
    let r64 = grad_check::<f64, _>(&f, &inputs, &opts).unwrap();
    // Biases feeding batch normalisation have an identically zero gradient. In
    // single precision their value is rounding noise with no scale of its
    // own, so it is bounded against the gradient scale instead.
    let zero = structurally_zero(&f.config);
    let mut coords32 = opts.coords.clone().unwrap();
    for &k in &zero {
        coords32[k].clear();
    }
    let opts32 = GradCheckOptions {
        coords: Some(coords32),
        ..opts.clone()
    };
    let r32 = grad_check::<f32, _>(&f, &inputs, &opts32).unwrap();
    let g32 = f32_gradients(&f, &inputs);
    let noise = zero
        .iter()
        .map(|&k| g32[k].max_abs() as f64)
        .fold(0.0, f64::max);
    ChainReport {
        matches_library,
        zero_grad_noise: noise / r32.grad_scale,
        f64: r64,
        f32: r32,
    }
}

fn structurally_zero(config: &KeyNetConfig) -> Vec<usize> {
    (0..config.num_learnable_blocks).map(|b| 4 * b + 1).collect()
}

fn f32_gradients(f: &Objective, inputs: &[Tensor<f64>]) -> Vec<Tensor<f32>> {
    let tape = Tape::<f32>::new();
    let vars: Vec<Var<'_, f32>> = inputs.iter().map(|t| tape.leaf(t.cast())).collect();
    let loss = f.eval(&tape, &vars).unwrap();
    let g = tape.backward(loss).unwrap();
    vars.iter().map(|v| g.get(*v).unwrap().clone()).collect()
}
