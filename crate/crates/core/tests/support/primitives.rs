//! Finite-difference probes of every differentiable primitive.

use std::rc::Rc;

use keynet::autograd::{grad_check, BatchNormMode, GradCheckOptions, GradCheckReport, ScalarFn};
use keynet::geometry::{warp_map, Homography};
use keynet::{Real, Tape, Tensor, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
pub enum Op {
    Add,
    Sub,
    Mul,
    Div,
    Scale,
    AddScalar,
    Square,
    Relu,
    Softplus,
    PowBase,
    Sum,
    SumLast,
    Reshape,
    Broadcast,
    Select,
    IndexSelect,
    Concat,
    Conv,
    ConvNoBias,
    Resample,
    Resize,
    GridWindows,
    Softmax,
    BatchNormTrain,
    BatchNormEval,
}

/// `sum(op(inputs) * w)` with fixed pseudo-random weights `w`, so that every
/// output element contributes with a distinct sensitivity.
struct Probe(Op);

fn weights<'t, T: Real>(tape: &'t Tape<T>, shape: Vec<usize>) -> Var<'t, T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| T::lit(((i * 37 % 17) as f64 - 8.0) / 8.0 + 0.3)).collect();
    tape.constant(Tensor::new(shape, data).unwrap())
}

impl ScalarFn for Probe {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        let y = match self.0 {
            Op::Add => x[0].add(x[1])?,
            Op::Sub => x[0].sub(x[1])?,
            Op::Mul => x[0].mul(x[1])?,
            Op::Div => x[0].div(x[1])?,
            Op::Scale => x[0].scale(T::lit(-1.7)),
            Op::AddScalar => x[0].add_scalar(T::lit(0.4)).square(),
            Op::Square => x[0].square(),
            Op::Relu => x[0].relu(),
            Op::Softplus => x[0].softplus(),
            Op::PowBase => x[0].pow_base(T::lit(2.5))?,
            Op::Sum => x[0].sum().square(),
            Op::SumLast => x[0].sum_last(),
            Op::Reshape => x[0].reshape(vec![6, 2])?,
            Op::Broadcast => x[0].broadcast(vec![2, 3])?,
            Op::Select => x[0].select(1)?,
            Op::IndexSelect => x[0].index_select(&[2, 0, 2])?,
            Op::Concat => Var::concat(&[x[0], x[1]], 1)?,
            Op::Conv => x[0].conv2d(x[1], Some(x[2]))?,
            Op::ConvNoBias => x[0].conv2d(x[1], None)?,
            Op::Resample => {
                let h = Homography::rotation(0.3)
                    .compose(&Homography::scaling(1.3))
                    .compose(&Homography::translation(-3.0, -2.5));
                let (map, _) = warp_map::<T>(&h, 7, 6, 5, 8);
                x[0].resample(Rc::new(map), (5, 8))?
            }
            Op::Resize => x[0].bilinear_resize(7, 4)?,
            Op::GridWindows => x[0].grid_windows(3)?,
            Op::Softmax => x[0].softmax_last(T::lit(3.0))?,
            Op::BatchNormTrain => {
                x[0].batch_norm(x[1], x[2], &BatchNormMode::Train { eps: T::lit(1e-5) })?
                    .0
            }
            Op::BatchNormEval => {
                let mode = BatchNormMode::Eval {
                    mean: vec![T::lit(0.1), T::lit(-0.2)],
                    var: vec![T::lit(0.5), T::lit(1.5)],
                    eps: T::lit(1e-5),
                };
                x[0].batch_norm(x[1], x[2], &mode)?.0
            }
        };
        let w = weights(tape, y.shape());
        Ok(y.mul(w)?.sum())
    }
}

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    random(shape, 0.2, 1.5, seed).zip_map(&random(shape, -1.0, 1.0, seed + 99), |m, s| {
        if s < 0.0 {
            -m
        } else {
            m
        }
    })
    .unwrap()
}

/// Single and double precision reports of one primitive.
pub fn check(op: Op, inputs: &[Tensor<f64>]) -> (GradCheckReport, GradCheckReport) {
    let f = Probe(op);
    let r32 = grad_check::<f32, _>(&f, inputs, &GradCheckOptions::default()).unwrap();
    let r64 = grad_check::<f64, _>(&f, inputs, &GradCheckOptions::default()).unwrap();
    (r32, r64)
}

/// Every primitive with its check inputs. Ops with a kink or pole at zero
/// get inputs bounded away from it.
pub fn cases() -> Vec<(Op, Vec<Tensor<f64>>)> {
    let a = random(&[2, 3], -1.0, 1.0, 1);
    let b = random(&[2, 3], -1.0, 1.0, 2);
    let u = random(&[3, 4], -1.0, 1.0, 4);
    let s = random(&[3, 4], -1.0, 1.0, 7);
    let x = random(&[2, 3, 6, 5], -1.0, 1.0, 11);
    let bn = random(&[3, 2, 4, 3], -1.0, 2.0, 20);
    let g = random(&[2], 0.5, 1.5, 21);
    let beta = random(&[2], -0.5, 0.5, 22);
    vec![
        (Op::Add, vec![a.clone(), b.clone()]),
        (Op::Sub, vec![a.clone(), b.clone()]),
        (Op::Mul, vec![a.clone(), b]),
        (Op::Div, vec![a, away_from_zero(&[2, 3], 3)]),
        (Op::Scale, vec![u.clone()]),
        (Op::AddScalar, vec![u.clone()]),
        (Op::Square, vec![u.clone()]),
        (Op::Softplus, vec![random(&[3, 4], -4.0, 4.0, 5)]),
        (Op::PowBase, vec![u]),
        (Op::Relu, vec![away_from_zero(&[3, 4], 6)]),
        (Op::Sum, vec![s.clone()]),
        (Op::SumLast, vec![s.clone()]),
        (Op::Reshape, vec![s.clone()]),
        (Op::Select, vec![s.clone()]),
        (Op::IndexSelect, vec![s]),
        (Op::Broadcast, vec![random(&[1], -1.0, 1.0, 8)]),
        (
            Op::Concat,
            vec![random(&[2, 1, 3], -1.0, 1.0, 9), random(&[2, 2, 3], -1.0, 1.0, 10)],
        ),
        (
            Op::Conv,
            vec![x.clone(), random(&[2, 3, 3, 3], -0.5, 0.5, 12), random(&[2], -0.5, 0.5, 13)],
        ),
        (Op::ConvNoBias, vec![x, random(&[4, 3, 5, 5], -0.5, 0.5, 14)]),
        (Op::Resample, vec![random(&[2, 7, 6], -1.0, 1.0, 15)]),
        (Op::Resize, vec![random(&[2, 3, 5], -1.0, 1.0, 16)]),
        (Op::Resize, vec![random(&[1, 11, 9], -1.0, 1.0, 17)]),
        (Op::GridWindows, vec![random(&[7, 8], -1.0, 1.0, 18)]),
        (Op::Softmax, vec![random(&[4, 9], -2.0, 2.0, 19)]),
        (Op::BatchNormTrain, vec![bn.clone(), g.clone(), beta.clone()]),
        (Op::BatchNormEval, vec![bn, g, beta]),
    ]
}
