//! Finite-difference gradient verification.

use super::{Tape, Var};
use crate::real::Real;
use crate::tensor::{Tensor, TensorResult};

/// A scalar function of several tensors, evaluable at any precision.
pub trait ScalarFn {
    fn eval<'t, T: Real>(
        &self,
        tape: &'t Tape<T>,
        inputs: &[Var<'t, T>],
    ) -> TensorResult<Var<'t, T>>;
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Step of the five-point central difference.
    pub eps: f64,
    /// Gradients smaller than `floor * max|g|` are compared in absolute terms
    /// against that floor instead of relative to themselves.
    pub floor: f64,
    /// Coordinates to check per input; `None` checks every coordinate.
    pub coords: Option<Vec<Vec<usize>>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            floor: 1e-3,
            coords: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub precision: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// `(input index, flat coordinate)` of the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub grad_scale: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

fn eval_f64<F: ScalarFn>(f: &F, inputs: &[Tensor<f64>]) -> TensorResult<f64> {
    let tape = Tape::<f64>::new();
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    Ok(out.value().sum())
}

/// Compares the analytic gradient computed at precision `A` with five-point
/// central differences evaluated in `f64`.
///
/// The inputs are first rounded to `A`, so both sides see the same point. The
/// reference always runs in double precision: single precision differences of
/// a long computation are dominated by rounding noise, not by the gradient.
pub fn grad_check<A: Real, F: ScalarFn>(
    f: &F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> TensorResult<GradCheckReport> {
    let rounded: Vec<Tensor<A>> = inputs.iter().map(|t| t.cast::<A>()).collect();
    let point: Vec<Tensor<f64>> = rounded.iter().map(|t| t.cast::<f64>()).collect();

    let tape = Tape::<A>::new();
    let vars: Vec<Var<'_, A>> = rounded.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&tape, &vars)?;
    let ids: Vec<usize> = vars.iter().map(|v| v.id()).collect();
    let grads = tape.backward(out)?;

    let mut pairs = Vec::new();
    let mut probe = point.clone();
    for (k, input) in point.iter().enumerate() {
        let analytic = grads.get_id(ids[k]).expect("leaf gradient");
        let coords: Vec<usize> = match &opts.coords {
            Some(c) => c.get(k).cloned().unwrap_or_default(),
            None => (0..input.numel()).collect(),
        };
        for i in coords {
            let x0 = input.data()[i];
            let mut at = |d: f64| {
                probe[k].data_mut()[i] = x0 + d * opts.eps;
                eval_f64(f, &probe)
            };
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            probe[k].data_mut()[i] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.eps);
            pairs.push((k, i, analytic.data()[i].as_f64(), numeric));
        }
    }

    let grad_scale = pairs
        .iter()
        .fold(0.0f64, |m, &(_, _, a, n)| m.max(a.abs()).max(n.abs()));
    let floor = (opts.floor * grad_scale).max(1e-12);
    let mut report = GradCheckReport {
        precision: A::NAME,
        checked: pairs.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        grad_scale,
    };
    for (k, i, a, n) in pairs {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(floor);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((k, i));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant;
    impl ScalarFn for Constant {
        fn eval<'t, T: Real>(
            &self,
            tape: &'t Tape<T>,
            _inputs: &[Var<'t, T>],
        ) -> TensorResult<Var<'t, T>> {
            Ok(tape.constant(Tensor::scalar(T::lit(4.2))))
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_fn([3], |i| i as f64 * 0.1);
        let r = grad_check::<f64, _>(&Constant, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.grad_scale, 0.0);
        assert_eq!(r.checked, 3);
    }
}
