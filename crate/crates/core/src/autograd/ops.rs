//! Differentiable primitives.

use std::rc::Rc;

use super::Var;
use crate::kernels::{self, SparseMap};
use crate::real::{lane_dot, lane_sum, Real};
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Per-channel statistics of one batch-norm call in training mode.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance of the batch.
    pub var: Vec<T>,
    /// Number of values each statistic was computed from.
    pub count: usize,
}

#[derive(Clone, Debug)]
pub enum BatchNormMode<T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: T },
    /// Normalize with fixed (running) statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorResult<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::Mismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

impl<'t, T: Real> Var<'t, T> {
    // -- elementwise ------------------------------------------------------

    pub fn add(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("add", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x + y)?;
        Ok(self
            .tape
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("sub", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x - y)?;
        Ok(self
            .tape
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("mul", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g * y).unwrap()),
                need[1].then(|| g.zip_map(&a, |g, x| g * x).unwrap()),
            ]
        }))
    }

    pub fn div(self, other: Var<'t, T>) -> TensorResult<Var<'t, T>> {
        let (a, b) = (self.value(), other.value());
        same_shape("div", &a, &b)?;
        let out = a.zip_map(&b, |x, y| x / y)?;
        let q = out.clone();
        Ok(self.tape.record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |g, y| g / y).unwrap()),
                need[1].then(|| {
                    let gq = g.zip_map(&q, |g, q| g * q).unwrap();
                    gq.zip_map(&b, |v, y| -v / y).unwrap()
                }),
            ]
        }))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x * c);
        self.tape
            .record(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let out = self.value().map(|x| x + c);
        self.tape.record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |g, v| g * (v + v)).unwrap())]
        })
    }

    pub fn relu(self) -> Var<'t, T> {
        let out = self.value().map(|v| v.max(T::zero()));
        let y = out.clone();
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&y, |g, y| if y > T::zero() { g } else { T::zero() })
                    .unwrap(),
            )]
        })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        let x = self.value();
        let out = x.map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(
                g.zip_map(&x, |g, v| g / (T::one() + (-v).exp())).unwrap(),
            )]
        })
    }

    /// Elementwise `base^x`.
    pub fn pow_base(self, base: T) -> TensorResult<Var<'t, T>> {
        if !(base > T::zero()) {
            return Err(TensorError::Invalid {
                op: "pow_base",
                msg: format!("base must be positive, got {base}"),
            });
        }
        let ln_b = base.ln();
        let out = self.value().map(|v| (v * ln_b).exp());
        let y = out.clone();
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&y, |g, y| g * y * ln_b).unwrap())]
        }))
    }

    // -- reductions and shape ---------------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(shape, g.item()))]
        })
    }

    /// Sum over the last axis (window sums after [`Var::grid_windows`]).
    pub fn sum_last(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let k = *shape.last().unwrap_or(&1);
        let out_shape: Vec<usize> = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        let out: Vec<T> = x
            .data()
            .chunks(k.max(1))
            .map(|c| c.iter().copied().sum())
            .collect();
        let out = Tensor::new(out_shape, out).unwrap();
        self.tape.record(out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(shape.iter().product());
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv, k));
            }
            vec![Some(Tensor::new(shape, gx).unwrap())]
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(in_shape).unwrap())]
        }))
    }

    /// Expands a one-element var to `shape`.
    pub fn broadcast(self, shape: impl Into<Vec<usize>>) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        if x.numel() != 1 {
            return Err(TensorError::Shape {
                op: "broadcast",
                expected: "one element".into(),
                got: x.shape().to_vec(),
            });
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::full(shape, x.item());
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(Tensor::full(in_shape, g.sum()))]
        }))
    }

    /// Entry `i` along the first axis.
    pub fn select(self, i: usize) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if shape.is_empty() || i >= shape[0] {
            return Err(TensorError::Invalid {
                op: "select",
                msg: format!("index {i} out of range for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let out_shape = if shape.len() > 1 {
            shape[1..].to_vec()
        } else {
            vec![1]
        };
        let out = Tensor::new(out_shape, x.data()[i * inner..(i + 1) * inner].to_vec())?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(shape);
            gx.data_mut()[i * inner..(i + 1) * inner].copy_from_slice(g.data());
            vec![Some(gx)]
        }))
    }

    /// Rows `indices` along the first axis (repeats allowed).
    pub fn index_select(self, indices: &[usize]) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let rows = *shape.first().unwrap_or(&0);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Invalid {
                op: "index_select",
                msg: format!("index {bad} out of range for shape {shape:?}"),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let out = Tensor::new(out_shape, data)?;
        let indices = indices.to_vec();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(shape);
            for (j, &i) in indices.iter().enumerate() {
                let dst = &mut gx.data_mut()[i * inner..(i + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(&g.data()[j * inner..(j + 1) * inner]) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Concatenates vars along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> TensorResult<Var<'t, T>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::Invalid {
                op: "concat",
                msg: format!("axis {axis} out of range for {base:?}"),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Mismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
        }
        let outer: usize = base[..axis].iter().product();
        let tail: usize = base[axis + 1..].iter().product();
        let chunk: Vec<usize> = values.iter().map(|v| v.shape()[axis] * tail).collect();
        let total_axis: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let row: usize = chunk.iter().sum();
        let mut data = Vec::with_capacity(outer * row);
        for o in 0..outer {
            for (v, &c) in values.iter().zip(&chunk) {
                data.extend_from_slice(&v.data()[o * c..(o + 1) * c]);
            }
        }
        let out = Tensor::new(out_shape, data)?;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        drop(values);
        Ok(first.tape.record(out, parts, move |g, need| {
            let mut grads: Vec<Option<Vec<T>>> = need
                .iter()
                .zip(&shapes)
                .map(|(&n, s)| n.then(|| Vec::with_capacity(s.iter().product())))
                .collect();
            for o in 0..outer {
                let mut off = o * row;
                for (gp, &c) in grads.iter_mut().zip(&chunk) {
                    if let Some(gp) = gp {
                        gp.extend_from_slice(&g.data()[off..off + c]);
                    }
                    off += c;
                }
            }
            grads
                .into_iter()
                .zip(shapes)
                .map(|(gp, s)| gp.map(|d| Tensor::new(s, d).unwrap()))
                .collect()
        }))
    }

    // -- image ops --------------------------------------------------------

    /// Zero-padded "same" cross-correlation, see [`kernels::conv2d`].
    pub fn conv2d(self, kernel: Var<'t, T>, bias: Option<Var<'t, T>>) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        let k = kernel.value();
        let b = bias.map(|b| b.value());
        let out = kernels::conv2d(&x, &k, b.as_deref())?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        Ok(self.tape.record(out, &parents, move |g, need| {
            let grads = kernels::conv2d_backward(
                &x,
                &k,
                g,
                [need[0], need[1], need.get(2).copied().unwrap_or(false)],
            );
            let mut v = vec![grads.input, grads.kernel];
            if need.len() > 2 {
                v.push(grads.bias);
            }
            v
        }))
    }

    /// Applies a fixed sparse linear map to every trailing `H x W` plane,
    /// producing planes of size `out_hw`.
    pub fn resample(
        self,
        map: Rc<SparseMap<T>>,
        out_hw: (usize, usize),
    ) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(TensorError::Shape {
                op: "resample",
                expected: "[.., H, W]".into(),
                got: x.shape().to_vec(),
            });
        }
        let (h, w) = x.hw();
        if h * w != map.in_len() || out_hw.0 * out_hw.1 != map.out_len() {
            return Err(TensorError::Invalid {
                op: "resample",
                msg: format!(
                    "map {}->{} does not fit planes {h}x{w}->{}x{}",
                    map.in_len(),
                    map.out_len(),
                    out_hw.0,
                    out_hw.1
                ),
            });
        }
        let in_shape = x.shape().to_vec();
        let mut out_shape = in_shape.clone();
        let r = out_shape.len();
        out_shape[r - 2] = out_hw.0;
        out_shape[r - 1] = out_hw.1;
        let out = Tensor::new(out_shape, map.apply_planes(x.data()))?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            vec![Some(
                Tensor::new(in_shape, map.apply_planes_transpose(g.data())).unwrap(),
            )]
        }))
    }

    /// Bilinear resize (half-pixel centers) of every trailing plane.
    pub fn bilinear_resize(self, out_h: usize, out_w: usize) -> TensorResult<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() < 2 || out_h == 0 || out_w == 0 {
            return Err(TensorError::Invalid {
                op: "bilinear_resize",
                msg: format!("cannot resize {shape:?} to {out_h}x{out_w}"),
            });
        }
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        if (h, w) == (out_h, out_w) {
            return Ok(self);
        }
        let map = Rc::new(kernels::resize_map::<T>(h, w, out_h, out_w));
        self.resample(map, (out_h, out_w))
    }

    /// Partitions an `[H, W]` map into non-overlapping `n x n` windows,
    /// returning `[G, n*n]` with windows and their elements in row-major
    /// order. Partial windows at the right and bottom borders are dropped.
    pub fn grid_windows(self, n: usize) -> TensorResult<Var<'t, T>> {
        let x = self.value();
        let &[h, w] = x.shape() else {
            return Err(TensorError::Shape {
                op: "grid_windows",
                expected: "[H, W]".into(),
                got: x.shape().to_vec(),
            });
        };
        if n == 0 || n > h || n > w {
            return Err(TensorError::Invalid {
                op: "grid_windows",
                msg: format!("window {n} does not fit a {h}x{w} map"),
            });
        }
        let (gy, gx) = (h / n, w / n);
        let mut data = Vec::with_capacity(gy * gx * n * n);
        for wy in 0..gy {
            for wx in 0..gx {
                for r in 0..n {
                    let row = (wy * n + r) * w + wx * n;
                    data.extend_from_slice(&x.data()[row..row + n]);
                }
            }
        }
        let out = Tensor::new([gy * gx, n * n], data)?;
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gxm = Tensor::zeros([h, w]);
            let gd = g.data();
            let mut i = 0;
            for wy in 0..gy {
                for wx in 0..gx {
                    for r in 0..n {
                        let row = (wy * n + r) * w + wx * n;
                        gxm.data_mut()[row..row + n].copy_from_slice(&gd[i..i + n]);
                        i += n;
                    }
                }
            }
            vec![Some(gxm)]
        }))
    }

    /// Softmax over the last axis with weights `base^x`, stabilized by
    /// subtracting the per-row maximum.
    pub fn softmax_last(self, base: T) -> TensorResult<Var<'t, T>> {
        if !(base > T::one()) {
            return Err(TensorError::Invalid {
                op: "softmax_last",
                msg: format!("base must exceed 1, got {base}"),
            });
        }
        let ln_b = base.ln();
        let x = self.value();
        let k = *x.shape().last().unwrap_or(&1);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(k) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = ((v - m) * ln_b).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let y = out.clone();
        Ok(self.tape.record(out, &[self], move |g, _| {
            let mut gx = Vec::with_capacity(y.numel());
            for (yr, gr) in y.data().chunks(k).zip(g.data().chunks(k)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                gx.extend(yr.iter().zip(gr).map(|(&a, &b)| ln_b * a * (b - dot)));
            }
            vec![Some(Tensor::new(y.shape().to_vec(), gx).unwrap())]
        }))
    }

    /// Per-channel batch normalization of a `[B,C,H,W]` (or `[C,H,W]`) input.
    /// In training mode the batch statistics are returned so the caller can
    /// update running estimates.
    pub fn batch_norm(
        self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mode: &BatchNormMode<T>,
    ) -> TensorResult<(Var<'t, T>, Option<BatchStats<T>>)> {
        let x = self.value();
        let (bsz, c, h, w) = x.image_dims("batch_norm")?;
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(TensorError::Mismatch {
                op: "batch_norm",
                lhs: vec![c],
                rhs: gm.shape().to_vec(),
            });
        }
        let hw = h * w;
        let count = bsz * hw;
        let plane = move |b: usize, ch: usize| (b * c + ch) * hw;

        let (mean, var, eps, stats) = match mode {
            BatchNormMode::Train { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let n = T::lit(count as f64);
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..bsz {
                        s += lane_sum(&x.data()[plane(b, ch)..plane(b, ch) + hw]);
                    }
                    let mu = s / n;
                    let mut v = T::zero();
                    let mut centered = vec![T::zero(); hw];
                    for b in 0..bsz {
                        for (d, &xv) in centered.iter_mut().zip(&x.data()[plane(b, ch)..plane(b, ch) + hw]) {
                            *d = xv - mu;
                        }
                        v += lane_dot(&centered, &centered);
                    }
                    mean[ch] = mu;
                    var[ch] = v / n;
                }
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count,
                };
                (mean, var, *eps, Some(stats))
            }
            BatchNormMode::Eval { mean, var, eps } => {
                if mean.len() != c || var.len() != c {
                    return Err(TensorError::Invalid {
                        op: "batch_norm",
                        msg: format!("running statistics have {} channels, input {c}", mean.len()),
                    });
                }
                (mean.clone(), var.clone(), *eps, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        let mut out = vec![T::zero(); x.numel()];
        for b in 0..bsz {
            for ch in 0..c {
                let p = plane(b, ch);
                let (mu, is, g, bb) = (mean[ch], inv_std[ch], gm.data()[ch], bt.data()[ch]);
                for i in p..p + hw {
                    let xh = (x.data()[i] - mu) * is;
                    xhat[i] = xh;
                    out[i] = g * xh + bb;
                }
            }
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let train = matches!(mode, BatchNormMode::Train { .. });
        let x_shape = x.shape().to_vec();
        drop(x);
        let var = self.tape.record(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..bsz {
                for ch in 0..c {
                    let p = plane(b, ch);
                    dbeta[ch] += lane_sum(&gd[p..p + hw]);
                    dgamma[ch] += lane_dot(&gd[p..p + hw], &xhat[p..p + hw]);
                }
            }
            let dx = need[0].then(|| {
                let mut dx = vec![T::zero(); gd.len()];
                let n = T::lit(count as f64);
                for ch in 0..c {
                    let scale = gm.data()[ch] * inv_std[ch];
                    for b in 0..bsz {
                        let p = plane(b, ch);
                        for i in p..p + hw {
                            dx[i] = if train {
                                scale * (gd[i] - dbeta[ch] / n - xhat[i] * dgamma[ch] / n)
                            } else {
                                scale * gd[i]
                            };
                        }
                    }
                }
                Tensor::new(x_shape, dx).unwrap()
            });
            vec![
                dx,
                need[1].then(|| Tensor::new([c], dgamma).unwrap()),
                need[2].then(|| Tensor::new([c], dbeta).unwrap()),
            ]
        });
        Ok((var, stats))
    }
}
