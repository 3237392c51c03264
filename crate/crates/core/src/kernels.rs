//! Plain numeric kernels shared by the differentiable ops and the
//! non-differentiable image pipeline (pyramid, filter bank, data generation).
//!
//! Coordinate convention used everywhere in the crate: pixel `(r, c)` covers
//! the continuous square `[c, c+1) x [r, r+1)` and its center sits at
//! `(c + 0.5, r + 0.5)`.

use crate::real::{lane_sum, Real};
use crate::tensor::{Tensor, TensorError, TensorResult};

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
}

pub(crate) fn conv_dims<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> TensorResult<ConvDims> {
    let (batch, c_in, h, w) = input.image_dims("conv2d")?;
    let [c_out, k_in, kh, kw] = *kernel.shape() else {
        return Err(TensorError::Shape {
            op: "conv2d",
            expected: "kernel [C_out,C_in,k,k]".into(),
            got: kernel.shape().to_vec(),
        });
    };
    if k_in != c_in {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!(
                "kernel expects {k_in} input channels but input {:?} has {c_in}",
                input.shape()
            ),
        });
    }
    if kh != kw || kh % 2 == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            msg: format!("kernel must be square with odd size, got {kh}x{kw}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [c_out] {
            return Err(TensorError::Mismatch {
                op: "conv2d bias",
                lhs: vec![c_out],
                rhs: b.shape().to_vec(),
            });
        }
    }
    Ok(ConvDims {
        batch,
        c_in,
        c_out,
        h,
        w,
        k: kh,
    })
}

/// Width of the partial sums in the kernel-gradient dot products; padded
/// rows are rounded up to a multiple of it.
const LANES: usize = 64;

/// Copies `[c, h, w]` planes into a zero border of `k / 2` pixels, with the
/// width rounded up so every `LANES`-wide read stays in bounds.
fn pad_planes<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize) -> (Vec<T>, usize, usize) {
    let p = k / 2;
    let pw = w.div_ceil(LANES) * LANES + k - 1;
    let ph = h + k - 1;
    let mut out = vec![T::zero(); c * ph * pw];
    for ci in 0..c {
        for y in 0..h {
            let d = (ci * ph + y + p) * pw + p;
            out[d..d + w].copy_from_slice(&src[(ci * h + y) * w..][..w]);
        }
    }
    (out, ph, pw)
}

/// Direct cross-correlation of zero-padded planes, accumulated into `dst`.
/// `wt` is tap-major: `wt[tap * c_out + co]` with
/// `tap = (ci * k + ky) * k + kx`. Each output element sums its taps in
/// `tap` order starting from zero, then adds the sum to `dst`. A block of
/// `LANES` outputs stays in registers across all taps.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn direct_conv_body<T: Real>(
    padded: &[T],
    c_in: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    k: usize,
    wt: &[T],
    c_out: usize,
    dst: &mut [T],
) {
    let hw = h * w;
    for y in 0..h {
        for co in 0..c_out {
            let out = &mut dst[co * hw + y * w..][..w];
            for x0 in (0..w).step_by(LANES) {
                let mut acc = [T::zero(); LANES];
                for ci in 0..c_in {
                    for ky in 0..k {
                        let row = &padded[(ci * ph + y + ky) * pw + x0..];
                        for kx in 0..k {
                            let wv = wt[((ci * k + ky) * k + kx) * c_out + co];
                            let v = &row[kx..kx + LANES];
                            for l in 0..LANES {
                                acc[l] = wv.mul_add(v[l], acc[l]);
                            }
                        }
                    }
                }
                let n = LANES.min(w - x0);
                for (o, a) in out[x0..x0 + n].iter_mut().zip(acc) {
                    *o += a;
                }
            }
        }
    }
}

/// Partial sums per tap in the kernel-gradient dot products.
const GRAD_LANES: usize = 16;

/// Accumulates the kernel gradient of one image. `padded` is the zero-padded
/// input and `go` the output gradient with rows zero-padded to `wr`
/// (a multiple of `LANES`) columns. Each tap's dot product runs over
/// `GRAD_LANES` partial sums folded in a fixed order; common kernel sizes
/// get a register-resident specialization with the same arithmetic.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn kernel_grad_body<T: Real>(
    padded: &[T],
    c_in: usize,
    ph: usize,
    pw: usize,
    h: usize,
    wr: usize,
    k: usize,
    go: &[T],
    c_out: usize,
    gk: &mut [T],
) {
    let taps = c_in * k * k;
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                let rows = |y: usize| {
                    let g = &go[(co * h + y) * wr..][..wr];
                    let v = &padded[(ci * ph + y + ky) * pw..][..wr + k - 1];
                    (g, v)
                };
                let sums = &mut gk[co * taps + (ci * k + ky) * k..][..k];
                match k {
                    1 => row_taps::<T, 1>(h, rows, sums),
                    3 => row_taps::<T, 3>(h, rows, sums),
                    5 => row_taps::<T, 5>(h, rows, sums),
                    7 => row_taps::<T, 7>(h, rows, sums),
                    _ => row_taps_dyn(h, k, rows, sums),
                }
            }
        }
    }
}

#[inline(always)]
fn row_taps<'a, T: Real, const K: usize>(
    h: usize,
    rows: impl Fn(usize) -> (&'a [T], &'a [T]),
    sums: &mut [T],
) {
    let mut acc = [[T::zero(); GRAD_LANES]; K];
    for y in 0..h {
        let (g, v) = rows(y);
        for (x0, gc) in g.chunks_exact(GRAD_LANES).enumerate() {
            let x0 = x0 * GRAD_LANES;
            for (kx, a) in acc.iter_mut().enumerate() {
                let vc = &v[x0 + kx..x0 + kx + GRAD_LANES];
                for l in 0..GRAD_LANES {
                    a[l] = gc[l].mul_add(vc[l], a[l]);
                }
            }
        }
    }
    for (s, a) in sums.iter_mut().zip(acc) {
        *s += a.into_iter().fold(T::zero(), |s, a| s + a);
    }
}

#[inline(always)]
fn row_taps_dyn<'a, T: Real>(
    h: usize,
    k: usize,
    rows: impl Fn(usize) -> (&'a [T], &'a [T]),
    sums: &mut [T],
) {
    let mut acc = vec![[T::zero(); GRAD_LANES]; k];
    for y in 0..h {
        let (g, v) = rows(y);
        for (x0, gc) in g.chunks_exact(GRAD_LANES).enumerate() {
            let x0 = x0 * GRAD_LANES;
            for (kx, a) in acc.iter_mut().enumerate() {
                let vc = &v[x0 + kx..x0 + kx + GRAD_LANES];
                for l in 0..GRAD_LANES {
                    a[l] = gc[l].mul_add(vc[l], a[l]);
                }
            }
        }
    }
    for (s, a) in sums.iter_mut().zip(acc) {
        *s += a.into_iter().fold(T::zero(), |s, a| s + a);
    }
}

/// Declares `$name`, which runs the `#[inline(always)]` function `$body`
/// compiled for the widest available vector unit. The loops only vectorize
/// across independent outputs or fixed partial-sum lanes and use fused
/// multiply-add, which is exactly rounded, so every path produces
/// bit-identical results.
macro_rules! simd_dispatch {
    ($name:ident => $body:ident($($arg:ident: $ty:ty),* $(,)?)) => {
        #[allow(clippy::too_many_arguments)]
        fn $name<T: Real>($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,fma")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn wide<T: Real>($($arg: $ty),*) {
                    $body::<T>($($arg),*)
                }
                #[target_feature(enable = "avx2,fma")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn narrow<T: Real>($($arg: $ty),*) {
                    $body::<T>($($arg),*)
                }
                let fma = std::arch::is_x86_feature_detected!("fma");
                if fma && std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { wide::<T>($($arg),*) };
                }
                if fma && std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { narrow::<T>($($arg),*) };
                }
            }
            $body::<T>($($arg),*)
        }
    };
}

simd_dispatch!(direct_conv_padded => direct_conv_body(
    padded: &[T],
    c_in: usize,
    ph: usize,
    pw: usize,
    h: usize,
    w: usize,
    k: usize,
    wt: &[T],
    c_out: usize,
    dst: &mut [T],
));

simd_dispatch!(kernel_grad_padded => kernel_grad_body(
    padded: &[T],
    c_in: usize,
    ph: usize,
    pw: usize,
    h: usize,
    wr: usize,
    k: usize,
    go: &[T],
    c_out: usize,
    gk: &mut [T],
));

/// Direct "same" cross-correlation of one `[c_in, h, w]` image, accumulated
/// into `dst` (`[c_out, h, w]`). `wt` is tap-major, see [`direct_conv_body`].
#[allow(clippy::too_many_arguments)]
fn direct_conv<T: Real>(
    src: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    k: usize,
    wt: &[T],
    c_out: usize,
    dst: &mut [T],
) {
    let (padded, ph, pw) = pad_planes(src, c_in, h, w, k);
    direct_conv_padded(&padded, c_in, ph, pw, h, w, k, wt, c_out, dst);
}

/// `[c_out, c_in, k, k]` kernel rearranged tap-major for [`direct_conv`].
fn taps_major<T: Real>(kernel: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    let taps = c_in * k * k;
    let mut out = vec![T::zero(); taps * c_out];
    for co in 0..c_out {
        for t in 0..taps {
            out[t * c_out + co] = kernel[co * taps + t];
        }
    }
    out
}

/// Kernel of the adjoint convolution, tap-major: input and output channels
/// swapped and taps mirrored.
fn adjoint_taps<T: Real>(kernel: &[T], c_out: usize, c_in: usize, k: usize) -> Vec<T> {
    // adjoint: in channels = c_out, out channels = c_in
    let mut out = vec![T::zero(); c_out * k * k * c_in];
    for co in 0..c_out {
        for ci in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let src = ((co * c_in + ci) * k + ky) * k + kx;
                    let tap = (co * k + (k - 1 - ky)) * k + (k - 1 - kx);
                    out[tap * c_in + ci] = kernel[src];
                }
            }
        }
    }
    out
}

/// Cross-correlation with zero "same" padding. Accepts `[C,H,W]` or
/// `[B,C,H,W]` input; the output keeps the input's rank.
pub fn conv2d<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
) -> TensorResult<Tensor<T>> {
    let d = conv_dims(input, kernel, bias)?;
    let hw = d.h * d.w;
    let wt = taps_major(kernel.data(), d.c_out, d.c_in, d.k);
    let mut out = vec![T::zero(); d.batch * d.c_out * hw];
    for b in 0..d.batch {
        let src = &input.data()[b * d.c_in * hw..(b + 1) * d.c_in * hw];
        let dst = &mut out[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        direct_conv(src, d.c_in, d.h, d.w, d.k, &wt, d.c_out, dst);
        if let Some(bias) = bias {
            for (co, &bv) in bias.data().iter().enumerate() {
                for v in &mut dst[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    let shape = if input.rank() == 3 {
        vec![d.c_out, d.h, d.w]
    } else {
        vec![d.batch, d.c_out, d.h, d.w]
    };
    Tensor::new(shape, out)
}

pub(crate) struct ConvGrads<T: Real> {
    pub input: Option<Tensor<T>>,
    pub kernel: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    need: [bool; 3],
) -> ConvGrads<T> {
    let d = conv_dims(input, kernel, None).expect("conv2d_backward on validated shapes");
    let hw = d.h * d.w;
    let mut g_in = need[0].then(|| vec![T::zero(); input.numel()]);
    let mut g_k = need[1].then(|| vec![T::zero(); kernel.numel()]);
    let mut g_b = need[2].then(|| vec![T::zero(); d.c_out]);
    let adjoint = need[0].then(|| adjoint_taps(kernel.data(), d.c_out, d.c_in, d.k));
    for b in 0..d.batch {
        let go = &grad_out.data()[b * d.c_out * hw..(b + 1) * d.c_out * hw];
        if let Some(gb) = g_b.as_mut() {
            for (co, acc) in gb.iter_mut().enumerate() {
                *acc += lane_sum(&go[co * hw..(co + 1) * hw]);
            }
        }
        if let Some(gk) = g_k.as_mut() {
            let src = &input.data()[b * d.c_in * hw..(b + 1) * d.c_in * hw];
            let (padded, ph, pw) = pad_planes(src, d.c_in, d.h, d.w, d.k);
            let wr = d.w.div_ceil(LANES) * LANES;
            let mut go_rows = vec![T::zero(); d.c_out * d.h * wr];
            for (dst, src) in go_rows.chunks_mut(wr).zip(go.chunks(d.w)) {
                dst[..d.w].copy_from_slice(src);
            }
            kernel_grad_padded(&padded, d.c_in, ph, pw, d.h, wr, d.k, &go_rows, d.c_out, gk);
        }
        if let Some(gi) = g_in.as_mut() {
            direct_conv(
                go,
                d.c_out,
                d.h,
                d.w,
                d.k,
                adjoint.as_ref().expect("built when needed"),
                d.c_in,
                &mut gi[b * d.c_in * hw..(b + 1) * d.c_in * hw],
            );
        }
    }
    ConvGrads {
        input: g_in.map(|v| Tensor::new(input.shape().to_vec(), v).unwrap()),
        kernel: g_k.map(|v| Tensor::new(kernel.shape().to_vec(), v).unwrap()),
        bias: g_b.map(|v| Tensor::new([d.c_out], v).unwrap()),
    }
}

// ---------------------------------------------------------------------------
// Sparse linear resampling
// ---------------------------------------------------------------------------

/// A fixed sparse linear map from one `H*W` plane to another. Every output
/// sample is a weighted sum of a handful of input samples, which covers
/// bilinear resizing, homography warping and index gathers with one adjoint.
#[derive(Clone, Debug)]
pub struct SparseMap<T> {
    in_len: usize,
    offsets: Vec<usize>,
    index: Vec<u32>,
    weight: Vec<T>,
}

impl<T: Real> SparseMap<T> {
    pub fn builder(in_len: usize) -> SparseMapBuilder<T> {
        SparseMapBuilder {
            map: SparseMap {
                in_len,
                offsets: vec![0],
                index: Vec::new(),
                weight: Vec::new(),
            },
        }
    }

    pub fn in_len(&self) -> usize {
        self.in_len
    }

    pub fn out_len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn taps(&self, out: usize) -> impl Iterator<Item = (usize, T)> + '_ {
        let r = self.offsets[out]..self.offsets[out + 1];
        self.index[r.clone()]
            .iter()
            .zip(&self.weight[r])
            .map(|(&i, &w)| (i as usize, w))
    }

    pub fn apply(&self, src: &[T], dst: &mut [T]) {
        debug_assert_eq!(src.len(), self.in_len);
        for (o, d) in dst.iter_mut().enumerate().take(self.out_len()) {
            let mut acc = T::zero();
            for (i, w) in self.taps(o) {
                acc += w * src[i];
            }
            *d = acc;
        }
    }

    /// `src_grad += M^T * dst_grad`
    pub fn apply_transpose_add(&self, dst_grad: &[T], src_grad: &mut [T]) {
        for (o, &g) in dst_grad.iter().enumerate().take(self.out_len()) {
            if g == T::zero() {
                continue;
            }
            for (i, w) in self.taps(o) {
                src_grad[i] += w * g;
            }
        }
    }

    /// Applies the map independently to every plane of a tensor whose trailing
    /// extent is `in_len`, producing planes of `out_len` elements.
    pub fn apply_planes(&self, src: &[T]) -> Vec<T> {
        let planes = src.len() / self.in_len.max(1);
        let mut out = vec![T::zero(); planes * self.out_len()];
        for p in 0..planes {
            self.apply(
                &src[p * self.in_len..(p + 1) * self.in_len],
                &mut out[p * self.out_len()..(p + 1) * self.out_len()],
            );
        }
        out
    }

    pub fn apply_planes_transpose(&self, dst_grad: &[T]) -> Vec<T> {
        let planes = dst_grad.len() / self.out_len().max(1);
        let mut out = vec![T::zero(); planes * self.in_len];
        for p in 0..planes {
            self.apply_transpose_add(
                &dst_grad[p * self.out_len()..(p + 1) * self.out_len()],
                &mut out[p * self.in_len..(p + 1) * self.in_len],
            );
        }
        out
    }
}

pub struct SparseMapBuilder<T> {
    map: SparseMap<T>,
}

impl<T: Real> SparseMapBuilder<T> {
    /// Appends one output sample made of the given `(input index, weight)` taps.
    pub fn push(&mut self, taps: impl IntoIterator<Item = (usize, T)>) {
        for (i, w) in taps {
            debug_assert!(i < self.map.in_len);
            self.map.index.push(i as u32);
            self.map.weight.push(w);
        }
        self.map.offsets.push(self.map.index.len());
    }

    pub fn finish(self) -> SparseMap<T> {
        self.map
    }
}

/// Two linear-interpolation taps for continuous coordinate `pos` along an axis
/// of `len` pixels (pixel-center convention, clamped to the border).
pub fn linear_taps(pos: f64, len: usize) -> [(usize, f64); 2] {
    let u = (pos - 0.5).clamp(0.0, (len - 1) as f64);
    let i0 = (u.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    let f = u - i0 as f64;
    [(i0, 1.0 - f), (i1, f)]
}

/// Four bilinear taps at continuous point `(x, y)` in a `h x w` plane.
pub fn bilinear_taps(x: f64, y: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let [(x0, wx0), (x1, wx1)] = linear_taps(x, w);
    let [(y0, wy0), (y1, wy1)] = linear_taps(y, h);
    [
        (y0 * w + x0, wy0 * wx0),
        (y0 * w + x1, wy0 * wx1),
        (y1 * w + x0, wy1 * wx0),
        (y1 * w + x1, wy1 * wx1),
    ]
}

pub fn sample_bilinear<T: Real>(plane: &[T], h: usize, w: usize, x: f64, y: f64) -> f64 {
    bilinear_taps(x, y, h, w)
        .iter()
        .map(|&(i, wt)| plane[i].as_f64() * wt)
        .sum()
}

/// Bilinear resize with half-pixel centers (align-corners = false).
pub fn resize_map<T: Real>(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> SparseMap<T> {
    let sy = in_h as f64 / out_h as f64;
    let sx = in_w as f64 / out_w as f64;
    let mut b = SparseMap::builder(in_h * in_w);
    for oy in 0..out_h {
        let y = (oy as f64 + 0.5) * sy;
        for ox in 0..out_w {
            let x = (ox as f64 + 0.5) * sx;
            b.push(
                bilinear_taps(x, y, in_h, in_w)
                    .into_iter()
                    .filter(|&(_, wt)| wt != 0.0)
                    .map(|(i, wt)| (i, T::lit(wt))),
            );
        }
    }
    b.finish()
}

/// Resizes every plane of a `[.., H, W]` tensor.
pub fn bilinear_resize<T: Real>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> TensorResult<Tensor<T>> {
    if input.rank() < 2 {
        return Err(TensorError::Shape {
            op: "bilinear_resize",
            expected: "[.., H, W]".into(),
            got: input.shape().to_vec(),
        });
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::Invalid {
            op: "bilinear_resize",
            msg: format!("target size {out_h}x{out_w} must be at least 1x1"),
        });
    }
    let (h, w) = input.hw();
    if (h, w) == (out_h, out_w) {
        return Ok(input.clone());
    }
    let map = resize_map::<T>(h, w, out_h, out_w);
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Tensor::new(shape, map.apply_planes(input.data()))
}

// ---------------------------------------------------------------------------
// Separable filtering with replicated borders
// ---------------------------------------------------------------------------

/// Separable cross-correlation of one plane: `row_taps` runs along x,
/// `col_taps` along y. Both tap lists have odd length and are centered.
/// Borders are handled by replicating the edge pixel.
pub fn separable_filter<T: Real>(
    plane: &[T],
    h: usize,
    w: usize,
    row_taps: &[T],
    col_taps: &[T],
) -> Vec<T> {
    let rx = (row_taps.len() / 2) as isize;
    let ry = (col_taps.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        let dst = &mut tmp[y * w..(y + 1) * w];
        for (x, d) in dst.iter_mut().enumerate() {
            let mut acc = T::zero();
            for (t, &k) in row_taps.iter().enumerate() {
                let sx = (x as isize + t as isize - rx).clamp(0, w as isize - 1) as usize;
                acc += k * src[sx];
            }
            *d = acc;
        }
    }
    let mut out = vec![T::zero(); h * w];
    for (t, &k) in col_taps.iter().enumerate() {
        if k == T::zero() {
            continue;
        }
        for y in 0..h {
            let sy = (y as isize + t as isize - ry).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            for (d, &s) in out[y * w..(y + 1) * w].iter_mut().zip(src) {
                *d += k * s;
            }
        }
    }
    out
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 sigma)`.
pub fn gaussian_taps<T: Real>(sigma: f64) -> Vec<T> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| T::lit(v / total)).collect()
}
