//! Index proposal coordinates and the multi-scale covariant loss.
//!
//! A response map is cut into a grid of `N x N` windows. The soft path
//! (`ip_*`) turns every window into an expected maximum location through a
//! spatial softmax and is differentiable. The hard path (`nms_*`, targets)
//! takes the per-window argmax and carries no gradient.
//!
//! For a pair `(a, b)` the map of `b` is warped into frame `a`, both are
//! partitioned by the same grid, and soft coordinates of `a` are regressed
//! onto hard coordinates of the warped `b`. The term with the roles swapped
//! is added.

use crate::autograd::Var;
use crate::geometry::{warp_planes, Homography, HomographyError};
use crate::model::{KeyNetConfig, ResponseMap};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

/// Fraction of valid pixels a window needs to take part in the loss.
pub const MIN_VALID_FRACTION: f64 = 0.75;

#[derive(Debug, thiserror::Error)]
pub enum MsipError {
    #[error("window {n} does not fit a {h}x{w} map")]
    Window { n: usize, h: usize, w: usize },
    #[error("softmax base must exceed 1, got {0}")]
    Base(f64),
    #[error("response maps differ in size: {a:?} vs {b:?}")]
    Size { a: (usize, usize), b: (usize, usize) },
    #[error("mask has {got} pixels, map has {want}")]
    Mask { got: usize, want: usize },
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("homography: {0}")]
    Homography(#[from] HomographyError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type MsipResult<T> = Result<T, MsipError>;

/// Window sizes, their weights and the softmax base.
#[derive(Clone, Debug, PartialEq)]
pub struct MsipConfig {
    pub windows: Vec<usize>,
    pub weights: Vec<f64>,
    pub base: f64,
}

impl MsipConfig {
    pub fn from_model(cfg: &KeyNetConfig) -> Self {
        Self {
            windows: cfg.msip_window_sizes.clone(),
            weights: cfg.msip_weights.clone(),
            base: cfg.softmax_base,
        }
    }

    pub fn validate(&self) -> MsipResult<()> {
        if self.windows.is_empty() || self.windows.len() != self.weights.len() {
            return Err(MsipError::Config(format!(
                "{} window sizes with {} weights",
                self.windows.len(),
                self.weights.len()
            )));
        }
        if self.windows.iter().any(|&n| n < 2) {
            return Err(MsipError::Config("window sizes must be at least 2".into()));
        }
        if self.weights.iter().any(|&l| !(l >= 0.0) || !l.is_finite()) {
            return Err(MsipError::Config("weights must be finite and non-negative".into()));
        }
        if !(self.base > 1.0) {
            return Err(MsipError::Base(self.base));
        }
        Ok(())
    }
}

/// One proposal per grid window, in row-major window order.
#[derive(Clone, Debug, PartialEq)]
pub struct GridCoords {
    pub window: usize,
    /// `(x, y)` in full-image pixel coordinates.
    pub coords: Vec<[f64; 2]>,
    /// Response attributed to each window.
    pub masses: Vec<f64>,
    /// Top-left corner `(x, y)` of each window.
    pub origins: Vec<[usize; 2]>,
}

fn check_window(n: usize, h: usize, w: usize) -> MsipResult<()> {
    if n < 2 || n > h || n > w {
        return Err(MsipError::Window { n, h, w });
    }
    Ok(())
}

fn origins(n: usize, h: usize, w: usize) -> Vec<[usize; 2]> {
    let (gy, gx) = (h / n, w / n);
    (0..gy * gx).map(|g| [(g % gx) * n, (g / gx) * n]).collect()
}

/// Differentiable proposals of an `[H, W]` var.
#[derive(Clone, Copy, Debug)]
pub struct IpVars<'t, T: Real> {
    /// `[G]`
    pub x: Var<'t, T>,
    /// `[G]`
    pub y: Var<'t, T>,
    /// Softmax-expected response of each window, `[G]`.
    pub mass: Var<'t, T>,
}

/// Records soft proposals for every full `n x n` window of `response`
/// (`[H, W]`): softmax weights `base^r` within the window, and the weighted
/// average of pixel centers.
pub fn ip_coords_var<'t, T: Real>(
    response: Var<'t, T>,
    n: usize,
    base: f64,
) -> MsipResult<IpVars<'t, T>> {
    let shape = response.shape();
    let &[h, w] = shape.as_slice() else {
        return Err(TensorError::Shape {
            op: "ip_coords",
            expected: "[H, W]".into(),
            got: shape,
        }
        .into());
    };
    check_window(n, h, w)?;
    if !(base > 1.0) {
        return Err(MsipError::Base(base));
    }
    let tape = response.tape();
    let windows = response.grid_windows(n)?;
    let m = windows.softmax_last(T::lit(base))?;
    let org = origins(n, h, w);
    let nn = n * n;
    let grid = |axis: usize| {
        Tensor::from_fn([org.len(), nn], |i| {
            let (g, j) = (i / nn, i % nn);
            let local = if axis == 0 { j % n } else { j / n };
            T::lit((org[g][axis] + local) as f64 + 0.5)
        })
    };
    let x = m.mul(tape.constant(grid(0)))?.sum_last();
    let y = m.mul(tape.constant(grid(1)))?.sum_last();
    let mass = m.mul(windows)?.sum_last();
    Ok(IpVars { x, y, mass })
}

fn plane<T: Real>(r: &ResponseMap<T>) -> (usize, usize, &[T]) {
    let (h, w) = r.hw();
    (h, w, r.scores.data())
}

/// Soft proposals of a response map.
pub fn ip_coords<T: Real>(response: &ResponseMap<T>, n: usize, base: f64) -> MsipResult<GridCoords> {
    let (h, w, _) = plane(response);
    let tape = crate::autograd::Tape::<T>::new();
    let r = tape.constant(response.scores.clone().reshape([h, w])?);
    let v = ip_coords_var(r, n, base)?;
    let (x, y, mass) = (v.x.value(), v.y.value(), v.mass.value());
    Ok(GridCoords {
        window: n,
        coords: x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| [a.as_f64(), b.as_f64()])
            .collect(),
        masses: mass.data().iter().map(|m| m.as_f64()).collect(),
        origins: origins(n, h, w),
    })
}

/// Per-window argmax over pixels where `valid` holds (all pixels if `None`);
/// ties go to the smallest row-major index. Windows without a valid pixel
/// yield `None`.
fn window_argmax<T: Real>(
    data: &[T],
    w: usize,
    n: usize,
    origin: [usize; 2],
    valid: Option<&[bool]>,
) -> Option<(usize, usize)> {
    let mut best: Option<(usize, usize, T)> = None;
    for r in origin[1]..origin[1] + n {
        for c in origin[0]..origin[0] + n {
            let i = r * w + c;
            if valid.is_some_and(|v| !v[i]) {
                continue;
            }
            if best.is_none_or(|(_, _, b)| data[i] > b) {
                best = Some((r, c, data[i]));
            }
        }
    }
    best.map(|(r, c, _)| (r, c))
}

/// Hard per-window maxima at pixel centers.
pub fn nms_coords<T: Real>(response: &ResponseMap<T>, n: usize) -> MsipResult<GridCoords> {
    let (h, w, data) = plane(response);
    check_window(n, h, w)?;
    let org = origins(n, h, w);
    let mut coords = Vec::with_capacity(org.len());
    let mut masses = Vec::with_capacity(org.len());
    for &o in &org {
        let (r, c) = window_argmax(data, w, n, o, None).expect("window has pixels");
        coords.push([c as f64 + 0.5, r as f64 + 0.5]);
        masses.push(data[r * w + c].as_f64());
    }
    Ok(GridCoords {
        window: n,
        coords,
        masses,
        origins: org,
    })
}

/// Resamples `response_b` into frame `a`: the result at pixel `p` is
/// `R_b(H_ab p)` with `H_ab = H_ba^-1`. The mask marks pixels whose source
/// lies inside image `b`.
pub fn warp_response<T: Real>(
    response_b: &ResponseMap<T>,
    h_ba: &Homography,
    out_hw: (usize, usize),
) -> MsipResult<(ResponseMap<T>, Vec<bool>)> {
    let h_ab = h_ba.inverse()?;
    let (t, valid) = warp_planes(&response_b.scores, &h_ab, out_hw.0, out_hw.1)?;
    Ok((ResponseMap::new(t)?, valid))
}

/// Regression targets of one direction at one window size.
#[derive(Clone, Debug, PartialEq)]
pub struct IpTargets {
    pub window: usize,
    /// Indices of the participating windows.
    pub valid: Vec<usize>,
    /// Target coordinates, one per valid window.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Target-side response at the target location.
    pub response: Vec<f64>,
}

impl IpTargets {
    pub fn is_degenerate(&self) -> bool {
        self.valid.is_empty()
    }
}

/// Hard targets from a map already warped into the source frame. `valid`
/// marks usable pixels; windows below [`MIN_VALID_FRACTION`] are skipped and
/// the argmax only considers valid pixels.
pub fn ip_targets<T: Real>(warped: &ResponseMap<T>, valid: &[bool], n: usize) -> MsipResult<IpTargets> {
    let (h, w, data) = plane(warped);
    check_window(n, h, w)?;
    if valid.len() != h * w {
        return Err(MsipError::Mask {
            got: valid.len(),
            want: h * w,
        });
    }
    let need = (MIN_VALID_FRACTION * (n * n) as f64).ceil() as usize;
    let mut t = IpTargets {
        window: n,
        valid: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        response: Vec::new(),
    };
    for (g, &o) in origins(n, h, w).iter().enumerate() {
        let count = (o[1]..o[1] + n)
            .map(|r| valid[r * w + o[0]..r * w + o[0] + n].iter().filter(|&&v| v).count())
            .sum::<usize>();
        if count < need {
            continue;
        }
        let (r, c) = window_argmax(data, w, n, o, Some(valid)).expect("window has valid pixels");
        t.valid.push(g);
        t.x.push(c as f64 + 0.5);
        t.y.push(r as f64 + 0.5);
        t.response.push(data[r * w + c].as_f64());
    }
    Ok(t)
}

/// One direction of the covariant loss against fixed targets:
/// `sum_i alpha_i * |p_i - t_i|^2` over the valid windows, where
/// `alpha_i = softplus(mass_i) + softplus(target response_i)` normalized to
/// sum to one. `None` when no window is valid.
pub fn ip_loss_from_targets<'t, T: Real>(
    source: Var<'t, T>,
    targets: &IpTargets,
    base: f64,
) -> MsipResult<Option<Var<'t, T>>> {
    if targets.is_degenerate() {
        return Ok(None);
    }
    let tape = source.tape();
    let p = ip_coords_var(source, targets.window, base)?;
    let k = targets.valid.len();
    let constant = |v: &[f64]| tape.constant(Tensor::from_fn([k], |i| T::lit(v[i])));
    let dx = p.x.index_select(&targets.valid)?.sub(constant(&targets.x))?;
    let dy = p.y.index_select(&targets.valid)?.sub(constant(&targets.y))?;
    let d2 = dx.square().add(dy.square())?;
    let target_alpha: Vec<f64> = targets.response.iter().map(|&r| softplus(r)).collect();
    let alpha = p
        .mass
        .index_select(&targets.valid)?
        .softplus()
        .add(constant(&target_alpha))?;
    let norm = alpha.sum().broadcast([k])?;
    Ok(Some(alpha.div(norm)?.mul(d2)?.sum()))
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Homographies and common-area masks of a pair. `H_ab` maps frame `a` to
/// frame `b`.
#[derive(Clone, Copy, Debug)]
pub struct PairGeometry<'a> {
    pub h_ab: &'a Homography,
    pub h_ba: &'a Homography,
    pub mask_a: &'a [bool],
    pub mask_b: &'a [bool],
}

impl<'a> PairGeometry<'a> {
    /// The same pair seen from `b`.
    pub fn swapped(&self) -> Self {
        Self {
            h_ab: self.h_ba,
            h_ba: self.h_ab,
            mask_a: self.mask_b,
            mask_b: self.mask_a,
        }
    }
}

/// Targets for both directions at every configured window size.
#[derive(Clone, Debug, PartialEq)]
pub struct PairTargets {
    /// Soft side `a`, targets from `b` warped into frame `a`.
    pub ab: Vec<IpTargets>,
    /// Soft side `b`, targets from `a` warped into frame `b`.
    pub ba: Vec<IpTargets>,
}

fn direction_targets<T: Real>(
    target: &ResponseMap<T>,
    source_hw: (usize, usize),
    h_target_to_source: &Homography,
    source_mask: &[bool],
    windows: &[usize],
) -> MsipResult<Vec<IpTargets>> {
    let want = source_hw.0 * source_hw.1;
    if source_mask.len() != want {
        return Err(MsipError::Mask {
            got: source_mask.len(),
            want,
        });
    }
    let (warped, mut valid) = warp_response(target, h_target_to_source, source_hw)?;
    for (v, &m) in valid.iter_mut().zip(source_mask) {
        *v &= m;
    }
    windows.iter().map(|&n| ip_targets(&warped, &valid, n)).collect()
}

/// Computes the stop-gradient side of the loss from the current responses.
pub fn msip_targets<T: Real>(
    r_a: &ResponseMap<T>,
    r_b: &ResponseMap<T>,
    geom: &PairGeometry<'_>,
    cfg: &MsipConfig,
) -> MsipResult<PairTargets> {
    cfg.validate()?;
    let (ha, hb) = (r_a.hw(), r_b.hw());
    if ha != hb {
        return Err(MsipError::Size { a: ha, b: hb });
    }
    Ok(PairTargets {
        ab: direction_targets(r_b, ha, geom.h_ba, geom.mask_a, &cfg.windows)?,
        ba: direction_targets(r_a, hb, geom.h_ab, geom.mask_b, &cfg.windows)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelLoss {
    pub window: usize,
    pub weight: f64,
    pub loss: f64,
    /// No valid window in at least one direction.
    pub degenerate: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MsipLossValue {
    pub total: f64,
    pub per_level: Vec<LevelLoss>,
}

impl MsipLossValue {
    pub fn degenerate(&self) -> bool {
        self.per_level.iter().any(|l| l.degenerate)
    }
}

/// Symmetric loss of one window size: the `a` term plus the `b` term. A
/// direction without valid windows contributes zero.
fn level_loss<'t, T: Real>(
    r_a: Var<'t, T>,
    r_b: Var<'t, T>,
    ab: &IpTargets,
    ba: &IpTargets,
    base: f64,
) -> MsipResult<(Var<'t, T>, bool)> {
    let la = ip_loss_from_targets(r_a, ab, base)?;
    let lb = ip_loss_from_targets(r_b, ba, base)?;
    let degenerate = la.is_none() || lb.is_none();
    let v = match (la, lb) {
        (Some(a), Some(b)) => a.add(b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => r_a.tape().constant(Tensor::scalar(T::zero())),
    };
    Ok((v, degenerate))
}

/// `sum_s lambda_s * L_IP(N_s)` against precomputed targets. `r_a`, `r_b` are
/// `[H, W]` vars.
pub fn msip_loss_from_targets<'t, T: Real>(
    r_a: Var<'t, T>,
    r_b: Var<'t, T>,
    targets: &PairTargets,
    cfg: &MsipConfig,
) -> MsipResult<(Var<'t, T>, MsipLossValue)> {
    cfg.validate()?;
    if targets.ab.len() != cfg.windows.len() || targets.ba.len() != cfg.windows.len() {
        return Err(MsipError::Config("targets do not match the window list".into()));
    }
    let mut total: Option<Var<'t, T>> = None;
    let mut per_level = Vec::with_capacity(cfg.windows.len());
    for (s, (&n, &lambda)) in cfg.windows.iter().zip(&cfg.weights).enumerate() {
        let (l, degenerate) = level_loss(r_a, r_b, &targets.ab[s], &targets.ba[s], cfg.base)?;
        per_level.push(LevelLoss {
            window: n,
            weight: lambda,
            loss: l.item().as_f64(),
            degenerate,
        });
        let term = l.scale(T::lit(lambda));
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.expect("at least one level");
    let value = MsipLossValue {
        total: per_level.iter().map(|l| l.weight * l.loss).sum(),
        per_level,
    };
    Ok((total, value))
}

fn map_of<T: Real>(v: Var<'_, T>) -> MsipResult<ResponseMap<T>> {
    let t = v.value();
    let shape = t.shape().to_vec();
    let &[h, w] = shape.as_slice() else {
        return Err(TensorError::Shape {
            op: "msip_loss",
            expected: "[H, W]".into(),
            got: shape,
        }
        .into());
    };
    Ok(ResponseMap::new((*t).clone().reshape([1, h, w])?)?)
}

/// Covariant loss of one window size, both directions.
pub fn ip_loss<'t, T: Real>(
    r_a: Var<'t, T>,
    r_b: Var<'t, T>,
    geom: &PairGeometry<'_>,
    n: usize,
    base: f64,
) -> MsipResult<(Var<'t, T>, bool)> {
    let cfg = MsipConfig {
        windows: vec![n],
        weights: vec![1.0],
        base,
    };
    let targets = msip_targets(&map_of(r_a)?, &map_of(r_b)?, geom, &cfg)?;
    level_loss(r_a, r_b, &targets.ab[0], &targets.ba[0], base)
}

/// Multi-scale covariant loss of a pair of `[H, W]` response vars.
pub fn msip_loss<'t, T: Real>(
    r_a: Var<'t, T>,
    r_b: Var<'t, T>,
    geom: &PairGeometry<'_>,
    cfg: &MsipConfig,
) -> MsipResult<(Var<'t, T>, MsipLossValue)> {
    let targets = msip_targets(&map_of(r_a)?, &map_of(r_b)?, geom, cfg)?;
    msip_loss_from_targets(r_a, r_b, &targets, cfg)
}

#[cfg(test)]
mod tests;
