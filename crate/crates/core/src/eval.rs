//! Keypoint extraction and the repeatability benchmark.
//!
//! A keypoint is a circle: center in pixel-center coordinates and a radius
//! (`scale`). Two keypoints correspond when the overlap error of their
//! circles, after projecting one into the other's frame and rescaling the
//! larger radius to [`NORMALIZED_RADIUS`], is below a threshold.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datagen::PairSample;
use crate::filters::gaussian_blur;
use crate::geometry::{inside, Homography};
use crate::kernels::bilinear_resize;
use crate::model::{KeyNet, ResponseMap};
use crate::real::Real;
use crate::tensor::{Tensor, TensorResult};

/// Radius given to single-scale detections.
pub const BASE_RADIUS: f64 = 15.0;
/// The larger circle of a compared pair is rescaled to this radius.
pub const NORMALIZED_RADIUS: f64 = 30.0;
pub const DEFAULT_NMS: usize = 15;
pub const DEFAULT_EPS: f64 = 0.4;
pub const DEFAULT_SCALE_FACTOR: f64 = 1.26;
pub const DEFAULT_SCALE_LEVELS: usize = 10;
pub const KEYPOINT_HEADER: &str = "x y scale score";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub scale: f64,
    pub score: f64,
}

impl Keypoint {
    /// Index of the pixel containing the center.
    pub fn pixel(&self, h: usize, w: usize) -> Option<usize> {
        if !inside(self.x, self.y, h, w) {
            return None;
        }
        let c = (self.x.floor() as usize).min(w - 1);
        let r = (self.y.floor() as usize).min(h - 1);
        Some(r * w + c)
    }
}

/// Pixels that are the strict maximum of their `size x size` neighborhood
/// (clipped at the border), as row-major indices.
pub fn nms_survivors(data: &[f64], h: usize, w: usize, size: usize) -> Vec<usize> {
    assert!(size % 2 == 1, "nms size must be odd");
    assert_eq!(data.len(), h * w);
    let r = size / 2;
    // Separable running maximum, then an exact strictness check on the few
    // pixels that reach it.
    let mut rows = vec![f64::NEG_INFINITY; h * w];
    for y in 0..h {
        for x in 0..w {
            let (lo, hi) = (x.saturating_sub(r), (x + r).min(w - 1));
            rows[y * w + x] = data[y * w + lo..=y * w + hi]
                .iter()
                .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        }
    }
    let mut out = Vec::new();
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for x in 0..w {
            let v = data[y * w + x];
            if v.is_nan() {
                continue;
            }
            let m = (y0..=y1).fold(f64::NEG_INFINITY, |m, yy| m.max(rows[yy * w + x]));
            if v < m {
                continue;
            }
            let (x0, x1) = (x.saturating_sub(r), (x + r).min(w - 1));
            let tied = (y0..=y1).any(|yy| {
                (x0..=x1).any(|xx| (yy, xx) != (y, x) && data[yy * w + xx] == v)
            });
            if !tied {
                out.push(y * w + x);
            }
        }
    }
    out
}

/// Sorts by descending score, ties by ascending index.
fn rank(indices: &mut [usize], data: &[f64]) {
    indices.sort_by(|&a, &b| data[b].total_cmp(&data[a]).then(a.cmp(&b)));
}

/// Result of a detection, with a note when fewer than `top_k` maxima exist.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub keypoints: Vec<Keypoint>,
    pub requested: usize,
}

impl Detection {
    pub fn short(&self) -> bool {
        self.keypoints.len() < self.requested
    }
}

/// Strict NMS survivors of a response map, optionally restricted to a
/// mask, sorted by descending score (ties by row-major position).
pub fn ranked_maxima<T: Real>(
    response: &ResponseMap<T>,
    mask: Option<&[bool]>,
    nms_size: usize,
    radius: f64,
) -> Vec<Keypoint> {
    let (h, w) = response.hw();
    let data: Vec<f64> = response.scores.data().iter().map(|v| v.as_f64()).collect();
    let mut idx = nms_survivors(&data, h, w, nms_size);
    if let Some(m) = mask {
        idx.retain(|&i| m[i]);
    }
    rank(&mut idx, &data);
    idx.iter()
        .map(|&i| Keypoint {
            x: (i % w) as f64 + 0.5,
            y: (i / w) as f64 + 0.5,
            scale: radius,
            score: data[i],
        })
        .collect()
}

fn finish(mut keypoints: Vec<Keypoint>, top_k: usize) -> Detection {
    keypoints.truncate(top_k);
    let d = Detection {
        keypoints,
        requested: top_k,
    };
    if d.short() {
        log::debug!(
            "only {} local maxima for the requested {top_k} keypoints",
            d.keypoints.len()
        );
    }
    d
}

/// Inference-time extraction from a response map: strict NMS, optional
/// restriction to a mask, then the `top_k` highest scores.
pub fn detect_map<T: Real>(
    response: &ResponseMap<T>,
    mask: Option<&[bool]>,
    top_k: usize,
    nms_size: usize,
    radius: f64,
) -> Detection {
    finish(ranked_maxima(response, mask, nms_size, radius), top_k)
}

/// Detection settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectConfig {
    pub top_k: usize,
    pub nms_size: usize,
    /// `(levels, factor)` for multi-scale detection.
    pub multiscale: Option<(usize, f64)>,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            top_k: 1000,
            nms_size: DEFAULT_NMS,
            multiscale: None,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        if self.nms_size.is_multiple_of(2) {
            return Err(format!("nms size must be odd, got {}", self.nms_size));
        }
        if let Some((levels, factor)) = self.multiscale {
            if levels == 0 || !(factor > 1.0) {
                return Err(format!("invalid scale levels {levels} / factor {factor}"));
            }
        }
        Ok(())
    }
}

fn check_image(image: &Tensor<f32>) -> TensorResult<(usize, usize)> {
    image.image_dims("detect")?;
    Ok(image.hw())
}

/// Single-scale detection on a `[1, H, W]` image.
pub fn detect(
    model: &KeyNet<f32>,
    image: &Tensor<f32>,
    mask: Option<&[bool]>,
    top_k: usize,
    nms_size: usize,
) -> TensorResult<Detection> {
    check_image(image)?;
    let r = model.forward(image)?;
    Ok(detect_map(&r, mask, top_k, nms_size, BASE_RADIUS))
}

/// Images of a scale pyramid: level `l` is about `factor^-l` times the
/// input, blurred before every reduction. Levels smaller than `min_side`
/// are dropped.
pub fn scale_pyramid(
    image: &Tensor<f32>,
    levels: usize,
    factor: f64,
    min_side: usize,
) -> TensorResult<Vec<Tensor<f32>>> {
    let (h, w) = image.hw();
    let flat = image.clone().reshape([1, h, w])?;
    let sigma = 0.8 * (factor * factor - 1.0).sqrt();
    let mut out = vec![flat];
    for l in 1..levels {
        let f = factor.powi(l as i32);
        let (lh, lw) = ((h as f64 / f).round() as usize, (w as f64 / f).round() as usize);
        if lh < min_side || lw < min_side {
            break;
        }
        let prev = out.last().expect("level 0");
        out.push(bilinear_resize(&gaussian_blur(prev, sigma)?, lh, lw)?);
    }
    Ok(out)
}

/// Merges candidates of several levels: highest score first, a candidate is
/// dropped when an accepted keypoint of the same or an adjacent level lies
/// within `nms_size / 2` pixels of that level, scaled by the larger scale.
fn merge_levels(mut cands: Vec<(Keypoint, usize)>, nms_size: usize, factor: f64, top_k: usize) -> Vec<Keypoint> {
    cands.sort_by(|a, b| b.0.score.total_cmp(&a.0.score).then(a.1.cmp(&b.1)));
    let half = (nms_size / 2) as f64;
    let mut kept: Vec<(Keypoint, usize)> = Vec::new();
    for (k, l) in cands {
        if kept.len() == top_k {
            break;
        }
        let clash = kept.iter().any(|(q, lq)| {
            if l.abs_diff(*lq) > 1 {
                return false;
            }
            let reach = half * factor.powi(l.max(*lq) as i32);
            (k.x - q.x).hypot(k.y - q.y) <= reach
        });
        if !clash {
            kept.push((k, l));
        }
    }
    kept.into_iter().map(|(k, _)| k).collect()
}

/// Detection on a scale pyramid. Level `l` keypoints get radius
/// `BASE_RADIUS * factor^l` and coordinates mapped back to the input frame.
pub fn detect_multiscale(
    model: &KeyNet<f32>,
    image: &Tensor<f32>,
    mask: Option<&[bool]>,
    top_k: usize,
    nms_size: usize,
    levels: usize,
    factor: f64,
) -> TensorResult<Detection> {
    let (h, w) = check_image(image)?;
    let pyramid = scale_pyramid(image, levels, factor, model.config.min_input_size())?;
    let mut cands = Vec::new();
    for (l, img) in pyramid.iter().enumerate() {
        let (lh, lw) = img.hw();
        let (sx, sy) = (w as f64 / lw as f64, h as f64 / lh as f64);
        let response = model.forward(img)?;
        for k in ranked_maxima(&response, None, nms_size, BASE_RADIUS) {
            let kp = Keypoint {
                x: k.x * sx,
                y: k.y * sy,
                scale: BASE_RADIUS * factor.powi(l as i32),
                score: k.score,
            };
            let keep = match mask {
                Some(m) => kp.pixel(h, w).is_some_and(|i| m[i]),
                None => true,
            };
            if keep {
                cands.push((kp, l));
            }
        }
    }
    Ok(finish(merge_levels(cands, nms_size, factor, top_k), top_k))
}

pub fn detect_with(
    model: &KeyNet<f32>,
    image: &Tensor<f32>,
    mask: Option<&[bool]>,
    cfg: &DetectConfig,
) -> TensorResult<Detection> {
    match cfg.multiscale {
        Some((levels, factor)) => {
            detect_multiscale(model, image, mask, cfg.top_k, cfg.nms_size, levels, factor)
        }
        None => detect(model, image, mask, cfg.top_k, cfg.nms_size),
    }
}

/// Area of intersection of two circles at center distance `d`.
fn circle_intersection(r1: f64, r2: f64, d: f64) -> f64 {
    use std::f64::consts::PI;
    if d >= r1 + r2 {
        return 0.0;
    }
    if d <= (r1 - r2).abs() {
        let r = r1.min(r2);
        return PI * r * r;
    }
    let a1 = ((d * d + r1 * r1 - r2 * r2) / (2.0 * d * r1)).clamp(-1.0, 1.0).acos();
    let a2 = ((d * d + r2 * r2 - r1 * r1) / (2.0 * d * r2)).clamp(-1.0, 1.0).acos();
    let k = ((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2)).max(0.0).sqrt();
    r1 * r1 * a1 + r2 * r2 * a2 - 0.5 * k
}

/// Overlap error of two circles in the same frame after rescaling the larger
/// radius to [`NORMALIZED_RADIUS`].
pub fn circle_overlap_error(x1: f64, y1: f64, r1: f64, x2: f64, y2: f64, r2: f64) -> f64 {
    let f = NORMALIZED_RADIUS / r1.max(r2);
    let (r1, r2) = (r1 * f, r2 * f);
    let d = (x1 - x2).hypot(y1 - y2) * f;
    if d <= (r1 - r2).abs() {
        // One circle contains the other; the ratio of areas is exact.
        let (lo, hi) = (r1.min(r2), r1.max(r2));
        return 1.0 - (lo / hi) * (lo / hi);
    }
    let inter = circle_intersection(r1, r2, d);
    let union = std::f64::consts::PI * (r1 * r1 + r2 * r2) - inter;
    (1.0 - inter / union).clamp(0.0, 1.0)
}

/// `kp` expressed in another frame: center mapped by `h`, scale multiplied
/// by the local scale of `h` at the center.
pub fn project(kp: &Keypoint, h: &Homography) -> Option<Keypoint> {
    let (x, y) = h.apply(kp.x, kp.y)?;
    Some(Keypoint {
        x,
        y,
        scale: kp.scale * h.local_scale(kp.x, kp.y),
        score: kp.score,
    })
}

/// Overlap error between `kp_a` and `kp_b` measured in frame `a`.
pub fn iou_error(kp_a: &Keypoint, kp_b: &Keypoint, h_ab: &Homography) -> f64 {
    let Ok(h_ba) = h_ab.inverse() else {
        return 1.0;
    };
    match project(kp_b, &h_ba) {
        Some(b) => circle_overlap_error(kp_a.x, kp_a.y, kp_a.scale, b.x, b.y, b.scale),
        None => 1.0,
    }
}

/// How scales enter the comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    /// Location only: the scale of `b` is replaced by the scale of `a`
    /// carried through the homography.
    L,
    /// Detected scales.
    SL,
}

impl std::str::FromStr for ScaleMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "L" | "l" => Ok(Self::L),
            "SL" | "sl" => Ok(Self::SL),
            _ => Err(format!("unknown mode {s:?} (expected L or SL)")),
        }
    }
}

impl std::fmt::Display for ScaleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::L => "L",
            Self::SL => "SL",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RepeatabilityReport {
    /// Percent, `100 * matches / min(|a|, |b|)`.
    pub repeatability: f64,
    pub mean_overlap_error: f64,
    pub num_correspondences: usize,
    /// Largest over smallest scale of both sets.
    pub scale_range: f64,
    /// `(index in a, index in b, error)` in acceptance order.
    pub matches: Vec<(usize, usize, f64)>,
}

/// All `(i, j, error)` with error below `eps_max`, in frame `a`.
pub fn candidate_pairs(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_ab: &Homography,
    h_ba: &Homography,
    eps_max: f64,
    mode: ScaleMode,
) -> Vec<(usize, usize, f64)> {
    let projected: Vec<Option<Keypoint>> = kps_b.iter().map(|k| project(k, h_ba)).collect();
    let mut out = Vec::new();
    for (i, a) in kps_a.iter().enumerate() {
        let carried = a.scale * h_ab.local_scale(a.x, a.y);
        for (j, b) in projected.iter().enumerate() {
            let Some(b) = b else { continue };
            let rb = match mode {
                ScaleMode::SL => b.scale,
                ScaleMode::L => carried * h_ba.local_scale(kps_b[j].x, kps_b[j].y),
            };
            // Circles farther apart than the sum of radii never overlap.
            if (a.x - b.x).hypot(a.y - b.y) >= a.scale + rb {
                continue;
            }
            let e = circle_overlap_error(a.x, a.y, a.scale, b.x, b.y, rb);
            if e < eps_max {
                out.push((i, j, e));
            }
        }
    }
    out
}

/// Greedy one-to-one matching in ascending error; ties by `(i, j)`.
pub fn greedy_match(mut cands: Vec<(usize, usize, f64)>, na: usize, nb: usize) -> Vec<(usize, usize, f64)> {
    cands.sort_by(|p, q| p.2.total_cmp(&q.2).then((p.0, p.1).cmp(&(q.0, q.1))));
    let mut used_a = vec![false; na];
    let mut used_b = vec![false; nb];
    let mut out = Vec::new();
    for (i, j, e) in cands {
        if !used_a[i] && !used_b[j] {
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, e));
        }
    }
    out
}

fn scale_range(kps: impl Iterator<Item = f64>) -> f64 {
    let (lo, hi) = kps.fold((f64::INFINITY, 0.0f64), |(lo, hi), s| (lo.min(s), hi.max(s)));
    if hi > 0.0 && lo.is_finite() {
        hi / lo
    } else {
        1.0
    }
}

/// Repeatability of two keypoint sets already restricted to the common
/// region.
pub fn repeatability(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h_ab: &Homography,
    h_ba: &Homography,
    eps_max: f64,
    mode: ScaleMode,
) -> RepeatabilityReport {
    let sr = scale_range(kps_a.iter().chain(kps_b).map(|k| k.scale));
    if kps_a.is_empty() || kps_b.is_empty() {
        log::warn!("empty keypoint set; repeatability is 0");
        return RepeatabilityReport {
            repeatability: 0.0,
            mean_overlap_error: 0.0,
            num_correspondences: 0,
            scale_range: sr,
            matches: Vec::new(),
        };
    }
    let cands = candidate_pairs(kps_a, kps_b, h_ab, h_ba, eps_max, mode);
    let matches = greedy_match(cands, kps_a.len(), kps_b.len());
    let n = matches.len();
    let mean = if n == 0 {
        0.0
    } else {
        matches.iter().map(|m| m.2).sum::<f64>() / n as f64
    };
    RepeatabilityReport {
        repeatability: 100.0 * n as f64 / kps_a.len().min(kps_b.len()) as f64,
        mean_overlap_error: mean,
        num_correspondences: n,
        scale_range: sr,
        matches,
    }
}

/// Keeps keypoints whose center pixel is set in `mask` (`h x w`).
pub fn filter_by_mask(kps: &[Keypoint], mask: &[bool], h: usize, w: usize) -> Vec<Keypoint> {
    kps.iter()
        .filter(|k| k.pixel(h, w).is_some_and(|i| mask[i]))
        .copied()
        .collect()
}

/// Uniformly random positions inside `mask`, all with radius
/// [`BASE_RADIUS`].
pub fn random_keypoints(rng: &mut impl Rng, n: usize, mask: &[bool], h: usize, w: usize) -> Vec<Keypoint> {
    let allowed: Vec<usize> = (0..h * w).filter(|&i| mask[i]).collect();
    if allowed.is_empty() {
        return Vec::new();
    }
    (0..n)
        .map(|_| {
            let i = allowed[rng.gen_range(0..allowed.len())];
            Keypoint {
                x: (i % w) as f64 + rng.gen::<f64>(),
                y: (i / w) as f64 + rng.gen::<f64>(),
                scale: BASE_RADIUS,
                score: rng.gen(),
            }
        })
        .collect()
}

pub fn format_keypoints(kps: &[Keypoint]) -> String {
    let mut s = String::from(KEYPOINT_HEADER);
    s.push('\n');
    for k in kps {
        writeln!(s, "{:.4} {:.4} {:.4} {:.4}", k.x, k.y, k.scale, k.score).expect("string write");
    }
    s
}

pub fn parse_keypoints(text: &str) -> Result<Vec<Keypoint>, String> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.split_whitespace().eq(KEYPOINT_HEADER.split_whitespace()) => {}
        _ => return Err(format!("missing header {KEYPOINT_HEADER:?}")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e| format!("line {}: {e}", i + 1))?;
        let &[x, y, scale, score] = v.as_slice() else {
            return Err(format!("line {}: expected 4 numbers, found {}", i + 1, v.len()));
        };
        if !(scale > 0.0) {
            return Err(format!("line {}: scale must be positive", i + 1));
        }
        out.push(Keypoint { x, y, scale, score });
    }
    Ok(out)
}

pub fn write_keypoints(path: &Path, kps: &[Keypoint]) -> std::io::Result<()> {
    fs::write(path, format_keypoints(kps))
}

pub fn read_keypoints(path: &Path) -> Result<Vec<Keypoint>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_keypoints(&text).map_err(|e| format!("{}: {e}", path.display()))
}

/// Anything that turns an image (and its common-region mask) into
/// keypoints. `key` identifies the image for detectors that need a seed.
pub trait Detector: Sync {
    fn keypoints(&self, image: &Tensor<f32>, mask: &[bool], key: u64) -> TensorResult<Vec<Keypoint>>;
}

/// The trained network.
pub struct NetDetector<'a> {
    pub model: &'a KeyNet<f32>,
    pub config: DetectConfig,
}

impl Detector for NetDetector<'_> {
    fn keypoints(&self, image: &Tensor<f32>, mask: &[bool], _key: u64) -> TensorResult<Vec<Keypoint>> {
        Ok(detect_with(self.model, image, Some(mask), &self.config)?.keypoints)
    }
}

/// `count` uniformly random keypoints per image.
pub struct RandomDetector {
    pub seed: u64,
    pub count: usize,
}

impl Detector for RandomDetector {
    fn keypoints(&self, image: &Tensor<f32>, mask: &[bool], key: u64) -> TensorResult<Vec<Keypoint>> {
        let (h, w) = image.hw();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(key);
        Ok(random_keypoints(&mut rng, self.count, mask, h, w))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub eps: f64,
    pub mode: ScaleMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            mode: ScaleMode::L,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub per_pair: Vec<RepeatabilityReport>,
    pub mean_repeatability: f64,
    pub mean_overlap_error: f64,
    pub scale_range: f64,
}

/// Runs `detector` on both views of every pair (restricted to the common
/// region) and averages the repeatability. Pairs are processed in parallel;
/// the result does not depend on the thread count.
pub fn evaluate_pairs(
    detector: &dyn Detector,
    pairs: &[PairSample],
    cfg: &EvalConfig,
) -> TensorResult<EvalSummary> {
    let per_pair = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let a = detector.keypoints(&p.image_a, &p.mask_a, 2 * i as u64)?;
            let b = detector.keypoints(&p.image_b, &p.mask_b, 2 * i as u64 + 1)?;
            Ok(repeatability(&a, &b, &p.h_ab, &p.h_ba, cfg.eps, cfg.mode))
        })
        .collect::<TensorResult<Vec<_>>>()?;
    let n = per_pair.len().max(1) as f64;
    let matched: Vec<&RepeatabilityReport> =
        per_pair.iter().filter(|r| r.num_correspondences > 0).collect();
    Ok(EvalSummary {
        mean_repeatability: per_pair.iter().map(|r| r.repeatability).sum::<f64>() / n,
        mean_overlap_error: if matched.is_empty() {
            0.0
        } else {
            matched.iter().map(|r| r.mean_overlap_error).sum::<f64>() / matched.len() as f64
        },
        scale_range: per_pair.iter().map(|r| r.scale_range).fold(1.0, f64::max),
        per_pair,
    })
}
