//! Synthetic training pairs.
//!
//! A crop `a` is cut from a source image and a second view `b` is rendered
//! through a random homography about the crop center, followed by a
//! brightness/contrast change. Masks mark the pixels of each view whose
//! correspondent lies inside the other view.
//!
//! Every pair draws from its own random stream (master seed, stream = pair
//! index), so parallel generation produces the same dataset as serial
//! generation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{format_list, parse_list, parse_pairs, parse_value, ConfigError, KeyValue};
use crate::filters::{gaussian_blur, texture_score, DEFAULT_TEXTURE_THRESHOLD};
use crate::geometry::{inside, warp_planes, Homography, HomographyError};
use crate::pgm::{self, PgmError};
use crate::tensor::Tensor;

/// Tolerance of the `H_ab * H_ba = I` check.
pub const ROUND_TRIP_TOL: f64 = 1e-6;

pub const META_FILE: &str = "meta.txt";

#[derive(Debug, thiserror::Error)]
pub enum DatagenError {
    #[error("source image is {h}x{w}; at least {need}x{need} is required")]
    TooSmall { h: usize, w: usize, need: usize },
    #[error("no source image is large enough ({count} checked, {need}x{need} required)")]
    NoUsableSource { count: usize, need: usize },
    #[error("pair {pair}: no crop passed the texture test in {attempts} attempts")]
    Exhausted { pair: usize, attempts: usize },
    #[error("{path}: {msg}")]
    Invalid { path: String, msg: String },
    #[error("{path}: {error}")]
    Io {
        path: String,
        error: std::io::Error,
    },
    #[error(transparent)]
    Pgm(#[from] PgmError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Homography(#[from] HomographyError),
}

pub type DatagenResult<T> = Result<T, DatagenError>;

fn invalid(path: &Path, msg: impl Into<String>) -> DatagenError {
    DatagenError::Invalid {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn io(path: &Path, error: std::io::Error) -> DatagenError {
    DatagenError::Io {
        path: path.display().to_string(),
        error,
    }
}

/// Sampling ranges of the random homography. Rotation is in degrees, skew
/// is the horizontal shear coefficient.
#[derive(Clone, Debug, PartialEq)]
pub struct WarpRanges {
    pub scale: [f64; 2],
    pub skew: [f64; 2],
    pub rotation_deg: [f64; 2],
    pub crop_size: usize,
}

impl Default for WarpRanges {
    fn default() -> Self {
        Self {
            scale: [0.5, 3.5],
            skew: [-0.8, 0.8],
            rotation_deg: [-60.0, 60.0],
            crop_size: 192,
        }
    }
}

impl WarpRanges {
    /// Ranges that always produce the identity.
    pub fn identity(crop_size: usize) -> Self {
        Self {
            scale: [1.0, 1.0],
            skew: [0.0, 0.0],
            rotation_deg: [0.0, 0.0],
            crop_size,
        }
    }

    pub fn center(&self) -> f64 {
        self.crop_size as f64 / 2.0
    }
}

/// Everything that controls generation besides the seed and the corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct DatagenConfig {
    pub ranges: WarpRanges,
    pub texture_threshold: f64,
    pub jitter: bool,
    /// Crops tried per pair before giving up.
    pub max_attempts: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            ranges: WarpRanges::default(),
            texture_threshold: DEFAULT_TEXTURE_THRESHOLD,
            jitter: true,
            max_attempts: 100,
        }
    }
}

fn parse_range(key: &str, value: &str) -> Result<[f64; 2], ConfigError> {
    match parse_list::<f64>(key, value)?.as_slice() {
        &[lo, hi] => Ok([lo, hi]),
        _ => Err(ConfigError::Value {
            key: key.into(),
            value: value.into(),
            msg: "expected `low,high`".into(),
        }),
    }
}

impl KeyValue for DatagenConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "scale" => self.ranges.scale = parse_range(key, value)?,
            "skew" => self.ranges.skew = parse_range(key, value)?,
            "rotation_deg" => self.ranges.rotation_deg = parse_range(key, value)?,
            "crop_size" => self.ranges.crop_size = parse_value(key, value)?,
            "texture_threshold" => self.texture_threshold = parse_value(key, value)?,
            "jitter" => self.jitter = parse_value(key, value)?,
            "max_attempts" => self.max_attempts = parse_value(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(String, String)> {
        let r = &self.ranges;
        [
            ("scale", format_list(&r.scale)),
            ("skew", format_list(&r.skew)),
            ("rotation_deg", format_list(&r.rotation_deg)),
            ("crop_size", r.crop_size.to_string()),
            ("texture_threshold", self.texture_threshold.to_string()),
            ("jitter", self.jitter.to_string()),
            ("max_attempts", self.max_attempts.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let r = &self.ranges;
        for (name, [lo, hi]) in [("scale", r.scale), ("skew", r.skew), ("rotation_deg", r.rotation_deg)] {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(ConfigError::Invalid(format!("{name} range [{lo}, {hi}] is empty")));
            }
        }
        if !(r.scale[0] > 0.0) {
            return Err(ConfigError::Invalid("scale must be positive".into()));
        }
        if r.crop_size < 8 {
            return Err(ConfigError::Invalid(format!("crop_size {} is too small", r.crop_size)));
        }
        if !(self.texture_threshold >= 0.0) {
            return Err(ConfigError::Invalid("texture_threshold must be non-negative".into()));
        }
        if self.max_attempts == 0 {
            return Err(ConfigError::Invalid("max_attempts must be at least 1".into()));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        // Keep the stream position independent of the range.
        let _: f64 = rng.gen();
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// `T(c) S R K T(-c)` with `c` the crop center: scale, rotation and shear
/// about the center, drawn uniformly from `ranges`.
pub fn sample_homography(rng: &mut impl Rng, ranges: &WarpRanges) -> Homography {
    let s = uniform(rng, ranges.scale);
    let k = uniform(rng, ranges.skew);
    let theta = uniform(rng, ranges.rotation_deg).to_radians();
    let c = ranges.center();
    Homography::translation(c, c)
        .compose(&Homography::scaling(s))
        .compose(&Homography::rotation(theta))
        .compose(&Homography::shear(k))
        .compose(&Homography::translation(-c, -c))
}

/// Brightness offset and contrast gain of one jitter draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jitter {
    pub brightness: f64,
    pub contrast: f64,
}

impl Jitter {
    pub const NONE: Self = Self {
        brightness: 0.0,
        contrast: 1.0,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            brightness: rng.gen_range(-0.2..0.2),
            contrast: rng.gen_range(0.7..1.3),
        }
    }

    /// `clamp(contrast * (v - 0.5) + 0.5 + brightness, 0, 1)`
    pub fn apply(&self, v: f64) -> f64 {
        (self.contrast * (v - 0.5) + 0.5 + self.brightness).clamp(0.0, 1.0)
    }
}

pub fn photometric_jitter(image: &Tensor<f32>, rng: &mut impl Rng) -> Tensor<f32> {
    let j = Jitter::sample(rng);
    image.map(|v| j.apply(v as f64) as f32)
}

/// Rounds to the nearest 8-bit level so that stored pairs equal generated
/// ones.
fn quantize(image: &Tensor<f32>) -> Tensor<f32> {
    image.map(|v| (pgm::to_u8(v as f64) as f64 / 255.0) as f32)
}

/// One training pair. `image_*` are `[1, S, S]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub image_a: Tensor<f32>,
    pub image_b: Tensor<f32>,
    pub h_ab: Homography,
    pub h_ba: Homography,
    pub mask_a: Vec<bool>,
    pub mask_b: Vec<bool>,
}

/// `mask(p)` is true when `h` maps the center of pixel `p` into the other
/// `size x size` view.
pub fn transport_mask(h: &Homography, size: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            out.push(
                h.apply(c as f64 + 0.5, r as f64 + 0.5)
                    .is_some_and(|(x, y)| inside(x, y, size, size)),
            );
        }
    }
    out
}

impl PairSample {
    pub fn size(&self) -> usize {
        self.image_a.hw().0
    }

    pub fn geometry(&self) -> crate::msip::PairGeometry<'_> {
        crate::msip::PairGeometry {
            h_ab: &self.h_ab,
            h_ba: &self.h_ba,
            mask_a: &self.mask_a,
            mask_b: &self.mask_b,
        }
    }

    /// Checks the stored invariants; returns a description of the first
    /// violation.
    pub fn check(&self, texture_threshold: f64) -> Result<(), String> {
        let (h, w) = self.image_a.hw();
        if h != w || self.image_b.hw() != (h, w) {
            return Err(format!(
                "views must be equal squares, got {:?} and {:?}",
                self.image_a.shape(),
                self.image_b.shape()
            ));
        }
        let rt = self.h_ab.compose(&self.h_ba).max_abs_diff(&Homography::IDENTITY);
        if !(rt <= ROUND_TRIP_TOL) {
            return Err(format!("H_ab * H_ba differs from identity by {rt:e}"));
        }
        for (name, mask, hm) in [("a", &self.mask_a, &self.h_ab), ("b", &self.mask_b, &self.h_ba)] {
            if mask.len() != h * w {
                return Err(format!("mask_{name} has {} pixels, expected {}", mask.len(), h * w));
            }
            if *mask != transport_mask(hm, h) {
                return Err(format!("mask_{name} does not match the homography"));
            }
        }
        for (name, img) in [("a", &self.image_a), ("b", &self.image_b)] {
            if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(format!("image_{name} leaves [0, 1]"));
            }
            let t = texture_score(img).map_err(|e| e.to_string())?;
            if t < texture_threshold {
                return Err(format!("image_{name} texture {t} below threshold {texture_threshold}"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Rejection {
    TooSmall { h: usize, w: usize, need: usize },
    Texture { score_a: f64, score_b: f64 },
}

/// Draws a homography, a crop position and a jitter from `rng` and renders
/// the pair. Sources must be at least twice the crop size on each side.
pub fn generate_pair(
    source: &Tensor<f32>,
    rng: &mut impl Rng,
    cfg: &DatagenConfig,
) -> Result<PairSample, Rejection> {
    let s = cfg.ranges.crop_size;
    let (h, w) = source.hw();
    if h < 2 * s || w < 2 * s {
        return Err(Rejection::TooSmall { h, w, need: 2 * s });
    }
    let h_ab = sample_homography(rng, &cfg.ranges);
    let h_ba = h_ab.inverse().expect("scale range is positive");
    // Keep half a crop of context around `a` for zoomed-out views.
    let ox = rng.gen_range(s / 2..=w - s - s / 2);
    let oy = rng.gen_range(s / 2..=h - s - s / 2);
    let jitter = if cfg.jitter {
        Jitter::sample(rng)
    } else {
        Jitter::NONE
    };

    let image_a = Tensor::from_fn([1, s, s], |i| source.at2(oy + i / s, ox + i % s));
    let b_to_source = Homography::translation(ox as f64, oy as f64).compose(&h_ba);
    let (warped, _) = warp_planes(source, &b_to_source, s, s).expect("source is an image");
    let image_b = quantize(&warped.map(|v| jitter.apply(v as f64) as f32));
    let image_a = quantize(&image_a);

    let score_a = texture_score(&image_a).expect("crop is an image");
    let score_b = texture_score(&image_b).expect("crop is an image");
    if score_a < cfg.texture_threshold || score_b < cfg.texture_threshold {
        return Err(Rejection::Texture { score_a, score_b });
    }
    Ok(PairSample {
        image_a,
        image_b,
        mask_a: transport_mask(&h_ab, s),
        mask_b: transport_mask(&h_ba, s),
        h_ab,
        h_ba,
    })
}

/// Random stream of pair `index`.
pub fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Counters recorded alongside a generated dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GenerationStats {
    pub sources: usize,
    pub skipped_sources: usize,
    pub attempts: usize,
    pub rejected_texture: usize,
}

impl GenerationStats {
    pub fn rejection_rate(&self) -> f64 {
        if self.attempts == 0 {
            0.0
        } else {
            self.rejected_texture as f64 / self.attempts as f64
        }
    }
}

/// Generates `count` pairs. Sources smaller than twice the crop are skipped.
pub fn generate_pairs(
    sources: &[Tensor<f32>],
    count: usize,
    cfg: &DatagenConfig,
    seed: u64,
) -> DatagenResult<(Vec<PairSample>, GenerationStats)> {
    cfg.validate()?;
    let need = 2 * cfg.ranges.crop_size;
    let usable: Vec<&Tensor<f32>> = sources
        .iter()
        .filter(|t| {
            let (h, w) = t.hw();
            h >= need && w >= need
        })
        .collect();
    if usable.is_empty() {
        return Err(DatagenError::NoUsableSource {
            count: sources.len(),
            need,
        });
    }
    let results: Vec<DatagenResult<(PairSample, usize)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = pair_rng(seed, i);
            for attempt in 1..=cfg.max_attempts {
                let src = usable[rng.gen_range(0..usable.len())];
                match generate_pair(src, &mut rng, cfg) {
                    Ok(p) => return Ok((p, attempt)),
                    Err(Rejection::Texture { .. }) => continue,
                    Err(Rejection::TooSmall { h, w, need }) => {
                        return Err(DatagenError::TooSmall { h, w, need })
                    }
                }
            }
            Err(DatagenError::Exhausted {
                pair: i,
                attempts: cfg.max_attempts,
            })
        })
        .collect();
    let mut stats = GenerationStats {
        sources: usable.len(),
        skipped_sources: sources.len() - usable.len(),
        ..Default::default()
    };
    let mut pairs = Vec::with_capacity(count);
    for r in results {
        let (p, attempts) = r?;
        stats.attempts += attempts;
        stats.rejected_texture += attempts - 1;
        pairs.push(p);
    }
    Ok((pairs, stats))
}

/// Dataset-level metadata stored in `meta.txt`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub config: DatagenConfig,
    pub seed: u64,
    pub pairs: usize,
    pub stats: GenerationStats,
}

impl DatasetMeta {
    pub fn to_text(&self) -> String {
        let mut s = self.config.to_text();
        let s_ = &self.stats;
        for (k, v) in [
            ("seed", self.seed.to_string()),
            ("pairs", self.pairs.to_string()),
            ("sources", s_.sources.to_string()),
            ("skipped_sources", s_.skipped_sources.to_string()),
            ("attempts", s_.attempts.to_string()),
            ("rejected_texture", s_.rejected_texture.to_string()),
        ] {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = DatagenConfig::default();
        let mut meta = Self {
            config: DatagenConfig::default(),
            seed: 0,
            pairs: 0,
            stats: GenerationStats::default(),
        };
        for (k, v) in parse_pairs(text)? {
            match k.as_str() {
                "seed" => meta.seed = parse_value(&k, &v)?,
                "pairs" => meta.pairs = parse_value(&k, &v)?,
                "sources" => meta.stats.sources = parse_value(&k, &v)?,
                "skipped_sources" => meta.stats.skipped_sources = parse_value(&k, &v)?,
                "attempts" => meta.stats.attempts = parse_value(&k, &v)?,
                "rejected_texture" => meta.stats.rejected_texture = parse_value(&k, &v)?,
                _ => config.set(&k, &v)?,
            }
        }
        config.validate()?;
        meta.config = config;
        Ok(meta)
    }
}

pub fn pair_dir_name(index: usize) -> String {
    format!("pair_{index:05}")
}

/// Writes one subdirectory per pair plus `meta.txt`. Every pair is checked
/// before it is written.
pub fn write_dataset(dir: &Path, pairs: &[PairSample], meta: &DatasetMeta) -> DatagenResult<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    pairs.par_iter().enumerate().try_for_each(|(i, p)| {
        let pd = dir.join(pair_dir_name(i));
        p.check(meta.config.texture_threshold).map_err(|m| invalid(&pd, m))?;
        write_pair(&pd, p)
    })?;
    let path = dir.join(META_FILE);
    fs::write(&path, meta.to_text()).map_err(|e| io(&path, e))
}

pub fn write_pair(dir: &Path, p: &PairSample) -> DatagenResult<()> {
    fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let s = p.size();
    pgm::write_image(&dir.join("image_a.pgm"), &p.image_a)?;
    pgm::write_image(&dir.join("image_b.pgm"), &p.image_b)?;
    pgm::write_mask(&dir.join("mask_a.pgm"), s, s, &p.mask_a)?;
    pgm::write_mask(&dir.join("mask_b.pgm"), s, s, &p.mask_b)?;
    let hp = dir.join("H_ab.txt");
    fs::write(&hp, p.h_ab.to_text()).map_err(|e| io(&hp, e))
}

/// Reads one pair directory. `H_ba` is recomputed from `H_ab`.
pub fn read_pair(dir: &Path) -> DatagenResult<PairSample> {
    let image_a = pgm::read_image(&dir.join("image_a.pgm"))?;
    let image_b = pgm::read_image(&dir.join("image_b.pgm"))?;
    let (wa, ha, mask_a) = pgm::read_mask(&dir.join("mask_a.pgm"))?;
    let (wb, hb, mask_b) = pgm::read_mask(&dir.join("mask_b.pgm"))?;
    if (ha, wa) != image_a.hw() || (hb, wb) != image_b.hw() {
        return Err(invalid(dir, "mask size differs from its image"));
    }
    let hp = dir.join("H_ab.txt");
    let text = fs::read_to_string(&hp).map_err(|e| io(&hp, e))?;
    let h_ab: Homography = text.parse().map_err(|e: HomographyError| invalid(&hp, e.to_string()))?;
    let h_ba = h_ab.inverse().map_err(|e| invalid(&hp, e.to_string()))?;
    Ok(PairSample {
        image_a,
        image_b,
        h_ab,
        h_ba,
        mask_a,
        mask_b,
    })
}

/// Pair subdirectories of a dataset, sorted by name.
pub fn list_pairs(dir: &Path) -> DatagenResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        if path.is_dir() && path.join("H_ab.txt").exists() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_meta(dir: &Path) -> DatagenResult<DatasetMeta> {
    let path = dir.join(META_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
    DatasetMeta::parse(&text).map_err(|e| invalid(&path, e.to_string()))
}

/// A dataset loaded into memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub meta: Option<DatasetMeta>,
    pub pairs: Vec<PairSample>,
}

/// Reads every pair of `dir` and checks its invariants. `meta.txt` is
/// optional; without it the texture test is skipped.
pub fn read_dataset(dir: &Path) -> DatagenResult<Dataset> {
    let meta = if dir.join(META_FILE).exists() {
        Some(read_meta(dir)?)
    } else {
        None
    };
    let threshold = meta.as_ref().map_or(0.0, |m| m.config.texture_threshold);
    let pairs = list_pairs(dir)?
        .par_iter()
        .map(|pd| {
            let p = read_pair(pd)?;
            p.check(threshold).map_err(|m| invalid(pd, m))?;
            Ok(p)
        })
        .collect::<DatagenResult<Vec<_>>>()?;
    Ok(Dataset { meta, pairs })
}

/// All `.pgm` and `.pnm` images of a directory, sorted by file name.
pub fn read_pgm_corpus(dir: &Path) -> DatagenResult<Vec<Tensor<f32>>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io(dir, e))? {
        let path = entry.map_err(|e| io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("pgm" | "pnm")) {
            paths.push(path);
        }
    }
    paths.sort();
    paths.iter().map(|p| Ok(pgm::read_image(p)?)).collect()
}

/// A procedural source image: a shaded background under overlapping
/// rectangles, ellipses and triangles of random gray levels, lightly
/// blurred and quantized to 8 bits.
pub fn synthetic_source(seed: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.gen_range(0.2..0.8);
    let (gx, gy) = (rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3));
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| base + gx * ((i % w) as f64 / w as f64 - 0.5) + gy * ((i / w) as f64 / h as f64 - 0.5))
        .collect();
    let area = (h * w) as f64;
    let shapes = (area / 2500.0).round() as usize + 10;
    for _ in 0..shapes {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(0.0..h as f64);
        let rx: f64 = rng.gen_range(4.0..40.0);
        let ry: f64 = rng.gen_range(4.0..40.0);
        let (sin, cos) = rng.gen_range(0.0..std::f64::consts::PI).sin_cos();
        let level: f64 = rng.gen();
        let kind = rng.gen_range(0..3);
        let r = rx.max(ry);
        let (x0, x1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(w));
        let (y0, y1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(h));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (cos * dx + sin * dy) / rx;
                let v = (-sin * dx + cos * dy) / ry;
                let hit = match kind {
                    0 => u.abs() <= 1.0 && v.abs() <= 1.0,
                    1 => u * u + v * v <= 1.0,
                    _ => v <= 1.0 && v >= 2.0 * u.abs() - 1.0,
                };
                if hit {
                    img[y * w + x] = level;
                }
            }
        }
    }
    let t = Tensor::new([1, h, w], img.into_iter().map(|v| v as f32).collect()).expect("size");
    quantize(&gaussian_blur(&t, 0.7).expect("image"))
}
