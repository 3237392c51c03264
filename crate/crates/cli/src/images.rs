//! Grayscale image loading and keypoint overlays.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use keynet::eval::Keypoint;
use keynet::pgm;
use keynet::Tensor;

const EXTENSIONS: [&str; 4] = ["pgm", "png", "jpg", "jpeg"];

/// Reads a PGM, PNG or JPEG file as a `[1, H, W]` image in `[0, 1]`.
pub fn load_gray(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.starts_with(b"P5") || bytes.starts_with(b"P2") {
        let g = pgm::decode(&bytes).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        return Ok(pgm::graymap_to_image(&g));
    }
    let img = image::load_from_memory(&bytes)
        .with_context(|| format!("decoding {}", path.display()))?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    Ok(Tensor::new([1, h as usize, w as usize], data)?)
}

/// Image files of a directory, sorted by name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("{} contains no .pgm, .png or .jpg images", dir.display());
    }
    Ok(out)
}

/// 8-bit copy of `image` with every keypoint drawn as a circle of radius
/// `scale`: a 3-pixel ring, white in the middle and black on both sides.
pub fn overlay(image: &Tensor<f32>, keypoints: &[Keypoint]) -> (usize, usize, Vec<u8>) {
    let (h, w) = image.hw();
    let mut out: Vec<u8> = image.data().iter().map(|&v| pgm::to_u8(v as f64)).collect();
    for k in keypoints {
        let reach = k.scale + 1.5;
        let r0 = (k.y - reach).floor().max(0.0) as usize;
        let r1 = ((k.y + reach).ceil().max(0.0) as usize).min(h);
        let c0 = (k.x - reach).floor().max(0.0) as usize;
        let c1 = ((k.x + reach).ceil().max(0.0) as usize).min(w);
        for r in r0..r1 {
            for c in c0..c1 {
                let d = (c as f64 + 0.5 - k.x).hypot(r as f64 + 0.5 - k.y);
                let off = (d - k.scale).abs();
                if off < 0.5 {
                    out[r * w + c] = 255;
                } else if off < 1.5 {
                    out[r * w + c] = 0;
                }
            }
        }
    }
    (w, h, out)
}
