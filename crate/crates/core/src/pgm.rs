//! Binary (`P5`) and plain (`P2`) graymap files.
//!
//! Images are written as 8-bit `P5`. Masks use the same container with a
//! maximum value of 1, one byte per pixel.

use std::fs;
use std::path::Path;

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PgmError {
    #[error("{path}: {error}")]
    Io {
        path: String,
        error: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

/// A decoded graymap. Samples are stored as read, in `0..=maxval`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graymap {
    pub width: usize,
    pub height: usize,
    pub maxval: u16,
    pub data: Vec<u16>,
}

pub fn encode(width: usize, height: usize, maxval: u8, data: &[u8]) -> Vec<u8> {
    assert_eq!(data.len(), width * height, "pixel count");
    let mut out = format!("P5\n{width} {height}\n{maxval}\n").into_bytes();
    out.extend_from_slice(data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("missing or invalid {what}"))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Graymap, String> {
    let plain = match bytes.get(..2) {
        Some(b"P5") => false,
        Some(b"P2") => true,
        _ => return Err("not a PGM file (expected P5 or P2 magic)".into()),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("empty image {width}x{height}"));
    }
    if maxval == 0 || maxval > u16::MAX as usize {
        return Err(format!("maxval {maxval} out of range"));
    }
    let n = width * height;
    let data: Vec<u16> = if plain {
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            v.push(h.number("sample")? as u16);
        }
        v
    } else {
        // Exactly one whitespace byte separates the header from the raster.
        match bytes.get(h.pos) {
            Some(c) if c.is_ascii_whitespace() => h.pos += 1,
            _ => return Err("missing separator after header".into()),
        }
        let raster = &bytes[h.pos..];
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        if raster.len() < need {
            return Err(format!("raster truncated: {} of {need} bytes", raster.len()));
        }
        if wide {
            raster[..need].chunks(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        } else {
            raster[..n].iter().map(|&b| b as u16).collect()
        }
    };
    if let Some(&bad) = data.iter().find(|&&v| v as usize > maxval) {
        return Err(format!("sample {bad} exceeds maxval {maxval}"));
    }
    Ok(Graymap {
        width,
        height,
        maxval: maxval as u16,
        data,
    })
}

fn io_err(path: &Path, error: std::io::Error) -> PgmError {
    PgmError::Io {
        path: path.display().to_string(),
        error,
    }
}

pub fn read(path: &Path) -> Result<Graymap, PgmError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    decode(&bytes).map_err(|msg| PgmError::Format {
        path: path.display().to_string(),
        msg,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), PgmError> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Nearest 8-bit level of a `[0, 1]` intensity.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a `[1, H, W]` (or `[H, W]`) image with values in `[0, 1]`.
pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<(), PgmError> {
    let (h, w) = image.hw();
    let data: Vec<u8> = image.data().iter().map(|&v| to_u8(v as f64)).collect();
    write_bytes(path, &encode(w, h, 255, &data))
}

/// Reads a graymap as a `[1, H, W]` image scaled to `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>, PgmError> {
    Ok(graymap_to_image(&read(path)?))
}

pub fn graymap_to_image(g: &Graymap) -> Tensor<f32> {
    let scale = 1.0 / g.maxval as f64;
    Tensor::new(
        [1, g.height, g.width],
        g.data.iter().map(|&v| (v as f64 * scale) as f32).collect(),
    )
    .expect("pixel count matches")
}

pub fn write_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<(), PgmError> {
    let data: Vec<u8> = mask.iter().map(|&m| m as u8).collect();
    write_bytes(path, &encode(width, height, 1, &data))
}

/// Reads a mask; any nonzero sample is `true`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), PgmError> {
    let g = read(path)?;
    Ok((g.width, g.height, g.data.iter().map(|&v| v != 0).collect()))
}
