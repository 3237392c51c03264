//! Planar projective geometry and image warping.
//!
//! All coordinates follow the pixel-center convention: array index `(r, c)`
//! sits at `(c + 0.5, r + 0.5)`, and an `H x W` image covers `[0, W] x [0, H]`.

use std::fmt;
use std::str::FromStr;

use crate::kernels::{bilinear_taps, SparseMap};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Smallest `|det|` accepted for an invertible homography.
pub const MIN_DET: f64 = 1e-8;

/// A 3x3 projective transform in row-major order, acting on column vectors
/// `(x, y, 1)`.
#[derive(Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum HomographyError {
    #[error("homography is singular (|det| = {0:e})")]
    Singular(f64),
    #[error("homography has h33 = 0 and cannot be normalized")]
    AtInfinity,
    #[error("expected 9 numbers, found {0}")]
    Count(usize),
    #[error("invalid number {0:?}")]
    Number(String),
}

impl Homography {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    pub fn new(m: [[f64; 3]; 3]) -> Self {
        Self { m }
    }

    pub fn from_row_major(v: &[f64; 9]) -> Self {
        Self::new([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::new([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    }

    /// Uniform scaling about the origin.
    pub fn scaling(s: f64) -> Self {
        Self::new([[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Counter-clockwise rotation in image coordinates (y down).
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self::new([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    }

    /// Horizontal shear `x' = x + k y`.
    pub fn shear(k: f64) -> Self {
        Self::new([[1.0, k, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    /// `self * rhs`: applies `rhs` first.
    pub fn compose(&self, rhs: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * rhs.m[k][j]).sum();
            }
        }
        Self::new(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate, normalized to `h33 = 1`.
    pub fn inverse(&self) -> Result<Self, HomographyError> {
        let d = self.det();
        if !(d.abs() > MIN_DET) {
            return Err(HomographyError::Singular(d.abs()));
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]
        };
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = adj[i][j] / d;
            }
        }
        Self::new(inv).normalized()
    }

    /// Scales the matrix so that `h33 = 1`.
    pub fn normalized(&self) -> Result<Self, HomographyError> {
        let s = self.m[2][2];
        if s == 0.0 || !s.is_finite() {
            return Err(HomographyError::AtInfinity);
        }
        let mut m = self.m;
        for row in &mut m {
            for v in row {
                *v /= s;
            }
        }
        Ok(Self::new(m))
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-12 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }

    /// Determinant of the Jacobian of the projective map at `(x, y)`.
    pub fn jacobian_det(&self, x: f64, y: f64) -> f64 {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        // For x' = u/w, y' = v/w the Jacobian determinant is det(H) / w^3.
        self.det() / (w * w * w)
    }

    /// Area-based local scale, `sqrt |det J|`.
    pub fn local_scale(&self, x: f64, y: f64) -> f64 {
        self.jacobian_det(x, y).abs().sqrt()
    }

    /// Largest elementwise difference after normalizing both to `h33 = 1`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let (Ok(a), Ok(b)) = (self.normalized(), other.normalized()) else {
            return f64::INFINITY;
        };
        a.row_major()
            .iter()
            .zip(b.row_major())
            .fold(0.0, |m, (p, q)| m.max((p - q).abs()))
    }

    /// Nine numbers in `%.17g` form, row-major, separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.row_major().iter().enumerate() {
            if i > 0 {
                s.push(if i % 3 == 0 { '\n' } else { ' ' });
            }
            s.push_str(&format_g17(*v));
        }
        s.push('\n');
        s
    }
}

impl fmt::Debug for Homography {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Homography{:?}", self.m)
    }
}

impl FromStr for Homography {
    type Err = HomographyError;

    /// Parses nine whitespace-separated decimals, row-major.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<&str> = s.split_whitespace().collect();
        if tokens.len() != 9 {
            return Err(HomographyError::Count(tokens.len()));
        }
        let mut v = [0.0; 9];
        for (slot, t) in v.iter_mut().zip(&tokens) {
            *slot = t
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| HomographyError::Number(t.to_string()))?;
        }
        Ok(Self::from_row_major(&v))
    }
}

/// C `printf("%.17g")` formatting.
pub fn format_g17(v: f64) -> String {
    const P: i32 = 17;
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.into();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.into();
    }
    let sci = format!("{:.*e}", (P - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let x: i32 = exp.parse().expect("exponent digits");
    if !(-4..P).contains(&x) {
        let mantissa = strip_fraction_zeros(mantissa);
        let sign = if x < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", x.abs())
    } else {
        strip_fraction_zeros(&format!("{:.*}", (P - 1 - x) as usize, v)).to_string()
    }
}

fn strip_fraction_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// True when `(x, y)` lies in the closed image rectangle `[0, w] x [0, h]`.
pub fn inside(x: f64, y: f64, h: usize, w: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64
}

/// Backward-warping operator: output pixel `q` of an `out_h x out_w` image
/// samples the `src_h x src_w` source bilinearly at `dst_to_src(q)`.
/// Returns the map and, per output pixel, whether the sample point lies
/// inside the source. Out-of-bounds samples replicate the border.
pub fn warp_map<T: Real>(
    dst_to_src: &Homography,
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> (SparseMap<T>, Vec<bool>) {
    let mut b = SparseMap::builder(src_h * src_w);
    let mut valid = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        for c in 0..out_w {
            match dst_to_src.apply(c as f64 + 0.5, r as f64 + 0.5) {
                Some((x, y)) if x.is_finite() && y.is_finite() => {
                    valid.push(inside(x, y, src_h, src_w));
                    let xc = x.clamp(-1.0, src_w as f64 + 1.0);
                    let yc = y.clamp(-1.0, src_h as f64 + 1.0);
                    b.push(
                        bilinear_taps(xc, yc, src_h, src_w)
                            .into_iter()
                            .map(|(i, wt)| (i, T::lit(wt))),
                    );
                }
                _ => {
                    valid.push(false);
                    b.push(std::iter::empty());
                }
            }
        }
    }
    (b.finish(), valid)
}

/// Warps every plane of a `[.., H, W]` tensor: the result at `q` is the
/// input sampled at `dst_to_src(q)`.
pub fn warp_planes<T: Real>(
    input: &Tensor<T>,
    dst_to_src: &Homography,
    out_h: usize,
    out_w: usize,
) -> TensorResult<(Tensor<T>, Vec<bool>)> {
    if input.rank() < 2 {
        return Err(TensorError::Shape {
            op: "warp",
            expected: "[.., H, W]".into(),
            got: input.shape().to_vec(),
        });
    }
    let (h, w) = input.hw();
    let (map, valid) = warp_map::<T>(dst_to_src, h, w, out_h, out_w);
    let mut shape = input.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    Ok((Tensor::new(shape, map.apply_planes(input.data()))?, valid))
}
