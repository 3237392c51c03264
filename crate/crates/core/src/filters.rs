//! Fixed handcrafted filters: the ten-channel first/second order derivative
//! bank fed to every learned block, the Gaussian blur used between pyramid
//! levels, and the texture test used to reject flat training crops.
//!
//! First derivatives use 3x3 Sobel kernels scaled by 1/8, so a unit ramp has
//! gradient exactly 1. Second derivatives apply the first-order kernels twice.
//! Borders replicate the edge pixel: a constant image has zero derivatives
//! everywhere, including the border.

use crate::kernels::{gaussian_taps, separable_filter};
use crate::real::Real;
use crate::tensor::{Tensor, TensorError, TensorResult};

/// Number of channels produced by [`derivative_maps`].
pub const BANK_CHANNELS: usize = 10;

/// Channel names in output order.
pub const BANK_LAYOUT: [&str; BANK_CHANNELS] = [
    "Ix", "Iy", "Ix*Iy", "Ix^2", "Iy^2", "Ixx", "Iyy", "Ixy", "Ixx*Iyy", "Ixy^2",
];

/// Pixels on each side ignored by [`texture_score`].
pub const TEXTURE_BORDER: usize = 2;

/// Default minimum [`texture_score`] for a training crop.
pub const DEFAULT_TEXTURE_THRESHOLD: f64 = 0.02;

/// Output of [`derivative_maps`]: `[10, H, W]` in [`BANK_LAYOUT`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterBankOutput<T: Real = f32> {
    pub channels: Tensor<T>,
}

impl<T: Real> FilterBankOutput<T> {
    pub fn channel(&self, i: usize) -> &[T] {
        self.channels.plane(i)
    }
}

fn sobel_x<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let eighth = T::lit(0.125);
    let row = [-eighth, T::zero(), eighth];
    let col = [T::one(), T::lit(2.0), T::one()];
    separable_filter(plane, h, w, &row, &col)
}

fn sobel_y<T: Real>(plane: &[T], h: usize, w: usize) -> Vec<T> {
    let eighth = T::lit(0.125);
    let row = [T::one(), T::lit(2.0), T::one()];
    let col = [-eighth, T::zero(), eighth];
    separable_filter(plane, h, w, &row, &col)
}

fn single_plane<'a, T: Real>(op: &'static str, image: &'a Tensor<T>) -> TensorResult<&'a [T]> {
    let (b, c, _, _) = image.image_dims(op)?;
    if b != 1 || c != 1 {
        return Err(TensorError::Invalid {
            op,
            msg: format!(
                "expected a single-channel image [1,H,W], got {:?} (convert to grayscale first)",
                image.shape()
            ),
        });
    }
    Ok(image.data())
}

fn bank_into<T: Real>(plane: &[T], h: usize, w: usize, out: &mut Vec<T>) {
    let ix = sobel_x(plane, h, w);
    let iy = sobel_y(plane, h, w);
    let ixx = sobel_x(&ix, h, w);
    let iyy = sobel_y(&iy, h, w);
    let ixy = sobel_y(&ix, h, w);
    out.extend_from_slice(&ix);
    out.extend_from_slice(&iy);
    out.extend(ix.iter().zip(&iy).map(|(&a, &b)| a * b));
    out.extend(ix.iter().map(|&a| a * a));
    out.extend(iy.iter().map(|&a| a * a));
    out.extend_from_slice(&ixx);
    out.extend_from_slice(&iyy);
    out.extend_from_slice(&ixy);
    out.extend(ixx.iter().zip(&iyy).map(|(&a, &b)| a * b));
    out.extend(ixy.iter().map(|&a| a * a));
}

/// Ten derivative feature maps of a `[1,H,W]` image.
pub fn derivative_maps<T: Real>(image: &Tensor<T>) -> TensorResult<FilterBankOutput<T>> {
    let plane = single_plane("derivative_maps", image)?;
    let (h, w) = image.hw();
    let mut out = Vec::with_capacity(BANK_CHANNELS * h * w);
    bank_into(plane, h, w, &mut out);
    Ok(FilterBankOutput {
        channels: Tensor::new([BANK_CHANNELS, h, w], out)?,
    })
}

/// Filter bank of a `[B,1,H,W]` batch, giving `[B,10,H,W]`. Each image goes
/// through exactly the same code as [`derivative_maps`].
pub fn derivative_maps_batch<T: Real>(images: &Tensor<T>) -> TensorResult<Tensor<T>> {
    let (b, c, h, w) = images.image_dims("derivative_maps")?;
    if c != 1 {
        return Err(TensorError::Invalid {
            op: "derivative_maps",
            msg: format!("expected single-channel images, got {:?}", images.shape()),
        });
    }
    let mut out = Vec::with_capacity(b * BANK_CHANNELS * h * w);
    for i in 0..b {
        bank_into(images.plane(i), h, w, &mut out);
    }
    Tensor::new([b, BANK_CHANNELS, h, w], out)
}

/// Separable Gaussian blur (radius `ceil(3 sigma)`, normalized taps) of every
/// trailing plane of the input.
pub fn gaussian_blur<T: Real>(image: &Tensor<T>, sigma: f64) -> TensorResult<Tensor<T>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TensorError::Invalid {
            op: "gaussian_blur",
            msg: format!("sigma must be positive, got {sigma}"),
        });
    }
    if image.rank() < 2 {
        return Err(TensorError::Shape {
            op: "gaussian_blur",
            expected: "[.., H, W]".into(),
            got: image.shape().to_vec(),
        });
    }
    let (h, w) = image.hw();
    let taps = gaussian_taps::<T>(sigma);
    let mut out = Vec::with_capacity(image.numel());
    for p in 0..image.num_planes() {
        out.extend(separable_filter(image.plane(p), h, w, &taps, &taps));
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Largest absolute filter-bank response, ignoring a
/// [`TEXTURE_BORDER`]-pixel frame. Flat images score 0.
pub fn texture_score<T: Real>(image: &Tensor<T>) -> TensorResult<f64> {
    let bank = derivative_maps(image)?;
    let (h, w) = image.hw();
    let b = TEXTURE_BORDER;
    let mut best = 0.0f64;
    if h <= 2 * b || w <= 2 * b {
        return Ok(best);
    }
    for c in 0..BANK_CHANNELS {
        let plane = bank.channel(c);
        for y in b..h - b {
            for &v in &plane[y * w + b..y * w + w - b] {
                best = best.max(v.as_f64().abs());
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Tensor<f64> {
        Tensor::from_fn([1, h, w], |i| f(i / w, i % w))
    }

    /// Direct 3x3 cross-correlation with replicated borders.
    fn correlate3(plane: &[f64], h: usize, w: usize, k: [[f64; 3]; 3]) -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (dy, krow) in k.iter().enumerate() {
                    for (dx, &kv) in krow.iter().enumerate() {
                        let sy = (y as isize + dy as isize - 1).clamp(0, h as isize - 1) as usize;
                        let sx = (x as isize + dx as isize - 1).clamp(0, w as isize - 1) as usize;
                        acc += kv * plane[sy * w + sx];
                    }
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    const KX: [[f64; 3]; 3] = [
        [-0.125, 0.0, 0.125],
        [-0.25, 0.0, 0.25],
        [-0.125, 0.0, 0.125],
    ];
    const KY: [[f64; 3]; 3] = [
        [-0.125, -0.25, -0.125],
        [0.0, 0.0, 0.0],
        [0.125, 0.25, 0.125],
    ];

    #[test]
    fn constant_image_has_zero_bank() {
        let img = image(9, 11, |_, _| 0.37);
        let bank = derivative_maps(&img).unwrap();
        assert_eq!(bank.channels.shape(), &[10, 9, 11]);
        assert!(bank.channels.data().iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn multichannel_rejected() {
        let img = Tensor::<f32>::zeros([3, 8, 8]);
        let err = derivative_maps(&img).unwrap_err();
        assert!(err.to_string().contains("grayscale"), "{err}");
    }

    #[test]
    fn ramp_matches_direct_correlation() {
        let (h, w) = (12, 16);
        let img = image(h, w, |_, x| x as f64 / w as f64);
        let bank = derivative_maps(&img).unwrap();
        let ix = correlate3(img.data(), h, w, KX);
        let iy = correlate3(img.data(), h, w, KY);
        let ixx = correlate3(&ix, h, w, KX);
        let iyy = correlate3(&iy, h, w, KY);
        let ixy = correlate3(&ix, h, w, KY);
        for (c, want) in [(0, &ix), (1, &iy), (5, &ixx), (6, &iyy), (7, &ixy)] {
            for (a, b) in bank.channel(c).iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "channel {c}");
            }
        }
        // Away from the border the ramp has unit-scaled slope and no curvature.
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                let i = y * w + x;
                assert!((bank.channel(0)[i] - 1.0 / w as f64).abs() < 1e-12);
                for c in [1, 5, 6, 7] {
                    assert!(bank.channel(c)[i].abs() < 1e-12, "channel {c} at {y},{x}");
                }
            }
        }
    }

    #[test]
    fn product_channels_are_consistent() {
        let img = image(10, 10, |y, x| ((x * 7 + y * 3) % 5) as f64 / 5.0);
        let bank = derivative_maps(&img).unwrap();
        for i in 0..100 {
            let ch = |c: usize| bank.channel(c)[i];
            assert_eq!(ch(2), ch(0) * ch(1));
            assert_eq!(ch(3), ch(0) * ch(0));
            assert_eq!(ch(4), ch(1) * ch(1));
            assert_eq!(ch(8), ch(5) * ch(6));
            assert_eq!(ch(9), ch(7) * ch(7));
            assert!(ch(3) >= 0.0 && ch(4) >= 0.0 && ch(9) >= 0.0);
        }
    }

    #[test]
    fn horizontal_flip_symmetry() {
        let (h, w) = (9, 13);
        let f = |y: usize, x: usize| ((x * x + 3 * y) % 7) as f64 / 7.0 + 0.01 * x as f64;
        let img = image(h, w, f);
        let flipped = image(h, w, |y, x| f(y, w - 1 - x));
        let a = derivative_maps(&img).unwrap();
        let b = derivative_maps(&flipped).unwrap();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let j = y * w + (w - 1 - x);
                let close = |p: f64, q: f64| (p - q).abs() < 1e-12;
                assert!(close(a.channel(0)[i], -b.channel(0)[j]));
                assert!(close(a.channel(7)[i], -b.channel(7)[j]));
                for c in [1, 3, 4, 5, 6] {
                    assert!(close(a.channel(c)[i], b.channel(c)[j]), "channel {c}");
                }
            }
        }
    }

    #[test]
    fn batch_bank_matches_single() {
        let a = image(8, 9, |y, x| (x * y) as f64 / 72.0);
        let b = image(8, 9, |y, x| ((x + y) % 3) as f64 / 3.0);
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        let batch = Tensor::new([2, 1, 8, 9], data).unwrap();
        let out = derivative_maps_batch(&batch).unwrap();
        let n = 10 * 72;
        assert_eq!(&out.data()[..n], derivative_maps(&a).unwrap().channels.data());
        assert_eq!(&out.data()[n..], derivative_maps(&b).unwrap().channels.data());
    }

    #[test]
    fn blur_keeps_constants() {
        let img = image(7, 9, |_, _| 0.25);
        let out = gaussian_blur(&img, 1.3).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(gaussian_blur(&img, 0.0).is_err());
        assert!(gaussian_blur(&img, -1.0).is_err());
    }

    #[test]
    fn blur_reproduces_kernel_at_impulse() {
        let sigma = 1.0;
        let img = image(15, 15, |y, x| if (y, x) == (7, 7) { 1.0 } else { 0.0 });
        let out = gaussian_blur(&img, sigma).unwrap();
        // explicit table: radius 3, g(i) = exp(-i^2/2) / sum
        let raw: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / 2.0).exp()).collect();
        let s: f64 = raw.iter().sum();
        let g: Vec<f64> = raw.iter().map(|v| v / s).collect();
        for dy in 0..7 {
            for dx in 0..7 {
                let got = out.data()[(4 + dy) * 15 + 4 + dx];
                assert!((got - g[dy] * g[dx]).abs() < 1e-14);
            }
        }
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn blur_semigroup() {
        let (h, w) = (40, 40);
        let img = image(h, w, |y, x| {
            (0.5 + 0.4 * ((x as f64) * 0.3).sin() * ((y as f64) * 0.2).cos()).clamp(0.0, 1.0)
        });
        let sigma = 1.5;
        let twice = gaussian_blur(&gaussian_blur(&img, sigma).unwrap(), sigma).unwrap();
        let once = gaussian_blur(&img, sigma * 2f64.sqrt()).unwrap();
        for y in 8..h - 8 {
            for x in 8..w - 8 {
                let i = y * w + x;
                assert!((twice.data()[i] - once.data()[i]).abs() < 1e-3);
            }
        }
    }

    #[test]
    fn texture_score_cases() {
        let flat = image(20, 20, |_, _| 0.5);
        assert_eq!(texture_score(&flat).unwrap(), 0.0);
        let checker = image(20, 20, |y, x| ((x / 2 + y / 2) % 2) as f64);
        let s = texture_score(&checker).unwrap();
        assert!(s > 0.0);
        let bank = derivative_maps(&checker).unwrap();
        let mut want = 0.0f64;
        for c in 0..10 {
            for y in 2..18 {
                for x in 2..18 {
                    want = want.max(bank.channel(c)[y * 20 + x].abs());
                }
            }
        }
        assert_eq!(s, want);
    }
}
