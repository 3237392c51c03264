use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::{grad_check, GradCheckOptions, ScalarFn, Tape};
use crate::tensor::TensorResult;

fn map(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> f64) -> ResponseMap<f64> {
    ResponseMap::new(Tensor::from_fn([1, h, w], |i| f(i / w, i % w))).unwrap()
}

fn random_map(h: usize, w: usize, seed: u64) -> ResponseMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ResponseMap::new(Tensor::from_fn([1, h, w], |_| rng.gen_range(-1.0..1.0))).unwrap()
}

fn var<'t>(tape: &'t Tape<f64>, r: &ResponseMap<f64>) -> Var<'t, f64> {
    let (h, w) = r.hw();
    tape.leaf(r.scores.clone().reshape([h, w]).unwrap())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Separable quadratic bowl peaking at pixel `(pr, pc)`.
fn bowl(n: usize, pr: usize, pc: usize, k: f64) -> ResponseMap<f64> {
    map(n, n, |r, c| {
        -k * ((r as f64 - pr as f64).powi(2) + (c as f64 - pc as f64).powi(2))
    })
}

#[test]
fn softmax_limit_is_the_peak_pixel() {
    let r = map(8, 8, |r, c| if (r, c) == (5, 2) { 1.0 } else { 0.0 });
    let g = ip_coords(&r, 8, 1e30).unwrap();
    assert!(dist(g.coords[0], [2.5, 5.5]) < 1e-12, "{:?}", g.coords);
}

#[test]
fn uniform_window_gives_center() {
    let r = map(12, 8, |_, _| 0.3);
    let g = ip_coords(&r, 4, std::f64::consts::E).unwrap();
    assert_eq!(g.coords.len(), 6);
    for (c, o) in g.coords.iter().zip(&g.origins) {
        let want = [o[0] as f64 + 1.5 + 0.5, o[1] as f64 + 1.5 + 0.5];
        assert!(dist(*c, want) < 1e-12);
    }
    assert_eq!(g.origins[3], [4, 4]);
}

#[test]
fn two_corner_maxima_are_balanced() {
    let r = map(6, 6, |r, c| if (r, c) == (0, 0) || (r, c) == (5, 5) { 2.0 } else { 0.0 });
    let g = ip_coords(&r, 6, std::f64::consts::E).unwrap();
    let c = g.coords[0];
    assert!((dist(c, [0.5, 0.5]) - dist(c, [5.5, 5.5])).abs() < 1e-12);
}

#[test]
fn bad_windows_and_bases_rejected() {
    let r = random_map(8, 10, 1);
    assert!(matches!(ip_coords(&r, 9, 2.0), Err(MsipError::Window { .. })));
    assert!(matches!(nms_coords(&r, 1), Err(MsipError::Window { .. })));
    assert!(matches!(ip_coords(&r, 4, 1.0), Err(MsipError::Base(_))));
}

#[test]
fn nms_delta_and_ties() {
    let r = map(8, 8, |r, c| if (r, c) == (3, 6) { 1.0 } else { 0.0 });
    assert_eq!(nms_coords(&r, 8).unwrap().coords[0], [6.5, 3.5]);
    let flat = map(8, 8, |_, _| 0.7);
    let g = nms_coords(&flat, 4).unwrap();
    assert_eq!(g.coords, vec![[0.5, 0.5], [4.5, 0.5], [0.5, 4.5], [4.5, 4.5]]);
}

#[test]
fn identity_warp_is_a_no_op() {
    let r = random_map(9, 7, 2);
    let (w, valid) = warp_response(&r, &Homography::IDENTITY, (9, 7)).unwrap();
    assert_eq!(w, r);
    assert!(valid.iter().all(|&v| v));
}

#[test]
fn translation_warp_vacates_a_band() {
    let r = map(20, 30, |r, c| (r * 30 + c) as f64);
    let (w, valid) = warp_response(&r, &Homography::translation(10.0, 0.0), (20, 30)).unwrap();
    for row in 0..20 {
        for c in 0..30 {
            assert_eq!(valid[row * 30 + c], c >= 10, "({row},{c})");
            if c >= 10 {
                assert_eq!(w.at(row, c), r.at(row, c - 10));
            }
        }
    }
}

#[test]
fn singular_warp_rejected() {
    let h = Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]);
    let r = random_map(8, 8, 3);
    assert!(matches!(
        warp_response(&r, &h, (8, 8)),
        Err(MsipError::Homography(HomographyError::Singular(_)))
    ));
}

#[test]
fn warp_round_trip() {
    let r = map(64, 64, |r, c| (c as f64 / 7.0).sin() * (r as f64 / 9.0).cos());
    let h = Homography::translation(32.0, 32.0)
        .compose(&Homography::rotation(0.2))
        .compose(&Homography::scaling(1.1))
        .compose(&Homography::translation(-32.0, -32.0));
    let (fwd, v1) = warp_response(&r, &h, (64, 64)).unwrap();
    let (back, v2) = warp_response(&fwd, &h.inverse().unwrap(), (64, 64)).unwrap();
    // Valid pixels of the first warp whose whole 3x3 neighborhood is valid.
    let v1_at = |px: i64, py: i64| px >= 0 && py >= 0 && px < 64 && py < 64 && v1[(py * 64 + px) as usize];
    let core = |px: i64, py: i64| (-1..=1).all(|dy| (-1..=1).all(|dx| v1_at(px + dx, py + dy)));
    let mut checked = 0;
    for row in 0..64 {
        for c in 0..64 {
            // All four bilinear taps of the second warp must be interior.
            let (x, y) = h.apply(c as f64 + 0.5, row as f64 + 0.5).unwrap();
            let (x0, y0) = ((x - 0.5).floor() as i64, (y - 0.5).floor() as i64);
            let taps_valid = [(0, 0), (1, 0), (0, 1), (1, 1)]
                .iter()
                .all(|(dx, dy)| core(x0 + dx, y0 + dy));
            if !(v2[row * 64 + c] && taps_valid) {
                continue;
            }
            checked += 1;
            assert!((back.at(row, c) - r.at(row, c)).abs() < 1e-2, "({row},{c})");
        }
    }
    assert!(checked > 1500, "{checked}");
}

/// Direct evaluation of both loss directions for one full window with
/// identity geometry.
#[test]
fn single_window_loss_by_hand() {
    let ra = map(8, 8, |r, c| ((r * 8 + c) as f64 * 0.37).sin());
    let rb = map(8, 8, |r, c| ((r * 8 + c) as f64 * 0.53).cos());
    let base = 2.0f64;
    let soft = |m: &ResponseMap<f64>| {
        let z: f64 = (0..64).map(|i| base.powf(m.at(i / 8, i % 8))).sum();
        let mut p = [0.0; 3];
        for i in 0..64 {
            let (r, c) = (i / 8, i % 8);
            let wgt = base.powf(m.at(r, c)) / z;
            p[0] += wgt * (c as f64 + 0.5);
            p[1] += wgt * (r as f64 + 0.5);
            p[2] += wgt * m.at(r, c);
        }
        p
    };
    let hard = |m: &ResponseMap<f64>| {
        let mut best = (0, 0);
        for r in 0..8 {
            for c in 0..8 {
                if m.at(r, c) > m.at(best.0, best.1) {
                    best = (r, c);
                }
            }
        }
        [best.1 as f64 + 0.5, best.0 as f64 + 0.5]
    };
    let want = {
        // A single window: normalized alpha is exactly one.
        let (pa, pb) = (soft(&ra), soft(&rb));
        let (ta, tb) = (hard(&rb), hard(&ra));
        dist([pa[0], pa[1]], ta).powi(2) + dist([pb[0], pb[1]], tb).powi(2)
    };
    let full = vec![true; 64];
    let geom = PairGeometry {
        h_ab: &Homography::IDENTITY,
        h_ba: &Homography::IDENTITY,
        mask_a: &full,
        mask_b: &full,
    };
    let tape = Tape::new();
    let (l, degenerate) = ip_loss(var(&tape, &ra), var(&tape, &rb), &geom, 8, base).unwrap();
    assert!(!degenerate);
    assert!((l.item() - want).abs() < 1e-12, "{} vs {want}", l.item());
}

#[test]
fn alpha_weights_windows_by_response() {
    // Two windows with known errors: alpha_i is softplus(mass) + softplus(target).
    let ra = map(4, 8, |_, c| if c < 4 { 0.0 } else { 3.0 });
    let rb = map(4, 8, |r, c| if (r, c) == (0, 0) || (r, c) == (3, 7) { 5.0 } else { 0.0 });
    let full = vec![true; 32];
    let geom = PairGeometry {
        h_ab: &Homography::IDENTITY,
        h_ba: &Homography::IDENTITY,
        mask_a: &full,
        mask_b: &full,
    };
    let t = msip_targets(&ra, &rb, &geom, &MsipConfig { windows: vec![4], weights: vec![1.0], base: 2.0 })
        .unwrap();
    let tape = Tape::new();
    let la = ip_loss_from_targets(var(&tape, &ra), &t.ab[0], 2.0).unwrap().unwrap();
    // Uniform windows: soft coordinates sit at the window centers.
    let d0 = dist([2.0, 2.0], [0.5, 0.5]).powi(2);
    let d1 = dist([6.0, 2.0], [7.5, 3.5]).powi(2);
    let (a0, a1) = (softplus(0.0) + softplus(5.0), softplus(3.0) + softplus(5.0));
    let want = (a0 * d0 + a1 * d1) / (a0 + a1);
    assert!((la.item() - want).abs() < 1e-12);
}

#[test]
fn sparse_windows_are_skipped() {
    let r = random_map(8, 16, 4);
    let mut valid = vec![true; 128];
    // Left window keeps 47 of 64 valid pixels, right window 48.
    for i in 0..17 {
        valid[(i / 8) * 16 + i % 8] = false;
    }
    for i in 0..16 {
        valid[(i / 8) * 16 + 8 + i % 8] = false;
    }
    let t = ip_targets(&r, &valid, 8).unwrap();
    assert_eq!(t.valid, vec![1]);
    // The target never lands on an invalid pixel.
    assert!(t.y[0] >= 2.5);
    let none = ip_targets(&r, &[false; 128], 8).unwrap();
    assert!(none.is_degenerate());
    let tape = Tape::new();
    assert!(ip_loss_from_targets(var(&tape, &r), &none, 2.0).unwrap().is_none());
}

#[test]
fn identical_maps_converge_to_zero_loss() {
    // Distinct values, so every window has a clear maximum.
    let mut values: Vec<f64> = (0..24 * 24).map(|v| v as f64 * 0.1).collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    let r = map(24, 24, |row, c| values[row * 24 + c]);
    let full = vec![true; 24 * 24];
    let geom = PairGeometry {
        h_ab: &Homography::IDENTITY,
        h_ba: &Homography::IDENTITY,
        mask_a: &full,
        mask_b: &full,
    };
    let tape = Tape::new();
    let (l, _) = ip_loss(var(&tape, &r), var(&tape, &r), &geom, 8, 2.0).unwrap();
    assert!(l.item() > 1e-3);
    let (l, _) = ip_loss(var(&tape, &r), var(&tape, &r), &geom, 8, 1e100).unwrap();
    assert!(l.item() < 1e-12, "{}", l.item());
}

fn geometry_fixture(n: usize) -> (Homography, Homography, Vec<bool>, Vec<bool>) {
    let c = n as f64 / 2.0;
    let h_ab = Homography::translation(c, c)
        .compose(&Homography::rotation(0.25))
        .compose(&Homography::scaling(1.15))
        .compose(&Homography::translation(-c - 1.5, -c + 2.0));
    let h_ba = h_ab.inverse().unwrap();
    let mask = |h: &Homography| -> Vec<bool> {
        (0..n * n)
            .map(|i| {
                let (x, y) = h.apply((i % n) as f64 + 0.5, (i / n) as f64 + 0.5).unwrap();
                crate::geometry::inside(x, y, n, n)
            })
            .collect()
    };
    let (ma, mb) = (mask(&h_ab), mask(&h_ba));
    (h_ab, h_ba, ma, mb)
}

#[test]
fn msip_levels_and_weights() {
    let cfg = MsipConfig::from_model(&KeyNetConfig::default());
    assert_eq!(cfg.windows, vec![8, 16, 24, 32, 40]);
    assert_eq!(cfg.weights, vec![256.0, 64.0, 16.0, 4.0, 1.0]);

    let (h_ab, h_ba, ma, mb) = geometry_fixture(48);
    let geom = PairGeometry {
        h_ab: &h_ab,
        h_ba: &h_ba,
        mask_a: &ma,
        mask_b: &mb,
    };
    let (ra, rb) = (random_map(48, 48, 6), random_map(48, 48, 7));
    let cfg = MsipConfig {
        windows: vec![8, 16, 24],
        weights: vec![256.0, 64.0, 16.0],
        base: std::f64::consts::E,
    };
    let tape = Tape::new();
    let (total, value) = msip_loss(var(&tape, &ra), var(&tape, &rb), &geom, &cfg).unwrap();
    let dot: f64 = value.per_level.iter().map(|l| l.weight * l.loss).sum();
    assert_eq!(value.total, dot);
    assert!((total.item() - value.total).abs() < 1e-9 * value.total.max(1.0));
    assert!(!value.degenerate());

    // Single level equals lambda * ip_loss.
    let single = MsipConfig {
        windows: vec![16],
        weights: vec![64.0],
        base: cfg.base,
    };
    let (_, v1) = msip_loss(var(&tape, &ra), var(&tape, &rb), &geom, &single).unwrap();
    let (l16, _) = ip_loss(var(&tape, &ra), var(&tape, &rb), &geom, 16, cfg.base).unwrap();
    assert_eq!(v1.total, 64.0 * l16.item());
    assert_eq!(v1.per_level[0].loss, value.per_level[1].loss);

    // Zeroing one weight removes exactly that level's contribution.
    let mut zeroed = cfg.clone();
    zeroed.weights[1] = 0.0;
    let (_, v0) = msip_loss(var(&tape, &ra), var(&tape, &rb), &geom, &zeroed).unwrap();
    let removed = value.per_level[1].weight * value.per_level[1].loss;
    assert!((value.total - v0.total - removed).abs() < 1e-9 * value.total);
}

#[test]
fn loss_is_symmetric_in_the_pair() {
    let (h_ab, h_ba, ma, mb) = geometry_fixture(40);
    let (ra, rb) = (random_map(40, 40, 8), random_map(40, 40, 9));
    let cfg = MsipConfig {
        windows: vec![8, 16],
        weights: vec![4.0, 1.0],
        base: 3.0,
    };
    let geom = PairGeometry {
        h_ab: &h_ab,
        h_ba: &h_ba,
        mask_a: &ma,
        mask_b: &mb,
    };
    let tape = Tape::new();
    let (_, ab) = msip_loss(var(&tape, &ra), var(&tape, &rb), &geom, &cfg).unwrap();
    let (_, ba) = msip_loss(var(&tape, &rb), var(&tape, &ra), &geom.swapped(), &cfg).unwrap();
    assert_eq!(ab, ba);
}

#[test]
fn mismatched_inputs_rejected() {
    let full = vec![true; 64];
    let geom = PairGeometry {
        h_ab: &Homography::IDENTITY,
        h_ba: &Homography::IDENTITY,
        mask_a: &full,
        mask_b: &full[..10],
    };
    let tape = Tape::new();
    let r = random_map(8, 8, 10);
    assert!(matches!(
        ip_loss(var(&tape, &r), var(&tape, &r), &geom, 4, 2.0),
        Err(MsipError::Mask { .. })
    ));
    let bad = MsipConfig {
        windows: vec![8],
        weights: vec![],
        base: 2.0,
    };
    assert!(bad.validate().is_err());
}

/// The soft side of the loss against fixed targets, for gradient checks.
struct SoftSide {
    hw: (usize, usize),
    targets: IpTargets,
}

impl ScalarFn for SoftSide {
    fn eval<'t, T: Real>(&self, _: &'t Tape<T>, x: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        let r = x[0].reshape([self.hw.0, self.hw.1])?;
        Ok(ip_loss_from_targets(r, &self.targets, 2.5)
            .map_err(|e| TensorError::Invalid {
                op: "test",
                msg: e.to_string(),
            })?
            .expect("valid windows"))
    }
}

struct Coords(usize);

impl ScalarFn for Coords {
    fn eval<'t, T: Real>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> TensorResult<Var<'t, T>> {
        let p = ip_coords_var(x[0], self.0, 2.0).map_err(|e| TensorError::Invalid {
            op: "test",
            msg: e.to_string(),
        })?;
        let g = p.x.shape()[0];
        let w = tape.constant(Tensor::from_fn([g], |i| T::lit(1.0 + i as f64 * 0.3)));
        let u = tape.constant(Tensor::from_fn([g], |i| T::lit(0.5 - i as f64 * 0.2)));
        Ok(p.x.mul(w)?.add(p.y.mul(u)?)?.add(p.mass)?.sum())
    }
}

#[test]
fn ip_coordinates_pass_gradient_check() {
    let x = random_map(9, 13, 11).scores.reshape([9, 13]).unwrap();
    let r32 = grad_check::<f32, _>(&Coords(4), std::slice::from_ref(&x), &GradCheckOptions::default()).unwrap();
    assert!(r32.passes(1e-3), "{r32:?}");
    let r64 = grad_check::<f64, _>(&Coords(4), &[x], &GradCheckOptions::default()).unwrap();
    assert!(r64.passes(1e-6), "{r64:?}");
}

#[test]
fn soft_loss_passes_gradient_check() {
    let r = random_map(16, 16, 12);
    let target = random_map(16, 16, 13);
    let mut valid = vec![true; 256];
    valid[..40].iter_mut().for_each(|v| *v = false);
    let targets = ip_targets(&target, &valid, 8).unwrap();
    assert_eq!(targets.valid.len(), 3);
    let f = SoftSide {
        hw: (16, 16),
        targets,
    };
    let x = r.scores.reshape([256]).unwrap();
    let r32 = grad_check::<f32, _>(&f, std::slice::from_ref(&x), &GradCheckOptions::default()).unwrap();
    assert!(r32.passes(1e-3), "{r32:?}");
    let r64 = grad_check::<f64, _>(&f, &[x], &GradCheckOptions::default()).unwrap();
    assert!(r64.passes(1e-6), "{r64:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn soft_coords_stay_inside_windows(h in 4usize..20, w in 4usize..20, n in 2usize..5, base in 1.1f64..50.0, seed in any::<u64>()) {
        let r = random_map(h, w, seed);
        let g = ip_coords(&r, n, base).unwrap();
        prop_assert_eq!(g.coords.len(), (h / n) * (w / n));
        for (c, o) in g.coords.iter().zip(&g.origins) {
            for axis in 0..2 {
                prop_assert!(c[axis] > o[axis] as f64 && c[axis] < (o[axis] + n) as f64);
            }
        }
    }

    #[test]
    fn nms_matches_nested_loop_argmax(h in 2usize..20, w in 2usize..20, n in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n <= h && n <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Few distinct values, so ties are common.
        let r = map(h, w, |_, _| rng.gen_range(0..4) as f64);
        let g = nms_coords(&r, n).unwrap();
        let mut k = 0;
        for wy in 0..h / n {
            for wx in 0..w / n {
                let mut best = (wy * n, wx * n);
                for rr in wy * n..wy * n + n {
                    for cc in wx * n..wx * n + n {
                        if r.at(rr, cc) > r.at(best.0, best.1) {
                            best = (rr, cc);
                        }
                    }
                }
                prop_assert_eq!(g.coords[k], [best.1 as f64 + 0.5, best.0 as f64 + 0.5]);
                prop_assert_eq!(g.masses[k], r.at(best.0, best.1));
                k += 1;
            }
        }
    }

    #[test]
    fn sharpening_is_monotone(n in 3usize..12, pr in 0usize..12, pc in 0usize..12, k in 0.05f64..3.0) {
        prop_assume!(pr < n && pc < n);
        let r = bowl(n, pr, pc, k);
        let peak = [pc as f64 + 0.5, pr as f64 + 0.5];
        let mut last = f64::INFINITY;
        for base in [1.4, 2.0, std::f64::consts::E, 5.0] {
            let d = dist(ip_coords(&r, n, base).unwrap().coords[0], peak);
            prop_assert!(d <= last + 1e-12, "base {} distance {} after {}", base, d, last);
            last = d;
        }
    }

    #[test]
    fn loss_is_non_negative(seed in any::<u64>(), base in 1.5f64..20.0) {
        let (h_ab, h_ba, ma, mb) = geometry_fixture(32);
        let geom = PairGeometry { h_ab: &h_ab, h_ba: &h_ba, mask_a: &ma, mask_b: &mb };
        let cfg = MsipConfig { windows: vec![8, 16], weights: vec![4.0, 1.0], base };
        let tape = Tape::new();
        let ra = random_map(32, 32, seed);
        let rb = random_map(32, 32, seed ^ 1);
        let (t, v) = msip_loss(var(&tape, &ra), var(&tape, &rb), &geom, &cfg).unwrap();
        prop_assert!(t.item() >= 0.0 && v.total >= 0.0);
        prop_assert!(v.per_level.iter().all(|l| l.loss >= 0.0));
    }
}
