use super::*;
use crate::datagen::{generate_pairs, synthetic_source, DatagenConfig, WarpRanges};
use crate::eval::{EvalConfig, RandomDetector};

fn toy_pairs(n: usize, seed: u64) -> Vec<PairSample> {
    let cfg = DatagenConfig {
        ranges: WarpRanges {
            crop_size: 48,
            scale: [0.8, 1.25],
            skew: [-0.1, 0.1],
            rotation_deg: [-15.0, 15.0],
        },
        ..DatagenConfig::default()
    };
    let sources: Vec<_> = (0..3).map(|s| synthetic_source(s + 100, 120, 120)).collect();
    generate_pairs(&sources, n, &cfg, seed).unwrap().0
}

fn toy_config(epochs: usize, batch_size: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        seed: 7,
        ..TrainConfig::default()
    }
}

/// Loss of all `pairs` in one batch, without an update.
fn dataset_loss(t: &Trainer, pairs: &[PairSample]) -> f64 {
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let images = stack_views::<f32>(&refs);
    let geoms: Vec<_> = refs.iter().map(|p| p.geometry()).collect();
    let tape = Tape::<f32>::new();
    let params = ParamVars::constants(&tape, &t.model, &t.weights);
    batch_loss(&tape, &t.model, &params, &images, &geoms, None).unwrap().value
}

#[test]
fn learning_rate_halves_at_epoch_21() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(0), 1e-3);
    assert_eq!(c.lr_at(19), 1e-3);
    assert_eq!(c.lr_at(20), 0.5e-3);
    assert_eq!(c.lr_at(29), 0.5e-3);
    assert_eq!(c.lr_at(40), 0.25e-3);
}

#[test]
fn logged_rate_follows_the_schedule() {
    let pairs = toy_pairs(2, 1);
    let mut cfg = toy_config(3, 2);
    cfg.lr_decay_every = 2;
    let mut t = Trainer::new(KeyNetConfig::tiny(), cfg).unwrap();
    let log = train(&mut t, &pairs, None, None).unwrap();
    let lrs: Vec<(usize, f64)> = log.iter().map(|e| (e.epoch, e.lr)).collect();
    assert_eq!(lrs, vec![(1, 1e-3), (2, 1e-3), (3, 0.5e-3)]);
}

#[test]
fn config_text_round_trip() {
    let mut c = toy_config(4, 3);
    c.l2_weight = 2.5e-4;
    c.val_every = 2;
    let mut back = TrainConfig::default();
    back.apply(&crate::config::parse_pairs(&c.to_text()).unwrap()).unwrap();
    assert_eq!(back, c);
    assert!(matches!(back.set("momentum", "1"), Err(ConfigError::UnknownKey(_))));
    back.batch_size = 0;
    assert!(back.validate().is_err());
    back.batch_size = 1;
    back.lr = 0.0;
    assert!(back.validate().is_err());
}

#[test]
fn adam_zero_gradient_keeps_params_and_decays_moments() {
    let mut p = Tensor::from_fn([5], |i| i as f64 - 2.0);
    let before = p.clone();
    let mut state = AdamState::new(&[&p]);
    state.m[0] = Tensor::full([5], 0.5);
    state.v[0] = Tensor::full([5], 0.25);
    let g = Tensor::zeros([5]);
    for _ in 0..3 {
        let m_prev = state.m[0].data()[0];
        let v_prev = state.v[0].data()[0];
        let mut p2 = p.clone();
        adam_step(&mut [&mut p2], &[&g], &[0.0], &mut state, 1e-3);
        assert_eq!(state.m[0].data()[0], 0.9 * m_prev);
        assert_eq!(state.v[0].data()[0], 0.999 * v_prev);
        // Nonzero moments still move the parameter; from a zero state nothing does.
        assert_ne!(p2, p);
    }
    let mut fresh = AdamState::new(&[&p]);
    for _ in 0..5 {
        adam_step(&mut [&mut p], &[&g], &[0.0], &mut fresh, 1e-3);
    }
    assert_eq!(p, before);
    assert!(fresh.m[0].data().iter().chain(fresh.v[0].data()).all(|&v| v == 0.0));
}

#[test]
fn adam_first_step_matches_hand_computation() {
    let g = [0.3f64, -2.0, 1e-3];
    let theta = [1.0f64, 0.5, -0.25];
    let lr = 1e-2;
    let mut p = Tensor::new([3], theta.to_vec()).unwrap();
    let grad = Tensor::new([3], g.to_vec()).unwrap();
    let mut state = AdamState::new(&[&p]);
    adam_step(&mut [&mut p], &[&grad], &[0.0], &mut state, lr);
    for i in 0..3 {
        let m = 0.1 * g[i];
        let v = 0.001 * g[i] * g[i];
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let want = theta[i] - lr * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.data()[i] - want).abs() < 1e-14, "{i}: {} vs {want}", p.data()[i]);
        // The first step has magnitude lr regardless of the gradient scale.
        assert!(((theta[i] - p.data()[i]).abs() - lr).abs() < 1e-5 * lr);
    }
}

#[test]
fn adam_l2_term_enters_the_gradient() {
    let mut a = Tensor::from_fn([4], |i| 0.5 + i as f64);
    let mut b = a.clone();
    let g = Tensor::full([4], 0.1);
    let g_l2 = a.zip_map(&g, |t, g| g + 0.3 * t).unwrap();
    let mut sa = AdamState::new(&[&a]);
    let mut sb = AdamState::new(&[&b]);
    for _ in 0..3 {
        adam_step(&mut [&mut a], &[&g], &[0.3], &mut sa, 1e-2);
        let gb = b.zip_map(&g, |t, g| g + 0.3 * t).unwrap();
        adam_step(&mut [&mut b], &[&gb], &[0.0], &mut sb, 1e-2);
    }
    assert_eq!(a, b);
    assert_ne!(g_l2, g);
}

#[test]
fn adam_constant_gradient_step_tends_to_lr() {
    let lr = 1e-3;
    let mut p = Tensor::from_fn([3], |i| i as f64);
    let g = Tensor::new([3], vec![0.7, -3.0, 0.02]).unwrap();
    let mut state = AdamState::new(&[&p]);
    let mut prev = p.clone();
    for t in 1..=5000 {
        adam_step(&mut [&mut p], &[&g], &[0.0], &mut state, lr);
        if t % 1000 == 0 {
            for i in 0..3 {
                let step = (p.data()[i] - prev.data()[i]).abs();
                assert!((step - lr).abs() < 1e-6 * lr, "t {t}: step {step}");
            }
        }
        prev = p.clone();
    }
}

#[test]
fn loss_descends_on_a_frozen_batch() {
    let pairs = toy_pairs(4, 2);
    let refs: Vec<&PairSample> = pairs.iter().collect();
    let mut t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 4)).unwrap();
    let losses: Vec<f64> = (0..11).map(|_| t.step(&refs, 1e-3).unwrap().loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(rises <= 2, "{losses:?}");
    assert!(losses[10] < losses[0], "{losses:?}");
}

#[test]
fn one_epoch_smoke_run_lowers_the_loss() {
    let pairs = toy_pairs(8, 3);
    let mut t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 2)).unwrap();
    let before = dataset_loss(&t, &pairs);
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        per_epoch: true,
    };
    let log = train(&mut t, &pairs, Some(&pairs[..2]), Some(&out)).unwrap();
    let after = dataset_loss(&t, &pairs);
    assert!(after < before, "{before} -> {after}");
    assert_eq!(log.len(), 4);
    assert!(log.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));
    let val = log.last().unwrap().val_repeatability.unwrap();
    assert!((0.0..=100.0).contains(&val));

    let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[0], TrainLogEntry::header(&t.model.msip_window_sizes));
    assert!(lines[0].starts_with("epoch\tstep\tlr\tloss"));
    assert_eq!(lines[1].split('\t').count(), lines[0].split('\t').count());
    assert!(dir.path().join(epoch_checkpoint_name(1)).exists());
    let ck = read_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
    assert_eq!(ck.weights, t.weights);
    assert_eq!(ck.meta("train.epoch"), Some("1"));
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let pairs = toy_pairs(4, 4);
    let run = || {
        let mut t = Trainer::new(KeyNetConfig::tiny(), toy_config(2, 3)).unwrap();
        train(&mut t, &pairs, None, None).unwrap();
        t.checkpoint().to_bytes().unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn resumed_run_equals_straight_run() {
    let pairs = toy_pairs(5, 5);
    let mut straight = Trainer::new(KeyNetConfig::tiny(), toy_config(3, 2)).unwrap();
    train(&mut straight, &pairs, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        per_epoch: true,
    };
    let mut first = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 2)).unwrap();
    train(&mut first, &pairs, None, Some(&out)).unwrap();
    let mut resumed = resume_from(&dir.path().join(epoch_checkpoint_name(1)), toy_config(3, 2)).unwrap();
    assert_eq!(resumed, first.clone().with_config(toy_config(3, 2)));
    train(&mut resumed, &pairs, None, Some(&out)).unwrap();
    assert_eq!(resumed, straight);
    assert_eq!(
        resumed.checkpoint().to_bytes().unwrap(),
        straight.checkpoint().to_bytes().unwrap()
    );
    let text = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 3);
}

#[test]
fn empty_dataset_is_rejected() {
    let mut t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 2)).unwrap();
    assert!(matches!(train(&mut t, &[], None, None), Err(TrainError::EmptyDataset)));
    let pairs = toy_pairs(1, 6);
    assert!(matches!(
        train(&mut t, &pairs, Some(&[]), None),
        Err(TrainError::EmptyValidation)
    ));
}

#[test]
fn nan_loss_aborts_with_a_dump() {
    let mut pairs = toy_pairs(4, 7);
    pairs[2].image_b.data_mut()[100] = f32::NAN;
    let dir = tempfile::tempdir().unwrap();
    let out = RunOutput {
        dir: dir.path().to_path_buf(),
        per_epoch: false,
    };
    let mut t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 1)).unwrap();
    let order = t.epoch_order(0, 4);
    let bad_batch = order.iter().position(|&i| i == 2).unwrap();
    match train(&mut t, &pairs, None, Some(&out)) {
        Err(TrainError::NonFinite {
            epoch,
            batch,
            pairs: ids,
            dump,
            ..
        }) => {
            assert_eq!((epoch, batch, ids), (1, bad_batch, vec![2]));
            let index = fs::read_to_string(Path::new(&dump).join("pair_indices.txt")).unwrap();
            assert_eq!(index, "2\n");
        }
        other => panic!("expected a non-finite abort, got {other:?}"),
    }
}

#[test]
fn validation_scores_are_percentages() {
    let pairs = toy_pairs(3, 8);
    let t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 2)).unwrap();
    let random_weights = t.validate(&pairs).unwrap();
    assert!((0.0..=100.0).contains(&random_weights), "{random_weights}");
    let uniform = evaluate_pairs(
        &RandomDetector { seed: 3, count: 100 },
        &pairs,
        &EvalConfig::default(),
    )
    .unwrap()
    .mean_repeatability;
    assert!((0.0..=100.0).contains(&uniform));
    assert!(matches!(t.validate(&[]), Err(TrainError::EmptyValidation)));
}

#[test]
fn epoch_order_depends_on_seed_and_epoch_only() {
    let t = Trainer::new(KeyNetConfig::tiny(), toy_config(1, 2)).unwrap();
    let a = t.epoch_order(3, 20);
    assert_eq!(a, t.epoch_order(3, 20));
    assert_ne!(a, t.epoch_order(4, 20));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
}
