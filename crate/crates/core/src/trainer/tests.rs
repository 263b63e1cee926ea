use super::*;

fn tiny_config() -> Config {
    Config {
        image_width: 32,
        batch_size: 4,
        queue_capacity: 64,
        proj_dim: 16,
        block_width_px: 8,
        epochs: 2,
        seed: 11,
        ..Config::default()
    }
}

fn tiny_batch(config: &Config, seed: u64) -> ImageBatch {
    let (b, h, w) = (config.batch_size, config.image_height, config.image_width);
    let mut rng = seeded_rng(seed, "pixels");
    let px = (0..b * 3 * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect();
    ImageBatch::new(px, b, h, w, (0..b as u64).collect()).unwrap()
}

#[test]
fn first_step_is_reconstruction_only_then_contrast_starts() {
    let config = tiny_config();
    let mut state = TrainState::new(&config, 10).unwrap();
    let batch = tiny_batch(&config, 1);
    let r0 = train_step(&mut state, &batch).unwrap();
    assert!(!r0.contrastive_active);
    assert_eq!(r0.rcl_total, 0.0);
    assert_eq!(r0.total, r0.mim);
    let r1 = train_step(&mut state, &batch).unwrap();
    assert!(r1.contrastive_active);
    assert!(r1.rcl_total > 0.0);
    let composed = r1.mim + config.beta * (r1.hierarchical + r1.f2s + r1.s2w);
    assert!((r1.total - composed).abs() < 1e-9);
    assert_eq!(r1.step, 1);
}

#[test]
fn zero_beta_with_frozen_queues_trains_only_reconstruction() {
    let config = Config {
        beta: 0.0,
        ..tiny_config()
    };
    let mut state = TrainState::new(&config, 10).unwrap();
    state.freeze_queues = true;
    let batch = tiny_batch(&config, 2);
    let (report, grads) = step_gradients(&state, &batch).unwrap();
    assert!(!report.contrastive_active);
    for (i, name) in state.online.names().iter().enumerate() {
        if name.starts_with("predictor.") || name.starts_with("projector.") {
            assert!(grads[i].iter().all(|v| *v == 0.0), "{name}");
        }
    }
    let first = state.online.position("encoder.conv0.weight").unwrap();
    assert!(grads[first].iter().any(|v| *v != 0.0));
    train_step(&mut state, &batch).unwrap();
    assert!(state.queues.queues.iter().all(|q| q.is_empty()));
}

#[test]
fn zero_beta_after_warm_up_gives_predictors_zero_gradient() {
    let config = Config {
        beta: 0.0,
        ..tiny_config()
    };
    let mut state = TrainState::new(&config, 10).unwrap();
    let batch = tiny_batch(&config, 3);
    train_step(&mut state, &batch).unwrap();
    state.freeze_queues = true;
    let (report, grads) = step_gradients(&state, &batch).unwrap();
    assert!(report.contrastive_active);
    for (i, name) in state.online.names().iter().enumerate() {
        if name.starts_with("predictor.") {
            assert!(grads[i].iter().all(|v| *v == 0.0), "{name}");
        }
    }
}

#[test]
fn unit_momentum_freezes_the_momentum_branch() {
    let config = Config {
        momentum: 1.0,
        ..tiny_config()
    };
    let mut state = TrainState::new(&config, 10).unwrap();
    let (m0, o0) = (state.momentum.clone(), state.online.clone());
    let batch = tiny_batch(&config, 4);
    train_step(&mut state, &batch).unwrap();
    train_step(&mut state, &batch).unwrap();
    assert_eq!(state.momentum, m0);
    assert_ne!(state.online, o0);
}

#[test]
fn momentum_follows_the_ema_recurrence() {
    let config = Config {
        momentum: 0.9,
        ..tiny_config()
    };
    let mut state = TrainState::new(&config, 10).unwrap();
    let batch = tiny_batch(&config, 5);
    train_step(&mut state, &batch).unwrap();
    let before = state.momentum.clone();
    train_step(&mut state, &batch).unwrap();
    for (i, name) in before.names().iter().enumerate() {
        let online = state.online.get(name).unwrap();
        for ((after, prev), o) in state.momentum.values(i).iter().zip(before.values(i)).zip(online) {
            let expect = 0.9 * f64::from(*prev) + 0.1 * f64::from(*o);
            assert!((f64::from(*after) - expect).abs() < 1e-7, "{name}");
        }
    }
}

#[test]
fn same_seed_gives_identical_reports() {
    let config = tiny_config();
    let batch = tiny_batch(&config, 6);
    let run = || {
        let mut state = TrainState::new(&config, 10).unwrap();
        (0..4)
            .map(|_| train_step(&mut state, &batch).unwrap())
            .collect::<Vec<_>>()
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
    }
}

#[test]
fn manifest_round_trip_resumes_identically() {
    let config = tiny_config();
    let batch = tiny_batch(&config, 7);
    let mut state = TrainState::new(&config, 10).unwrap();
    train_step(&mut state, &batch).unwrap();
    train_step(&mut state, &batch).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    save_checkpoint(&state.to_manifest(), &path).unwrap();
    let mut resumed = TrainState::from_manifest(&load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.total_steps, 10);
    let a = train_step(&mut state, &batch).unwrap();
    let b = train_step(&mut resumed, &batch).unwrap();
    assert_eq!(a, b);
    assert_eq!(state.online, resumed.online);
}

#[test]
fn batch_size_must_divide_into_groups() {
    let config = tiny_config();
    let mut state = TrainState::new(&config, 10).unwrap();
    let odd = Config {
        batch_size: 3,
        m_group: 1,
        ..config.clone()
    };
    let batch = tiny_batch(&odd, 8);
    assert!(matches!(train_step(&mut state, &batch), Err(Error::Validation { .. })));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(learning_rate(1e-3, 0, 100), 1e-3);
    assert!((learning_rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    assert!(learning_rate(1e-3, 100, 100).abs() < 1e-18);
}

fn samples(n: usize, config: &Config) -> Vec<WordImageSample> {
    let mut rng = seeded_rng(3, "samples");
    let (h, w) = (config.image_height, config.image_width);
    (0..n)
        .map(|id| WordImageSample {
            id: id as u64,
            image: (0..3 * h * w).map(|_| rng.uniform(0.0, 1.0) as f32).collect(),
            height: h,
            width: w,
            word: "ab".into(),
            char_boxes: vec![(0, 5), (9, 14)],
        })
        .collect()
}

#[test]
fn loop_logs_every_step_and_resumes_at_the_right_index() {
    let config = tiny_config();
    let data = samples(18, &config);
    let full_dir = tempfile::tempdir().unwrap();
    let full = train_loop(&config, &data, full_dir.path(), None).unwrap();
    assert_eq!(full.reports.len(), 8);
    assert_eq!(full.checkpoints.len(), 2);
    let text = fs::read_to_string(&full.metrics).unwrap();
    assert_eq!(text.lines().count(), 8);

    // Interrupted copy: the epoch-1 checkpoint plus the complete metrics file,
    // which resuming must cut back to the checkpoint's step.
    let part_dir = tempfile::tempdir().unwrap();
    let ckpt = part_dir.path().join("resume.ckpt");
    fs::copy(checkpoint_path(full_dir.path(), 1), &ckpt).unwrap();
    fs::copy(&full.metrics, part_dir.path().join(METRICS_FILE)).unwrap();
    let resumed = train_loop(&config, &data, part_dir.path(), Some(&ckpt)).unwrap();
    assert_eq!(resumed.reports.len(), 4);
    assert_eq!(resumed.reports.first().unwrap().step, 4);
    assert_eq!(resumed.reports, full.reports[4..]);
    let resumed_text = fs::read_to_string(&resumed.metrics).unwrap();
    assert_eq!(resumed_text, text);
}

#[test]
fn resume_with_other_config_is_rejected() {
    let config = tiny_config();
    let data = samples(8, &config);
    let dir = tempfile::tempdir().unwrap();
    train_loop(
        &Config {
            epochs: 1,
            ..config.clone()
        },
        &data,
        dir.path(),
        None,
    )
    .unwrap();
    let other = Config { alpha: 0.5, ..config };
    let err = train_loop(&other, &data, dir.path(), Some(&checkpoint_path(dir.path(), 1))).unwrap_err();
    assert!(matches!(err, Error::Compatibility(_)));
}
