mod common;

use common::{tiny_config, tiny_set};
use mcgan::checkpoint::Checkpoint;
use mcgan::trainer::{augment, derangement, lr_schedule, AugmentFlags, LogRecord, RunOptions, TrainConfig, TrainState};
use mcgan_nn::Kind;
use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn learning_rate_schedule() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_schedule(0, &cfg), 0.0002);
    assert_eq!(lr_schedule(199, &cfg), 0.0002);
    assert_eq!(lr_schedule(200, &cfg), 0.0001);
    assert_eq!(lr_schedule(400, &cfg), 0.00005);
}

#[test]
fn derangements() {
    let ids = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    assert_eq!(derangement(&ids(&["a", "b"])).unwrap(), vec![1, 0]);
    let many: Vec<String> = (0..32).map(|i| format!("c{i}")).collect();
    let p = derangement(&many).unwrap();
    assert!(p.iter().enumerate().all(|(i, &j)| i != j && many[i] != many[j]));
    // Repeated ids are skipped so the pair differs by identity, not only by index.
    let rep = ids(&["a", "a", "b", "c"]);
    let p = derangement(&rep).unwrap();
    assert!(p.iter().enumerate().all(|(i, &j)| rep[i] != rep[j]));
    assert!(derangement(&ids(&["a"])).is_err());
}

fn square_scene(size: usize, half: usize) -> (Array3<f32>, Array3<f32>) {
    let c = size / 2;
    let mut image = Array3::from_elem((3, size, size), -1.0f32);
    let mut mask = Array3::zeros((1, size, size));
    image.slice_mut(s![.., c - half..c + half, c - half..c + half]).fill(1.0);
    mask.slice_mut(s![.., c - half..c + half, c - half..c + half]).fill(1.0);
    (image, mask)
}

#[test]
fn augmentation_properties() {
    let (image, mask) = square_scene(64, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (i0, m0) = augment(&image, &mask, &mut rng, AugmentFlags::OFF);
    assert_eq!((i0, m0), (image.clone(), mask.clone()));

    // Flip-only: either unchanged or mirrored, and mirroring twice is the identity.
    let mut asym = image.clone();
    asym[[0, 3, 5]] = 0.25;
    let flip = AugmentFlags {
        flip: true,
        zoom: false,
        crop: false,
    };
    let mirror = |a: &Array3<f32>| a.slice(s![.., .., ..;-1]).to_owned();
    let mut flipped = 0;
    for seed in 0..16 {
        let (a, _) = augment(&asym, &mask, &mut ChaCha8Rng::seed_from_u64(seed), flip);
        if a != asym {
            assert_eq!(a, mirror(&asym));
            assert_eq!(mirror(&a), asym);
            flipped += 1;
        }
    }
    assert!(flipped > 0 && flipped < 16);

    // Image content and mask move together and scale by the same factor.
    let area0 = mask.sum() as f64;
    for seed in 0..20 {
        let (a, m) = augment(&image, &mask, &mut ChaCha8Rng::seed_from_u64(seed), AugmentFlags::default());
        let mask_area = m.sum() as f64;
        let image_area = a.slice(s![0, .., ..]).iter().filter(|&&v| v > 0.0).count() as f64;
        assert!((mask_area - image_area).abs() <= 0.05 * area0, "seed {seed}: {mask_area} vs {image_area}");
        let factor = mask_area / area0;
        assert!((0.9..=1.15f64.powi(2) * 1.1).contains(&factor), "seed {seed}: factor {factor}");
        assert!(m.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn tuples_are_deranged_and_reproducible() {
    let set = tiny_set(12, 3);
    let state = TrainState::new(tiny_config(0)).unwrap();
    let idx: Vec<usize> = (0..4).collect();
    let (b1, z1, e1) = state.make_tuples(&set, &idx, &mut state.step_rng(5)).unwrap();
    let (b2, z2, e2) = state.make_tuples(&set, &idx, &mut state.step_rng(5)).unwrap();
    b1.validate().unwrap();
    assert_eq!((&b1.x, &b1.s, &b1.t, &b1.b), (&b2.x, &b2.s, &b2.t, &b2.b));
    assert_eq!((z1, e1), (z2, e2));
    assert_eq!(b1.len(), 4);
    let (pair, _, _) = state.make_tuples(&set, &[0, 1], &mut state.step_rng(0)).unwrap();
    assert_eq!(pair.text_perm, vec![1, 0]);
    assert_eq!(pair.mask_perm, vec![1, 0]);
    assert!(state.make_tuples(&set, &[0], &mut state.step_rng(0)).is_err());
}

#[test]
fn zero_learning_rate_leaves_weights() {
    let set = tiny_set(8, 4);
    let mut state = TrainState::new(tiny_config(1)).unwrap();
    let before = state.clone();
    let (batch, z, eps) = state.make_tuples(&set, &[0, 1, 2, 3], &mut state.step_rng(0)).unwrap();
    let losses = state.train_step(&batch, &z, &eps, 0.0).unwrap();
    assert!(losses.g.is_finite() && losses.d1.is_finite());
    for (old, new) in [
        (&before.generator.params, &state.generator.params),
        (&before.discriminator.params, &state.discriminator.params),
    ] {
        for (name, e) in old.iter() {
            if e.kind == Kind::Weight {
                assert_eq!(e.value, new.entry(name).unwrap().value, "{name}");
            }
        }
    }
}

#[test]
fn identical_runs_have_identical_trajectories() {
    let set = tiny_set(8, 5);
    let run = || {
        let mut s = TrainState::new(tiny_config(2)).unwrap();
        let opts = RunOptions {
            out_dir: None,
            stop_at_step: Some(2),
        };
        let log = s.run(&set, &opts, |_| Ok(())).unwrap();
        (s, log)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert!(a.generator.params.bit_equal(&b.generator.params));
    assert!(a.discriminator.params.bit_equal(&b.discriminator.params));
    let strip = |l: &[LogRecord]| l.iter().map(|r| (r.step, r.losses)).collect::<Vec<_>>();
    assert_eq!(strip(&la), strip(&lb));
}

#[test]
fn resume_is_exact() {
    let set = tiny_set(10, 6);
    let cfg = TrainConfig {
        epochs: 3,
        ..tiny_config(3)
    };
    let mut straight = TrainState::new(cfg.clone()).unwrap();
    straight.run(&set, &RunOptions::default(), |_| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut first = TrainState::new(cfg.clone()).unwrap();
    let opts = RunOptions {
        out_dir: None,
        stop_at_step: Some(3),
    };
    first.run(&set, &opts, |_| Ok(())).unwrap();
    assert_eq!((first.step, first.epoch, first.batch_in_epoch), (3, 1, 1));
    first.checkpoint().unwrap().save(dir.path()).unwrap();
    let mut resumed = TrainState::from_checkpoint(&Checkpoint::load(dir.path()).unwrap(), None).unwrap();
    resumed.run(&set, &RunOptions::default(), |_| Ok(())).unwrap();

    assert_eq!(resumed.step, straight.step);
    assert!(resumed.generator.params.bit_equal(&straight.generator.params));
    assert!(resumed.discriminator.params.bit_equal(&straight.discriminator.params));
}

#[test]
fn short_run_logs_finite_losses() {
    let set = tiny_set(16, 7);
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 50,
        checkpoint_every: 25,
        ..tiny_config(4)
    };
    let mut state = TrainState::new(cfg).unwrap();
    let mut epochs_seen = 0;
    let log = state
        .run(
            &set,
            &RunOptions {
                out_dir: Some(dir.path().to_path_buf()),
                stop_at_step: Some(200),
            },
            |_| {
                epochs_seen += 1;
                Ok(())
            },
        )
        .unwrap();
    assert_eq!(log.len(), 200);
    assert_eq!(epochs_seen, 50);
    let text = std::fs::read_to_string(dir.path().join("train_log.ndjson")).unwrap();
    let lines: Vec<LogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 200);
    for r in &lines {
        let l = r.losses;
        assert!([l.d1, l.d2, l.d3, l.g, l.kl, l.l1_bg].iter().all(|v| v.is_finite()));
    }
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "lr", "L_D1", "L_D2", "L_D3", "L_G", "KL", "L1_bg", "wallclock"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    assert!(dir.path().join("checkpoints/epoch-00025/manifest.json").exists());
    assert!(dir.path().join("checkpoints/final/tensors.bin").exists());
}

#[test]
fn config_validation_and_loading() {
    assert!(TrainConfig {
        batch: 1,
        ..TrainConfig::toy()
    }
    .validate()
    .is_err());
    assert!(TrainConfig {
        lr_decay_every: 0,
        ..TrainConfig::toy()
    }
    .validate()
    .is_err());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("cfg.json");
    std::fs::write(&p, r#"{"batch": 8, "epochs": 3}"#).unwrap();
    let c = TrainConfig::load(&p).unwrap();
    assert_eq!((c.batch, c.epochs, c.lr0), (8, 3, 2e-4));
    assert!(TrainConfig::load(&dir.path().join("none.json")).is_err());
}
