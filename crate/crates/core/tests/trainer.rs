use gabril::envsim::{collect, EnvConfig};
use gabril::gaze::MaskParams;
use gabril::model::ModelConfig;
use gabril::trainer::*;
use gabril::Error;

fn dataset(episodes: usize, length: usize, seed: u64) -> GazeDataset {
    let env = EnvConfig {
        episode_length: length,
        ..EnvConfig::default()
    };
    let records = collect(&env, episodes, seed).unwrap();
    GazeDataset::from_records(&records, &MaskParams::TRIGGER_WORLD, TargetNorm::Max).unwrap()
}

fn quick(method: Method, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        method,
        batch_size: 16,
        ..TrainConfig::default()
    }
}

#[test]
fn gaze_fraction_keeps_exact_counts() {
    let ds = dataset(16, 64, 1);
    let n = ds.gaze_frames();
    assert_eq!(n, 1024);

    assert_eq!(apply_gaze_fraction(&ds, 1.0, 3).unwrap(), ds);
    assert_eq!(apply_gaze_fraction(&ds, 0.0, 3).unwrap().gaze_frames(), 0);

    let a = apply_gaze_fraction(&ds, 0.2, 3).unwrap();
    assert_eq!(a.gaze_frames(), 205);
    assert_eq!(a, apply_gaze_fraction(&ds, 0.2, 3).unwrap());
    assert_ne!(a, apply_gaze_fraction(&ds, 0.2, 4).unwrap());
    for (x, y) in a.frames.iter().zip(&ds.frames) {
        assert_eq!((&x.observation, x.action), (&y.observation, y.action));
        if x.mask.has_gaze() {
            assert_eq!(x.mask, y.mask);
        }
    }
    assert!(matches!(apply_gaze_fraction(&ds, 1.5, 0), Err(Error::Config(_))));
}

#[test]
fn gaze_fraction_of_a_thousand() {
    let mut ds = dataset(16, 64, 2);
    ds.frames.truncate(1000);
    assert_eq!(apply_gaze_fraction(&ds, 0.2, 9).unwrap().gaze_frames(), 200);
}

#[test]
fn overfits_a_tiny_dataset() {
    let ds = dataset(1, 32, 5);
    assert_eq!(ds.len(), 32);
    let cfg = TrainConfig {
        batch_size: 32,
        ..quick(Method::Bc, 200)
    };
    let out = train(&cfg, &ds).unwrap();
    let last = out.log.steps.last().unwrap();
    assert!(last.l_bc < 0.01, "final L_BC {}", last.l_bc);
    assert_eq!(out.log.steps.len(), 200);
    assert!(last.l_gp.is_none());
}

#[test]
fn identical_runs_give_identical_logs() {
    let ds = dataset(4, 32, 6);
    let cfg = quick(Method::Gabril, 2);
    let a = train(&cfg, &ds).unwrap();
    let b = train(&cfg, &ds).unwrap();
    assert_eq!(
        serde_json::to_string(&a.log).unwrap(),
        serde_json::to_string(&b.log).unwrap()
    );
    assert_eq!(a.model, b.model);
    let other = train(&TrainConfig { seed: 1, ..cfg }, &ds).unwrap();
    assert_ne!(a.log, other.log);
}

#[test]
fn lambda_zero_matches_plain_bc() {
    let ds = dataset(4, 32, 7);
    let bc = train(&quick(Method::Bc, 2), &ds).unwrap();
    let zero = train(
        &TrainConfig {
            lambda: 0.0,
            ..quick(Method::Gabril, 2)
        },
        &ds,
    )
    .unwrap();
    assert_eq!(bc.model, zero.model);
    let bc_totals: Vec<u64> = bc.log.l_total().iter().map(|v| v.to_bits()).collect();
    let zero_totals: Vec<u64> = zero.log.l_total().iter().map(|v| v.to_bits()).collect();
    assert_eq!(bc_totals, zero_totals);
}

#[test]
fn zero_gaze_fraction_matches_plain_bc() {
    let ds = dataset(4, 32, 8);
    let bc = train(&quick(Method::Bc, 2), &ds).unwrap();
    let none = train(
        &TrainConfig {
            gaze_fraction: 0.0,
            ..quick(Method::Gabril, 2)
        },
        &ds,
    )
    .unwrap();
    assert_eq!(bc.model, none.model);
    assert!(none.log.steps.iter().all(|s| s.l_gp == Some(0.0)));
}

/// `(L_GP at step 10, L_GP at the final step)` of a λ=10 run on 2048 frames.
fn gaze_loss_run() -> (f64, f64) {
    static RUN: std::sync::OnceLock<(f64, f64)> = std::sync::OnceLock::new();
    *RUN.get_or_init(|| {
        let ds = dataset(32, 64, 9);
        assert!(ds.len() >= 2000);
        let cfg = TrainConfig {
            lambda: 10.0,
            epochs: 30,
            batch_size: 64,
            ..TrainConfig::default()
        };
        let out = train(&cfg, &ds).unwrap();
        let gp = |i: usize| out.log.steps[i].l_gp.unwrap();
        (gp(9), gp(out.log.steps.len() - 1))
    })
}

#[test]
fn gaze_loss_is_optimized() {
    let (start, end) = gaze_loss_run();
    assert!(end <= 0.6 * start, "L_GP {start} -> {end}");
}

// The target mask carries σ=2 px gaze jitter and the gaze of neighbouring
// frames, neither of which is visible in the current observation. An oracle
// that knows the whole beacon track but not the jitter bottoms out at 0.43×
// the step-10 value, and trained models land at 0.47-0.56×, so this halving
// target sits at the edge of what the head can express.
#[test]
fn gaze_loss_halves() {
    let (start, end) = gaze_loss_run();
    assert!(end <= 0.5 * start, "L_GP {start} -> {end} (ratio {:.3})", end / start);
}

#[test]
fn divergence_reports_the_step() {
    let ds = dataset(2, 32, 10);
    let cfg = TrainConfig {
        learning_rate: 1e300,
        ..quick(Method::Gabril, 20)
    };
    match train(&cfg, &ds) {
        Err(Error::Diverged { step, .. }) => assert!(step >= 2),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.log.steps.len())),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let ds = dataset(1, 8, 11);
    let base = quick(Method::Gabril, 1);
    for cfg in [
        TrainConfig {
            batch_size: 0,
            ..base.clone()
        },
        TrainConfig {
            lambda: -1.0,
            ..base.clone()
        },
        TrainConfig {
            gaze_fraction: 1.2,
            ..base.clone()
        },
        TrainConfig {
            learning_rate: 0.0,
            ..base.clone()
        },
        TrainConfig {
            validation_fraction: 1.0,
            ..base.clone()
        },
        TrainConfig {
            model: ModelConfig {
                temperature: 0.0,
                ..ModelConfig::default()
            },
            ..base.clone()
        },
    ] {
        assert!(matches!(train(&cfg, &ds), Err(Error::Config(_))), "{cfg:?}");
    }
    let empty = GazeDataset {
        frames: vec![],
        episodes: 0,
    };
    assert!(matches!(train(&base, &empty), Err(Error::Config(_))));
}

#[test]
fn progress_lines_are_key_value() {
    let ds = dataset(10, 16, 12);
    let cfg = TrainConfig {
        eval_interval: 1,
        eval_episodes: 2,
        eval_probes: 2,
        ..quick(Method::Gabril, 2)
    };
    let mut sink = Vec::new();
    let out = train_logged(&cfg, &ds, &mut sink).unwrap();
    let text = String::from_utf8(sink).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for line in lines {
        for field in line.split(' ') {
            let (k, v) = field.split_once('=').unwrap();
            assert!(!k.is_empty() && !v.is_empty());
        }
        assert!(line.contains("validation_total=") && line.contains("sensitivity="));
    }
    assert_eq!(out.log.evals.len(), 2);
    assert!((1..=2).contains(&out.best_epoch));
    out.log.check().unwrap();
}
