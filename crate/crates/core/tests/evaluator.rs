use gabril::envsim::{collect, intervene, render, EnvConfig, ACTIONS};
use gabril::evaluator::*;
use gabril::model::{ModelConfig, PolicyModel};
use gabril::Error;
use proptest::prelude::*;

fn env() -> EnvConfig {
    EnvConfig::default()
}

#[test]
fn scripted_expert_is_optimal_in_every_variant() {
    for variant in [
        EvalVariant::Normal,
        EvalVariant::ConfoundedTrain,
        EvalVariant::ConfoundedShifted,
    ] {
        let r = rollout(&ScriptedExpertPolicy::new(env().render), &env(), variant, 100, 3).unwrap();
        assert_eq!(r.mean, 64.0, "{variant}");
        assert_eq!(r.std, 0.0);
        assert_eq!(r.episodes, 100);
    }
}

#[test]
fn uniform_random_policy_scores_a_quarter() {
    let r = rollout_sampled(&UniformPolicy, &env(), EvalVariant::ConfoundedTrain, 100, 8).unwrap();
    assert!((r.mean - 16.0).abs() < 3.0, "mean {}", r.mean);
}

#[test]
fn rollout_is_deterministic() {
    let m = PolicyModel::init(ModelConfig::default(), 1).unwrap();
    let a = rollout(&m, &env(), EvalVariant::ConfoundedShifted, 5, 42).unwrap();
    let b = rollout(&m, &env(), EvalVariant::ConfoundedShifted, 5, 42).unwrap();
    assert_eq!(a, b);
    assert!(a.std >= 0.0);
    assert!(rollout(&m, &env(), EvalVariant::Normal, 0, 1).is_err());
}

#[test]
fn rollout_never_draws_gaze() {
    let before = gaze_draws();
    collect(&env(), 1, 0).unwrap();
    let after_collect = gaze_draws();
    assert_eq!(after_collect - before, 64);
    let m = PolicyModel::init(ModelConfig::default(), 1).unwrap();
    for variant in [
        EvalVariant::Normal,
        EvalVariant::ConfoundedTrain,
        EvalVariant::ConfoundedShifted,
    ] {
        rollout(&m, &env(), variant, 3, 5).unwrap();
    }
    intervention_sensitivity(&m, &env(), 3, 5).unwrap();
    assert_eq!(gaze_draws(), after_collect);
}

#[test]
fn tv_distance_formula() {
    assert_eq!(tv_distance(&[0.5, 0.5, 0.0, 0.0], &[0.0, 0.0, 0.5, 0.5]), 1.0);
    assert_eq!(tv_distance(&[0.25; 4], &[0.25; 4]), 0.0);
    assert!((tv_distance(&[0.7, 0.1, 0.1, 0.1], &[0.4, 0.2, 0.2, 0.2]) - 0.3).abs() < 1e-15);
}

#[test]
fn indicator_masked_policy_is_insensitive() {
    let m = PolicyModel::init(ModelConfig::default(), 2).unwrap();
    let masked = IndicatorMasked {
        inner: m,
        render: env().render,
    };
    let r = intervention_sensitivity(&masked, &env(), 20, 9).unwrap();
    assert!(r.distances.iter().flatten().all(|&d| d == 0.0));
    assert_eq!(r.max, 0.0);
}

#[test]
fn indicator_reading_policy_is_maximally_sensitive() {
    let cheat = IndicatorPolicy { render: env().render };
    let r = intervention_sensitivity(&cheat, &env(), 20, 9).unwrap();
    assert_eq!(r.mean, 1.0);
    assert_eq!(r.distances.len(), 20);
    assert!(r.distances.iter().all(|d| d.len() == ACTIONS * (ACTIONS - 1) / 2));
    let copycat = rollout(&cheat, &env(), EvalVariant::ConfoundedTrain, 50, 1).unwrap();
    let expert = rollout(
        &ScriptedExpertPolicy::new(env().render),
        &env(),
        EvalVariant::ConfoundedTrain,
        50,
        1,
    )
    .unwrap();
    assert!(copycat.mean < expert.mean / 2.0);
}

#[test]
fn sensitivity_report_invariants() {
    let m = PolicyModel::init(ModelConfig::default(), 3).unwrap();
    let r = intervention_sensitivity(&m, &env(), 10, 4).unwrap();
    assert!(r.distances.iter().flatten().all(|d| (0.0..=1.0).contains(d)));
    assert!(r.mean <= r.max);
    assert_eq!((r.probes, r.seed), (10, 4));
}

#[test]
fn noisy_probe_renders_differ_only_in_indicator_patch() {
    let cfg = env();
    for s in probe_states(&cfg, 10, 1).unwrap() {
        let base = render(&s, &cfg.render);
        for t in 0..ACTIONS {
            let img = render(&intervene(&s, t).unwrap(), &cfg.render);
            for (i, (a, b)) in base.data().iter().zip(img.data()).enumerate() {
                if a != b {
                    assert!(cfg.render.indicator.contains(i / 40, i % 40));
                }
            }
        }
    }
}

#[test]
fn abc_examples() {
    assert!((100.0 * abc(1576.2, 1395.1).unwrap() - 12.98).abs() < 0.01);
    assert_eq!(abc(5.0, 5.0).unwrap(), 0.0);
    assert_eq!(abc(10.0, 5.0).unwrap(), 1.0);
    assert!(matches!(abc(3.0, 0.0), Err(Error::UndefinedMetric(_))));
}

proptest! {
    #[test]
    fn abc_is_antisymmetric_about_the_baseline(x in -1e4f64..1e4, b in prop_oneof![-1e4f64..-1e-3, 1e-3f64..1e4]) {
        let lhs = abc(x, b).unwrap();
        let rhs = -abc(2.0 * b - x, b).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }
}

fn run(method: &str, env: &str, score: f64) -> RunScore {
    RunScore {
        method: method.into(),
        environment: env.into(),
        score,
    }
}

#[test]
fn compare_equal_scores_give_zero() {
    let runs = vec![
        run("bc", "a", 4.0),
        run("m", "a", 4.0),
        run("bc", "b", 9.0),
        run("m", "b", 9.0),
    ];
    let c = compare(&runs).unwrap();
    assert_eq!(c.methods.len(), 1);
    assert_eq!((c.methods[0].mean_percent, c.methods[0].median_percent), (0.0, 0.0));
}

#[test]
fn compare_mean_and_median() {
    let runs = vec![
        run("bc", "a", 100.0),
        run("bc", "b", 100.0),
        run("bc", "c", 100.0),
        run("m", "a", 110.0),
        run("m", "b", 120.0),
        run("m", "c", 160.0),
    ];
    let c = compare(&runs).unwrap();
    assert!((c.methods[0].mean_percent - 30.0).abs() < 1e-12);
    assert!((c.methods[0].median_percent - 20.0).abs() < 1e-12);
    let text = c.to_text();
    assert!(text.contains("Mean ABC") && text.contains("30.00") && text.contains("20.00"));
}

#[test]
fn compare_averages_repeated_runs() {
    let runs = vec![run("bc", "a", 10.0), run("bc", "a", 30.0), run("m", "a", 30.0)];
    assert!((compare(&runs).unwrap().methods[0].mean_percent - 50.0).abs() < 1e-12);
}

#[test]
fn compare_without_baseline_is_config_error() {
    assert!(matches!(compare(&[run("m", "a", 1.0)]), Err(Error::Config(_))));
    let missing_env = vec![run("bc", "a", 1.0), run("m", "b", 1.0)];
    assert!(matches!(compare(&missing_env), Err(Error::Config(_))));
}
