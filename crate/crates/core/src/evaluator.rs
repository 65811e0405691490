//! Closed-loop scores, intervention sensitivity and the ABC metric.
//!
//! Rollouts step all episodes in lockstep so the policy sees one batch per
//! frame. They never draw expert gaze.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::envsim::{
    self, episode_seed, expert_action, glyph_on, intervene, render, reset, step, EnvConfig, RenderConfig, WorldState,
    ACTIONS, ANCHORS, GLYPH,
};
use crate::error::{config, contract, Error, Result};
use crate::model::PolicyModel;

const SHIFT_SALT: u64 = 0x3a7f_05d2_e1c8_694b;
const PROBE_SALT: u64 = 0x9d20_b6f4_5e13_c7a8;

/// Anything that maps a batch of `[c,h,w]` observations to action distributions.
pub trait Policy {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>>;
}

impl Policy for PolicyModel {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        PolicyModel::action_probs(self, images)
    }
}

/// Plays uniformly at random: every distribution is uniform, and greedy
/// selection is replaced by a seeded draw (see [`rollout_sampled`]).
#[derive(Clone, Copy, Debug, Default)]
pub struct UniformPolicy;

impl Policy for UniformPolicy {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(vec![vec![1.0 / ACTIONS as f64; ACTIONS]; images.len()])
    }
}

fn one_hot(a: usize) -> Vec<f64> {
    let mut v = vec![0.0; ACTIONS];
    v[a] = 1.0;
    v
}

/// Reads the beacon glyph from pixels with a maximum-likelihood decision
/// under the renderer's noise model (Gaussian, clipped to [0, 1]). Every
/// anchor not holding the beacon is explained by its best alternative: empty,
/// or any glyph at distractor intensity.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedExpertPolicy {
    pub render: RenderConfig,
}

impl ScriptedExpertPolicy {
    pub fn new(render: RenderConfig) -> Self {
        ScriptedExpertPolicy { render }
    }

    pub fn classify(&self, img: &Tensor) -> usize {
        let w = img.shape()[img.rank() - 1];
        let half = GLYPH / 2;
        let sigma = self.render.noise_level.max(1e-3);
        let window_ll = |ar: usize, ac: usize, class: Option<usize>, level: f64| {
            let mut ll = 0.0;
            for r in 0..GLYPH {
                for c in 0..GLYPH {
                    let lit = class.is_some_and(|k| glyph_on(k, r, c));
                    let mu = if lit { level } else { 0.0 };
                    ll += pixel_log_likelihood(img.data()[(ar - half + r) * w + ac - half + c], mu, sigma);
                }
            }
            ll
        };
        let mut best = (0, f64::NEG_INFINITY);
        for (ar, ac) in ANCHORS {
            let mut other = window_ll(ar, ac, None, 0.0);
            if self.render.distractor_count > 0 {
                for k in 0..ACTIONS {
                    other = other.max(window_ll(ar, ac, Some(k), self.render.distractor_intensity));
                }
            }
            for k in 0..ACTIONS {
                let gain = window_ll(ar, ac, Some(k), self.render.beacon_intensity) - other;
                if gain > best.1 {
                    best = (k, gain);
                }
            }
        }
        best.0
    }
}

/// Log-density of an observed pixel given its clean value `mu`; values at the
/// clip bounds carry the tail mass.
fn pixel_log_likelihood(v: f64, mu: f64, sigma: f64) -> f64 {
    let tail = |t: f64| {
        (0.5 * libm::erfc(t / (sigma * std::f64::consts::SQRT_2)))
            .max(1e-300)
            .ln()
    };
    if v >= 1.0 {
        tail(1.0 - mu)
    } else if v <= 0.0 {
        tail(mu)
    } else {
        let z = (v - mu) / sigma;
        -0.5 * z * z
    }
}

impl Policy for ScriptedExpertPolicy {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        Ok(images.iter().map(|img| one_hot(self.classify(img))).collect())
    }
}

/// Reads only the previous-action indicator and repeats it.
#[derive(Clone, Copy, Debug)]
pub struct IndicatorPolicy {
    pub render: RenderConfig,
}

impl Policy for IndicatorPolicy {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let ind = self.render.indicator;
        Ok(images
            .iter()
            .map(|img| {
                let w = img.shape()[img.rank() - 1];
                let lit = |r: usize, c: usize| img.data()[(ind.row + r) * w + ind.col + c] > 0.5;
                let best = (0..ACTIONS)
                    .min_by_key(|&a| {
                        (0..ind.size * ind.size)
                            .filter(|i| ind.pattern(a, i / ind.size, i % ind.size) != lit(i / ind.size, i % ind.size))
                            .count()
                    })
                    .expect("four patterns");
                one_hot(best)
            })
            .collect())
    }
}

/// Blanks the indicator patch before delegating.
#[derive(Clone, Copy, Debug)]
pub struct IndicatorMasked<P> {
    pub inner: P,
    pub render: RenderConfig,
}

impl<P: Policy> Policy for IndicatorMasked<P> {
    fn action_probs(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>> {
        let ind = self.render.indicator;
        let masked: Vec<Tensor> = images
            .iter()
            .map(|img| {
                let mut t = (*img).clone();
                let (h, w) = (t.shape()[t.rank() - 2], t.shape()[t.rank() - 1]);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    let (r, c) = ((i / w) % h, i % w);
                    if ind.contains(r, c) {
                        *v = 0.0;
                    }
                }
                t
            })
            .collect();
        self.inner.action_probs(&masked.iter().collect::<Vec<_>>())
    }
}

/// Rendering used during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalVariant {
    /// No indicator.
    Normal,
    /// Indicator shows the agent's own previous action, as during training.
    ConfoundedTrain,
    /// Indicator shows an independent uniformly random action every frame.
    ConfoundedShifted,
}

impl std::str::FromStr for EvalVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(EvalVariant::Normal),
            "confounded-train" => Ok(EvalVariant::ConfoundedTrain),
            "confounded-shifted" => Ok(EvalVariant::ConfoundedShifted),
            _ => config(format!(
                "unknown variant {s:?}, expected normal, confounded-train or confounded-shifted"
            )),
        }
    }
}

impl std::fmt::Display for EvalVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalVariant::Normal => "normal",
            EvalVariant::ConfoundedTrain => "confounded-train",
            EvalVariant::ConfoundedShifted => "confounded-shifted",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mean: f64,
    pub std: f64,
    pub episodes: usize,
    pub variant: EvalVariant,
    pub seed: u64,
    pub returns: Vec<f64>,
}

impl ScoreReport {
    fn from_returns(returns: Vec<f64>, variant: EvalVariant, seed: u64) -> Self {
        let n = returns.len() as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        ScoreReport {
            mean,
            std: var.sqrt(),
            episodes: returns.len(),
            variant,
            seed,
            returns,
        }
    }
}

/// First index of the largest probability.
pub fn greedy(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &p)| if p > best.1 { (i, p) } else { best },
        )
        .0
}

/// Greedy closed-loop rollouts of `n` episodes.
pub fn rollout(policy: &dyn Policy, env: &EnvConfig, variant: EvalVariant, n: usize, seed: u64) -> Result<ScoreReport> {
    run(policy, env, variant, n, seed, |probs, _| greedy(probs))
}

/// Like [`rollout`] but samples each action from the policy's distribution.
pub fn rollout_sampled(
    policy: &dyn Policy,
    env: &EnvConfig,
    variant: EvalVariant,
    n: usize,
    seed: u64,
) -> Result<ScoreReport> {
    run(policy, env, variant, n, seed, |probs, rng| {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        probs.len() - 1
    })
}

fn run(
    policy: &dyn Policy,
    env: &EnvConfig,
    variant: EvalVariant,
    n: usize,
    seed: u64,
    choose: impl Fn(&[f64], &mut ChaCha8Rng) -> usize,
) -> Result<ScoreReport> {
    env.validate()?;
    if n == 0 {
        return config("rollout needs at least one episode");
    }
    let render_cfg = RenderConfig {
        confounded: variant != EvalVariant::Normal,
        ..env.render
    };
    let seeds: Vec<u64> = (0..n as u64).map(|e| episode_seed(seed, e)).collect();
    let mut states: Vec<WorldState> = seeds.iter().map(|&s| reset(s, env)).collect();
    let mut rngs: Vec<ChaCha8Rng> = seeds
        .iter()
        .map(|&s| ChaCha8Rng::seed_from_u64(s ^ SHIFT_SALT))
        .collect();
    let mut returns = vec![0.0; n];
    let mut live: Vec<usize> = (0..n).collect();
    while !live.is_empty() {
        let images = live
            .iter()
            .map(|&e| {
                let shown = match variant {
                    EvalVariant::ConfoundedShifted => intervene(&states[e], rngs[e].random_range(0..ACTIONS))?,
                    _ => states[e].clone(),
                };
                Ok(render(&shown, &render_cfg))
            })
            .collect::<Result<Vec<_>>>()?;
        let probs = policy.action_probs(&images.iter().collect::<Vec<_>>())?;
        if probs.len() != live.len() {
            return contract("policy returned the wrong number of distributions");
        }
        let mut next_live = Vec::with_capacity(live.len());
        for (&e, p) in live.iter().zip(&probs) {
            let a = choose(p, &mut rngs[e]);
            let (next, r, done) = step(&states[e], a)?;
            returns[e] += r;
            states[e] = next;
            if !done {
                next_live.push(e);
            }
        }
        live = next_live;
    }
    Ok(ScoreReport::from_returns(returns, variant, seed))
}

/// Total-variation distance `½ Σ |p − q|`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    /// For every probe state, the TV distance of each unordered pair
    /// `(t, t′)`, `t < t′`, in lexicographic order.
    pub distances: Vec<Vec<f64>>,
    pub mean: f64,
    pub max: f64,
    pub probes: usize,
    pub seed: u64,
}

/// Probe states visited by the scripted expert at uniformly random frames.
pub fn probe_states(env: &EnvConfig, n: usize, seed: u64) -> Result<Vec<WorldState>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ PROBE_SALT);
    (0..n as u64)
        .map(|i| {
            let mut s = reset(episode_seed(seed, i), env);
            for _ in 0..rng.random_range(0..env.episode_length) {
                s = step(&s, expert_action(&s))?.0;
            }
            Ok(s)
        })
        .collect()
}

/// Renders each probe state under `do(T = t)` for every `t` (noise is a
/// function of the rest of the state, so it is identical across `t`) and
/// measures how far the policy's action distributions move.
pub fn intervention_sensitivity(
    policy: &dyn Policy,
    env: &EnvConfig,
    n: usize,
    seed: u64,
) -> Result<InterventionReport> {
    if n == 0 {
        return config("intervention sensitivity needs at least one probe state");
    }
    let render_cfg = RenderConfig {
        confounded: true,
        ..env.render
    };
    let mut distances = Vec::with_capacity(n);
    for s in probe_states(env, n, seed)? {
        let images = (0..ACTIONS)
            .map(|t| Ok(render(&intervene(&s, t)?, &render_cfg)))
            .collect::<Result<Vec<_>>>()?;
        let probs = policy.action_probs(&images.iter().collect::<Vec<_>>())?;
        let mut d = Vec::with_capacity(ACTIONS * (ACTIONS - 1) / 2);
        for t in 0..ACTIONS {
            for u in t + 1..ACTIONS {
                d.push(tv_distance(&probs[t], &probs[u]).clamp(0.0, 1.0));
            }
        }
        distances.push(d);
    }
    let all: Vec<f64> = distances.iter().flatten().copied().collect();
    Ok(InterventionReport {
        mean: all.iter().sum::<f64>() / all.len() as f64,
        max: all.iter().copied().fold(0.0, f64::max),
        probes: n,
        seed,
        distances,
    })
}

/// Advantage over BC, `(score_m − score_bc) / score_bc`, as a fraction.
pub fn abc(score_m: f64, score_bc: f64) -> Result<f64> {
    if score_bc == 0.0 {
        return Err(Error::UndefinedMetric("ABC is undefined when the BC score is 0".into()));
    }
    Ok((score_m - score_bc) / score_bc)
}

/// One scored run: a method on an environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunScore {
    pub method: String,
    pub environment: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    /// `(environment, ABC in percent)`, sorted by environment.
    pub abc_percent: Vec<(String, f64)>,
    pub mean_percent: f64,
    pub median_percent: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub methods: Vec<MethodSummary>,
}

pub const BASELINE: &str = "bc";

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Mean and median ABC of every non-baseline method across environments.
/// Several runs of one (method, environment) are averaged first.
pub fn compare(runs: &[RunScore]) -> Result<Comparison> {
    let mut table: BTreeMap<&str, BTreeMap<&str, (f64, usize)>> = BTreeMap::new();
    for r in runs {
        let cell = table
            .entry(&r.method)
            .or_default()
            .entry(&r.environment)
            .or_insert((0.0, 0));
        cell.0 += r.score;
        cell.1 += 1;
    }
    let mean = |c: &(f64, usize)| c.0 / c.1 as f64;
    let Some(base) = table.get(BASELINE) else {
        return config("comparison needs runs of the bc baseline");
    };
    let mut methods = Vec::new();
    for (&method, envs) in &table {
        if method == BASELINE {
            continue;
        }
        let mut abc_percent = Vec::new();
        for (&env, cell) in envs {
            let Some(b) = base.get(env) else {
                return config(format!("no bc baseline for environment {env:?}"));
            };
            abc_percent.push((env.to_string(), 100.0 * abc(mean(cell), mean(b))?));
        }
        let mut vals: Vec<f64> = abc_percent.iter().map(|p| p.1).collect();
        methods.push(MethodSummary {
            method: method.to_string(),
            mean_percent: vals.iter().sum::<f64>() / vals.len() as f64,
            median_percent: median(&mut vals),
            abc_percent,
        });
    }
    if methods.is_empty() {
        return config("comparison needs at least one method besides bc");
    }
    Ok(Comparison {
        baseline: BASELINE.into(),
        methods,
    })
}

impl Comparison {
    /// Aligned text table with one row per environment and a column per method.
    pub fn to_text(&self) -> String {
        let mut envs: Vec<&str> = self
            .methods
            .iter()
            .flat_map(|m| m.abc_percent.iter().map(|(e, _)| e.as_str()))
            .collect();
        envs.sort_unstable();
        envs.dedup();
        let width = envs.iter().map(|e| e.len()).chain([10]).max().unwrap_or(10);
        let col = self
            .methods
            .iter()
            .map(|m| m.method.len())
            .chain([9])
            .max()
            .unwrap_or(9);
        let mut out = format!("{:<width$}", "ABC (%)");
        for m in &self.methods {
            out += &format!("  {:>col$}", m.method);
        }
        out.push('\n');
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        for env in &envs {
            out += &format!("{env:<width$}");
            for m in &self.methods {
                let v = m.abc_percent.iter().find(|(e, _)| e == env).map(|p| p.1);
                out += &format!("  {:>col$}", cell(v));
            }
            out.push('\n');
        }
        for (label, pick) in [("Mean ABC", 0), ("Median ABC", 1)] {
            out += &format!("{label:<width$}");
            for m in &self.methods {
                let v = if pick == 0 { m.mean_percent } else { m.median_percent };
                out += &format!("  {:>col$}", cell(Some(v)));
            }
            out.push('\n');
        }
        out
    }
}

/// Expert gaze draws on this thread, re-exported for data-path checks.
pub fn gaze_draws() -> u64 {
    envsim::gaze_draws()
}
