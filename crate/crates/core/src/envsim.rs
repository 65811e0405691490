//! TriggerWorld: a 40×40 grayscale episodic environment with one causal
//! factor and one injectable confounder.
//!
//! A beacon glyph sits at one of four quadrant anchors; its shape (the
//! beacon class) is the only thing the correct action depends on. The beacon
//! persists for 6–12 frames before re-rolling, so an optimal expert repeats
//! its action for long stretches. In the confounded rendering a 6×6 corner
//! patch shows the previous action, which therefore predicts the current
//! expert action most of the time without causing it.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{config, contract, Result};
use crate::gaze::GazeSample;

pub const ACTIONS: usize = 4;
pub const HEIGHT: usize = 40;
pub const WIDTH: usize = 40;
pub const GLYPH: usize = 5;

/// Glyph centres `(row, col)` of the four quadrant anchors.
pub const ANCHORS: [(usize, usize); 4] = [(11, 11), (11, 28), (28, 11), (28, 28)];

const GLYPHS: [[&str; GLYPH]; ACTIONS] = [
    ["..#..", "..#..", "#####", "..#..", "..#.."],
    ["#...#", ".#.#.", "..#..", ".#.#.", "#...#"],
    ["#####", "#...#", "#...#", "#...#", "#####"],
    ["..#..", ".#.#.", "#...#", ".#.#.", "..#.."],
];

const GAZE_SALT: u64 = 0x6761_7a65_5f72_6e67;
const NOISE_SALT: u64 = 0x6e6f_6973_655f_7331;

pub fn glyph_on(class: usize, row: usize, col: usize) -> bool {
    GLYPHS[class][row].as_bytes()[col] == b'#'
}

/// Square patch in the image that shows the previous action when confounded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndicatorGeometry {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl IndicatorGeometry {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.size).contains(&row) && (self.col..self.col + self.size).contains(&col)
    }

    /// Fill pattern for `action` at patch-local `(r, c)`.
    pub fn pattern(&self, action: usize, r: usize, c: usize) -> bool {
        let half = self.size / 2;
        match action {
            0 => true,
            1 => c < half,
            2 => r < half,
            _ => ((r / half.max(1)) + (c / half.max(1))).is_multiple_of(2),
        }
    }
}

impl Default for IndicatorGeometry {
    fn default() -> Self {
        IndicatorGeometry {
            row: 0,
            col: 0,
            size: 6,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub confounded: bool,
    pub indicator: IndicatorGeometry,
    /// Standard deviation of additive pixel noise.
    pub noise_level: f64,
    pub distractor_count: usize,
    pub distractor_intensity: f64,
    pub beacon_intensity: f64,
    /// Place distractors on the free anchors instead of anywhere.
    pub anchored_distractors: bool,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            confounded: true,
            indicator: IndicatorGeometry::default(),
            noise_level: 0.1,
            distractor_count: 3,
            distractor_intensity: 0.8,
            beacon_intensity: 1.0,
            anchored_distractors: true,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        let ind = self.indicator;
        if ind.size < 2 || ind.row + ind.size > HEIGHT || ind.col + ind.size > WIDTH {
            return config(format!("indicator patch {ind:?} does not fit the image"));
        }
        for &(r, c) in &ANCHORS {
            for dr in 0..GLYPH {
                for dc in 0..GLYPH {
                    if ind.contains(r + dr - GLYPH / 2, c + dc - GLYPH / 2) {
                        return config(format!("indicator patch {ind:?} overlaps anchor ({r},{c})"));
                    }
                }
            }
        }
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return config(format!("noise level must be >= 0, got {}", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.distractor_intensity) {
            return config("distractor intensity must lie in [0,1]");
        }
        if !(self.beacon_intensity > 0.0 && self.beacon_intensity <= 1.0) {
            return config("beacon intensity must lie in (0,1]");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub render: RenderConfig,
    pub episode_length: usize,
    /// Inclusive range of beacon lifetimes in frames.
    pub ttl_min: u32,
    pub ttl_max: u32,
    /// Probability that the expert's gaze lands on a distractor instead of the beacon.
    pub distraction_prob: f64,
    /// Standard deviation of the expert's gaze jitter around the beacon centre, in pixels.
    pub gaze_jitter: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            render: RenderConfig::default(),
            episode_length: 64,
            ttl_min: 6,
            ttl_max: 12,
            distraction_prob: 0.0,
            gaze_jitter: 2.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.render.validate()?;
        if self.episode_length == 0 {
            return config("episode length must be >= 1");
        }
        if self.ttl_min == 0 || self.ttl_min > self.ttl_max {
            return config(format!("invalid beacon ttl range [{}, {}]", self.ttl_min, self.ttl_max));
        }
        if !(0.0..=1.0).contains(&self.distraction_prob) {
            return config(format!(
                "distraction probability {} outside [0,1]",
                self.distraction_prob
            ));
        }
        if self.distraction_prob > 0.0 && self.render.distractor_count == 0 {
            return config("distraction probability > 0 needs at least one distractor");
        }
        if !(self.gaze_jitter >= 0.0 && self.gaze_jitter.is_finite()) {
            return config("gaze jitter must be >= 0");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WorldState {
    /// Index into [`ANCHORS`].
    pub beacon_position: usize,
    /// The causal factor: the correct action.
    pub beacon_class: usize,
    pub beacon_ttl: u32,
    /// The confounder shown by the indicator patch.
    pub prev_action: usize,
    pub distractor_seed: u64,
    pub step_index: usize,
    pub episode_length: usize,
    ttl_range: (u32, u32),
    rng: ChaCha8Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Distractor {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

impl WorldState {
    pub fn beacon_center(&self) -> (usize, usize) {
        ANCHORS[self.beacon_position]
    }

    fn reroll(&mut self) {
        self.beacon_class = self.rng.random_range(0..ACTIONS);
        self.beacon_position = self.rng.random_range(0..ANCHORS.len());
        self.beacon_ttl = self.rng.random_range(self.ttl_range.0..=self.ttl_range.1);
        self.distractor_seed = self.rng.next_u64();
    }

    /// Class-irrelevant clutter, a pure function of the distractor seed and
    /// beacon placement. Distractor footprints never touch the beacon
    /// footprint or the indicator patch.
    pub fn distractors(&self, render: &RenderConfig) -> Vec<Distractor> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.distractor_seed);
        if render.anchored_distractors {
            return (0..ANCHORS.len())
                .filter(|&i| i != self.beacon_position)
                .take(render.distractor_count)
                .map(|i| Distractor {
                    row: ANCHORS[i].0,
                    col: ANCHORS[i].1,
                    class: rng.random_range(0..ACTIONS),
                })
                .collect();
        }
        let (br, bc) = self.beacon_center();
        let half = GLYPH / 2;
        let ind = render.indicator;
        let mut out = Vec::with_capacity(render.distractor_count);
        let mut attempts = 0;
        while out.len() < render.distractor_count && attempts < 1000 {
            attempts += 1;
            let row = rng.random_range(half..HEIGHT - half);
            let col = rng.random_range(half..WIDTH - half);
            let class = rng.random_range(0..ACTIONS);
            // footprints must be separated by a one-pixel gap
            let clear_of_beacon = row.abs_diff(br) > GLYPH || col.abs_diff(bc) > GLYPH;
            let clear_of_indicator = row > ind.row + ind.size + half || col > ind.col + ind.size + half;
            if clear_of_beacon && clear_of_indicator {
                out.push(Distractor { row, col, class });
            }
        }
        out
    }
}

pub fn reset(seed: u64, cfg: &EnvConfig) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prev_action = rng.random_range(0..ACTIONS);
    let mut state = WorldState {
        beacon_position: 0,
        beacon_class: 0,
        beacon_ttl: 1,
        prev_action,
        distractor_seed: 0,
        step_index: 0,
        episode_length: cfg.episode_length,
        ttl_range: (cfg.ttl_min, cfg.ttl_max),
        rng,
    };
    state.reroll();
    state
}

/// Renders the `1×40×40` observation. Pixel noise is seeded from the
/// distractor seed and step index, so it does not depend on the
/// previous action.
pub fn render(state: &WorldState, cfg: &RenderConfig) -> Tensor {
    let mut img = vec![0.0; HEIGHT * WIDTH];
    let half = GLYPH / 2;
    let stamp = |img: &mut Vec<f64>, class: usize, row: usize, col: usize, v: f64| {
        for r in 0..GLYPH {
            for c in 0..GLYPH {
                if glyph_on(class, r, c) {
                    img[(row + r - half) * WIDTH + col + c - half] = v;
                }
            }
        }
    };
    for d in state.distractors(cfg) {
        stamp(&mut img, d.class, d.row, d.col, cfg.distractor_intensity);
    }
    let (br, bc) = state.beacon_center();
    stamp(&mut img, state.beacon_class, br, bc, cfg.beacon_intensity);
    if cfg.confounded {
        let ind = cfg.indicator;
        for r in 0..ind.size {
            for c in 0..ind.size {
                img[(ind.row + r) * WIDTH + ind.col + c] = if ind.pattern(state.prev_action, r, c) { 1.0 } else { 0.0 };
            }
        }
    }
    if cfg.noise_level > 0.0 {
        let seed = state
            .distractor_seed
            .rotate_left(17)
            .wrapping_add(state.step_index as u64)
            ^ NOISE_SALT;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, cfg.noise_level).expect("validated noise level");
        for v in img.iter_mut() {
            *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    Tensor::new([1, HEIGHT, WIDTH], img).expect("rendered values are finite")
}

/// The scripted optimal expert reads the causal factor only.
pub fn expert_action(state: &WorldState) -> usize {
    state.beacon_class
}

thread_local! {
    static GAZE_DRAWS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of expert gaze samples drawn on this thread so far.
pub fn gaze_draws() -> u64 {
    GAZE_DRAWS.with(|n| n.get())
}

/// Synthetic expert gaze. With probability `1 - distraction_prob` it lands on
/// the beacon centre plus isotropic jitter; otherwise on the centre of a
/// random distractor. The previous action is never read, and the rng is
/// consumed identically on every path.
pub fn expert_gaze(state: &WorldState, rng: &mut impl Rng, cfg: &EnvConfig) -> GazeSample {
    GAZE_DRAWS.with(|n| n.set(n.get() + 1));
    let u: f64 = rng.random();
    let pick: usize = rng.random_range(0..cfg.render.distractor_count.max(1));
    let jitter = Normal::new(0.0, cfg.gaze_jitter.max(0.0)).expect("validated jitter");
    let (jx, jy) = (jitter.sample(rng), jitter.sample(rng));
    if u < cfg.distraction_prob {
        let ds = state.distractors(&cfg.render);
        if let Some(d) = ds.get(pick % ds.len().max(1)) {
            return GazeSample::new(state.step_index, d.col as f64, d.row as f64);
        }
    }
    let (r, c) = state.beacon_center();
    let clampx = |v: f64| v.clamp(0.0, WIDTH as f64 - 1e-3);
    let clampy = |v: f64| v.clamp(0.0, HEIGHT as f64 - 1e-3);
    GazeSample::new(state.step_index, clampx(c as f64 + jx), clampy(r as f64 + jy))
}

/// Advances one frame. Reward is 1 for the correct action.
pub fn step(state: &WorldState, action: usize) -> Result<(WorldState, f64, bool)> {
    if action >= ACTIONS {
        return contract(format!("action {action} outside 0..{ACTIONS}"));
    }
    let mut next = state.clone();
    let reward = if action == state.beacon_class { 1.0 } else { 0.0 };
    next.prev_action = action;
    next.step_index += 1;
    next.beacon_ttl -= 1;
    if next.beacon_ttl == 0 {
        next.reroll();
    }
    let done = next.step_index >= next.episode_length;
    Ok((next, reward, done))
}

/// `do(T = t)`: sets the previous action and nothing else.
pub fn intervene(state: &WorldState, t: usize) -> Result<WorldState> {
    if t >= ACTIONS {
        return contract(format!("intervention value {t} outside 0..{ACTIONS}"));
    }
    Ok(WorldState {
        prev_action: t,
        ..state.clone()
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub config: EnvConfig,
    pub observations: Vec<Tensor>,
    pub actions: Vec<usize>,
    pub gaze: Vec<GazeSample>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Seed of episode `index` within a collection seeded by `master`.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn quantize(v: f64) -> f64 {
    v as f32 as f64
}

/// Runs the scripted expert closed-loop and records `(o, g, a)` per frame.
/// Observations and gaze coordinates are quantised to `f32` here, which is
/// the precision the dataset format stores.
pub fn collect(cfg: &EnvConfig, episodes: usize, seed: u64) -> Result<Vec<EpisodeRecord>> {
    cfg.validate()?;
    if episodes == 0 {
        return config("collect needs at least one episode");
    }
    (0..episodes as u64)
        .map(|e| collect_episode(cfg, episode_seed(seed, e)))
        .collect()
}

fn collect_episode(cfg: &EnvConfig, seed: u64) -> Result<EpisodeRecord> {
    let mut state = reset(seed, cfg);
    let mut gaze_rng = ChaCha8Rng::seed_from_u64(seed ^ GAZE_SALT);
    let mut rec = EpisodeRecord {
        seed,
        config: *cfg,
        observations: Vec::with_capacity(cfg.episode_length),
        actions: Vec::with_capacity(cfg.episode_length),
        gaze: Vec::with_capacity(cfg.episode_length),
    };
    loop {
        let obs = render(&state, &cfg.render);
        let obs = Tensor::new(obs.shape().to_vec(), obs.data().iter().map(|&v| quantize(v)).collect())?;
        let mut g = expert_gaze(&state, &mut gaze_rng, cfg);
        g.x = quantize(g.x);
        g.y = quantize(g.y);
        let a = expert_action(&state);
        rec.observations.push(obs);
        rec.gaze.push(g);
        rec.actions.push(a);
        let (next, _, done) = step(&state, a)?;
        state = next;
        if done {
            break;
        }
    }
    Ok(rec)
}

/// Fraction of frames (after the first of each episode) whose expert action
/// equals the previous expert action, i.e. how well the indicator predicts
/// the label.
pub fn shortcut_predictiveness(records: &[EpisodeRecord]) -> f64 {
    let (mut hits, mut total) = (0usize, 0usize);
    for r in records {
        for w in r.actions.windows(2) {
            total += 1;
            hits += usize::from(w[0] == w[1]);
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}
