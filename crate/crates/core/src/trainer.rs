//! Deterministic mini-batch training over demonstration datasets.
//!
//! Every random choice (initialisation, validation split, gaze subset, batch
//! order) is drawn from a stream derived from `TrainConfig::seed`, so a
//! `(config, dataset)` pair fully determines the metrics log.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Adam, AdamConfig, Graph, Tensor};
use crate::envsim::{EnvConfig, EpisodeRecord};
use crate::error::{config, contract, Error, Result};
use crate::evaluator::{intervention_sensitivity, rollout, EvalVariant};
use crate::gaze::{mask_sequence, GazeMask, MaskParams};
use crate::model::{bc_loss, total_loss, Batch, LossNodes, ModelConfig, PolicyModel};

const SPLIT_SALT: u64 = 0x5b1d_0c47_a3e2_9f61;
const SHUFFLE_SALT: u64 = 0x2f6a_91c3_d84e_7b05;
const FRACTION_SALT: u64 = 0x7c3e_a2b9_14f0_d86d;
const EVAL_SALT: u64 = 0x44d1_6e0b_c9a7_3f28;

/// Gaze weight for TriggerWorld. The max-normalised target and the unit-sum
/// prediction differ in scale by roughly the map area, so L_GP is small and
/// needs a larger weight than the Atari value to shape the encoder.
pub const TRIGGER_WORLD_LAMBDA: f64 = 100.0;
/// A 9×9 latent under temperature 1 cannot concentrate enough mass to match a
/// 5×5 beacon mask.
pub const TRIGGER_WORLD_TEMPERATURE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Behaviour cloning; the gaze head is never built.
    Bc,
    /// `L_BC + λ·L_GP`.
    Gabril,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bc" => Ok(Method::Bc),
            "gabril" => Ok(Method::Gabril),
            _ => config(format!("unknown method {s:?}, expected bc or gabril")),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Bc => "bc",
            Method::Gabril => "gabril",
        })
    }
}

/// How gaze masks are scaled before they become regression targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetNorm {
    /// Peak 1.
    Max,
    /// Unit sum, the same scale as the predicted field.
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    /// Fraction of gaze-bearing frames whose mask is kept.
    pub gaze_fraction: f64,
    pub mask: MaskParams,
    pub target_norm: TargetNorm,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub method: Method,
    /// Fraction of episodes held out for checkpoint selection.
    pub validation_fraction: f64,
    /// Closed-loop evaluation every this many epochs; 0 disables it.
    pub eval_interval: usize,
    pub eval_episodes: usize,
    pub eval_probes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 30,
            batch_size: 64,
            learning_rate: 1e-3,
            lambda: TRIGGER_WORLD_LAMBDA,
            gaze_fraction: 1.0,
            mask: MaskParams::TRIGGER_WORLD,
            target_norm: TargetNorm::Max,
            env: EnvConfig::default(),
            model: ModelConfig {
                temperature: TRIGGER_WORLD_TEMPERATURE,
                ..ModelConfig::default()
            },
            method: Method::Gabril,
            validation_fraction: 0.1,
            eval_interval: 0,
            eval_episodes: 20,
            eval_probes: 20,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return config("batch size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gaze_fraction) {
            return config(format!("gaze fraction {} outside [0,1]", self.gaze_fraction));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return config(format!(
                "validation fraction {} outside [0,1)",
                self.validation_fraction
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return config(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.eval_interval > 0 && (self.eval_episodes == 0 || self.eval_probes == 0) {
            return config("periodic evaluation needs eval_episodes and eval_probes >= 1");
        }
        self.mask.validate()?;
        self.env.validate()?;
        self.model.validate()
    }
}

/// One training frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub episode: usize,
    /// `[c, h, w]`
    pub observation: Tensor,
    pub action: usize,
    pub mask: GazeMask,
}

/// Frames with precomputed gaze masks.
#[derive(Clone, Debug, PartialEq)]
pub struct GazeDataset {
    pub frames: Vec<Frame>,
    pub episodes: usize,
}

impl GazeDataset {
    /// Builds one mask per frame from each episode's gaze stream.
    pub fn from_records(records: &[EpisodeRecord], params: &MaskParams, norm: TargetNorm) -> Result<Self> {
        let mut frames = Vec::new();
        for (e, rec) in records.iter().enumerate() {
            if rec.observations.len() != rec.len() || rec.gaze.len() != rec.len() {
                return contract(format!("episode {e} has streams of unequal length"));
            }
            let Some(first) = rec.observations.first() else {
                continue;
            };
            let shape = first.shape();
            let dims = (shape[shape.len() - 2], shape[shape.len() - 1]);
            let masks = mask_sequence(&rec.gaze, params, dims)?;
            for ((obs, &action), mask) in rec.observations.iter().zip(&rec.actions).zip(masks) {
                frames.push(Frame {
                    episode: e,
                    observation: obs.clone(),
                    action,
                    mask: match norm {
                        TargetNorm::Max => mask,
                        TargetNorm::Sum => mask.sum_normalized(),
                    },
                });
            }
        }
        Ok(GazeDataset {
            frames,
            episodes: records.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn gaze_frames(&self) -> usize {
        self.frames.iter().filter(|f| f.mask.has_gaze()).count()
    }
}

/// Keeps the mask on exactly `round(fraction · N)` of the `N` gaze-bearing
/// frames, chosen uniformly per frame; the others get the no-gaze sentinel.
/// Observations and actions are untouched.
pub fn apply_gaze_fraction(dataset: &GazeDataset, fraction: f64, seed: u64) -> Result<GazeDataset> {
    if !(0.0..=1.0).contains(&fraction) {
        return config(format!("gaze fraction {fraction} outside [0,1]"));
    }
    let mut with_gaze: Vec<usize> = (0..dataset.len())
        .filter(|&i| dataset.frames[i].mask.has_gaze())
        .collect();
    let keep = (fraction * with_gaze.len() as f64).round() as usize;
    let mut out = dataset.clone();
    if keep == with_gaze.len() {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, dropped) = with_gaze.partial_shuffle(&mut rng, keep);
    for &i in dropped.iter() {
        let (h, w) = out.frames[i].mask.dims();
        out.frames[i].mask = GazeMask::empty(h, w);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_bc: f64,
    /// Absent for behaviour cloning.
    pub l_gp: Option<f64>,
    pub l_total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_total: f64,
    /// Absent when nothing was held out.
    pub validation_total: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub score: f64,
    pub sensitivity: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub evals: Vec<EvalRecord>,
}

impl MetricsLog {
    /// Steps strictly increasing and every value finite.
    pub fn check(&self) -> Result<()> {
        for w in self.steps.windows(2) {
            if w[1].step <= w[0].step {
                return contract(format!("metrics steps not increasing at {}", w[1].step));
            }
        }
        let finite = self
            .steps
            .iter()
            .all(|s| s.l_bc.is_finite() && s.l_total.is_finite() && s.l_gp.is_none_or(f64::is_finite))
            && self
                .epochs
                .iter()
                .all(|e| e.train_total.is_finite() && e.validation_total.is_none_or(f64::is_finite))
            && self
                .evals
                .iter()
                .all(|e| e.score.is_finite() && e.sensitivity.is_finite());
        if finite {
            Ok(())
        } else {
            contract("metrics log holds a non-finite value")
        }
    }

    pub fn l_total(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.l_total).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    /// Lowest validation `L_total`; the final model when nothing was held out.
    pub best: PolicyModel,
    pub best_epoch: usize,
    pub log: MetricsLog,
}

/// Trains silently.
pub fn train(cfg: &TrainConfig, dataset: &GazeDataset) -> Result<TrainOutcome> {
    train_logged(cfg, dataset, &mut std::io::sink())
}

/// Trains and writes one `key=value` progress line per epoch to `progress`.
pub fn train_logged(cfg: &TrainConfig, dataset: &GazeDataset, progress: &mut dyn Write) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return config("training dataset is empty");
    }
    let data = apply_gaze_fraction(dataset, cfg.gaze_fraction, cfg.seed ^ FRACTION_SALT)?;
    let (train_idx, val_idx) = split(&data, cfg.validation_fraction, cfg.seed ^ SPLIT_SALT);

    let mut model = PolicyModel::init(cfg.model, cfg.seed)?;
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.learning_rate,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
    let mut log = MetricsLog::default();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut order = train_idx.clone();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch = assemble(&data, chunk)?;
            let rec = update(&mut model, &mut adam, &batch, cfg).map_err(|e| diverged(step, e))?;
            epoch_sum += rec.l_total * chunk.len() as f64;
            log.steps.push(StepRecord { step, ..rec });
        }
        let train_total = epoch_sum / order.len() as f64;
        let validation_total = if val_idx.is_empty() {
            None
        } else {
            Some(evaluate_loss(&model, &data, &val_idx, cfg)?)
        };
        let select = validation_total.unwrap_or(f64::NEG_INFINITY);
        if select <= best.2 || validation_total.is_none() {
            best = (model.clone(), epoch, select);
        }
        log.epochs.push(EpochRecord {
            epoch,
            step,
            train_total,
            validation_total,
        });
        let mut line = format!("epoch={epoch} step={step} train_total={train_total:.6}");
        if let Some(v) = validation_total {
            line += &format!(" validation_total={v:.6}");
        }
        if cfg.eval_interval > 0 && (epoch % cfg.eval_interval == 0 || epoch == cfg.epochs) {
            let seed = cfg.seed ^ EVAL_SALT;
            let score = rollout(
                &model,
                &cfg.env,
                EvalVariant::ConfoundedShifted,
                cfg.eval_episodes,
                seed,
            )?;
            let sens = intervention_sensitivity(&model, &cfg.env, cfg.eval_probes, seed)?;
            log.evals.push(EvalRecord {
                epoch,
                step,
                score: score.mean,
                sensitivity: sens.mean,
            });
            line += &format!(" score={:.3} sensitivity={:.6}", score.mean, sens.mean);
        }
        writeln!(progress, "{line}").map_err(|e| Error::io("<progress>", e))?;
    }
    log.check()?;
    Ok(TrainOutcome {
        model,
        best: best.0,
        best_epoch: best.1,
        log,
    })
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            step,
            detail: format!("non-finite value produced by {op}"),
        },
        other => other,
    }
}

/// Holds out whole episodes so correlated frames never straddle the split.
fn split(data: &GazeDataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let held = ((fraction * data.episodes as f64).round() as usize).min(data.episodes.saturating_sub(1));
    let mut episodes: Vec<usize> = (0..data.episodes).collect();
    episodes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; data.episodes];
    for &e in &episodes[..held] {
        is_val[e] = true;
    }
    (0..data.len()).partition(|&i| !is_val[data.frames[i].episode])
}

/// Stacks the given frames into one batch.
pub fn assemble(data: &GazeDataset, idx: &[usize]) -> Result<Batch> {
    let first = &data.frames[idx[0]];
    let obs_shape = first.observation.shape().to_vec();
    let (h, w) = first.mask.dims();
    let mut images = Vec::with_capacity(idx.len() * first.observation.numel());
    let mut masks = Vec::with_capacity(idx.len() * h * w);
    let mut actions = Vec::with_capacity(idx.len());
    let mut has_gaze = Vec::with_capacity(idx.len());
    for &i in idx {
        let f = &data.frames[i];
        if f.observation.shape() != obs_shape.as_slice() || f.mask.dims() != (h, w) {
            return contract(format!("frame {i} differs in shape from the rest of the batch"));
        }
        images.extend_from_slice(f.observation.data());
        masks.extend_from_slice(f.mask.values());
        actions.push(f.action);
        has_gaze.push(f.mask.has_gaze());
    }
    let mut shape = vec![idx.len()];
    shape.extend(obs_shape);
    Ok(Batch {
        images: Tensor::new(shape, images)?,
        actions,
        masks: Tensor::new([idx.len(), h, w], masks)?,
        has_gaze,
    })
}

fn losses(
    g: &mut Graph,
    model: &PolicyModel,
    batch: &Batch,
    cfg: &TrainConfig,
) -> Result<(LossNodes, [crate::autodiff::Var; 8])> {
    let p = model.bind(g);
    let nodes = match cfg.method {
        Method::Bc => bc_loss(g, &p, batch)?,
        Method::Gabril => total_loss(g, model, &p, batch, cfg.lambda)?,
    };
    Ok((nodes, *p.vars()))
}

fn record(g: &Graph, n: &LossNodes) -> StepRecord {
    StepRecord {
        step: 0,
        l_bc: g.value(n.bc).item(),
        l_gp: n.gp.map(|v| g.value(v).item()),
        l_total: g.value(n.total).item(),
    }
}

/// One Adam update; returns the losses before the update.
fn update(model: &mut PolicyModel, adam: &mut Adam, batch: &Batch, cfg: &TrainConfig) -> Result<StepRecord> {
    let mut g = Graph::new();
    let (nodes, vars) = losses(&mut g, model, batch, cfg)?;
    let rec = record(&g, &nodes);
    let grads = g.backward(nodes.total)?;
    let grads: Vec<&Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).expect("parameter leaves always receive a gradient"))
        .collect();
    adam.step(&mut model.parameters_mut(), &grads)?;
    Ok(rec)
}

/// `L_total` over `idx`, with `L_BC` averaged over frames and `L_GP` over
/// gaze-bearing frames, matching a single batch holding all of them.
fn evaluate_loss(model: &PolicyModel, data: &GazeDataset, idx: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let (mut bc, mut gp, mut frames, mut gaze) = (0.0, 0.0, 0usize, 0usize);
    for chunk in idx.chunks(cfg.batch_size.max(64)) {
        let batch = assemble(data, chunk)?;
        let mut g = Graph::new();
        let (nodes, _) = losses(&mut g, model, &batch, cfg)?;
        let r = record(&g, &nodes);
        let n_gaze = batch.has_gaze.iter().filter(|&&b| b).count();
        bc += r.l_bc * chunk.len() as f64;
        gp += r.l_gp.unwrap_or(0.0) * n_gaze as f64;
        frames += chunk.len();
        gaze += n_gaze;
    }
    let bc = bc / frames as f64;
    Ok(match cfg.method {
        Method::Bc => bc,
        Method::Gabril if gaze == 0 => bc,
        Method::Gabril => bc + cfg.lambda * gp / gaze as f64,
    })
}
