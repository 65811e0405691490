//! The `gabril` command line. [`run`] returns the process exit code: 0 on
//! success, 2 on usage errors, 1 on any other failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::envsim::{collect, shortcut_predictiveness, EnvConfig};
use crate::error::{config, Error, Result};
use crate::evaluator::{compare, intervention_sensitivity, rollout, EvalVariant, RunScore, ScoreReport};
use crate::gaze::mask_sequence;
use crate::io::{
    export_pgm, load_checkpoint, load_dataset, read_json, save_checkpoint, save_dataset, write_file, write_json,
    Dataset, LineChart, Series,
};
use crate::model::attention_map;
use crate::trainer::{train_logged, GazeDataset, Method, MetricsLog, TrainConfig};

/// Environment variable that relocates every relative output path.
pub const OUT_DIR_ENV: &str = "GABRIL_OUT_DIR";

/// Gaze fractions swept by `ablate-gaze`.
pub const ABLATION_FRACTIONS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Parser, Debug)]
#[command(
    name = "gabril",
    version,
    about = "Gaze-regularised imitation learning on TriggerWorld"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect expert demonstrations with synthetic gaze.
    GenData(GenData),
    /// Train a policy on a dataset.
    Train(Train),
    /// Closed-loop score of a checkpoint.
    Eval(Eval),
    /// Sensitivity of a checkpoint to interventions on the indicator.
    Intervene(Intervene),
    /// Observation, gaze mask and model attention images for sampled frames.
    Attention(Attention),
    /// Train and evaluate across gaze fractions.
    AblateGaze(AblateGaze),
    /// ABC table from labelled evaluation reports.
    Compare(Compare),
    /// SVG line chart from a metrics log or an ablation record.
    Plot(Plot),
}

#[derive(Args, Debug)]
struct GenData {
    #[arg(long)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Draw the previous-action indicator (the default).
    #[arg(long, conflicts_with = "unconfounded")]
    confounded: bool,
    #[arg(long)]
    unconfounded: bool,
    /// Environment configuration JSON; defaults to the built-in TriggerWorld.
    #[arg(long)]
    env_config: Option<PathBuf>,
    #[arg(long, default_value = "dataset.gbrl")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainFlags {
    /// Full training configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gaze_fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    /// Directory for checkpoints, metrics and the manifest.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EnvSource {
    /// Environment configuration JSON.
    #[arg(long, conflicts_with = "data")]
    env_config: Option<PathBuf>,
    /// Take the environment configuration from a dataset header.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    env: EnvSource,
    #[arg(long, default_value = "confounded-shifted")]
    variant: EvalVariant,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Method label recorded for `compare`.
    #[arg(long, default_value = "gabril")]
    method: String,
    /// Environment label recorded for `compare`.
    #[arg(long, default_value = "triggerworld")]
    environment: String,
    #[arg(long, default_value = "eval.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Intervene {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    env: EnvSource,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "intervention.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Attention {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Gaussian smoothing of the attention map, in pixels.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Training configuration whose mask parameters build the gaze panel.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "attention")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateGaze {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    #[arg(long, default_value_t = 100)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    eval_seed: u64,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Compare {
    /// Reports written by `eval`.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "comparison.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Plot {
    /// `metrics.json` from `train` or `ablation.json` from `ablate-gaze`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "plot.svg")]
    out: PathBuf,
}

/// `eval` output: a score report labelled for comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub environment: String,
    pub checkpoint: String,
    pub report: ScoreReport,
}

/// One point of the gaze-fraction sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub gaze_fraction: f64,
    pub score: f64,
    pub score_std: f64,
    pub sensitivity: f64,
    pub checkpoint: String,
}

/// Everything needed to reproduce a CLI run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub seed: Option<u64>,
    pub config: serde_json::Value,
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Resolves a relative output path against `GABRIL_OUT_DIR` when set.
pub fn output_path(p: &Path) -> PathBuf {
    match std::env::var_os(OUT_DIR_ENV) {
        Some(dir) if p.is_relative() => Path::new(&dir).join(p),
        _ => p.to_path_buf(),
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_manifest(
    path: &Path,
    command: &str,
    argv: &[String],
    seed: Option<u64>,
    config: serde_json::Value,
) -> Result<()> {
    write_json(
        path,
        &Manifest {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            config,
        },
    )
}

fn stdout_line(line: &str) -> Result<()> {
    writeln!(std::io::stdout(), "{line}").map_err(|e| Error::io("<stdout>", e))
}

fn dispatch(cmd: Command, argv: &[String]) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a, argv),
        Command::Train(a) => train_cmd(a, argv),
        Command::Eval(a) => eval_cmd(a, argv),
        Command::Intervene(a) => intervene_cmd(a, argv),
        Command::Attention(a) => attention_cmd(a, argv),
        Command::AblateGaze(a) => ablate_cmd(a, argv),
        Command::Compare(a) => compare_cmd(a, argv),
        Command::Plot(a) => plot_cmd(a, argv),
    }
}

fn gen_data(a: GenData, argv: &[String]) -> Result<()> {
    let mut env = match &a.env_config {
        Some(p) => read_json::<EnvConfig>(p)?,
        None => EnvConfig::default(),
    };
    if a.unconfounded {
        env.render.confounded = false;
    } else if a.confounded {
        env.render.confounded = true;
    }
    let records = collect(&env, a.episodes, a.seed)?;
    let ds = Dataset::from_records(env, records)?;
    let out = output_path(&a.out);
    save_dataset(&ds, &out)?;
    write_manifest(
        &manifest_path(&out),
        "gen-data",
        argv,
        Some(a.seed),
        json!({ "env": env, "episodes": a.episodes }),
    )?;
    stdout_line(&format!(
        "episodes={} frames={} shortcut={:.4} path={}",
        ds.episodes.len(),
        ds.frames(),
        shortcut_predictiveness(&ds.episodes),
        out.display()
    ))
}

fn train_config(flags: &TrainFlags, env: EnvConfig) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    cfg.env = env;
    if let Some(m) = flags.method {
        cfg.method = m;
    }
    if let Some(l) = flags.lambda {
        cfg.lambda = l;
    }
    if let Some(f) = flags.gaze_fraction {
        cfg.gaze_fraction = f;
    }
    if let Some(e) = flags.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = flags.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = flags.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepared(ds: &Dataset, cfg: &TrainConfig) -> Result<GazeDataset> {
    GazeDataset::from_records(&ds.episodes, &cfg.mask, cfg.target_norm)
}

/// Trains one run into `dir`: `final.gbck`, `best.gbck`, `metrics.json`.
fn train_into(cfg: &TrainConfig, data: &GazeDataset, dir: &Path) -> Result<crate::trainer::TrainOutcome> {
    let mut stdout = std::io::stdout();
    let outcome = train_logged(cfg, data, &mut stdout)?;
    save_checkpoint(&outcome.model, &dir.join("final.gbck"))?;
    save_checkpoint(&outcome.best, &dir.join("best.gbck"))?;
    write_json(&dir.join("metrics.json"), &outcome.log)?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(outcome)
}

fn train_cmd(a: Train, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = train_config(&a.flags, ds.config)?;
    let dir = output_path(&a.out);
    let outcome = train_into(&cfg, &prepared(&ds, &cfg)?, &dir)?;
    write_manifest(
        &dir.join("manifest.json"),
        "train",
        argv,
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
    )?;
    stdout_line(&format!("best_epoch={} out={}", outcome.best_epoch, dir.display()))
}

fn env_from(src: &EnvSource) -> Result<EnvConfig> {
    match (&src.env_config, &src.data) {
        (Some(p), _) => read_json(p),
        (None, Some(d)) => Ok(load_dataset(d)?.config),
        (None, None) => Ok(EnvConfig::default()),
    }
}

fn eval_cmd(a: Eval, argv: &[String]) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let env = env_from(&a.env)?;
    let report = rollout(&model, &env, a.variant, a.episodes, a.seed)?;
    let out = output_path(&a.out);
    let rec = EvalRecord {
        method: a.method,
        environment: a.environment,
        checkpoint: a.checkpoint.display().to_string(),
        report,
    };
    write_json(&out, &rec)?;
    write_manifest(&manifest_path(&out), "eval", argv, Some(a.seed), json!({ "env": env }))?;
    stdout_line(&format!(
        "variant={} episodes={} mean={:.4} std={:.4}",
        rec.report.variant, rec.report.episodes, rec.report.mean, rec.report.std
    ))
}

fn intervene_cmd(a: Intervene, argv: &[String]) -> Result<()> {
    let model = load_checkpoint(&a.checkpoint)?;
    let env = env_from(&a.env)?;
    let report = intervention_sensitivity(&model, &env, a.probes, a.seed)?;
    let out = output_path(&a.out);
    write_json(&out, &report)?;
    write_manifest(
        &manifest_path(&out),
        "intervene",
        argv,
        Some(a.seed),
        json!({ "env": env }),
    )?;
    stdout_line(&format!(
        "probes={} mean_tv={:.6} max_tv={:.6}",
        report.probes, report.mean, report.max
    ))
}

fn attention_cmd(a: Attention, argv: &[String]) -> Result<()> {
    if !(a.sigma >= 0.0 && a.sigma.is_finite()) {
        return config(format!("sigma must be >= 0, got {}", a.sigma));
    }
    let model = load_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    let mask = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?.mask,
        None => TrainConfig::default().mask,
    };
    let total = ds.frames();
    if total == 0 {
        return config("dataset has no frames");
    }
    let n = a.frames.min(total);
    let mut picks = sample(&mut ChaCha8Rng::seed_from_u64(a.seed), total, n).into_vec();
    picks.sort_unstable();
    let dir = output_path(&a.out);
    let dims = model.config.input_dims();
    let mut offset = 0;
    let mut written = 0;
    for rec in &ds.episodes {
        let here: Vec<usize> = picks
            .iter()
            .filter(|&&p| p >= offset && p < offset + rec.len())
            .map(|p| p - offset)
            .collect();
        if !here.is_empty() {
            let masks = mask_sequence(&rec.gaze, &mask, dims)?;
            for i in here {
                let obs = &rec.observations[i];
                let z = model.latent(&[obs])?;
                let inner = z.shape()[1..].to_vec();
                let z = z.reshape(inner)?;
                let att = attention_map(&z, a.sigma, dims)?;
                let tag = format!("{:05}", offset + i);
                let obs2d = obs.data()[..dims.0 * dims.1].to_vec();
                export_pgm(&obs2d, dims, &dir.join(format!("frame_{tag}_observation.pgm")))?;
                export_pgm(masks[i].values(), dims, &dir.join(format!("frame_{tag}_gaze.pgm")))?;
                export_pgm(&att, dims, &dir.join(format!("frame_{tag}_attention.pgm")))?;
                written += 1;
            }
        }
        offset += rec.len();
    }
    write_manifest(
        &dir.join("manifest.json"),
        "attention",
        argv,
        Some(a.seed),
        json!({ "mask": mask, "sigma": a.sigma }),
    )?;
    stdout_line(&format!("frames={written} out={}", dir.display()))
}

fn ablate_cmd(a: AblateGaze, argv: &[String]) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let mut cfg = train_config(&a.flags, ds.config)?;
    cfg.method = Method::Gabril;
    let data = prepared(&ds, &cfg)?;
    let dir = output_path(&a.out);
    let mut points = Vec::with_capacity(ABLATION_FRACTIONS.len());
    for f in ABLATION_FRACTIONS {
        let run_cfg = TrainConfig {
            gaze_fraction: f,
            ..cfg.clone()
        };
        let run_dir = dir.join(format!("fraction_{f:.1}"));
        stdout_line(&format!("gaze_fraction={f:.1}"))?;
        let outcome = train_into(&run_cfg, &data, &run_dir)?;
        let score = rollout(
            &outcome.best,
            &cfg.env,
            EvalVariant::ConfoundedShifted,
            a.episodes,
            a.eval_seed,
        )?;
        let sens = intervention_sensitivity(&outcome.best, &cfg.env, a.probes, a.eval_seed)?;
        stdout_line(&format!(
            "gaze_fraction={f:.1} score={:.4} sensitivity={:.6}",
            score.mean, sens.mean
        ))?;
        points.push(AblationPoint {
            gaze_fraction: f,
            score: score.mean,
            score_std: score.std,
            sensitivity: sens.mean,
            checkpoint: run_dir.join("best.gbck").display().to_string(),
        });
    }
    write_json(&dir.join("ablation.json"), &points)?;
    write_manifest(
        &dir.join("manifest.json"),
        "ablate-gaze",
        argv,
        Some(cfg.seed),
        serde_json::to_value(&cfg)?,
    )?;
    stdout_line(&format!("runs={} out={}", points.len(), dir.display()))
}

fn compare_cmd(a: Compare, argv: &[String]) -> Result<()> {
    let runs = a
        .reports
        .iter()
        .map(|p| {
            let r: EvalRecord = read_json(p)?;
            Ok(RunScore {
                method: r.method,
                environment: r.environment,
                score: r.report.mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let table = compare(&runs)?;
    let out = output_path(&a.out);
    write_json(&out, &table)?;
    write_manifest(
        &manifest_path(&out),
        "compare",
        argv,
        None,
        json!({ "reports": a.reports }),
    )?;
    print!("{}", table.to_text());
    Ok(())
}

fn plot_cmd(a: Plot, argv: &[String]) -> Result<()> {
    let value: serde_json::Value = read_json(&a.input)?;
    let chart = if value.is_array() {
        let points: Vec<AblationPoint> = serde_json::from_value(value)?;
        LineChart {
            title: "Gaze-fraction ablation".into(),
            x_label: "gaze fraction".into(),
            y_label: "confounder-shifted return".into(),
            series: vec![Series {
                name: "gabril".into(),
                points: points.iter().map(|p| (p.gaze_fraction, p.score)).collect(),
            }],
        }
    } else {
        let log: MetricsLog = serde_json::from_value(value)?;
        let mut series = vec![
            Series {
                name: "L_total".into(),
                points: log.steps.iter().map(|s| (s.step as f64, s.l_total)).collect(),
            },
            Series {
                name: "L_BC".into(),
                points: log.steps.iter().map(|s| (s.step as f64, s.l_bc)).collect(),
            },
        ];
        if log.steps.iter().any(|s| s.l_gp.is_some()) {
            series.push(Series {
                name: "L_GP".into(),
                points: log
                    .steps
                    .iter()
                    .filter_map(|s| s.l_gp.map(|g| (s.step as f64, g)))
                    .collect(),
            });
        }
        LineChart {
            title: "Training losses".into(),
            x_label: "step".into(),
            y_label: "loss".into(),
            series,
        }
    };
    let out = output_path(&a.out);
    write_file(&out, chart.to_svg().as_bytes())?;
    write_manifest(&manifest_path(&out), "plot", argv, None, json!({ "input": a.input }))?;
    stdout_line(&format!("out={}", out.display()))
}
