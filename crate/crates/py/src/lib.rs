//! Python bindings. Configurations and reports cross the boundary as JSON
//! (parsed into dicts on the Python side); images are flat row-major lists.

use std::path::PathBuf;

use gabril::autodiff::Tensor;
use gabril::envsim::{self, EnvConfig};
use gabril::evaluator::{self, EvalVariant};
use gabril::gaze::{self, GazeSample, MaskParams};
use gabril::io;
use gabril::model::PolicyModel;
use gabril::trainer::{self, GazeDataset, TrainConfig};
use gabril::{Error, Result};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyAny;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn parse<T: serde::de::DeserializeOwned>(json: Option<&str>, default: T) -> PyResult<T> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(default),
    }
}

/// `(observation, action, gaze)` of one recorded frame.
type Frame = (Vec<f64>, usize, Option<(f64, f64)>);

fn image(values: Vec<f64>, model: &PolicyModel) -> PyResult<Tensor> {
    let c = &model.config;
    Tensor::new([c.in_channels, c.input_height, c.input_width], values).map_err(to_py)
}

/// Demonstrations collected from the scripted expert.
#[pyclass(module = "gabril_py", frozen)]
struct Dataset {
    inner: io::Dataset,
}

#[pymethods]
impl Dataset {
    /// Collects `episodes` expert episodes. `env_json` overrides the default
    /// environment configuration.
    #[staticmethod]
    #[pyo3(signature = (episodes, seed=0, env_json=None))]
    fn collect(episodes: usize, seed: u64, env_json: Option<&str>) -> PyResult<Self> {
        let env: EnvConfig = parse(env_json, EnvConfig::default())?;
        let records = envsim::collect(&env, episodes, seed).map_err(to_py)?;
        let inner = io::Dataset::from_records(env, records).map_err(to_py)?;
        Ok(Dataset { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Dataset {
            inner: io::load_dataset(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_dataset(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn episodes(&self) -> usize {
        self.inner.episodes.len()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames()
    }

    fn env_config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.config)
    }

    /// Fraction of consecutive frames whose action repeats the previous one.
    fn shortcut_predictiveness(&self) -> f64 {
        envsim::shortcut_predictiveness(&self.inner.episodes)
    }

    /// `(observation, action, gaze)` of one frame; gaze is `None` on dropout.
    fn frame(&self, episode: usize, index: usize) -> PyResult<Frame> {
        let rec = self
            .inner
            .episodes
            .get(episode)
            .ok_or_else(|| PyValueError::new_err(format!("no episode {episode}")))?;
        if index >= rec.len() {
            return Err(PyValueError::new_err(format!(
                "episode {episode} has {} frames",
                rec.len()
            )));
        }
        let g = &rec.gaze[index];
        Ok((
            rec.observations[index].data().to_vec(),
            rec.actions[index],
            g.valid.then_some((g.x, g.y)),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.frames()
    }
}

/// A trained (or freshly initialised) policy with its gaze head.
#[pyclass(module = "gabril_py", frozen)]
struct Model {
    inner: PolicyModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (seed=0, config_json=None))]
    fn init(seed: u64, config_json: Option<&str>) -> PyResult<Self> {
        let cfg = parse(config_json, TrainConfig::default().model)?;
        Ok(Model {
            inner: PolicyModel::init(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model {
            inner: io::load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.config)
    }

    /// Action distributions for a list of flat images.
    fn action_probs(&self, images: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let tensors = images
            .into_iter()
            .map(|v| image(v, &self.inner))
            .collect::<PyResult<Vec<_>>>()?;
        let refs: Vec<&Tensor> = tensors.iter().collect();
        self.inner.action_probs(&refs).map_err(to_py)
    }

    /// Predicted gaze field at input resolution, flat row-major.
    fn predict_gaze(&self, image_values: Vec<f64>) -> PyResult<Vec<f64>> {
        let img = image(image_values, &self.inner)?;
        Ok(self.inner.predict_gaze(&img).map_err(to_py)?.field)
    }

    /// Closed-loop score on TriggerWorld. `variant` is one of `normal`,
    /// `confounded-train`, `confounded-shifted`.
    #[pyo3(signature = (variant="confounded-shifted", episodes=100, seed=0, env_json=None))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        variant: &str,
        episodes: usize,
        seed: u64,
        env_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let env = parse(env_json, EnvConfig::default())?;
        let variant: EvalVariant = variant.parse().map_err(to_py)?;
        let report = evaluator::rollout(&self.inner, &env, variant, episodes, seed).map_err(to_py)?;
        json_to_py(py, &report)
    }

    /// Mean total-variation distance between action distributions under
    /// interventions on the previous-action indicator.
    #[pyo3(signature = (probes=100, seed=0, env_json=None))]
    fn intervention_sensitivity<'py>(
        &self,
        py: Python<'py>,
        probes: usize,
        seed: u64,
        env_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let env = parse(env_json, EnvConfig::default())?;
        let report = evaluator::intervention_sensitivity(&self.inner, &env, probes, seed).map_err(to_py)?;
        json_to_py(py, &report)
    }
}

/// Trains on `dataset`. `config_json` is a full training configuration; the
/// keyword arguments override its fields. Returns the best model by
/// validation loss and the metrics log.
#[pyfunction]
#[pyo3(signature = (dataset, config_json=None, method=None, lam=None, gaze_fraction=None, epochs=None, seed=None))]
#[allow(clippy::too_many_arguments)]
fn train<'py>(
    py: Python<'py>,
    dataset: &Dataset,
    config_json: Option<&str>,
    method: Option<&str>,
    lam: Option<f64>,
    gaze_fraction: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
) -> PyResult<(Model, Bound<'py, PyAny>)> {
    let mut cfg: TrainConfig = parse(config_json, TrainConfig::default())?;
    cfg.env = dataset.inner.config;
    if let Some(m) = method {
        cfg.method = m.parse().map_err(to_py)?;
    }
    cfg.lambda = lam.unwrap_or(cfg.lambda);
    cfg.gaze_fraction = gaze_fraction.unwrap_or(cfg.gaze_fraction);
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.seed = seed.unwrap_or(cfg.seed);
    let outcome = py
        .detach(|| -> Result<_> {
            let data = GazeDataset::from_records(&dataset.inner.episodes, &cfg.mask, cfg.target_norm)?;
            trainer::train(&cfg, &data)
        })
        .map_err(to_py)?;
    let log = json_to_py(py, &outcome.log)?;
    Ok((Model { inner: outcome.best }, log))
}

/// Max-normalised gaze mask for frame `index` of a gaze stream. Samples are
/// `(x, y)` pixel coordinates or `None` for tracker dropout. Returns `None`
/// when the whole window is dropout.
#[pyfunction]
#[pyo3(signature = (samples, index, height, width, alpha=0.7, beta=0.99, gamma=15.0, window=7))]
#[allow(clippy::too_many_arguments)]
fn gaze_mask(
    samples: Vec<Option<(f64, f64)>>,
    index: usize,
    height: usize,
    width: usize,
    alpha: f64,
    beta: f64,
    gamma: f64,
    window: usize,
) -> PyResult<Option<Vec<f64>>> {
    let params = MaskParams {
        alpha,
        beta,
        gamma,
        window,
    };
    let stream: Vec<GazeSample> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| match s {
            Some((x, y)) => GazeSample::new(i, *x, *y),
            None => GazeSample::dropout(i),
        })
        .collect();
    match gaze::raw_mask(&stream, index, &params, (height, width)).map_err(to_py)? {
        Some(field) => Ok(Some(gaze::normalize(&field).map_err(to_py)?.values().to_vec())),
        None => Ok(None),
    }
}

/// Advantage over BC, as a fraction.
#[pyfunction]
fn abc(score: f64, baseline: f64) -> PyResult<f64> {
    evaluator::abc(score, baseline).map_err(to_py)
}

/// Default configurations as dicts.
#[pyfunction]
fn default_train_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &TrainConfig::default())
}

#[pyfunction]
fn default_env_config(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    json_to_py(py, &EnvConfig::default())
}

#[pymodule]
fn gabril_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(gaze_mask, m)?)?;
    m.add_function(wrap_pyfunction!(abc, m)?)?;
    m.add_function(wrap_pyfunction!(default_train_config, m)?)?;
    m.add_function(wrap_pyfunction!(default_env_config, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
