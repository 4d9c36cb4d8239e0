//! Python bindings: configs, scenes, prediction bundles, models, metrics
//! and the experiment commands.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use trajgan_core::checkpoint;
use trajgan_core::config::ExperimentConfig;
use trajgan_core::evalkit;
use trajgan_core::refine;
use trajgan_core::runner::{self, EvalRequest, ModelKind};
use trajgan_core::scene::{self as core_scene, HorizonSpec};
use trajgan_core::sim::AgentContext;
use trajgan_core::synth;
use trajgan_core::training::{self, TrainState};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

/// Experiment configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(s) => ExperimentConfig::from_json(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => ExperimentConfig::synthetic(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn synthetic() -> Self {
        PyConfig {
            inner: ExperimentConfig::synthetic(),
        }
    }

    #[staticmethod]
    fn forking() -> Self {
        PyConfig {
            inner: ExperimentConfig::forking(),
        }
    }

    #[staticmethod]
    fn tiny() -> Self {
        PyConfig {
            inner: ExperimentConfig::tiny(),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn horizon(&self) -> (usize, usize) {
        (self.inner.horizon.t_obs, self.inner.horizon.t_pred_len)
    }

    fn without_interaction(&self) -> Self {
        PyConfig {
            inner: self.inner.clone().without_interaction(),
        }
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(|e| PyValueError::new_err(e.to_string()))
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// One forecasting scene.
#[pyclass(name = "Scene", from_py_object)]
#[derive(Clone)]
struct PyScene {
    inner: core_scene::Scene,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn scene_id(&self) -> i64 {
        self.inner.scene_id
    }

    #[getter]
    fn primary_id(&self) -> i64 {
        self.inner.primary_id
    }

    #[getter]
    fn n_pedestrians(&self) -> usize {
        self.inner.pedestrians.len()
    }

    /// Positions per pedestrian; missing steps are `None`.
    fn positions(&self) -> Vec<(i64, Vec<Option<(f64, f64)>>)> {
        self.inner
            .pedestrians
            .iter()
            .map(|t| (t.id, t.positions.iter().map(|p| p.map(|q| (q[0], q[1]))).collect()))
            .collect()
    }

    fn goal(&self, id: i64) -> Option<(f64, f64)> {
        self.inner.goal(id).map(|g| (g[0], g[1]))
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }

    #[staticmethod]
    fn from_json(s: &str) -> PyResult<Self> {
        Ok(PyScene {
            inner: serde_json::from_str(s).map_err(|e| PyValueError::new_err(e.to_string()))?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Scene(id={}, pedestrians={}, steps={})", self.inner.scene_id, self.inner.pedestrians.len(), self.inner.n_steps())
    }
}

/// `k` predicted futures of a scene's primary pedestrian.
#[pyclass(name = "Bundle", from_py_object)]
#[derive(Clone)]
struct PyBundle {
    inner: core_scene::TrajectoryBundle,
}

#[pymethods]
impl PyBundle {
    #[getter]
    fn scene_id(&self) -> i64 {
        self.inner.scene_id
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k()
    }

    fn samples(&self) -> Vec<Vec<(f64, f64)>> {
        self.inner.samples.iter().map(|s| s.iter().map(|p| (p[0], p[1])).collect()).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        json(&self.inner)
    }
}

fn scenes_of(v: &[PyScene]) -> Vec<core_scene::Scene> {
    v.iter().map(|s| s.inner.clone()).collect()
}

fn bundles_of(v: &[PyBundle]) -> Vec<core_scene::TrajectoryBundle> {
    v.iter().map(|b| b.inner.clone()).collect()
}

fn wrap_bundles(v: Vec<core_scene::TrajectoryBundle>) -> Vec<PyBundle> {
    v.into_iter().map(|inner| PyBundle { inner }).collect()
}

fn horizon(t_obs: usize, t_pred_len: usize) -> PyResult<HorizonSpec> {
    HorizonSpec::new(t_obs, t_pred_len).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Generator, discriminator and optimizer state.
#[pyclass(name = "Model")]
struct PyModel {
    config: ExperimentConfig,
    state: TrainState,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        config.validate()?;
        Ok(PyModel {
            config: config.inner.clone(),
            state: checkpoint::init_state(&config.inner).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, state) = checkpoint::load(path).map_err(err)?;
        Ok(PyModel { config, state })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save(path, &self.config, &self.state).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.state.epoch
    }

    /// SHA-256 over every generator and discriminator parameter.
    fn fingerprint(&self) -> (String, String) {
        (self.state.gen.params.fingerprint(), self.state.disc.params.fingerprint())
    }

    /// Trains up to `epochs` (default: the config's) and returns the log as
    /// JSON lines.
    #[pyo3(signature = (train, val, epochs=None))]
    fn train(&mut self, py: Python<'_>, train: Vec<PyScene>, val: Vec<PyScene>, epochs: Option<usize>) -> PyResult<String> {
        let mut tc = self.config.train.clone();
        tc.seed = self.config.seed;
        if let Some(e) = epochs {
            tc.epochs = e;
        }
        let (tr, va) = (scenes_of(&train), scenes_of(&val));
        let state = &mut self.state;
        py.detach(|| training::train(state, &tr, &va, &tc, |_| Ok(()))).map_err(err)?;
        Ok(self.state.log.to_jsonl())
    }

    fn predict(&self, py: Python<'_>, scenes: Vec<PyScene>, k: usize, seed: u64) -> PyResult<Vec<PyBundle>> {
        let s = scenes_of(&scenes);
        let gen = &self.state.gen;
        Ok(wrap_bundles(py.detach(|| runner::predict(gen, &s, k, seed)).map_err(err)?))
    }

    /// Discriminator score of a full primary trajectory (observed + future).
    fn score(&self, scene: &PyScene, future: Vec<(f64, f64)>) -> PyResult<f64> {
        let h = self.config.horizon;
        let ctx = AgentContext::from_scene(&scene.inner, scene.inner.primary_id, h, None).ok_or_else(|| PyValueError::new_err("primary not observed"))?;
        let traj: Vec<[f64; 2]> = ctx.obs.iter().copied().chain(future.iter().map(|p| [p.0, p.1])).collect();
        self.state.disc.score(&ctx, &traj).map_err(err)
    }

    /// Refines colliding samples; returns refined bundles and the report as
    /// JSON.
    fn refine(&self, py: Python<'_>, scenes: Vec<PyScene>, bundles: Vec<PyBundle>) -> PyResult<(Vec<PyBundle>, String)> {
        let (s, b) = (scenes_of(&scenes), bundles_of(&bundles));
        let (disc, h, rc) = (&self.state.disc, self.config.horizon, &self.config.refine);
        let (out, rep) = py.detach(|| refine::refine_dataset(disc, &s, &b, h, rc)).map_err(err)?;
        Ok((wrap_bundles(out), json(&rep)?))
    }
}

#[pyfunction]
fn generate_dataset(config: &PyConfig, n_scenes: usize, seed: u64) -> PyResult<Vec<PyScene>> {
    let scenes = synth::generate_dataset(&config.inner.world, n_scenes, seed).map_err(err)?;
    Ok(scenes.into_iter().map(|inner| PyScene { inner }).collect())
}

#[pyfunction]
fn uniform_predictor(scene: &PyScene, t_obs: usize, t_pred_len: usize) -> PyResult<PyBundle> {
    let inner = evalkit::uniform_predictor(&scene.inner, horizon(t_obs, t_pred_len)?).map_err(err)?;
    Ok(PyBundle { inner })
}

#[pyfunction]
fn constant_velocity(scene: &PyScene, t_obs: usize, t_pred_len: usize) -> PyResult<PyBundle> {
    let inner = evalkit::constant_velocity(&scene.inner, horizon(t_obs, t_pred_len)?).map_err(err)?;
    Ok(PyBundle { inner })
}

/// Metrics report as JSON.
#[pyfunction]
#[pyo3(signature = (scenes, bundles, t_obs, t_pred_len, ks=vec![3]))]
fn evaluate(scenes: Vec<PyScene>, bundles: Vec<PyBundle>, t_obs: usize, t_pred_len: usize, ks: Vec<usize>) -> PyResult<String> {
    let cfg = evalkit::EvalConfig {
        ks,
        ..evalkit::EvalConfig::default()
    };
    let r = evalkit::evaluate(&scenes_of(&scenes), &bundles_of(&bundles), horizon(t_obs, t_pred_len)?, &cfg).map_err(err)?;
    json(&r)
}

#[pyfunction]
#[pyo3(signature = (scenes, bundles, t_obs, t_pred_len, threshold=0.1))]
fn collision_rate(scenes: Vec<PyScene>, bundles: Vec<PyBundle>, t_obs: usize, t_pred_len: usize, threshold: f64) -> PyResult<f64> {
    let cfg = evalkit::CollisionConfig {
        threshold,
        substeps: None,
    };
    evalkit::collision_rate(&scenes_of(&scenes), &bundles_of(&bundles), horizon(t_obs, t_pred_len)?, &cfg).map_err(err)
}

/// `gen-data`: returns the manifest as JSON.
#[pyfunction]
fn gen_data(config: &PyConfig, out: PathBuf) -> PyResult<String> {
    json(&runner::gen_data(&config.inner, &out).map_err(err)?)
}

/// `train`: returns the training summary as JSON.
#[pyfunction]
#[pyo3(signature = (config, data, out, resume=None))]
fn train(py: Python<'_>, config: &PyConfig, data: PathBuf, out: PathBuf, resume: Option<PathBuf>) -> PyResult<String> {
    let cfg = config.inner.clone();
    let (_, summary) = py.detach(|| runner::train_cmd(&cfg, &data, &out, resume.as_deref())).map_err(err)?;
    json(&summary)
}

/// `eval`: returns metrics (and refinement results when requested) as JSON.
#[pyfunction]
#[pyo3(signature = (model, data, checkpoint=None, ks=None, refine=false, config=None))]
fn eval(
    py: Python<'_>,
    model: &str,
    data: PathBuf,
    checkpoint: Option<PathBuf>,
    ks: Option<Vec<usize>>,
    refine: bool,
    config: Option<PyConfig>,
) -> PyResult<String> {
    let req = EvalRequest {
        model: model.parse::<ModelKind>().map_err(PyValueError::new_err)?,
        checkpoint,
        data_dir: data,
        ks,
        refine,
        split: "test".into(),
        seed: None,
        config: config.map_or_else(ExperimentConfig::synthetic, |c| c.inner),
    };
    let out = py.detach(|| runner::eval_cmd(&req)).map_err(err)?;
    json(&out)
}

#[pymodule]
fn trajgan(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyBundle>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_predictor, m)?)?;
    m.add_function(wrap_pyfunction!(constant_velocity, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(collision_rate, m)?)?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(eval, m)?)?;
    Ok(())
}
