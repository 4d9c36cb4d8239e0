//! Experiment commands behind the `trajgan` binary: dataset generation,
//! training with checkpoints, and evaluation with optional refinement.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::{canonical_hash, ConfigError, DataKind, ExperimentConfig};
use crate::discriminator::DiscVariant;
use crate::evalkit::{self, EvalConfig, MetricError, MetricsReport};
use crate::generator::{GenError, Generator};
use crate::refine::{refine_dataset, RefineError, RefinementReport};
use crate::scene::{load_scenes, save_scenes, HorizonSpec, Scene, SceneError, TrajectoryBundle};
use crate::seeding;
use crate::synth::{generate_dataset, generate_forking_scene, ForkingScene, SynthError};
use crate::training::{train, TrainError, TrainState, TrainingLog};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Usage(String),
}

impl RunError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            RunError::Config(_) => "config",
            RunError::Checkpoint(CheckpointError::Version { .. }) => "version_mismatch",
            RunError::Checkpoint(_) => "checkpoint",
            RunError::Scene(_) => "data",
            RunError::Synth(_) => "generation",
            RunError::Train(_) => "training",
            RunError::Gen(_) => "generator",
            RunError::Metric(_) => "metric",
            RunError::Refine(_) => "refine",
            RunError::Io { .. } => "io",
            RunError::Json(_) => "json",
            RunError::Usage(_) => "usage",
        }
    }

    /// One-line JSON description for the command line.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({"error": self.kind(), "message": self.to_string()}).to_string()
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T, RunError> {
    r.map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunError> {
    io(path, std::fs::write(path, contents))
}

fn read(path: &Path) -> Result<String, RunError> {
    io(path, std::fs::read_to_string(path))
}

fn sha256_file(path: &Path) -> Result<String, RunError> {
    Ok(hex::encode(Sha256::digest(io(path, std::fs::read(path))?)))
}

pub const SPLITS: [&str; 3] = ["train", "val", "test"];

pub fn split_path(data_dir: &Path, split: &str) -> PathBuf {
    data_dir.join(format!("{split}.ndjson"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub name: String,
    pub count: usize,
    pub seed: u64,
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub kind: DataKind,
    pub horizon: HorizonSpec,
    pub splits: Vec<SplitInfo>,
    /// Hash over every other field.
    pub manifest_hash: String,
}

impl Manifest {
    fn compute_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("object").remove("manifest_hash");
        canonical_hash(&v)
    }

    pub fn load(data_dir: &Path) -> Result<Self, RunError> {
        Ok(serde_json::from_str(&read(&data_dir.join("manifest.json"))?)?)
    }
}

/// Writes train/val/test splits generated from disjoint seed streams, the
/// config snapshot and a manifest.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Manifest, RunError> {
    cfg.validate()?;
    io(out, std::fs::create_dir_all(out))?;
    let counts = [cfg.data.n_train, cfg.data.n_val, cfg.data.n_test];
    let mut splits = Vec::new();
    match cfg.data.kind {
        DataKind::Synthetic => {
            for (i, (name, n)) in SPLITS.iter().zip(counts).enumerate() {
                let seed = seeding::derive_seed(cfg.seed, "data", i as u64);
                let scenes = generate_dataset(&cfg.world, n, seed)?;
                let path = split_path(out, name);
                save_scenes(&scenes, &path)?;
                splits.push((name, n, seed, path));
            }
        }
        DataKind::Forking => {
            let seed = seeding::derive_seed(cfg.seed, "data", 0);
            let fork = generate_forking_scene(&cfg.data.forking, seed)?;
            let all = fork.training_scenes();
            // every split draws from the same forking distribution
            let parts = [&all[..cfg.data.n_train], &all[..cfg.data.n_val.min(all.len())], &all[..cfg.data.n_test.min(all.len())]];
            for (name, scenes) in SPLITS.iter().zip(parts) {
                let path = split_path(out, name);
                save_scenes(scenes, &path)?;
                splits.push((name, scenes.len(), seed, path));
            }
            write(&out.join("forking.json"), serde_json::to_string(&fork)?)?;
        }
    }
    let splits = splits
        .into_iter()
        .map(|(name, count, seed, path)| {
            Ok(SplitInfo {
                name: name.to_string(),
                count,
                seed,
                file: path.file_name().expect("file").to_string_lossy().into_owned(),
                sha256: sha256_file(&path)?,
            })
        })
        .collect::<Result<Vec<_>, RunError>>()?;
    let mut manifest = Manifest {
        config_hash: cfg.hash(),
        kind: cfg.data.kind,
        horizon: cfg.horizon,
        splits,
        manifest_hash: String::new(),
    };
    manifest.manifest_hash = manifest.compute_hash();
    write(&out.join("config.json"), cfg.to_json())?;
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    info!("wrote dataset to {} ({:?})", out.display(), counts);
    Ok(manifest)
}

/// Loads one split, checking the dataset horizon when a manifest exists.
pub fn load_split(data_dir: &Path, split: &str, horizon: HorizonSpec) -> Result<Vec<Scene>, RunError> {
    if let Ok(m) = Manifest::load(data_dir) {
        if m.horizon != horizon {
            return Err(RunError::Usage(format!(
                "horizon mismatch: data has {}+{}, model expects {}+{}",
                m.horizon.t_obs, m.horizon.t_pred_len, horizon.t_obs, horizon.t_pred_len
            )));
        }
    }
    Ok(load_scenes(split_path(data_dir, split), horizon)?)
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: Option<usize>,
    pub best_val_col: Option<f64>,
    pub config_hash: String,
}

/// Trains from scratch or from `resume`, writing `last.ckpt` after every
/// epoch, `best.ckpt` whenever validation Col improves, and the log.
pub fn train_cmd(cfg: &ExperimentConfig, data_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<(TrainState, TrainSummary), RunError> {
    let (cfg, mut state) = match resume {
        Some(p) => {
            let (ck_cfg, state) = checkpoint::load(p)?;
            let mut want = ck_cfg.clone();
            want.train.epochs = cfg.train.epochs;
            if want != *cfg {
                return Err(RunError::Usage("resume config differs from the checkpoint's (only train.epochs may change)".into()));
            }
            (cfg.clone(), state)
        }
        None => {
            cfg.validate()?;
            (cfg.clone(), checkpoint::init_state(cfg)?)
        }
    };
    let train_set = load_split(data_dir, "train", cfg.horizon)?;
    let val = load_split(data_dir, "val", cfg.horizon)?;
    io(out, std::fs::create_dir_all(out))?;
    write(&out.join("config.json"), cfg.to_json())?;
    let mut tc = cfg.train.clone();
    tc.seed = cfg.seed;
    let last = out.join(LAST_CHECKPOINT);
    let best = out.join(BEST_CHECKPOINT);
    let log_path = out.join("log.jsonl");
    train(&mut state, &train_set, &val, &tc, |s| {
        let save = |p: &Path| checkpoint::save(p, &cfg, s).map_err(|e| e.to_string());
        save(&last)?;
        if is_new_best(&s.log) {
            save(&best)?;
        }
        std::fs::write(&log_path, s.log.to_jsonl()).map_err(|e| e.to_string())
    })?;
    let (best_epoch, best_val_col) = best_of(&state.log).unzip();
    if best_epoch.is_none() {
        checkpoint::save(&best, &cfg, &state)?;
    }
    write(&log_path, state.log.to_jsonl())?;
    let summary = TrainSummary {
        epochs: state.epoch,
        best_epoch,
        best_val_col,
        config_hash: cfg.hash(),
    };
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok((state, summary))
}

/// Epoch with the lowest validation Col; ties keep the earliest.
pub fn best_of(log: &TrainingLog) -> Option<(usize, f64)> {
    log.epochs
        .iter()
        .filter_map(|e| e.val_col.map(|c| (e.epoch, c)))
        .fold(None, |acc: Option<(usize, f64)>, (e, c)| match acc {
            Some((_, b)) if b <= c => acc,
            _ => Some((e, c)),
        })
}

fn is_new_best(log: &TrainingLog) -> bool {
    match (log.epochs.last(), best_of(log)) {
        (Some(last), Some((e, _))) => last.epoch == e,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sganv2")]
    Sganv2,
    #[serde(rename = "sganv2-l")]
    Sganv2L,
    #[serde(rename = "up")]
    Up,
    #[serde(rename = "cv")]
    Cv,
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sganv2" => Ok(ModelKind::Sganv2),
            "sganv2-l" => Ok(ModelKind::Sganv2L),
            "up" => Ok(ModelKind::Up),
            "cv" => Ok(ModelKind::Cv),
            _ => Err(format!("unknown model {s:?}; expected sganv2, sganv2-l, up or cv")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub model: ModelKind,
    pub checkpoint: Option<PathBuf>,
    pub data_dir: PathBuf,
    /// Overrides the config's `eval.ks`.
    pub ks: Option<Vec<usize>>,
    pub refine: bool,
    pub split: String,
    /// Overrides the root seed of the sampling stream.
    pub seed: Option<u64>,
    /// Used when no checkpoint supplies one.
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub model: ModelKind,
    pub metrics: MetricsReport,
    pub refined_metrics: Option<MetricsReport>,
    pub refinement: Option<RefinementReport>,
    #[serde(skip)]
    pub bundles: Vec<TrajectoryBundle>,
    #[serde(skip)]
    pub refined_bundles: Option<Vec<TrajectoryBundle>>,
}

/// `k` samples per scene from a trained generator, drawn from the
/// `"eval"` stream in chunks of 64 scenes.
pub fn predict(gen: &Generator, scenes: &[Scene], k: usize, seed: u64) -> Result<Vec<TrajectoryBundle>, RunError> {
    let mut rng = seeding::stream(seed, "eval", 0);
    let mut out = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(64) {
        out.extend(gen.predict_many(chunk, k, &mut rng)?);
    }
    Ok(out)
}

/// Metrics for bundles, with mode coverage when the dataset is a forking
/// scene.
pub fn metrics(scenes: &[Scene], bundles: &[TrajectoryBundle], horizon: HorizonSpec, cfg: &EvalConfig, fork: Option<&ForkingScene>) -> Result<MetricsReport, RunError> {
    let mut report = evalkit::evaluate(scenes, bundles, horizon, cfg)?;
    if let Some(f) = fork {
        let cov: Vec<f64> = bundles.iter().map(|b| evalkit::mode_coverage(b, &f.centers, f.radius)).collect::<Result<_, _>>()?;
        report.mode_coverage = Some(cov.iter().sum::<f64>() / cov.len().max(1) as f64);
    }
    Ok(report)
}

fn load_fork(data_dir: &Path) -> Result<Option<ForkingScene>, RunError> {
    let p = data_dir.join("forking.json");
    if p.exists() {
        Ok(Some(serde_json::from_str(&read(&p)?)?))
    } else {
        Ok(None)
    }
}

fn load_disc(req: &EvalRequest) -> Result<Option<(ExperimentConfig, TrainState)>, RunError> {
    let Some(p) = &req.checkpoint else { return Ok(None) };
    let (cfg, state) = checkpoint::load(p)?;
    let want = match req.model {
        ModelKind::Sganv2 => Some(DiscVariant::Transformer),
        ModelKind::Sganv2L => Some(DiscVariant::Recurrent),
        _ => None,
    };
    if let Some(v) = want {
        if cfg.discriminator.variant != v {
            return Err(RunError::Usage(format!("checkpoint discriminator is {:?}, model {:?} needs {v:?}", cfg.discriminator.variant, req.model)));
        }
    }
    Ok(Some((cfg, state)))
}

/// Evaluates a trained model or a baseline, optionally refining the
/// colliding samples with the checkpoint's discriminator.
pub fn eval_cmd(req: &EvalRequest) -> Result<EvalOutput, RunError> {
    let loaded = load_disc(req)?;
    let cfg = loaded.as_ref().map_or(&req.config, |(c, _)| c);
    let mut eval_cfg = cfg.eval.clone();
    if let Some(ks) = &req.ks {
        eval_cfg.ks = ks.clone();
    }
    if eval_cfg.ks.is_empty() || eval_cfg.ks.contains(&0) {
        return Err(RunError::Usage("k list must be non-empty with every k >= 1".into()));
    }
    let k = *eval_cfg.ks.iter().max().expect("non-empty");
    let horizon = cfg.horizon;
    let scenes = load_split(&req.data_dir, &req.split, horizon)?;
    let fork = load_fork(&req.data_dir)?;
    let bundles = match req.model {
        ModelKind::Sganv2 | ModelKind::Sganv2L => {
            let (_, state) = loaded.as_ref().ok_or_else(|| RunError::Usage("model needs --checkpoint".into()))?;
            predict(&state.gen, &scenes, k, req.seed.unwrap_or(cfg.seed))?
        }
        ModelKind::Up => scenes.iter().map(|s| evalkit::uniform_predictor(s, horizon)).collect::<Result<_, _>>()?,
        ModelKind::Cv => scenes
            .iter()
            .map(|s| {
                // deterministic, so every top-k equals top-1
                let mut b = evalkit::constant_velocity(s, horizon)?;
                b.samples = vec![b.samples[0].clone(); k];
                b.neighbors = vec![b.neighbors[0].clone(); k];
                Ok(b)
            })
            .collect::<Result<_, MetricError>>()?,
    };
    let report = metrics(&scenes, &bundles, horizon, &eval_cfg, fork.as_ref())?;
    let (refined_metrics, refinement, refined_bundles) = if req.refine {
        let (_, state) = loaded.as_ref().ok_or_else(|| RunError::Usage("--refine needs a checkpoint with a discriminator".into()))?;
        let (refined, rep) = refine_dataset(&state.disc, &scenes, &bundles, horizon, &cfg.refine)?;
        let m = metrics(&scenes, &refined, horizon, &eval_cfg, fork.as_ref())?;
        (Some(m), Some(rep), Some(refined))
    } else {
        (None, None, None)
    };
    Ok(EvalOutput {
        model: req.model,
        metrics: report,
        refined_metrics,
        refinement,
        bundles,
        refined_bundles,
    })
}

/// Writes an evaluation's reports and predictions under `out`.
pub fn write_eval(out: &Path, e: &EvalOutput) -> Result<(), RunError> {
    io(out, std::fs::create_dir_all(out))?;
    write(&out.join("metrics.json"), e.metrics.to_json())?;
    write(&out.join("predictions.json"), serde_json::to_string(&e.bundles)?)?;
    if let (Some(m), Some(r), Some(b)) = (&e.refined_metrics, &e.refinement, &e.refined_bundles) {
        write(&out.join("metrics_refined.json"), m.to_json())?;
        write(&out.join("predictions_refined.json"), serde_json::to_string(b)?)?;
        write(&out.join("refinement.jsonl"), r.to_jsonl())?;
        let summary = serde_json::json!({
            "config": r.config,
            "col_before": r.col_before,
            "col_after": r.col_after,
            "refined_samples": r.refined_samples,
        });
        write(&out.join("refinement_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok(())
}

pub fn read_bundles(path: &Path) -> Result<Vec<TrajectoryBundle>, RunError> {
    Ok(serde_json::from_str(&read(path)?)?)
}
