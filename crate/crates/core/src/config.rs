//! Experiment configuration: one JSON document aggregating every module's
//! settings, with cross-field validation and a content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::discriminator::{DiscVariant, DiscriminatorConfig};
use crate::evalkit::EvalConfig;
use crate::generator::GeneratorConfig;
use crate::refine::{RefineConfig, Trigger};
use crate::scene::HorizonSpec;
use crate::sim::SimConfig;
use crate::synth::{ForkingConfig, WorldConfig};
use crate::training::{Objective, TrainConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("config io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    /// Circle-crossing crowds from the social-force world.
    Synthetic,
    /// The single-pedestrian forking scene.
    Forking,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub kind: DataKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub forking: ForkingConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Synthetic,
            n_train: 1000,
            n_val: 100,
            n_test: 300,
            forking: ForkingConfig::default(),
        }
    }
}

/// Default locations used when the command line does not name one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub data_dir: String,
    pub run_dir: String,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: "data".into(),
            run_dir: "runs".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Root of every random stream (data, init, training noise, eval).
    pub seed: u64,
    pub horizon: HorizonSpec,
    pub data: DataConfig,
    pub world: WorldConfig,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

impl ExperimentConfig {
    /// Synthetic crowd experiment at the published synthetic dimensions.
    pub fn synthetic() -> Self {
        let horizon = HorizonSpec::default();
        ExperimentConfig {
            seed: 0,
            horizon,
            data: DataConfig::default(),
            world: WorldConfig {
                total_steps: horizon.total(),
                ..WorldConfig::default()
            },
            generator: GeneratorConfig {
                horizon,
                ..GeneratorConfig::default()
            },
            discriminator: DiscriminatorConfig {
                horizon,
                ..DiscriminatorConfig::default()
            },
            train: TrainConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalConfig {
                ks: vec![3, 20],
                ..EvalConfig::default()
            },
            paths: PathsConfig::default(),
        }
    }

    /// Forking-scene mode-collapse experiment.
    pub fn forking() -> Self {
        let forking = ForkingConfig::default();
        let horizon = HorizonSpec {
            t_obs: forking.t_obs,
            t_pred_len: forking.t_pred_len,
        };
        let sim = SimConfig {
            goal_embed_dim: None,
            ..SimConfig::default()
        };
        let mut cfg = Self::synthetic();
        cfg.horizon = horizon;
        cfg.world.total_steps = horizon.total();
        cfg.data = DataConfig {
            kind: DataKind::Forking,
            n_train: forking.mode_count * forking.samples_per_mode,
            n_val: 0,
            n_test: 1,
            forking,
        };
        cfg.generator = GeneratorConfig {
            hidden_dim: 32,
            sim: sim.clone(),
            horizon,
            ..GeneratorConfig::default()
        };
        cfg.discriminator.sim = sim;
        cfg.discriminator.horizon = horizon;
        cfg.train.variety_k = 4;
        cfg.train.objective = Objective::LsganGp;
        // one observed prefix and 200 futures: few batches per epoch
        cfg.train.lr_g = 1e-3;
        cfg.train.lr_d = 1e-3;
        cfg.train.epochs = 100;
        cfg.eval.ks = vec![20];
        // the scene has no neighbours, so every sample is refined
        cfg.refine.trigger = Trigger::All;
        cfg
    }

    /// Small networks and data for smoke tests.
    pub fn tiny() -> Self {
        let mut c = Self::synthetic();
        let sim = SimConfig {
            motion_embed_dim: 4,
            interaction_dim: 6,
            goal_embed_dim: Some(3),
            ..SimConfig::default()
        };
        c.data.n_train = 16;
        c.data.n_val = 4;
        c.data.n_test = 4;
        c.generator.hidden_dim = 8;
        c.generator.noise_dim = 4;
        c.generator.sim = sim.clone();
        c.discriminator.sim = sim;
        c.discriminator.n_layers = 1;
        c.discriminator.model_dim = 8;
        c.discriminator.ffn_dim = 8;
        c.discriminator.score_head_dims = vec![4];
        c.train.epochs = 2;
        c.train.batch_size = 8;
        c
    }

    /// Disables the grid interaction input of both networks.
    pub fn without_interaction(mut self) -> Self {
        self.generator.sim.interaction = false;
        self.discriminator.sim.interaction = false;
        self
    }

    pub fn with_disc_variant(mut self, variant: DiscVariant) -> Self {
        self.discriminator.variant = variant;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        self.horizon.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.generator.validate().map_err(|e| ConfigError::Invalid(format!("generator: {e}")))?;
        self.discriminator.validate().map_err(|e| ConfigError::Invalid(format!("discriminator: {e}")))?;
        self.train.validate().map_err(|e| ConfigError::Invalid(format!("train: {e}")))?;
        self.refine.validate().map_err(|e| ConfigError::Invalid(format!("refine: {e}")))?;
        if self.generator.horizon != self.horizon || self.discriminator.horizon != self.horizon {
            return bad("generator and discriminator horizons must equal the experiment horizon".into());
        }
        if self.generator.sim.interaction != self.discriminator.sim.interaction {
            return bad("interaction must be enabled or disabled in both networks".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must be non-empty with every k >= 1".into());
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            return bad("data.n_train and data.n_test must be >= 1".into());
        }
        match self.data.kind {
            DataKind::Synthetic => {
                self.world.validate().map_err(|e| ConfigError::Invalid(format!("world: {e}")))?;
                if self.world.total_steps != self.horizon.total() {
                    return bad(format!(
                        "world.total_steps {} must equal t_obs + t_pred_len = {}",
                        self.world.total_steps,
                        self.horizon.total()
                    ));
                }
            }
            DataKind::Forking => {
                let f = &self.data.forking;
                if f.t_obs != self.horizon.t_obs || f.t_pred_len != self.horizon.t_pred_len {
                    return bad("forking horizon must equal the experiment horizon".into());
                }
                if self.data.n_train > f.mode_count * f.samples_per_mode {
                    return bad("forking data.n_train exceeds mode_count * samples_per_mode".into());
                }
            }
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// SHA-256 of the canonical (sorted-key, compact) JSON form.
    pub fn hash(&self) -> String {
        canonical_hash(&serde_json::to_value(self).expect("serializable"))
    }
}

/// SHA-256 of a JSON value with object keys sorted at every level.
pub fn canonical_hash(v: &serde_json::Value) -> String {
    // serde_json's default map is ordered by key
    let canonical = serde_json::to_string(v).expect("serializable");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ExperimentConfig::synthetic().validate().unwrap();
        ExperimentConfig::forking().validate().unwrap();
        ExperimentConfig::synthetic().without_interaction().validate().unwrap();
        ExperimentConfig::tiny().validate().unwrap();
    }

    #[test]
    fn synthetic_preset_dimensions() {
        let c = ExperimentConfig::synthetic();
        assert_eq!(c.generator.sim.motion_embed_dim, 16);
        assert_eq!(c.generator.hidden_dim, 64);
        assert_eq!(c.generator.sim.interaction_dim, 64);
        assert_eq!(c.generator.sim.grid_cells_per_side, 12);
        assert_eq!(c.generator.sim.cell_resolution, 0.6);
        assert_eq!(c.discriminator.n_layers, 4);
        assert_eq!(c.train.lr_g, 3e-4);
        assert_eq!(c.train.lr_d, 1e-3);
        assert_eq!(c.train.epochs, 50);
        assert_eq!(c.refine.step_size, 0.01);
        assert_eq!(c.refine.max_iterations, 5);
    }

    #[test]
    fn forking_preset_dimensions() {
        let c = ExperimentConfig::forking();
        assert_eq!(c.generator.hidden_dim, 32);
        assert_eq!(c.generator.sim.motion_embed_dim, 16);
        assert_eq!(c.train.variety_k, 4);
        assert_eq!((c.horizon.t_obs, c.horizon.t_pred_len), (8, 13));
    }

    #[test]
    fn cross_field_checks() {
        let mut c = ExperimentConfig::synthetic();
        c.generator.horizon.t_pred_len = 8;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::synthetic();
        c.world.total_steps = 10;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::synthetic();
        c.discriminator.sim.interaction = false;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::synthetic();
        c.eval.ks = vec![];
        assert!(c.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_partial_documents() {
        let c = ExperimentConfig::forking();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        let p = ExperimentConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(p.seed, 7);
        assert_eq!(p.train, TrainConfig::default());
    }

    #[test]
    fn hash_ignores_key_order_and_tracks_content() {
        let c = ExperimentConfig::synthetic();
        let a = r#"{"seed": 3, "train": {"epochs": 4, "lr_g": 0.001}}"#;
        let b = r#"{"train": {"lr_g": 0.001, "epochs": 4}, "seed": 3}"#;
        let ca = ExperimentConfig::from_json(a).unwrap();
        let cb = ExperimentConfig::from_json(b).unwrap();
        assert_eq!(ca.hash(), cb.hash());
        assert_ne!(ca.hash(), c.hash());
        let mut d = c.clone();
        d.refine.score_threshold = 0.6;
        assert_ne!(d.hash(), c.hash());
        assert_eq!(c.hash(), ExperimentConfig::synthetic().hash());
    }
}
