use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use trajgan_core::config::ExperimentConfig;
use trajgan_core::discriminator::DiscVariant;
use trajgan_core::plot::plot_scenes;
use trajgan_core::runner::{self, EvalRequest, Manifest, ModelKind, RunError};

#[derive(Parser)]
#[command(name = "trajgan", version, about = "Adversarial trajectory forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Synthetic,
    Forking,
    Tiny,
}

#[derive(Clone, Copy, ValueEnum)]
enum Disc {
    Transformer,
    Recurrent,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults to the chosen preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "synthetic")]
    preset: Preset,
    /// Root seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig, RunError> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => match self.preset {
                Preset::Synthetic => ExperimentConfig::synthetic(),
                Preset::Forking => ExperimentConfig::forking(),
                Preset::Tiny => ExperimentConfig::tiny(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/val/test splits and a manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator/discriminator pair.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Drop the neighbour grid from both networks.
        #[arg(long)]
        no_interaction: bool,
        #[arg(long, value_enum)]
        disc: Option<Disc>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a baseline.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "sganv2")]
        model: ModelKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated k values for Top-k metrics.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        /// Refine colliding samples with the checkpoint's discriminator.
        #[arg(long)]
        refine: bool,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw scenes with predictions as SVG files.
    Plot {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        refined: Option<PathBuf>,
        /// Plot at most this many scenes.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, RunError> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let m = runner::gen_data(&cfg.load()?, &out)?;
            Ok(serde_json::to_value(m)?)
        }
        Command::Train {
            cfg,
            data,
            out,
            no_interaction,
            disc,
            epochs,
            resume,
        } => {
            let mut c = match &resume {
                Some(p) if cfg.config.is_none() => trajgan_core::checkpoint::read_header(p)?.config,
                _ => cfg.load()?,
            };
            if no_interaction {
                c = c.without_interaction();
            }
            if let Some(d) = disc {
                c = c.with_disc_variant(match d {
                    Disc::Transformer => DiscVariant::Transformer,
                    Disc::Recurrent => DiscVariant::Recurrent,
                });
            }
            if let Some(e) = epochs {
                c.train.epochs = e;
            }
            let (_, summary) = runner::train_cmd(&c, &data, &out, resume.as_deref())?;
            Ok(serde_json::to_value(summary)?)
        }
        Command::Eval {
            cfg,
            model,
            checkpoint,
            data,
            k,
            refine,
            split,
            out,
        } => {
            let req = EvalRequest {
                model,
                checkpoint,
                data_dir: data,
                ks: k,
                refine,
                split,
                seed: cfg.seed,
                config: cfg.load()?,
            };
            let e = runner::eval_cmd(&req)?;
            eprint!("{}", e.metrics.table());
            if let Some(m) = &e.refined_metrics {
                eprintln!("after refinement:");
                eprint!("{}", m.table());
            }
            if let Some(o) = &out {
                runner::write_eval(o, &e)?;
            }
            Ok(serde_json::json!({
                "model": e.model,
                "metrics": {"top_k": e.metrics.top_k, "col_rate": e.metrics.col_rate, "dist2goal": e.metrics.dist2goal, "mode_coverage": e.metrics.mode_coverage},
                "refined": e.refined_metrics.as_ref().map(|m| serde_json::json!({"top_k": m.top_k, "col_rate": m.col_rate, "dist2goal": m.dist2goal, "mode_coverage": m.mode_coverage})),
            }))
        }
        Command::Plot {
            data,
            split,
            predictions,
            refined,
            limit,
            out,
        } => {
            let horizon = Manifest::load(&data)?.horizon;
            let mut scenes = runner::load_split(&data, &split, horizon)?;
            scenes.truncate(limit.unwrap_or(usize::MAX));
            let p = predictions.map(|p| runner::read_bundles(&p)).transpose()?.unwrap_or_default();
            let r = refined.map(|p| runner::read_bundles(&p)).transpose()?.unwrap_or_default();
            let files = plot_scenes(&scenes, horizon, &p, &r, &out).map_err(|source| RunError::Io { path: out.clone(), source })?;
            Ok(serde_json::json!({"images": files.len(), "out": out}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            println!("{}", e.to_json_line());
            ExitCode::FAILURE
        }
    }
}
