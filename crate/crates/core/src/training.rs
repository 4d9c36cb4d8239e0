//! Adversarial training: least-squares objectives, the variety loss, an
//! optional gradient penalty on the discriminator, and the loop alternating
//! one discriminator update with several generator updates per batch.
//!
//! Neighbours follow their ground-truth futures in both the real and the
//! fake branch; only the primary pedestrian of each scene is predicted.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Mat, Var};
use crate::discriminator::{DiscError, Discriminator};
use crate::evalkit::{collision_rate, CollisionConfig, MetricError};
use crate::generator::{rows_of, GenError, Generator, NeighborMode};
use crate::nn::{accumulate, Adam, AdamConfig};
use crate::scene::{Point, Scene};
use crate::seeding;
use crate::sim::AgentContext;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss or gradient at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Disc(#[from] DiscError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("epoch callback failed: {0}")]
    Callback(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    #[serde(rename = "lsgan")]
    Lsgan,
    #[serde(rename = "lsgan+gp")]
    LsganGp,
}

/// Step decay: the rate is multiplied by `decay` every `step_size` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub step_size: usize,
    pub decay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_g: f64,
    pub lr_d: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub variety_k: usize,
    pub variety_weight: f64,
    pub g_steps_per_d_step: usize,
    pub objective: Objective,
    pub gp_weight: f64,
    pub seed: u64,
    pub lr_schedule: Option<LrSchedule>,
    pub adam: AdamConfig,
    pub val_collision: CollisionConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_g: 3e-4,
            lr_d: 1e-3,
            epochs: 50,
            batch_size: 32,
            variety_k: 1,
            variety_weight: 0.2,
            g_steps_per_d_step: 2,
            objective: Objective::Lsgan,
            gp_weight: 10.0,
            seed: 0,
            lr_schedule: None,
            adam: AdamConfig::default(),
            val_collision: CollisionConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr_g > 0.0 && self.lr_d > 0.0) {
            return bad("learning rates must be > 0");
        }
        if self.variety_k == 0 || self.batch_size == 0 {
            return bad("variety_k and batch_size must be >= 1");
        }
        if !(self.variety_weight >= 0.0) || !(self.gp_weight >= 0.0) {
            return bad("loss weights must be >= 0");
        }
        if let Some(s) = self.lr_schedule {
            if s.step_size == 0 || !(s.decay > 0.0) {
                return bad("lr schedule needs step_size >= 1 and decay > 0");
            }
        }
        Ok(())
    }

    fn lr_factor(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            Some(s) => s.decay.powi((epoch / s.step_size) as i32),
            None => 1.0,
        }
    }
}

/// `1/2 (D - 1)^2` averaged over the scores.
pub fn g_loss(scores: &[f64]) -> f64 {
    scores.iter().map(|d| 0.5 * (d - 1.0).powi(2)).sum::<f64>() / scores.len() as f64
}

/// `1/2 E[(D(real) - 1)^2] + 1/2 E[D(fake)^2]`.
pub fn d_loss(real: &[f64], fake: &[f64]) -> f64 {
    g_loss(real) + fake.iter().map(|d| 0.5 * d * d).sum::<f64>() / fake.len() as f64
}

/// Summed squared L2 error of a predicted future.
pub fn squared_error(pred: &[Point], gt: &[Point]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sum()
}

/// Minimum over the predictions of the summed squared L2 error.
pub fn variety_loss(predictions: &[Vec<Point>], gt: &[Point]) -> f64 {
    predictions.iter().map(|p| squared_error(p, gt)).fold(f64::INFINITY, f64::min)
}

pub fn g_loss_var(g: &mut Graph, scores: Var) -> Var {
    let d = g.add_scalar(scores, -1.0);
    let sq = g.square(d);
    let m = g.mean(sq);
    g.scale(m, 0.5)
}

pub fn d_loss_var(g: &mut Graph, real: Var, fake: Var) -> Var {
    let r = g_loss_var(g, real);
    let sq = g.square(fake);
    let m = g.mean(sq);
    let f = g.scale(m, 0.5);
    g.add(r, f)
}

/// Per-row summed squared error (`b x 1`) of per-step predictions against
/// per-row ground truth.
pub fn squared_error_var(g: &mut Graph, pred: &[Var], gt: &[&[Point]]) -> Var {
    let mut total: Option<Var> = None;
    for (t, p) in pred.iter().enumerate() {
        let target = g.constant(Mat::from_vec(gt.len(), 2, gt.iter().flat_map(|r| r[t]).collect()));
        let d = g.sub(*p, target);
        let sq = g.square(d);
        let s = g.sum_cols(sq);
        total = Some(match total {
            Some(acc) => g.add(acc, s),
            None => s,
        });
    }
    total.expect("at least one step")
}

/// Per-step position nodes for full trajectories `obs ++ future`.
fn trajectory_vars(g: &mut Graph, rows: &[&AgentContext], futures: &[&[Point]], variable_future: bool) -> (Vec<Var>, Vec<Var>) {
    let t_obs = rows[0].obs.len();
    let mut all = Vec::new();
    for t in 0..t_obs {
        all.push(g.constant(Mat::from_vec(rows.len(), 2, rows.iter().flat_map(|c| c.obs[t]).collect())));
    }
    let mut fut = Vec::new();
    for t in 0..futures[0].len() {
        let m = Mat::from_vec(rows.len(), 2, futures.iter().flat_map(|f| f[t]).collect());
        let v = if variable_future { g.variable(m) } else { g.constant(m) };
        fut.push(v);
        all.push(v);
    }
    (all, fut)
}

/// Penalty `mean_b (||grad_x D_b|| - 1)^2` at the given primary futures,
/// with the per-row input gradients.
pub fn gradient_penalty(disc: &Discriminator, rows: &[&AgentContext], futures: &[&[Point]]) -> (f64, Vec<Vec<Point>>) {
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g, false);
    let (all, fut) = trajectory_vars(&mut g, rows, futures, true);
    let s = disc.score_batch(&mut g, &bound, rows, &all);
    let total = g.sum(s);
    g.backward(total);
    let grads: Vec<Mat> = fut.iter().map(|v| g.grad_or_zeros(*v)).collect();
    let per_row: Vec<Vec<Point>> = (0..rows.len())
        .map(|b| grads.iter().map(|m| [m.get(b, 0), m.get(b, 1)]).collect())
        .collect();
    let pen = per_row
        .iter()
        .map(|r| (r.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>().sqrt() - 1.0).powi(2))
        .sum::<f64>()
        / rows.len() as f64;
    (pen, per_row)
}

fn param_grads_at(disc: &Discriminator, rows: &[&AgentContext], futures: &[Vec<Point>]) -> Vec<Vec<f64>> {
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g, true);
    let refs: Vec<&[Point]> = futures.iter().map(|f| f.as_slice()).collect();
    let (all, _) = trajectory_vars(&mut g, rows, &refs, false);
    let s = disc.score_batch(&mut g, &bound, rows, &all);
    let total = g.sum(s);
    g.backward(total);
    bound.grads(&g)
}

/// Penalty value and its gradient with respect to the discriminator
/// parameters. The mixed second derivative is taken as a central difference
/// of parameter gradients along the input direction the penalty pulls in.
pub fn gradient_penalty_param_grads(disc: &Discriminator, rows: &[&AgentContext], futures: &[&[Point]]) -> (f64, Vec<Vec<f64>>) {
    let (pen, gx) = gradient_penalty(disc, rows, futures);
    let b = rows.len() as f64;
    let w: Vec<Vec<Point>> = gx
        .iter()
        .map(|r| {
            let n = r.iter().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>().sqrt();
            let c = if n > 0.0 { 2.0 * (n - 1.0) / n / b } else { 0.0 };
            r.iter().map(|p| [c * p[0], c * p[1]]).collect()
        })
        .collect();
    let wn = w.iter().flatten().map(|p| p[0] * p[0] + p[1] * p[1]).sum::<f64>().sqrt();
    if wn == 0.0 {
        return (pen, disc.params.zeros_like());
    }
    let h = 1e-4 / wn;
    let shifted = |sign: f64| -> Vec<Vec<Point>> {
        futures
            .iter()
            .zip(&w)
            .map(|(f, wr)| f.iter().zip(wr).map(|(p, d)| [p[0] + sign * h * d[0], p[1] + sign * h * d[1]]).collect())
            .collect()
    };
    let plus = param_grads_at(disc, rows, &shifted(1.0));
    let minus = param_grads_at(disc, rows, &shifted(-1.0));
    let grads = plus
        .iter()
        .zip(&minus)
        .map(|(p, m)| p.iter().zip(m).map(|(a, c)| (a - c) / (2.0 * h)).collect())
        .collect();
    (pen, grads)
}

/// One epoch's summary, serialized as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub variety: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub val_col: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    pub fn to_jsonl(&self) -> String {
        self.epochs.iter().map(|e| serde_json::to_string(e).expect("serializable") + "\n").collect()
    }

    pub fn from_jsonl(s: &str) -> Result<Self, serde_json::Error> {
        let epochs = s.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect::<Result<_, _>>()?;
        Ok(TrainingLog { epochs })
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub gen: Generator,
    pub disc: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub epoch: usize,
    pub log: TrainingLog,
}

impl TrainState {
    pub fn new(gen: Generator, disc: Discriminator, adam: AdamConfig) -> Self {
        let opt_g = Adam::new(&gen.params, adam);
        let opt_d = Adam::new(&disc.params, adam);
        TrainState {
            gen,
            disc,
            opt_g,
            opt_d,
            epoch: 0,
            log: TrainingLog::default(),
        }
    }
}

fn all_finite(grads: &[Vec<f64>]) -> bool {
    grads.iter().flatten().all(|x| x.is_finite())
}

struct StepStats {
    loss: f64,
    a: f64,
    b: f64,
}

/// Discriminator loss on real and fake primary futures (fake values are
/// constants, so no gradient reaches the generator).
pub fn discriminator_step_loss(
    g: &mut Graph,
    disc: &Discriminator,
    bound: &crate::nn::Bound,
    rows: &[&AgentContext],
    real: &[&[Point]],
    fake: &[Var],
) -> (Var, Var, Var) {
    let b = rows.len();
    let fake: Vec<Var> = fake.iter().map(|v| g.detach(*v)).collect();
    let t_obs = rows[0].obs.len();
    let rows2: Vec<&AgentContext> = rows.iter().chain(rows.iter()).copied().collect();
    let mut all = Vec::new();
    for t in 0..t_obs {
        all.push(g.constant(Mat::from_vec(2 * b, 2, rows2.iter().flat_map(|c| c.obs[t]).collect())));
    }
    for (s, f) in fake.iter().enumerate() {
        let r = g.constant(Mat::from_vec(b, 2, real.iter().flat_map(|r| r[s]).collect()));
        all.push(g.concat_rows(&[r, *f]));
    }
    let scores = disc.score_batch(g, bound, &rows2, &all);
    let sr = g.slice_rows(scores, 0, b);
    let sf = g.slice_rows(scores, b, b);
    (d_loss_var(g, sr, sf), sr, sf)
}

fn d_step<R: Rng>(
    state: &mut TrainState,
    rows: &[&AgentContext],
    gts: &[&[Point]],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<Option<StepStats>, TrainError> {
    let b = rows.len();
    let mut g = Graph::new();
    let gb = state.gen.params.bind(&mut g, false);
    let z = g.constant(state.gen.sample_noise(b, rng));
    let roll = state.gen.rollout(&mut g, &gb, rows, z, NeighborMode::TeacherForced)?;
    let db = state.disc.params.bind(&mut g, true);
    let (loss, sr, sf) = discriminator_step_loss(&mut g, &state.disc, &db, rows, gts, &roll.positions);
    g.backward(loss);
    let mut grads = db.grads(&g);
    let mut loss_v = g.value(loss).scalar();
    let mean = |v: Var| g.value(v).data.iter().sum::<f64>() / b as f64;
    let (real_mean, fake_mean) = (mean(sr), mean(sf));
    if cfg.objective == Objective::LsganGp && cfg.gp_weight > 0.0 {
        let fake = rows_of(&g, &roll.positions);
        let interp: Vec<Vec<Point>> = gts
            .iter()
            .zip(&fake)
            .map(|(r, f)| {
                let a: f64 = rng.random();
                r.iter().zip(f).map(|(p, q)| [a * p[0] + (1.0 - a) * q[0], a * p[1] + (1.0 - a) * q[1]]).collect()
            })
            .collect();
        let refs: Vec<&[Point]> = interp.iter().map(|f| f.as_slice()).collect();
        let (pen, gp_grads) = gradient_penalty_param_grads(&state.disc, rows, &refs);
        accumulate(&mut grads, &gp_grads, cfg.gp_weight);
        loss_v += cfg.gp_weight * pen;
    }
    if !loss_v.is_finite() || !all_finite(&grads) {
        return Ok(None);
    }
    state.opt_d.update(&mut state.disc.params, &grads, lr);
    Ok(Some(StepStats {
        loss: loss_v,
        a: real_mean,
        b: fake_mean,
    }))
}

fn g_step<R: Rng>(
    state: &mut TrainState,
    rows: &[&AgentContext],
    gts: &[&[Point]],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut R,
) -> Result<Option<StepStats>, TrainError> {
    let k = cfg.variety_k;
    let b = rows.len();
    let rows_k: Vec<&AgentContext> = rows.iter().flat_map(|r| std::iter::repeat_n(*r, k)).collect();
    let gts_k: Vec<&[Point]> = gts.iter().flat_map(|r| std::iter::repeat_n(*r, k)).collect();
    let mut g = Graph::new();
    let gb = state.gen.params.bind(&mut g, true);
    let db = state.disc.params.bind(&mut g, false);
    let z = g.constant(state.gen.sample_noise(b * k, rng));
    let roll = state.gen.rollout(&mut g, &gb, &rows_k, z, NeighborMode::TeacherForced)?;
    let t_obs = rows[0].obs.len();
    let mut all: Vec<Var> = (0..t_obs)
        .map(|t| g.constant(Mat::from_vec(b * k, 2, rows_k.iter().flat_map(|c| c.obs[t]).collect())))
        .collect();
    all.extend_from_slice(&roll.positions);
    let scores = state.disc.score_batch(&mut g, &db, &rows_k, &all);
    let adv = g_loss_var(&mut g, scores);
    let err = squared_error_var(&mut g, &roll.positions, &gts_k);
    // only the closest of the k samples receives the variety gradient
    let ev = g.value(err).data.clone();
    let mut mask = vec![0.0; b * k];
    for s in 0..b {
        let best = (0..k).min_by(|&i, &j| ev[s * k + i].total_cmp(&ev[s * k + j])).expect("k >= 1");
        mask[s * k + best] = 1.0 / b as f64;
    }
    let mask = g.constant(Mat::from_vec(b * k, 1, mask));
    let sel = g.mul(mask, err);
    let variety = g.sum(sel);
    let weighted = g.scale(variety, cfg.variety_weight);
    let loss = g.add(adv, weighted);
    g.backward(loss);
    let grads = gb.grads(&g);
    let (adv_v, var_v) = (g.value(adv).scalar(), g.value(variety).scalar());
    if !g.value(loss).scalar().is_finite() || !all_finite(&grads) {
        return Ok(None);
    }
    state.opt_g.update(&mut state.gen.params, &grads, lr);
    Ok(Some(StepStats {
        loss: adv_v,
        a: var_v,
        b: 0.0,
    }))
}

/// Training contexts (primary rows) and ground-truth futures.
pub fn primary_rows(scenes: &[Scene], gen: &Generator) -> Result<(Vec<AgentContext>, Vec<Vec<Point>>), TrainError> {
    let horizon = gen.cfg.horizon;
    let mut ctx = Vec::with_capacity(scenes.len());
    let mut gts = Vec::with_capacity(scenes.len());
    for s in scenes {
        let c = AgentContext::from_scene(s, s.primary_id, horizon, None)
            .ok_or_else(|| TrainError::Config(format!("scene {} primary not observed", s.scene_id)))?;
        let gt = crate::evalkit::ground_truth(s, horizon)?;
        ctx.push(c);
        gts.push(gt);
    }
    Ok((ctx, gts))
}

/// Validation collision rate with one sample per scene from a fixed stream.
pub fn validation_col(gen: &Generator, val: &[Scene], seed: u64, collision: &CollisionConfig) -> Result<f64, TrainError> {
    let mut rng = seeding::stream(seed, "val", 0);
    let mut bundles = Vec::with_capacity(val.len());
    for chunk in val.chunks(64) {
        bundles.extend(gen.predict_many(chunk, 1, &mut rng)?);
    }
    Ok(collision_rate(val, &bundles, gen.cfg.horizon, collision)?)
}

/// Trains from `state.epoch` up to `cfg.epochs`, calling `on_epoch` after
/// each finished epoch. Randomness for epoch `e` derives from
/// `(cfg.seed, e)`, so resuming from a saved state reproduces an
/// uninterrupted run. On a non-finite loss or gradient the offending update
/// is skipped and an error returned; `state` then holds the last finite
/// parameters.
pub fn train<F>(state: &mut TrainState, train_set: &[Scene], val: &[Scene], cfg: &TrainConfig, mut on_epoch: F) -> Result<(), TrainError>
where
    F: FnMut(&TrainState) -> Result<(), String>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    if state.gen.cfg.horizon != state.disc.cfg.horizon {
        return Err(TrainError::Config("generator and discriminator horizons differ".into()));
    }
    let (ctx, gts) = primary_rows(train_set, &state.gen)?;
    for epoch in state.epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut seeding::stream(cfg.seed, "shuffle", epoch as u64));
        let mut rng = seeding::stream(cfg.seed, "noise", epoch as u64);
        let f = cfg.lr_factor(epoch);
        let (mut gl, mut dl, mut var, mut dr, mut df) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let (mut nd, mut ng) = (0usize, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let rows: Vec<&AgentContext> = batch.iter().map(|&i| &ctx[i]).collect();
            let gt: Vec<&[Point]> = batch.iter().map(|&i| gts[i].as_slice()).collect();
            let s = d_step(state, &rows, &gt, cfg, cfg.lr_d * f, &mut rng)?
                .ok_or(TrainError::NonFinite { epoch, batch: bi })?;
            dl += s.loss;
            dr += s.a;
            df += s.b;
            nd += 1;
            for _ in 0..cfg.g_steps_per_d_step {
                let s = g_step(state, &rows, &gt, cfg, cfg.lr_g * f, &mut rng)?
                    .ok_or(TrainError::NonFinite { epoch, batch: bi })?;
                gl += s.loss;
                var += s.a;
                ng += 1;
            }
        }
        let val_col = if val.is_empty() {
            None
        } else {
            Some(validation_col(&state.gen, val, cfg.seed, &cfg.val_collision)?)
        };
        let ng = ng.max(1) as f64;
        let entry = EpochLog {
            epoch,
            g_loss: gl / ng,
            d_loss: dl / nd as f64,
            variety: var / ng,
            d_real_mean: dr / nd as f64,
            d_fake_mean: df / nd as f64,
            val_col,
        };
        info!(
            "epoch {epoch}: g {:.4} d {:.4} variety {:.4} D(real) {:.3} D(fake) {:.3} val Col {:?}",
            entry.g_loss, entry.d_loss, entry.variety, entry.d_real_mean, entry.d_fake_mean, entry.val_col
        );
        state.log.epochs.push(entry);
        state.epoch = epoch + 1;
        on_epoch(state).map_err(TrainError::Callback)?;
    }
    Ok(())
}
