//! Forecasting metrics (Top-k ADE/FDE, prediction collision rate,
//! Dist2Goal, mode coverage) and the hand-crafted baselines.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{HorizonSpec, Point, Scene, TrajectoryBundle};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("k = {k} exceeds the {available} available samples")]
    NotEnoughSamples { k: usize, available: usize },
    #[error("no goal for pedestrian {0}")]
    MissingGoal(i64),
    #[error("empty bundle")]
    EmptyBundle,
    #[error("{scenes} scenes but {bundles} bundles")]
    Misaligned { scenes: usize, bundles: usize },
    #[error("scene {0} has no full ground-truth future for its primary")]
    MissingGroundTruth(i64),
    #[error("k must be >= 1")]
    ZeroK,
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn ade(pred: &[Point], gt: &[Point]) -> f64 {
    pred.iter().zip(gt).map(|(p, g)| dist(*p, *g)).sum::<f64>() / gt.len() as f64
}

fn fde(pred: &[Point], gt: &[Point]) -> f64 {
    dist(pred[pred.len() - 1], gt[gt.len() - 1])
}

fn first_k(bundle: &TrajectoryBundle, k: usize) -> Result<&[Vec<Point>], MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroK);
    }
    if k > bundle.k() {
        return Err(MetricError::NotEnoughSamples { k, available: bundle.k() });
    }
    Ok(&bundle.samples[..k])
}

/// Minimum over the first `k` samples of the mean per-step L2 error.
pub fn top_k_ade(bundle: &TrajectoryBundle, gt: &[Point], k: usize) -> Result<f64, MetricError> {
    Ok(first_k(bundle, k)?.iter().map(|s| ade(s, gt)).fold(f64::INFINITY, f64::min))
}

/// Minimum over the first `k` samples of the final-step L2 error.
pub fn top_k_fde(bundle: &TrajectoryBundle, gt: &[Point], k: usize) -> Result<f64, MetricError> {
    Ok(first_k(bundle, k)?.iter().map(|s| fde(s, gt)).fold(f64::INFINITY, f64::min))
}

/// Minimum distance between two points moving linearly from `a0`/`b0` to
/// `a1`/`b1` over the same interval.
pub fn segment_min_distance(a0: Point, a1: Point, b0: Point, b1: Point) -> f64 {
    let d0 = [a0[0] - b0[0], a0[1] - b0[1]];
    let dd = [(a1[0] - a0[0]) - (b1[0] - b0[0]), (a1[1] - a0[1]) - (b1[1] - b0[1])];
    let denom = dd[0] * dd[0] + dd[1] * dd[1];
    let s = if denom > 0.0 {
        (-(d0[0] * dd[0] + d0[1] * dd[1]) / denom).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (d0[0] + s * dd[0]).hypot(d0[1] + s * dd[1])
}

/// Collision test settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollisionConfig {
    pub threshold: f64,
    /// `None` uses the exact per-interval minimum distance; `Some(n)`
    /// samples `n` interpolation substeps per interval instead.
    pub substeps: Option<usize>,
}

impl Default for CollisionConfig {
    fn default() -> Self {
        CollisionConfig {
            threshold: 0.1,
            substeps: None,
        }
    }
}

/// Minimum distance between two paths over the intervals where both are
/// present.
pub fn path_min_distance(a: &[Point], b: &[Option<Point>], substeps: Option<usize>) -> f64 {
    let mut best = f64::INFINITY;
    let n = a.len().min(b.len());
    for t in 0..n {
        if let Some(q) = b[t] {
            best = best.min(dist(a[t], q));
        }
        if t + 1 < n {
            if let (Some(b0), Some(b1)) = (b[t], b[t + 1]) {
                let (a0, a1) = (a[t], a[t + 1]);
                let m = match substeps {
                    None => segment_min_distance(a0, a1, b0, b1),
                    Some(sub) => (1..sub.max(1))
                        .map(|i| {
                            let s = i as f64 / sub as f64;
                            let pa = [a0[0] + s * (a1[0] - a0[0]), a0[1] + s * (a1[1] - a0[1])];
                            let pb = [b0[0] + s * (b1[0] - b0[0]), b0[1] + s * (b1[1] - b0[1])];
                            dist(pa, pb)
                        })
                        .fold(f64::INFINITY, f64::min),
                };
                best = best.min(m);
            }
        }
    }
    best
}

/// Whether `primary` comes closer than the threshold to any neighbour path.
pub fn collides(primary: &[Point], neighbors: &[Vec<Option<Point>>], cfg: &CollisionConfig) -> bool {
    neighbors.iter().any(|n| path_min_distance(primary, n, cfg.substeps) < cfg.threshold)
}

/// Per-sample collision verdicts for one scene.
pub fn sample_collisions(scene: &Scene, bundle: &TrajectoryBundle, horizon: HorizonSpec, cfg: &CollisionConfig) -> Vec<bool> {
    (0..bundle.k())
        .map(|i| collides(&bundle.samples[i], &bundle.neighbor_futures(i, scene, horizon), cfg))
        .collect()
}

/// Percentage of (scene, sample) pairs whose primary prediction collides
/// with a neighbour's prediction.
pub fn collision_rate(
    scenes: &[Scene],
    bundles: &[TrajectoryBundle],
    horizon: HorizonSpec,
    cfg: &CollisionConfig,
) -> Result<f64, MetricError> {
    if scenes.len() != bundles.len() {
        return Err(MetricError::Misaligned {
            scenes: scenes.len(),
            bundles: bundles.len(),
        });
    }
    let (mut hits, mut total) = (0usize, 0usize);
    for (s, b) in scenes.iter().zip(bundles) {
        let v = sample_collisions(s, b, horizon, cfg);
        hits += v.iter().filter(|x| **x).count();
        total += v.len();
    }
    Ok(if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 })
}

/// Distance from the final predicted position to the goal.
pub fn dist2goal(prediction: &[Point], goal: Point) -> f64 {
    dist(prediction[prediction.len() - 1], goal)
}

/// Fraction of modes with at least one sample endpoint within `radius` of
/// the mode's endpoint cluster centre.
pub fn mode_coverage(bundle: &TrajectoryBundle, centers: &[Point], radius: f64) -> Result<f64, MetricError> {
    if bundle.samples.is_empty() || centers.is_empty() {
        return Err(MetricError::EmptyBundle);
    }
    let covered = centers
        .iter()
        .filter(|c| bundle.samples.iter().any(|s| s.last().is_some_and(|e| dist(*e, **c) <= radius)))
        .count();
    Ok(covered as f64 / centers.len() as f64)
}

/// Relative heading offsets (degrees) of the uniform predictor.
pub const UP_ANGLES_DEG: [f64; 5] = [0.0, 25.0, 50.0, -25.0, -50.0];
/// Relative speed factors of the uniform predictor.
pub const UP_SPEED_FACTORS: [f64; 4] = [1.0, 0.75, 1.25, 0.25];

fn last_obs(scene: &Scene, id: i64, horizon: HorizonSpec) -> Option<(Point, Point)> {
    let track = scene.track(id)?;
    if !track.is_complete(0..horizon.t_obs) {
        return None;
    }
    let t = horizon.t_obs - 1;
    Some((track.at(t)?, track.velocity(t, scene.dt)?))
}

fn extrapolate(start: Point, vel: Point, dt: f64, n: usize) -> Vec<Point> {
    (1..=n).map(|t| [start[0] + vel[0] * dt * t as f64, start[1] + vel[1] * dt * t as f64]).collect()
}

fn up_futures(start: Point, vel: Point, dt: f64, n: usize) -> Vec<Vec<Point>> {
    let mut out = Vec::with_capacity(20);
    for a in UP_ANGLES_DEG {
        let (s, c) = a.to_radians().sin_cos();
        let rot = [c * vel[0] - s * vel[1], s * vel[0] + c * vel[1]];
        for f in UP_SPEED_FACTORS {
            out.push(extrapolate(start, [rot[0] * f, rot[1] * f], dt, n));
        }
    }
    out
}

fn baseline(scene: &Scene, horizon: HorizonSpec, futures: impl Fn(Point, Point) -> Vec<Vec<Point>>) -> Result<TrajectoryBundle, MetricError> {
    let (p, v) = last_obs(scene, scene.primary_id, horizon).ok_or(MetricError::MissingGroundTruth(scene.scene_id))?;
    let samples = futures(p, v);
    let nb: Vec<(i64, Vec<Vec<Point>>)> = scene
        .neighbors()
        .filter_map(|t| last_obs(scene, t.id, horizon).map(|(p, v)| (t.id, futures(p, v))))
        .collect();
    let neighbors = (0..samples.len())
        .map(|i| nb.iter().map(|(id, f)| (*id, f[i].clone())).collect())
        .collect();
    Ok(TrajectoryBundle {
        scene_id: scene.scene_id,
        samples,
        gaussians: None,
        neighbors,
    })
}

/// Twenty constant-velocity rollouts over five heading offsets and four
/// speed factors, angle-major. Neighbours follow the same profile index.
/// A zero last velocity leaves every sample at the last observed position.
pub fn uniform_predictor(scene: &Scene, horizon: HorizonSpec) -> Result<TrajectoryBundle, MetricError> {
    baseline(scene, horizon, |p, v| up_futures(p, v, scene.dt, horizon.t_pred_len))
}

/// Extrapolates the last observed velocity (one sample).
pub fn constant_velocity(scene: &Scene, horizon: HorizonSpec) -> Result<TrajectoryBundle, MetricError> {
    baseline(scene, horizon, |p, v| vec![extrapolate(p, v, scene.dt, horizon.t_pred_len)])
}

/// Ground-truth future of the primary.
pub fn ground_truth(scene: &Scene, horizon: HorizonSpec) -> Result<Vec<Point>, MetricError> {
    (horizon.t_obs..horizon.total())
        .map(|t| scene.primary().at(t))
        .collect::<Option<Vec<_>>>()
        .ok_or(MetricError::MissingGroundTruth(scene.scene_id))
}

/// Settings of a full evaluation pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub collision: CollisionConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![3],
            collision: CollisionConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene_id: i64,
    pub top_k: Vec<TopK>,
    pub colliding_samples: usize,
    pub samples: usize,
    pub dist2goal: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scenes: usize,
    pub top_k: Vec<TopK>,
    pub col_rate: f64,
    pub dist2goal: Option<f64>,
    pub mode_coverage: Option<f64>,
    pub per_scene: Vec<SceneMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Human-readable summary table.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<14} {:>10}", "scenes", self.n_scenes);
        for t in &self.top_k {
            let _ = writeln!(s, "{:<14} {:>10.4}", format!("top-{} ADE", t.k), t.ade);
            let _ = writeln!(s, "{:<14} {:>10.4}", format!("top-{} FDE", t.k), t.fde);
        }
        let _ = writeln!(s, "{:<14} {:>9.2}%", "Col", self.col_rate);
        if let Some(d) = self.dist2goal {
            let _ = writeln!(s, "{:<14} {:>10.4}", "Dist2Goal", d);
        }
        if let Some(c) = self.mode_coverage {
            let _ = writeln!(s, "{:<14} {:>10.4}", "mode coverage", c);
        }
        s
    }
}

/// Evaluates aligned bundles against their scenes. Dist2Goal averages over
/// every sample of every scene with a known primary goal.
pub fn evaluate(
    scenes: &[Scene],
    bundles: &[TrajectoryBundle],
    horizon: HorizonSpec,
    cfg: &EvalConfig,
) -> Result<MetricsReport, MetricError> {
    if scenes.len() != bundles.len() {
        return Err(MetricError::Misaligned {
            scenes: scenes.len(),
            bundles: bundles.len(),
        });
    }
    let mut per_scene = Vec::with_capacity(scenes.len());
    let mut d2g = (0.0, 0usize);
    for (scene, bundle) in scenes.iter().zip(bundles) {
        let gt = ground_truth(scene, horizon)?;
        let top_k = cfg
            .ks
            .iter()
            .map(|&k| {
                Ok(TopK {
                    k,
                    ade: top_k_ade(bundle, &gt, k)?,
                    fde: top_k_fde(bundle, &gt, k)?,
                })
            })
            .collect::<Result<Vec<_>, MetricError>>()?;
        let hits = sample_collisions(scene, bundle, horizon, &cfg.collision);
        let goal_dist = scene.goal(scene.primary_id).map(|goal| {
            let ds: Vec<f64> = bundle.samples.iter().map(|s| dist2goal(s, goal)).collect();
            d2g.0 += ds.iter().sum::<f64>();
            d2g.1 += ds.len();
            ds.iter().sum::<f64>() / ds.len() as f64
        });
        per_scene.push(SceneMetrics {
            scene_id: scene.scene_id,
            top_k,
            colliding_samples: hits.iter().filter(|x| **x).count(),
            samples: hits.len(),
            dist2goal: goal_dist,
        });
    }
    let n = per_scene.len().max(1) as f64;
    let top_k = cfg
        .ks
        .iter()
        .enumerate()
        .map(|(i, &k)| TopK {
            k,
            ade: per_scene.iter().map(|s| s.top_k[i].ade).sum::<f64>() / n,
            fde: per_scene.iter().map(|s| s.top_k[i].fde).sum::<f64>() / n,
        })
        .collect();
    let (hits, total) = per_scene.iter().fold((0, 0), |(h, t), s| (h + s.colliding_samples, t + s.samples));
    Ok(MetricsReport {
        n_scenes: scenes.len(),
        top_k,
        col_rate: if total == 0 { 0.0 } else { 100.0 * hits as f64 / total as f64 },
        dist2goal: (d2g.1 > 0).then(|| d2g.0 / d2g.1 as f64),
        mode_coverage: None,
        per_scene,
    })
}

/// Ground-truth bundle (one sample, neighbours at their true futures).
pub fn ground_truth_bundle(scene: &Scene, horizon: HorizonSpec) -> Result<TrajectoryBundle, MetricError> {
    Ok(TrajectoryBundle {
        scene_id: scene.scene_id,
        samples: vec![ground_truth(scene, horizon)?],
        gaussians: None,
        neighbors: Vec::new(),
    })
}
