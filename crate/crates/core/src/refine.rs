//! Test-time refinement of predictions with the frozen discriminator:
//! gradient descent on the least-squares generator loss with respect to the
//! primary pedestrian's predicted coordinates.

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Mat, Var};
use crate::discriminator::Discriminator;
use crate::evalkit::{collides, collision_rate, CollisionConfig, MetricError};
use crate::scene::{HorizonSpec, Point, Scene, TrajectoryBundle};
use crate::sim::AgentContext;

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("invalid refine config: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("scene {0}: primary not fully observed")]
    NotObserved(i64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    CollidingOnly,
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    pub score_threshold: f64,
    pub trigger: Trigger,
    pub collision: CollisionConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            step_size: 0.01,
            max_iterations: 5,
            score_threshold: 0.5,
            trigger: Trigger::CollidingOnly,
            collision: CollisionConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), RefineError> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(RefineError::Config("step_size must be finite and >= 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(RefineError::Config("max_iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether sample `i` of `bundle` has the primary colliding with a
/// neighbour.
pub fn needs_refinement(scene: &Scene, bundle: &TrajectoryBundle, i: usize, horizon: HorizonSpec, collision: &CollisionConfig) -> bool {
    collides(&bundle.samples[i], &bundle.neighbor_futures(i, scene, horizon), collision)
}

/// Result of refining one prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Refined {
    pub future: Vec<Point>,
    pub iterations: usize,
    /// Score before each update and after the last one.
    pub scores: Vec<f64>,
    /// Set when a non-finite score or gradient stopped the loop early.
    pub non_finite: bool,
}

impl Refined {
    pub fn final_score(&self) -> f64 {
        *self.scores.last().unwrap_or(&f64::NAN)
    }
}

/// Discriminator scores and the gradients of `sum_b 1/2 (D_b - 1)^2` with
/// respect to each row's predicted coordinates.
pub fn loss_gradients(disc: &Discriminator, rows: &[&AgentContext], futures: &[&[Point]]) -> (Vec<f64>, Vec<Vec<Point>>) {
    let mut g = Graph::new();
    let bound = disc.params.bind(&mut g, false);
    let b = rows.len();
    let mut all: Vec<Var> = (0..rows[0].obs.len())
        .map(|t| g.constant(Mat::from_vec(b, 2, rows.iter().flat_map(|c| c.obs[t]).collect())))
        .collect();
    let fut: Vec<Var> = (0..futures[0].len())
        .map(|t| g.variable(Mat::from_vec(b, 2, futures.iter().flat_map(|f| f[t]).collect())))
        .collect();
    all.extend_from_slice(&fut);
    let s = disc.score_batch(&mut g, &bound, rows, &all);
    let d = g.add_scalar(s, -1.0);
    let sq = g.square(d);
    let total = g.sum(sq);
    let loss = g.scale(total, 0.5);
    g.backward(loss);
    let scores = g.value(s).data.clone();
    let grads: Vec<Mat> = fut.iter().map(|v| g.grad_or_zeros(*v)).collect();
    let per_row = (0..b).map(|r| grads.iter().map(|m| [m.get(r, 0), m.get(r, 1)]).collect()).collect();
    (scores, per_row)
}

/// Refines a batch of independent predictions. Each row stops on its own
/// once its score exceeds the threshold or the iteration budget is spent.
pub fn refine_batch(disc: &Discriminator, rows: &[&AgentContext], futures: &[Vec<Point>], cfg: &RefineConfig) -> Vec<Refined> {
    let mut out: Vec<Refined> = futures
        .iter()
        .map(|f| Refined {
            future: f.clone(),
            iterations: 0,
            scores: Vec::new(),
            non_finite: false,
        })
        .collect();
    let mut active: Vec<usize> = (0..rows.len()).collect();
    let mut m = 0;
    loop {
        if active.is_empty() {
            break;
        }
        let r: Vec<&AgentContext> = active.iter().map(|&i| rows[i]).collect();
        let f: Vec<&[Point]> = active.iter().map(|&i| out[i].future.as_slice()).collect();
        let (scores, grads) = loss_gradients(disc, &r, &f);
        let mut still = Vec::new();
        for (j, &i) in active.iter().enumerate() {
            let o = &mut out[i];
            let finite = scores[j].is_finite() && grads[j].iter().all(|p| p[0].is_finite() && p[1].is_finite());
            if !finite {
                o.non_finite = true;
                warn!("refinement stopped on a non-finite score or gradient");
                continue;
            }
            o.scores.push(scores[j]);
            if m == cfg.max_iterations || scores[j] > cfg.score_threshold {
                continue;
            }
            for (p, gr) in o.future.iter_mut().zip(&grads[j]) {
                p[0] -= cfg.step_size * gr[0];
                p[1] -= cfg.step_size * gr[1];
            }
            o.iterations += 1;
            still.push(i);
        }
        active = still;
        m += 1;
    }
    out
}

/// Refines one predicted primary future.
pub fn refine(disc: &Discriminator, ctx: &AgentContext, future: &[Point], cfg: &RefineConfig) -> Refined {
    refine_batch(disc, &[ctx], &[future.to_vec()], cfg).remove(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRefinement {
    pub scene_id: i64,
    pub sample: usize,
    pub iterations: usize,
    pub scores: Vec<f64>,
    pub non_finite: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub config: RefineConfig,
    pub col_before: f64,
    pub col_after: f64,
    pub refined_samples: usize,
    pub samples: Vec<SampleRefinement>,
}

impl RefinementReport {
    /// One JSON line per refined sample.
    pub fn to_jsonl(&self) -> String {
        self.samples.iter().map(|s| serde_json::to_string(s).expect("serializable") + "\n").collect()
    }
}

/// Refines every triggered sample of every bundle. Neighbours in the
/// discriminator input follow each sample's predicted neighbour futures
/// when the bundle carries them.
pub fn refine_dataset(
    disc: &Discriminator,
    scenes: &[Scene],
    bundles: &[TrajectoryBundle],
    horizon: HorizonSpec,
    cfg: &RefineConfig,
) -> Result<(Vec<TrajectoryBundle>, RefinementReport), RefineError> {
    cfg.validate()?;
    let col_before = collision_rate(scenes, bundles, horizon, &cfg.collision)?;
    let mut targets = Vec::new();
    let mut contexts = Vec::new();
    for (si, (scene, bundle)) in scenes.iter().zip(bundles).enumerate() {
        for i in 0..bundle.k() {
            let go = match cfg.trigger {
                Trigger::All => true,
                Trigger::CollidingOnly => needs_refinement(scene, bundle, i, horizon, &cfg.collision),
            };
            if go {
                let ov = bundle.neighbors.get(i).map(|n| n.as_slice());
                let ctx = AgentContext::from_scene(scene, scene.primary_id, horizon, ov).ok_or(RefineError::NotObserved(scene.scene_id))?;
                targets.push((si, i));
                contexts.push(ctx);
            }
        }
    }
    let mut refined = bundles.to_vec();
    let mut samples = Vec::with_capacity(targets.len());
    for (chunk_t, chunk_c) in targets.chunks(128).zip(contexts.chunks(128)) {
        let rows: Vec<&AgentContext> = chunk_c.iter().collect();
        let futures: Vec<Vec<Point>> = chunk_t.iter().map(|&(s, i)| bundles[s].samples[i].clone()).collect();
        for (&(s, i), r) in chunk_t.iter().zip(refine_batch(disc, &rows, &futures, cfg)) {
            refined[s].samples[i] = r.future;
            samples.push(SampleRefinement {
                scene_id: scenes[s].scene_id,
                sample: i,
                iterations: r.iterations,
                scores: r.scores,
                non_finite: r.non_finite,
            });
        }
    }
    let col_after = collision_rate(scenes, &refined, horizon, &cfg.collision)?;
    Ok((
        refined,
        RefinementReport {
            config: cfg.clone(),
            col_before,
            col_after,
            refined_samples: samples.len(),
            samples,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discriminator::{DiscVariant, DiscriminatorConfig};
    use crate::generator::{Generator, GeneratorConfig};
    use crate::sim::SimConfig;
    use crate::synth::{generate_dataset, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_sim() -> SimConfig {
        SimConfig {
            motion_embed_dim: 4,
            interaction_dim: 6,
            goal_embed_dim: Some(3),
            ..SimConfig::default()
        }
    }

    fn setup() -> (Discriminator, Generator, Vec<Scene>, HorizonSpec) {
        let horizon = HorizonSpec::new(4, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let disc = Discriminator::new(
            DiscriminatorConfig {
                n_layers: 2,
                model_dim: 8,
                ffn_dim: 8,
                sim: tiny_sim(),
                variant: DiscVariant::Transformer,
                score_head_dims: vec![6],
                horizon,
            },
            &mut rng,
        )
        .unwrap();
        let gen = Generator::new(
            GeneratorConfig {
                hidden_dim: 8,
                noise_dim: 4,
                sim: tiny_sim(),
                horizon,
            },
            &mut rng,
        )
        .unwrap();
        let scenes = generate_dataset(
            &WorldConfig {
                total_steps: 9,
                filter_from_step: 4,
                ..WorldConfig::default()
            },
            4,
            3,
        )
        .unwrap();
        (disc, gen, scenes, horizon)
    }

    fn sample(gen: &Generator, scene: &Scene, horizon: HorizonSpec) -> (AgentContext, Vec<Point>) {
        let b = gen.predict_k(scene, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ctx = AgentContext::from_scene(scene, scene.primary_id, horizon, Some(&b.neighbors[0])).unwrap();
        (ctx, b.samples[0].clone())
    }

    fn never_stop() -> RefineConfig {
        RefineConfig {
            score_threshold: f64::INFINITY,
            ..RefineConfig::default()
        }
    }

    #[test]
    fn zero_step_size_is_identity() {
        let (disc, gen, scenes, h) = setup();
        let (ctx, y) = sample(&gen, &scenes[0], h);
        let r = refine(&disc, &ctx, &y, &RefineConfig { step_size: 0.0, ..never_stop() });
        assert_eq!(r.future, y);
        assert_eq!(r.iterations, 5);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let (mut disc, gen, scenes, h) = setup();
        for lin in disc.head.clone() {
            disc.params.get_mut(lin.w).data.fill(0.0);
        }
        let (ctx, y) = sample(&gen, &scenes[0], h);
        let r = refine(&disc, &ctx, &y, &never_stop());
        assert_eq!(r.future, y);
        assert_eq!(r.iterations, 5);
    }

    #[test]
    fn stops_once_score_exceeds_threshold() {
        let (disc, gen, scenes, h) = setup();
        let (ctx, y) = sample(&gen, &scenes[0], h);
        let r = refine(&disc, &ctx, &y, &RefineConfig { score_threshold: f64::NEG_INFINITY, ..RefineConfig::default() });
        assert_eq!(r.iterations, 0);
        assert_eq!(r.future, y);
        assert_eq!(r.scores.len(), 1);
    }

    #[test]
    fn one_iteration_matches_finite_difference_step() {
        let (disc, gen, scenes, h) = setup();
        let (ctx, y) = sample(&gen, &scenes[1], h);
        let cfg = RefineConfig {
            max_iterations: 1,
            ..never_stop()
        };
        let r = refine(&disc, &ctx, &y, &cfg);
        let lg = |f: &[Point]| {
            let traj: Vec<Point> = ctx.obs.iter().chain(f).copied().collect();
            0.5 * (disc.score(&ctx, &traj).unwrap() - 1.0).powi(2)
        };
        for t in 0..y.len() {
            for c in 0..2 {
                let eps = 1e-6;
                let mut p = y.clone();
                p[t][c] += eps;
                let mut m = y.clone();
                m[t][c] -= eps;
                let fd = (lg(&p) - lg(&m)) / (2.0 * eps);
                let expected = y[t][c] - cfg.step_size * fd;
                let step = r.future[t][c] - y[t][c];
                let want = expected - y[t][c];
                assert!((step - want).abs() <= 1e-3 * want.abs().max(1e-9), "t {t} c {c}: {step} vs {want}");
            }
        }
    }

    #[test]
    fn update_is_exactly_minus_lambda_gradient() {
        let (disc, gen, scenes, h) = setup();
        let (ctx, y) = sample(&gen, &scenes[2], h);
        let cfg = RefineConfig {
            max_iterations: 1,
            ..never_stop()
        };
        let (_, g) = loss_gradients(&disc, &[&ctx], &[&y]);
        let r = refine(&disc, &ctx, &y, &cfg);
        for ((a, b), gr) in r.future.iter().zip(&y).zip(&g[0]) {
            assert_eq!(*a, [b[0] - 0.01 * gr[0], b[1] - 0.01 * gr[1]]);
        }
    }

    #[test]
    fn displacement_shrinks_with_step_size() {
        let (disc, gen, scenes, h) = setup();
        let (ctx, y) = sample(&gen, &scenes[3], h);
        let disp = |lambda: f64| {
            let r = refine(&disc, &ctx, &y, &RefineConfig { step_size: lambda, ..never_stop() });
            r.future.iter().zip(&y).map(|(a, b)| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sum::<f64>().sqrt()
        };
        let (a, b, c) = (disp(1e-2), disp(1e-4), disp(1e-6));
        assert!(a > b && b > c && c > 0.0, "{a} {b} {c}");
    }

    #[test]
    fn batch_matches_single_refinement() {
        let (disc, gen, scenes, h) = setup();
        let pairs: Vec<(AgentContext, Vec<Point>)> = scenes.iter().map(|s| sample(&gen, s, h)).collect();
        let rows: Vec<&AgentContext> = pairs.iter().map(|p| &p.0).collect();
        let futures: Vec<Vec<Point>> = pairs.iter().map(|p| p.1.clone()).collect();
        let cfg = RefineConfig {
            score_threshold: 0.0,
            step_size: 0.5,
            ..RefineConfig::default()
        };
        let batch = refine_batch(&disc, &rows, &futures, &cfg);
        for (i, b) in batch.iter().enumerate() {
            let one = refine(&disc, rows[i], &futures[i], &cfg);
            assert_eq!(one.iterations, b.iterations);
            for (p, q) in one.future.iter().zip(&b.future) {
                assert!((p[0] - q[0]).abs() < 1e-12 && (p[1] - q[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn needs_refinement_cases() {
        let h = HorizonSpec::new(2, 2).unwrap();
        let track = |id, pts: Vec<Point>| crate::scene::Track::full(id, pts);
        let alone = Scene {
            scene_id: 0,
            primary_id: 0,
            start_frame: 0,
            pedestrians: vec![track(0, vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])],
            goals: Default::default(),
            dt: 0.4,
        };
        let b = crate::evalkit::ground_truth_bundle(&alone, h).unwrap();
        assert!(!needs_refinement(&alone, &b, 0, h, &CollisionConfig::default()));
        let mut crowded = alone.clone();
        crowded.pedestrians.push(track(1, vec![[5.0, 0.0], [4.0, 0.0], [3.0, 0.0], [3.0, 0.0]]));
        assert!(needs_refinement(&crowded, &b, 0, h, &CollisionConfig::default()));
    }

    #[test]
    fn dataset_refinement_respects_trigger_and_freezes_parameters() {
        let (disc, gen, scenes, h) = setup();
        let bundles = gen.predict_many(&scenes, 2, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let fp = disc.params.fingerprint();
        let none = RefineConfig {
            collision: CollisionConfig {
                threshold: 0.0,
                substeps: None,
            },
            ..RefineConfig::default()
        };
        let (out, rep) = refine_dataset(&disc, &scenes, &bundles, h, &none).unwrap();
        assert_eq!(out, bundles);
        assert_eq!(rep.refined_samples, 0);
        assert_eq!(rep.config, none);
        let all = RefineConfig {
            trigger: Trigger::All,
            score_threshold: f64::INFINITY,
            ..RefineConfig::default()
        };
        let (out, rep) = refine_dataset(&disc, &scenes, &bundles, h, &all).unwrap();
        assert_eq!(rep.refined_samples, 8);
        assert_eq!(disc.params.fingerprint(), fp);
        for (a, b) in out.iter().zip(&bundles) {
            assert_eq!(a.neighbors, b.neighbors);
            assert_eq!(a.gaussians, b.gaussians);
            assert_ne!(a.samples, b.samples);
        }
        assert_eq!(rep.to_jsonl().lines().count(), 8);
    }

    #[test]
    fn config_validation() {
        assert!(RefineConfig { max_iterations: 0, ..RefineConfig::default() }.validate().is_err());
        assert!(RefineConfig { step_size: -1.0, ..RefineConfig::default() }.validate().is_err());
    }
}
