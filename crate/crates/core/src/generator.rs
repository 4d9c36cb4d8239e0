//! Conditional generator: a recurrent encoder over per-step interaction
//! embeddings and a noise-conditioned recurrent decoder emitting bivariate
//! Gaussian parameters of the next velocity. The mean is the emitted
//! velocity; positions are integrated from it.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, Mat, Var};
use crate::nn::{Bound, Linear, LstmCell, LstmState, Params};
use crate::scene::{GaussianParams, HorizonSpec, PedId, Point, Scene, SceneError, TrajectoryBundle};
use crate::sim::{AgentContext, NeighborBatch, Sim, SimConfig, SimError};

#[derive(Debug, Error)]
pub enum GenError {
    #[error("non-finite value at prediction step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("pedestrian {0} is not fully observed")]
    NotObserved(PedId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub hidden_dim: usize,
    pub noise_dim: usize,
    pub sim: SimConfig,
    pub horizon: HorizonSpec,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            hidden_dim: 64,
            noise_dim: 16,
            sim: SimConfig::default(),
            horizon: HorizonSpec::default(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.hidden_dim == 0 || self.noise_dim == 0 {
            return Err(GenError::Config("dims must be > 0".into()));
        }
        self.sim.validate()?;
        self.horizon.validate()?;
        Ok(())
    }
}

/// How neighbours are positioned while decoding.
#[derive(Clone, Copy, Debug)]
pub enum NeighborMode<'a> {
    /// Ground-truth neighbour futures from each row's context.
    TeacherForced,
    /// Rows sharing a group id are each other's neighbours and move with
    /// their own predictions.
    Simultaneous(&'a [usize]),
}

/// Graph nodes of one decoded batch; every entry is `b x 2` (`rho` is
/// `b x 1`), one per prediction step.
pub struct Rollout {
    pub positions: Vec<Var>,
    pub mu: Vec<Var>,
    pub sigma: Vec<Var>,
    pub rho: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub params: Params,
    pub sim: Sim,
    pub encoder: LstmCell,
    pub decoder: LstmCell,
    pub head: Linear,
}

fn positions_var(g: &mut Graph, rows: &[&AgentContext], t: usize) -> Var {
    let data = rows.iter().flat_map(|c| c.obs[t]).collect();
    g.constant(Mat::from_vec(rows.len(), 2, data))
}

const SIGMA_FLOOR: f64 = 1e-9;
const RHO_LIMIT: f64 = 1.0 - 1e-9;

fn check(g: &Graph, v: Var, step: usize) -> Result<(), GenError> {
    if g.value(v).is_finite() {
        Ok(())
    } else {
        Err(GenError::NonFinite { step })
    }
}

impl Generator {
    pub fn new<R: Rng>(cfg: GeneratorConfig, rng: &mut R) -> Result<Self, GenError> {
        cfg.validate()?;
        let mut params = Params::new();
        let sim = Sim::new(&mut params, "gen.sim", cfg.sim.clone(), rng);
        let s = cfg.sim.output_dim();
        let encoder = LstmCell::new(&mut params, "gen.encoder", s, cfg.hidden_dim, rng);
        let decoder = LstmCell::new(&mut params, "gen.decoder", s + cfg.noise_dim, cfg.hidden_dim, rng);
        let head = Linear::new(&mut params, "gen.head", cfg.hidden_dim, 5, rng);
        Ok(Generator {
            cfg,
            params,
            sim,
            encoder,
            decoder,
            head,
        })
    }

    /// Runs the encoder over `s^1..s^{t_obs-1}` (0-based steps). `obs` holds
    /// one `b x 2` position node per observed step.
    pub fn encode(&self, g: &mut Graph, bound: &Bound, rows: &[&AgentContext], obs: &[Var]) -> Result<LstmState, GenError> {
        let dt = rows[0].dt;
        let goals: Vec<Option<Point>> = rows.iter().map(|c| c.goal).collect();
        let mut state = self.encoder.zero_state(g, rows.len());
        for t in 1..obs.len() {
            let d = g.sub(obs[t], obs[t - 1]);
            let vel = g.scale(d, 1.0 / dt);
            let nb = AgentContext::neighbor_batch(g, rows, t);
            let s = self.sim.forward(g, bound, obs[t], vel, &nb, &goals);
            state = self.encoder.step(g, bound, state, s);
        }
        if !g.value(state.h).is_finite() || !g.value(state.c).is_finite() {
            return Err(GenError::NonFinite { step: 0 });
        }
        Ok(state)
    }

    /// Decodes `t_pred_len` steps from the encoder state, starting at the
    /// last observed position and velocity. `z` is `b x noise_dim`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        rows: &[&AgentContext],
        state: LstmState,
        z: Var,
        last_pos: Var,
        last_vel: Var,
        mode: NeighborMode,
    ) -> Result<Rollout, GenError> {
        let horizon = self.cfg.horizon;
        let dt = rows[0].dt;
        let goals: Vec<Option<Point>> = rows.iter().map(|c| c.goal).collect();
        let groups: Option<Vec<Vec<usize>>> = match mode {
            NeighborMode::TeacherForced => None,
            NeighborMode::Simultaneous(ids) => Some(
                (0..ids.len())
                    .map(|b| (0..ids.len()).filter(|&o| o != b && ids[o] == ids[b]).collect())
                    .collect(),
            ),
        };
        let (mut pos, mut vel, mut state) = (last_pos, last_vel, state);
        let mut out = Rollout {
            positions: Vec::with_capacity(horizon.t_pred_len),
            mu: Vec::with_capacity(horizon.t_pred_len),
            sigma: Vec::with_capacity(horizon.t_pred_len),
            rho: Vec::with_capacity(horizon.t_pred_len),
        };
        for step in 0..horizon.t_pred_len {
            let t = horizon.t_obs - 1 + step;
            let nb = match &groups {
                Some(groups) if step > 0 => {
                    let pv = g.value(pos);
                    NeighborBatch {
                        pos: (0..pv.rows).map(|r| [pv.get(r, 0), pv.get(r, 1)]).collect(),
                        vel,
                        groups: groups.clone(),
                    }
                }
                _ => AgentContext::neighbor_batch(g, rows, t),
            };
            let s = self.sim.forward(g, bound, pos, vel, &nb, &goals);
            let x = g.concat_cols(&[s, z]);
            state = self.decoder.step(g, bound, state, x);
            let raw = self.head.forward(g, bound, state.h);
            let mu = g.slice_cols(raw, 0, 2);
            let sr = g.slice_cols(raw, 2, 2);
            // floors keep the Gaussian proper when exp underflows or tanh saturates
            let es = g.exp(sr);
            let sigma = g.add_scalar(es, SIGMA_FLOOR);
            let rr = g.slice_cols(raw, 4, 1);
            let tr = g.tanh(rr);
            let rho = g.scale(tr, RHO_LIMIT);
            let dp = g.scale(mu, dt);
            pos = g.add(pos, dp);
            vel = mu;
            check(g, pos, step)?;
            check(g, sigma, step)?;
            out.positions.push(pos);
            out.mu.push(mu);
            out.sigma.push(sigma);
            out.rho.push(rho);
        }
        Ok(out)
    }

    /// Encode + decode with constant observed positions.
    pub fn rollout(&self, g: &mut Graph, bound: &Bound, rows: &[&AgentContext], z: Var, mode: NeighborMode) -> Result<Rollout, GenError> {
        let t_obs = self.cfg.horizon.t_obs;
        let obs: Vec<Var> = (0..t_obs).map(|t| positions_var(g, rows, t)).collect();
        let state = self.encode(g, bound, rows, &obs)?;
        let d = g.sub(obs[t_obs - 1], obs[t_obs - 2]);
        let last_vel = g.scale(d, 1.0 / rows[0].dt);
        self.decode(g, bound, rows, state, z, obs[t_obs - 1], last_vel, mode)
    }

    /// `n` noise rows drawn from the standard normal.
    pub fn sample_noise<R: Rng>(&self, n: usize, rng: &mut R) -> Mat {
        let data = (0..n * self.cfg.noise_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Mat::from_vec(n, self.cfg.noise_dim, data)
    }

    /// `k` test-time samples for one scene, all pedestrians rolled out
    /// simultaneously.
    pub fn predict_k<R: Rng>(&self, scene: &Scene, k: usize, rng: &mut R) -> Result<TrajectoryBundle, GenError> {
        Ok(self.predict_many(std::slice::from_ref(scene), k, rng)?.remove(0))
    }

    /// [`Generator::predict_k`] over many scenes with one batched rollout.
    /// Noise is drawn scene by scene in order, so the result equals calling
    /// `predict_k` on each scene with the same generator.
    pub fn predict_many<R: Rng>(&self, scenes: &[Scene], k: usize, rng: &mut R) -> Result<Vec<TrajectoryBundle>, GenError> {
        if k == 0 {
            return Err(GenError::Config("k must be >= 1".into()));
        }
        let horizon = self.cfg.horizon;
        let mut contexts: Vec<Vec<AgentContext>> = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let primary = AgentContext::from_scene(scene, scene.primary_id, horizon, None)
                .ok_or(GenError::NotObserved(scene.primary_id))?;
            let mut ctx = vec![primary];
            ctx.extend(
                scene
                    .neighbors()
                    .filter_map(|t| AgentContext::from_scene(scene, t.id, horizon, None)),
            );
            contexts.push(ctx);
        }
        let mut rows: Vec<&AgentContext> = Vec::new();
        let mut group = Vec::new();
        let mut z = Vec::new();
        let mut group_id = 0;
        for ctx in &contexts {
            let noise = self.sample_noise(k * ctx.len(), rng);
            z.extend_from_slice(&noise.data);
            for _ in 0..k {
                for c in ctx {
                    rows.push(c);
                    group.push(group_id);
                }
                group_id += 1;
            }
        }
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let z = g.constant(Mat::from_vec(rows.len(), self.cfg.noise_dim, z));
        let roll = self.rollout(&mut g, &bound, &rows, z, NeighborMode::Simultaneous(&group))?;

        let mut bundles = Vec::with_capacity(scenes.len());
        let mut r = 0;
        for (scene, ctx) in scenes.iter().zip(&contexts) {
            let mut samples = Vec::with_capacity(k);
            let mut gaussians = Vec::with_capacity(k);
            let mut neighbors = Vec::with_capacity(k);
            for _ in 0..k {
                let track = |row: usize| -> Vec<Point> {
                    roll.positions.iter().map(|p| [g.value(*p).get(row, 0), g.value(*p).get(row, 1)]).collect()
                };
                samples.push(track(r));
                gaussians.push(
                    (0..horizon.t_pred_len)
                        .map(|s| GaussianParams {
                            mu: [g.value(roll.mu[s]).get(r, 0), g.value(roll.mu[s]).get(r, 1)],
                            sigma: [g.value(roll.sigma[s]).get(r, 0), g.value(roll.sigma[s]).get(r, 1)],
                            rho: g.value(roll.rho[s]).get(r, 0),
                        })
                        .collect(),
                );
                neighbors.push(ctx[1..].iter().enumerate().map(|(j, c)| (c.id, track(r + 1 + j))).collect());
                r += ctx.len();
            }
            bundles.push(TrajectoryBundle {
                scene_id: scene.scene_id,
                samples,
                gaussians: Some(gaussians),
                neighbors,
            });
        }
        Ok(bundles)
    }
}

/// Values of per-step `b x 2` position nodes as per-row trajectories.
pub fn rows_of(g: &Graph, steps: &[Var]) -> Vec<Vec<Point>> {
    let b = g.value(steps[0]).rows;
    (0..b)
        .map(|r| steps.iter().map(|v| [g.value(*v).get(r, 0), g.value(*v).get(r, 1)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Track;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    pub(crate) fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            hidden_dim: 8,
            noise_dim: 4,
            sim: SimConfig {
                motion_embed_dim: 4,
                interaction_dim: 6,
                goal_embed_dim: Some(3),
                ..SimConfig::default()
            },
            horizon: HorizonSpec::new(4, 5).unwrap(),
        }
    }

    fn scene(offset: Point) -> Scene {
        let n = 9;
        Scene {
            scene_id: 3,
            primary_id: 0,
            start_frame: 0,
            pedestrians: vec![
                Track::full(0, (0..n).map(|t| [offset[0] + 0.45 * t as f64, offset[1] + 0.05 * t as f64]).collect()),
                Track::full(1, (0..n).map(|t| [offset[0] + 4.07 - 0.4 * t as f64, offset[1] + 0.63]).collect()),
                Track::full(2, (0..n).map(|t| [offset[0] + 1.03, offset[1] - 1.01 + 0.3 * t as f64]).collect()),
            ],
            goals: BTreeMap::from([(0, [offset[0] + 8.0, offset[1]]), (1, [offset[0] - 6.0, offset[1] + 0.6])]),
            dt: 0.4,
        }
    }

    fn generator() -> Generator {
        Generator::new(small_cfg(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
    }

    #[test]
    fn rollout_has_prediction_length() {
        let gen = generator();
        let b = gen.predict_k(&scene([0.0; 2]), 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.k(), 2);
        assert!(b.validate(5).is_ok());
        assert_eq!(b.neighbors[0].len(), 2);
        let cfg = GeneratorConfig {
            horizon: HorizonSpec::new(9, 12).unwrap(),
            ..small_cfg()
        };
        let gen = Generator::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut s = scene([0.0; 2]);
        for p in &mut s.pedestrians {
            let last = p.positions.last().copied().unwrap();
            p.positions.resize(21, last);
        }
        let b = gen.predict_k(&s, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.samples[0].len(), 12);
    }

    #[test]
    fn zero_raw_head_gives_unit_sigma_and_zero_rho() {
        let mut gen = generator();
        gen.params.get_mut(gen.head.w).data.fill(0.0);
        gen.params.get_mut(gen.head.b).data.fill(0.0);
        let b = gen.predict_k(&scene([0.0; 2]), 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for gp in &b.gaussians.unwrap()[0] {
            assert!((gp.sigma[0] - 1.0).abs() < 1e-8 && (gp.sigma[1] - 1.0).abs() < 1e-8);
            assert_eq!(gp.rho, 0.0);
            assert_eq!(gp.mu, [0.0, 0.0]);
        }
        // zero velocity keeps the primary at its last observed position
        assert!(b.samples[0].iter().all(|p| *p == [0.45 * 3.0, 0.05 * 3.0]));
    }

    #[test]
    fn deterministic_given_rng() {
        let gen = generator();
        let a = gen.predict_k(&scene([0.0; 2]), 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen.predict_k(&scene([0.0; 2]), 3, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn k1_equals_decode_with_same_noise() {
        let gen = generator();
        let s = scene([0.0; 2]);
        let bundle = gen.predict_k(&s, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let noise = gen.sample_noise(3, &mut ChaCha8Rng::seed_from_u64(4));
        let ctx: Vec<AgentContext> = [0, 1, 2]
            .iter()
            .map(|id| AgentContext::from_scene(&s, *id, gen.cfg.horizon, None).unwrap())
            .collect();
        let rows: Vec<&AgentContext> = ctx.iter().collect();
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g, false);
        let z = g.constant(noise);
        let roll = gen.rollout(&mut g, &bound, &rows, z, NeighborMode::Simultaneous(&[0, 0, 0])).unwrap();
        assert_eq!(rows_of(&g, &roll.positions)[0], bundle.samples[0]);
    }

    #[test]
    fn batched_prediction_matches_single_scenes() {
        let gen = generator();
        let scenes = vec![scene([0.0; 2]), scene([3.0, -2.0])];
        let many = gen.predict_many(&scenes, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (s, m) in scenes.iter().zip(&many) {
            let one = gen.predict_k(s, 2, &mut rng).unwrap();
            for (a, b) in one.samples.iter().flatten().zip(m.samples.iter().flatten()) {
                assert!((a[0] - b[0]).abs() < 1e-12 && (a[1] - b[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn noise_changes_future_not_past() {
        let gen = generator();
        let s = scene([0.0; 2]);
        let a = gen.predict_k(&s, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = gen.predict_k(&s, 1, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.samples, b.samples);
    }

    #[test]
    fn translated_symmetric_scenes_encode_identically() {
        let gen = generator();
        let encode = |s: &Scene| {
            let ctx = AgentContext::from_scene(s, 0, gen.cfg.horizon, None).unwrap();
            let mut g = Graph::new();
            let bound = gen.params.bind(&mut g, false);
            let obs: Vec<Var> = (0..4).map(|t| positions_var(&mut g, &[&ctx], t)).collect();
            let st = gen.encode(&mut g, &bound, &[&ctx], &obs).unwrap();
            g.value(st.h).data.clone()
        };
        let a = encode(&scene([0.0; 2]));
        let b = encode(&scene([25.0, -13.0]));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_weights_encode_to_fixed_point() {
        let mut gen = generator();
        for b in &mut gen.params.blocks {
            b.data.fill(0.0);
        }
        let s = scene([0.0; 2]);
        let ctx = AgentContext::from_scene(&s, 0, gen.cfg.horizon, None).unwrap();
        let mut g = Graph::new();
        let bound = gen.params.bind(&mut g, false);
        let obs: Vec<Var> = (0..4).map(|t| positions_var(&mut g, &[&ctx], t)).collect();
        let st = gen.encode(&mut g, &bound, &[&ctx], &obs).unwrap();
        // gates are all 0.5 and the candidate is 0, so c stays 0 and h = 0
        assert!(g.value(st.h).data.iter().all(|x| *x == 0.0));
        assert!(g.value(st.c).data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn encoder_state_gradient_matches_finite_differences() {
        let gen = generator();
        let s = scene([0.0; 2]);
        let ctx = AgentContext::from_scene(&s, 0, gen.cfg.horizon, None).unwrap();
        let weights: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let f = |obs_vals: &[Point], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut g = Graph::new();
            let bound = gen.params.bind(&mut g, false);
            let obs: Vec<Var> = obs_vals.iter().map(|p| g.variable(Mat::from_vec(1, 2, p.to_vec()))).collect();
            let st = gen.encode(&mut g, &bound, &[&ctx], &obs).unwrap();
            let w = g.constant(Mat::from_vec(1, 8, weights.clone()));
            let m = g.mul(st.h, w);
            let y = g.sum(m);
            let val = g.value(y).scalar();
            let mut grads = Vec::new();
            if grad {
                g.backward(y);
                grads = obs.iter().map(|v| g.grad_or_zeros(*v).data).collect();
            }
            (val, grads)
        };
        let (_, an) = f(&ctx.obs, true);
        for t in 0..4 {
            for c in 0..2 {
                let h = 1e-6;
                let mut p = ctx.obs.clone();
                p[t][c] += h;
                let mut m = ctx.obs.clone();
                m[t][c] -= h;
                let fd = (f(&p, false).0 - f(&m, false).0) / (2.0 * h);
                let a = an[t][c];
                assert!((fd - a).abs() <= 1e-4 * fd.abs().max(a.abs()).max(1e-3), "t {t} c {c}: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn unobserved_primary_errors() {
        let gen = generator();
        let mut s = scene([0.0; 2]);
        s.pedestrians[0].positions[1] = None;
        assert!(matches!(
            gen.predict_k(&s, 1, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(GenError::NotObserved(0))
        ));
        assert!(gen.predict_k(&scene([0.0; 2]), 0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn exploding_weights_surface_step() {
        let mut gen = generator();
        gen.params.get_mut(gen.head.b).data[0] = 1e308;
        gen.params.get_mut(gen.head.b).data[2] = 1e3;
        let err = gen.predict_k(&scene([0.0; 2]), 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, GenError::NonFinite { step: 0 }), "{err}");
    }
}
