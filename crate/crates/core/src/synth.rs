//! Synthetic crowds: goal-driven social-force pedestrians on a
//! circle-crossing layout, and a single-agent scene whose future forks into a
//! fixed number of well separated modes.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene::{round3, Point, Scene, Track};
use crate::seeding;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid world config: {0}")]
    Config(String),
    #[error("scene {scene}: no interaction-rich sample after {attempts} attempts")]
    FilterUnsatisfied { scene: usize, attempts: usize },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Social-force world parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub n_pedestrians: usize,
    /// Spawn circle radius (m).
    pub arena_radius: f64,
    /// Distance of each goal from the arena centre, on the far side (m).
    pub goal_radius: f64,
    /// Maximum angular offset of a goal from the exact antipode (degrees).
    pub goal_jitter_deg: f64,
    pub desired_speed: f64,
    pub relaxation_time: f64,
    pub repulsion_strength: f64,
    pub repulsion_range: f64,
    /// Speed cap as a multiple of `desired_speed`.
    pub max_speed_factor: f64,
    pub dt: f64,
    /// Euler sub-steps per recorded step.
    pub substeps: usize,
    pub total_steps: usize,
    /// The primary must come within `interaction_radius` of a neighbour at
    /// some step `>= filter_from_step`.
    pub interaction_radius: f64,
    pub filter_from_step: usize,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_pedestrians: 5,
            arena_radius: 5.0,
            goal_radius: 10.0,
            goal_jitter_deg: 25.0,
            desired_speed: 1.2,
            relaxation_time: 0.5,
            repulsion_strength: 10.0,
            repulsion_range: 0.5,
            max_speed_factor: 1.3,
            dt: 0.4,
            substeps: 8,
            total_steps: 21,
            interaction_radius: 2.0,
            filter_from_step: 9,
            max_attempts: 200,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("arena_radius", self.arena_radius),
            ("goal_radius", self.goal_radius),
            ("desired_speed", self.desired_speed),
            ("relaxation_time", self.relaxation_time),
            ("repulsion_range", self.repulsion_range),
            ("dt", self.dt),
            ("max_speed_factor", self.max_speed_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SynthError::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if !(self.repulsion_strength >= 0.0 && self.repulsion_strength.is_finite()) {
            return Err(SynthError::Config("repulsion_strength must be >= 0".into()));
        }
        if self.n_pedestrians == 0 {
            return Err(SynthError::Config("n_pedestrians must be >= 1".into()));
        }
        if self.substeps == 0 || self.total_steps < 2 {
            return Err(SynthError::Config("substeps >= 1 and total_steps >= 2 required".into()));
        }
        if self.max_attempts == 0 {
            return Err(SynthError::Config("max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Initial state of one simulated pedestrian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agent {
    pub pos: Point,
    pub vel: Point,
    pub goal: Point,
}

fn unit(dx: f64, dy: f64) -> Point {
    let n = (dx * dx + dy * dy).sqrt();
    if n < 1e-12 {
        [0.0, 0.0]
    } else {
        [dx / n, dy / n]
    }
}

/// Integrate the social-force dynamics and record `total_steps` positions
/// per agent (step 0 = initial state). Not rounded.
pub fn simulate(cfg: &WorldConfig, agents: &[Agent]) -> Vec<Vec<Point>> {
    let n = agents.len();
    let mut pos: Vec<Point> = agents.iter().map(|a| a.pos).collect();
    let mut vel: Vec<Point> = agents.iter().map(|a| a.vel).collect();
    let mut out: Vec<Vec<Point>> = pos.iter().map(|p| vec![*p]).collect();
    let h = cfg.dt / cfg.substeps as f64;
    let vmax = cfg.max_speed_factor * cfg.desired_speed;
    let mut acc = vec![[0.0; 2]; n];
    for _ in 1..cfg.total_steps {
        for _ in 0..cfg.substeps {
            for i in 0..n {
                let e = unit(agents[i].goal[0] - pos[i][0], agents[i].goal[1] - pos[i][1]);
                let mut a = [
                    (cfg.desired_speed * e[0] - vel[i][0]) / cfg.relaxation_time,
                    (cfg.desired_speed * e[1] - vel[i][1]) / cfg.relaxation_time,
                ];
                if cfg.repulsion_strength > 0.0 {
                    for j in 0..n {
                        if j == i {
                            continue;
                        }
                        let (dx, dy) = (pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]);
                        let d = (dx * dx + dy * dy).sqrt();
                        let mag = cfg.repulsion_strength * (-d / cfg.repulsion_range).exp();
                        let u = unit(dx, dy);
                        a[0] += mag * u[0];
                        a[1] += mag * u[1];
                    }
                }
                acc[i] = a;
            }
            for i in 0..n {
                vel[i][0] += acc[i][0] * h;
                vel[i][1] += acc[i][1] * h;
                let s = (vel[i][0] * vel[i][0] + vel[i][1] * vel[i][1]).sqrt();
                if s > vmax {
                    vel[i][0] *= vmax / s;
                    vel[i][1] *= vmax / s;
                }
                pos[i][0] += vel[i][0] * h;
                pos[i][1] += vel[i][1] * h;
            }
        }
        for i in 0..n {
            out[i].push(pos[i]);
        }
    }
    out
}

fn spawn<R: Rng>(cfg: &WorldConfig, rng: &mut R) -> Vec<Agent> {
    let mut angles: Vec<f64> = Vec::with_capacity(cfg.n_pedestrians);
    // Keep spawn points at least ~1 m apart along the circle.
    let min_gap = 1.0 / cfg.arena_radius;
    while angles.len() < cfg.n_pedestrians {
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        let clear = angles.iter().all(|b| {
            let d = (a - b).rem_euclid(std::f64::consts::TAU);
            d.min(std::f64::consts::TAU - d) > min_gap
        });
        if clear || angles.len() as f64 * min_gap > 5.0 {
            angles.push(a);
        }
    }
    let jitter = cfg.goal_jitter_deg.to_radians();
    angles
        .into_iter()
        .map(|a| {
            let pos = [cfg.arena_radius * a.cos(), cfg.arena_radius * a.sin()];
            let ga = a + std::f64::consts::PI + if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 };
            let goal = [cfg.goal_radius * ga.cos(), cfg.goal_radius * ga.sin()];
            let e = unit(goal[0] - pos[0], goal[1] - pos[1]);
            Agent {
                pos,
                vel: [cfg.desired_speed * e[0], cfg.desired_speed * e[1]],
                goal,
            }
        })
        .collect()
}

fn interaction_rich(cfg: &WorldConfig, paths: &[Vec<Point>]) -> bool {
    let primary = &paths[0];
    (cfg.filter_from_step..primary.len()).any(|t| {
        paths[1..].iter().any(|p| {
            let (dx, dy) = (p[t][0] - primary[t][0], p[t][1] - primary[t][1]);
            (dx * dx + dy * dy).sqrt() < cfg.interaction_radius
        })
    })
}

fn to_scene(cfg: &WorldConfig, scene_id: i64, start_frame: i64, agents: &[Agent], paths: Vec<Vec<Point>>) -> Scene {
    let pedestrians = paths
        .into_iter()
        .enumerate()
        .map(|(i, p)| Track::full(i as i64, p.into_iter().map(|q| [round3(q[0]), round3(q[1])]).collect()))
        .collect();
    let goals: BTreeMap<i64, Point> = agents
        .iter()
        .enumerate()
        .map(|(i, a)| (i as i64, [round3(a.goal[0]), round3(a.goal[1])]))
        .collect();
    Scene {
        scene_id,
        primary_id: 0,
        start_frame,
        pedestrians,
        goals,
        dt: cfg.dt,
    }
}

fn generate_indexed(cfg: &WorldConfig, seed: u64, index: usize) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = seeding::stream(seed, "scene", index as u64);
    for _ in 0..cfg.max_attempts {
        let agents = spawn(cfg, &mut rng);
        let paths = simulate(cfg, &agents);
        if cfg.n_pedestrians == 1 || interaction_rich(cfg, &paths) {
            let start = index as i64 * cfg.total_steps as i64;
            return Ok(to_scene(cfg, index as i64, start, &agents, paths));
        }
    }
    Err(SynthError::FilterUnsatisfied {
        scene: index,
        attempts: cfg.max_attempts,
    })
}

/// One interaction-rich circle-crossing scene; pedestrian 0 is the primary.
pub fn generate_scene(cfg: &WorldConfig, rng_seed: u64) -> Result<Scene> {
    generate_indexed(cfg, rng_seed, 0)
}

/// `n_scenes` scenes with disjoint frame ranges, deterministic in
/// `(cfg, seed)`.
pub fn generate_dataset(cfg: &WorldConfig, n_scenes: usize, seed: u64) -> Result<Vec<Scene>> {
    cfg.validate()?;
    (0..n_scenes).map(|i| generate_indexed(cfg, seed, i)).collect()
}

/// Layout of the forking scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForkingConfig {
    pub mode_count: usize,
    pub samples_per_mode: usize,
    pub t_obs: usize,
    pub t_pred_len: usize,
    pub speed: f64,
    pub dt: f64,
    /// Heading difference between adjacent modes (degrees).
    pub mode_spacing_deg: f64,
    /// Prediction steps over which the heading turns into its mode.
    pub turn_steps: usize,
    /// Per-sample heading perturbation bound (degrees).
    pub heading_jitter_deg: f64,
    /// Per-sample relative speed perturbation bound.
    pub speed_jitter: f64,
}

impl Default for ForkingConfig {
    fn default() -> Self {
        ForkingConfig {
            mode_count: 4,
            samples_per_mode: 50,
            t_obs: 8,
            t_pred_len: 13,
            speed: 1.2,
            dt: 0.4,
            mode_spacing_deg: 40.0,
            turn_steps: 4,
            heading_jitter_deg: 3.0,
            speed_jitter: 0.04,
        }
    }
}

/// A future labelled with the mode it was drawn from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeFuture {
    pub mode: usize,
    pub positions: Vec<Point>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForkingScene {
    /// Observed prefix (`t_obs` steps) shared by every future.
    pub observed: Scene,
    pub futures: Vec<ModeFuture>,
    /// Unperturbed endpoint of each mode.
    pub centers: Vec<Point>,
    /// Bound on the distance of any sample endpoint from its mode centre.
    pub radius: f64,
}

impl ForkingScene {
    /// Full-horizon scenes (prefix + each future), one per future, with
    /// disjoint frame ranges.
    pub fn training_scenes(&self) -> Vec<Scene> {
        let n = self.observed.n_steps() + self.futures.first().map_or(0, |f| f.positions.len());
        self.futures
            .iter()
            .enumerate()
            .map(|(i, f)| {
                let mut s = self.observed.clone();
                s.scene_id = i as i64;
                s.start_frame = (i * n) as i64;
                s.pedestrians[0].positions.extend(f.positions.iter().copied().map(Some));
                s
            })
            .collect()
    }
}

fn fork_path(cfg: &ForkingConfig, heading: f64, speed: f64) -> Vec<Point> {
    let mut p = [0.0, 0.0];
    (1..=cfg.t_pred_len)
        .map(|t| {
            let frac = (t as f64 / cfg.turn_steps.max(1) as f64).min(1.0);
            let a = heading * frac;
            p[0] += speed * cfg.dt * a.cos();
            p[1] += speed * cfg.dt * a.sin();
            [round3(p[0]), round3(p[1])]
        })
        .collect()
}

fn mode_heading(cfg: &ForkingConfig, m: usize) -> f64 {
    ((m as f64) - (cfg.mode_count as f64 - 1.0) / 2.0) * cfg.mode_spacing_deg.to_radians()
}

/// A single pedestrian walking along +x whose future splits into
/// `mode_count` headings.
pub fn generate_forking_scene(cfg: &ForkingConfig, seed: u64) -> Result<ForkingScene> {
    if cfg.mode_count < 2 {
        return Err(SynthError::Config("mode_count must be >= 2".into()));
    }
    if cfg.samples_per_mode == 0 || cfg.t_obs < 2 || cfg.t_pred_len == 0 {
        return Err(SynthError::Config("samples_per_mode, t_obs >= 2, t_pred_len required".into()));
    }
    if !(cfg.speed > 0.0 && cfg.dt > 0.0) {
        return Err(SynthError::Config("speed and dt must be > 0".into()));
    }
    let mut rng = seeding::stream(seed, "forking", 0);
    let obs: Vec<Point> = (0..cfg.t_obs)
        .map(|t| [round3(-((cfg.t_obs - 1 - t) as f64) * cfg.speed * cfg.dt), 0.0])
        .collect();
    let observed = Scene {
        scene_id: 0,
        primary_id: 0,
        start_frame: 0,
        pedestrians: vec![Track::full(0, obs)],
        goals: BTreeMap::new(),
        dt: cfg.dt,
    };
    let jit = cfg.heading_jitter_deg.to_radians();
    let mut centers = Vec::with_capacity(cfg.mode_count);
    let mut radius: f64 = 0.0;
    for m in 0..cfg.mode_count {
        let h = mode_heading(cfg, m);
        let c = *fork_path(cfg, h, cfg.speed).last().expect("t_pred_len >= 1");
        for (dh, ds) in [(-jit, -1.0), (-jit, 1.0), (jit, -1.0), (jit, 1.0)] {
            let e = *fork_path(cfg, h + dh, cfg.speed * (1.0 + ds * cfg.speed_jitter)).last().expect("non-empty");
            radius = radius.max(((e[0] - c[0]).powi(2) + (e[1] - c[1]).powi(2)).sqrt());
        }
        centers.push(c);
    }
    let mut futures = Vec::with_capacity(cfg.mode_count * cfg.samples_per_mode);
    for _ in 0..cfg.samples_per_mode {
        for m in 0..cfg.mode_count {
            let dh = if jit > 0.0 { rng.random_range(-jit..jit) } else { 0.0 };
            let ds = if cfg.speed_jitter > 0.0 { rng.random_range(-cfg.speed_jitter..cfg.speed_jitter) } else { 0.0 };
            futures.push(ModeFuture {
                mode: m,
                positions: fork_path(cfg, mode_heading(cfg, m) + dh, cfg.speed * (1.0 + ds)),
            });
        }
    }
    // endpoints are rounded; keep the bound conservative
    radius += 1e-3;
    Ok(ForkingScene {
        observed,
        futures,
        centers,
        radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: Point, b: Point) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    #[test]
    fn lone_pedestrian_approaches_goal() {
        let cfg = WorldConfig::default();
        let agent = Agent {
            pos: [0.0, 0.0],
            vel: [0.0, 0.0],
            goal: [10.0, 0.0],
        };
        let path = &simulate(&cfg, &[agent])[0];
        assert!(dist(*path.last().unwrap(), agent.goal) < dist(path[0], agent.goal));
        // strictly decreasing after a short transient
        for t in 6..path.len() {
            assert!(dist(path[t], agent.goal) < dist(path[t - 1], agent.goal));
        }
    }

    #[test]
    fn zero_repulsion_decouples_agents() {
        let cfg = WorldConfig {
            repulsion_strength: 0.0,
            ..WorldConfig::default()
        };
        let a = Agent { pos: [-5.0, 0.0], vel: [1.2, 0.0], goal: [10.0, 0.1] };
        let b = Agent { pos: [5.0, 0.0], vel: [-1.2, 0.0], goal: [-10.0, -0.1] };
        let both = simulate(&cfg, &[a, b]);
        let solo_a = simulate(&cfg, &[a]);
        let solo_b = simulate(&cfg, &[b]);
        for t in 0..cfg.total_steps {
            assert!(dist(both[0][t], solo_a[0][t]) < 1e-9);
            assert!(dist(both[1][t], solo_b[0][t]) < 1e-9);
        }
    }

    #[test]
    fn head_on_pair_keeps_distance() {
        let cfg = WorldConfig::default();
        let a = Agent { pos: [-5.0, 0.0], vel: [1.2, 0.0], goal: [10.0, 0.0] };
        let b = Agent { pos: [5.0, 0.0], vel: [-1.2, 0.0], goal: [-10.0, 0.0] };
        let paths = simulate(&cfg, &[a, b]);
        let min = (0..cfg.total_steps).map(|t| dist(paths[0][t], paths[1][t])).fold(f64::INFINITY, f64::min);
        assert!(min > 0.1, "min distance {min}");
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = WorldConfig::default();
        let a = generate_dataset(&cfg, 5, 11).unwrap();
        let b = generate_dataset(&cfg, 5, 11).unwrap();
        assert_eq!(a, b);
        assert!(generate_dataset(&cfg, 0, 11).unwrap().is_empty());
        let c = generate_dataset(&cfg, 5, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scenes_are_valid_interaction_rich_and_speed_bounded() {
        let cfg = WorldConfig::default();
        for s in generate_dataset(&cfg, 20, 3).unwrap() {
            s.validate().unwrap();
            assert_eq!(s.n_steps(), cfg.total_steps);
            assert_eq!(s.goals.len(), cfg.n_pedestrians);
            let p = s.primary();
            let close = (cfg.filter_from_step..cfg.total_steps).any(|t| {
                s.neighbors().any(|n| dist(n.at(t).unwrap(), p.at(t).unwrap()) < cfg.interaction_radius)
            });
            assert!(close);
            for tr in &s.pedestrians {
                for t in 1..cfg.total_steps {
                    let v = tr.velocity(t, cfg.dt).unwrap();
                    assert!((v[0] * v[0] + v[1] * v[1]).sqrt() <= 2.0 * cfg.desired_speed);
                }
            }
        }
    }

    #[test]
    fn unsatisfiable_filter_errors() {
        let cfg = WorldConfig {
            interaction_radius: 1e-6,
            max_attempts: 3,
            ..WorldConfig::default()
        };
        assert!(matches!(generate_scene(&cfg, 0), Err(SynthError::FilterUnsatisfied { .. })));
    }

    #[test]
    fn forking_counts_and_shared_prefix() {
        let cfg = ForkingConfig {
            samples_per_mode: 1,
            ..ForkingConfig::default()
        };
        let f = generate_forking_scene(&cfg, 0).unwrap();
        assert_eq!(f.futures.len(), 4);
        assert_eq!(f.centers.len(), 4);
        let scenes = f.training_scenes();
        for s in &scenes {
            assert_eq!(s.pedestrians[0].positions[..cfg.t_obs], f.observed.pedestrians[0].positions[..]);
        }
    }

    #[test]
    fn forking_rejects_single_mode() {
        let cfg = ForkingConfig {
            mode_count: 1,
            ..ForkingConfig::default()
        };
        assert!(generate_forking_scene(&cfg, 0).is_err());
    }

    #[test]
    fn forking_clusters_are_separated() {
        for seed in 0..10 {
            let f = generate_forking_scene(&ForkingConfig::default(), seed).unwrap();
            // measured clusters: mean endpoint and max spread per mode
            let mut measured = Vec::new();
            for m in 0..4 {
                let ends: Vec<Point> = f.futures.iter().filter(|x| x.mode == m).map(|x| *x.positions.last().unwrap()).collect();
                let c = [
                    ends.iter().map(|e| e[0]).sum::<f64>() / ends.len() as f64,
                    ends.iter().map(|e| e[1]).sum::<f64>() / ends.len() as f64,
                ];
                let r = ends.iter().map(|e| dist(*e, c)).fold(0.0, f64::max);
                for e in &ends {
                    assert!(dist(*e, f.centers[m]) <= f.radius);
                }
                measured.push((c, r));
            }
            let within = measured.iter().map(|m| m.1).fold(0.0, f64::max);
            for i in 0..4 {
                for j in i + 1..4 {
                    assert!(dist(measured[i].0, measured[j].0) > 4.0 * within, "seed {seed}");
                }
            }
        }
    }
}
