//! Spatial interaction embedding: per-pedestrian, per-step motion embedding
//! plus a directional-grid embedding of the neighbours' relative velocities,
//! optionally followed by an embedding of the direction to the goal.
//!
//! The grid is centred on the pedestrian and axis-aligned with the world
//! frame. A neighbour at relative position `r` lands in cell
//! `(floor((r.x + half) / res), floor((r.y + half) / res))` and contributes
//! its velocity relative to the pedestrian (two channels, summed per cell).
//! Cell assignment is held fixed when differentiating.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Graph, GridEntry, Mat, Var};
use crate::nn::{Bound, Linear, Params};
use crate::scene::{HorizonSpec, PedId, Point, Scene, Track};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-finite input to the interaction embedding")]
    NonFinite,
    #[error("grid has {got} values, expected {expected}")]
    GridShape { expected: usize, got: usize },
    #[error("invalid sim config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub motion_embed_dim: usize,
    pub interaction_dim: usize,
    pub grid_cells_per_side: usize,
    pub cell_resolution: f64,
    pub goal_embed_dim: Option<usize>,
    /// When false the grid input is identically zero (no-interaction
    /// ablation).
    pub interaction: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            motion_embed_dim: 16,
            interaction_dim: 64,
            grid_cells_per_side: 12,
            cell_resolution: 0.6,
            goal_embed_dim: Some(16),
            interaction: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.motion_embed_dim == 0 || self.interaction_dim == 0 || self.goal_embed_dim == Some(0) {
            return Err(SimError::Config("embedding dims must be > 0".into()));
        }
        if self.grid_cells_per_side == 0 || self.grid_cells_per_side % 2 != 0 {
            return Err(SimError::Config("grid_cells_per_side must be even and > 0".into()));
        }
        if !(self.cell_resolution > 0.0) {
            return Err(SimError::Config("cell_resolution must be > 0".into()));
        }
        Ok(())
    }

    pub fn n_cells(&self) -> usize {
        self.grid_cells_per_side * self.grid_cells_per_side
    }

    /// Width of `s^t = [e; p (; goal)]`.
    pub fn output_dim(&self) -> usize {
        self.motion_embed_dim + self.interaction_dim + self.goal_embed_dim.unwrap_or(0)
    }

    /// Grid cell of a neighbour at relative position `rel`, if inside the
    /// footprint.
    pub fn cell_of(&self, rel: Point) -> Option<usize> {
        let n = self.grid_cells_per_side as i64;
        let half = self.cell_resolution * self.grid_cells_per_side as f64 / 2.0;
        let ix = ((rel[0] + half) / self.cell_resolution).floor();
        let iy = ((rel[1] + half) / self.cell_resolution).floor();
        if !(ix.is_finite() && iy.is_finite()) {
            return None;
        }
        let (ix, iy) = (ix as i64, iy as i64);
        if (0..n).contains(&ix) && (0..n).contains(&iy) {
            Some((ix * n + iy) as usize)
        } else {
            None
        }
    }
}

/// A neighbour's position and velocity at one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborState {
    pub pos: Point,
    pub vel: Point,
}

/// Everything one batch row needs besides the primary's own positions: the
/// observed positions, the goal, and the neighbour states visible at each
/// step (`frames[t]`, empty at step 0 where no velocity exists).
#[derive(Clone, Debug, PartialEq)]
pub struct AgentContext {
    pub id: PedId,
    pub obs: Vec<Point>,
    pub goal: Option<Point>,
    pub frames: Vec<Vec<NeighborState>>,
    pub dt: f64,
}

impl AgentContext {
    /// Context of pedestrian `id`. Returns `None` unless `id` is present at
    /// every observed step. With `overrides`, neighbour positions after the
    /// observation window come from the given futures; neighbours missing
    /// from `overrides` are then absent in the future part.
    pub fn from_scene(
        scene: &Scene,
        id: PedId,
        horizon: HorizonSpec,
        overrides: Option<&[(PedId, Vec<Point>)]>,
    ) -> Option<Self> {
        let track = scene.track(id)?;
        if !track.is_complete(0..horizon.t_obs) {
            return None;
        }
        let total = horizon.total();
        let obs = (0..horizon.t_obs).map(|t| track.positions[t].expect("checked")).collect();
        let position = |other: &Track, t: usize| -> Option<Point> {
            if t >= horizon.t_obs {
                if let Some(ov) = overrides {
                    return ov
                        .iter()
                        .find(|(pid, _)| *pid == other.id)
                        .and_then(|(_, f)| f.get(t - horizon.t_obs).copied());
                }
            }
            other.at(t)
        };
        let mut frames = vec![Vec::new(); total];
        for other in scene.pedestrians.iter().filter(|p| p.id != id) {
            for (t, frame) in frames.iter_mut().enumerate().skip(1) {
                if let (Some(a), Some(b)) = (position(other, t - 1), position(other, t)) {
                    frame.push(NeighborState {
                        pos: b,
                        vel: [(b[0] - a[0]) / scene.dt, (b[1] - a[1]) / scene.dt],
                    });
                }
            }
        }
        Some(AgentContext {
            id,
            obs,
            goal: scene.goal(id),
            frames,
            dt: scene.dt,
        })
    }

    /// Constant neighbour batch for step `t` across `rows`.
    pub fn neighbor_batch(g: &mut Graph, rows: &[&AgentContext], t: usize) -> NeighborBatch {
        let per_row: Vec<&[NeighborState]> = rows.iter().map(|c| c.frames[t].as_slice()).collect();
        NeighborBatch::constant(g, &per_row)
    }
}

/// Dense directional grid, `cells^2 x 2` flattened cell-major.
pub fn directional_grid(cfg: &SimConfig, pos: Point, vel: Point, neighbors: &[NeighborState]) -> Vec<f64> {
    let mut grid = vec![0.0; cfg.n_cells() * 2];
    for n in neighbors {
        if let Some(c) = cfg.cell_of([n.pos[0] - pos[0], n.pos[1] - pos[1]]) {
            grid[2 * c] += n.vel[0] - vel[0];
            grid[2 * c + 1] += n.vel[1] - vel[1];
        }
    }
    grid
}

/// Parameter handles of one embedding module inside its owner's [`Params`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Sim {
    pub cfg: SimConfig,
    pub motion: Linear,
    pub grid: Linear,
    pub goal: Option<Linear>,
}

/// Neighbour side of a batched embedding step: velocities as a graph node
/// (`m x 2`), positions as values for binning, and for each batch row the
/// neighbour rows it sees.
pub struct NeighborBatch {
    pub pos: Vec<Point>,
    pub vel: Var,
    pub groups: Vec<Vec<usize>>,
}

impl NeighborBatch {
    /// Constant neighbour states, one list per batch row.
    pub fn constant(g: &mut Graph, per_row: &[&[NeighborState]]) -> Self {
        let mut pos = Vec::new();
        let mut vel = Vec::new();
        let mut groups = Vec::with_capacity(per_row.len());
        for row in per_row {
            let mut grp = Vec::with_capacity(row.len());
            for n in row.iter() {
                grp.push(pos.len());
                pos.push(n.pos);
                vel.extend_from_slice(&n.vel);
            }
            groups.push(grp);
        }
        let m = pos.len();
        let vel = g.constant(Mat::from_vec(m, 2, vel));
        NeighborBatch { pos, vel, groups }
    }
}

impl Sim {
    pub fn new<R: Rng>(params: &mut Params, name: &str, cfg: SimConfig, rng: &mut R) -> Self {
        let motion = Linear::new(params, &format!("{name}.motion"), 2, cfg.motion_embed_dim, rng);
        let grid = Linear::new(params, &format!("{name}.grid"), 2 * cfg.n_cells(), cfg.interaction_dim, rng);
        let goal = cfg
            .goal_embed_dim
            .map(|d| Linear::new(params, &format!("{name}.goal"), 2, d, rng));
        Sim { cfg, motion, grid, goal }
    }

    /// `e = relu(v W_emb + b)`.
    pub fn embed_motion_var(&self, g: &mut Graph, bound: &Bound, vel: Var) -> Var {
        let y = self.motion.forward(g, bound, vel);
        g.relu(y)
    }

    /// Batched `s^t` for rows with positions `pos` and velocities `vel`
    /// (both `b x 2`).
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        pos: Var,
        vel: Var,
        neighbors: &NeighborBatch,
        goals: &[Option<Point>],
    ) -> Var {
        let e = self.embed_motion_var(g, bound, vel);
        let entries: Vec<Vec<GridEntry>> = if self.cfg.interaction {
            let pv = g.value(pos);
            neighbors
                .groups
                .iter()
                .enumerate()
                .map(|(b, grp)| {
                    let p = [pv.get(b, 0), pv.get(b, 1)];
                    grp.iter()
                        .filter_map(|&j| {
                            let q = neighbors.pos[j];
                            self.cfg.cell_of([q[0] - p[0], q[1] - p[1]]).map(|cell| GridEntry { cell, neighbor_row: j })
                        })
                        .collect()
                })
                .collect()
        } else {
            vec![Vec::new(); neighbors.groups.len()]
        };
        let proj = g.grid_project(vel, neighbors.vel, bound.var(self.grid.w), entries);
        let p = g.add_row(proj, bound.var(self.grid.b));
        let p = g.relu(p);
        match &self.goal {
            Some(lin) => {
                let dir = g.goal_direction(pos, goals.to_vec());
                let ge = lin.forward(g, bound, dir);
                let ge = g.relu(ge);
                g.concat_cols(&[e, p, ge])
            }
            None => g.concat_cols(&[e, p]),
        }
    }
}

fn check_finite(xs: &[f64]) -> Result<(), SimError> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(SimError::NonFinite)
    }
}

/// Motion embedding of one velocity.
pub fn embed_motion(sim: &Sim, params: &Params, vel: Point) -> Result<Vec<f64>, SimError> {
    check_finite(&vel)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let v = g.constant(Mat::from_vec(1, 2, vel.to_vec()));
    let e = sim.embed_motion_var(&mut g, &bound, v);
    Ok(g.value(e).data.clone())
}

/// Interaction embedding `p = relu(flatten(grid) W + b)` of a dense grid.
pub fn embed_interaction(sim: &Sim, params: &Params, grid: &[f64]) -> Result<Vec<f64>, SimError> {
    let expected = 2 * sim.cfg.n_cells();
    if grid.len() != expected {
        return Err(SimError::GridShape { expected, got: grid.len() });
    }
    check_finite(grid)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(Mat::from_vec(1, expected, grid.to_vec()));
    let y = sim.grid.forward(&mut g, &bound, x);
    let y = g.relu(y);
    Ok(g.value(y).data.clone())
}

/// `s^t_i` for one pedestrian.
pub fn sim_step(
    sim: &Sim,
    params: &Params,
    pos: Point,
    vel: Point,
    neighbors: &[NeighborState],
    goal: Option<Point>,
) -> Result<Vec<f64>, SimError> {
    check_finite(&pos)?;
    check_finite(&vel)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let p = g.constant(Mat::from_vec(1, 2, pos.to_vec()));
    let v = g.constant(Mat::from_vec(1, 2, vel.to_vec()));
    let nb = NeighborBatch::constant(&mut g, &[neighbors]);
    let s = sim.forward(&mut g, &bound, p, v, &nb, &[goal]);
    Ok(g.value(s).data.clone())
}
