//! Scenes, trajectory bundles and the line-delimited JSON dataset format.
//!
//! A dataset file holds two record kinds, one JSON object per line:
//!
//! ```text
//! {"scene": {"id": 0, "p": 3, "s": 0, "e": 20, "fps": 2.5, "goals": [{"p": 3, "x": 1.0, "y": 2.0}]}}
//! {"track": {"f": 0, "p": 3, "x": 0.125, "y": -4.5}}
//! ```
//!
//! Tracks carry no scene id; a scene owns every track record whose frame lies
//! in its `[s, e]` range, so scenes in one file use disjoint frame ranges.
//! Frames step by one and `time = frame * dt` with `dt = 1 / fps`. A
//! pedestrian missing a record at some frame is absent at that step.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Point = [f64; 2];
pub type PedId = i64;

/// Seconds per step unless a file says otherwise.
pub const DEFAULT_DT: f64 = 0.4;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("scene {scene_id}: {rule}")]
    Validation { scene_id: i64, rule: String },
    #[error("{} scene(s) rejected: {}", .0.len(), .0.iter().map(|(id, r)| format!("scene {id}: {r}")).collect::<Vec<_>>().join("; "))]
    Rejected(Vec<(i64, String)>),
    #[error("need at least 2 positions to compute velocities, got {0}")]
    TooShort(usize),
    #[error("scene {scene_id} has {steps} steps, horizon needs {needed}")]
    HorizonMismatch { scene_id: i64, steps: usize, needed: usize },
    #[error("invalid horizon: {0}")]
    InvalidHorizon(String),
}

pub type Result<T> = std::result::Result<T, SceneError>;

/// Observation and prediction lengths in steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HorizonSpec {
    pub t_obs: usize,
    pub t_pred_len: usize,
}

impl HorizonSpec {
    pub fn new(t_obs: usize, t_pred_len: usize) -> Result<Self> {
        let h = HorizonSpec { t_obs, t_pred_len };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 {
            return Err(SceneError::InvalidHorizon(format!("t_obs must be >= 2, got {}", self.t_obs)));
        }
        if self.t_pred_len < 1 {
            return Err(SceneError::InvalidHorizon("t_pred_len must be >= 1".into()));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.t_obs + self.t_pred_len
    }
}

impl Default for HorizonSpec {
    fn default() -> Self {
        HorizonSpec { t_obs: 9, t_pred_len: 12 }
    }
}

/// One pedestrian's positions, one entry per scene step; `None` = absent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: PedId,
    pub positions: Vec<Option<Point>>,
}

impl Track {
    pub fn full(id: PedId, positions: Vec<Point>) -> Self {
        Track {
            id,
            positions: positions.into_iter().map(Some).collect(),
        }
    }

    pub fn at(&self, t: usize) -> Option<Point> {
        self.positions.get(t).copied().flatten()
    }

    /// Velocity at step `t`, defined when steps `t-1` and `t` are present.
    pub fn velocity(&self, t: usize, dt: f64) -> Option<Point> {
        if t == 0 {
            return None;
        }
        let (a, b) = (self.at(t - 1)?, self.at(t)?);
        Some([(b[0] - a[0]) / dt, (b[1] - a[1]) / dt])
    }

    pub fn is_complete(&self, range: std::ops::Range<usize>) -> bool {
        range.into_iter().all(|t| self.at(t).is_some())
    }
}

/// One forecasting instance: a primary pedestrian plus neighbours over a
/// common frame range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: i64,
    pub primary_id: PedId,
    /// Frame number of step 0.
    pub start_frame: i64,
    /// Primary first.
    pub pedestrians: Vec<Track>,
    pub goals: BTreeMap<PedId, Point>,
    pub dt: f64,
}

impl Scene {
    pub fn n_steps(&self) -> usize {
        self.pedestrians.first().map_or(0, |t| t.positions.len())
    }

    pub fn primary(&self) -> &Track {
        self.track(self.primary_id).expect("validated scene has its primary")
    }

    pub fn track(&self, id: PedId) -> Option<&Track> {
        self.pedestrians.iter().find(|t| t.id == id)
    }

    pub fn neighbors(&self) -> impl Iterator<Item = &Track> {
        let p = self.primary_id;
        self.pedestrians.iter().filter(move |t| t.id != p)
    }

    pub fn goal(&self, id: PedId) -> Option<Point> {
        self.goals.get(&id).copied()
    }

    /// Check the structural invariants; returns the first violated rule.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(format!("dt must be > 0, got {}", self.dt));
        }
        let n = self.n_steps();
        if n == 0 {
            return Err("scene has no steps".into());
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.pedestrians {
            if !seen.insert(t.id) {
                return Err(format!("duplicate pedestrian id {}", t.id));
            }
            if t.positions.len() != n {
                return Err(format!("pedestrian {} spans {} steps, scene spans {n}", t.id, t.positions.len()));
            }
            for p in t.positions.iter().flatten() {
                if !(p[0].is_finite() && p[1].is_finite()) {
                    return Err(format!("pedestrian {} has a non-finite coordinate", t.id));
                }
            }
        }
        let Some(primary) = self.track(self.primary_id) else {
            return Err(format!("primary pedestrian {} not in scene", self.primary_id));
        };
        if let Some(t) = primary.positions.iter().position(|p| p.is_none()) {
            return Err(format!("primary pedestrian {} absent at step {t}", self.primary_id));
        }
        for (id, g) in &self.goals {
            if !(g[0].is_finite() && g[1].is_finite()) {
                return Err(format!("goal of pedestrian {id} is non-finite"));
            }
        }
        Ok(())
    }
}

/// Round to 3 decimals, the on-disk precision.
pub fn round3(x: f64) -> f64 {
    format!("{x:.3}").parse().expect("formatted float parses")
}

/// `v^t = (pos^t - pos^{t-1}) / dt`.
pub fn velocities(positions: &[Point], dt: f64) -> Result<Vec<Point>> {
    if positions.len() < 2 {
        return Err(SceneError::TooShort(positions.len()));
    }
    Ok(positions
        .windows(2)
        .map(|w| [(w[1][0] - w[0][0]) / dt, (w[1][1] - w[0][1]) / dt])
        .collect())
}

fn sub_scene(scene: &Scene, range: std::ops::Range<usize>) -> Scene {
    Scene {
        scene_id: scene.scene_id,
        primary_id: scene.primary_id,
        start_frame: scene.start_frame + range.start as i64,
        pedestrians: scene
            .pedestrians
            .iter()
            .map(|t| Track {
                id: t.id,
                positions: t.positions[range.clone()].to_vec(),
            })
            .collect(),
        goals: scene.goals.clone(),
        dt: scene.dt,
    }
}

/// Split into observed steps `[0, t_obs)` and the following `t_pred_len`
/// steps.
pub fn split(scene: &Scene, horizon: HorizonSpec) -> Result<(Scene, Scene)> {
    horizon.validate()?;
    let n = scene.n_steps();
    if n < horizon.total() {
        return Err(SceneError::HorizonMismatch {
            scene_id: scene.scene_id,
            steps: n,
            needed: horizon.total(),
        });
    }
    Ok((
        sub_scene(scene, 0..horizon.t_obs),
        sub_scene(scene, horizon.t_obs..horizon.total()),
    ))
}

/// Inverse of [`split`].
pub fn concat(observed: &Scene, future: &Scene) -> Scene {
    let mut out = observed.clone();
    for t in &mut out.pedestrians {
        let fut = future
            .track(t.id)
            .map(|f| f.positions.clone())
            .unwrap_or_else(|| vec![None; future.n_steps()]);
        t.positions.extend(fut);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct GoalRecord {
    p: PedId,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    id: i64,
    p: PedId,
    s: i64,
    e: i64,
    fps: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    goals: Vec<GoalRecord>,
}

#[derive(Serialize, Deserialize)]
struct TrackRecord {
    f: i64,
    p: PedId,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Record {
    Scene(SceneRecord),
    Track(TrackRecord),
}

/// Outcome of a lenient load: accepted scenes plus rejections with reasons.
#[derive(Debug, Default)]
pub struct LoadReport {
    pub scenes: Vec<Scene>,
    pub rejected: Vec<(i64, String)>,
}

/// Parse a dataset, keeping valid scenes and reporting invalid ones.
pub fn load_scenes_report(path: impl AsRef<Path>, horizon: HorizonSpec) -> Result<LoadReport> {
    horizon.validate()?;
    let reader = BufReader::new(File::open(path)?);
    let mut headers = Vec::new();
    let mut tracks: Vec<TrackRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| SceneError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        match rec {
            Record::Scene(s) => headers.push(s),
            Record::Track(t) => tracks.push(t),
        }
    }
    tracks.sort_by_key(|t| t.f);
    let mut report = LoadReport::default();
    for h in headers {
        match assemble(&h, &tracks, horizon) {
            Ok(scene) => report.scenes.push(scene),
            Err(rule) => report.rejected.push((h.id, rule)),
        }
    }
    Ok(report)
}

/// Parse a dataset; any invalid scene fails the whole load.
pub fn load_scenes(path: impl AsRef<Path>, horizon: HorizonSpec) -> Result<Vec<Scene>> {
    let report = load_scenes_report(path, horizon)?;
    if !report.rejected.is_empty() {
        return Err(SceneError::Rejected(report.rejected));
    }
    Ok(report.scenes)
}

fn assemble(h: &SceneRecord, tracks: &[TrackRecord], horizon: HorizonSpec) -> std::result::Result<Scene, String> {
    if !(h.fps > 0.0 && h.fps.is_finite()) {
        return Err(format!("fps must be > 0, got {}", h.fps));
    }
    if h.e < h.s {
        return Err(format!("end frame {} before start frame {}", h.e, h.s));
    }
    let n = (h.e - h.s + 1) as usize;
    if n != horizon.total() {
        return Err(format!("scene spans {n} frames, horizon needs {}", horizon.total()));
    }
    let lo = tracks.partition_point(|t| t.f < h.s);
    let hi = tracks.partition_point(|t| t.f <= h.e);
    let mut order: Vec<PedId> = vec![h.p];
    let mut by_id: HashMap<PedId, Vec<Option<Point>>> = HashMap::new();
    by_id.insert(h.p, vec![None; n]);
    for t in &tracks[lo..hi] {
        let slot = by_id.entry(t.p).or_insert_with(|| {
            order.push(t.p);
            vec![None; n]
        });
        let k = (t.f - h.s) as usize;
        if slot[k].is_some() {
            return Err(format!("duplicate record for pedestrian {} at frame {}", t.p, t.f));
        }
        slot[k] = Some([t.x, t.y]);
    }
    let pedestrians = order
        .into_iter()
        .map(|id| Track {
            id,
            positions: by_id.remove(&id).unwrap_or_default(),
        })
        .collect();
    let scene = Scene {
        scene_id: h.id,
        primary_id: h.p,
        start_frame: h.s,
        pedestrians,
        goals: h.goals.iter().map(|g| (g.p, [g.x, g.y])).collect(),
        dt: 1.0 / h.fps,
    };
    scene.validate()?;
    Ok(scene)
}

/// Write scenes in the dataset format with 3-decimal coordinates.
pub fn save_scenes(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    let mut ranges: Vec<(i64, i64, i64)> = Vec::with_capacity(scenes.len());
    for s in scenes {
        s.validate().map_err(|rule| SceneError::Validation {
            scene_id: s.scene_id,
            rule,
        })?;
        ranges.push((s.start_frame, s.start_frame + s.n_steps() as i64 - 1, s.scene_id));
    }
    ranges.sort();
    for w in ranges.windows(2) {
        if w[1].0 <= w[0].1 {
            return Err(SceneError::Validation {
                scene_id: w[1].2,
                rule: format!("frame range overlaps scene {}", w[0].2),
            });
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for s in scenes {
        let header = Record::Scene(SceneRecord {
            id: s.scene_id,
            p: s.primary_id,
            s: s.start_frame,
            e: s.start_frame + s.n_steps() as i64 - 1,
            fps: 1.0 / s.dt,
            goals: s.goals.iter().map(|(p, g)| GoalRecord { p: *p, x: round3(g[0]), y: round3(g[1]) }).collect(),
        });
        writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;
        for t in &s.pedestrians {
            for (k, pos) in t.positions.iter().enumerate() {
                if let Some(p) = pos {
                    writeln!(
                        out,
                        "{{\"track\":{{\"f\":{},\"p\":{},\"x\":{:.3},\"y\":{:.3}}}}}",
                        s.start_frame + k as i64,
                        t.id,
                        p[0],
                        p[1]
                    )?;
                }
            }
        }
    }
    out.flush()?;
    Ok(())
}

/// Parameters of the bivariate Gaussian over the next velocity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub mu: Point,
    pub sigma: Point,
    pub rho: f64,
}

/// Predicted futures of one pedestrian (the scene's primary) in one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBundle {
    pub scene_id: i64,
    /// `k` primary futures of `t_pred_len` positions each.
    pub samples: Vec<Vec<Point>>,
    /// Per-sample, per-step Gaussian head output, when the model emits one.
    #[serde(default)]
    pub gaussians: Option<Vec<Vec<GaussianParams>>>,
    /// Per-sample predicted neighbour futures (simultaneous rollout); empty
    /// when the predictor only forecasts the primary.
    #[serde(default)]
    pub neighbors: Vec<Vec<(PedId, Vec<Point>)>>,
}

impl TrajectoryBundle {
    pub fn k(&self) -> usize {
        self.samples.len()
    }

    pub fn validate(&self, t_pred_len: usize) -> std::result::Result<(), String> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != t_pred_len {
                return Err(format!("sample {i} has {} steps, expected {t_pred_len}", s.len()));
            }
            if s.iter().any(|p| !(p[0].is_finite() && p[1].is_finite())) {
                return Err(format!("sample {i} has a non-finite coordinate"));
            }
        }
        Ok(())
    }

    /// Neighbour futures for sample `i`, falling back to ground truth when the
    /// predictor did not roll neighbours out.
    pub fn neighbor_futures(&self, i: usize, scene: &Scene, horizon: HorizonSpec) -> Vec<Vec<Option<Point>>> {
        if let Some(nb) = self.neighbors.get(i) {
            return nb.iter().map(|(_, p)| p.iter().copied().map(Some).collect()).collect();
        }
        scene
            .neighbors()
            .map(|t| t.positions[horizon.t_obs..horizon.total()].to_vec())
            .collect()
    }
}
