//! SVG scene plots: observed paths solid, ground truth solid green,
//! predictions dashed, refined predictions in a separate colour.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::warn;

use crate::scene::{HorizonSpec, Point, Scene, TrajectoryBundle};

const SIZE: f64 = 480.0;
const MARGIN: f64 = 24.0;

struct Frame {
    min: Point,
    scale: f64,
}

impl Frame {
    fn fit(points: impl Iterator<Item = Point>) -> Option<Frame> {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for c in 0..2 {
                lo[c] = lo[c].min(p[c]);
                hi[c] = hi[c].max(p[c]);
            }
        }
        if !lo[0].is_finite() {
            return None;
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-6);
        Some(Frame {
            min: lo,
            scale: (SIZE - 2.0 * MARGIN) / span,
        })
    }

    fn xy(&self, p: Point) -> (f64, f64) {
        (MARGIN + (p[0] - self.min[0]) * self.scale, SIZE - MARGIN - (p[1] - self.min[1]) * self.scale)
    }
}

fn polyline(s: &mut String, f: &Frame, pts: &[Point], style: &str) {
    if pts.len() < 2 {
        return;
    }
    let coords: Vec<String> = pts
        .iter()
        .map(|p| {
            let (x, y) = f.xy(*p);
            format!("{x:.2},{y:.2}")
        })
        .collect();
    let _ = writeln!(s, r#"    <polyline fill="none" {style} points="{}"/>"#, coords.join(" "));
}

/// One SVG document for a scene with its predictions and, optionally,
/// refined predictions. Returns `None` when the scene has no positions.
pub fn render_scene(scene: &Scene, horizon: HorizonSpec, pred: Option<&TrajectoryBundle>, refined: Option<&TrajectoryBundle>) -> Option<String> {
    let present = |t: &crate::scene::Track, r: std::ops::Range<usize>| -> Vec<Point> { t.positions[r].iter().flatten().copied().collect() };
    let total = horizon.total().min(scene.n_steps());
    let t_obs = horizon.t_obs.min(total);
    let extra = pred.into_iter().chain(refined).flat_map(|b| b.samples.iter().flatten().copied());
    let frame = Frame::fit(scene.pedestrians.iter().flat_map(|t| present(t, 0..total)).chain(extra))?;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r##"  <rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(s, r#"  <g class="neighbors">"#);
    for t in scene.neighbors() {
        polyline(&mut s, &frame, &present(t, 0..t_obs), r##"stroke="#999999" stroke-width="1.5""##);
        polyline(&mut s, &frame, &present(t, t_obs.saturating_sub(1)..total), r##"stroke="#bbbbbb" stroke-width="1" stroke-dasharray="2,3""##);
    }
    let _ = writeln!(s, "  </g>");
    let primary = scene.primary();
    let obs = present(primary, 0..t_obs);
    let _ = writeln!(s, r#"  <g class="observed">"#);
    polyline(&mut s, &frame, &obs, r##"stroke="#1f4e9c" stroke-width="2.5""##);
    let _ = writeln!(s, "  </g>");
    let last = obs.last().copied();
    let with_last = |f: &[Point]| -> Vec<Point> { last.into_iter().chain(f.iter().copied()).collect() };
    let _ = writeln!(s, r#"  <g class="ground-truth">"#);
    polyline(&mut s, &frame, &with_last(&present(primary, t_obs..total)), r##"stroke="#2a9d3a" stroke-width="2""##);
    let _ = writeln!(s, "  </g>");
    if let Some(b) = pred {
        let _ = writeln!(s, r#"  <g class="prediction">"#);
        for sample in &b.samples {
            polyline(&mut s, &frame, &with_last(sample), r##"stroke="#e07b00" stroke-width="1.5" stroke-dasharray="6,4""##);
        }
        let _ = writeln!(s, "  </g>");
    }
    if let Some(b) = refined {
        let _ = writeln!(s, r#"  <g class="refined">"#);
        for sample in &b.samples {
            polyline(&mut s, &frame, &with_last(sample), r##"stroke="#c0182b" stroke-width="1.5" stroke-dasharray="2,2""##);
        }
        let _ = writeln!(s, "  </g>");
    }
    let legend = [("observed", "#1f4e9c"), ("ground truth", "#2a9d3a"), ("prediction", "#e07b00"), ("refined", "#c0182b")];
    let _ = writeln!(s, r#"  <g class="legend" font-family="sans-serif" font-size="11">"#);
    for (i, (label, colour)) in legend.iter().enumerate() {
        let y = 14.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"    <line x1="6" y1="{y}" x2="24" y2="{y}" stroke="{colour}" stroke-width="2"/>"#);
        let _ = writeln!(s, r#"    <text x="28" y="{}">{label}</text>"#, y + 4.0);
    }
    let _ = writeln!(s, "  </g>\n</svg>");
    Some(s)
}

pub fn scene_file_name(scene_id: i64) -> String {
    format!("scene_{scene_id:06}.svg")
}

/// Writes one SVG per scene under `out`. Predictions are matched by scene
/// id; scenes that cannot be drawn are logged and skipped.
pub fn plot_scenes(
    scenes: &[Scene],
    horizon: HorizonSpec,
    predictions: &[TrajectoryBundle],
    refined: &[TrajectoryBundle],
    out: &Path,
) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let find = |v: &[TrajectoryBundle], id: i64| v.iter().find(|b| b.scene_id == id).cloned();
    let mut written = Vec::new();
    for scene in scenes {
        let p = find(predictions, scene.scene_id);
        let r = find(refined, scene.scene_id);
        match render_scene(scene, horizon, p.as_ref(), r.as_ref()) {
            Some(svg) => {
                let path = out.join(scene_file_name(scene.scene_id));
                std::fs::write(&path, svg)?;
                written.push(path);
            }
            None => warn!("scene {} has no positions; skipped", scene.scene_id),
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::Track;

    fn scene() -> Scene {
        Scene {
            scene_id: 3,
            primary_id: 0,
            start_frame: 0,
            pedestrians: vec![
                Track::full(0, (0..5).map(|t| [t as f64, 0.0]).collect()),
                Track::full(1, (0..5).map(|t| [t as f64, 2.0]).collect()),
            ],
            goals: Default::default(),
            dt: 0.4,
        }
    }

    fn bundle(dy: f64) -> TrajectoryBundle {
        TrajectoryBundle {
            scene_id: 3,
            samples: vec![vec![[3.0, dy], [4.0, dy]], vec![[3.0, -dy], [4.0, -dy]]],
            gaussians: None,
            neighbors: vec![],
        }
    }

    #[test]
    fn four_path_groups_with_refinement() {
        let h = HorizonSpec::new(3, 2).unwrap();
        let svg = render_scene(&scene(), h, Some(&bundle(0.5)), Some(&bundle(0.2))).unwrap();
        for class in ["observed", "ground-truth", "prediction", "refined"] {
            assert!(svg.contains(&format!(r#"<g class="{class}">"#)), "{class}");
        }
        assert_eq!(svg.matches("<polyline").count(), 2 + 1 + 1 + 2 + 2);
    }

    #[test]
    fn zero_scenes_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let h = HorizonSpec::new(3, 2).unwrap();
        assert!(plot_scenes(&[], h, &[], &[], dir.path()).unwrap().is_empty());
        let files = plot_scenes(&[scene()], h, &[bundle(0.5)], &[], dir.path()).unwrap();
        assert_eq!(files, vec![dir.path().join("scene_000003.svg")]);
        assert!(std::fs::metadata(&files[0]).unwrap().len() > 0);
    }
}
