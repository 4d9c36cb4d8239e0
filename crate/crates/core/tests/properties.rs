//! Property tests for the invariants of each module.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trajgan_core::autodiff::Mat;
use trajgan_core::config::ExperimentConfig;
use trajgan_core::discriminator::{attention, DiscVariant, Discriminator, DiscriminatorConfig};
use trajgan_core::evalkit::{self, collision_rate, top_k_ade, top_k_fde, CollisionConfig};
use trajgan_core::generator::{Generator, GeneratorConfig};
use trajgan_core::scene::{self, concat, split, velocities, HorizonSpec, Point, Scene, Track, TrajectoryBundle};
use trajgan_core::sim::{directional_grid, AgentContext, NeighborState, SimConfig};
use trajgan_core::synth::{generate_scene, WorldConfig};
use trajgan_core::training::{d_loss, g_loss, variety_loss};

fn point() -> impl Strategy<Value = Point> {
    (-20.0..20.0f64, -20.0..20.0f64).prop_map(|(x, y)| [x, y])
}

fn path(n: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(), n)
}

fn mm(p: Point) -> Point {
    [scene::round3(p[0]), scene::round3(p[1])]
}

/// A scene of `peds` complete tracks; a random walk keeps it plausible.
fn scene_strategy(steps: usize, peds: usize) -> impl Strategy<Value = Scene> {
    prop::collection::vec((point(), prop::collection::vec((-0.6..0.6f64, -0.6..0.6f64), steps - 1)), peds).prop_map(move |tracks| {
        let pedestrians = tracks
            .into_iter()
            .enumerate()
            .map(|(id, (start, steps))| {
                let mut p = start;
                let mut pos = vec![mm(p)];
                for (dx, dy) in steps {
                    p = [p[0] + dx, p[1] + dy];
                    pos.push(mm(p));
                }
                Track::full(id as i64, pos)
            })
            .collect();
        Scene {
            scene_id: 0,
            primary_id: 0,
            start_frame: 0,
            pedestrians,
            goals: Default::default(),
            dt: 0.4,
        }
    })
}

fn transform(p: Point, angle: f64, shift: Point) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1] + shift[0], s * p[0] + c * p[1] + shift[1]]
}

fn transform_scene(s: &Scene, angle: f64, shift: Point) -> Scene {
    let mut out = s.clone();
    for t in &mut out.pedestrians {
        for p in t.positions.iter_mut().flatten() {
            *p = transform(*p, angle, shift);
        }
    }
    out
}

fn transform_bundle(b: &TrajectoryBundle, angle: f64, shift: Point) -> TrajectoryBundle {
    let mut out = b.clone();
    for s in &mut out.samples {
        for p in s.iter_mut() {
            *p = transform(*p, angle, shift);
        }
    }
    for nb in &mut out.neighbors {
        for (_, f) in nb.iter_mut() {
            for p in f.iter_mut() {
                *p = transform(*p, angle, shift);
            }
        }
    }
    out
}

fn small_sim() -> SimConfig {
    SimConfig {
        motion_embed_dim: 4,
        interaction_dim: 6,
        goal_embed_dim: None,
        ..SimConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scene_file_round_trip(s in scene_strategy(6, 3)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ndjson");
        scene::save_scenes(std::slice::from_ref(&s), &p).unwrap();
        let back = scene::load_scenes(&p, HorizonSpec::new(3, 3).unwrap()).unwrap();
        prop_assert_eq!(back, vec![s]);
    }

    #[test]
    fn split_concat_partitions_steps(s in scene_strategy(7, 2), t_obs in 2usize..6) {
        let h = HorizonSpec::new(t_obs, 7 - t_obs).unwrap();
        let (obs, fut) = split(&s, h).unwrap();
        prop_assert_eq!(obs.n_steps() + fut.n_steps(), 7);
        prop_assert_eq!(concat(&obs, &fut), s);
    }

    #[test]
    fn velocities_are_linear(p in path(6), a in -5.0..5.0f64) {
        let scaled: Vec<Point> = p.iter().map(|q| [a * q[0], a * q[1]]).collect();
        let v = velocities(&p, 0.4).unwrap();
        let vs = velocities(&scaled, 0.4).unwrap();
        for (x, y) in v.iter().zip(&vs) {
            prop_assert!((a * x[0] - y[0]).abs() <= 1e-9 * (1.0 + y[0].abs()));
            prop_assert!((a * x[1] - y[1]).abs() <= 1e-9 * (1.0 + y[1].abs()));
        }
    }

    #[test]
    fn grid_is_translation_and_permutation_invariant(
        pos in point(), vel in point(), shift in point(),
        nbs in prop::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -2.0..2.0f64, -2.0..2.0f64), 0..6),
        rot in 0usize..6,
    ) {
        let cfg = SimConfig::default();
        // keep neighbours away from cell edges so float shifts cannot re-bin
        let snap = |x: f64| (x / 0.6).floor() * 0.6 + 0.3;
        let states: Vec<NeighborState> = nbs.iter().map(|&(dx, dy, vx, vy)| NeighborState {
            pos: [pos[0] + snap(dx), pos[1] + snap(dy)],
            vel: [vx, vy],
        }).collect();
        let base = directional_grid(&cfg, pos, vel, &states);
        let moved: Vec<NeighborState> = states.iter().map(|n| NeighborState { pos: [n.pos[0] + shift[0], n.pos[1] + shift[1]], vel: n.vel }).collect();
        let g2 = directional_grid(&cfg, [pos[0] + shift[0], pos[1] + shift[1]], vel, &moved);
        for (a, b) in base.iter().zip(&g2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let mut perm = states.clone();
        if !perm.is_empty() {
            let r = rot % perm.len();
            perm.rotate_left(r);
        }
        let g3 = directional_grid(&cfg, pos, vel, &perm);
        for (a, b) in base.iter().zip(&g3) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rows_sum_to_one(data in prop::collection::vec(-30.0..30.0f64, 24), v in prop::collection::vec(-1.0..1.0f64, 8)) {
        let q = Mat::from_vec(4, 3, data[..12].to_vec());
        let k = Mat::from_vec(4, 3, data[12..].to_vec());
        // value columns: an all-ones column recovers each row's weight sum
        let mut vals = Vec::new();
        for r in 0..4 {
            vals.extend_from_slice(&[1.0, v[2 * r], v[2 * r + 1]]);
        }
        let out = attention(&q, &k, &Mat::from_vec(4, 3, vals));
        for r in 0..4 {
            prop_assert!((out.get(r, 0) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_are_non_negative(real in prop::collection::vec(-5.0..5.0f64, 1..8), fake in prop::collection::vec(-5.0..5.0f64, 1..8)) {
        prop_assert!(g_loss(&fake) >= 0.0);
        prop_assert!(d_loss(&real, &fake) >= 0.0);
    }

    #[test]
    fn variety_loss_non_increasing_in_k(preds in prop::collection::vec(path(4), 1..6), gt in path(4)) {
        let mut prev = f64::INFINITY;
        for k in 1..=preds.len() {
            let v = variety_loss(&preds[..k], &gt);
            prop_assert!(v >= 0.0 && v <= prev);
            prev = v;
        }
    }

    #[test]
    fn top_k_is_monotone(samples in prop::collection::vec(path(5), 1..8), gt in path(5)) {
        let b = TrajectoryBundle { scene_id: 0, samples, gaussians: None, neighbors: vec![] };
        for k in 1..b.k() {
            prop_assert!(top_k_ade(&b, &gt, k + 1).unwrap() <= top_k_ade(&b, &gt, k).unwrap());
            prop_assert!(top_k_fde(&b, &gt, k + 1).unwrap() <= top_k_fde(&b, &gt, k).unwrap());
        }
    }

    #[test]
    fn collision_rate_is_rigid_motion_invariant(s in scene_strategy(6, 4), angle in -3.2..3.2f64, shift in point()) {
        let h = HorizonSpec::new(3, 3).unwrap();
        let b = evalkit::uniform_predictor(&s, h).unwrap();
        let cfg = CollisionConfig { threshold: 0.8, substeps: None };
        let before = collision_rate(std::slice::from_ref(&s), std::slice::from_ref(&b), h, &cfg).unwrap();
        let ts = transform_scene(&s, angle, shift);
        let tb = transform_bundle(&b, angle, shift);
        // verdicts can only flip for pairs within rounding of the threshold
        let near = |sc: &Scene, bu: &TrajectoryBundle| -> bool {
            (0..bu.k()).any(|i| bu.neighbor_futures(i, sc, h).iter().any(|n| {
                (evalkit::path_min_distance(&bu.samples[i], n, None) - cfg.threshold).abs() < 1e-9
            }))
        };
        prop_assume!(!near(&s, &b));
        let after = collision_rate(std::slice::from_ref(&ts), std::slice::from_ref(&tb), h, &cfg).unwrap();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn zero_threshold_never_collides(s in scene_strategy(6, 4)) {
        let h = HorizonSpec::new(3, 3).unwrap();
        let b = evalkit::uniform_predictor(&s, h).unwrap();
        let cfg = CollisionConfig { threshold: 0.0, substeps: None };
        prop_assert_eq!(collision_rate(&[s], &[b], h, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn uniform_predictor_is_pure(s in scene_strategy(6, 3)) {
        let h = HorizonSpec::new(3, 3).unwrap();
        let a = evalkit::uniform_predictor(&s, h).unwrap();
        let b = evalkit::uniform_predictor(&s.clone(), h).unwrap();
        let bits = |x: &TrajectoryBundle| -> Vec<u64> { x.samples.iter().flatten().flat_map(|p| [p[0].to_bits(), p[1].to_bits()]).collect() };
        prop_assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn config_hash_ignores_key_order(seed in any::<u64>(), epochs in 1usize..100, lr in 1e-5..1e-2f64) {
        let a = format!(r#"{{"seed": {seed}, "train": {{"epochs": {epochs}, "lr_g": {lr}}}}}"#);
        let b = format!(r#"{{"train": {{"lr_g": {lr}, "epochs": {epochs}}}, "seed": {seed}}}"#);
        let ca = ExperimentConfig::from_json(&a).unwrap();
        let cb = ExperimentConfig::from_json(&b).unwrap();
        prop_assert_eq!(ca.hash(), cb.hash());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn synthetic_scenes_are_deterministic_and_speed_bounded(seed in any::<u64>()) {
        let cfg = WorldConfig::default();
        let a = generate_scene(&cfg, seed).unwrap();
        prop_assert_eq!(&a, &generate_scene(&cfg, seed).unwrap());
        for t in &a.pedestrians {
            let p: Vec<Point> = t.positions.iter().flatten().copied().collect();
            for v in velocities(&p, a.dt).unwrap() {
                // positions are rounded to mm, which can add 2 * 0.0005 / dt
                prop_assert!((v[0] * v[0] + v[1] * v[1]).sqrt() <= 2.0 * cfg.desired_speed + 0.01);
            }
        }
    }

    #[test]
    fn gaussian_heads_are_valid_for_any_weights(seed in any::<u64>(), scale in 0.1..20.0f64) {
        let h = HorizonSpec::new(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = Generator::new(GeneratorConfig { hidden_dim: 6, noise_dim: 3, sim: small_sim(), horizon: h }, &mut rng).unwrap();
        for b in &mut gen.params.blocks {
            for x in &mut b.data {
                *x *= scale;
            }
        }
        let s = Scene {
            scene_id: 0,
            primary_id: 0,
            start_frame: 0,
            pedestrians: vec![Track::full(0, (0..7).map(|t| [0.5 * t as f64, 0.1]).collect())],
            goals: Default::default(),
            dt: 0.4,
        };
        // large weights may overflow; that is reported, never a bad Gaussian
        if let Ok(b) = gen.predict_k(&s, 2, &mut rng) {
            for g in b.gaussians.unwrap().iter().flatten() {
                prop_assert!(g.sigma[0] > 0.0 && g.sigma[1] > 0.0);
                prop_assert!(g.rho.abs() < 1.0);
            }
        }
    }

    #[test]
    fn discriminator_score_is_translation_invariant(seed in any::<u64>(), shift in point()) {
        let h = HorizonSpec::new(4, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let disc = Discriminator::new(DiscriminatorConfig {
            n_layers: 1, model_dim: 8, ffn_dim: 8, sim: small_sim(), variant: DiscVariant::Transformer,
            score_head_dims: vec![4], horizon: h,
        }, &mut rng).unwrap();
        let mk = |d: Point| Scene {
            scene_id: 0,
            primary_id: 0,
            start_frame: 0,
            pedestrians: vec![
                Track::full(0, (0..7).map(|t| [0.4 * t as f64 + d[0], d[1]]).collect()),
                Track::full(1, (0..7).map(|t| [0.9 + 0.2 * t as f64 + d[0], 0.3 + d[1]]).collect()),
            ],
            goals: Default::default(),
            dt: 0.4,
        };
        let score = |s: &Scene| {
            let ctx = AgentContext::from_scene(s, 0, h, None).unwrap();
            let traj: Vec<Point> = s.pedestrians[0].positions.iter().flatten().copied().collect();
            disc.score(&ctx, &traj).unwrap()
        };
        let a = score(&mk([0.0, 0.0]));
        let b = score(&mk(shift));
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }
}
