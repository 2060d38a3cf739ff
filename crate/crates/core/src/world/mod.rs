//! Procedural scenes and the scripted oracle controller.
//!
//! Scenes are deterministic functions of a seed: a start pose, a goal, and
//! a set of category-tagged landmarks inside an axis-aligned world box.
//! The easy/hard difficulty tiers differ in start-goal distance and
//! landmark clutter. The scripted oracle walks a clipped straight line
//! toward the goal, deflecting around landmark collision spheres; it
//! supplies training labels, reference paths for alignment metrics, and a
//! sanity-check evaluation policy.

mod encode;

pub use encode::{encode_2d, encode_3d, projection_2d, projection_3d, EncoderConfig, VIEWS, VIEW_NAMES};

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{chacha, mix};

pub const SCENE_STREAM: u64 = 0x5ce9e;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorldBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl WorldBounds {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    fn contains_with_margin(&self, p: [f64; 3], m: f64) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] + m && p[i] <= self.max[i] - m)
    }
}

impl Default for WorldBounds {
    fn default() -> Self {
        WorldBounds {
            min: [-200.0, -200.0, 0.0],
            max: [200.0, 200.0, 120.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Landmark {
    pub position: [f64; 3],
    pub category: u32,
}

/// Deterministic scene description; everything downstream (encoders,
/// oracle, episodes) derives from this plus explicit seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub bounds: WorldBounds,
    pub start: [f64; 3],
    pub goal: [f64; 3],
    pub landmarks: Vec<Landmark>,
}

/// Scene generation and oracle constants.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub bounds: WorldBounds,
    /// Keep-out margin from the box faces for start/goal placement.
    pub margin: f64,
    pub categories: u32,
    pub easy_landmarks: [usize; 2],
    pub hard_landmarks: [usize; 2],
    /// Start-goal distance range per tier; easy stays strictly below the
    /// hard minimum by construction.
    pub easy_distance: [f64; 2],
    pub hard_distance: [f64; 2],
    pub collision_radius: f64,
    /// Landmarks keep this clearance from start and goal.
    pub endpoint_clearance: f64,
    pub max_step: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            bounds: WorldBounds::default(),
            margin: 10.0,
            categories: 12,
            easy_landmarks: [8, 12],
            hard_landmarks: [16, 24],
            easy_distance: [40.0, 120.0],
            hard_distance: [120.0, 300.0],
            collision_radius: 8.0,
            endpoint_clearance: 15.0,
            max_step: 5.0,
        }
    }
}

pub fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

pub fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale3(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

pub fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    norm3(sub3(a, b))
}

fn unit_sphere(rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

fn sample_in(bounds: &WorldBounds, m: f64, rng: &mut rand_chacha::ChaCha8Rng) -> [f64; 3] {
    [
        rng.gen_range(bounds.min[0] + m..bounds.max[0] - m),
        rng.gen_range(bounds.min[1] + m..bounds.max[1] - m),
        rng.gen_range(bounds.min[2] + m..bounds.max[2] - m),
    ]
}

/// Deterministic scene construction. The start/goal pair is rejection
/// sampled until the requested separation fits inside the margin box, and
/// landmarks keep clear of both endpoints.
pub fn generate_scene(cfg: &WorldConfig, seed: u64, difficulty: Difficulty) -> SceneSpec {
    let mut rng = chacha(mix(&[SCENE_STREAM, seed]));
    let (dist_range, lm_range) = match difficulty {
        Difficulty::Easy => (cfg.easy_distance, cfg.easy_landmarks),
        Difficulty::Hard => (cfg.hard_distance, cfg.hard_landmarks),
    };

    let (start, goal) = loop {
        let start = sample_in(&cfg.bounds, cfg.margin, &mut rng);
        let dir = unit_sphere(&mut rng);
        let d = rng.gen_range(dist_range[0]..dist_range[1]);
        let goal = add3(start, scale3(dir, d));
        if cfg.bounds.contains_with_margin(goal, cfg.margin) {
            break (start, goal);
        }
    };

    let count = rng.gen_range(lm_range[0]..=lm_range[1]);
    let mut landmarks = Vec::with_capacity(count);
    while landmarks.len() < count {
        let position = sample_in(&cfg.bounds, 2.0, &mut rng);
        if dist3(position, start) < cfg.endpoint_clearance
            || dist3(position, goal) < cfg.endpoint_clearance
        {
            continue;
        }
        let category = rng.gen_range(0..cfg.categories);
        landmarks.push(Landmark { position, category });
    }

    SceneSpec {
        seed,
        difficulty,
        bounds: cfg.bounds,
        start,
        goal,
        landmarks,
    }
}

/// Clipped straight-line step toward the goal, deflected out of landmark
/// collision spheres. On obstacle-free segments the step strictly reduces
/// distance to goal.
pub fn oracle_increment(cfg: &WorldConfig, scene: &SceneSpec, pos: [f64; 3]) -> [f64; 3] {
    let to_goal = sub3(scene.goal, pos);
    let dist = norm3(to_goal);
    if dist == 0.0 {
        return [0.0; 3];
    }
    let step = if dist <= cfg.max_step {
        to_goal
    } else {
        scale3(to_goal, cfg.max_step / dist)
    };
    let mut candidate = add3(pos, step);
    for lm in &scene.landmarks {
        let away = sub3(candidate, lm.position);
        let d = norm3(away);
        if d < cfg.collision_radius {
            let dir = if d > 1e-9 {
                scale3(away, 1.0 / d)
            } else {
                // degenerate: push back toward where we came from
                let back = sub3(pos, lm.position);
                let bd = norm3(back);
                if bd > 1e-9 {
                    scale3(back, 1.0 / bd)
                } else {
                    [0.0, 0.0, 1.0]
                }
            };
            candidate = add3(lm.position, scale3(dir, cfg.collision_radius));
        }
    }
    let mut inc = sub3(candidate, pos);
    let n = norm3(inc);
    if n > cfg.max_step {
        inc = scale3(inc, cfg.max_step / n);
    }
    inc
}

/// Full scripted-oracle path from the scene start to arrival (or the step
/// cap). Used as the reference route for alignment metrics and as training
/// supervision.
pub fn oracle_path(cfg: &WorldConfig, scene: &SceneSpec, step_cap: usize) -> Vec<[f64; 3]> {
    let mut points = vec![scene.start];
    let mut pos = scene.start;
    for _ in 0..step_cap {
        let inc = oracle_increment(cfg, scene, pos);
        if norm3(inc) < 1e-9 {
            break;
        }
        pos = add3(pos, inc);
        points.push(pos);
        if dist3(pos, scene.goal) < 1e-9 {
            break;
        }
    }
    points
}
