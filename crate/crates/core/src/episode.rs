//! Closed-loop navigation episodes.
//!
//! An episode loops encode -> fuse -> predict -> step from a scene's start
//! pose until the stop rule fires or the step budget runs out. Position
//! and waypoint coincide under waypoint control; success means the final
//! waypoint lies strictly within the 20 m radius of the goal.

use crate::error::{Error, Result};
use crate::fusion::{variant_forward, G2raParams, Variant};
use crate::metrics::Trajectory;
use crate::policy::{predict_increment, PolicyParams};
use crate::tensor::sigmoid_scalar;
use crate::world::{
    add3, dist3, encode_2d, encode_3d, norm3, oracle_increment, scale3, Difficulty,
    EncoderConfig, SceneSpec, WorldConfig,
};

/// Success radius in meters; the comparison is strict (`< 20.0`).
pub const SUCCESS_RADIUS: f64 = 20.0;

/// 6-DoF vehicle state; angles wrapped to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub roll: f64,
    pub pitch: f64,
    pub yaw: f64,
}

impl Pose {
    pub fn at(position: [f64; 3], yaw: f64) -> Pose {
        Pose {
            x: position[0],
            y: position[1],
            z: position[2],
            roll: 0.0,
            pitch: 0.0,
            yaw: wrap_angle(yaw),
        }
    }

    pub fn position(&self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }
}

/// Wraps an angle to (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % std::f64::consts::TAU;
    if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    } else if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    }
    a
}

/// Initial pose of a scene: start position, facing the goal.
pub fn start_pose(scene: &SceneSpec) -> Pose {
    let to_goal = crate::world::sub3(scene.goal, scene.start);
    let yaw = if to_goal[0].abs() + to_goal[1].abs() > 1e-12 {
        to_goal[1].atan2(to_goal[0])
    } else {
        0.0
    };
    Pose::at(scene.start, yaw)
}

/// Advances the pose by a waypoint increment. Steps over the limit are
/// clipped (reported through the `clipped` flag); yaw turns to face the
/// movement direction when the increment is non-degenerate.
pub fn step(pose: &Pose, delta: [f64; 3], max_step: f64) -> (Pose, bool) {
    let n = norm3(delta);
    let (d, clipped) = if n > max_step {
        (scale3(delta, max_step / n), true)
    } else {
        (delta, false)
    };
    let position = add3(pose.position(), d);
    let yaw = if norm3(d) > 1e-6 {
        wrap_angle(d[1].atan2(d[0]))
    } else {
        pose.yaw
    };
    (Pose::at(position, yaw), clipped)
}

/// Strictly-within success test against the goal.
pub fn is_success(final_point: [f64; 3], goal: [f64; 3]) -> bool {
    dist3(final_point, goal) < SUCCESS_RADIUS
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exposure {
    Seen,
    Unseen,
}

impl Exposure {
    pub fn name(&self) -> &'static str {
        match self {
            Exposure::Seen => "seen",
            Exposure::Unseen => "unseen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Exposure::Seen),
            "unseen" => Ok(Exposure::Unseen),
            other => Err(Error::Config(format!("unknown exposure: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SplitLabel {
    pub exposure: Exposure,
    pub difficulty: Difficulty,
}

/// Prediction made at one visited state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub delta: [f64; 3],
    /// Sigmoid of the stop logit.
    pub stop_score: f64,
}

/// One executed episode. `preds` holds the prediction made at each state
/// in order; it has one entry per state when the episode ended on a stop
/// decision (the final prediction was not applied), and one entry per
/// applied step when it ended on the step budget.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub scene_seed: u64,
    pub split: SplitLabel,
    pub goal: [f64; 3],
    pub states: Vec<Pose>,
    pub preds: Vec<StepRecord>,
    pub stop_step: Option<usize>,
    pub success: bool,
    /// Count of steps the runner had to clip to the length limit.
    pub clipped_steps: u32,
    /// Set when a non-finite prediction aborted the episode.
    pub diagnostic: Option<String>,
}

impl Episode {
    pub fn waypoints(&self) -> Vec<[f64; 3]> {
        self.states.iter().map(|s| s.position()).collect()
    }

    pub fn final_position(&self) -> [f64; 3] {
        self.states.last().expect("episodes hold >= 1 state").position()
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory {
            points: self.waypoints(),
            goal: self.goal,
            success: self.success,
            shortest_path_length: dist3(self.states[0].position(), self.goal),
        }
    }

    /// Re-derives the success flag from the stored trajectory and goal.
    pub fn recompute_success(&self) -> bool {
        is_success(self.final_position(), self.goal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeConfig {
    pub max_steps: usize,
    /// Stop when sigmoid(stop logit) exceeds this.
    pub stop_threshold: f64,
    /// Stop when the predicted increment is shorter than this (meters).
    pub stop_norm: f64,
    pub max_step_len: f64,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            max_steps: 60,
            stop_threshold: 0.5,
            stop_norm: 0.5,
            max_step_len: 5.0,
        }
    }
}

/// What drives the episode: a trained fusion+policy stack or the scripted
/// oracle.
pub enum Controller<'a> {
    Learned {
        fusion: &'a G2raParams,
        policy: &'a PolicyParams,
        variant: Variant,
        encoders: &'a EncoderConfig,
    },
    Oracle {
        world: &'a WorldConfig,
    },
}

impl Controller<'_> {
    fn predict(&self, scene: &SceneSpec, pose: &Pose) -> Result<([f64; 3], f64)> {
        match self {
            Controller::Learned {
                fusion,
                policy,
                variant,
                encoders,
            } => {
                let f2d = encode_2d(scene, pose, encoders);
                let f3d = encode_3d(scene, pose, encoders);
                let trace = variant_forward(*variant, &f2d, &f3d, fusion)?;
                predict_increment(trace.output(), pose, policy)
            }
            // the scripted oracle never volunteers a stop signal; arrival
            // shows up as a vanishing increment
            Controller::Oracle { world } => {
                Ok((oracle_increment(world, scene, pose.position()), -40.0))
            }
        }
    }
}

/// Runs one closed-loop episode. Deterministic given the scene, the
/// controller parameters, and the encoder seeds.
pub fn run_episode(
    scene: &SceneSpec,
    split: SplitLabel,
    controller: &Controller,
    cfg: &EpisodeConfig,
) -> Result<Episode> {
    assert!(cfg.max_steps >= 1, "max_steps must be >= 1");
    let mut states = vec![start_pose(scene)];
    let mut preds = Vec::new();
    let mut stop_step = None;
    let mut clipped_steps = 0;
    let mut diagnostic = None;

    loop {
        if states.len() - 1 == cfg.max_steps {
            break;
        }
        let pose = *states.last().unwrap();
        let (delta, stop_logit) = controller.predict(scene, &pose)?;
        if !delta.iter().all(|v| v.is_finite()) || !stop_logit.is_finite() {
            diagnostic = Some(format!(
                "non-finite prediction at step {} (delta {delta:?}, stop {stop_logit})",
                states.len() - 1
            ));
            break;
        }
        let stop_score = sigmoid_scalar(stop_logit);
        preds.push(StepRecord { delta, stop_score });
        if stop_score > cfg.stop_threshold || norm3(delta) < cfg.stop_norm {
            stop_step = Some(states.len() - 1);
            break;
        }
        let (next, clipped) = step(&pose, delta, cfg.max_step_len);
        if clipped {
            clipped_steps += 1;
        }
        states.push(next);
    }

    let success = diagnostic.is_none() && is_success(states.last().unwrap().position(), scene.goal);
    Ok(Episode {
        scene_seed: scene.seed,
        split,
        goal: scene.goal,
        states,
        preds,
        stop_step,
        success,
        clipped_steps,
        diagnostic,
    })
}
