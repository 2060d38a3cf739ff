//! Supervised training against the scripted oracle.
//!
//! Each epoch walks the training scenes in a seeded shuffle. A rollout
//! visits a sequence of states; at every state the model is supervised
//! with the oracle increment from that state (L1 + cosine) and a stop
//! label (inside the success radius or not). Scheduled sampling decides
//! per step whether the next state follows the oracle increment or the
//! model's own prediction; the model-rollout probability ramps linearly
//! from zero to a cap across epochs.
//!
//! Rollouts within a batch see frozen parameters, so they evaluate
//! data-parallel; gradients are reduced in scene order, which keeps
//! training bit-deterministic for a given config and seed.

use rand::Rng;

use crate::episode::{
    run_episode, start_pose, step, Controller, EpisodeConfig, Exposure, SplitLabel,
    SUCCESS_RADIUS,
};
use crate::error::{Error, Result};
use crate::fusion::{variant_backward, variant_forward, G2raParams, Variant};
use crate::metrics::navigation_error;
use crate::par;
use crate::policy::{
    policy_backward, policy_forward, stop_loss, stop_loss_backward, trajectory_loss,
    trajectory_loss_backward, PolicyParams,
};
use crate::rng::{chacha, mix};
use crate::tensor::ParamSet;
use crate::world::{
    dist3, encode_2d, encode_3d, generate_scene, oracle_increment, Difficulty, EncoderConfig,
    SceneSpec, WorldConfig,
};

const TRAIN_SCENE_STREAM: u64 = 0x7261;
const VAL_SCENE_STREAM: u64 = 0x7661;
const SHUFFLE_STREAM: u64 = 0x5346;
const ROLLOUT_STREAM: u64 = 0x524f;

/// Rollouts stop supervising once this close to the goal.
const ARRIVAL_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Episodes per gradient step.
    pub batch_size: usize,
    pub train_easy: usize,
    pub train_hard: usize,
    pub val_easy: usize,
    pub val_hard: usize,
    /// Final probability of stepping along the model's own prediction.
    pub sched_sampling_cap: f64,
    /// Probability of stepping in a random direction instead, so training
    /// visits states whose heading does not face the goal.
    pub explore_random: f64,
    /// Step cap of one training rollout.
    pub rollout_cap: usize,
    pub lambda_cosine: f64,
    pub stop_loss_weight: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 16,
            learning_rate: 0.01,
            batch_size: 1,
            train_easy: 48,
            train_hard: 12,
            val_easy: 3,
            val_hard: 3,
            sched_sampling_cap: 0.25,
            explore_random: 0.25,
            rollout_cap: 60,
            lambda_cosine: 1.0,
            stop_loss_weight: 1.0,
        }
    }
}

/// Everything a training run reads besides the parameters themselves.
#[derive(Debug, Clone)]
pub struct TrainContext {
    pub world: WorldConfig,
    pub encoders: EncoderConfig,
    pub episode: EpisodeConfig,
    pub settings: TrainSettings,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub epoch: usize,
    pub split: &'static str,
    pub loss: f64,
    pub ne: Option<f64>,
    pub sr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub fusion: G2raParams,
    pub policy: PolicyParams,
    pub log: Vec<LogRow>,
}

/// Training scene list: easy then hard, seeds derived from the run seed.
pub fn train_scenes(ctx: &TrainContext, seed: u64) -> Vec<SceneSpec> {
    scene_list(
        &ctx.world,
        seed,
        TRAIN_SCENE_STREAM,
        ctx.settings.train_easy,
        ctx.settings.train_hard,
    )
}

pub fn val_scenes(ctx: &TrainContext, seed: u64) -> Vec<SceneSpec> {
    scene_list(
        &ctx.world,
        seed,
        VAL_SCENE_STREAM,
        ctx.settings.val_easy,
        ctx.settings.val_hard,
    )
}

fn scene_list(
    world: &WorldConfig,
    seed: u64,
    stream: u64,
    easy: usize,
    hard: usize,
) -> Vec<SceneSpec> {
    (0..easy + hard)
        .map(|i| {
            let difficulty = if i < easy {
                Difficulty::Easy
            } else {
                Difficulty::Hard
            };
            generate_scene(world, mix(&[stream, seed, i as u64]), difficulty)
        })
        .collect()
}

struct RolloutResult {
    loss_sum: f64,
    steps: usize,
    fusion_grads: G2raParams,
    policy_grads: PolicyParams,
}

/// One supervised rollout with frozen parameters; accumulates gradients
/// into private clones that the caller reduces in order.
fn rollout(
    ctx: &TrainContext,
    scene: &SceneSpec,
    fusion: &G2raParams,
    policy: &PolicyParams,
    variant: Variant,
    p_model: f64,
    rollout_seed: u64,
) -> Result<RolloutResult> {
    let mut fusion_grads = fusion.clone();
    fusion_grads.zero_grads();
    let mut policy_grads = policy.clone();
    policy_grads.zero_grads();
    let mut rng = chacha(rollout_seed);
    let s = &ctx.settings;

    // random initial heading: states whose body frame does not face the
    // goal force the head to read the geometric offset instead of a
    // go-straight prior
    let mut pose = start_pose(scene);
    pose.yaw = crate::episode::wrap_angle(rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI));
    let mut loss_sum = 0.0;
    let mut steps = 0usize;

    for _ in 0..s.rollout_cap {
        let dist = dist3(pose.position(), scene.goal);
        let oracle_delta = oracle_increment(&ctx.world, scene, pose.position());
        let stop_label = if dist < SUCCESS_RADIUS { 1.0 } else { 0.0 };

        let f2d = encode_2d(scene, &pose, &ctx.encoders);
        let f3d = encode_3d(scene, &pose, &ctx.encoders);
        let trace = variant_forward(variant, &f2d, &f3d, &fusion_grads)?;
        let head = policy_forward(trace.output(), &pose, &policy_grads)?;

        let loss = trajectory_loss(head.delta, oracle_delta, s.lambda_cosine)
            + s.stop_loss_weight * stop_loss(head.stop_logit, stop_label);
        loss_sum += loss;
        steps += 1;

        let d_delta = trajectory_loss_backward(head.delta, oracle_delta, s.lambda_cosine);
        let d_stop = s.stop_loss_weight * stop_loss_backward(head.stop_logit, stop_label);
        let d_fuse = policy_backward(&head, d_delta, d_stop, &mut policy_grads)?;
        variant_backward(&trace, &d_fuse, &mut fusion_grads)?;

        if dist < ARRIVAL_RADIUS {
            break;
        }
        let u: f64 = rng.gen();
        let applied = if u < p_model {
            head.delta
        } else if u < p_model + s.explore_random {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let dz: f64 = rng.gen_range(-0.3..0.3);
            let horiz = (1.0 - dz * dz).sqrt();
            [
                ctx.world.max_step * horiz * theta.cos(),
                ctx.world.max_step * horiz * theta.sin(),
                ctx.world.max_step * dz,
            ]
        } else {
            oracle_delta
        };
        pose = step(&pose, applied, ctx.world.max_step).0;
    }

    Ok(RolloutResult {
        loss_sum,
        steps,
        fusion_grads,
        policy_grads,
    })
}

fn seeded_shuffle(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = chacha(seed);
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Closed-loop validation: runs full episodes on the validation scenes and
/// scores each visited prediction against the oracle increment there.
fn validate(
    ctx: &TrainContext,
    scenes: &[SceneSpec],
    fusion: &G2raParams,
    policy: &PolicyParams,
    variant: Variant,
) -> Result<(f64, f64, f64)> {
    let episodes = par::map_collect(scenes, |scene| {
        let ctrl = Controller::Learned {
            fusion,
            policy,
            variant,
            encoders: &ctx.encoders,
        };
        let split = SplitLabel {
            exposure: Exposure::Seen,
            difficulty: scene.difficulty,
        };
        run_episode(scene, split, &ctrl, &ctx.episode)
    });
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut ne_sum = 0.0;
    let mut successes = 0usize;
    let mut count = 0usize;
    for (scene, ep) in scenes.iter().zip(episodes) {
        let ep = ep?;
        for (state, pred) in ep.states.iter().zip(&ep.preds) {
            let oracle_delta = oracle_increment(&ctx.world, scene, state.position());
            loss_sum += trajectory_loss(pred.delta, oracle_delta, ctx.settings.lambda_cosine);
            loss_n += 1;
        }
        ne_sum += navigation_error(&ep.trajectory());
        successes += ep.success as usize;
        count += 1;
    }
    Ok((
        loss_sum / loss_n.max(1) as f64,
        ne_sum / count as f64,
        100.0 * successes as f64 / count as f64,
    ))
}

/// Trains the given parameters in place and returns them with the
/// per-epoch log. Bit-deterministic for a fixed (context, seed) pair.
pub fn train_policy(
    ctx: &TrainContext,
    mut fusion: G2raParams,
    mut policy: PolicyParams,
    variant: Variant,
    seed: u64,
) -> Result<TrainOutput> {
    let scenes = train_scenes(ctx, seed);
    let vscenes = val_scenes(ctx, seed);
    let s = ctx.settings.clone();
    let mut log = Vec::new();

    for epoch in 0..s.epochs {
        let p_model = if s.epochs > 1 {
            s.sched_sampling_cap * epoch as f64 / (s.epochs - 1) as f64
        } else {
            0.0
        };
        let order = seeded_shuffle(scenes.len(), mix(&[SHUFFLE_STREAM, seed, epoch as u64]));

        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for (batch_idx, chunk) in order.chunks(s.batch_size.max(1)).enumerate() {
            let jobs: Vec<(usize, &SceneSpec)> =
                chunk.iter().map(|&i| (i, &scenes[i])).collect();
            let results = par::map_collect(&jobs, |(i, scene)| {
                rollout(
                    ctx,
                    scene,
                    &fusion,
                    &policy,
                    variant,
                    p_model,
                    mix(&[ROLLOUT_STREAM, seed, epoch as u64, *i as u64]),
                )
            });
            let mut batch_steps = 0usize;
            for r in results {
                let r = r?;
                if !r.loss_sum.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch,
                        batch: batch_idx,
                    });
                }
                epoch_loss += r.loss_sum;
                epoch_steps += r.steps;
                batch_steps += r.steps;
                fusion.accumulate_grads_from(&r.fusion_grads);
                policy.accumulate_grads_from(&r.policy_grads);
            }
            let lr = s.learning_rate / batch_steps.max(1) as f64;
            fusion.train_step(lr);
            policy.sgd_step(lr);
            fusion.zero_grads();
            policy.zero_grads();
        }

        log.push(LogRow {
            epoch,
            split: "train",
            loss: epoch_loss / epoch_steps.max(1) as f64,
            ne: None,
            sr: None,
        });
        if !vscenes.is_empty() {
            let (vloss, vne, vsr) = validate(ctx, &vscenes, &fusion, &policy, variant)?;
            log.push(LogRow {
                epoch,
                split: "val",
                loss: vloss,
                ne: Some(vne),
                sr: Some(vsr),
            });
        }
    }

    Ok(TrainOutput {
        fusion,
        policy,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::G2raConfig;
    use crate::policy::PolicyConfig;

    fn tiny_ctx() -> TrainContext {
        TrainContext {
            world: WorldConfig::default(),
            encoders: EncoderConfig::default(),
            episode: EpisodeConfig::default(),
            settings: TrainSettings {
                epochs: 2,
                train_easy: 3,
                train_hard: 1,
                val_easy: 2,
                val_hard: 0,
                batch_size: 2,
                rollout_cap: 12,
                ..TrainSettings::default()
            },
        }
    }

    fn init_pair(seed: u64) -> (G2raParams, PolicyParams) {
        (
            G2raParams::init(G2raConfig::default(), seed).unwrap(),
            PolicyParams::init(PolicyConfig::default(), seed ^ 0x99),
        )
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let mut ctx = tiny_ctx();
        ctx.settings.epochs = 0;
        let (fusion, policy) = init_pair(3);
        let out = train_policy(&ctx, fusion.clone(), policy.clone(), Variant::Full, 3).unwrap();
        assert_eq!(out.fusion.w_o.value, fusion.w_o.value);
        assert_eq!(out.policy.w1.value, policy.w1.value);
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_bit_deterministic() {
        let ctx = tiny_ctx();
        let (fusion, policy) = init_pair(4);
        let a = train_policy(&ctx, fusion.clone(), policy.clone(), Variant::Full, 4).unwrap();
        let b = train_policy(&ctx, fusion, policy, Variant::Full, 4).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.fusion.w_q_base.value, b.fusion.w_q_base.value);
        assert_eq!(a.policy.w2.value, b.policy.w2.value);
    }

    #[test]
    fn scene_streams_are_disjoint() {
        let ctx = tiny_ctx();
        let train = train_scenes(&ctx, 5);
        let val = val_scenes(&ctx, 5);
        for t in &train {
            for v in &val {
                assert_ne!(t.seed, v.seed);
            }
        }
    }
}
