//! Waypoint decision head and the trajectory loss.
//!
//! The head mean-pools the fused tokens, appends a sinusoidal embedding of
//! the vehicle state, and maps through a two-layer MLP to a raw 3-D
//! increment plus a stop logit. The increment is squashed norm-wise so its
//! length never exceeds the configured step limit.

use crate::episode::Pose;
use crate::error::Result;
use crate::rng::{chacha, xavier_uniform};
use crate::tensor::{
    col_sum, concat_cols, matmul, matmul_backward, mean_pool_backward, mean_pool_rows, relu,
    sigmoid_scalar, ParamSet, ParamTensor, TokenMatrix,
};

pub const STATE_WAVELENGTHS: [f64; 4] = [50.0, 100.0, 200.0, 400.0];
/// Sinusoidal position features (3 coords x 4 wavelengths x sin/cos) plus yaw sin/cos.
pub const STATE_DIM: usize = 26;

/// Sinusoidal features of position and yaw; roll and pitch stay zero under
/// waypoint control and are not embedded.
pub fn state_embedding(pose: &Pose) -> TokenMatrix {
    let mut out = Vec::with_capacity(STATE_DIM);
    for coord in [pose.x, pose.y, pose.z] {
        for w in STATE_WAVELENGTHS {
            let a = std::f64::consts::TAU * coord / w;
            out.push(a.sin());
            out.push(a.cos());
        }
    }
    out.push(pose.yaw.sin());
    out.push(pose.yaw.cos());
    TokenMatrix::from_vec(1, STATE_DIM, out)
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    /// Fused token width feeding the head.
    pub fusion_d: usize,
    pub hidden: usize,
    /// Hard bound on the predicted increment length (meters).
    pub max_step: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            fusion_d: 64,
            hidden: 64,
            max_step: 5.0,
        }
    }
}

impl PolicyConfig {
    pub fn input_dim(&self) -> usize {
        self.fusion_d + STATE_DIM
    }
}

#[derive(Debug, Clone)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub w1: ParamTensor,
    pub b1: ParamTensor,
    pub w2: ParamTensor,
    pub b2: ParamTensor,
}

impl PolicyParams {
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let mut rng = chacha(seed);
        let w1 = xavier_uniform("policy_w1", config.input_dim(), config.hidden, &mut rng);
        let w2 = xavier_uniform("policy_w2", config.hidden, 4, &mut rng);
        PolicyParams {
            config,
            w1,
            b1: ParamTensor::zeros("policy_b1", 1, config.hidden),
            w2,
            b2: ParamTensor::zeros("policy_b2", 1, 4),
        }
    }
}

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone)]
pub struct PolicyTrace {
    pub x: TokenMatrix,
    pub z: TokenMatrix,
    pub h: TokenMatrix,
    pub raw: [f64; 3],
    /// World-frame increment (body-frame output rotated by yaw).
    pub delta: [f64; 3],
    pub stop_logit: f64,
    yaw: f64,
    fuse_rows: usize,
}

/// Rotates a body-frame vector into the world frame (yaw only).
fn to_world(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
}

fn to_body(v: [f64; 3], yaw: f64) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1], v[2]]
}

fn squash(raw: [f64; 3], max_step: f64) -> [f64; 3] {
    let n = (raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]).sqrt();
    if n < 1e-12 {
        [raw[0] * max_step, raw[1] * max_step, raw[2] * max_step]
    } else {
        let f = max_step * n.tanh() / n;
        [raw[0] * f, raw[1] * f, raw[2] * f]
    }
}

/// Jacobian-vector product of the norm-wise tanh squash.
fn squash_backward(raw: [f64; 3], max_step: f64, d_delta: [f64; 3]) -> [f64; 3] {
    let n2 = raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2];
    let n = n2.sqrt();
    if n < 1e-12 {
        return [
            d_delta[0] * max_step,
            d_delta[1] * max_step,
            d_delta[2] * max_step,
        ];
    }
    let t = n.tanh();
    let base = max_step * t / n;
    let coef = max_step * ((1.0 - t * t) * n - t) / (n2 * n);
    let dot = raw[0] * d_delta[0] + raw[1] * d_delta[1] + raw[2] * d_delta[2];
    [
        base * d_delta[0] + coef * raw[0] * dot,
        base * d_delta[1] + coef * raw[1] * dot,
        base * d_delta[2] + coef * raw[2] * dot,
    ]
}

pub fn policy_forward(
    f_fuse: &TokenMatrix,
    pose: &Pose,
    p: &PolicyParams,
) -> Result<PolicyTrace> {
    let pooled = mean_pool_rows(f_fuse)?;
    let x = concat_cols(&[&pooled, &state_embedding(pose)]);
    let z = crate::tensor::add(&matmul(&x, &p.w1)?, &p.b1)?;
    let h = relu(&z);
    let out = crate::tensor::add(&matmul(&h, &p.w2)?, &p.b2)?;
    let raw = [out.get(0, 0), out.get(0, 1), out.get(0, 2)];
    // the head reasons in the body frame; the yaw rotation back to world
    // coordinates is exact and norm-preserving
    let delta_body = squash(raw, p.config.max_step);
    Ok(PolicyTrace {
        x,
        z,
        h,
        raw,
        delta: to_world(delta_body, pose.yaw),
        stop_logit: out.get(0, 3),
        yaw: pose.yaw,
        fuse_rows: f_fuse.rows(),
    })
}

/// Predicted waypoint increment (norm-bounded) and raw stop logit.
pub fn predict_increment(
    f_fuse: &TokenMatrix,
    pose: &Pose,
    p: &PolicyParams,
) -> Result<([f64; 3], f64)> {
    let t = policy_forward(f_fuse, pose, p)?;
    Ok((t.delta, t.stop_logit))
}

/// Accumulates head gradients and returns the gradient on the fused tokens.
pub fn policy_backward(
    trace: &PolicyTrace,
    d_delta: [f64; 3],
    d_stop: f64,
    p: &mut PolicyParams,
) -> Result<TokenMatrix> {
    let d_raw = squash_backward(trace.raw, p.config.max_step, to_body(d_delta, trace.yaw));
    let d_out = TokenMatrix::from_vec(1, 4, vec![d_raw[0], d_raw[1], d_raw[2], d_stop]);
    let (d_h, d_w2) = matmul_backward(&trace.h, &p.w2, &d_out)?;
    p.w2.accumulate(&d_w2);
    p.b2.accumulate(&col_sum(&d_out));
    let mut d_z = d_h;
    for (dz, z) in d_z.data_mut().iter_mut().zip(trace.z.data()) {
        if *z <= 0.0 {
            *dz = 0.0;
        }
    }
    let (d_x, d_w1) = matmul_backward(&trace.x, &p.w1, &d_z)?;
    p.w1.accumulate(&d_w1);
    p.b1.accumulate(&col_sum(&d_z));
    // only the pooled block flows back; the state embedding is fixed
    let d = p.config.fusion_d;
    let d_pooled = TokenMatrix::from_vec(1, d, d_x.data()[..d].to_vec());
    Ok(mean_pool_backward(&d_pooled, trace.fuse_rows))
}

/// Default weight of the direction term in the trajectory loss.
pub const LAMBDA_COSINE: f64 = 1.0;
const TARGET_EPS: f64 = 1e-8;
const PRED_EPS: f64 = 1e-12;

/// Per-step regression loss: L1 distance plus a cosine direction term,
/// loss = sum_i |pred_i - target_i| + lambda * (1 - cos(pred, target)).
/// The cosine term is skipped when the target is numerically zero.
pub fn trajectory_loss(pred: [f64; 3], target: [f64; 3], lambda: f64) -> f64 {
    let l1: f64 = (0..3).map(|i| (pred[i] - target[i]).abs()).sum();
    let tn = norm(target);
    if tn < TARGET_EPS {
        return l1;
    }
    let pn = norm(pred);
    if pn < PRED_EPS {
        return l1 + lambda;
    }
    let cos = dot(pred, target) / (pn * tn);
    l1 + lambda * (1.0 - cos)
}

/// Gradient of [`trajectory_loss`] with respect to `pred`. At the L1 kinks
/// the subgradient 0 is used; inside the `pred ~ 0` singularity the cosine
/// term contributes nothing.
pub fn trajectory_loss_backward(pred: [f64; 3], target: [f64; 3], lambda: f64) -> [f64; 3] {
    let mut g = [0.0; 3];
    for i in 0..3 {
        let d = pred[i] - target[i];
        g[i] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
    }
    let tn = norm(target);
    let pn = norm(pred);
    if tn < TARGET_EPS || pn < PRED_EPS {
        return g;
    }
    let pd = dot(pred, target);
    for i in 0..3 {
        let dcos = target[i] / (pn * tn) - pd * pred[i] / (pn * pn * pn * tn);
        g[i] -= lambda * dcos;
    }
    g
}

/// Numerically stable logistic loss on the stop logit.
pub fn stop_loss(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

pub fn stop_loss_backward(logit: f64, label: f64) -> f64 {
    sigmoid_scalar(logit) - label
}

fn norm(v: [f64; 3]) -> f64 {
    dot(v, v).sqrt()
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{fd_scalar, finite_difference_gradient, rel_err};
    use rand::Rng;

    fn test_pose() -> Pose {
        Pose {
            x: 12.0,
            y: -40.0,
            z: 55.0,
            roll: 0.0,
            pitch: 0.0,
            yaw: 0.7,
        }
    }

    fn random_fuse(seed: u64, rows: usize, d: usize) -> TokenMatrix {
        let mut rng = chacha(seed);
        TokenMatrix::from_vec(
            rows,
            d,
            (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    #[test]
    fn zero_weights_zero_outputs() {
        let cfg = PolicyConfig {
            fusion_d: 16,
            hidden: 8,
            max_step: 5.0,
        };
        let mut p = PolicyParams::init(cfg, 1);
        for t in p.tensors_mut() {
            t.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let f = random_fuse(2, 6, 16);
        let (delta, stop) = predict_increment(&f, &test_pose(), &p).unwrap();
        assert_eq!(delta, [0.0; 3]);
        assert_eq!(stop, 0.0);
    }

    #[test]
    fn increment_norm_bounded() {
        let cfg = PolicyConfig {
            fusion_d: 16,
            hidden: 8,
            max_step: 5.0,
        };
        let mut rng = chacha(3);
        for i in 0..1000 {
            let p = PolicyParams::init(cfg, i);
            let f = random_fuse(rng.gen(), 6, 16).scale(rng.gen_range(0.1..20.0));
            let (delta, _) = predict_increment(&f, &test_pose(), &p).unwrap();
            let n = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
            assert!(n <= 5.0, "norm {n}");
        }
    }

    #[test]
    fn trajectory_loss_zero_at_target() {
        let t = [1.0, -2.0, 0.5];
        assert_eq!(trajectory_loss(t, t, LAMBDA_COSINE), 0.0);
    }

    #[test]
    fn trajectory_loss_opposed_unit_vectors() {
        let t = [1.0 / 3.0_f64.sqrt(); 3];
        let p = [-t[0], -t[1], -t[2]];
        let l1: f64 = 2.0 * t.iter().map(|v| v.abs()).sum::<f64>();
        let loss = trajectory_loss(p, t, LAMBDA_COSINE);
        assert!((loss - (l1 + 2.0 * LAMBDA_COSINE)).abs() < 1e-12);
    }

    #[test]
    fn trajectory_loss_skips_cosine_for_zero_target() {
        let p = [0.3, 0.4, 0.0];
        assert!((trajectory_loss(p, [0.0; 3], LAMBDA_COSINE) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn trajectory_loss_gradient_matches_fd() {
        let pred = [0.8, -1.3, 2.1];
        let target = [1.5, 0.2, -0.4];
        let g = trajectory_loss_backward(pred, target, LAMBDA_COSINE);
        for i in 0..3 {
            let fd = fd_scalar(
                |x| {
                    let mut p = pred;
                    p[i] = x;
                    trajectory_loss(p, target, LAMBDA_COSINE)
                },
                pred[i],
                1e-6,
            );
            assert!(rel_err(g[i], fd) < 1e-4, "axis {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn stop_loss_gradient_matches_fd() {
        for (logit, label) in [(0.7, 1.0), (-2.0, 0.0), (3.5, 0.0), (-0.2, 1.0)] {
            let g = stop_loss_backward(logit, label);
            let fd = fd_scalar(|z| stop_loss(z, label), logit, 1e-6);
            assert!(rel_err(g, fd) < 1e-6);
        }
    }

    #[derive(Clone)]
    struct HeadFixture(PolicyParams);
    impl ParamSet for HeadFixture {
        fn tensors(&self) -> Vec<&ParamTensor> {
            self.0.tensors()
        }
        fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
            self.0.tensors_mut()
        }
    }

    #[test]
    fn head_gradients_match_fd() {
        let cfg = PolicyConfig {
            fusion_d: 16,
            hidden: 12,
            max_step: 5.0,
        };
        let params = PolicyParams::init(cfg, 9);
        let f_fuse = random_fuse(11, 6, 16);
        let pose = test_pose();
        let target = [1.2, -0.7, 0.4];
        let label = 1.0;

        let objective = |fx: &HeadFixture| {
            let t = policy_forward(&f_fuse, &pose, &fx.0).unwrap();
            0.1 * (trajectory_loss(t.delta, target, LAMBDA_COSINE)
                + stop_loss(t.stop_logit, label))
        };

        let mut analytic = HeadFixture(params.clone());
        analytic.zero_grads();
        let trace = policy_forward(&f_fuse, &pose, &analytic.0).unwrap();
        let mut d_delta = trajectory_loss_backward(trace.delta, target, LAMBDA_COSINE);
        d_delta.iter_mut().for_each(|v| *v *= 0.1);
        let d_stop = 0.1 * stop_loss_backward(trace.stop_logit, label);
        policy_backward(&trace, d_delta, d_stop, &mut analytic.0).unwrap();

        let fixture = HeadFixture(params);
        let fd = finite_difference_gradient(&fixture, &objective, 1e-5).unwrap();
        for (tensor, report) in analytic.tensors().iter().zip(&fd) {
            for (a, n) in tensor.grad.iter().zip(&report.grad) {
                assert!(rel_err(*a, *n) < 1e-4, "{}: {a} vs {n}", tensor.name);
            }
        }
    }
}
