//! Geometry-guided two-stream token fusion.
//!
//! Two token streams come in: per-view 2-D semantic tokens and 3-D
//! geometric tokens. The prior-injection stage pools the projected
//! geometric tokens into a global summary, turns it into per-channel
//! scale/shift terms through a small MLP, and modulates the 2-D query
//! tokens with a learnable injection strength. The reparameterization
//! stage then runs multi-head cross-attention from the injected queries
//! to the geometric keys/values and blends the attended output with the
//! base queries through a learnable gate, so the result keeps the 2-D
//! token form.
//!
//! Forward passes record every intermediate in a trace; backward applies
//! explicit per-op rules in reverse over that trace. The graph is fixed
//! and small, so the rules are written out by hand and checked against
//! the central-difference oracle.

mod variants;

pub use variants::{fuse_variant, variant_backward, variant_forward, Variant, VariantTrace};

use crate::error::{Error, Result};
use crate::rng::{chacha, xavier_uniform};
use crate::tensor::{
    add, col_sum, concat_cols, frob_dot, matmul, matmul_backward, matmul_nt, matmul_tn,
    mean_pool_backward, mean_pool_rows, mul, relu, row_softmax, row_softmax_backward, sigmoid,
    sigmoid_scalar, split_cols, ParamSet, ParamTensor, TokenMatrix,
};

/// Shape contract of the fusion mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct G2raConfig {
    /// 2-D encoder output dimension.
    pub d_clip: usize,
    /// 3-D geometric token dimension.
    pub d_agg: usize,
    /// Shared fusion dimension.
    pub d: usize,
    /// Attention head count; `d` must divide evenly.
    pub heads: usize,
}

impl G2raConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_clip == 0 || self.d_agg == 0 || self.d == 0 || self.heads == 0 {
            return Err(Error::Config("fusion dims must all be >= 1".into()));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "fusion dim {} not divisible by head count {}",
                self.d, self.heads
            )));
        }
        Ok(())
    }
}

impl Default for G2raConfig {
    fn default() -> Self {
        G2raConfig {
            d_clip: 96,
            d_agg: 128,
            d: 64,
            heads: 4,
        }
    }
}

/// Whether a scalar coefficient is trained or pinned to a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ScalarMode {
    Learned,
    Fixed(f64),
}

/// All learnable weights of the fusion mechanism.
///
/// The value projection (`w_v`, `b_v`) is a single shared parameter set:
/// the pooled geometric summary and the attention value path both read it.
#[derive(Debug, Clone)]
pub struct G2raParams {
    pub config: G2raConfig,
    pub w_q_base: ParamTensor,
    pub w_k: ParamTensor,
    pub b_k: ParamTensor,
    pub w_v: ParamTensor,
    pub b_v: ParamTensor,
    pub psi_w1: ParamTensor,
    pub psi_b1: ParamTensor,
    pub psi_w2: ParamTensor,
    pub psi_b2: ParamTensor,
    pub head_q: Vec<ParamTensor>,
    pub head_k: Vec<ParamTensor>,
    pub head_v: Vec<ParamTensor>,
    pub w_o: ParamTensor,
    /// Projection for the concat-fusion variant (2d -> d).
    pub w_concat: ParamTensor,
    /// Injection strength, stored unconstrained.
    pub eta: ParamTensor,
    /// Gate stored as a logit; the gate value sigmoid(alpha_logit) stays in (0,1).
    pub alpha_logit: ParamTensor,
    pub eta_mode: ScalarMode,
    pub alpha_mode: ScalarMode,
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl G2raParams {
    /// Fresh parameters: uniform +/- sqrt(6/(fan_in+fan_out)) weights, zero
    /// biases, injection strength 0.5, gate 0.5.
    pub fn init(config: G2raConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = chacha(seed);
        let (dc, da, d, h) = (config.d_clip, config.d_agg, config.d, config.heads);
        let dh = config.head_dim();
        let w_q_base = xavier_uniform("w_q_base", dc, d, &mut rng);
        let w_k = xavier_uniform("w_k", da, d, &mut rng);
        let w_v = xavier_uniform("w_v", da, d, &mut rng);
        let psi_w1 = xavier_uniform("psi_w1", d, d, &mut rng);
        let psi_w2 = xavier_uniform("psi_w2", d, 2 * d, &mut rng);
        let head_q = (0..h)
            .map(|i| xavier_uniform(format!("head_q_{i}"), d, dh, &mut rng))
            .collect();
        let head_k = (0..h)
            .map(|i| xavier_uniform(format!("head_k_{i}"), d, dh, &mut rng))
            .collect();
        let head_v = (0..h)
            .map(|i| xavier_uniform(format!("head_v_{i}"), d, dh, &mut rng))
            .collect();
        let w_o = xavier_uniform("w_o", d, d, &mut rng);
        let w_concat = xavier_uniform("w_concat", 2 * d, d, &mut rng);
        Ok(G2raParams {
            config,
            w_q_base,
            w_k,
            b_k: ParamTensor::zeros("b_k", 1, d),
            w_v,
            b_v: ParamTensor::zeros("b_v", 1, d),
            psi_w1,
            psi_b1: ParamTensor::zeros("psi_b1", 1, d),
            psi_w2,
            psi_b2: ParamTensor::zeros("psi_b2", 1, 2 * d),
            head_q,
            head_k,
            head_v,
            w_o,
            w_concat,
            eta: ParamTensor::scalar("eta", 0.5),
            alpha_logit: ParamTensor::scalar("alpha_logit", 0.0),
            eta_mode: ScalarMode::Learned,
            alpha_mode: ScalarMode::Learned,
        })
    }

    /// Pins the injection strength to a fixed value (sweep cells).
    pub fn fix_eta(&mut self, eta: f64) {
        self.eta.value[0] = eta;
        self.eta_mode = ScalarMode::Fixed(eta);
    }

    /// Pins the gate to a fixed value in (0,1) (sweep cells).
    pub fn fix_alpha(&mut self, alpha: f64) -> Result<()> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!(
                "gate value {alpha} outside the open interval (0,1)"
            )));
        }
        self.alpha_logit.value[0] = logit(alpha);
        self.alpha_mode = ScalarMode::Fixed(alpha);
        Ok(())
    }

    pub fn gate(&self) -> f64 {
        sigmoid_scalar(self.alpha_logit.scalar_value())
    }

    pub fn eta_value(&self) -> f64 {
        self.eta.scalar_value()
    }

    /// Gradient step honoring fixed-coefficient modes.
    pub fn train_step(&mut self, lr: f64) {
        let eta_fixed = matches!(self.eta_mode, ScalarMode::Fixed(_));
        let alpha_fixed = matches!(self.alpha_mode, ScalarMode::Fixed(_));
        for t in self.tensors_mut() {
            let skip = (t.name == "eta" && eta_fixed) || (t.name == "alpha_logit" && alpha_fixed);
            if !skip {
                t.sgd_step(lr);
            }
        }
    }
}

impl ParamSet for G2raParams {
    fn tensors(&self) -> Vec<&ParamTensor> {
        let mut v: Vec<&ParamTensor> = vec![
            &self.w_q_base,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.psi_w1,
            &self.psi_b1,
            &self.psi_w2,
            &self.psi_b2,
        ];
        v.extend(self.head_q.iter());
        v.extend(self.head_k.iter());
        v.extend(self.head_v.iter());
        v.push(&self.w_o);
        v.push(&self.w_concat);
        v.push(&self.eta);
        v.push(&self.alpha_logit);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut v: Vec<&mut ParamTensor> = vec![
            &mut self.w_q_base,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.psi_w1,
            &mut self.psi_b1,
            &mut self.psi_w2,
            &mut self.psi_b2,
        ];
        v.extend(self.head_q.iter_mut());
        v.extend(self.head_k.iter_mut());
        v.extend(self.head_v.iter_mut());
        v.push(&mut self.w_o);
        v.push(&mut self.w_concat);
        v.push(&mut self.eta);
        v.push(&mut self.alpha_logit);
        v
    }
}

/// Base query projection: f2d * w_q_base, no bias.
pub fn project_base_queries(f2d: &TokenMatrix, p: &G2raParams) -> Result<TokenMatrix> {
    if f2d.cols() != p.config.d_clip {
        return Err(Error::Dim {
            op: "project_base_queries",
            lhs_rows: f2d.rows(),
            lhs_cols: f2d.cols(),
            rhs_rows: p.config.d_clip,
            rhs_cols: p.config.d,
        });
    }
    matmul(f2d, &p.w_q_base)
}

/// Key/value projections of the geometric tokens, bias broadcast per row.
pub fn project_geometry(f3d: &TokenMatrix, p: &G2raParams) -> Result<(TokenMatrix, TokenMatrix)> {
    if f3d.cols() != p.config.d_agg {
        return Err(Error::Dim {
            op: "project_geometry",
            lhs_rows: f3d.rows(),
            lhs_cols: f3d.cols(),
            rhs_rows: p.config.d_agg,
            rhs_cols: p.config.d,
        });
    }
    let k = add(&matmul(f3d, &p.w_k)?, &p.b_k)?;
    let v = add(&matmul(f3d, &p.w_v)?, &p.b_v)?;
    Ok((k, v))
}

/// Global geometric summary: mean over the projected value tokens.
pub fn geometric_summary(v: &TokenMatrix) -> Result<TokenMatrix> {
    mean_pool_rows(v)
}

/// Scale/shift generation from the geometric summary: a two-layer MLP
/// (d -> d -> 2d, rectified-linear hidden) whose first half passes through
/// a sigmoid so the per-channel scale stays in (0,1).
pub fn film_modulation(g: &TokenMatrix, p: &G2raParams) -> Result<(TokenMatrix, TokenMatrix)> {
    let t = film_forward(g, p)?;
    Ok((t.gamma_tilde, t.beta))
}

#[derive(Debug, Clone)]
pub struct FilmTrace {
    pub z: TokenMatrix,
    pub h: TokenMatrix,
    pub gamma: TokenMatrix,
    pub gamma_tilde: TokenMatrix,
    pub beta: TokenMatrix,
}

pub(crate) fn film_forward(g: &TokenMatrix, p: &G2raParams) -> Result<FilmTrace> {
    let z = add(&matmul(g, &p.psi_w1)?, &p.psi_b1)?;
    let h = relu(&z);
    let u = add(&matmul(&h, &p.psi_w2)?, &p.psi_b2)?;
    let d = p.config.d;
    let mut halves = split_cols(&u, &[d, d]).into_iter();
    let gamma = halves.next().unwrap();
    let beta = halves.next().unwrap();
    let gamma_tilde = sigmoid(&gamma);
    Ok(FilmTrace {
        z,
        h,
        gamma,
        gamma_tilde,
        beta,
    })
}

/// Returns (d_g) while accumulating MLP weight gradients.
pub(crate) fn film_backward(
    trace: &FilmTrace,
    g: &TokenMatrix,
    d_gamma_tilde: &TokenMatrix,
    d_beta: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<TokenMatrix> {
    // gamma_tilde = sigmoid(gamma)
    let mut d_gamma = TokenMatrix::zeros(1, trace.gamma.cols());
    for i in 0..trace.gamma.cols() {
        let s = trace.gamma_tilde.get(0, i);
        d_gamma.set(0, i, d_gamma_tilde.get(0, i) * s * (1.0 - s));
    }
    let d_u = concat_cols(&[&d_gamma, d_beta]);
    let (d_h, d_w2) = matmul_backward(&trace.h, &p.psi_w2, &d_u)?;
    p.psi_w2.accumulate(&d_w2);
    p.psi_b2.accumulate(&col_sum(&d_u));
    let mut d_z = d_h;
    for (dz, z) in d_z.data_mut().iter_mut().zip(trace.z.data()) {
        if *z <= 0.0 {
            *dz = 0.0;
        }
    }
    let (d_g, d_w1) = matmul_backward(g, &p.psi_w1, &d_z)?;
    p.psi_w1.accumulate(&d_w1);
    p.psi_b1.accumulate(&col_sum(&d_z));
    Ok(d_g)
}

/// Injects the pooled geometric modulation into the base queries:
/// q_inj = q_base + eta * (gamma_tilde (*) q_base + beta), with the
/// scale/shift rows broadcast over all query tokens.
pub fn inject_priors(
    q_base: &TokenMatrix,
    gamma_tilde: &TokenMatrix,
    beta: &TokenMatrix,
    eta: f64,
) -> Result<TokenMatrix> {
    let modulated = add(&mul(q_base, gamma_tilde)?, beta)?;
    add(q_base, &modulated.scale(eta))
}

#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub q: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
    /// Row-stochastic attention weights, one row per query token.
    pub attn: TokenMatrix,
    /// Transposed-pass weights plus refined values (bidirectional only).
    pub reverse_attn: Option<TokenMatrix>,
    pub v_refined: Option<TokenMatrix>,
}

#[derive(Debug, Clone)]
pub struct GarTrace {
    pub heads: Vec<HeadTrace>,
    pub concat: TokenMatrix,
    pub f_align: TokenMatrix,
    pub gate: f64,
    pub f_fuse: TokenMatrix,
}

/// Multi-head cross-attention from injected queries to geometric
/// keys/values, concatenated and passed through the output projection.
pub fn multihead_cross_attention(
    q_inj: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    p: &G2raParams,
) -> Result<(TokenMatrix, Vec<TokenMatrix>)> {
    let (heads, concat) = attention_heads(q_inj, k, v, p, false)?;
    let f_align = matmul(&concat, &p.w_o)?;
    Ok((f_align, heads.into_iter().map(|h| h.attn).collect()))
}

fn attention_heads(
    q_inj: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    p: &G2raParams,
    bidirectional: bool,
) -> Result<(Vec<HeadTrace>, TokenMatrix)> {
    p.config.validate()?;
    if q_inj.cols() != p.config.d || k.cols() != p.config.d || v.cols() != p.config.d {
        return Err(Error::Dim {
            op: "multihead_cross_attention",
            lhs_rows: q_inj.rows(),
            lhs_cols: q_inj.cols(),
            rhs_rows: k.rows(),
            rhs_cols: k.cols(),
        });
    }
    let scale = 1.0 / (p.config.head_dim() as f64).sqrt();
    let mut heads = Vec::with_capacity(p.config.heads);
    let mut outputs = Vec::with_capacity(p.config.heads);
    for i in 0..p.config.heads {
        let qi = matmul(q_inj, &p.head_q[i])?;
        let ki = matmul(k, &p.head_k[i])?;
        let vi = matmul(v, &p.head_v[i])?;
        let scores = matmul_nt(&qi, &ki)?.scale(scale);
        let attn = row_softmax(&scores);
        let (reverse_attn, v_refined, v_used) = if bidirectional {
            let rev = row_softmax(&scores.transpose());
            let refined = add(&vi, &matmul(&rev, &qi)?)?;
            (Some(rev), Some(refined.clone()), refined)
        } else {
            (None, None, vi.clone())
        };
        outputs.push(matmul(&attn, &v_used)?);
        heads.push(HeadTrace {
            q: qi,
            k: ki,
            v: vi,
            attn,
            reverse_attn,
            v_refined,
        });
    }
    let refs: Vec<&TokenMatrix> = outputs.iter().collect();
    Ok((heads, concat_cols(&refs)))
}

/// Gated residual blend of the attended output with the base queries.
pub fn gated_fusion(
    f_align: &TokenMatrix,
    q_base: &TokenMatrix,
    gate: f64,
) -> Result<TokenMatrix> {
    add(&f_align.scale(gate), &q_base.scale(1.0 - gate))
}

pub(crate) fn gar_forward(
    q_inj: &TokenMatrix,
    q_base: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    p: &G2raParams,
    bidirectional: bool,
) -> Result<GarTrace> {
    let (heads, concat) = attention_heads(q_inj, k, v, p, bidirectional)?;
    let f_align = matmul(&concat, &p.w_o)?;
    let gate = p.gate();
    let f_fuse = gated_fusion(&f_align, q_base, gate)?;
    Ok(GarTrace {
        heads,
        concat,
        f_align,
        gate,
        f_fuse,
    })
}

/// Returns (d_q_inj, d_q_base, d_k, d_v) while accumulating parameter grads.
pub(crate) fn gar_backward(
    trace: &GarTrace,
    q_inj: &TokenMatrix,
    q_base: &TokenMatrix,
    k: &TokenMatrix,
    v: &TokenMatrix,
    upstream: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<(TokenMatrix, TokenMatrix, TokenMatrix, TokenMatrix)> {
    if upstream.rows() != trace.f_fuse.rows() || upstream.cols() != trace.f_fuse.cols() {
        return Err(Error::Dim {
            op: "gar_backward",
            lhs_rows: upstream.rows(),
            lhs_cols: upstream.cols(),
            rhs_rows: trace.f_fuse.rows(),
            rhs_cols: trace.f_fuse.cols(),
        });
    }
    let gate = trace.gate;
    // f_fuse = gate * f_align + (1 - gate) * q_base
    let d_gate = frob_dot(upstream, &trace.f_align.sub(q_base)?);
    p.alpha_logit.accumulate_scalar(d_gate * gate * (1.0 - gate));
    let d_f_align = upstream.scale(gate);
    let d_q_base = upstream.scale(1.0 - gate);

    let (d_concat, d_w_o) = matmul_backward(&trace.concat, &p.w_o, &d_f_align)?;
    p.w_o.accumulate(&d_w_o);

    let dh = p.config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let widths = vec![dh; p.config.heads];
    let d_heads = split_cols(&d_concat, &widths);

    let mut d_q_inj = TokenMatrix::zeros(q_inj.rows(), q_inj.cols());
    let mut d_k_full = TokenMatrix::zeros(k.rows(), k.cols());
    let mut d_v_full = TokenMatrix::zeros(v.rows(), v.cols());

    for (i, d_head) in d_heads.iter().enumerate() {
        let ht = &trace.heads[i];
        let v_used = ht.v_refined.as_ref().unwrap_or(&ht.v);
        // head = attn * v_used
        let d_attn = matmul_nt(d_head, v_used)?;
        let d_v_used = matmul_tn(&ht.attn, d_head)?;
        let mut d_scores = row_softmax_backward(&ht.attn, &d_attn);
        let mut d_qi = TokenMatrix::zeros(ht.q.rows(), ht.q.cols());
        if let Some(rev) = &ht.reverse_attn {
            // v_used = v_i + rev * q_i; the residual passes d_v_used through
            let d_rev = matmul_nt(&d_v_used, &ht.q)?;
            d_qi = add(&d_qi, &matmul_tn(rev, &d_v_used)?)?;
            let d_scores_t = row_softmax_backward(rev, &d_rev);
            d_scores = add(&d_scores, &d_scores_t.transpose())?;
        }
        // scores = q_i k_i^T * scale
        d_qi = add(&d_qi, &matmul(&d_scores, &ht.k)?.scale(scale))?;
        let d_ki = matmul_tn(&d_scores, &ht.q)?.scale(scale);
        let d_vi = d_v_used;

        let (d_q_part, d_wq) = matmul_backward(q_inj, &p.head_q[i], &d_qi)?;
        p.head_q[i].accumulate(&d_wq);
        d_q_inj = add(&d_q_inj, &d_q_part)?;

        let (d_k_part, d_wk) = matmul_backward(k, &p.head_k[i], &d_ki)?;
        p.head_k[i].accumulate(&d_wk);
        d_k_full = add(&d_k_full, &d_k_part)?;

        let (d_v_part, d_wv) = matmul_backward(v, &p.head_v[i], &d_vi)?;
        p.head_v[i].accumulate(&d_wv);
        d_v_full = add(&d_v_full, &d_v_part)?;
    }

    Ok((d_q_inj, d_q_base, d_k_full, d_v_full))
}

#[derive(Debug, Clone)]
pub struct GpiTrace {
    pub g: TokenMatrix,
    pub film: FilmTrace,
    pub q_inj: TokenMatrix,
}

pub(crate) fn gpi_forward(
    q_base: &TokenMatrix,
    v: &TokenMatrix,
    p: &G2raParams,
) -> Result<GpiTrace> {
    let g = geometric_summary(v)?;
    let film = film_forward(&g, p)?;
    let q_inj = inject_priors(q_base, &film.gamma_tilde, &film.beta, p.eta_value())?;
    Ok(GpiTrace { g, film, q_inj })
}

/// Returns (d_q_base contribution, d_v contribution).
pub(crate) fn gpi_backward(
    trace: &GpiTrace,
    q_base: &TokenMatrix,
    v_rows: usize,
    d_q_inj: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<(TokenMatrix, TokenMatrix)> {
    let eta = p.eta_value();
    let film = &trace.film;
    // q_inj = q_base + eta * (gamma_tilde (*) q_base + beta)
    let modulated = add(&mul(q_base, &film.gamma_tilde)?, &film.beta)?;
    p.eta.accumulate_scalar(frob_dot(d_q_inj, &modulated));
    let d_q_base = add(d_q_inj, &mul(d_q_inj, &film.gamma_tilde)?.scale(eta))?;
    let d_gamma_tilde = col_sum(&mul(d_q_inj, q_base)?).scale(eta);
    let d_beta = col_sum(d_q_inj).scale(eta);
    let d_g = film_backward(film, &trace.g, &d_gamma_tilde, &d_beta, p)?;
    let d_v = mean_pool_backward(&d_g, v_rows);
    Ok((d_q_base, d_v))
}

/// Full forward trace: inputs, projections, injection intermediates,
/// per-head attention, and the fused output.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub f2d: TokenMatrix,
    pub f3d: TokenMatrix,
    pub q_base: TokenMatrix,
    pub k: TokenMatrix,
    pub v: TokenMatrix,
    pub(crate) gpi: GpiTrace,
    pub(crate) gar: GarTrace,
}

impl FusionTrace {
    pub fn f_fuse(&self) -> &TokenMatrix {
        &self.gar.f_fuse
    }

    pub fn f_align(&self) -> &TokenMatrix {
        &self.gar.f_align
    }

    pub fn q_inj(&self) -> &TokenMatrix {
        &self.gpi.q_inj
    }

    pub fn summary(&self) -> &TokenMatrix {
        &self.gpi.g
    }

    pub fn gamma_tilde(&self) -> &TokenMatrix {
        &self.gpi.film.gamma_tilde
    }

    /// Pre-activation of the modulation MLP hidden layer.
    pub fn film_hidden(&self) -> &TokenMatrix {
        &self.gpi.film.z
    }

    pub fn beta(&self) -> &TokenMatrix {
        &self.gpi.film.beta
    }

    pub fn attention(&self, head: usize) -> &TokenMatrix {
        &self.gar.heads[head].attn
    }

    pub fn gate(&self) -> f64 {
        self.gar.gate
    }
}

/// Composes the whole mechanism; the returned trace retains everything
/// backward needs.
pub fn g2ra_forward(
    f2d: &TokenMatrix,
    f3d: &TokenMatrix,
    p: &G2raParams,
) -> Result<FusionTrace> {
    let q_base = project_base_queries(f2d, p)?;
    let (k, v) = project_geometry(f3d, p)?;
    let gpi = gpi_forward(&q_base, &v, p)?;
    let gar = gar_forward(&gpi.q_inj, &q_base, &k, &v, p, false)?;
    Ok(FusionTrace {
        f2d: f2d.clone(),
        f3d: f3d.clone(),
        q_base,
        k,
        v,
        gpi,
        gar,
    })
}

/// Gradients flowing back to the two input token streams.
#[derive(Debug, Clone)]
pub struct InputGrads {
    pub d_f2d: TokenMatrix,
    pub d_f3d: TokenMatrix,
}

/// Exact reverse-mode pass over a recorded trace. Parameter gradients
/// accumulate additively; repeated calls add up until `zero_grads`.
pub fn g2ra_backward(
    trace: &FusionTrace,
    upstream: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<InputGrads> {
    let (d_q_inj, d_q_base_gar, d_k, mut d_v) = gar_backward(
        &trace.gar,
        &trace.gpi.q_inj,
        &trace.q_base,
        &trace.k,
        &trace.v,
        upstream,
        p,
    )?;
    let (d_q_base_gpi, d_v_gpi) =
        gpi_backward(&trace.gpi, &trace.q_base, trace.v.rows(), &d_q_inj, p)?;
    d_v = add(&d_v, &d_v_gpi)?;
    let d_q_base = add(&d_q_base_gar, &d_q_base_gpi)?;

    // V = f3d w_v + b_v ; K = f3d w_k + b_k ; q_base = f2d w_q_base
    let (d_f3d_v, d_wv) = matmul_backward(&trace.f3d, &p.w_v, &d_v)?;
    p.w_v.accumulate(&d_wv);
    p.b_v.accumulate(&col_sum(&d_v));
    let (d_f3d_k, d_wk) = matmul_backward(&trace.f3d, &p.w_k, &d_k)?;
    p.w_k.accumulate(&d_wk);
    p.b_k.accumulate(&col_sum(&d_k));
    let d_f3d = add(&d_f3d_v, &d_f3d_k)?;

    let (d_f2d, d_wq) = matmul_backward(&trace.f2d, &p.w_q_base, &d_q_base)?;
    p.w_q_base.accumulate(&d_wq);

    Ok(InputGrads { d_f2d, d_f3d })
}
