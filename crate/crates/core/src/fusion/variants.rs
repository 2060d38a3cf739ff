//! Ablation and comparison variants of the fusion stage.
//!
//! All variants share one parameter struct; paths a variant does not use
//! simply receive zero gradient. The bidirectional variant reuses the
//! attention projections for a second, transposed pass that refines the
//! value tokens from the queries before the usual fused readout.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::{
    g2ra_backward, g2ra_forward, gar_backward, gar_forward, gpi_backward, gpi_forward,
    project_base_queries, project_geometry, FusionTrace, G2raParams, GarTrace, GpiTrace,
    InputGrads,
};
use crate::tensor::{
    add, col_sum, concat_cols, matmul, matmul_backward, mean_pool_backward, mean_pool_rows,
    split_cols, TokenMatrix,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    TwoDOnly,
    ThreeDOnly,
    Concat,
    NoGeoInject,
    Bidirectional,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::TwoDOnly,
        Variant::ThreeDOnly,
        Variant::Concat,
        Variant::NoGeoInject,
        Variant::Bidirectional,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::TwoDOnly => "two_d_only",
            Variant::ThreeDOnly => "three_d_only",
            Variant::Concat => "concat",
            Variant::NoGeoInject => "no_geo_inject",
            Variant::Bidirectional => "bidirectional",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant name: {s}")))
    }
}

fn broadcast_row(row: &TokenMatrix, rows: usize) -> TokenMatrix {
    debug_assert_eq!(row.rows(), 1);
    let mut out = TokenMatrix::zeros(rows, row.cols());
    for r in 0..rows {
        out.data_mut()[r * row.cols()..(r + 1) * row.cols()].copy_from_slice(row.row(0));
    }
    out
}

/// Forward intermediates per variant, retained for the backward pass.
#[derive(Debug, Clone)]
pub enum VariantTrace {
    Full(FusionTrace),
    TwoDOnly {
        f2d: TokenMatrix,
        q_base: TokenMatrix,
    },
    ThreeDOnly {
        f3d: TokenMatrix,
        v: TokenMatrix,
        g: TokenMatrix,
        out: TokenMatrix,
    },
    Concat {
        f2d: TokenMatrix,
        f3d: TokenMatrix,
        q_base: TokenMatrix,
        v: TokenMatrix,
        g: TokenMatrix,
        joined: TokenMatrix,
        out: TokenMatrix,
    },
    NoGeoInject {
        f2d: TokenMatrix,
        f3d: TokenMatrix,
        q_base: TokenMatrix,
        k: TokenMatrix,
        v: TokenMatrix,
        gar: GarTrace,
    },
    Bidirectional {
        f2d: TokenMatrix,
        f3d: TokenMatrix,
        q_base: TokenMatrix,
        k: TokenMatrix,
        v: TokenMatrix,
        gpi: GpiTrace,
        gar: GarTrace,
    },
}

impl VariantTrace {
    pub fn output(&self) -> &TokenMatrix {
        match self {
            VariantTrace::Full(t) => t.f_fuse(),
            VariantTrace::TwoDOnly { q_base, .. } => q_base,
            VariantTrace::ThreeDOnly { out, .. } => out,
            VariantTrace::Concat { out, .. } => out,
            VariantTrace::NoGeoInject { gar, .. } => &gar.f_fuse,
            VariantTrace::Bidirectional { gar, .. } => &gar.f_fuse,
        }
    }
}

pub fn variant_forward(
    kind: Variant,
    f2d: &TokenMatrix,
    f3d: &TokenMatrix,
    p: &G2raParams,
) -> Result<VariantTrace> {
    match kind {
        Variant::Full => Ok(VariantTrace::Full(g2ra_forward(f2d, f3d, p)?)),
        Variant::TwoDOnly => {
            let q_base = project_base_queries(f2d, p)?;
            Ok(VariantTrace::TwoDOnly {
                f2d: f2d.clone(),
                q_base,
            })
        }
        Variant::ThreeDOnly => {
            let (_, v) = project_geometry(f3d, p)?;
            let g = mean_pool_rows(&v)?;
            let out = broadcast_row(&g, f2d.rows());
            Ok(VariantTrace::ThreeDOnly {
                f3d: f3d.clone(),
                v,
                g,
                out,
            })
        }
        Variant::Concat => {
            let q_base = project_base_queries(f2d, p)?;
            let (_, v) = project_geometry(f3d, p)?;
            let g = mean_pool_rows(&v)?;
            let joined = concat_cols(&[&q_base, &broadcast_row(&g, q_base.rows())]);
            let out = matmul(&joined, &p.w_concat)?;
            Ok(VariantTrace::Concat {
                f2d: f2d.clone(),
                f3d: f3d.clone(),
                q_base,
                v,
                g,
                joined,
                out,
            })
        }
        Variant::NoGeoInject => {
            let q_base = project_base_queries(f2d, p)?;
            let (k, v) = project_geometry(f3d, p)?;
            let gar = gar_forward(&q_base, &q_base, &k, &v, p, false)?;
            Ok(VariantTrace::NoGeoInject {
                f2d: f2d.clone(),
                f3d: f3d.clone(),
                q_base,
                k,
                v,
                gar,
            })
        }
        Variant::Bidirectional => {
            let q_base = project_base_queries(f2d, p)?;
            let (k, v) = project_geometry(f3d, p)?;
            let gpi = gpi_forward(&q_base, &v, p)?;
            let gar = gar_forward(&gpi.q_inj, &q_base, &k, &v, p, true)?;
            Ok(VariantTrace::Bidirectional {
                f2d: f2d.clone(),
                f3d: f3d.clone(),
                q_base,
                k,
                v,
                gpi,
                gar,
            })
        }
    }
}

/// Forward-only variant evaluation.
pub fn fuse_variant(
    kind: Variant,
    f2d: &TokenMatrix,
    f3d: &TokenMatrix,
    p: &G2raParams,
) -> Result<TokenMatrix> {
    Ok(variant_forward(kind, f2d, f3d, p)?.output().clone())
}

pub fn variant_backward(
    trace: &VariantTrace,
    upstream: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<InputGrads> {
    let out = trace.output();
    if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
        return Err(Error::Dim {
            op: "variant_backward",
            lhs_rows: upstream.rows(),
            lhs_cols: upstream.cols(),
            rhs_rows: out.rows(),
            rhs_cols: out.cols(),
        });
    }
    match trace {
        VariantTrace::Full(t) => g2ra_backward(t, upstream, p),
        VariantTrace::TwoDOnly { f2d, .. } => {
            let (d_f2d, d_wq) = matmul_backward(f2d, &p.w_q_base, upstream)?;
            p.w_q_base.accumulate(&d_wq);
            Ok(InputGrads {
                d_f2d,
                d_f3d: TokenMatrix::zeros(0, 0),
            })
        }
        VariantTrace::ThreeDOnly { f3d, v, .. } => {
            let d_g = col_sum(upstream);
            let d_v = mean_pool_backward(&d_g, v.rows());
            let (d_f3d, d_wv) = matmul_backward(f3d, &p.w_v, &d_v)?;
            p.w_v.accumulate(&d_wv);
            p.b_v.accumulate(&col_sum(&d_v));
            Ok(InputGrads {
                d_f2d: TokenMatrix::zeros(0, 0),
                d_f3d,
            })
        }
        VariantTrace::Concat {
            f2d,
            f3d,
            v,
            joined,
            ..
        } => {
            let (d_joined, d_wcat) = matmul_backward(joined, &p.w_concat, upstream)?;
            p.w_concat.accumulate(&d_wcat);
            let d = p.config.d;
            let mut parts = split_cols(&d_joined, &[d, d]).into_iter();
            let d_q_base = parts.next().unwrap();
            let d_g_rows = parts.next().unwrap();
            let d_g = col_sum(&d_g_rows);
            let d_v = mean_pool_backward(&d_g, v.rows());
            let (d_f3d, d_wv) = matmul_backward(f3d, &p.w_v, &d_v)?;
            p.w_v.accumulate(&d_wv);
            p.b_v.accumulate(&col_sum(&d_v));
            let (d_f2d, d_wq) = matmul_backward(f2d, &p.w_q_base, &d_q_base)?;
            p.w_q_base.accumulate(&d_wq);
            Ok(InputGrads { d_f2d, d_f3d })
        }
        VariantTrace::NoGeoInject {
            f2d,
            f3d,
            q_base,
            k,
            v,
            gar,
        } => {
            let (d_q_inj, d_q_base_res, d_k, d_v) =
                gar_backward(gar, q_base, q_base, k, v, upstream, p)?;
            let d_q_base = add(&d_q_inj, &d_q_base_res)?;
            finish_projection_grads(f2d, f3d, &d_q_base, &d_k, &d_v, p)
        }
        VariantTrace::Bidirectional {
            f2d,
            f3d,
            q_base,
            k,
            v,
            gpi,
            gar,
        } => {
            let (d_q_inj, d_q_base_res, d_k, mut d_v) =
                gar_backward(gar, &gpi.q_inj, q_base, k, v, upstream, p)?;
            let (d_q_base_gpi, d_v_gpi) = gpi_backward(gpi, q_base, v.rows(), &d_q_inj, p)?;
            d_v = add(&d_v, &d_v_gpi)?;
            let d_q_base = add(&d_q_base_res, &d_q_base_gpi)?;
            finish_projection_grads(f2d, f3d, &d_q_base, &d_k, &d_v, p)
        }
    }
}

fn finish_projection_grads(
    f2d: &TokenMatrix,
    f3d: &TokenMatrix,
    d_q_base: &TokenMatrix,
    d_k: &TokenMatrix,
    d_v: &TokenMatrix,
    p: &mut G2raParams,
) -> Result<InputGrads> {
    let (d_f3d_v, d_wv) = matmul_backward(f3d, &p.w_v, d_v)?;
    p.w_v.accumulate(&d_wv);
    p.b_v.accumulate(&col_sum(d_v));
    let (d_f3d_k, d_wk) = matmul_backward(f3d, &p.w_k, d_k)?;
    p.w_k.accumulate(&d_wk);
    p.b_k.accumulate(&col_sum(d_k));
    let d_f3d = add(&d_f3d_v, &d_f3d_k)?;
    let (d_f2d, d_wq) = matmul_backward(f2d, &p.w_q_base, d_q_base)?;
    p.w_q_base.accumulate(&d_wq);
    Ok(InputGrads { d_f2d, d_f3d })
}
