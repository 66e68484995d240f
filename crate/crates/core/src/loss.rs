//! The consistency objective: total-variation smoothness of the edge map,
//! context regularization, feature consistency and cross entropy.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{arg_err, shape_err, Error, Result};
use crate::kernel::{Graph, ReduceKind, Scalar, Tensor, Var};
use crate::model::{ForwardTrace, VariantFlags};

/// Per-sample reduction used by the two L2 consistency terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum NormReduction {
    /// plain squared norm `‖·‖₂²`
    #[default]
    Sum,
    /// squared norm divided by the number of elements per sample
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_att: f64,
    pub lambda_ctx: f64,
    pub lambda_fea: f64,
    pub norm: NormReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_att: 0.1, lambda_ctx: 0.1, lambda_fea: 0.1, norm: NormReduction::Sum }
    }
}

impl LossWeights {
    pub const CE_ONLY: Self = Self { lambda_att: 0.0, lambda_ctx: 0.0, lambda_fea: 0.0, norm: NormReduction::Sum };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("lambda_att", self.lambda_att), ("lambda_ctx", self.lambda_ctx), ("lambda_fea", self.lambda_fea)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }

    /// `λ_att·att + λ_ctx·ctx + λ_fea·fea + ce`, in that order.
    pub fn combine(&self, att: f64, ctx: f64, fea: f64, ce: f64) -> f64 {
        self.lambda_att * att + self.lambda_ctx * ctx + self.lambda_fea * fea + ce
    }
}

/// Scalar values of every loss term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_att: f64,
    pub l_ctx: f64,
    pub l_fea: f64,
    pub l_ce: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 5] {
        [self.l_total, self.l_att, self.l_ctx, self.l_fea, self.l_ce]
    }

    pub fn is_finite(&self) -> bool {
        self.components().iter().all(|v| v.is_finite())
    }

    /// Name of the first non-finite component.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        ["l_total", "l_att", "l_ctx", "l_fea", "l_ce"]
            .into_iter()
            .zip(self.components())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Graph handles of the assembled objective. Disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub att: Option<Var>,
    pub ctx: Option<Var>,
    pub fea: Option<Var>,
    pub ce: Var,
}

impl LossTerms {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> LossBreakdown {
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().as_f64());
        LossBreakdown {
            l_att: val(self.att),
            l_ctx: val(self.ctx),
            l_fea: val(self.fea),
            l_ce: val(Some(self.ce)),
            l_total: val(Some(self.total)),
        }
    }
}

/// Per-sample total variation of single-channel maps `[B,1,H,W]`, output
/// `[B]`. Both the vertical and horizontal sums are divided by `H·W`.
pub fn total_variation<T: Scalar>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let [b, c, h, w] = *g.shape(a) else {
        return Err(shape_err("total_variation", format!("expected [B,1,H,W], got {:?}", g.shape(a))));
    };
    if c != 1 {
        return Err(shape_err("total_variation", format!("expected a single channel, got {c}")));
    }
    let inv_hw = 1.0 / (h * w) as f64;
    let mut terms = Vec::new();
    for (axis, extent) in [(2usize, h), (3usize, w)] {
        if extent < 2 {
            continue;
        }
        let d = g.diff(a, axis)?;
        let d = g.abs(d);
        let s = g.reduce(d, ReduceKind::Sum, Some(&[1, 2, 3]))?;
        terms.push(g.scale(s, inv_hw));
    }
    Ok(match terms.as_slice() {
        [] => g.constant(Tensor::zeros(&[b])),
        [one] => *one,
        [v, hz] => g.add(*v, *hz)?,
        _ => unreachable!(),
    })
}

/// Batch mean of per-sample total variation.
pub fn attention_loss<T: Scalar>(g: &mut Graph<T>, a: Var) -> Result<Var> {
    let tv = total_variation(g, a)?;
    Ok(g.mean_all(tv))
}

fn batch_sq_distance<T: Scalar>(
    g: &mut Graph<T>,
    op: &'static str,
    x: Var,
    y: Var,
    norm: NormReduction,
) -> Result<Var> {
    if g.shape(x) != g.shape(y) {
        return Err(shape_err(op, format!("{:?} vs {:?}", g.shape(x), g.shape(y))));
    }
    let rank = g.shape(x).len();
    if rank < 2 {
        return Err(shape_err(op, "inputs need a batch axis and at least one feature axis"));
    }
    let d = g.sub(x, y)?;
    let sq = g.mul(d, d)?;
    let axes: Vec<usize> = (1..rank).collect();
    let kind = match norm {
        NormReduction::Sum => ReduceKind::Sum,
        NormReduction::Mean => ReduceKind::Mean,
    };
    let per_sample = g.reduce(sq, kind, Some(&axes))?;
    Ok(g.mean_all(per_sample))
}

/// `(1/B) Σᵢ ‖F_encoded,i − F_dual,i‖²`.
pub fn context_regularization<T: Scalar>(
    g: &mut Graph<T>,
    f_encoded: Var,
    f_dual: Var,
    norm: NormReduction,
) -> Result<Var> {
    batch_sq_distance(g, "context_regularization", f_encoded, f_dual, norm)
}

/// `(1/B) Σᵢ ‖F_dual,i − F_i‖²`.
pub fn feature_consistency<T: Scalar>(g: &mut Graph<T>, f_dual: Var, f: Var, norm: NormReduction) -> Result<Var> {
    batch_sq_distance(g, "feature_consistency", f_dual, f, norm)
}

/// Mean softmax cross entropy of raw logits.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(arg_err("cross_entropy", "empty batch"));
    }
    let per = g.softmax_cross_entropy(logits, labels)?;
    Ok(g.mean_all(per))
}

/// Assembles the weighted objective from a forward trace. Terms whose
/// producing stage is disabled in `flags` are left out (and read as 0).
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    trace: &ForwardTrace,
    labels: &[usize],
    weights: &LossWeights,
    flags: VariantFlags,
) -> Result<LossTerms> {
    weights.validate()?;
    let ce = cross_entropy(g, trace.logits, labels)?;
    let att = if flags.use_edge_attention {
        let a =
            trace.a_spat.ok_or_else(|| Error::Contract("edge attention enabled but trace has no edge map".into()))?;
        Some(attention_loss(g, a)?)
    } else {
        None
    };
    let ctx = if flags.use_dce {
        Some(context_regularization(g, trace.f_encoded, trace.f_dual, weights.norm)?)
    } else {
        None
    };
    let fea = if flags.any_attention() {
        if flags.use_channel_attention && trace.a_chan.is_none() {
            return Err(Error::Contract("channel attention enabled but trace has no channel gate".into()));
        }
        Some(feature_consistency(g, trace.f_dual, trace.f, weights.norm)?)
    } else {
        None
    };

    let mut terms = Vec::new();
    for (v, lambda) in [(att, weights.lambda_att), (ctx, weights.lambda_ctx), (fea, weights.lambda_fea)] {
        if let Some(v) = v {
            terms.push(g.scale(v, lambda));
        }
    }
    let mut total = None;
    for t in terms.into_iter().chain(core::iter::once(ce)) {
        total = Some(match total {
            None => t,
            Some(acc) => g.add(acc, t)?,
        });
    }
    Ok(LossTerms { total: total.expect("ce is always present"), att, ctx, fea, ce })
}
