//! Central finite-difference verification of recorded gradients.

use alloc::format;
use alloc::vec::Vec;

use super::graph::{Graph, Var};
use super::scalar::{Precision, Scalar};
use super::tensor::Tensor;
use crate::error::{arg_err, Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Check at most this many coordinates per parameter tensor, chosen
    /// with `seed`; `None` checks every coordinate.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { eps: 1e-5, max_coords_per_param: None, seed: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Worst {
    pub param: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Coordinates whose ±eps probes changed a branch decision (a ReLU,
    /// |x| or max-pool kink lies inside the probe interval). They are
    /// excluded from the maximum.
    pub flagged: usize,
    pub worst: Option<Worst>,
}

/// Compares the backward pass of `build_loss` against central differences
/// `(f(θ+eps) - f(θ-eps)) / (2·eps)`, reporting the maximum of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `build_loss` receives a fresh graph and one leaf per parameter and must
/// return a scalar. Only 64-bit tensors are accepted.
pub fn grad_check<T, F>(params: &[Tensor<T>], mut build_loss: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if T::PRECISION != Precision::F64 {
        return Err(Error::Precision(format!("gradient checking needs 64-bit tensors, got {:?}", T::PRECISION)));
    }
    if !(1e-6..=1e-4).contains(&opts.eps) {
        return Err(arg_err("grad_check", format!("eps {} outside [1e-6, 1e-4]", opts.eps)));
    }

    let mut graph = Graph::with_branch_tracking();
    let vars: Vec<Var> = params.iter().map(|p| graph.param(p.clone())).collect();
    let loss = build_loss(&mut graph, &vars)?;
    graph.backward(loss)?;
    let base_sig = graph.branch_signature();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| match graph.grad(v) {
            Some(g) => g.iter().map(|x| x.as_f64()).collect(),
            None => alloc::vec![0.0; p.numel()],
        })
        .collect();
    drop(graph);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut eval = |work: &[Tensor<T>]| -> Result<(f64, u64)> {
        let mut g = Graph::with_branch_tracking();
        let vars: Vec<Var> = work.iter().map(|p| g.constant(p.clone())).collect();
        let loss = build_loss(&mut g, &vars)?;
        Ok((g.value(loss).item().as_f64(), g.branch_signature()))
    };

    let mut rng = Rng::new(opts.seed);
    let mut report = GradCheckReport { max_relative_error: 0.0, checked: 0, flagged: 0, worst: None };
    for pi in 0..params.len() {
        let n = params[pi].numel();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.max_coords_per_param {
            if k < n {
                rng.shuffle(&mut coords);
                coords.truncate(k);
                coords.sort_unstable();
            }
        }
        for c in coords {
            let orig = work[pi].data()[c];
            work[pi].data_mut()[c] = T::from_f64(orig.as_f64() + opts.eps);
            let (plus, sig_plus) = eval(&work)?;
            work[pi].data_mut()[c] = T::from_f64(orig.as_f64() - opts.eps);
            let (minus, sig_minus) = eval(&work)?;
            work[pi].data_mut()[c] = orig;
            if sig_plus != base_sig || sig_minus != base_sig {
                report.flagged += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let a = analytic[pi][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_relative_error || report.worst.is_none() {
                report.max_relative_error = report.max_relative_error.max(rel);
                report.worst = Some(Worst { param: pi, coord: c, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}
