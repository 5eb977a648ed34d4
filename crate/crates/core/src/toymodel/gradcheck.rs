//! Central finite differences against the tape's gradients.
//!
//! Error per parameter group is `‖a − f‖ / max(‖a‖ + ‖f‖, 1e-7)`; an
//! elementwise ratio is ill-conditioned for entries that are nearly zero.

use rayon::prelude::*;
use serde::Serialize;

use super::train::lm_loss_and_grads;
use super::{forward, loss_lm, ModelConfig, Params, Sample};
use crate::error::{KsaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupCheck {
    pub name: String,
    pub rel_error: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    /// Fails listing every group above `tol`.
    pub fn check(&self, tol: f64) -> Result<()> {
        let bad: Vec<String> = self
            .groups
            .iter()
            .filter(|g| g.rel_error.is_nan() || g.rel_error >= tol)
            .map(|g| format!("{} ({:.3e})", g.name, g.rel_error))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(KsaError::GradCheck(bad.join(", ")))
        }
    }
}

pub(crate) fn rel_error(a: &[f64], f: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(f).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut f.iter().copied());
    diff / scale.max(1e-7)
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of `analytic` against central differences of `loss` over
/// every parameter element.
#[cfg(test)]
pub(crate) fn compare_params(
    params: &Params<f64>,
    analytic: &Params<f64>,
    eps: f64,
    loss: impl Fn(&Params<f64>) -> f64 + Sync,
) -> f64 {
    let addrs: Vec<(usize, usize)> = params
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |e| (ti, e)))
        .collect();
    let fd: Vec<f64> = addrs
        .par_iter()
        .map(|&(ti, e)| {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors_mut()[ti].data_mut()[e] += delta;
                loss(&p)
            };
            (eval(eps) - eval(-eps)) / (2.0 * eps)
        })
        .collect();
    let a: Vec<f64> = analytic
        .tensors()
        .iter()
        .flat_map(|t| t.data().to_vec())
        .collect();
    rel_error(&a, &fd)
}

fn batch_loss(cfg: &ModelConfig, params: &Params<f64>, batch: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in batch {
        total += loss_lm(&forward(cfg, params, &s.tokens)?.logits, &s.targets)?;
    }
    Ok(total / batch.len() as f64)
}

/// Element addresses `(tensor, offset)` of each named group.
fn groups(cfg: &ModelConfig, params: &Params<f64>) -> Vec<(String, Vec<(usize, usize)>)> {
    let mut out = Vec::new();
    for (ti, (name, t)) in params.named().into_iter().enumerate() {
        let all: Vec<(usize, usize)> = (0..t.len()).map(|e| (ti, e)).collect();
        if name == "embedding" {
            let split = cfg.summary_token() * cfg.d_model;
            let (text, summary): (Vec<_>, Vec<_>) = all.into_iter().partition(|&(_, e)| e < split);
            out.push(("embedding.text".to_string(), text));
            out.push(("embedding.summary".to_string(), summary));
        } else {
            out.push((name, all));
        }
    }
    out
}

/// Finite-difference check of the mean LM loss over `batch`, every element
/// of every parameter group.
pub fn grad_check(
    cfg: &ModelConfig,
    params: &Params<f64>,
    batch: &[Sample],
    eps: f64,
) -> Result<GradCheckReport> {
    if batch.is_empty() || !(eps > 0.0) {
        return Err(KsaError::Config(
            "grad check needs a non-empty batch and eps > 0".into(),
        ));
    }
    let mut analytic = params.zeros_like();
    for s in batch {
        let (_, g, _, _) = lm_loss_and_grads(cfg, params, s)?;
        for (dst, src) in analytic.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a += b / batch.len() as f64;
            }
        }
    }
    let analytic_tensors = analytic.tensors();
    let mut report = Vec::new();
    for (name, elems) in groups(cfg, params) {
        let fd: Vec<f64> = elems
            .par_iter()
            .map(|&(ti, e)| {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.tensors_mut()[ti].data_mut()[e] += delta;
                    batch_loss(cfg, &p, batch)
                };
                Ok((eval(eps)? - eval(-eps)?) / (2.0 * eps))
            })
            .collect::<Result<_>>()?;
        let a: Vec<f64> = elems
            .iter()
            .map(|&(ti, e)| analytic_tensors[ti].data()[e])
            .collect();
        report.push(GroupCheck {
            name,
            rel_error: rel_error(&a, &fd),
            analytic_norm: l2(&a),
            numeric_norm: l2(&fd),
        });
    }
    let max_rel_error = report.iter().map(|g| g.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups: report,
        max_rel_error,
    })
}

/// `(‖∂L/∂s‖` analytic, `‖∂L/∂s‖` by finite differences) for the summary
/// embedding `s`.
pub fn summary_embedding_gradient(
    cfg: &ModelConfig,
    params: &Params<f64>,
    sample: &Sample,
    eps: f64,
) -> Result<(f64, f64)> {
    let (_, g, _, _) = lm_loss_and_grads(cfg, params, sample)?;
    let row = cfg.summary_token();
    let analytic = l2(g.embedding.row(row));
    let batch = std::slice::from_ref(sample);
    let mut fd = Vec::with_capacity(cfg.d_model);
    for c in 0..cfg.d_model {
        let eval = |delta: f64| {
            let mut p = params.clone();
            p.embedding.row_mut(row)[c] += delta;
            batch_loss(cfg, &p, batch)
        };
        fd.push((eval(eps)? - eval(-eps)?) / (2.0 * eps));
    }
    Ok((analytic, l2(&fd)))
}
