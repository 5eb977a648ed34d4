use std::collections::HashMap;
use std::sync::Arc;

use super::tape::{log_sum_exp, AttnShape, Graph, MaskRows, Var};
use super::{LayerKind, ModelConfig, Params};
use crate::attention::{attention_probe, AttentionInputs};
use crate::error::{KsaError, Result};
use crate::masking::{augment, ksa_mask, sca_mask, swa_mask, AugmentedSequence, VisibilityMask};
use crate::numerics::Tensor;
use crate::recipes::SummaryProjections;
use crate::scalar::Scalar;

/// Student-side summary projections mixed in at summary rows of KSA layers:
/// `λ·x_S + (1−λ)·x_main`.
#[derive(Debug, Clone, Copy)]
pub struct SummaryBranch<'a, T> {
    pub projections: &'a SummaryProjections<T>,
    pub lambda: T,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `n_text × vocab`.
    pub logits: Tensor<T>,
    /// Per layer, attention output before the output projection, over the
    /// (possibly augmented) sequence: `len × (h·d)`.
    pub attn_outputs: Vec<Tensor<T>>,
    /// Final-normed hidden state at text positions, `n_text × d_model`.
    pub final_hidden: Tensor<T>,
    pub sequence: AugmentedSequence,
}

pub(crate) struct Built {
    pub logits: Var,
    pub attn: Vec<Var>,
    /// Per layer rotated `(q, k, v)` fed to attention.
    pub qkv: Vec<(Var, Var, Var)>,
    pub hidden: Var,
    pub sequence: AugmentedSequence,
    /// Leaves in `Params::tensors()` order.
    pub params: Vec<Var>,
    /// Per layer `[wq, wk, wv]` leaves of the summary projections in use.
    pub projections: Vec<Option<[Var; 3]>>,
}

pub(crate) fn sequence_for(cfg: &ModelConfig, n: usize) -> AugmentedSequence {
    if cfg.schedule().augments() {
        augment(n, &cfg.ksa)
    } else {
        AugmentedSequence::plain(n)
    }
}

pub(crate) fn layer_mask(
    cfg: &ModelConfig,
    kind: LayerKind,
    seq: &AugmentedSequence,
) -> Result<VisibilityMask> {
    let augmented = seq.summary_count() > 0 || cfg.schedule().augments();
    match kind {
        LayerKind::Full => Ok(VisibilityMask::causal(seq.len())),
        LayerKind::Ksa => ksa_mask(seq, &cfg.ksa),
        LayerKind::Swa | LayerKind::Sca if augmented => Err(KsaError::Config(format!(
            "{kind} layers cannot share a stream with summary tokens"
        ))),
        LayerKind::Swa => swa_mask(seq.len(), cfg.swa_window),
        LayerKind::Sca => sca_mask(seq.len(), &cfg.ksa),
    }
}

pub(crate) fn build<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    branch: Option<&SummaryBranch<'_, T>>,
) -> Result<Built> {
    cfg.validate()?;
    if tokens.is_empty() {
        return Err(KsaError::Input("empty token sequence".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(KsaError::Input(format!(
            "token id {bad} outside vocabulary of {} (the summary id is reserved)",
            cfg.vocab_size
        )));
    }
    if params.layers.len() != cfg.layers {
        return Err(KsaError::Shape(format!(
            "{} layer parameter sets for {} layers",
            params.layers.len(),
            cfg.layers
        )));
    }
    let schedule = cfg.schedule();
    let seq = sequence_for(cfg, tokens.len());
    let ids: Vec<usize> = seq
        .roles()
        .iter()
        .map(|r| match *r {
            crate::masking::Role::Text(i) => tokens[i],
            crate::masking::Role::Summary(_) => cfg.summary_token(),
        })
        .collect();
    let positions: Vec<f64> = seq.positions().iter().map(|&p| p as f64).collect();
    let flags = seq.summary_flags();
    let has_summaries = seq.summary_count() > 0;

    let leaves: Vec<Var> = params
        .tensors()
        .into_iter()
        .map(|t| g.leaf(t.clone()))
        .collect();
    let emb = leaves[0];
    let layer_leaf = |l: usize, i: usize| leaves[1 + 8 * l + i];
    let final_norm = leaves[1 + 8 * cfg.layers];
    let lm_head = params.lm_head.as_ref().map(|_| leaves[2 + 8 * cfg.layers]);

    let mut proj_leaves = vec![None; cfg.layers];
    if let Some(b) = branch {
        if b.projections.layers.len() != cfg.layers {
            return Err(KsaError::Shape("summary projections per layer".into()));
        }
        for (l, p) in b.projections.layers.iter().enumerate() {
            if let Some(p) = p {
                if schedule.kinds()[l] == LayerKind::Ksa {
                    proj_leaves[l] = Some([
                        g.leaf(p.wq.clone()),
                        g.leaf(p.wk.clone()),
                        g.leaf(p.wv.clone()),
                    ]);
                }
            }
        }
    }

    let shape = AttnShape {
        heads: cfg.heads,
        kv_heads: cfg.kv_heads,
        head_dim: cfg.head_dim,
    };
    let mut masks: HashMap<LayerKind, Arc<MaskRows>> = HashMap::new();
    let mut x = g.gather(emb, &ids)?;
    let mut attn = Vec::with_capacity(cfg.layers);
    let mut qkv = Vec::with_capacity(cfg.layers);
    for (l, &kind) in schedule.kinds().iter().enumerate() {
        let mask = match masks.get(&kind) {
            Some(m) => m.clone(),
            None => {
                let m = MaskRows::new(&layer_mask(cfg, kind, &seq)?);
                masks.insert(kind, m.clone());
                m
            }
        };
        let h = g.rms_norm(x, layer_leaf(l, 0))?;
        let mut q = g.matmul(h, layer_leaf(l, 1))?;
        let mut k = g.matmul(h, layer_leaf(l, 2))?;
        let mut v = g.matmul(h, layer_leaf(l, 3))?;
        if let (Some([sq, sk, sv]), Some(b), true) = (proj_leaves[l], branch, has_summaries) {
            for (main, w) in [(&mut q, sq), (&mut k, sk), (&mut v, sv)] {
                let alt = g.matmul(h, w)?;
                let mixed = g.lerp(alt, *main, b.lambda)?;
                *main = g.merge_rows(*main, mixed, &flags)?;
            }
        }
        let q = g.rope(q, &positions, cfg.heads, cfg.rope)?;
        let k = g.rope(k, &positions, cfg.kv_heads, cfg.rope)?;
        qkv.push((q, k, v));
        let o = g.attention(q, k, v, mask, shape)?;
        attn.push(o);
        let proj = g.matmul(o, layer_leaf(l, 4))?;
        x = g.add(x, proj)?;
        let h = g.rms_norm(x, layer_leaf(l, 5))?;
        let up = g.matmul(h, layer_leaf(l, 6))?;
        let act = g.silu(up);
        let down = g.matmul(act, layer_leaf(l, 7))?;
        x = g.add(x, down)?;
    }
    let normed = g.rms_norm(x, final_norm)?;
    let hidden = if has_summaries {
        g.select_rows(normed, seq.text_positions())
    } else {
        normed
    };
    let head = match lm_head {
        Some(w) => w,
        None => {
            let rows = g.slice_rows(emb, 0, cfg.vocab_size);
            g.transpose(rows)?
        }
    };
    let logits = g.matmul(hidden, head)?;
    Ok(Built {
        logits,
        attn,
        qkv,
        hidden,
        sequence: seq,
        params: leaves,
        projections: proj_leaves,
    })
}

/// Logits over text positions and per-layer attention outputs.
pub fn forward<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
) -> Result<ForwardOutput<T>> {
    forward_with(cfg, params, tokens, None)
}

pub fn forward_with<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    branch: Option<&SummaryBranch<'_, T>>,
) -> Result<ForwardOutput<T>> {
    let mut g = Graph::new();
    let built = build(&mut g, cfg, params, tokens, branch)?;
    Ok(ForwardOutput {
        logits: g.value(built.logits).clone(),
        attn_outputs: built.attn.iter().map(|&v| g.value(v).clone()).collect(),
        final_hidden: g.value(built.hidden).clone(),
        sequence: built.sequence,
    })
}

/// Post-softmax weights (`h × len`) of augmented query `query` in `layer`,
/// together with the sequence layout.
pub fn attention_weights<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    tokens: &[usize],
    layer: usize,
    query: usize,
) -> Result<(Tensor<T>, AugmentedSequence)> {
    if layer >= cfg.layers {
        return Err(KsaError::OutOfRange {
            index: layer,
            len: cfg.layers,
        });
    }
    let mut g = Graph::new();
    let built = build(&mut g, cfg, params, tokens, None)?;
    let l = built.sequence.len();
    let (q, k, v) = built.qkv[layer];
    let (h, kv, d) = (cfg.heads, cfg.kv_heads, cfg.head_dim);
    let inputs = AttentionInputs::new(
        g.value(q).clone().reshape(&[l, h, d])?,
        g.value(k).clone().reshape(&[l, kv, d])?,
        g.value(v).clone().reshape(&[l, kv, d])?,
    )?;
    let mask = layer_mask(cfg, cfg.schedule().kinds()[layer], &built.sequence)?;
    Ok((attention_probe(&inputs, &mask, query)?, built.sequence))
}

/// Mean cross-entropy over rows that carry a target.
pub fn loss_lm<T: Scalar>(logits: &Tensor<T>, targets: &[Option<usize>]) -> Result<T> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(KsaError::Shape(format!(
            "{} targets for logits of shape {:?}",
            targets.len(),
            logits.shape()
        )));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            let row = logits.row(r);
            if t >= row.len() {
                return Err(KsaError::OutOfRange {
                    index: t,
                    len: row.len(),
                });
            }
            total += log_sum_exp(row) - row[t];
            count += 1;
        }
    }
    Ok(if count == 0 {
        T::zero()
    } else {
        total / T::lit(count as f64)
    })
}
