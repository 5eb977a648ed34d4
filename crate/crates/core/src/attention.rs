//! Masked multi-head attention: a dense reference and a block-sparse engine
//! that only visits the nonzero tiles of a [`BlockSparseMask`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{KsaError, Result};
use crate::masking::{
    augment, blockify, ksa_mask, sca_mask, swa_mask, BlockKind, BlockSparseMask, KsaConfig, Role,
    VisibilityMask,
};
use crate::numerics::{dot, softmax_in_place, Tensor};
use crate::scalar::Scalar;

/// `q: L×h×d`, `k`/`v: L×h_kv×d`. Query head `i` reads kv head `group_map[i]`.
#[derive(Debug, Clone)]
pub struct AttentionInputs<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub scale: T,
    pub group_map: Vec<usize>,
}

impl<T: Scalar> AttentionInputs<T> {
    /// Default `1/√d` scale and contiguous GQA grouping.
    pub fn new(q: Tensor<T>, k: Tensor<T>, v: Tensor<T>) -> Result<Self> {
        let (heads, kv_heads, d) = match (q.shape(), k.shape()) {
            ([_, h, d], [_, g, _]) => (*h, *g, *d),
            _ => return Err(KsaError::Shape("attention expects rank-3 q/k/v".into())),
        };
        if kv_heads == 0 || heads % kv_heads != 0 {
            return Err(KsaError::Shape(format!(
                "{heads} query heads not divisible by {kv_heads} kv heads"
            )));
        }
        let group = heads / kv_heads;
        let inputs = Self {
            q,
            k,
            v,
            scale: T::one() / T::lit(d as f64).sqrt(),
            group_map: (0..heads).map(|h| h / group).collect(),
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn seq_len(&self) -> usize {
        self.q.rows()
    }

    pub fn heads(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn kv_heads(&self) -> usize {
        self.k.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.q.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let [l, h, d] = self.q.shape()[..] else {
            return Err(KsaError::Shape("q must be L×h×d".into()));
        };
        let [lk, g, dk] = self.k.shape()[..] else {
            return Err(KsaError::Shape("k must be L×h_kv×d".into()));
        };
        if self.v.shape() != self.k.shape() || lk != l || dk != d {
            return Err(KsaError::Shape(format!(
                "q {:?}, k {:?}, v {:?}",
                self.q.shape(),
                self.k.shape(),
                self.v.shape()
            )));
        }
        if g == 0 || h % g != 0 {
            return Err(KsaError::Shape(format!(
                "{h} heads not divisible by {g} kv heads"
            )));
        }
        if self.group_map.len() != h || self.group_map.iter().any(|&x| x >= g) {
            return Err(KsaError::Shape("invalid group map".into()));
        }
        if !(self.scale > T::zero()) {
            return Err(KsaError::Config("attention scale must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    fn q_vec(&self, pos: usize, head: usize) -> &[T] {
        let d = self.head_dim();
        let off = (pos * self.heads() + head) * d;
        &self.q.data()[off..off + d]
    }

    #[inline]
    fn k_vec(&self, pos: usize, head: usize) -> &[T] {
        let d = self.head_dim();
        let off = (pos * self.kv_heads() + head) * d;
        &self.k.data()[off..off + d]
    }

    #[inline]
    fn v_vec(&self, pos: usize, head: usize) -> &[T] {
        let d = self.head_dim();
        let off = (pos * self.kv_heads() + head) * d;
        &self.v.data()[off..off + d]
    }
}

/// Softmax-weighted mix for one query over an explicit key list.
/// `keys`/`values` are `len×d` flat slices in the order to accumulate.
pub(crate) fn attend_single<T: Scalar>(
    q: &[T],
    keys: &[T],
    values: &[T],
    scale: T,
    out: &mut [T],
) -> Result<()> {
    let d = q.len();
    let len = keys.len() / d;
    if len == 0 {
        return Err(KsaError::EmptyAttentionRow(0));
    }
    let mut w: Vec<T> = (0..len)
        .map(|j| dot(q, &keys[j * d..(j + 1) * d]) * scale)
        .collect();
    softmax_in_place(&mut w)?;
    out.iter_mut().for_each(|o| *o = T::zero());
    for (j, &p) in w.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(&values[j * d..(j + 1) * d]) {
            *o += p * v;
        }
    }
    Ok(())
}

fn check_mask<T: Scalar>(inputs: &AttentionInputs<T>, size: usize) -> Result<()> {
    inputs.validate()?;
    if size != inputs.seq_len() {
        return Err(KsaError::Shape(format!(
            "mask size {size} vs sequence length {}",
            inputs.seq_len()
        )));
    }
    Ok(())
}

/// Post-softmax weights of query `q` for one head over all `L` keys.
fn head_weights<T: Scalar>(
    inputs: &AttentionInputs<T>,
    mask: &VisibilityMask,
    q: usize,
    head: usize,
) -> Result<Vec<T>> {
    let g = inputs.group_map[head];
    let qv = inputs.q_vec(q, head);
    let mut w: Vec<T> = (0..mask.size())
        .map(|kv| {
            if mask.get(q, kv) {
                dot(qv, inputs.k_vec(kv, g)) * inputs.scale
            } else {
                T::neg_infinity()
            }
        })
        .collect();
    softmax_in_place(&mut w).map_err(|e| match e {
        KsaError::EmptyAttentionRow(_) => KsaError::EmptyAttentionRow(q),
        other => other,
    })?;
    Ok(w)
}

/// Reference masked attention: `softmax(q·kᵀ·scale + mask) v` per head.
pub fn dense_masked_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    mask: &VisibilityMask,
) -> Result<Tensor<T>> {
    check_mask(inputs, mask.size())?;
    let (l, h, d) = (inputs.seq_len(), inputs.heads(), inputs.head_dim());
    let mut out = Tensor::zeros(&[l, h, d]);
    for q in 0..l {
        for head in 0..h {
            let w = head_weights(inputs, mask, q, head)?;
            let g = inputs.group_map[head];
            let orow = &mut out.data_mut()[(q * h + head) * d..(q * h + head + 1) * d];
            for (kv, &p) in w.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                for (o, &v) in orow.iter_mut().zip(inputs.v_vec(kv, g)) {
                    *o += p * v;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BlockVisitStats {
    pub visited_blocks: usize,
    pub full_blocks: usize,
    pub partial_blocks: usize,
}

/// Block-sparse attention with a streaming softmax.
pub fn block_sparse_attention<T: Scalar>(
    inputs: &AttentionInputs<T>,
    bmask: &BlockSparseMask,
) -> Result<Tensor<T>> {
    block_sparse_attention_counted(inputs, bmask).map(|(t, _)| t)
}

/// Like [`block_sparse_attention`], also reporting which tiles were visited.
///
/// Each query keeps a running max, a running denominator and an unnormalised
/// accumulator; tiles are consumed in `kb` order. Full tiles skip masking;
/// partial tiles apply their bitmask as a `-inf` bias.
pub fn block_sparse_attention_counted<T: Scalar>(
    inputs: &AttentionInputs<T>,
    bmask: &BlockSparseMask,
) -> Result<(Tensor<T>, BlockVisitStats)> {
    check_mask(inputs, bmask.size())?;
    let (l, h, d) = (inputs.seq_len(), inputs.heads(), inputs.head_dim());
    let mut out = Tensor::zeros(&[l, h, d]);
    let mut stats = BlockVisitStats::default();

    let blocks = bmask.blocks();
    let mut start = 0;
    while start < blocks.len() {
        let qb = blocks[start].qb;
        let end = start + blocks[start..].iter().take_while(|b| b.qb == qb).count();
        let row_blocks = &blocks[start..end];
        let (rows, _) = bmask.tile_extent(qb, 0);
        let nrows = rows.len();

        // Running state per (query row in tile, head).
        let mut run_max = vec![T::neg_infinity(); nrows * h];
        let mut run_den = vec![T::zero(); nrows * h];
        let mut acc = vec![T::zero(); nrows * h * d];
        let mut scores = Vec::new();

        for blk in row_blocks {
            stats.visited_blocks += 1;
            match blk.kind {
                BlockKind::Full => stats.full_blocks += 1,
                BlockKind::Partial(_) => stats.partial_blocks += 1,
            }
            let (_, cols) = bmask.tile_extent(blk.qb, blk.kb);
            let width = cols.len();
            for (r, q) in rows.clone().enumerate() {
                for head in 0..h {
                    let g = inputs.group_map[head];
                    let qv = inputs.q_vec(q, head);
                    scores.clear();
                    for (c, kv) in cols.clone().enumerate() {
                        let visible = match &blk.kind {
                            BlockKind::Full => true,
                            BlockKind::Partial(bits) => bits[r * width + c],
                        };
                        scores.push(if visible {
                            dot(qv, inputs.k_vec(kv, g)) * inputs.scale
                        } else {
                            T::neg_infinity()
                        });
                    }
                    let tile_max = scores.iter().copied().fold(T::neg_infinity(), T::max);
                    if tile_max == T::neg_infinity() {
                        continue;
                    }
                    let slot = r * h + head;
                    let new_max = run_max[slot].max(tile_max);
                    let correction = if run_max[slot] == T::neg_infinity() {
                        T::zero()
                    } else {
                        (run_max[slot] - new_max).exp()
                    };
                    let a = &mut acc[slot * d..(slot + 1) * d];
                    a.iter_mut().for_each(|x| *x *= correction);
                    let mut den = run_den[slot] * correction;
                    for (c, kv) in cols.clone().enumerate() {
                        let s = scores[c];
                        if s == T::neg_infinity() {
                            continue;
                        }
                        let p = (s - new_max).exp();
                        den += p;
                        for (x, &v) in a.iter_mut().zip(inputs.v_vec(kv, g)) {
                            *x += p * v;
                        }
                    }
                    run_den[slot] = den;
                    run_max[slot] = new_max;
                }
            }
        }

        for (r, q) in rows.enumerate() {
            for head in 0..h {
                let slot = r * h + head;
                if run_max[slot] == T::neg_infinity() {
                    return Err(KsaError::EmptyAttentionRow(q));
                }
                let inv = T::one() / run_den[slot];
                let o = &mut out.data_mut()[(q * h + head) * d..(q * h + head + 1) * d];
                for (x, &a) in o.iter_mut().zip(&acc[slot * d..(slot + 1) * d]) {
                    *x = a * inv;
                }
            }
        }
        start = end;
    }

    // Query tiles absent from the list have no visible keys at all.
    let covered: std::collections::BTreeSet<usize> = blocks.iter().map(|b| b.qb).collect();
    for qb in 0..bmask.block_rows() {
        if !covered.contains(&qb) {
            let (rows, _) = bmask.tile_extent(qb, 0);
            return Err(KsaError::EmptyAttentionRow(rows.start));
        }
    }
    Ok((out, stats))
}

/// Post-softmax weights of one query: `h×L`, zero where masked.
pub fn attention_probe<T: Scalar>(
    inputs: &AttentionInputs<T>,
    mask: &VisibilityMask,
    query_index: usize,
) -> Result<Tensor<T>> {
    check_mask(inputs, mask.size())?;
    if query_index >= inputs.seq_len() {
        return Err(KsaError::OutOfRange {
            index: query_index,
            len: inputs.seq_len(),
        });
    }
    let (l, h) = (inputs.seq_len(), inputs.heads());
    let mut data = Vec::with_capacity(h * l);
    for head in 0..h {
        data.extend(head_weights(inputs, mask, query_index, head)?);
    }
    Tensor::new(vec![h, l], data)
}

/// `key_index,role,weight` rows for keys up to and including the query.
pub fn probe_csv<T: Scalar>(weights: &[T], roles: &[Role], query_index: usize) -> String {
    let mut s = String::from("key_index,role,weight\n");
    for kv in 0..=query_index.min(weights.len().saturating_sub(1)) {
        s.push_str(&format!("{kv},{},{}\n", roles[kv].label(), weights[kv]));
    }
    s
}

/// Uniform `±1.5` inputs for oracle comparisons: `q: L×h×d`, `k`/`v: L×g×d`.
pub fn random_inputs<T: Scalar>(
    seed: u64,
    l: usize,
    h: usize,
    g: usize,
    d: usize,
) -> Result<AttentionInputs<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.random_range(-1.5..1.5)));
    let q = t(&[l, h, d]);
    let k = t(&[l, g, d]);
    let v = t(&[l, g, d]);
    AttentionInputs::new(q, k, v)
}

/// Largest `|block_sparse − dense|` over the full-causal, SWA (window `C·k`,
/// at least 1), SCA and summary masks of `n` text tokens, for every block
/// size in `block_sizes`.
pub fn block_sparse_equivalence<T: Scalar>(
    n: usize,
    cfg: &KsaConfig,
    block_sizes: &[usize],
    seed: u64,
) -> Result<f64> {
    let aug = augment(n, cfg);
    let masks = [
        (VisibilityMask::causal(n), n),
        (
            swa_mask(n, (cfg.sliding_chunks * cfg.chunk_size).max(1))?,
            n,
        ),
        (sca_mask(n, cfg)?, n),
        (ksa_mask(&aug, cfg)?, aug.len()),
    ];
    let mut worst = 0.0f64;
    for (i, (mask, l)) in masks.iter().enumerate() {
        let inputs = random_inputs::<T>(seed.wrapping_mul(4).wrapping_add(i as u64), *l, 4, 2, 8)?;
        let dense = dense_masked_attention(&inputs, mask)?;
        for &b in block_sizes {
            let sparse = block_sparse_attention(&inputs, &blockify(mask, b)?)?;
            worst = worst.max(sparse.max_abs_diff(&dense).as_f64());
        }
    }
    Ok(worst)
}
