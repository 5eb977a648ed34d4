//! Decode-time summary KV cache.
//!
//! Per kv head, one arena holds four regions left to right:
//!
//! ```text
//! [scratch(1)][current chunk(k)][sliding ring(C·k)][summary buffer(capacity)]
//! ```
//!
//! The current chunk fills right to left so its occupied slots always touch
//! the ring. The ring is full whenever a summary is visible, so the visible
//! set (current chunk, ring, oldest `m − C` summaries) is one contiguous
//! range. Keys are stored already rotated; physical order inside the ring and
//! the current chunk carries no meaning.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{attend_single, dense_masked_attention, AttentionInputs};
use crate::error::{KsaError, Result};
use crate::masking::{augment, ksa_mask, Entry, KsaConfig, Role};
use crate::numerics::{matmul, rope_apply, RopeConfig, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    Scratch,
    CurrentChunk,
    SlidingRing,
    SummaryBuffer,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceRange {
    /// Slot offset inside each kv head's arena.
    pub start: usize,
    pub len: usize,
    /// Regions the range passes through, left to right.
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SliceDescriptor {
    pub ranges: Vec<SliceRange>,
    /// Covered entries in arena order.
    pub entries: Vec<Entry>,
}

impl SliceDescriptor {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn roles(&self) -> Vec<Role> {
        self.entries.iter().map(|e| e.role).collect()
    }
}

/// Rotated query/key/value of one token: `q: h×d`, `k`/`v: h_kv×d`.
#[derive(Debug, Clone)]
pub struct TokenQkv<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct DecodeOutput<T> {
    /// Attention output of the text token, `h×d`.
    pub output: Tensor<T>,
    /// Attention output of the summary finalized before this token, if any.
    pub summary_output: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CacheState {
    pub k: usize,
    #[serde(rename = "C")]
    pub c: usize,
    pub m: usize,
    pub current_fill: usize,
    pub ring_write_chunk: usize,
    pub entries: usize,
    pub visible_summaries: usize,
}

#[derive(Debug, Clone)]
pub struct KsaKvCache<T> {
    cfg: KsaConfig,
    heads: usize,
    kv_heads: usize,
    head_dim: usize,
    summary_capacity: usize,
    slots: usize,
    keys: Vec<T>,
    values: Vec<T>,
    meta: Vec<Option<Entry>>,
    current_fill: usize,
    ring_write_chunk: usize,
    complete_chunks: usize,
    text_count: usize,
}

impl<T: Scalar> KsaKvCache<T> {
    pub fn new(
        cfg: KsaConfig,
        max_text_tokens: usize,
        heads: usize,
        kv_heads: usize,
        head_dim: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        if max_text_tokens == 0 {
            return Err(KsaError::Config(
                "max_text_tokens must be at least 1".into(),
            ));
        }
        if kv_heads == 0 || head_dim == 0 || !heads.is_multiple_of(kv_heads) {
            return Err(KsaError::Config(format!(
                "invalid head layout: {heads} heads, {kv_heads} kv heads, dim {head_dim}"
            )));
        }
        let k = cfg.chunk_size;
        let summary_capacity = max_text_tokens / k;
        let overflow = || KsaError::Config("cache arena size overflows".into());
        let ring = cfg.sliding_chunks.checked_mul(k).ok_or_else(overflow)?;
        let slots = (1 + k)
            .checked_add(ring)
            .and_then(|s| s.checked_add(summary_capacity))
            .ok_or_else(overflow)?;
        let elems = slots
            .checked_mul(kv_heads)
            .and_then(|s| s.checked_mul(head_dim))
            .filter(|&e| e <= isize::MAX as usize / std::mem::size_of::<T>())
            .ok_or_else(overflow)?;
        Ok(Self {
            cfg,
            heads,
            kv_heads,
            head_dim,
            summary_capacity,
            slots,
            keys: vec![T::zero(); elems],
            values: vec![T::zero(); elems],
            meta: vec![None; slots],
            current_fill: 0,
            ring_write_chunk: 0,
            complete_chunks: 0,
            text_count: 0,
        })
    }

    pub fn config(&self) -> &KsaConfig {
        &self.cfg
    }

    /// Slot counts of (scratch, current chunk, ring, summary buffer).
    pub fn region_sizes(&self) -> (usize, usize, usize, usize) {
        let k = self.cfg.chunk_size;
        (1, k, self.cfg.sliding_chunks * k, self.summary_capacity)
    }

    fn current_start(&self) -> usize {
        1
    }

    fn ring_start(&self) -> usize {
        1 + self.cfg.chunk_size
    }

    fn summary_start(&self) -> usize {
        self.ring_start() + self.cfg.sliding_chunks * self.cfg.chunk_size
    }

    fn region_of(&self, slot: usize) -> Region {
        if slot == 0 {
            Region::Scratch
        } else if slot < self.ring_start() {
            Region::CurrentChunk
        } else if slot < self.summary_start() {
            Region::SlidingRing
        } else {
            Region::SummaryBuffer
        }
    }

    pub fn current_fill(&self) -> usize {
        self.current_fill
    }

    pub fn complete_chunks(&self) -> usize {
        self.complete_chunks
    }

    pub fn summary_count(&self) -> usize {
        self.complete_chunks
    }

    pub fn ring_write_chunk(&self) -> usize {
        self.ring_write_chunk
    }

    pub fn text_count(&self) -> usize {
        self.text_count
    }

    pub fn visible_summaries(&self) -> usize {
        self.complete_chunks.saturating_sub(self.cfg.sliding_chunks)
    }

    /// True when the current chunk is full and must be finalized before the
    /// next text token.
    pub fn pending_finalize(&self) -> bool {
        self.current_fill == self.cfg.chunk_size
    }

    fn check_vec(&self, t: &Tensor<T>, rows: usize, what: &str) -> Result<()> {
        if t.len() != rows * self.head_dim {
            return Err(KsaError::Shape(format!(
                "{what}: expected {rows}×{} values, got shape {:?}",
                self.head_dim,
                t.shape()
            )));
        }
        Ok(())
    }

    fn write_slot(&mut self, slot: usize, key: &Tensor<T>, value: &Tensor<T>) {
        let d = self.head_dim;
        for g in 0..self.kv_heads {
            let dst = (g * self.slots + slot) * d;
            self.keys[dst..dst + d].copy_from_slice(&key.data()[g * d..(g + 1) * d]);
            self.values[dst..dst + d].copy_from_slice(&value.data()[g * d..(g + 1) * d]);
        }
    }

    fn copy_slots(&mut self, from: usize, to: usize, count: usize) {
        let d = self.head_dim;
        for g in 0..self.kv_heads {
            let src = (g * self.slots + from) * d;
            let dst = (g * self.slots + to) * d;
            self.keys.copy_within(src..src + count * d, dst);
            self.values.copy_within(src..src + count * d, dst);
        }
        self.meta.copy_within(from..from + count, to);
    }

    /// Writes a rotated key/value (`h_kv×d` each) into the next current-chunk slot.
    pub fn append_text(&mut self, key: &Tensor<T>, value: &Tensor<T>) -> Result<()> {
        let k = self.cfg.chunk_size;
        if self.current_fill >= k {
            return Err(KsaError::ChunkOverflow(self.current_fill));
        }
        self.check_vec(key, self.kv_heads, "key")?;
        self.check_vec(value, self.kv_heads, "value")?;
        let slot = self.current_start() + k - 1 - self.current_fill;
        self.write_slot(slot, key, value);
        self.meta[slot] = Some(Entry {
            role: Role::Text(self.text_count),
            position: self.text_count,
        });
        self.current_fill += 1;
        self.text_count += 1;
        Ok(())
    }

    /// Closes the full current chunk: runs the summary query over the chunk,
    /// stages its KV in the scratch slot, recycles the chunk into the ring and
    /// commits the summary to the buffer. Returns the summary attention output.
    pub fn finalize_chunk(&mut self, summary: &TokenQkv<T>) -> Result<Tensor<T>> {
        let k = self.cfg.chunk_size;
        if self.current_fill != k {
            return Err(KsaError::PrematureFinalize {
                fill: self.current_fill,
                chunk_size: k,
            });
        }
        if self.complete_chunks >= self.summary_capacity {
            return Err(KsaError::SummaryBufferFull(self.summary_capacity));
        }
        self.check_vec(&summary.q, self.heads, "summary query")?;

        let output = self.attend_range(&summary.q, self.current_start(), k)?;

        let j = self.complete_chunks;
        self.write_slot(0, &summary.k, &summary.v);
        self.meta[0] = Some(Entry {
            role: Role::Summary(j),
            position: self.text_count - 1,
        });

        let c = self.cfg.sliding_chunks;
        if c > 0 {
            let dst = self.ring_start() + self.ring_write_chunk * k;
            self.copy_slots(self.current_start(), dst, k);
            self.ring_write_chunk = (self.ring_write_chunk + 1) % c;
        }

        self.copy_slots(0, self.summary_start() + j, 1);
        self.meta[0] = None;
        for slot in self.current_start()..self.ring_start() {
            self.meta[slot] = None;
        }
        self.complete_chunks += 1;
        self.current_fill = 0;
        Ok(output)
    }

    /// Slots attended by the next text query of the current chunk.
    pub fn read_visible(&self) -> SliceDescriptor {
        let k = self.cfg.chunk_size;
        let c = self.cfg.sliding_chunks;
        let start = self.current_start() + k - self.current_fill;
        let end = self.ring_start() + self.complete_chunks.min(c) * k + self.visible_summaries();
        if start == end {
            return SliceDescriptor::default();
        }
        let mut regions: Vec<Region> = Vec::new();
        for slot in start..end {
            let r = self.region_of(slot);
            if regions.last() != Some(&r) {
                regions.push(r);
            }
        }
        SliceDescriptor {
            ranges: vec![SliceRange {
                start,
                len: end - start,
                regions,
            }],
            entries: (start..end)
                .map(|s| self.meta[s].expect("visible slot is occupied"))
                .collect(),
        }
    }

    fn attend_range(&self, q: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let d = self.head_dim;
        let group = self.heads / self.kv_heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut out = Tensor::zeros(&[self.heads, d]);
        for h in 0..self.heads {
            let g = h / group;
            let base = (g * self.slots + start) * d;
            let keys = &self.keys[base..base + len * d];
            let values = &self.values[base..base + len * d];
            attend_single(
                &q.data()[h * d..(h + 1) * d],
                keys,
                values,
                scale,
                out.row_mut(h),
            )?;
        }
        Ok(out)
    }

    /// One decode step for a text token: finalizes a pending chunk first
    /// (which requires `summary`), appends the token, and attends over the
    /// visible slice.
    pub fn decode_attention(
        &mut self,
        token: &TokenQkv<T>,
        summary: Option<&TokenQkv<T>>,
    ) -> Result<DecodeOutput<T>> {
        self.check_vec(&token.q, self.heads, "query")?;
        let summary_output = match (self.pending_finalize(), summary) {
            (true, Some(s)) => Some(self.finalize_chunk(s)?),
            (true, None) => return Err(KsaError::MissingSummary),
            (false, Some(_)) => return Err(KsaError::UnexpectedSummary),
            (false, None) => None,
        };
        self.append_text(&token.k, &token.v)?;
        let ranges = self.read_visible().ranges;
        debug_assert_eq!(ranges.len(), 1);
        let output = self.attend_range(&token.q, ranges[0].start, ranges[0].len)?;
        Ok(DecodeOutput {
            output,
            summary_output,
        })
    }

    /// Stored entries per kv head and direction: current chunk, ring and all
    /// committed summaries.
    pub fn cache_entries(&self) -> usize {
        self.current_fill
            + self.complete_chunks.min(self.cfg.sliding_chunks) * self.cfg.chunk_size
            + self.complete_chunks
    }

    /// Independent recount from slot metadata.
    pub fn occupied_slots(&self) -> usize {
        self.meta.iter().filter(|m| m.is_some()).count()
    }

    /// Cyclically shifts ring chunks by `shift` and moves the write pointer
    /// with them, preserving which chunk is evicted next.
    pub fn rotate_ring(&mut self, shift: usize) -> Result<()> {
        let c = self.cfg.sliding_chunks;
        if c == 0 {
            return Ok(());
        }
        if self.complete_chunks < c {
            return Err(KsaError::Config(
                "ring can only be rotated once full".into(),
            ));
        }
        let k = self.cfg.chunk_size;
        let d = self.head_dim;
        let span = c * k;
        let rs = self.ring_start();
        let by = (shift % c) * k;
        for g in 0..self.kv_heads {
            let base = (g * self.slots + rs) * d;
            self.keys[base..base + span * d].rotate_right(by * d);
            self.values[base..base + span * d].rotate_right(by * d);
        }
        self.meta[rs..rs + span].rotate_right(by);
        self.ring_write_chunk = (self.ring_write_chunk + shift) % c;
        Ok(())
    }

    pub fn state(&self) -> CacheState {
        CacheState {
            k: self.cfg.chunk_size,
            c: self.cfg.sliding_chunks,
            m: self.complete_chunks,
            current_fill: self.current_fill,
            ring_write_chunk: self.ring_write_chunk,
            entries: self.cache_entries(),
            visible_summaries: self.visible_summaries(),
        }
    }
}

/// Shapes of the random single-layer model used by [`prefill_equivalence`].
#[derive(Debug, Clone, Copy)]
pub struct EquivalenceSetup {
    pub d_model: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub rope_theta: f64,
}

impl Default for EquivalenceSetup {
    fn default() -> Self {
        Self {
            d_model: 16,
            heads: 4,
            kv_heads: 2,
            head_dim: 8,
            rope_theta: 10_000.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub max_delta: f64,
    pub text_steps: usize,
    pub boundary_steps: usize,
    pub summary_rows: usize,
}

/// Projected, rotated q/k/v rows of the whole augmented sequence.
struct LayerActivations<T> {
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
}

impl<T: Scalar> LayerActivations<T> {
    fn token(&self, idx: usize, setup: &EquivalenceSetup) -> Result<TokenQkv<T>> {
        let d = setup.head_dim;
        Ok(TokenQkv {
            q: Tensor::new(vec![setup.heads, d], self.q.row(idx).to_vec())?,
            k: Tensor::new(vec![setup.kv_heads, d], self.k.row(idx).to_vec())?,
            v: Tensor::new(vec![setup.kv_heads, d], self.v.row(idx).to_vec())?,
        })
    }
}

fn random_layer<T: Scalar>(
    n: usize,
    cfg: &KsaConfig,
    setup: &EquivalenceSetup,
    seed: u64,
) -> Result<(crate::masking::AugmentedSequence, LayerActivations<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mat = |r: usize, c: usize, s: f64| {
        Tensor::<T>::from_fn(&[r, c], |_| T::lit(rng.random_range(-s..s)))
    };
    let dm = setup.d_model;
    let (h, g, d) = (setup.heads, setup.kv_heads, setup.head_dim);
    let w_scale = (3.0 / dm as f64).sqrt();
    let wq = mat(dm, h * d, w_scale);
    let wk = mat(dm, g * d, w_scale);
    let wv = mat(dm, g * d, w_scale);
    let summary_embedding = mat(1, dm, 1.0);
    let text_hidden = mat(n.max(1), dm, 1.0);

    let aug = augment(n, cfg);
    let mut hidden = Tensor::<T>::zeros(&[aug.len(), dm]);
    for (idx, e) in aug.entries().iter().enumerate() {
        let src = match e.role {
            Role::Text(i) => text_hidden.row(i),
            Role::Summary(_) => summary_embedding.row(0),
        };
        hidden.row_mut(idx).copy_from_slice(src);
    }
    let rope = RopeConfig::new(setup.rope_theta, d)?;
    let positions: Vec<i64> = aug.positions().iter().map(|&p| p as i64).collect();
    let l = aug.len();
    let q = rope_apply(
        &matmul(&hidden, &wq)?.reshape(&[l, h, d])?,
        &positions,
        &rope,
    )?;
    let k = rope_apply(
        &matmul(&hidden, &wk)?.reshape(&[l, g, d])?,
        &positions,
        &rope,
    )?;
    let v = matmul(&hidden, &wv)?.reshape(&[l, g, d])?;
    Ok((aug, LayerActivations { q, k, v }))
}

/// Runs a random single attention layer both ways: dense prefill over the
/// summary mask, and token-by-token decode through [`KsaKvCache`]. Reports
/// the largest absolute difference over every text and summary row.
///
/// `rotate_every`, when set, cyclically shifts the ring by one chunk after
/// that many text steps (once the ring is full).
pub fn prefill_equivalence<T: Scalar>(
    n: usize,
    cfg: &KsaConfig,
    setup: &EquivalenceSetup,
    seed: u64,
    rotate_every: Option<usize>,
) -> Result<EquivalenceReport> {
    let (aug, acts) = random_layer::<T>(n, cfg, setup, seed)?;
    let inputs = AttentionInputs::new(acts.q.clone(), acts.k.clone(), acts.v.clone())?;
    let prefill = dense_masked_attention(&inputs, &ksa_mask(&aug, cfg)?)?;

    let mut cache =
        KsaKvCache::<T>::new(*cfg, n.max(1), setup.heads, setup.kv_heads, setup.head_dim)?;
    let mut report = EquivalenceReport {
        max_delta: 0.0,
        text_steps: 0,
        boundary_steps: 0,
        summary_rows: 0,
    };
    let track = |got: &Tensor<T>, row: usize| {
        let want = prefill.row(row);
        let delta = got
            .data()
            .iter()
            .zip(want)
            .fold(0.0f64, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()));
        delta
    };
    for i in 0..n {
        let pending = if cache.pending_finalize() {
            let j = cache.complete_chunks();
            Some((j, acts.token(aug.summary_index(j), setup)?))
        } else {
            None
        };
        let step = cache.decode_attention(
            &acts.token(aug.text_index(i), setup)?,
            pending.as_ref().map(|(_, s)| s),
        )?;
        if let (Some((j, _)), Some(out)) = (&pending, &step.summary_output) {
            report.max_delta = report.max_delta.max(track(out, aug.summary_index(*j)));
            report.boundary_steps += 1;
            report.summary_rows += 1;
        }
        report.max_delta = report.max_delta.max(track(&step.output, aug.text_index(i)));
        report.text_steps += 1;
        if let Some(every) = rotate_every {
            if every > 0 && (i + 1) % every == 0 && cache.complete_chunks() >= cfg.sliding_chunks {
                cache.rotate_ring(1)?;
            }
        }
    }
    if cache.pending_finalize() {
        let j = cache.complete_chunks();
        let out = cache.finalize_chunk(&acts.token(aug.summary_index(j), setup)?)?;
        report.max_delta = report.max_delta.max(track(&out, aug.summary_index(j)));
        report.summary_rows += 1;
    }
    Ok(report)
}
