//! Summary-augmented sequences and visibility masks.
//!
//! Text token `t_i` lives in chunk `i / k`. Every complete chunk `j` is
//! followed by its summary `s_j`, which shares the position id of the chunk's
//! last text token. A trailing partial chunk carries no summary.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{KsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KsaConfig {
    /// Tokens per chunk (`k`).
    pub chunk_size: usize,
    /// Number of complete past chunks kept as raw text (`C`).
    pub sliding_chunks: usize,
    /// Tile size used by the block-sparse engine.
    pub block_size: usize,
}

impl Default for KsaConfig {
    fn default() -> Self {
        Self {
            chunk_size: 8,
            sliding_chunks: 128,
            block_size: 64,
        }
    }
}

impl KsaConfig {
    pub fn new(chunk_size: usize, sliding_chunks: usize, block_size: usize) -> Result<Self> {
        let cfg = Self {
            chunk_size,
            sliding_chunks,
            block_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(KsaError::Config("chunk size must be at least 1".into()));
        }
        if self.block_size == 0 {
            return Err(KsaError::Config("block size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn chunk_of(&self, text_index: usize) -> usize {
        text_index / self.chunk_size
    }

    /// First text index inside the sliding window of text token `i`.
    pub fn window_start(&self, i: usize) -> usize {
        self.chunk_of(i).saturating_sub(self.sliding_chunks) * self.chunk_size
    }

    /// Number of distant summaries visible to text token `i`.
    pub fn visible_summaries(&self, i: usize) -> usize {
        self.chunk_of(i).saturating_sub(self.sliding_chunks)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Text(usize),
    Summary(usize),
}

impl Role {
    pub fn is_summary(self) -> bool {
        matches!(self, Role::Summary(_))
    }

    pub fn label(self) -> String {
        match self {
            Role::Text(i) => format!("t{i}"),
            Role::Summary(j) => format!("s{j}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    pub role: Role,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSequence {
    n: usize,
    chunk_size: usize,
    entries: Vec<Entry>,
    text_to_aug: Vec<usize>,
    summary_to_aug: Vec<usize>,
}

/// Lays out `n` text tokens with one summary after every complete chunk.
pub fn augment(n: usize, cfg: &KsaConfig) -> AugmentedSequence {
    let k = cfg.chunk_size;
    let mut entries = Vec::with_capacity(n + n / k);
    let mut text_to_aug = Vec::with_capacity(n);
    let mut summary_to_aug = Vec::with_capacity(n / k);
    for i in 0..n {
        text_to_aug.push(entries.len());
        entries.push(Entry {
            role: Role::Text(i),
            position: i,
        });
        if (i + 1) % k == 0 {
            summary_to_aug.push(entries.len());
            entries.push(Entry {
                role: Role::Summary(i / k),
                position: i,
            });
        }
    }
    AugmentedSequence {
        n,
        chunk_size: k,
        entries,
        text_to_aug,
        summary_to_aug,
    }
}

impl AugmentedSequence {
    /// Plain text sequence with no summaries (used by Full/SWA/SCA layers).
    pub fn plain(n: usize) -> Self {
        Self {
            n,
            chunk_size: usize::MAX,
            entries: (0..n)
                .map(|i| Entry {
                    role: Role::Text(i),
                    position: i,
                })
                .collect(),
            text_to_aug: (0..n).collect(),
            summary_to_aug: Vec::new(),
        }
    }

    pub fn text_len(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn roles(&self) -> Vec<Role> {
        self.entries.iter().map(|e| e.role).collect()
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn summary_count(&self) -> usize {
        self.summary_to_aug.len()
    }

    pub fn text_index(&self, i: usize) -> usize {
        self.text_to_aug[i]
    }

    pub fn summary_index(&self, j: usize) -> usize {
        self.summary_to_aug[j]
    }

    /// Augmented indices of text tokens, in text order.
    pub fn text_positions(&self) -> &[usize] {
        &self.text_to_aug
    }

    /// Per augmented index: is it a summary slot.
    pub fn summary_flags(&self) -> Vec<bool> {
        self.entries.iter().map(|e| e.role.is_summary()).collect()
    }

    pub fn position_of(&self, role: Role) -> Option<usize> {
        match role {
            Role::Text(i) => self.text_to_aug.get(i).copied(),
            Role::Summary(j) => self.summary_to_aug.get(j).copied(),
        }
    }

    fn check_chunk(&self, cfg: &KsaConfig) -> Result<()> {
        if !self.summary_to_aug.is_empty() && self.chunk_size != cfg.chunk_size {
            return Err(KsaError::Config(format!(
                "sequence augmented with k={} used with k={}",
                self.chunk_size, cfg.chunk_size
            )));
        }
        Ok(())
    }
}

/// Dense boolean visibility grid; `get(q, kv)` is true iff query `q` may attend key `kv`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisibilityMask {
    size: usize,
    bits: Vec<bool>,
}

impl VisibilityMask {
    pub fn empty(size: usize) -> Self {
        Self {
            size,
            bits: vec![false; size * size],
        }
    }

    pub fn from_fn(size: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::empty(size);
        for q in 0..size {
            for kv in 0..size {
                m.bits[q * size + kv] = f(q, kv);
            }
        }
        m
    }

    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, |q, kv| kv <= q)
    }

    pub fn identity(size: usize) -> Self {
        Self::from_fn(size, |q, kv| kv == q)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, q: usize, kv: usize) -> bool {
        self.bits[q * self.size + kv]
    }

    pub fn set(&mut self, q: usize, kv: usize, v: bool) {
        self.bits[q * self.size + kv] = v;
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.bits[q * self.size..(q + 1) * self.size]
    }

    /// Indices of visible keys for query `q`, ascending.
    pub fn visible(&self, q: usize) -> Vec<usize> {
        self.row(q)
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn row_count(&self, q: usize) -> usize {
        self.row(q).iter().filter(|&&b| b).count()
    }

    pub fn is_causal(&self) -> bool {
        (0..self.size).all(|q| (q + 1..self.size).all(|kv| !self.get(q, kv)))
    }

    /// Reorders key columns: new column `c` takes old column `perm[c]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        Self::from_fn(self.size, |q, c| self.get(q, perm[c]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.size * self.size * 2);
        for q in 0..self.size {
            let line: Vec<&str> = self
                .row(q)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    /// Plain PBM (P1); 1 = black = visible.
    pub fn to_pbm(&self) -> String {
        let mut s = format!("P1\n{} {}\n", self.size, self.size);
        for q in 0..self.size {
            let line: Vec<&str> = self
                .row(q)
                .iter()
                .map(|&b| if b { "1" } else { "0" })
                .collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Summary-attention visibility over an augmented sequence.
pub fn ksa_mask(aug: &AugmentedSequence, cfg: &KsaConfig) -> Result<VisibilityMask> {
    cfg.validate()?;
    aug.check_chunk(cfg)?;
    let len = aug.len();
    let mut mask = VisibilityMask::empty(len);
    let k = cfg.chunk_size;
    for (q, entry) in aug.entries.iter().enumerate() {
        match entry.role {
            Role::Text(i) => {
                for j in cfg.window_start(i)..=i {
                    mask.set(q, aug.text_index(j), true);
                }
                for m in 0..cfg.visible_summaries(i) {
                    mask.set(q, aug.summary_index(m), true);
                }
            }
            Role::Summary(j) => {
                for t in j * k..(j + 1) * k {
                    mask.set(q, aug.text_index(t), true);
                }
            }
        }
    }
    Ok(mask)
}

/// Token-level sliding window of width `w` over plain text.
pub fn swa_mask(n: usize, w: usize) -> Result<VisibilityMask> {
    if w == 0 {
        return Err(KsaError::Config("window must be at least 1".into()));
    }
    Ok(VisibilityMask::from_fn(n, |q, kv| kv <= q && kv + w > q))
}

/// Chunk-aligned sliding window over plain text.
pub fn sca_mask(n: usize, cfg: &KsaConfig) -> Result<VisibilityMask> {
    cfg.validate()?;
    Ok(VisibilityMask::from_fn(n, |q, kv| {
        kv <= q && kv >= cfg.window_start(q)
    }))
}

pub fn sparsity(mask: &VisibilityMask) -> f64 {
    if mask.size == 0 {
        return 0.0;
    }
    mask.count_ones() as f64 / (mask.size * mask.size) as f64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BlockKind {
    Full,
    /// Row-major `rows×cols` bitmask of the (possibly edge-clipped) tile.
    Partial(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub qb: usize,
    pub kb: usize,
    pub kind: BlockKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSparseMask {
    size: usize,
    block_size: usize,
    blocks: Vec<Block>,
}

impl BlockSparseMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    /// Nonzero tiles ordered by `(qb, kb)`.
    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_rows(&self) -> usize {
        self.size.div_ceil(self.block_size)
    }

    /// Row and column span of tile `(qb, kb)` after clipping at the edge.
    pub fn tile_extent(
        &self,
        qb: usize,
        kb: usize,
    ) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let b = self.block_size;
        (
            qb * b..((qb + 1) * b).min(self.size),
            kb * b..((kb + 1) * b).min(self.size),
        )
    }

    pub fn reconstruct(&self) -> VisibilityMask {
        let mut m = VisibilityMask::empty(self.size);
        for blk in &self.blocks {
            let (rows, cols) = self.tile_extent(blk.qb, blk.kb);
            let width = cols.len();
            for (r, q) in rows.enumerate() {
                for (c, kv) in cols.clone().enumerate() {
                    let on = match &blk.kind {
                        BlockKind::Full => true,
                        BlockKind::Partial(bits) => bits[r * width + c],
                    };
                    if on {
                        m.set(q, kv, true);
                    }
                }
            }
        }
        m
    }

    /// One `qb,kb,kind` line per nonzero tile.
    pub fn to_block_list(&self) -> String {
        let mut s = String::new();
        for blk in &self.blocks {
            let kind = match blk.kind {
                BlockKind::Full => "full",
                BlockKind::Partial(_) => "partial",
            };
            let _ = writeln!(s, "{},{},{}", blk.qb, blk.kb, kind);
        }
        s
    }
}

pub fn blockify(mask: &VisibilityMask, block_size: usize) -> Result<BlockSparseMask> {
    if block_size == 0 {
        return Err(KsaError::Config("block size must be at least 1".into()));
    }
    let mut out = BlockSparseMask {
        size: mask.size,
        block_size,
        blocks: Vec::new(),
    };
    let nb = out.block_rows();
    for qb in 0..nb {
        for kb in 0..nb {
            let (rows, cols) = out.tile_extent(qb, kb);
            let mut bits = Vec::with_capacity(rows.len() * cols.len());
            for q in rows {
                for kv in cols.clone() {
                    bits.push(mask.get(q, kv));
                }
            }
            if bits.iter().all(|&b| !b) {
                continue;
            }
            let kind = if bits.iter().all(|&b| b) {
                BlockKind::Full
            } else {
                BlockKind::Partial(bits)
            };
            out.blocks.push(Block { qb, kb, kind });
        }
    }
    Ok(out)
}

/// A text query that sees a past complete chunk neither exactly as text nor
/// exactly through its summary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionViolation {
    pub text_index: usize,
    pub chunk: usize,
    pub visible_text: usize,
    pub summary_visible: bool,
}

/// Checks that every text query sees each complete past chunk either as all
/// of its text (without the summary) or only via its summary.
pub fn chunk_partition_violations(
    aug: &AugmentedSequence,
    mask: &VisibilityMask,
    chunk_size: usize,
) -> Vec<PartitionViolation> {
    let mut out = Vec::new();
    for i in 0..aug.text_len() {
        let q = aug.text_index(i);
        for j in 0..i / chunk_size {
            let visible_text = (j * chunk_size..(j + 1) * chunk_size)
                .filter(|&t| mask.get(q, aug.text_index(t)))
                .count();
            let summary_visible = j < aug.summary_count() && mask.get(q, aug.summary_index(j));
            let all_text = visible_text == chunk_size && !summary_visible;
            let only_summary = visible_text == 0 && summary_visible;
            if all_text == only_summary {
                out.push(PartitionViolation {
                    text_index: i,
                    chunk: j,
                    visible_text,
                    summary_visible,
                });
            }
        }
    }
    out
}
