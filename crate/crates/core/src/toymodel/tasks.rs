//! Synthetic tasks.
//!
//! * copy: `payload SEP payload`; loss on the second copy.
//! * distant-recall: `[key value] filler… [key]` → predict `value`. The pair
//!   sits at the start of an early chunk, far outside any sliding window;
//!   keys, values and fillers use disjoint alphabets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KsaError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    DistantRecall,
}

impl std::str::FromStr for TaskKind {
    type Err = KsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "distant-recall" | "recall" => Ok(TaskKind::DistantRecall),
            other => Err(KsaError::Config(format!("unknown task '{other}'"))),
        }
    }
}

/// One training example; `targets[i]` is the token expected from logits row `i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub kind: TaskKind,
    pub seq_len: usize,
    /// copy: payload alphabet. recall: key alphabet.
    pub keys: usize,
    /// recall only.
    pub values: usize,
    /// recall only.
    pub fillers: usize,
    /// recall: the pair starts at `chunk_size · j` for `j ∈ 0..pair_chunks`.
    pub chunk_size: usize,
    pub pair_chunks: usize,
}

impl Task {
    /// `payload SEP payload` with `seq_len = 2·payload + 1`.
    pub fn copy(payload: usize, alphabet: usize) -> Result<Self> {
        let t = Self {
            kind: TaskKind::Copy,
            seq_len: 2 * payload + 1,
            keys: alphabet,
            values: 0,
            fillers: 0,
            chunk_size: 1,
            pair_chunks: 0,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn distant_recall(
        seq_len: usize,
        chunk_size: usize,
        pair_chunks: usize,
        keys: usize,
        values: usize,
        fillers: usize,
    ) -> Result<Self> {
        let t = Self {
            kind: TaskKind::DistantRecall,
            seq_len,
            keys,
            values,
            fillers,
            chunk_size,
            pair_chunks,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(KsaError::Config(m.to_string()));
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len < 3 || self.keys == 0 {
                    return bad(
                        "copy needs a payload of at least one token and a non-empty alphabet",
                    );
                }
            }
            TaskKind::DistantRecall => {
                if self.keys == 0
                    || self.values == 0
                    || self.fillers == 0
                    || self.chunk_size == 0
                    || self.pair_chunks == 0
                {
                    return bad(
                        "distant-recall alphabets, chunk size and pair range must be positive",
                    );
                }
                if self.latest_value_position() + 2 > self.seq_len {
                    return bad("distant-recall pair does not fit before the query");
                }
            }
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.keys + 1,
            TaskKind::DistantRecall => self.keys + self.values + self.fillers,
        }
    }

    /// Accuracy of uniform guessing over the answer alphabet.
    pub fn chance(&self) -> f64 {
        match self.kind {
            TaskKind::Copy => 1.0 / self.keys as f64,
            TaskKind::DistantRecall => 1.0 / self.values as f64,
        }
    }

    fn latest_value_position(&self) -> usize {
        (self.pair_chunks - 1) * self.chunk_size + 1
    }

    /// Smallest query-to-value distance the task generates.
    pub fn min_distance(&self) -> usize {
        match self.kind {
            TaskKind::Copy => self.seq_len / 2,
            TaskKind::DistantRecall => self.seq_len - 1 - self.latest_value_position(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Sample {
        let n = self.seq_len;
        match self.kind {
            TaskKind::Copy => {
                let m = (n - 1) / 2;
                let sep = self.keys;
                let payload: Vec<usize> = (0..m).map(|_| rng.random_range(0..self.keys)).collect();
                let mut tokens = payload.clone();
                tokens.push(sep);
                tokens.extend(&payload);
                let mut targets = vec![None; tokens.len()];
                for i in 0..m {
                    targets[m + i] = Some(payload[i]);
                }
                Sample { tokens, targets }
            }
            TaskKind::DistantRecall => {
                let (key_base, value_base, filler_base) = (0, self.keys, self.keys + self.values);
                let mut tokens: Vec<usize> = (0..n)
                    .map(|_| filler_base + rng.random_range(0..self.fillers))
                    .collect();
                let start = rng.random_range(0..self.pair_chunks) * self.chunk_size;
                let key = key_base + rng.random_range(0..self.keys);
                let value = value_base + rng.random_range(0..self.values);
                tokens[start] = key;
                tokens[start + 1] = value;
                tokens[n - 1] = key;
                let mut targets = vec![None; n];
                targets[n - 1] = Some(value);
                Sample { tokens, targets }
            }
        }
    }
}

/// ChaCha stream ids for draws made from one run seed; parameter
/// initialisation uses stream 0.
pub mod streams {
    pub const TRAIN: u64 = 1;
    pub const EVAL: u64 = 2;
    pub const PROBE: u64 = 3;
}

/// Task-sampling generator for `seed` on `stream`.
pub fn task_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
