//! Tiny decoder-only transformer with selectable per-layer attention.
//!
//! Pre-norm blocks (RMSNorm → attention → residual, RMSNorm → SiLU MLP →
//! residual), RoPE on queries and keys, optional tied LM head. When any layer
//! is KSA the input is augmented with summary tokens and every layer runs on
//! the augmented stream; Full layers then use a causal mask over it.

mod checkpoint;
mod decode;
pub(crate) mod forward;
pub(crate) mod gradcheck;
pub(crate) mod tape;
mod tasks;
pub(crate) mod train;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{KsaError, Result};
use crate::masking::KsaConfig;
use crate::numerics::{RopeConfig, Tensor};
use crate::scalar::Scalar;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest};
pub use decode::Decoder;
pub use forward::{
    attention_weights, forward, forward_with, loss_lm, ForwardOutput, SummaryBranch,
};
pub use gradcheck::{grad_check, summary_embedding_gradient, GradCheckReport, GroupCheck};
pub use tasks::{streams, task_rng, Sample, Task, TaskKind};
pub use train::{evaluate, lm_loss_and_grads, metrics_csv, train, Adam, MetricRow, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Full,
    Swa,
    Sca,
    Ksa,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Full => "full",
            LayerKind::Swa => "swa",
            LayerKind::Sca => "sca",
            LayerKind::Ksa => "ksa",
        }
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerKind {
    type Err = KsaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(LayerKind::Full),
            "swa" => Ok(LayerKind::Swa),
            "sca" => Ok(LayerKind::Sca),
            "ksa" => Ok(LayerKind::Ksa),
            other => Err(KsaError::Config(format!("unknown layer kind '{other}'"))),
        }
    }
}

/// Per-layer mechanism tags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerSchedule {
    kinds: Vec<LayerKind>,
}

impl LayerSchedule {
    /// `ratio = Some(R)` interleaves R `base` layers per Full layer: layer ℓ
    /// is Full iff `ℓ mod (R+1) == R`. `Some(0)` is all Full; `None` is all
    /// `base`.
    pub fn hybrid(layers: usize, base: LayerKind, ratio: Option<usize>) -> Result<Self> {
        if layers == 0 {
            return Err(KsaError::Config("at least one layer is required".into()));
        }
        let kinds = (0..layers)
            .map(|l| match ratio {
                Some(r) if l % (r + 1) == r => LayerKind::Full,
                _ => base,
            })
            .collect();
        Ok(Self { kinds })
    }

    pub fn from_kinds(kinds: Vec<LayerKind>) -> Result<Self> {
        if kinds.is_empty() {
            return Err(KsaError::Config("at least one layer is required".into()));
        }
        Ok(Self { kinds })
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.kinds
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn count(&self, kind: LayerKind) -> usize {
        self.kinds.iter().filter(|&&k| k == kind).count()
    }

    /// Summary tokens are injected iff some layer is KSA.
    pub fn augments(&self) -> bool {
        self.kinds.contains(&LayerKind::Ksa)
    }
}

/// Architecture preset: a base mechanism plus an optional hybrid ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub base: LayerKind,
    pub ratio: Option<usize>,
}

impl Arch {
    pub const DEFAULT_HYBRID_RATIO: usize = 3;

    pub fn name(&self) -> String {
        match self.ratio {
            None => self.base.name().to_string(),
            Some(0) => "full".to_string(),
            Some(r) if r == Self::DEFAULT_HYBRID_RATIO => format!("hybrid-{}", self.base),
            Some(r) => format!("hybrid-{}-{r}", self.base),
        }
    }
}

impl FromStr for Arch {
    type Err = KsaError;

    /// `full`, `swa`, `sca`, `ksa`, `hybrid-<kind>` (ratio 3) or
    /// `hybrid-<kind>-<R>`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if let Some(rest) = lower.strip_prefix("hybrid-") {
            let (kind, ratio) = match rest.split_once('-') {
                Some((kind, r)) => (
                    kind,
                    r.parse()
                        .map_err(|_| KsaError::Config(format!("bad hybrid ratio in '{s}'")))?,
                ),
                None => (rest, Self::DEFAULT_HYBRID_RATIO),
            };
            return Ok(Arch {
                base: kind.parse()?,
                ratio: Some(ratio),
            });
        }
        Ok(Arch {
            base: lower.parse()?,
            ratio: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub ksa: KsaConfig,
    pub arch: Arch,
    /// Token window of SWA layers.
    pub swa_window: usize,
    pub rope: RopeConfig,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            d_model: 64,
            heads: 4,
            kv_heads: 4,
            head_dim: 16,
            mlp_hidden: 128,
            vocab_size: 64,
            ksa: KsaConfig {
                chunk_size: 4,
                sliding_chunks: 2,
                block_size: 16,
            },
            arch: Arch {
                base: LayerKind::Ksa,
                ratio: Some(Arch::DEFAULT_HYBRID_RATIO),
            },
            swa_window: 12,
            rope: RopeConfig {
                theta: 10_000.0,
                head_dim: 16,
            },
            tie_embeddings: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(KsaError::Config(m));
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.heads == 0 || self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return bad(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            ));
        }
        if self.d_model != self.heads * self.head_dim {
            return bad(format!(
                "d_model {} != heads {} × head_dim {}",
                self.d_model, self.heads, self.head_dim
            ));
        }
        if self.rope.head_dim != self.head_dim {
            return bad("rope head_dim differs from head_dim".into());
        }
        if self.vocab_size < 2 || self.mlp_hidden == 0 {
            return bad("vocab_size must be ≥ 2 and mlp_hidden ≥ 1".into());
        }
        if self.swa_window == 0 {
            return bad("swa_window must be at least 1".into());
        }
        self.ksa.validate()?;
        self.rope.validate()
    }

    pub fn schedule(&self) -> LayerSchedule {
        LayerSchedule::hybrid(self.layers, self.arch.base, self.arch.ratio)
            .expect("layers validated")
    }

    /// Embedding row used for the summary token.
    pub fn summary_token(&self) -> usize {
        self.vocab_size
    }

    /// Same weights viewed as an all-Full model on the plain sequence.
    pub fn as_full(&self) -> Self {
        Self {
            arch: Arch {
                base: LayerKind::Full,
                ratio: None,
            },
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub mlp_norm: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    const NAMES: [&'static str; 8] = ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2"];

    fn tensors(&self) -> [&Tensor<T>; 8] {
        [
            &self.attn_norm,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.mlp_norm,
            &self.w1,
            &self.w2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 8] {
        [
            &mut self.attn_norm,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.mlp_norm,
            &mut self.w1,
            &mut self.w2,
        ]
    }
}

/// Model weights. The embedding table has `vocab_size + 1` rows; the last
/// row is the shared summary embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    /// `d_model × vocab`; `None` when tied to the embedding.
    pub lm_head: Option<Tensor<T>>,
}

fn normal_tensor<T: Scalar>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(&[rows, cols], |_| T::lit(dist.sample(rng)))
}

impl<T: Scalar> Params<T> {
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let dm = cfg.d_model;
        let kv = cfg.kv_heads * cfg.head_dim;
        let proj = 1.0 / (dm as f64).sqrt();
        let out = proj / (2.0 * cfg.layers as f64).sqrt();
        let ones = || Tensor::from_fn(&[1, dm], |_| T::one());
        let embedding = normal_tensor(&mut rng, cfg.vocab_size + 1, dm, 1.0);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                attn_norm: ones(),
                wq: normal_tensor(&mut rng, dm, dm, proj),
                wk: normal_tensor(&mut rng, dm, kv, proj),
                wv: normal_tensor(&mut rng, dm, kv, proj),
                wo: normal_tensor(&mut rng, dm, dm, out),
                mlp_norm: ones(),
                w1: normal_tensor(&mut rng, dm, cfg.mlp_hidden, proj),
                w2: normal_tensor(
                    &mut rng,
                    cfg.mlp_hidden,
                    dm,
                    1.0 / (cfg.mlp_hidden as f64).sqrt() / 2.0,
                ),
            })
            .collect();
        let lm_head =
            (!cfg.tie_embeddings).then(|| normal_tensor(&mut rng, dm, cfg.vocab_size, proj));
        Ok(Self {
            embedding,
            layers,
            final_norm: ones(),
            lm_head,
        })
    }

    /// Named tensors in the canonical (checkpoint and optimizer) order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LayerParams::<T>::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(h) = &self.lm_head {
            out.push(("lm_head".to_string(), h));
        }
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            out.push(h);
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
        z
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    wq: l.wq.cast(),
                    wk: l.wk.cast(),
                    wv: l.wv.cast(),
                    wo: l.wo.cast(),
                    mlp_norm: l.mlp_norm.cast(),
                    w1: l.w1.cast(),
                    w2: l.w2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.as_ref().map(Tensor::cast),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}
