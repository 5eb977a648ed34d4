//! Token-by-token decoding of the toy model: KSA layers use `KsaKvCache`,
//! Full layers a growing cache over the augmented stream. A summary token is
//! pushed through the stack before the first text token of each new chunk.

use super::{LayerKind, ModelConfig, Params};
use crate::attention::attend_single;
use crate::error::{KsaError, Result};
use crate::kvcache::{CacheState, KsaKvCache, TokenQkv};
use crate::numerics::{matmul, rope_apply_at, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
struct FullCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    len: usize,
}

#[derive(Debug, Clone)]
enum LayerCache<T> {
    Ksa(KsaKvCache<T>),
    Full(FullCache<T>),
}

#[derive(Debug, Clone)]
pub struct Decoder<'a, T> {
    cfg: &'a ModelConfig,
    params: &'a Params<T>,
    caches: Vec<LayerCache<T>>,
    augments: bool,
    text_count: usize,
    summary_count: usize,
}

fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(x.len() as f64);
    let ms = x.data().iter().fold(T::zero(), |a, &v| a + v * v) / n;
    let inv = T::one() / (ms + T::lit(1e-6)).sqrt();
    Tensor::new(
        x.shape().to_vec(),
        x.data()
            .iter()
            .zip(gain.data())
            .map(|(&v, &g)| v * inv * g)
            .collect(),
    )
    .expect("same shape")
}

fn add_into<T: Scalar>(x: &mut Tensor<T>, y: &Tensor<T>) {
    for (a, &b) in x.data_mut().iter_mut().zip(y.data()) {
        *a += b;
    }
}

impl<'a, T: Scalar> Decoder<'a, T> {
    pub fn new(
        cfg: &'a ModelConfig,
        params: &'a Params<T>,
        max_text_tokens: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule();
        let caches = schedule
            .kinds()
            .iter()
            .map(|kind| match kind {
                LayerKind::Ksa => Ok(LayerCache::Ksa(KsaKvCache::new(
                    cfg.ksa,
                    max_text_tokens,
                    cfg.heads,
                    cfg.kv_heads,
                    cfg.head_dim,
                )?)),
                LayerKind::Full => Ok(LayerCache::Full(FullCache {
                    keys: Vec::new(),
                    values: Vec::new(),
                    len: 0,
                })),
                other => Err(KsaError::Config(format!(
                    "decoder does not support {other} layers"
                ))),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            params,
            caches,
            augments: schedule.augments(),
            text_count: 0,
            summary_count: 0,
        })
    }

    pub fn text_count(&self) -> usize {
        self.text_count
    }

    /// Total stored KV entries per kv head and direction, over all layers.
    pub fn cache_entries(&self) -> usize {
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Ksa(c) => c.cache_entries(),
                LayerCache::Full(c) => c.len,
            })
            .sum()
    }

    /// Per layer summary-cache state; `None` for Full layers.
    pub fn cache_states(&self) -> Vec<Option<CacheState>> {
        self.caches
            .iter()
            .map(|c| match c {
                LayerCache::Ksa(c) => Some(c.state()),
                LayerCache::Full(_) => None,
            })
            .collect()
    }

    /// Feeds one text token and returns its next-token logits (`1 × vocab`).
    pub fn step(&mut self, token: usize) -> Result<Tensor<T>> {
        if token >= self.cfg.vocab_size {
            return Err(KsaError::Input(format!(
                "token id {token} outside vocabulary"
            )));
        }
        let k = self.cfg.ksa.chunk_size;
        if self.augments
            && self.text_count > 0
            && self.text_count.is_multiple_of(k)
            && self.summary_count < self.text_count / k
        {
            self.run_entry(self.cfg.summary_token(), self.text_count - 1, true)?;
            self.summary_count += 1;
        }
        let x = self.run_entry(token, self.text_count, false)?;
        self.text_count += 1;
        let h = rms_norm(&x, &self.params.final_norm);
        match &self.params.lm_head {
            Some(w) => matmul(&h, w),
            None => {
                let v = self.cfg.vocab_size;
                let rows: Vec<usize> = (0..v).collect();
                matmul(
                    &h,
                    &crate::numerics::transpose(&self.params.embedding.select_rows(&rows))?,
                )
            }
        }
    }

    fn run_entry(&mut self, id: usize, position: usize, summary: bool) -> Result<Tensor<T>> {
        let cfg = self.cfg;
        let (h, g, d) = (cfg.heads, cfg.kv_heads, cfg.head_dim);
        let mut x = self.params.embedding.select_rows(&[id]);
        let pos = [position as f64];
        for (layer, cache) in self.params.layers.iter().zip(self.caches.iter_mut()) {
            let hid = rms_norm(&x, &layer.attn_norm);
            let q = rope_apply_at(
                &matmul(&hid, &layer.wq)?.reshape(&[1, h, d])?,
                &pos,
                &cfg.rope,
            )?
            .reshape(&[h, d])?;
            let k = rope_apply_at(
                &matmul(&hid, &layer.wk)?.reshape(&[1, g, d])?,
                &pos,
                &cfg.rope,
            )?
            .reshape(&[g, d])?;
            let v = matmul(&hid, &layer.wv)?.reshape(&[g, d])?;
            let o = match cache {
                LayerCache::Ksa(c) => {
                    let qkv = TokenQkv { q, k, v };
                    if summary {
                        c.finalize_chunk(&qkv)?
                    } else {
                        c.decode_attention(&qkv, None)?.output
                    }
                }
                LayerCache::Full(c) => {
                    c.keys.extend_from_slice(k.data());
                    c.values.extend_from_slice(v.data());
                    c.len += 1;
                    let mut out = Tensor::zeros(&[h, d]);
                    let group = h / g;
                    let scale = T::one() / T::lit(d as f64).sqrt();
                    for head in 0..h {
                        let kvh = head / group;
                        let keys: Vec<T> = (0..c.len)
                            .flat_map(|e| {
                                c.keys[(e * g + kvh) * d..(e * g + kvh + 1) * d]
                                    .iter()
                                    .copied()
                            })
                            .collect();
                        let values: Vec<T> = (0..c.len)
                            .flat_map(|e| {
                                c.values[(e * g + kvh) * d..(e * g + kvh + 1) * d]
                                    .iter()
                                    .copied()
                            })
                            .collect();
                        attend_single(q.row(head), &keys, &values, scale, out.row_mut(head))?;
                    }
                    out
                }
            };
            let o = o.reshape(&[1, h * d])?;
            add_into(&mut x, &matmul(&o, &layer.wo)?);
            let hid = rms_norm(&x, &layer.mlp_norm);
            let act = matmul(&hid, &layer.w1)?.map(|a| a / (T::one() + (-a).exp()));
            add_into(&mut x, &matmul(&act, &layer.w2)?);
        }
        Ok(x)
    }
}
