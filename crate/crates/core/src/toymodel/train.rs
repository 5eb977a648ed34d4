use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::build;
use super::tape::Graph;
use super::{streams, task_rng, ModelConfig, Params, Sample, Task};
use crate::error::{KsaError, Result};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub clip: Option<f64>,
    /// Linear warm-up steps for the learning rate.
    pub warmup: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            clip: Some(1.0),
            warmup: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub arch: String,
    pub seed: u64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("step,loss,accuracy,arch,seed\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{},{}\n",
            r.step, r.loss, r.accuracy, r.arch, r.seed
        ));
    }
    out
}

/// Adam moment estimates over an ordered list of tensors.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    t: u32,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(tensors: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn for_params(params: &Params<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self::new(&params.tensors(), beta1, beta2, eps)
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: Vec<&Tensor<T>>, lr: f64) {
        assert_eq!(
            params.len(),
            self.m.len(),
            "optimizer built for a different tensor list"
        );
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::lit(lr), T::lit(self.eps));
        let one = T::one();
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// LM loss of one sample with gradients, plus (correct, counted) argmax hits.
pub fn lm_loss_and_grads<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    sample: &Sample,
) -> Result<(T, Params<T>, usize, usize)> {
    let mut g = Graph::new();
    let built = build(&mut g, cfg, params, &sample.tokens, None)?;
    let loss = g.cross_entropy(built.logits, &sample.targets)?;
    let (correct, counted) = hits(g.value(built.logits), &sample.targets);
    g.backward(loss)?;
    let mut grads = params.zeros_like();
    for (dst, var) in grads.tensors_mut().into_iter().zip(&built.params) {
        if let Some(src) = g.grad(*var) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    Ok((g.scalar(loss), grads, correct, counted))
}

pub(crate) fn hits<T: Scalar>(
    logits: &crate::numerics::Tensor<T>,
    targets: &[Option<usize>],
) -> (usize, usize) {
    let mut correct = 0;
    let mut counted = 0;
    for (r, t) in targets.iter().enumerate() {
        if let Some(t) = *t {
            counted += 1;
            let row = logits.row(r);
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            correct += usize::from(best == t);
        }
    }
    (correct, counted)
}

struct BatchResult<T> {
    loss: f64,
    grads: Params<T>,
    accuracy: f64,
}

fn batch_gradients<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    batch: &[Sample],
) -> Result<BatchResult<T>> {
    let per_sample: Vec<(T, Params<T>, usize, usize)> = batch
        .par_iter()
        .map(|s| lm_loss_and_grads(cfg, params, s))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let scale = T::one() / T::lit(batch.len() as f64);
    let mut loss = 0.0;
    let (mut correct, mut counted) = (0, 0);
    for (l, g, c, n) in &per_sample {
        loss += l.as_f64();
        correct += c;
        counted += n;
        for (dst, src) in grads.tensors_mut().into_iter().zip(g.tensors()) {
            for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                *a += b * scale;
            }
        }
    }
    Ok(BatchResult {
        loss: loss / batch.len() as f64,
        grads,
        accuracy: if counted == 0 {
            0.0
        } else {
            correct as f64 / counted as f64
        },
    })
}

pub(crate) fn clip_global_norm<T: Scalar>(grads: Vec<&mut Tensor<T>>, max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|t| t.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let c = T::lit(max_norm / norm);
        for t in grads {
            t.data_mut().iter_mut().for_each(|x| *x *= c);
        }
    }
}

pub(crate) fn warmup_factor(step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        1.0
    } else {
        (step as f64 / warmup as f64).min(1.0)
    }
}

/// Trains in place and returns one metrics row per step (training-batch
/// loss and accuracy).
pub fn train<T: Scalar>(
    cfg: &ModelConfig,
    params: &mut Params<T>,
    task: &Task,
    tc: &TrainConfig,
) -> Result<Vec<MetricRow>> {
    if tc.steps == 0 || tc.batch_size == 0 {
        return Err(KsaError::Config(
            "steps and batch_size must be at least 1".into(),
        ));
    }
    if task.vocab_size() > cfg.vocab_size {
        return Err(KsaError::Config(format!(
            "task needs vocabulary {} but the model has {}",
            task.vocab_size(),
            cfg.vocab_size
        )));
    }
    let mut rng = task_rng(tc.seed, streams::TRAIN);
    let mut adam = Adam::for_params(params, tc.beta1, tc.beta2, tc.eps);
    let arch = cfg.arch.name();
    let mut rows = Vec::with_capacity(tc.steps);
    for step in 1..=tc.steps {
        let batch: Vec<Sample> = (0..tc.batch_size).map(|_| task.sample(&mut rng)).collect();
        let mut res = batch_gradients(cfg, params, &batch)?;
        if !res.loss.is_finite() {
            return Err(KsaError::Diverged {
                step,
                loss: res.loss,
            });
        }
        if let Some(c) = tc.clip {
            clip_global_norm(res.grads.tensors_mut(), c);
        }
        let warm = warmup_factor(step, tc.warmup);
        adam.step(params.tensors_mut(), res.grads.tensors(), tc.lr * warm);
        if !params.is_finite() {
            return Err(KsaError::Diverged {
                step,
                loss: res.loss,
            });
        }
        rows.push(MetricRow {
            step,
            loss: res.loss,
            accuracy: res.accuracy,
            arch: arch.clone(),
            seed: tc.seed,
        });
    }
    Ok(rows)
}

/// Argmax accuracy on `samples` fresh examples drawn with `seed`.
pub fn evaluate<T: Scalar>(
    cfg: &ModelConfig,
    params: &Params<T>,
    task: &Task,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = task_rng(seed, streams::EVAL);
    let batch: Vec<Sample> = (0..samples).map(|_| task.sample(&mut rng)).collect();
    let counts: Vec<(usize, usize)> = batch
        .par_iter()
        .map(|s| {
            let out = super::forward(cfg, params, &s.tokens)?;
            Ok(hits(&out.logits, &s.targets))
        })
        .collect::<Result<_>>()?;
    let (c, n) = counts.iter().fold((0, 0), |(a, b), &(c, n)| (a + c, b + n));
    Ok(if n == 0 { 0.0 } else { c as f64 / n as f64 })
}
