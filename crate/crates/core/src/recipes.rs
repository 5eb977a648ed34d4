//! Warm-up recipes for converting a full-attention model into a KSA model.
//!
//! * Summary rows of KSA layers get their own Q/K/V projections `W_S`,
//!   blended into the main projections as `λ·x_S + (1−λ)·x_main`; once λ
//!   reaches 0 the extra weights can be dropped.
//! * A frozen full-attention teacher supervises the student through a
//!   per-layer MSE on attention outputs (text rows only) and a KL term on the
//!   output distribution, added to the LM loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KsaError, Result};
use crate::masking::Role;
use crate::numerics::{matmul, Tensor};
use crate::scalar::Scalar;
use crate::toymodel::tape::{log_sum_exp, Graph};
use crate::toymodel::{
    forward, streams, task_rng, Adam, LayerKind, LayerParams, ModelConfig, Params, Sample,
    SummaryBranch, Task,
};

/// Floor applied to student probabilities inside the KL term.
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryProjection<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

/// Per-layer summary projections; `None` on non-KSA layers.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryProjections<T> {
    pub layers: Vec<Option<SummaryProjection<T>>>,
}

impl<T: Scalar> SummaryProjections<T> {
    /// Copies of the main projections on every KSA layer.
    pub fn from_params(cfg: &ModelConfig, params: &Params<T>) -> Self {
        let schedule = cfg.schedule();
        Self {
            layers: schedule
                .kinds()
                .iter()
                .zip(&params.layers)
                .map(|(&kind, l)| {
                    (kind == LayerKind::Ksa).then(|| SummaryProjection {
                        wq: l.wq.clone(),
                        wk: l.wk.clone(),
                        wv: l.wv.clone(),
                    })
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|p| [&p.wq, &p.wk, &p.wv])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|p| [&mut p.wq, &mut p.wk, &mut p.wv])
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    s_start: usize,
    s_end: usize,
}

impl AnnealSchedule {
    pub fn new(s_start: usize, s_end: usize) -> Result<Self> {
        if s_start >= s_end {
            return Err(KsaError::Config(format!(
                "anneal start {s_start} must precede anneal end {s_end}"
            )));
        }
        Ok(Self { s_start, s_end })
    }

    pub fn start(&self) -> usize {
        self.s_start
    }

    pub fn end(&self) -> usize {
        self.s_end
    }
}

/// λ(s): 1 up to `s_start`, 0 from `s_end`, linear in between.
pub fn anneal_lambda(s: usize, sched: &AnnealSchedule) -> f64 {
    if s <= sched.s_start {
        1.0
    } else if s >= sched.s_end {
        0.0
    } else {
        (sched.s_end - s) as f64 / (sched.s_end - sched.s_start) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for DistillWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
        }
    }
}

impl DistillWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0) {
            return Err(KsaError::Config(
                "distillation weights must be nonnegative".into(),
            ));
        }
        Ok(Self { alpha, beta })
    }
}

fn project_rows<T: Scalar>(
    hidden: &Tensor<T>,
    main: &Tensor<T>,
    alt: &Tensor<T>,
    roles: &[Role],
    lambda: Option<T>,
) -> Result<Tensor<T>> {
    if main.shape() != alt.shape() {
        return Err(KsaError::Shape(format!(
            "summary projection {:?} vs main {:?}",
            alt.shape(),
            main.shape()
        )));
    }
    if roles.len() != hidden.rows() {
        return Err(KsaError::Shape(format!(
            "{} roles for {} rows",
            roles.len(),
            hidden.rows()
        )));
    }
    let mut out = matmul(hidden, main)?;
    let summary_rows: Vec<usize> = (0..roles.len())
        .filter(|&r| roles[r].is_summary())
        .collect();
    if summary_rows.is_empty() {
        return Ok(out);
    }
    let alt_out = matmul(&hidden.select_rows(&summary_rows), alt)?;
    for (i, &r) in summary_rows.iter().enumerate() {
        let row = out.row_mut(r);
        for (x, &s) in row.iter_mut().zip(alt_out.row(i)) {
            *x = match lambda {
                None => s,
                Some(l) => s * l + *x * (T::one() - l),
            };
        }
    }
    Ok(out)
}

/// Student projections: text rows use `W^X`, summary rows use `W_S^X`.
pub fn student_qkv<T: Scalar>(
    hidden: &Tensor<T>,
    layer: &LayerParams<T>,
    projs: &SummaryProjection<T>,
    roles: &[Role],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    Ok((
        project_rows(hidden, &layer.wq, &projs.wq, roles, None)?,
        project_rows(hidden, &layer.wk, &projs.wk, roles, None)?,
        project_rows(hidden, &layer.wv, &projs.wv, roles, None)?,
    ))
}

/// Summary rows get `λ·x_S + (1−λ)·x_main`; text rows are untouched.
pub fn interpolated_qkv<T: Scalar>(
    hidden: &Tensor<T>,
    layer: &LayerParams<T>,
    projs: &SummaryProjection<T>,
    roles: &[Role],
    lambda: T,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    if !(lambda >= T::zero() && lambda <= T::one()) {
        return Err(KsaError::Config(format!("λ = {lambda} outside [0, 1]")));
    }
    Ok((
        project_rows(hidden, &layer.wq, &projs.wq, roles, Some(lambda))?,
        project_rows(hidden, &layer.wk, &projs.wk, roles, Some(lambda))?,
        project_rows(hidden, &layer.wv, &projs.wv, roles, Some(lambda))?,
    ))
}

/// `Σ_ℓ ‖O_ℓ − Ô_ℓ|_T‖² / (L·|T|)`, where row `t` of the teacher pairs with
/// row `text_positions[t]` of the student.
pub fn mse_align<T: Scalar>(
    teacher: &[Tensor<T>],
    student: &[Tensor<T>],
    text_positions: &[usize],
) -> Result<T> {
    if teacher.len() != student.len() || teacher.is_empty() {
        return Err(KsaError::Shape(format!(
            "{} teacher layers vs {} student layers",
            teacher.len(),
            student.len()
        )));
    }
    let mut total = T::zero();
    for (o, s) in teacher.iter().zip(student) {
        if o.rows() != text_positions.len() || o.row_len() != s.row_len() {
            return Err(KsaError::Shape(
                "teacher/student layer outputs do not align".into(),
            ));
        }
        for (t, &p) in text_positions.iter().enumerate() {
            if p >= s.rows() {
                return Err(KsaError::OutOfRange {
                    index: p,
                    len: s.rows(),
                });
            }
            for (&a, &b) in o.row(t).iter().zip(s.row(p)) {
                total += (a - b) * (a - b);
            }
        }
    }
    Ok(total / T::lit((teacher.len() * text_positions.len().max(1)) as f64))
}

/// Mean over rows of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kl_from_logits<T: Scalar>(teacher: &Tensor<T>, student: &Tensor<T>) -> Result<T> {
    if teacher.shape() != student.shape() || teacher.rank() != 2 {
        return Err(KsaError::Shape(
            "teacher/student logits differ in shape".into(),
        ));
    }
    let log_floor = T::lit(KL_FLOOR).ln();
    let mut total = T::zero();
    for r in 0..teacher.rows() {
        let (zt, zs) = (teacher.row(r), student.row(r));
        let (lt, ls) = (log_sum_exp(zt), log_sum_exp(zs));
        for (&a, &b) in zt.iter().zip(zs) {
            let log_p = a - lt;
            let p = log_p.exp();
            if p > T::zero() {
                total += p * (log_p - (b - ls).max(log_floor));
            }
        }
    }
    Ok(total / T::lit(teacher.rows().max(1) as f64))
}

/// KL between the head's distributions on teacher and student final hidden
/// states (text rows only).
pub fn kl_logits<T: Scalar>(
    teacher_hidden: &Tensor<T>,
    student_hidden: &Tensor<T>,
    w_h: &Tensor<T>,
) -> Result<T> {
    kl_from_logits(&matmul(teacher_hidden, w_h)?, &matmul(student_hidden, w_h)?)
}

pub fn total_loss<T: Scalar>(lm: T, mse: T, kl: T, w: &DistillWeights) -> T {
    lm + T::lit(w.alpha) * mse + T::lit(w.beta) * kl
}

/// Frozen teacher signals for one sample: per-layer attention outputs and
/// next-token probabilities, all over text positions.
#[derive(Debug, Clone)]
pub struct TeacherTargets<T> {
    pub attn_outputs: Vec<Tensor<T>>,
    pub probs: Tensor<T>,
}

pub fn teacher_targets<T: Scalar>(
    cfg: &ModelConfig,
    teacher: &Params<T>,
    tokens: &[usize],
) -> Result<TeacherTargets<T>> {
    let out = forward(&cfg.as_full(), teacher, tokens)?;
    let mut probs = out.logits.clone();
    for r in 0..probs.rows() {
        let lse = log_sum_exp(out.logits.row(r));
        probs
            .row_mut(r)
            .iter_mut()
            .for_each(|z| *z = (*z - lse).exp());
    }
    Ok(TeacherTargets {
        attn_outputs: out.attn_outputs,
        probs,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillLosses<T> {
    pub lm: T,
    pub mse: T,
    pub kl: T,
    pub total: T,
}

/// Loss components and gradients for base weights and summary projections.
pub fn distill_loss_and_grads<T: Scalar>(
    cfg: &ModelConfig,
    student: &Params<T>,
    projs: &SummaryProjections<T>,
    teacher: &TeacherTargets<T>,
    sample: &Sample,
    lambda: T,
    weights: &DistillWeights,
) -> Result<(DistillLosses<T>, Params<T>, SummaryProjections<T>)> {
    let mut g = Graph::new();
    let branch = SummaryBranch {
        projections: projs,
        lambda,
    };
    let built =
        crate::toymodel::forward::build(&mut g, cfg, student, &sample.tokens, Some(&branch))?;
    if teacher.attn_outputs.len() != built.attn.len() {
        return Err(KsaError::Shape("teacher and student depth differ".into()));
    }
    let text = built.sequence.text_positions().to_vec();
    let denom = T::lit((built.attn.len() * text.len()) as f64);
    let mut mse = None;
    for (&o, target) in built.attn.iter().zip(&teacher.attn_outputs) {
        let rows = g.select_rows(o, &text);
        let term = g.mse_const(rows, target, denom)?;
        mse = Some(match mse {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let mse = mse.expect("at least one layer");
    let lm = g.cross_entropy(built.logits, &sample.targets)?;
    let kl = g.kl_const(&teacher.probs, built.logits, T::lit(KL_FLOOR))?;
    let a = g.scale(mse, T::lit(weights.alpha));
    let b = g.scale(kl, T::lit(weights.beta));
    let total = g.add(lm, a)?;
    let total = g.add(total, b)?;
    g.backward(total)?;

    let mut grads = student.zeros_like();
    for (dst, var) in grads.tensors_mut().into_iter().zip(&built.params) {
        if let Some(src) = g.grad(*var) {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    let mut proj_grads = projs.clone();
    for (dst, vars) in proj_grads.layers.iter_mut().zip(&built.projections) {
        if let Some(d) = dst {
            for (i, t) in [&mut d.wq, &mut d.wk, &mut d.wv].into_iter().enumerate() {
                match vars.and_then(|v| g.grad(v[i])) {
                    Some(src) => t.data_mut().copy_from_slice(src.data()),
                    None => t.data_mut().iter_mut().for_each(|x| *x = T::zero()),
                }
            }
        }
    }
    let losses = DistillLosses {
        lm: g.scalar(lm),
        mse: g.scalar(mse),
        kl: g.scalar(kl),
        total: g.scalar(total),
    };
    Ok((losses, grads, proj_grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: AnnealSchedule,
    pub weights: DistillWeights,
    pub clip: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillRow {
    pub step: usize,
    pub lambda: f64,
    pub loss_lm: f64,
    pub loss_mse: f64,
    pub loss_kl: f64,
    pub total: f64,
}

pub fn distill_csv(rows: &[DistillRow]) -> String {
    let mut out = String::from("step,lambda,loss_lm,loss_mse,loss_kl,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}\n",
            r.step, r.lambda, r.loss_lm, r.loss_mse, r.loss_kl, r.total
        ));
    }
    out
}

/// Distils a KSA student (initialised from `params`) from a frozen
/// all-Full snapshot of the same weights. Steps are numbered from 1 and λ
/// follows `dc.schedule`.
pub fn distill<T: Scalar>(
    cfg: &ModelConfig,
    params: &mut Params<T>,
    projs: &mut SummaryProjections<T>,
    task: &Task,
    dc: &DistillConfig,
) -> Result<Vec<DistillRow>> {
    if dc.steps == 0 || dc.batch_size == 0 {
        return Err(KsaError::Config(
            "steps and batch_size must be at least 1".into(),
        ));
    }
    if task.vocab_size() > cfg.vocab_size {
        return Err(KsaError::Config(
            "task vocabulary exceeds the model's".into(),
        ));
    }
    let teacher = params.clone();
    let mut rng = task_rng(dc.seed, streams::TRAIN);
    let tensor_list = |p: &Params<T>, s: &SummaryProjections<T>| {
        let mut v = p.tensors();
        v.extend(s.tensors());
        v.into_iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect::<Vec<_>>()
    };
    let shapes = tensor_list(params, projs);
    let mut adam = Adam::new(&shapes.iter().collect::<Vec<_>>(), 0.9, 0.98, 1e-8);
    let mut rows = Vec::with_capacity(dc.steps);
    for step in 1..=dc.steps {
        let lambda = anneal_lambda(step, &dc.schedule);
        let batch: Vec<Sample> = (0..dc.batch_size).map(|_| task.sample(&mut rng)).collect();
        let results: Vec<_> = batch
            .par_iter()
            .map(|s| {
                let targets = teacher_targets(cfg, &teacher, &s.tokens)?;
                distill_loss_and_grads(cfg, params, projs, &targets, s, T::lit(lambda), &dc.weights)
            })
            .collect::<Result<_>>()?;
        let scale = T::one() / T::lit(batch.len() as f64);
        let mut grads: Vec<Tensor<T>> = shapes.clone();
        let mut sums = [0.0f64; 4];
        for (losses, gp, gs) in &results {
            for (i, v) in [losses.lm, losses.mse, losses.kl, losses.total]
                .iter()
                .enumerate()
            {
                sums[i] += v.as_f64();
            }
            let src = gp.tensors().into_iter().chain(gs.tensors());
            for (dst, src) in grads.iter_mut().zip(src) {
                for (a, &b) in dst.data_mut().iter_mut().zip(src.data()) {
                    *a += b * scale;
                }
            }
        }
        let n = batch.len() as f64;
        let [lm, mse, kl, total] = sums.map(|s| s / n);
        if !total.is_finite() {
            return Err(KsaError::Diverged { step, loss: total });
        }
        if let Some(c) = dc.clip {
            crate::toymodel::train::clip_global_norm(grads.iter_mut().collect(), c);
        }
        let mut targets = params.tensors_mut();
        targets.extend(projs.tensors_mut());
        adam.step(targets, grads.iter().collect(), dc.lr);
        rows.push(DistillRow {
            step,
            lambda,
            loss_lm: lm,
            loss_mse: mse,
            loss_kl: kl,
            total,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::KsaConfig;
    use crate::numerics::RopeConfig;
    use crate::toymodel::forward_with;

    fn cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            kv_heads: 1,
            head_dim: 4,
            mlp_hidden: 8,
            vocab_size: 10,
            ksa: KsaConfig::new(2, 1, 4).unwrap(),
            arch: "hybrid-ksa-1".parse().unwrap(),
            swa_window: 4,
            rope: RopeConfig::new(100.0, 4).unwrap(),
            tie_embeddings: false,
            seed: 2,
        }
    }

    fn layer(seed: f64) -> LayerParams<f64> {
        let t = |r, c, s: f64| Tensor::from_fn(&[r, c], |i| ((i as f64 + s) * 0.731).sin());
        LayerParams {
            attn_norm: t(1, 2, seed),
            wq: t(2, 2, seed + 1.0),
            wk: t(2, 2, seed + 2.0),
            wv: t(2, 2, seed + 3.0),
            wo: t(2, 2, seed + 4.0),
            mlp_norm: t(1, 2, seed),
            w1: t(2, 2, seed),
            w2: t(2, 2, seed),
        }
    }

    fn roles() -> Vec<Role> {
        vec![
            Role::Text(0),
            Role::Text(1),
            Role::Summary(0),
            Role::Text(2),
        ]
    }

    fn hidden() -> Tensor<f64> {
        Tensor::from_fn(&[4, 2], |i| 0.3 * i as f64 - 0.5)
    }

    #[test]
    fn anneal_boundaries() {
        let s = AnnealSchedule::new(50, 150).unwrap();
        assert_eq!(anneal_lambda(0, &s), 1.0);
        assert_eq!(anneal_lambda(50, &s), 1.0);
        assert_eq!(anneal_lambda(100, &s), 0.5);
        assert_eq!(anneal_lambda(150, &s), 0.0);
        assert_eq!(anneal_lambda(400, &s), 0.0);
        let grid: Vec<f64> = (0..300).map(|x| anneal_lambda(x, &s)).collect();
        assert!(grid.windows(2).all(|w| w[1] <= w[0]));
        assert!(AnnealSchedule::new(5, 5).is_err());
    }

    #[test]
    fn total_loss_combination() {
        let w = DistillWeights::new(0.5, 0.25).unwrap();
        assert_eq!(total_loss(1.0, 2.0, 3.0, &w), 2.75);
        assert_eq!(
            total_loss(1.0, 2.0, 3.0, &DistillWeights::new(0.0, 0.0).unwrap()),
            1.0
        );
        assert!(DistillWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn mse_hand_cases() {
        let t = vec![Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()];
        let s = vec![Tensor::from_rows(&[vec![9.0, 9.0], vec![0.0, 1.0]]).unwrap()];
        assert_eq!(mse_align(&t, &s, &[1]).unwrap(), 2.0);
        assert_eq!(mse_align(&t, &t, &[0]).unwrap(), 0.0);
        let s3 = vec![Tensor::from_rows(&[vec![9.0, 9.0], vec![-2.0, -1.0]]).unwrap()];
        assert_eq!(mse_align(&t, &s3, &[1]).unwrap(), 18.0);
        assert!(mse_align(&t, &[], &[0]).is_err());
    }

    #[test]
    fn kl_hand_cases() {
        let p = Tensor::from_rows(&[vec![0.0f64, f64::NEG_INFINITY]]).unwrap();
        let q = Tensor::from_rows(&[vec![0.0f64, 0.0]]).unwrap();
        assert!((kl_from_logits(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(kl_from_logits(&q, &q).unwrap(), 0.0);
        let w = Tensor::from_rows(&[vec![1.0, -1.0, 0.5], vec![0.2, 0.1, -0.3]]).unwrap();
        let h = hidden();
        assert!(kl_logits(&h, &h.map(|x| x * 1.7), &w).unwrap() >= 0.0);
    }

    #[test]
    fn row_wise_projection_rules() {
        let l = layer(0.0);
        let shared = SummaryProjection {
            wq: l.wq.clone(),
            wk: l.wk.clone(),
            wv: l.wv.clone(),
        };
        let (q, k, v) = student_qkv(&hidden(), &l, &shared, &roles()).unwrap();
        assert_eq!(q, matmul(&hidden(), &l.wq).unwrap());
        assert_eq!(k, matmul(&hidden(), &l.wk).unwrap());
        assert_eq!(v, matmul(&hidden(), &l.wv).unwrap());

        let doubled = SummaryProjection {
            wk: l.wk.map(|x| 2.0 * x),
            ..shared.clone()
        };
        let (_, k2, _) = student_qkv(&hidden(), &l, &doubled, &roles()).unwrap();
        for r in 0..4 {
            let factor = if r == 2 { 2.0 } else { 1.0 };
            for (a, b) in k2.row(r).iter().zip(k.row(r)) {
                assert_eq!(*a, factor * b);
            }
        }
        let text_only = vec![Role::Text(0); 4];
        assert_eq!(
            student_qkv(&hidden(), &l, &doubled, &text_only).unwrap().1,
            k
        );

        let tripled = SummaryProjection {
            wk: l.wk.map(|x| 3.0 * x),
            ..shared.clone()
        };
        let (_, k3, _) = interpolated_qkv(&hidden(), &l, &tripled, &roles(), 0.5).unwrap();
        for (a, b) in k3.row(2).iter().zip(k.row(2)) {
            assert!((a - 2.0 * b).abs() < 1e-15);
        }
        assert_eq!(k3.row(0), k.row(0));
        let at_one = interpolated_qkv(&hidden(), &l, &doubled, &roles(), 1.0).unwrap();
        assert_eq!(
            at_one,
            student_qkv(&hidden(), &l, &doubled, &roles()).unwrap()
        );
        let at_zero = interpolated_qkv(&hidden(), &l, &doubled, &roles(), 0.0).unwrap();
        assert_eq!(at_zero.1, k);
        assert!(interpolated_qkv(&hidden(), &l, &doubled, &roles(), 1.5).is_err());
        let bad = SummaryProjection {
            wq: Tensor::zeros(&[3, 2]),
            ..shared
        };
        assert!(student_qkv(&hidden(), &l, &bad, &roles()).is_err());
    }

    fn perturbed(cfg: &ModelConfig) -> (Params<f64>, SummaryProjections<f64>) {
        let p = Params::<f64>::init(cfg).unwrap();
        let mut s = SummaryProjections::from_params(cfg, &p);
        for (i, t) in s.tensors_mut().into_iter().enumerate() {
            for (j, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.3 * ((i * 31 + j) as f64).sin();
            }
        }
        (p, s)
    }

    #[test]
    fn lambda_zero_projections_are_removable() {
        let cfg = cfg();
        let (p, s) = perturbed(&cfg);
        let tokens: Vec<usize> = (0..11).map(|i| (i * 3) % 10).collect();
        let plain = forward(&cfg, &p, &tokens).unwrap();
        let branch = SummaryBranch {
            projections: &s,
            lambda: 0.0,
        };
        let with = forward_with(&cfg, &p, &tokens, Some(&branch)).unwrap();
        assert_eq!(plain.logits, with.logits);
        assert_eq!(plain.attn_outputs, with.attn_outputs);
        let branch = SummaryBranch {
            projections: &s,
            lambda: 0.5,
        };
        let mixed = forward_with(&cfg, &p, &tokens, Some(&branch)).unwrap();
        assert_ne!(plain.logits, mixed.logits);
    }

    #[test]
    fn teacher_ignores_projections_and_lambda() {
        let cfg = cfg();
        let (p, _) = perturbed(&cfg);
        let tokens = [1, 2, 3, 4, 5, 6];
        let a = teacher_targets(&cfg, &p, &tokens).unwrap();
        assert_eq!(a.attn_outputs[0].rows(), 6);
        let total: f64 = a.probs.row(0).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mse_ignores_summary_rows() {
        let teacher = vec![Tensor::from_fn(&[3, 2], |i| i as f64)];
        let mut student = vec![Tensor::from_fn(&[4, 2], |i| 0.5 * i as f64)];
        let text = [0, 1, 3];
        let before = mse_align(&teacher, &student, &text).unwrap();
        student[0].row_mut(2).iter_mut().for_each(|x| *x += 100.0);
        assert_eq!(before, mse_align(&teacher, &student, &text).unwrap());
    }

    #[test]
    fn total_loss_gradients_match_finite_differences() {
        let cfg = cfg();
        let (p, s) = perturbed(&cfg);
        let sample = Sample {
            tokens: vec![3, 1, 4, 1, 5, 9, 2, 6, 5],
            targets: vec![
                Some(1),
                Some(4),
                None,
                Some(5),
                Some(9),
                Some(2),
                Some(6),
                Some(5),
                Some(3),
            ],
        };
        // The teacher is a different snapshot so every term is active.
        let mut teacher = p.clone();
        for t in teacher.tensors_mut() {
            t.data_mut()
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x += 0.05 * (i as f64).cos());
        }
        let targets = teacher_targets(&cfg, &teacher, &sample.tokens).unwrap();
        let w = DistillWeights::new(0.7, 1.3).unwrap();
        for lambda in [0.0, 0.4, 1.0] {
            let (_, gp, gs) =
                distill_loss_and_grads(&cfg, &p, &s, &targets, &sample, lambda, &w).unwrap();
            let loss = |p: &Params<f64>, s: &SummaryProjections<f64>| {
                distill_loss_and_grads(&cfg, p, s, &targets, &sample, lambda, &w)
                    .unwrap()
                    .0
                    .total
            };
            let err = crate::toymodel::gradcheck::compare_params(&p, &gp, 1e-5, |q| loss(q, &s));
            assert!(err < 1e-4, "λ={lambda}: base weights {err}");
            let flat: Vec<f64> = s.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
            let analytic: Vec<f64> = gs
                .tensors()
                .iter()
                .flat_map(|t| t.data().to_vec())
                .collect();
            let fd: Vec<f64> = (0..flat.len())
                .map(|i| {
                    let eval = |d: f64| {
                        let mut q = s.clone();
                        let mut k = i;
                        for t in q.tensors_mut() {
                            if k < t.len() {
                                t.data_mut()[k] += d;
                                break;
                            }
                            k -= t.len();
                        }
                        loss(&p, &q)
                    };
                    (eval(1e-5) - eval(-1e-5)) / 2e-5
                })
                .collect();
            let err = crate::toymodel::gradcheck::rel_error(&analytic, &fd);
            assert!(err < 1e-4, "λ={lambda}: summary projections {err}");
            let norm = crate::toymodel::gradcheck::l2(&analytic);
            if lambda > 0.0 {
                assert!(norm > 1e-8, "W_S receives gradient when λ > 0");
            } else {
                assert_eq!(norm, 0.0);
            }
        }
    }

    #[test]
    fn distill_run_reports_lambda_schedule() {
        let cfg = ModelConfig {
            arch: "ksa".parse().unwrap(),
            ..cfg()
        };
        let task = Task::copy(4, 9).unwrap();
        let mut p = Params::<f64>::init(&cfg).unwrap();
        let mut s = SummaryProjections::from_params(&cfg, &p);
        let dc = DistillConfig {
            steps: 12,
            batch_size: 2,
            lr: 1e-3,
            schedule: AnnealSchedule::new(3, 9).unwrap(),
            weights: DistillWeights::default(),
            clip: Some(1.0),
            seed: 1,
        };
        let rows = distill(&cfg, &mut p, &mut s, &task, &dc).unwrap();
        assert_eq!(rows[0].lambda, 1.0);
        assert_eq!(rows[5].lambda, 0.5);
        assert_eq!(rows[11].lambda, 0.0);
        // Student starts as the teacher: both alignment terms start near 0.
        assert!(rows[0].loss_mse > 0.0 || rows[0].loss_kl >= 0.0);
        let csv = distill_csv(&rows);
        assert!(csv.starts_with("step,lambda,loss_lm,loss_mse,loss_kl,total\n1,1,"));
    }
}
