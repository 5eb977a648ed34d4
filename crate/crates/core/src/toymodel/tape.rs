//! Minimal reverse-mode tape over row-major matrices.
//!
//! Nodes are appended in evaluation order; `backward` walks them in reverse
//! and accumulates gradients. Only the operations the toy decoder and the
//! distillation losses need are provided.

use std::sync::Arc;

use crate::error::{KsaError, Result};
use crate::masking::VisibilityMask;
use crate::numerics::{matmul, matmul_nt, matmul_tn, rotate_rows, transpose, RopeConfig, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Visible key lists per query row, shared between layers of one forward.
#[derive(Debug)]
pub struct MaskRows {
    rows: Vec<Vec<usize>>,
}

impl MaskRows {
    pub fn new(mask: &VisibilityMask) -> Arc<Self> {
        Arc::new(Self {
            rows: (0..mask.size()).map(|q| mask.visible(q)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn row(&self, q: usize) -> &[usize] {
        &self.rows[q]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttnShape {
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    Silu(Var),
    Rope {
        x: Var,
        positions: Vec<f64>,
        heads: usize,
        cfg: RopeConfig,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<MaskRows>,
        shape: AttnShape,
        /// Per head, per query: weights aligned with `mask.row(q)`.
        probs: Vec<Vec<T>>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MergeRows {
        base: Var,
        over: Var,
        take: Vec<bool>,
    },
    Transpose(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Tensor<T>,
        count: usize,
    },
    MseConst {
        x: Var,
        target: Tensor<T>,
        denom: T,
    },
    KlConst {
        logits: Var,
        teacher: Tensor<T>,
        student: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape2<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        debug_assert_eq!(value.rank(), 2);
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = crate::numerics::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = crate::numerics::scale(self.value(a), c);
        self.push(v, Op::Scale(a, c))
    }

    /// `λ·a + (1−λ)·b`.
    pub fn lerp(&mut self, a: Var, b: Var, lambda: T) -> Result<Var> {
        let sa = self.scale(a, lambda);
        let sb = self.scale(b, T::one() - lambda);
        self.add(sa, sb)
    }

    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= t.rows()) {
            return Err(KsaError::OutOfRange {
                index: bad,
                len: t.rows(),
            });
        }
        let v = t.select_rows(ids);
        Ok(self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gain);
        let (rows, cols) = shape2(xv);
        if gv.len() != cols {
            return Err(KsaError::Shape("rms norm gain width".into()));
        }
        let eps = T::lit(1e-6);
        let mut out = Tensor::zeros(&[rows, cols]);
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().fold(T::zero(), |a, &v| a + v * v) / T::lit(cols as f64);
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(row).zip(gv.data()) {
                *o = v * inv * g;
            }
        }
        Ok(self.push(out, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a / (T::one() + (-a).exp()));
        self.push(v, Op::Silu(x))
    }

    /// Rotates `x: tokens×(heads·head_dim)` by per-row positions.
    pub fn rope(
        &mut self,
        x: Var,
        positions: &[f64],
        heads: usize,
        cfg: RopeConfig,
    ) -> Result<Var> {
        let mut v = self.value(x).clone();
        if v.row_len() != heads * cfg.head_dim || v.rows() != positions.len() {
            return Err(KsaError::Shape("rope input width / positions".into()));
        }
        rotate_rows(v.data_mut(), positions, heads, &cfg, 1.0);
        Ok(self.push(
            v,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                heads,
                cfg,
            },
        ))
    }

    /// Masked multi-head attention on `q: L×(h·d)`, `k`/`v: L×(g·d)`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Arc<MaskRows>,
        shape: AttnShape,
    ) -> Result<Var> {
        let AttnShape {
            heads,
            kv_heads,
            head_dim: d,
        } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let l = qv.rows();
        if mask.len() != l
            || kv.rows() != l
            || qv.row_len() != heads * d
            || kv.row_len() != kv_heads * d
        {
            return Err(KsaError::Shape("attention operand shapes".into()));
        }
        let group = heads / kv_heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut out = Tensor::zeros(&[l, heads * d]);
        let mut probs = Vec::with_capacity(heads * l);
        for h in 0..heads {
            let g = h / group;
            for i in 0..l {
                let vis = mask.row(i);
                if vis.is_empty() {
                    return Err(KsaError::EmptyAttentionRow(i));
                }
                let qi = &qv.row(i)[h * d..(h + 1) * d];
                let mut w: Vec<T> = vis
                    .iter()
                    .map(|&j| crate::numerics::dot(qi, &kv.row(j)[g * d..(g + 1) * d]) * scale)
                    .collect();
                crate::numerics::softmax_in_place(&mut w)?;
                let o = &mut out.row_mut(i)[h * d..(h + 1) * d];
                for (&j, &p) in vis.iter().zip(&w) {
                    for (x, &val) in o.iter_mut().zip(&vv.row(j)[g * d..(g + 1) * d]) {
                        *x += p * val;
                    }
                }
                probs.push(w);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                mask,
                shape,
                probs,
            },
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let v = self.value(x).select_rows(rows);
        self.push(
            v,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        )
    }

    /// Row `r` from `over` where `take[r]`, else from `base`.
    pub fn merge_rows(&mut self, base: Var, over: Var, take: &[bool]) -> Result<Var> {
        let (b, o) = (self.value(base), self.value(over));
        if b.shape() != o.shape() || take.len() != b.rows() {
            return Err(KsaError::Shape("merge rows operands".into()));
        }
        let mut v = b.clone();
        for (r, &t) in take.iter().enumerate() {
            if t {
                v.row_mut(r).copy_from_slice(o.row(r));
            }
        }
        Ok(self.push(
            v,
            Op::MergeRows {
                base,
                over,
                take: take.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let v = transpose(self.value(x))?;
        Ok(self.push(v, Op::Transpose(x)))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let rows: Vec<usize> = (start..end).collect();
        let v = self.value(x).select_rows(&rows);
        self.push(v, Op::SliceRows { x, start })
    }

    /// Mean cross-entropy over rows that carry a target. Zero when none do.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, cols) = shape2(lv);
        if targets.len() != rows {
            return Err(KsaError::Shape(format!(
                "{} targets for {rows} rows",
                targets.len()
            )));
        }
        let mut probs = lv.clone();
        let mut total = T::zero();
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let lse = log_sum_exp(lv.row(r));
            for (p, &z) in probs.row_mut(r).iter_mut().zip(lv.row(r)) {
                *p = (z - lse).exp();
            }
            if let Some(t) = *t {
                if t >= cols {
                    return Err(KsaError::OutOfRange {
                        index: t,
                        len: cols,
                    });
                }
                total += lse - lv.row(r)[t];
                count += 1;
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::lit(count as f64)
        };
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![loss])?,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// `Σ (x − target)² / denom` with `target` held constant.
    pub fn mse_const(&mut self, x: Var, target: &Tensor<T>, denom: T) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return Err(KsaError::Shape("mse operand shapes".into()));
        }
        let sum = xv
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |a, (&p, &q)| a + (p - q) * (p - q));
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![sum / denom])?,
            Op::MseConst {
                x,
                target: target.clone(),
                denom,
            },
        ))
    }

    /// Mean over rows of `KL(p ‖ softmax(logits))` for constant teacher
    /// probabilities `p`; student probabilities are floored at `floor`.
    pub fn kl_const(&mut self, teacher: &Tensor<T>, logits: Var, floor: T) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != teacher.shape() {
            return Err(KsaError::Shape("kl operand shapes".into()));
        }
        let (rows, _) = shape2(lv);
        let log_floor = floor.ln();
        let mut student = lv.clone();
        let mut total = T::zero();
        for r in 0..rows {
            let lse = log_sum_exp(lv.row(r));
            for ((s, &z), &p) in student
                .row_mut(r)
                .iter_mut()
                .zip(lv.row(r))
                .zip(teacher.row(r))
            {
                let log_q = (z - lse).max(log_floor);
                *s = (z - lse).exp();
                if p > T::zero() {
                    total += p * (p.ln() - log_q);
                }
            }
        }
        let loss = if rows == 0 {
            T::zero()
        } else {
            total / T::lit(rows as f64)
        };
        Ok(self.push(
            Tensor::new(vec![1, 1], vec![loss])?,
            Op::KlConst {
                logits,
                teacher: teacher.clone(),
                student,
            },
        ))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    fn accumulate(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(vec![1, 1], vec![T::one()])?);
        for idx in (0..=output.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(gy);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = matmul_nt(&gy, self.value(*b))?;
                    let gb = matmul_tn(self.value(*a), &gy)?;
                    Self::accumulate(&mut grads, *a, ga);
                    Self::accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    Self::accumulate(&mut grads, *a, gy.clone());
                    Self::accumulate(&mut grads, *b, gy);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    Self::accumulate(&mut grads, *a, gy.map(|x| x * c));
                }
                Op::Gather { table, ids } => {
                    let mut gt = Tensor::zeros(self.value(*table).shape());
                    for (r, &id) in ids.iter().enumerate() {
                        for (a, &b) in gt.row_mut(id).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    Self::accumulate(&mut grads, *table, gt);
                }
                Op::RmsNorm { x, gain, inv_rms } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gain);
                    let (rows, cols) = shape2(xv);
                    let mut gx = Tensor::zeros(&[rows, cols]);
                    let mut gg = Tensor::zeros(gv.shape());
                    let n = T::lit(cols as f64);
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let (xr, gyr) = (xv.row(r), gy.row(r));
                        let mut dot = T::zero();
                        for c in 0..cols {
                            gg.data_mut()[c] += gyr[c] * xr[c] * inv;
                            dot += gyr[c] * gv.data()[c] * xr[c];
                        }
                        let coef = inv * inv * inv * dot / n;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = gyr[c] * gv.data()[c] * inv - xr[c] * coef;
                        }
                    }
                    Self::accumulate(&mut grads, *x, gx);
                    Self::accumulate(&mut grads, *gain, gg);
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    let mut gx = gy;
                    for (g, &a) in gx.data_mut().iter_mut().zip(xv.data()) {
                        let s = T::one() / (T::one() + (-a).exp());
                        *g *= s * (T::one() + a * (T::one() - s));
                    }
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::Rope {
                    x,
                    positions,
                    heads,
                    cfg,
                } => {
                    let mut gx = gy;
                    rotate_rows(gx.data_mut(), positions, *heads, cfg, -1.0);
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    mask,
                    shape,
                    probs,
                } => {
                    let (gq, gk, gv) =
                        self.attention_backward(*q, *k, *v, mask, *shape, probs, &gy);
                    Self::accumulate(&mut grads, *q, gq);
                    Self::accumulate(&mut grads, *k, gk);
                    Self::accumulate(&mut grads, *v, gv);
                }
                Op::SelectRows { x, rows } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for (r, &src) in rows.iter().enumerate() {
                        for (a, &b) in gx.row_mut(src).iter_mut().zip(gy.row(r)) {
                            *a += b;
                        }
                    }
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::MergeRows { base, over, take } => {
                    let mut gb = gy.clone();
                    let mut go = gy;
                    for (r, &t) in take.iter().enumerate() {
                        let zeroed = if t { gb.row_mut(r) } else { go.row_mut(r) };
                        zeroed.iter_mut().for_each(|x| *x = T::zero());
                    }
                    Self::accumulate(&mut grads, *base, gb);
                    Self::accumulate(&mut grads, *over, go);
                }
                Op::Transpose(x) => {
                    Self::accumulate(&mut grads, *x, transpose(&gy)?);
                }
                Op::SliceRows { x, start } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    for r in 0..gy.rows() {
                        gx.row_mut(start + r).copy_from_slice(gy.row(r));
                    }
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let mut gl = Tensor::zeros(probs.shape());
                    if *count > 0 {
                        let c = gy.data()[0] / T::lit(*count as f64);
                        for (r, t) in targets.iter().enumerate() {
                            if let Some(t) = *t {
                                let row = gl.row_mut(r);
                                row.copy_from_slice(probs.row(r));
                                row[t] -= T::one();
                                row.iter_mut().for_each(|x| *x *= c);
                            }
                        }
                    }
                    Self::accumulate(&mut grads, *logits, gl);
                }
                Op::MseConst { x, target, denom } => {
                    let c = gy.data()[0] * T::lit(2.0) / *denom;
                    let xv = self.value(*x);
                    let gx = Tensor::new(
                        xv.shape().to_vec(),
                        xv.data()
                            .iter()
                            .zip(target.data())
                            .map(|(&a, &b)| (a - b) * c)
                            .collect(),
                    )?;
                    Self::accumulate(&mut grads, *x, gx);
                }
                Op::KlConst {
                    logits,
                    teacher,
                    student,
                } => {
                    let rows = student.rows().max(1);
                    let c = gy.data()[0] / T::lit(rows as f64);
                    let gl = Tensor::new(
                        student.shape().to_vec(),
                        student
                            .data()
                            .iter()
                            .zip(teacher.data())
                            .map(|(&q, &p)| (q - p) * c)
                            .collect(),
                    )?;
                    Self::accumulate(&mut grads, *logits, gl);
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &MaskRows,
        shape: AttnShape,
        probs: &[Vec<T>],
        gy: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let AttnShape {
            heads,
            kv_heads,
            head_dim: d,
        } = shape;
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let l = qv.rows();
        let group = heads / kv_heads;
        let scale = T::one() / T::lit(d as f64).sqrt();
        let mut gq = Tensor::zeros(qv.shape());
        let mut gk = Tensor::zeros(kv.shape());
        let mut gv = Tensor::zeros(vv.shape());
        let mut dp = Vec::new();
        for h in 0..heads {
            let g = h / group;
            for i in 0..l {
                let vis = mask.row(i);
                let p = &probs[h * l + i];
                let go = &gy.row(i)[h * d..(h + 1) * d];
                dp.clear();
                let mut weighted = T::zero();
                for (&j, &pj) in vis.iter().zip(p) {
                    let val = crate::numerics::dot(go, &vv.row(j)[g * d..(g + 1) * d]);
                    weighted += pj * val;
                    dp.push(val);
                    for (a, &b) in gv.row_mut(j)[g * d..(g + 1) * d].iter_mut().zip(go) {
                        *a += pj * b;
                    }
                }
                let qi: Vec<T> = qv.row(i)[h * d..(h + 1) * d].to_vec();
                for ((&j, &pj), &dpj) in vis.iter().zip(p).zip(&dp) {
                    let ds = pj * (dpj - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kj = &kv.row(j)[g * d..(g + 1) * d];
                    for (a, &b) in gq.row_mut(i)[h * d..(h + 1) * d].iter_mut().zip(kj) {
                        *a += ds * b;
                    }
                    for (a, &b) in gk.row_mut(j)[g * d..(g + 1) * d].iter_mut().zip(&qi) {
                        *a += ds * b;
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum = row.iter().fold(T::zero(), |a, &z| a + (z - max).exp());
    max + sum.ln()
}
