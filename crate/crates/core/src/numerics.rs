//! Dense row-major tensors, rotary position embedding and a masked,
//! max-subtracted softmax.
//!
//! Every reduction runs left to right in index order, so reruns with the same
//! inputs and element width are bit-identical.

use crate::error::{KsaError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(KsaError::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    /// 2-D tensor from nested rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KsaError::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(
            &[n, n],
            |i| if i / n == i % n { T::one() } else { T::zero() },
        )
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the leading dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per leading index.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let w = self.row_len();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &dim)| {
            debug_assert!(i < dim);
            acc * dim + i
        })
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(KsaError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers leading-dimension rows in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| m.max((*a - *b).abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(KsaError::Shape(format!(
                "{what}: expected a matrix, got shape {s:?}"
            ))),
        }
    }
}

/// `a · b` for `a: m×k`, `b: k×n`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul lhs")?;
    let (k2, n) = b.dims2("matmul rhs")?;
    if k != k2 {
        return Err(KsaError::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `a · bᵀ` for `a: m×k`, `b: n×k`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul_nt lhs")?;
    let (n, k2) = b.dims2("matmul_nt rhs")?;
    if k != k2 {
        return Err(KsaError::Shape(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ")));
    }
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(arow, brow);
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `aᵀ · b` for `a: k×m`, `b: k×n`.
pub fn matmul_tn<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (k, m) = a.dims2("matmul_tn lhs")?;
    let (k2, n) = b.dims2("matmul_tn rhs")?;
    if k != k2 {
        return Err(KsaError::Shape(format!("matmul_tn ({k}x{m})ᵀ · {k2}x{n}")));
    }
    let mut out = vec![T::zero(); m * n];
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape != b.shape {
        return Err(KsaError::Shape(format!(
            "add {:?} + {:?}",
            a.shape, b.shape
        )));
    }
    Tensor::new(
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(&x, &y)| x + y).collect(),
    )
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    a.map(|x| x * c)
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Row-wise softmax of a `rows×cols` matrix.
///
/// `mask_row_bias` has the same shape and is added to the logits before
/// normalisation; `-inf` entries are masked and come out exactly zero.
pub fn softmax_rows<T: Scalar>(
    x: &Tensor<T>,
    mask_row_bias: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2("softmax_rows")?;
    if let Some(b) = mask_row_bias {
        if b.shape != x.shape {
            return Err(KsaError::Shape(format!(
                "softmax bias {:?} vs logits {:?}",
                b.shape, x.shape
            )));
        }
    }
    let mut out = vec![T::zero(); rows * cols];
    let mut logits = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let bias = mask_row_bias.map_or(T::zero(), |b| b.data[r * cols + c]);
            logits[c] = x.data[r * cols + c] + bias;
        }
        softmax_in_place(&mut logits).map_err(|_| KsaError::EmptyAttentionRow(r))?;
        out[r * cols..(r + 1) * cols].copy_from_slice(&logits);
    }
    Tensor::new(vec![rows, cols], out)
}

/// Softmax over one row; `-inf` entries map to exactly zero.
/// Errors when no finite entry remains.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) -> Result<()> {
    let max = row
        .iter()
        .copied()
        .filter(|v| *v != T::neg_infinity())
        .fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return Err(KsaError::EmptyAttentionRow(0));
    }
    if !max.is_finite() {
        return Err(KsaError::NonFinite("softmax"));
    }
    let mut denom = T::zero();
    for v in row.iter_mut() {
        *v = if *v == T::neg_infinity() {
            T::zero()
        } else {
            (*v - max).exp()
        };
        denom += *v;
    }
    for v in row.iter_mut() {
        *v /= denom;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RopeConfig {
    pub theta: f64,
    pub head_dim: usize,
}

impl RopeConfig {
    pub fn new(theta: f64, head_dim: usize) -> Result<Self> {
        let cfg = Self { theta, head_dim };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(KsaError::Config(format!(
                "rope head_dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if !(self.theta > 0.0) || !self.theta.is_finite() {
            return Err(KsaError::Config(format!(
                "rope theta must be positive, got {}",
                self.theta
            )));
        }
        Ok(())
    }

    /// Rotation frequency of pair `i`: `theta^(-2i/head_dim)`.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.theta.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }
}

/// Rotates adjacent pairs `(x[2i], x[2i+1])` of every head by
/// `position · theta^(-2i/head_dim)`. `x` is `tokens×heads×head_dim`.
pub fn rope_apply<T: Scalar>(
    x: &Tensor<T>,
    positions: &[i64],
    cfg: &RopeConfig,
) -> Result<Tensor<T>> {
    let pos: Vec<f64> = positions.iter().map(|&p| p as f64).collect();
    rope_apply_at(x, &pos, cfg)
}

/// [`rope_apply`] with real-valued positions.
pub fn rope_apply_at<T: Scalar>(
    x: &Tensor<T>,
    positions: &[f64],
    cfg: &RopeConfig,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    let [tokens, heads, head_dim] = x.shape[..] else {
        return Err(KsaError::Shape(format!(
            "rope expects tokens×heads×head_dim, got {:?}",
            x.shape
        )));
    };
    if head_dim != cfg.head_dim {
        return Err(KsaError::Config(format!(
            "rope head_dim {} does not match tensor head_dim {head_dim}",
            cfg.head_dim
        )));
    }
    if positions.len() != tokens {
        return Err(KsaError::Shape(format!(
            "{} positions for {tokens} tokens",
            positions.len()
        )));
    }
    let mut out = x.clone();
    rotate_rows(&mut out.data, positions, heads, cfg, 1.0);
    Ok(out)
}

/// In-place pairwise rotation of a flat `tokens×(heads·head_dim)` buffer.
/// `sign = -1` applies the inverse rotation.
pub(crate) fn rotate_rows<T: Scalar>(
    data: &mut [T],
    positions: &[f64],
    heads: usize,
    cfg: &RopeConfig,
    sign: f64,
) {
    let hd = cfg.head_dim;
    let freqs: Vec<f64> = (0..hd / 2).map(|i| cfg.frequency(i)).collect();
    let width = heads * hd;
    for (t, &p) in positions.iter().enumerate() {
        let row = &mut data[t * width..(t + 1) * width];
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * p * f;
            let (s, c) = angle.sin_cos();
            let (s, c) = (T::lit(s), T::lit(c));
            for h in 0..heads {
                let base = h * hd + 2 * i;
                let (a, b) = (row[base], row[base + 1]);
                row[base] = a * c - b * s;
                row[base + 1] = a * s + b * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_symmetric_row() {
        let s = softmax_rows(&m(&[&[0.0, 0.0]]), None).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let s = softmax_rows(&m(&[&[1000.0, 0.0]]), None).unwrap();
        assert!(s.is_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_ln2_row() {
        let s = softmax_rows(&m(&[&[std::f64::consts::LN_2, 0.0]]), None).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masked_entries_are_exactly_zero() {
        let bias = m(&[&[0.0, f64::NEG_INFINITY, 0.0]]);
        let s = softmax_rows(&m(&[&[1.0, 5.0, 1.0]]), Some(&bias)).unwrap();
        assert_eq!(s.data()[1], 0.0);
        assert_eq!(s.data()[0], 0.5);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let bias = m(&[&[0.0, 0.0], &[f64::NEG_INFINITY, f64::NEG_INFINITY]]);
        let err = softmax_rows(&m(&[&[1.0, 2.0], &[1.0, 2.0]]), Some(&bias)).unwrap_err();
        assert_eq!(err, KsaError::EmptyAttentionRow(1));
        assert!(err.to_string().contains("empty attention row"));
    }

    #[test]
    fn f32_softmax_sums_to_one() {
        let x = Tensor::<f32>::from_fn(&[4, 7], |i| (i as f32 * 0.37).sin() * 5.0);
        let s = softmax_rows(&x, None).unwrap();
        for r in 0..4 {
            let sum: f32 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < f32::softmax_tolerance());
        }
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 2, 4], |i| i as f64 + 0.5);
        let cfg = RopeConfig::new(10_000.0, 4).unwrap();
        assert_eq!(rope_apply(&x, &[0], &cfg).unwrap(), x);
    }

    #[test]
    fn rope_quarter_turn() {
        let x = Tensor::<f64>::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap();
        let cfg = RopeConfig::new(1.0, 2).unwrap();
        let half_pi = std::f64::consts::FRAC_PI_2;
        let y = rope_apply_at(&x, &[half_pi], &cfg).unwrap();
        assert!((y.data()[0] - half_pi.cos()).abs() < 1e-15);
        assert!((y.data()[1] - half_pi.sin()).abs() < 1e-15);
    }

    #[test]
    fn rope_rejects_odd_head_dim() {
        assert!(matches!(
            RopeConfig::new(10_000.0, 3),
            Err(KsaError::Config(_))
        ));
        let x = Tensor::<f64>::zeros(&[1, 1, 3]);
        let cfg = RopeConfig {
            theta: 10_000.0,
            head_dim: 3,
        };
        assert!(rope_apply(&x, &[1], &cfg).is_err());
    }

    #[test]
    fn matmul_by_hand() {
        let c = matmul(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn identity_is_neutral() {
        let a = Tensor::<f64>::from_fn(&[3, 3], |i| i as f64 * 1.5 - 2.0);
        assert_eq!(matmul(&Tensor::identity(3), &a).unwrap(), a);
    }

    #[test]
    fn transpose_of_product() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| ((i * 7 % 11) as f64).sin());
        let b = Tensor::<f64>::from_fn(&[4, 2], |i| ((i * 5 % 13) as f64).cos());
        let lhs = transpose(&matmul(&a, &b).unwrap()).unwrap();
        let rhs = matmul(&transpose(&b).unwrap(), &transpose(&a).unwrap()).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let nt = matmul_nt(&a, &transpose(&b).unwrap()).unwrap();
        assert!(nt.max_abs_diff(&matmul(&a, &b).unwrap()) < 1e-12);
        let tn = matmul_tn(&transpose(&a).unwrap(), &b).unwrap();
        assert!(tn.max_abs_diff(&matmul(&a, &b).unwrap()) < 1e-12);
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matmul(&a, &a).is_err());
        assert!(add(&a, &Tensor::zeros(&[3, 2])).is_err());
        assert!(Tensor::<f64>::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let a = Tensor::<f32>::from_fn(&[5, 6], |i| (i as f32).sin());
        let b = Tensor::<f32>::from_fn(&[6, 3], |i| (i as f32).cos());
        assert_eq!(matmul(&a, &b).unwrap(), matmul(&a, &b).unwrap());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(row in prop::collection::vec(-20.0f64..20.0, 1..12), c in -50.0f64..50.0) {
            let n = row.len();
            let x = Tensor::new(vec![1, n], row.clone()).unwrap();
            let shifted = Tensor::new(vec![1, n], row.iter().map(|v| v + c).collect()).unwrap();
            let a = softmax_rows(&x, None).unwrap();
            let b = softmax_rows(&shifted, None).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-6);
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(a.data().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn rope_is_pairwise_isometry_and_invertible(
            vals in prop::collection::vec(-3.0f64..3.0, 12),
            p in -5000i64..5000,
        ) {
            let x = Tensor::new(vec![1, 3, 4], vals).unwrap();
            let cfg = RopeConfig::new(10_000.0, 4).unwrap();
            let y = rope_apply(&x, &[p], &cfg).unwrap();
            for pair in 0..6 {
                let n0 = x.data()[2 * pair].hypot(x.data()[2 * pair + 1]);
                let n1 = y.data()[2 * pair].hypot(y.data()[2 * pair + 1]);
                prop_assert!((n0 - n1).abs() < 1e-6);
            }
            let back = rope_apply(&y, &[-p], &cfg).unwrap();
            prop_assert!(back.max_abs_diff(&x) < 1e-6);
        }
    }
}
