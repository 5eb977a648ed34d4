//! Closed-form per-layer KV-cache sizes and compression rates.
//!
//! Entry counts are generic over [`CostScalar`] so the same formulas run in
//! `f64` for curves and in exact rationals ([`crate::ExactCost`]) when
//! checking that combined compression rates multiply.

use std::fmt::{self, Debug, Write as _};
use std::str::FromStr;

use num_traits::{FromPrimitive, Num, ToPrimitive};
use serde::Serialize;

use crate::error::{KsaError, Result};
use crate::kvcache::{KsaKvCache, TokenQkv};
use crate::masking::KsaConfig;
use crate::numerics::Tensor;
use crate::toymodel::{LayerKind, LayerSchedule};

pub trait CostScalar: Num + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive {}

impl<T: Num + Clone + PartialOrd + Debug + FromPrimitive + ToPrimitive> CostScalar for T {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Mechanism {
    Mha,
    Gqa,
    Mla,
    Gdn,
    Swa,
    Ksa,
    KsaGqa,
    KsaMla,
    /// Summary-attention layers (with GQA heads) interleaved with full GQA
    /// layers at `ratio:1`; reported as the mean entry count per layer.
    HybridKsa,
}

impl Mechanism {
    pub const TABLE: [Mechanism; 8] = [
        Mechanism::Mha,
        Mechanism::Gqa,
        Mechanism::Mla,
        Mechanism::Gdn,
        Mechanism::Swa,
        Mechanism::Ksa,
        Mechanism::KsaGqa,
        Mechanism::KsaMla,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::Mha => "mha",
            Mechanism::Gqa => "gqa",
            Mechanism::Mla => "mla",
            Mechanism::Gdn => "gdn",
            Mechanism::Swa => "swa",
            Mechanism::Ksa => "ksa",
            Mechanism::KsaGqa => "ksa+gqa",
            Mechanism::KsaMla => "ksa+mla",
            Mechanism::HybridKsa => "hybrid-ksa",
        }
    }

    /// Closed form as printed in the summary table.
    pub fn formula(self) -> &'static str {
        match self {
            Mechanism::Mha => "2*n*h*d",
            Mechanism::Gqa => "2*n*g*d",
            Mechanism::Mla => "n*(dc+dr)",
            Mechanism::Gdn => "2*h*d^2",
            Mechanism::Swa => "2*w*g*d",
            Mechanism::Ksa => "2*(n/k)*h*d",
            Mechanism::KsaGqa => "2*(n/k)*g*d",
            Mechanism::KsaMla => "(n/k)*(dc+dr)",
            Mechanism::HybridKsa => "R:1 mix of ksa+gqa, gqa",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mechanism {
    type Err = KsaError;

    fn from_str(s: &str) -> Result<Self> {
        let m = match s.to_ascii_lowercase().as_str() {
            "mha" => Mechanism::Mha,
            "gqa" => Mechanism::Gqa,
            "mla" => Mechanism::Mla,
            "gdn" => Mechanism::Gdn,
            "swa" => Mechanism::Swa,
            "ksa" => Mechanism::Ksa,
            "ksa+gqa" | "ksa-gqa" => Mechanism::KsaGqa,
            "ksa+mla" | "ksa-mla" => Mechanism::KsaMla,
            "hybrid-ksa" => Mechanism::HybridKsa,
            other => return Err(KsaError::Config(format!("unknown mechanism `{other}`"))),
        };
        Ok(m)
    }
}

/// Cost parameters; `None` means "not set".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostParams {
    pub n: Option<u64>,
    pub h: Option<u64>,
    pub g: Option<u64>,
    pub d: Option<u64>,
    pub d_c: Option<u64>,
    pub d_r: Option<u64>,
    pub w: Option<u64>,
    pub k: Option<u64>,
    /// Layer count for hybrid schedules.
    pub layers: Option<u64>,
    /// KSA:Full ratio for hybrid schedules.
    pub ratio: Option<u64>,
    /// Multiply the linear-attention state by the head count.
    pub gdn_per_head: bool,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            n: None,
            h: None,
            g: None,
            d: None,
            d_c: None,
            d_r: None,
            w: None,
            k: None,
            layers: None,
            ratio: None,
            gdn_per_head: true,
        }
    }
}

impl CostParams {
    /// `k=8, h=128, d=128, g=8, d_c=512, d_r=64`.
    pub fn table_defaults(n: u64) -> Self {
        Self {
            n: Some(n),
            h: Some(128),
            g: Some(8),
            d: Some(128),
            d_c: Some(512),
            d_r: Some(64),
            k: Some(8),
            ..Self::default()
        }
    }

    pub fn with_n(mut self, n: u64) -> Self {
        self.n = Some(n);
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CacheCostModel {
    pub mechanism: Mechanism,
    pub params: CostParams,
}

impl CacheCostModel {
    pub fn new(mechanism: Mechanism, params: CostParams) -> Self {
        Self { mechanism, params }
    }
}

fn need<S: CostScalar>(v: Option<u64>, name: &str, m: Mechanism) -> Result<S> {
    let v = v.ok_or_else(|| KsaError::Config(format!("{m} needs parameter `{name}`")))?;
    if v == 0 {
        return Err(KsaError::Config(format!(
            "{m}: parameter `{name}` must be positive"
        )));
    }
    S::from_u64(v).ok_or_else(|| KsaError::Config(format!("{name}={v} not representable")))
}

/// Per-layer KV-cache entries (keys and values together).
pub fn entries<S: CostScalar>(model: &CacheCostModel) -> Result<S> {
    let p = &model.params;
    let m = model.mechanism;
    let two = S::from_u64(2).expect("2");
    let n = || need::<S>(p.n, "n", m);
    let h = || need::<S>(p.h, "h", m);
    let g = || need::<S>(p.g, "g", m);
    let d = || need::<S>(p.d, "d", m);
    let k = || need::<S>(p.k, "k", m);
    let latent = || Ok::<S, KsaError>(need::<S>(p.d_c, "d_c", m)? + need::<S>(p.d_r, "d_r", m)?);
    let value = match m {
        Mechanism::Mha => two * n()? * h()? * d()?,
        Mechanism::Gqa => two * n()? * g()? * d()?,
        Mechanism::Mla => n()? * latent()?,
        Mechanism::Gdn => {
            let dd = d()?;
            let state = two * dd.clone() * dd;
            if p.gdn_per_head {
                state * h()?
            } else {
                state
            }
        }
        Mechanism::Swa => two * need::<S>(p.w, "w", m)? * g()? * d()?,
        Mechanism::Ksa => n()? / k()? * two * h()? * d()?,
        Mechanism::KsaGqa => n()? / k()? * two * g()? * d()?,
        Mechanism::KsaMla => n()? / k()? * latent()?,
        Mechanism::HybridKsa => {
            let layers = p
                .layers
                .ok_or_else(|| KsaError::Config("hybrid-ksa needs `layers`".into()))?;
            let ratio = p
                .ratio
                .ok_or_else(|| KsaError::Config("hybrid-ksa needs `ratio`".into()))?;
            let schedule =
                LayerSchedule::hybrid(layers as usize, LayerKind::Ksa, Some(ratio as usize))?;
            let full = two.clone() * n()? * g()? * d()?;
            let ksa = n()? / k()? * two * g()? * d()?;
            let mut total = S::zero();
            for kind in schedule.kinds() {
                total = total
                    + match kind {
                        LayerKind::Full => full.clone(),
                        _ => ksa.clone(),
                    };
            }
            total / need::<S>(Some(layers), "layers", m)?
        }
    };
    Ok(value)
}

/// `entries(model) / entries(baseline)`, baseline MHA by default.
pub fn compression_rate<S: CostScalar>(
    model: &CacheCostModel,
    baseline: Option<&CacheCostModel>,
) -> Result<S> {
    let base = match baseline {
        Some(b) => *b,
        None => CacheCostModel::new(Mechanism::Mha, model.params),
    };
    if base.params.n != model.params.n
        && !matches!(model.mechanism, Mechanism::Gdn | Mechanism::Swa)
    {
        return Err(KsaError::Config("model and baseline must share n".into()));
    }
    let denom = entries::<S>(&base)?;
    if denom == S::zero() {
        return Err(KsaError::Config("zero baseline".into()));
    }
    Ok(entries::<S>(model)? / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub n: u64,
    pub mechanism: Mechanism,
    pub entries: f64,
    pub bytes: f64,
    pub rate_vs_mha: f64,
}

/// One row per `(n, mechanism)`: entries, bytes (`entries·bytes·layers`)
/// and the rate against MHA at the same `n`.
pub fn curve(
    mechanisms: &[Mechanism],
    params: &CostParams,
    n_values: &[u64],
    bytes_per_element: f64,
    layers: u64,
) -> Result<Vec<CurveRow>> {
    if n_values.is_empty() {
        return Err(KsaError::Config("no sequence lengths".into()));
    }
    if n_values.windows(2).any(|w| w[0] >= w[1]) {
        return Err(KsaError::Config(
            "sequence lengths must be increasing".into(),
        ));
    }
    let mut rows = Vec::with_capacity(n_values.len() * mechanisms.len());
    for &n in n_values {
        let p = params.with_n(n);
        for &m in mechanisms {
            let model = CacheCostModel::new(m, p);
            let e: f64 = entries(&model)?;
            rows.push(CurveRow {
                n,
                mechanism: m,
                entries: e,
                bytes: e * bytes_per_element * layers as f64,
                rate_vs_mha: compression_rate(&model, None)?,
            });
        }
    }
    Ok(rows)
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut s = String::from("n,mechanism,entries,bytes,rate_vs_mha\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.n, r.mechanism, r.entries, r.bytes, r.rate_vs_mha
        );
    }
    s
}

/// Mechanism, formula and compression rate at `params`, one per line.
pub fn rate_table(mechanisms: &[Mechanism], params: &CostParams) -> Result<String> {
    let mut s = format!(
        "{:<12} {:<28} {:>12}\n",
        "mechanism", "kv cache (n -> inf)", "rate vs mha"
    );
    for &m in mechanisms {
        let rate: f64 = compression_rate(&CacheCostModel::new(m, *params), None)?;
        let shown = if m == Mechanism::Mha {
            "-".to_string()
        } else {
            format!("{:.2}%", rate * 100.0)
        };
        let _ = writeln!(s, "{:<12} {:<28} {:>12}", m.name(), m.formula(), shown);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimulationReport {
    /// Entries counted in a driven [`KsaKvCache`], per kv head and direction.
    pub simulated: usize,
    /// Asymptotic `n/k`, same normalisation.
    pub formula: f64,
    pub delta: f64,
    /// `(C+1)·k + C`; `|delta|` never exceeds it.
    pub bound: f64,
}

/// Feeds `n` tokens through a one-head, one-dim cache and compares its entry
/// count with `n/k`.
pub fn simulate_vs_formula(cfg: &KsaConfig, n: usize) -> Result<SimulationReport> {
    if n == 0 {
        return Err(KsaError::Config("n must be at least 1".into()));
    }
    let simulated = simulate_entries(cfg, n)?;
    let formula = n as f64 / cfg.chunk_size as f64;
    let delta = simulated as f64 - formula;
    let bound = ((cfg.sliding_chunks + 1) * cfg.chunk_size + cfg.sliding_chunks) as f64;
    Ok(SimulationReport {
        simulated,
        formula,
        delta,
        bound,
    })
}

fn simulate_entries(cfg: &KsaConfig, n: usize) -> Result<usize> {
    let mut cache = KsaKvCache::<f32>::new(*cfg, n, 1, 1, 1)?;
    let one = Tensor::new(vec![1, 1], vec![1.0f32])?;
    let summary = TokenQkv {
        q: one.clone(),
        k: one.clone(),
        v: one.clone(),
    };
    for _ in 0..n {
        if cache.pending_finalize() {
            cache.finalize_chunk(&summary)?;
        }
        cache.append_text(&one, &one)?;
    }
    if cache.pending_finalize() {
        cache.finalize_chunk(&summary)?;
    }
    Ok(cache.cache_entries())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HybridComparison {
    /// Per-head, per-direction entries summed over layers.
    pub hybrid_entries: usize,
    pub full_entries: usize,
    /// `full / hybrid`.
    pub reduction: f64,
}

/// Simulated total cache of a `ratio:1` hybrid stack versus all-full layers
/// with the same heads. Full layers inside the hybrid also cache summary
/// tokens, since they run over the augmented sequence.
pub fn simulate_hybrid_vs_full(
    cfg: &KsaConfig,
    n: usize,
    layers: usize,
    ratio: usize,
) -> Result<HybridComparison> {
    let schedule = LayerSchedule::hybrid(layers, LayerKind::Ksa, Some(ratio))?;
    let ksa = simulate_entries(cfg, n)?;
    let augmented = n + n / cfg.chunk_size;
    let hybrid_entries: usize = schedule
        .kinds()
        .iter()
        .map(|k| {
            if *k == LayerKind::Full {
                augmented
            } else {
                ksa
            }
        })
        .sum();
    let full_entries = n * layers;
    Ok(HybridComparison {
        hybrid_entries,
        full_entries,
        reduction: full_entries as f64 / hybrid_entries as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ExactCost;

    fn rate(m: Mechanism) -> f64 {
        compression_rate::<f64>(
            &CacheCostModel::new(m, CostParams::table_defaults(1 << 20)),
            None,
        )
        .unwrap()
    }

    #[test]
    fn table_rates() {
        let pct = |m| (rate(m) * 100.0 * 100.0).round() / 100.0;
        assert_eq!(pct(Mechanism::Gqa), 6.25);
        assert_eq!(pct(Mechanism::Mla), 1.76);
        assert_eq!(pct(Mechanism::Ksa), 12.5);
        assert_eq!(pct(Mechanism::KsaGqa), 0.78);
        assert_eq!(pct(Mechanism::KsaMla), 0.22);
        assert_eq!(rate(Mechanism::Mha), 1.0);
    }

    #[test]
    fn rates_multiply_exactly() {
        let p = CostParams::table_defaults(131_072);
        let r = |m| compression_rate::<ExactCost>(&CacheCostModel::new(m, p), None).unwrap();
        assert_eq!(r(Mechanism::KsaGqa), r(Mechanism::Ksa) * r(Mechanism::Gqa));
        assert_eq!(r(Mechanism::KsaMla), r(Mechanism::Ksa) * r(Mechanism::Mla));
        assert_eq!(r(Mechanism::Ksa), ExactCost::new(1, 8));
        // also for n not divisible by k
        let p = CostParams::table_defaults(1001);
        let r = |m| compression_rate::<ExactCost>(&CacheCostModel::new(m, p), None).unwrap();
        assert_eq!(r(Mechanism::KsaGqa), r(Mechanism::Ksa) * r(Mechanism::Gqa));
    }

    #[test]
    fn gdn_rate_vanishes() {
        let mut prev = f64::INFINITY;
        for n in [1u64 << 10, 1 << 16, 1 << 24, 1 << 32] {
            let r: f64 = compression_rate(
                &CacheCostModel::new(Mechanism::Gdn, CostParams::table_defaults(n)),
                None,
            )
            .unwrap();
            assert!(r < prev);
            prev = r;
        }
        assert!(prev < 1e-6);
        let mut p = CostParams::table_defaults(64);
        p.gdn_per_head = false;
        let e: f64 = entries(&CacheCostModel::new(Mechanism::Gdn, p)).unwrap();
        assert_eq!(e, 2.0 * 128.0 * 128.0);
    }

    #[test]
    fn missing_parameters() {
        let err = entries::<f64>(&CacheCostModel::new(
            Mechanism::Swa,
            CostParams::table_defaults(10),
        ))
        .unwrap_err();
        assert!(matches!(err, KsaError::Config(_)));
        assert!(
            entries::<f64>(&CacheCostModel::new(Mechanism::Mha, CostParams::default())).is_err()
        );
        assert!("bogus".parse::<Mechanism>().is_err());
        assert_eq!("KSA+GQA".parse::<Mechanism>().unwrap(), Mechanism::KsaGqa);
    }

    #[test]
    fn curve_properties() {
        let mut p = CostParams::table_defaults(0);
        p.h = Some(8);
        let ns: Vec<u64> = (0..8).map(|i| 1024u64 << i).collect();
        let rows = curve(
            &[Mechanism::Mha, Mechanism::Gdn, Mechanism::Ksa],
            &p,
            &ns,
            2.0,
            4,
        )
        .unwrap();
        assert_eq!(rows.len(), 24);
        let col = |m: Mechanism| {
            rows.iter()
                .filter(|r| r.mechanism == m)
                .map(|r| r.bytes)
                .collect::<Vec<_>>()
        };
        let mha = col(Mechanism::Mha);
        for w in mha.windows(2) {
            assert_eq!(w[1], 2.0 * w[0]);
        }
        let gdn = col(Mechanism::Gdn);
        assert!(gdn.iter().all(|&b| b == gdn[0]));
        for (k, m) in col(Mechanism::Ksa).iter().zip(&mha) {
            assert_eq!(k / m, 1.0 / 8.0);
        }
        assert!(curve(&[Mechanism::Mha], &p, &[], 2.0, 1).is_err());
        assert!(curve(&[Mechanism::Mha], &p, &[4, 2], 2.0, 1).is_err());
        assert!(curve_csv(&rows).starts_with("n,mechanism,entries,bytes,rate_vs_mha\n1024,mha,"));
    }

    #[test]
    fn hybrid_mean_per_layer() {
        let mut p = CostParams::table_defaults(8192);
        p.layers = Some(4);
        p.ratio = Some(3);
        let e: f64 = entries(&CacheCostModel::new(Mechanism::HybridKsa, p)).unwrap();
        let full = 2.0 * 8192.0 * 8.0 * 128.0;
        assert_eq!(e, (full + 3.0 * full / 8.0) / 4.0);
    }

    #[test]
    fn simulation_small_cases() {
        let r = simulate_vs_formula(&KsaConfig::new(4, 1, 4).unwrap(), 10).unwrap();
        assert_eq!(r.simulated, 8);
        assert_eq!(r.formula, 2.5);
        assert!(r.delta.abs() <= r.bound);
        assert_eq!(r.bound, 9.0);
        let r = simulate_vs_formula(&KsaConfig::new(4, 0, 4).unwrap(), 64).unwrap();
        assert_eq!(r.simulated, 16);
        let r = simulate_vs_formula(&KsaConfig::new(8, 2, 4).unwrap(), 4096).unwrap();
        let expected = 1.0 / 8.0 + 3.0 * 8.0 / 4096.0;
        assert!((r.simulated as f64 / 4096.0 - expected).abs() / expected < 0.05);
    }

    #[test]
    fn simulation_within_bound_log_uniform() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..40 {
            let n = 2f64.powf(rng.random_range(0.0..17.0)) as usize;
            let k = [1, 2, 4, 8][rng.random_range(0..4)];
            let c = rng.random_range(0..5);
            let cfg = KsaConfig::new(k, c, 4).unwrap();
            let r = simulate_vs_formula(&cfg, n.max(1)).unwrap();
            assert!(r.delta.abs() <= r.bound, "{r:?}");
        }
    }
}
