use ksa_core::kvcache::{KsaKvCache, TokenQkv};
use ksa_core::masking::{chunk_partition_violations, ksa_mask, sca_mask, swa_mask};
use ksa_core::memmodel::{
    compression_rate, curve, entries, simulate_hybrid_vs_full, simulate_vs_formula, CacheCostModel,
    CostParams, Mechanism,
};
use ksa_core::{augment, ExactCost, KsaConfig, Role, Tensor};
use proptest::prelude::*;

#[test]
fn partition_holds_for_every_small_configuration() {
    for k in [2, 4, 8] {
        for c in [0, 1, 2, 4] {
            let cfg = KsaConfig::new(k, c, 16).unwrap();
            for n in 0..=256 {
                let aug = augment(n, &cfg);
                let mask = ksa_mask(&aug, &cfg).unwrap();
                let bad = chunk_partition_violations(&aug, &mask, k);
                assert!(bad.is_empty(), "n={n} k={k} C={c}: {:?}", bad[0]);
            }
        }
    }
}

proptest! {
    #[test]
    fn ksa_rows_are_causal_and_bounded(n in 0usize..120, k in 1usize..9, c in 0usize..5) {
        let cfg = KsaConfig::new(k, c, 16).unwrap();
        let aug = augment(n, &cfg);
        let mask = ksa_mask(&aug, &cfg).unwrap();
        prop_assert!(mask.is_causal());
        for (q, role) in aug.roles().into_iter().enumerate() {
            match role {
                Role::Summary(_) => prop_assert_eq!(mask.row_count(q), k),
                Role::Text(i) => {
                    let chunk = i / k;
                    prop_assert!(mask.row_count(q) <= (c + 1) * k + chunk.saturating_sub(c));
                    prop_assert!(mask.get(q, q));
                }
            }
        }
    }

    #[test]
    fn windows_never_exceed_causal(n in 1usize..80, w in 1usize..20, k in 1usize..8, c in 0usize..4) {
        let cfg = KsaConfig::new(k, c, 16).unwrap();
        let swa = swa_mask(n, w).unwrap();
        let sca = sca_mask(n, &cfg).unwrap();
        prop_assert!(swa.is_causal() && sca.is_causal());
        for q in 0..n {
            prop_assert_eq!(swa.row_count(q), (q + 1).min(w));
            prop_assert_eq!(sca.visible(q)[0] % k, 0);
        }
    }
}

fn table(m: Mechanism) -> CacheCostModel {
    CacheCostModel::new(m, CostParams::table_defaults(131_072))
}

#[test]
fn summary_table_rates() {
    for (m, pct) in [
        (Mechanism::Gqa, 6.25),
        (Mechanism::Mla, 1.76),
        (Mechanism::Ksa, 12.5),
        (Mechanism::KsaGqa, 0.78),
        (Mechanism::KsaMla, 0.22),
    ] {
        let rate: f64 = compression_rate(&table(m), None).unwrap();
        assert!((rate * 100.0 - pct).abs() <= 0.01, "{m}: {}", rate * 100.0);
    }
}

#[test]
fn combined_rates_multiply_exactly() {
    let r = |m| compression_rate::<ExactCost>(&table(m), None).unwrap();
    assert_eq!(r(Mechanism::KsaGqa), r(Mechanism::Ksa) * r(Mechanism::Gqa));
    let mla_over_mha = r(Mechanism::Mla);
    assert_eq!(r(Mechanism::KsaMla), r(Mechanism::Ksa) * mla_over_mha);
    assert_eq!(r(Mechanism::Mha), ExactCost::from_integer(1));
}

#[test]
fn curve_shapes() {
    let params = CostParams {
        w: Some(4096),
        ..CostParams::table_defaults(1024)
    };
    let ns: Vec<u64> = (0..8).map(|i| 1024u64 << i).collect();
    let rows = curve(&Mechanism::TABLE, &params, &ns, 2.0, 1).unwrap();
    assert_eq!(rows.len(), 8 * Mechanism::TABLE.len());
    let col = |m: Mechanism| -> Vec<f64> {
        rows.iter()
            .filter(|r| r.mechanism == m)
            .map(|r| r.entries)
            .collect()
    };
    let mha = col(Mechanism::Mha);
    assert!(mha.windows(2).all(|w| w[1] == 2.0 * w[0]));
    let gdn = col(Mechanism::Gdn);
    assert!(gdn.windows(2).all(|w| w[1] == w[0]));
    let rates: Vec<f64> = rows
        .iter()
        .filter(|r| r.mechanism == Mechanism::Gdn)
        .map(|r| r.rate_vs_mha)
        .collect();
    assert!(rates.windows(2).all(|w| w[1] < w[0]));
}

#[test]
fn hybrid_rate_is_the_layer_weighted_mix() {
    let params = CostParams {
        layers: Some(36),
        ratio: Some(3),
        ..CostParams::table_defaults(131_072)
    };
    let e = |m| entries::<ExactCost>(&CacheCostModel::new(m, params)).unwrap();
    let mix = (e(Mechanism::KsaGqa) * ExactCost::from_integer(27)
        + e(Mechanism::Gqa) * ExactCost::from_integer(9))
        / ExactCost::from_integer(36);
    assert_eq!(e(Mechanism::HybridKsa), mix);
}

#[test]
fn simulated_entries_converge_to_one_over_k() {
    let cfg = KsaConfig::new(8, 2, 16).unwrap();
    let r = simulate_vs_formula(&cfg, 4096).unwrap();
    let per_token = r.simulated as f64 / 4096.0;
    assert!(
        (per_token - 1.0 / 8.0).abs() / (1.0 / 8.0) < 0.05,
        "{per_token}"
    );
    let closed = 1.0 / 8.0 + (2.0 + 1.0) * 8.0 / 4096.0;
    assert!((per_token - closed).abs() / closed < 0.05);
}

#[test]
fn simulated_entries_stay_within_bound() {
    let cfg = KsaConfig::new(4, 1, 16).unwrap();
    // Log-uniform sample of lengths up to 2^17.
    let mut n = 1.0f64;
    while n <= 131_072.0 {
        let r = simulate_vs_formula(&cfg, n as usize).unwrap();
        assert!(r.delta.abs() <= r.bound, "n={n}: {r:?}");
        n *= 1.7;
    }
}

#[test]
fn hybrid_cache_is_two_to_four_times_smaller_than_full() {
    let cfg = KsaConfig::new(8, 2, 16).unwrap();
    let cmp = simulate_hybrid_vs_full(&cfg, 131_072, 36, 3).unwrap();
    assert!(cmp.reduction > 2.0 && cmp.reduction < 4.0, "{cmp:?}");
}

#[test]
fn lifecycle_walkthrough() {
    let cfg = KsaConfig::new(4, 1, 16).unwrap();
    let mut cache = KsaKvCache::<f64>::new(cfg, 16, 1, 1, 1).unwrap();
    let one = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let token = TokenQkv {
        q: one.clone(),
        k: one.clone(),
        v: one.clone(),
    };
    for _ in 0..10 {
        if cache.pending_finalize() {
            cache.finalize_chunk(&token).unwrap();
        }
        cache.append_text(&one, &one).unwrap();
    }
    let state = cache.state();
    assert_eq!(
        (state.m, state.current_fill, state.visible_summaries),
        (2, 2, 1)
    );
    assert_eq!(cache.cache_entries(), 2 + 4 + 2);
    let visible = cache.read_visible();
    assert_eq!(visible.len(), 7);
    assert_eq!(visible.ranges.len(), 1);
}
