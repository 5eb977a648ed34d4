use ksa_core::recipes::{anneal_lambda, AnnealSchedule, SummaryProjections};
use ksa_core::toymodel::{
    forward, forward_with, grad_check, load_checkpoint, metrics_csv, save_checkpoint,
    summary_embedding_gradient, train, Decoder, ModelConfig, Params, Sample, SummaryBranch, Task,
    TrainConfig,
};
use ksa_core::{KsaConfig, RopeConfig};

fn config(arch: &str, layers: usize, c: usize) -> ModelConfig {
    ModelConfig {
        layers,
        d_model: 8,
        heads: 2,
        kv_heads: 1,
        head_dim: 4,
        mlp_hidden: 8,
        vocab_size: 7,
        ksa: KsaConfig::new(4, c, 4).unwrap(),
        arch: arch.parse().unwrap(),
        swa_window: 4,
        rope: RopeConfig::new(100.0, 4).unwrap(),
        tie_embeddings: false,
        seed: 5,
    }
}

/// Next-token prediction over a fixed pseudo-random sequence.
fn lm_sample(n: usize, salt: usize) -> Sample {
    let tokens: Vec<usize> = (0..n).map(|i| (i * 5 + salt * 3 + i * i) % 7).collect();
    let targets = (0..n).map(|i| tokens.get(i + 1).copied()).collect();
    Sample { tokens, targets }
}

#[test]
fn finite_differences_agree_on_every_parameter_group() {
    for arch in ["ksa", "hybrid-ksa-1", "full"] {
        let cfg = config(arch, 2, 1);
        let params = Params::<f64>::init(&cfg).unwrap();
        let batch = [lm_sample(13, 0), lm_sample(16, 1)];
        let report = grad_check(&cfg, &params, &batch, 1e-5).unwrap();
        report.check(1e-4).unwrap_or_else(|e| panic!("{arch}: {e}"));
        assert!(report.groups.iter().any(|g| g.name == "embedding.summary"));
    }
}

#[test]
fn tied_head_gradients_agree() {
    let mut cfg = config("hybrid-ksa-1", 2, 1);
    cfg.tie_embeddings = true;
    let params = Params::<f64>::init(&cfg).unwrap();
    let report = grad_check(&cfg, &params, &[lm_sample(12, 2)], 1e-5).unwrap();
    report.check(1e-4).unwrap();
}

#[test]
fn summary_embedding_gradient_appears_once_a_chunk_leaves_the_window() {
    for c in [0, 1, 2] {
        let cfg = config("ksa", 2, c);
        let params = Params::<f64>::init(&cfg).unwrap();
        let k = cfg.ksa.chunk_size;
        for n in (1..=6).map(|m| m * k) {
            let (analytic, fd) =
                summary_embedding_gradient(&cfg, &params, &lm_sample(n, 4), 1e-5).unwrap();
            if n >= (c + 2) * k {
                assert!(analytic > 1e-6, "C={c} n={n}: {analytic}");
                assert!(
                    (analytic - fd).abs() <= 1e-4 * (analytic + fd),
                    "C={c} n={n}: {analytic} vs {fd}"
                );
            } else {
                assert_eq!(analytic, 0.0, "C={c} n={n}");
                assert!(fd < 1e-8, "C={c} n={n}: {fd}");
            }
        }
    }
}

#[test]
fn removing_projections_at_lambda_zero_is_bit_identical() {
    let cfg = config("hybrid-ksa-1", 2, 1);
    let params = Params::<f64>::init(&cfg).unwrap();
    let mut projs = SummaryProjections::from_params(&cfg, &params);
    for t in projs.tensors_mut() {
        for x in t.data_mut() {
            *x = -3.0 * *x + 0.25;
        }
    }
    let tokens = lm_sample(23, 5).tokens;
    let plain = forward(&cfg, &params, &tokens).unwrap();
    let branch = SummaryBranch {
        projections: &projs,
        lambda: 0.0,
    };
    let with = forward_with(&cfg, &params, &tokens, Some(&branch)).unwrap();
    assert_eq!(plain.logits, with.logits);
    assert_eq!(plain.attn_outputs, with.attn_outputs);
    let active = SummaryBranch {
        projections: &projs,
        lambda: 1.0,
    };
    let moved = forward_with(&cfg, &params, &tokens, Some(&active)).unwrap();
    assert_ne!(plain.logits, moved.logits);
}

#[test]
fn annealing_boundaries() {
    let s = AnnealSchedule::new(50, 150).unwrap();
    assert_eq!(anneal_lambda(0, &s), 1.0);
    assert_eq!(anneal_lambda(50, &s), 1.0);
    assert_eq!(anneal_lambda(100, &s), 0.5);
    assert_eq!(anneal_lambda(150, &s), 0.0);
    assert_eq!(anneal_lambda(400, &s), 0.0);
    assert!(AnnealSchedule::new(5, 5).is_err());
}

#[test]
fn decoder_reproduces_forward_logits() {
    for arch in ["ksa", "hybrid-ksa-1", "full"] {
        let cfg = config(arch, 3, 1);
        let params = Params::<f64>::init(&cfg).unwrap();
        let tokens = lm_sample(19, 6).tokens;
        let prefill = forward(&cfg, &params, &tokens).unwrap().logits;
        let mut dec = Decoder::new(&cfg, &params, tokens.len()).unwrap();
        for (i, &t) in tokens.iter().enumerate() {
            let row = dec.step(t).unwrap();
            for (a, b) in row.data().iter().zip(prefill.row(i)) {
                assert!((a - b).abs() < 1e-10, "{arch} step {i}");
            }
        }
    }
}

#[test]
fn training_is_reproducible_and_checkpoints_round_trip() {
    let task = Task::distant_recall(16, 4, 2, 2, 3, 2).unwrap();
    let mut cfg = config("hybrid-ksa", 2, 1);
    cfg.vocab_size = task.vocab_size();
    let tc = TrainConfig {
        steps: 5,
        batch_size: 4,
        warmup: 2,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut p = Params::<f64>::init(&cfg).unwrap();
        let rows = train(&cfg, &mut p, &task, &tc).unwrap();
        (metrics_csv(&rows), p)
    };
    let (csv_a, params_a) = run();
    let (csv_b, params_b) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(params_a, params_b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_checkpoint(&path, &cfg, &params_a, 9).unwrap();
    let (manifest, loaded) = load_checkpoint::<f64>(&path).unwrap();
    assert_eq!(manifest.cfg, cfg);
    assert_eq!(loaded, params_a);
}
