//! Acceptance criteria, one PASS/FAIL line each. Exits non-zero if any fails.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use ksa_core::attention::block_sparse_equivalence;
use ksa_core::kvcache::{prefill_equivalence, EquivalenceSetup};
use ksa_core::masking::{chunk_partition_violations, ksa_mask};
use ksa_core::memmodel::{
    compression_rate, simulate_hybrid_vs_full, simulate_vs_formula, CacheCostModel, CostParams,
    Mechanism,
};
use ksa_core::recipes::{anneal_lambda, AnnealSchedule, SummaryProjections};
use ksa_core::toymodel::{
    forward, forward_with, grad_check, summary_embedding_gradient, ModelConfig, Params, Sample,
    SummaryBranch, Task,
};
use ksa_core::{augment, KsaConfig, RopeConfig};
use rayon::prelude::*;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn ensure(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Verdict {
    ensure(
        elapsed <= limit,
        format!(
            "{detail}; {:.2}s of {:.0}s budget",
            elapsed.as_secs_f64(),
            limit.as_secs_f64()
        ),
    )
}

fn table_rates() -> Verdict {
    let start = Instant::now();
    let params = CostParams::table_defaults(131_072);
    let mut parts = Vec::new();
    let mut ok = true;
    for (m, want) in [
        (Mechanism::Gqa, 6.25),
        (Mechanism::Mla, 1.76),
        (Mechanism::Ksa, 12.5),
        (Mechanism::KsaGqa, 0.78),
        (Mechanism::KsaMla, 0.22),
    ] {
        let rate: f64 =
            compression_rate(&CacheCostModel::new(m, params), None).map_err(|e| e.to_string())?;
        let pct = rate * 100.0;
        ok &= (pct - want).abs() <= 0.01;
        parts.push(format!("{m} {pct:.4}%"));
    }
    ensure(ok, parts.join(", "))?;
    within(start.elapsed(), Duration::from_secs(1), parts.join(", "))
}

fn mask_partition() -> Verdict {
    let mut checked = 0;
    let mut violations = 0;
    for k in [2, 4, 8] {
        for c in [0, 1, 2, 4] {
            let cfg = KsaConfig::new(k, c, 16).map_err(|e| e.to_string())?;
            for n in 0..=256 {
                let aug = augment(n, &cfg);
                let mask = ksa_mask(&aug, &cfg).map_err(|e| e.to_string())?;
                violations += chunk_partition_violations(&aug, &mask, k).len();
                checked += 1;
            }
        }
    }
    ensure(
        violations == 0,
        format!("{checked} masks, {violations} violations"),
    )
}

fn block_sparse_oracle() -> Verdict {
    let mut worst = 0.0f64;
    let mut runs = 0;
    for (k, c) in [(2, 1), (4, 1), (4, 2), (8, 0), (8, 1)] {
        let cfg = KsaConfig::new(k, c, 16).map_err(|e| e.to_string())?;
        // Largest n whose augmented length is at most 64.
        let n = (0..=64).rev().find(|&n| n + n / k <= 64).unwrap_or(0);
        for seed in 0..20 {
            let d = block_sparse_equivalence::<f64>(n, &cfg, &[2, 4, 8, 16], seed)
                .map_err(|e| e.to_string())?;
            worst = worst.max(d);
            runs += 1;
        }
    }
    ensure(
        worst <= 1e-10,
        format!("{runs} seed/config runs x 4 masks x B in {{2,4,8,16}}, max |delta| {worst:.2e} (tol 1e-10)"),
    )
}

fn decode_prefill() -> Verdict {
    let start = Instant::now();
    let setup = EquivalenceSetup::default();
    let grid: Vec<(usize, usize, usize)> = [2, 4, 8]
        .into_iter()
        .flat_map(|k| {
            [0, 1, 2]
                .into_iter()
                .flat_map(move |c| (1..=96).map(move |n| (n, k, c)))
        })
        .collect();
    let results: Vec<(f64, f64, usize)> = grid
        .par_iter()
        .map(|&(n, k, c)| {
            let cfg = KsaConfig::new(k, c, 16).map_err(|e| e.to_string())?;
            let seed = (n * 1000 + k * 10 + c) as u64;
            let r64 = prefill_equivalence::<f64>(n, &cfg, &setup, seed, None)
                .map_err(|e| e.to_string())?;
            let r32 = prefill_equivalence::<f32>(n, &cfg, &setup, seed, None)
                .map_err(|e| e.to_string())?;
            Ok((r64.max_delta, r32.max_delta, r64.boundary_steps))
        })
        .collect::<Result<_, String>>()?;
    let d64 = results.iter().map(|r| r.0).fold(0.0, f64::max);
    let d32 = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let boundary: usize = results.iter().map(|r| r.2).sum();
    let detail = format!(
        "{} configs, {boundary} finalize steps, max |delta| f64 {d64:.2e} (tol 1e-10), f32 {d32:.2e} (tol 1e-5)",
        grid.len()
    );
    ensure(d64 <= 1e-10 && d32 <= 1e-5, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(60), detail)
}

fn cache_scaling() -> Verdict {
    let cfg = KsaConfig::new(8, 2, 16).map_err(|e| e.to_string())?;
    let sim = simulate_vs_formula(&cfg, 4096).map_err(|e| e.to_string())?;
    let per_token = sim.simulated as f64 / 4096.0;
    let rel = (per_token - 0.125).abs() / 0.125;
    let hybrid = simulate_hybrid_vs_full(&cfg, 131_072, 36, 3).map_err(|e| e.to_string())?;
    ensure(
        rel < 0.05 && hybrid.reduction > 2.0 && hybrid.reduction < 4.0,
        format!(
            "entries/n at 4096 = {per_token:.5} ({:.2}% from 1/k); hybrid 3:1 at 131072 is {:.3}x smaller than full",
            rel * 100.0,
            hybrid.reduction
        ),
    )
}

fn tiny_config(arch: &str, c: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 8,
        heads: 2,
        kv_heads: 1,
        head_dim: 4,
        mlp_hidden: 8,
        vocab_size: 7,
        ksa: KsaConfig::new(4, c, 4).expect("valid"),
        arch: arch.parse().expect("valid arch"),
        swa_window: 4,
        rope: RopeConfig::new(100.0, 4).expect("valid"),
        tie_embeddings: false,
        seed: 5,
    }
}

fn lm_sample(n: usize, salt: usize) -> Sample {
    let tokens: Vec<usize> = (0..n).map(|i| (i * 5 + salt * 3 + i * i) % 7).collect();
    let targets = (0..n).map(|i| tokens.get(i + 1).copied()).collect();
    Sample { tokens, targets }
}

fn gradient_checks() -> Verdict {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut groups = 0;
    for arch in ["ksa", "hybrid-ksa-1", "full"] {
        let cfg = tiny_config(arch, 1);
        let params = Params::<f64>::init(&cfg).map_err(|e| e.to_string())?;
        let report = grad_check(&cfg, &params, &[lm_sample(13, 0), lm_sample(16, 1)], 1e-5)
            .map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        groups += report.groups.len();
    }
    let mut rule_ok = true;
    let mut cases = 0;
    for c in [0, 1, 2] {
        let cfg = tiny_config("ksa", c);
        let params = Params::<f64>::init(&cfg).map_err(|e| e.to_string())?;
        let k = cfg.ksa.chunk_size;
        for n in (1..=6).map(|m| m * k) {
            let (analytic, fd) = summary_embedding_gradient(&cfg, &params, &lm_sample(n, 4), 1e-5)
                .map_err(|e| e.to_string())?;
            let nonzero = analytic > 1e-8 && fd > 1e-8;
            let zero = analytic == 0.0 && fd < 1e-8;
            rule_ok &= if n >= (c + 2) * k { nonzero } else { zero };
            cases += 1;
        }
    }
    let detail = format!(
        "{groups} parameter groups, max rel err {worst:.2e} (tol 1e-4); summary-gradient rule held on {}/{cases} lengths",
        if rule_ok { cases } else { 0 }
    );
    ensure(worst < 1e-4 && rule_ok, detail.clone())?;
    within(start.elapsed(), Duration::from_secs(120), detail)
}

fn absorbability() -> Verdict {
    let cfg = tiny_config("hybrid-ksa-1", 1);
    let params = Params::<f64>::init(&cfg).map_err(|e| e.to_string())?;
    let mut projs = SummaryProjections::from_params(&cfg, &params);
    for t in projs.tensors_mut() {
        for x in t.data_mut() {
            *x = 0.5 - 2.0 * *x;
        }
    }
    let tokens = lm_sample(23, 2).tokens;
    let plain = forward(&cfg, &params, &tokens).map_err(|e| e.to_string())?;
    let branch = SummaryBranch {
        projections: &projs,
        lambda: 0.0,
    };
    let mixed = forward_with(&cfg, &params, &tokens, Some(&branch)).map_err(|e| e.to_string())?;
    let identical = plain.logits == mixed.logits && plain.attn_outputs == mixed.attn_outputs;
    let sched = AnnealSchedule::new(50, 150).map_err(|e| e.to_string())?;
    let (a, b, mid) = (
        anneal_lambda(50, &sched),
        anneal_lambda(150, &sched),
        anneal_lambda(100, &sched),
    );
    ensure(
        identical && a == 1.0 && b == 0.0 && mid == 0.5,
        format!("lambda=0 outputs bit-identical: {identical}; lambda(start)={a}, lambda(end)={b}, lambda(mid)={mid}"),
    )
}

struct RunResult {
    accuracy: f64,
    chance: f64,
    seconds: f64,
}

fn train_run(arch: &str, seed: u64, steps: usize) -> Result<RunResult, String> {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_ksa"))
        .args([
            "--seed",
            &seed.to_string(),
            "train",
            "--task",
            "distant-recall",
        ])
        .args([
            "--arch",
            arch,
            "--layers",
            "2",
            "--steps",
            &steps.to_string(),
        ])
        .args(["--out", if cfg!(windows) { "NUL" } else { "/dev/null" }])
        .env_remove("KSA_DTYPE")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    let summary: serde_json::Value =
        serde_json::from_str(stdout.lines().last().unwrap_or("")).map_err(|e| e.to_string())?;
    Ok(RunResult {
        accuracy: summary["eval_accuracy"]
            .as_f64()
            .ok_or("no eval_accuracy")?,
        chance: summary["chance"].as_f64().ok_or("no chance")?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn long_range_routing() -> Verdict {
    const STEPS: usize = 1500;
    // Defaults of `ksa train`: n=32, k=4, C=1, SWA window (C+1)·k = 8.
    let task = Task::distant_recall(32, 4, 4, 8, 16, 8).map_err(|e| e.to_string())?;
    let (k, c) = (4, 1);
    if task.min_distance() <= (c + 1) * k {
        return Err(format!(
            "key distance {} is not beyond the window",
            task.min_distance()
        ));
    }
    let mut held = 0;
    let mut parts = Vec::new();
    for seed in 0..3 {
        let ksa = train_run("hybrid-ksa", seed, STEPS)?;
        let swa = train_run("swa", seed, STEPS)?;
        let budget = ksa.seconds <= 600.0 && swa.seconds <= 600.0;
        let ok = ksa.accuracy > 0.9 && swa.accuracy < 2.0 * swa.chance && budget;
        held += usize::from(ok);
        parts.push(format!(
            "seed {seed}: ksa {:.3} swa {:.3} ({:.0}s/{:.0}s)",
            ksa.accuracy, swa.accuracy, ksa.seconds, swa.seconds
        ));
    }
    ensure(
        held >= 2,
        format!(
            "key distance >= {} > {}, {STEPS} steps, chance {:.4}; {}; held on {held}/3",
            task.min_distance(),
            (c + 1) * k,
            task.chance(),
            parts.join("; ")
        ),
    )
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cases: [(&str, &[&str]); 7] = [
        ("mask", &["mask", "--n", "24", "--format", "pbm"]),
        (
            "mem",
            &["mem", "--n-range", "1024:65536:x4", "--format", "csv"],
        ),
        ("equiv", &["equiv", "--trials", "3", "--n", "40"]),
        (
            "train",
            &[
                "train",
                "--steps",
                "15",
                "--batch",
                "4",
                "--eval-samples",
                "16",
            ],
        ),
        (
            "distill",
            &[
                "distill",
                "--steps",
                "12",
                "--anneal-start",
                "3",
                "--anneal-end",
                "9",
                "--batch",
                "2",
            ],
        ),
        ("attn-dump", &["attn-dump", "--layer", "3", "--query", "20"]),
        (
            "decode-bench",
            &["decode-bench", "--tokens", "20", "--dump"],
        ),
    ];
    let mut differing = Vec::new();
    for (name, args) in cases {
        let path = dir.path().join(format!("{name}.out"));
        let run = || -> Result<(Vec<u8>, Vec<u8>), String> {
            let out = Command::new(env!("CARGO_BIN_EXE_ksa"))
                .args(["--seed", "7", "--dtype", "f64"])
                .args(args)
                .arg("--out")
                .arg(&path)
                .output()
                .map_err(|e| e.to_string())?;
            if !out.status.success() {
                return Err(format!("{name}: {}", String::from_utf8_lossy(&out.stderr)));
            }
            Ok((fs::read(&path).map_err(|e| e.to_string())?, out.stdout))
        };
        if run()? != run()? {
            differing.push(name);
        }
    }
    ensure(
        differing.is_empty(),
        format!("7 subcommands run twice at --seed 7; differing outputs: {differing:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("compression rates", table_rates),
        ("mask chunk partition", mask_partition),
        ("block-sparse vs dense oracle", block_sparse_oracle),
        ("decode vs prefill", decode_prefill),
        ("cache scaling", cache_scaling),
        ("gradient checks", gradient_checks),
        ("annealing absorbability", absorbability),
        ("long-range routing", long_range_routing),
        ("CLI determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let verdict = check();
        let secs = start.elapsed().as_secs_f64();
        let (tag, detail) = match verdict {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {}: {name} -- {detail} [{secs:.1}s]", i + 1);
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
