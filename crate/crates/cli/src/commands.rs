use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use ksa_core::attention::block_sparse_equivalence;
use ksa_core::kvcache::{prefill_equivalence, EquivalenceSetup};
use ksa_core::masking::{blockify, ksa_mask, sca_mask, swa_mask};
use ksa_core::memmodel::{curve, curve_csv, rate_table, CostParams, Mechanism};
use ksa_core::recipes::{
    distill, distill_csv, AnnealSchedule, DistillConfig, DistillWeights, SummaryProjections,
};
use ksa_core::toymodel::{
    attention_weights, evaluate, load_checkpoint, metrics_csv, save_checkpoint, streams, task_rng,
    train, Arch, Decoder, ModelConfig, Params, Task, TrainConfig,
};
use ksa_core::{augment, DType, KsaConfig, KsaError, RopeConfig, Scalar, VisibilityMask};
use rayon::prelude::*;
use serde::Serialize;

use crate::{
    AttnDumpArgs, Cli, Command, DecodeBenchArgs, DistillArgs, EquivArgs, MaskArgs, MaskFormat,
    MaskKind, MemArgs, MemFormat, ModelArgs, TaskArgs, TaskName, TrainArgs,
};

#[derive(Debug)]
pub enum Failure {
    /// Bad flags or an invalid configuration.
    Usage(String),
    /// A check that ran and did not hold.
    Check(String),
    Runtime(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Check(_) | Failure::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Check(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<KsaError> for Failure {
    fn from(e: KsaError) -> Self {
        match e {
            KsaError::Config(_) | KsaError::Input(_) | KsaError::OutOfRange { .. } => {
                Failure::Usage(e.to_string())
            }
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

/// Writes `data` to `--out`, or stdout.
fn emit(out: Option<&Path>, data: &str) -> Outcome {
    match out {
        Some(p) => fs::write(p, data)?,
        None => print!("{data}"),
    }
    Ok(())
}

fn json_line(value: &impl Serialize) -> Outcome {
    let s = serde_json::to_string(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    println!("{s}");
    Ok(())
}

pub fn run(cli: &Cli) -> Outcome {
    let out = cli.out.as_deref();
    match (&cli.command, cli.dtype) {
        (Command::Mask(a), _) => mask(a, out),
        (Command::Mem(a), _) => mem(a, out),
        (Command::Equiv(a), DType::F32) => equiv::<f32>(a, cli.seed, out),
        (Command::Equiv(a), DType::F64) => equiv::<f64>(a, cli.seed, out),
        (Command::Train(a), DType::F32) => train_cmd::<f32>(a, cli.seed, out),
        (Command::Train(a), DType::F64) => train_cmd::<f64>(a, cli.seed, out),
        (Command::Distill(a), DType::F32) => distill_cmd::<f32>(a, cli.seed, out),
        (Command::Distill(a), DType::F64) => distill_cmd::<f64>(a, cli.seed, out),
        (Command::AttnDump(a), DType::F32) => attn_dump::<f32>(a, cli.seed, out),
        (Command::AttnDump(a), DType::F64) => attn_dump::<f64>(a, cli.seed, out),
        (Command::DecodeBench(a), DType::F32) => decode_bench::<f32>(a, cli.seed, out),
        (Command::DecodeBench(a), DType::F64) => decode_bench::<f64>(a, cli.seed, out),
    }
}

fn mask(a: &MaskArgs, out: Option<&Path>) -> Outcome {
    if a.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    let cfg = KsaConfig::new(a.k, a.c, a.block_size)?;
    let m: VisibilityMask = match a.kind {
        MaskKind::Ksa => ksa_mask(&augment(a.n, &cfg), &cfg)?,
        MaskKind::Swa => swa_mask(a.n, a.w.unwrap_or((a.c + 1) * a.k))?,
        MaskKind::Sca => sca_mask(a.n, &cfg)?,
        MaskKind::Full => VisibilityMask::causal(a.n),
    };
    let data = match a.format {
        MaskFormat::Csv => m.to_csv(),
        MaskFormat::Pbm => m.to_pbm(),
        MaskFormat::Blocks => blockify(&m, a.block_size)?.to_block_list(),
    };
    emit(out, &data)
}

fn parse_range(spec: &str) -> Result<Vec<u64>, Failure> {
    let bad = || {
        Failure::Usage(format!(
            "bad --n-range `{spec}` (expected start:end:xF or start:end:+S)"
        ))
    };
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, end, step] = parts[..] else {
        return Err(bad());
    };
    let start: u64 = start.parse().map_err(|_| bad())?;
    let end: u64 = end.parse().map_err(|_| bad())?;
    if start == 0 || end < start {
        return Err(bad());
    }
    let next: Box<dyn Fn(u64) -> u64> = if let Some(f) = step.strip_prefix('x') {
        let f: u64 = f.parse().map_err(|_| bad())?;
        if f < 2 {
            return Err(bad());
        }
        Box::new(move |n| n.saturating_mul(f))
    } else if let Some(s) = step.strip_prefix('+') {
        let s: u64 = s.parse().map_err(|_| bad())?;
        if s == 0 {
            return Err(bad());
        }
        Box::new(move |n| n.saturating_add(s))
    } else {
        return Err(bad());
    };
    let mut values = vec![start];
    loop {
        let n = next(*values.last().expect("non-empty"));
        if n > end {
            break;
        }
        values.push(n);
    }
    Ok(values)
}

fn mem(a: &MemArgs, out: Option<&Path>) -> Outcome {
    let mechanisms: Vec<Mechanism> = match &a.mechanisms {
        None => Mechanism::TABLE.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| s.trim().parse::<Mechanism>())
            .collect::<Result<_, _>>()?,
    };
    if mechanisms.is_empty() {
        return Err(Failure::Usage("no mechanisms selected".into()));
    }
    let params = CostParams {
        n: Some(a.n),
        h: Some(a.h),
        g: Some(a.g),
        d: Some(a.d),
        d_c: Some(a.dc),
        d_r: Some(a.dr),
        w: Some(a.w),
        k: Some(a.k),
        layers: Some(a.layers),
        ratio: Some(a.ratio),
        gdn_per_head: !a.gdn_shared,
    };
    let n_values = match &a.n_range {
        Some(spec) => parse_range(spec)?,
        None => vec![a.n],
    };
    let data = match a.format {
        MemFormat::Csv => curve_csv(&curve(&mechanisms, &params, &n_values, a.bytes, a.layers)?),
        MemFormat::Table => {
            let mut s = String::new();
            for &n in &n_values {
                if n_values.len() > 1 {
                    let _ = writeln!(s, "n = {n}");
                }
                s.push_str(&rate_table(&mechanisms, &params.with_n(n))?);
            }
            s
        }
    };
    emit(out, &data)
}

#[derive(Debug, Serialize)]
struct EquivSummary {
    checks: usize,
    failed: usize,
    max_delta: f64,
    tol: f64,
    pass: bool,
}

fn equiv<T: Scalar>(a: &EquivArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let tol = a.tol.unwrap_or(if T::NAME == "f64" { 1e-10 } else { 1e-5 });
    if !(tol >= 0.0) {
        return Err(Failure::Usage("--tol must be nonnegative".into()));
    }
    if a.n == 0 || a.trials == 0 || a.block_sizes.is_empty() {
        return Err(Failure::Usage(
            "--n, --trials and --block-sizes must be non-empty".into(),
        ));
    }
    let cfg = KsaConfig::new(a.k, a.c, 16)?;
    let mut suites = vec!["decode-prefill"];
    if a.c > 0 {
        suites.push("decode-rotated");
    }
    suites.push("block-sparse");
    let jobs: Vec<(usize, &str)> = (0..a.trials)
        .flat_map(|t| suites.iter().map(move |&s| (t, s)))
        .collect();
    let setup = EquivalenceSetup::default();
    let deltas: Vec<f64> =
        jobs.par_iter()
            .map(|&(t, suite)| {
                let s = seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
                match suite {
                    "decode-prefill" => {
                        prefill_equivalence::<T>(a.n, &cfg, &setup, s, None).map(|r| r.max_delta)
                    }
                    "decode-rotated" => prefill_equivalence::<T>(a.n, &cfg, &setup, s, Some(a.k))
                        .map(|r| r.max_delta),
                    _ => block_sparse_equivalence::<T>(a.n, &cfg, &a.block_sizes, s),
                }
            })
            .collect::<Result<_, _>>()?;
    let mut csv = String::from("trial,suite,max_delta,pass\n");
    let mut failed = 0;
    for (&(t, suite), &d) in jobs.iter().zip(&deltas) {
        let pass = d <= tol;
        failed += usize::from(!pass);
        let _ = writeln!(csv, "{t},{suite},{d:.6e},{pass}");
    }
    emit(out, &csv)?;
    let summary = EquivSummary {
        checks: jobs.len(),
        failed,
        max_delta: deltas.iter().copied().fold(0.0, f64::max),
        tol,
        pass: failed == 0,
    };
    if out.is_some() {
        json_line(&summary)?;
    }
    if failed > 0 {
        return Err(Failure::Check(format!(
            "{failed} of {} checks exceeded tol {tol:e} (max delta {:e})",
            summary.checks, summary.max_delta
        )));
    }
    Ok(())
}

fn build_task(t: &TaskArgs, chunk_size: usize) -> Result<Task, Failure> {
    Ok(match t.task {
        TaskName::Copy => Task::copy(t.payload, t.alphabet)?,
        TaskName::DistantRecall => Task::distant_recall(
            t.seq_len,
            chunk_size,
            t.pair_chunks,
            t.keys,
            t.values,
            t.fillers,
        )?,
    })
}

fn build_model(
    m: &ModelArgs,
    default_layers: usize,
    vocab: usize,
    seed: u64,
) -> Result<ModelConfig, Failure> {
    let arch: Arch = m.arch.parse()?;
    if m.heads == 0 || !m.d_model.is_multiple_of(m.heads) {
        return Err(Failure::Usage(format!(
            "--d-model {} is not a multiple of --heads {}",
            m.d_model, m.heads
        )));
    }
    let head_dim = m.d_model / m.heads;
    let cfg = ModelConfig {
        layers: m.layers.unwrap_or(default_layers),
        d_model: m.d_model,
        heads: m.heads,
        kv_heads: m.kv_heads.unwrap_or(m.heads),
        head_dim,
        mlp_hidden: m.mlp_hidden,
        vocab_size: vocab,
        ksa: KsaConfig::new(m.k, m.c, 16)?,
        arch,
        swa_window: m.swa_window.unwrap_or((m.c + 1) * m.k),
        rope: RopeConfig::new(m.rope_theta, head_dim)?,
        tie_embeddings: m.tie_embeddings,
        seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    arch: String,
    steps: usize,
    final_loss: f64,
    final_batch_accuracy: f64,
    eval_accuracy: f64,
    chance: f64,
    parameters: usize,
}

fn train_cmd<T: Scalar>(a: &TrainArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let task = build_task(&a.task, a.model.k)?;
    let cfg = build_model(&a.model, 2, task.vocab_size(), seed)?;
    let mut params = Params::<T>::init(&cfg)?;
    let tc = TrainConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        warmup: a.warmup,
        clip: (a.clip > 0.0).then_some(a.clip),
        seed,
        ..TrainConfig::default()
    };
    let rows = train(&cfg, &mut params, &task, &tc)?;
    emit(out, &metrics_csv(&rows))?;
    if let Some(path) = &a.checkpoint {
        save_checkpoint(path, &cfg, &params, seed)?;
    }
    let last = rows.last().expect("at least one step");
    json_line(&TrainSummary {
        arch: cfg.arch.name(),
        steps: a.steps,
        final_loss: last.loss,
        final_batch_accuracy: last.accuracy,
        eval_accuracy: evaluate(&cfg, &params, &task, a.eval_samples, seed)?,
        chance: task.chance(),
        parameters: params.num_parameters(),
    })
}

fn distill_cmd<T: Scalar>(a: &DistillArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let task = build_task(&a.task, a.model.k)?;
    let (cfg, mut params) = match &a.init {
        Some(path) => {
            let (manifest, params) = load_checkpoint::<T>(path)?;
            (manifest.cfg, params)
        }
        None => {
            let cfg = build_model(&a.model, 2, task.vocab_size(), seed)?;
            let params = Params::<T>::init(&cfg)?;
            (cfg, params)
        }
    };
    let mut projs = SummaryProjections::from_params(&cfg, &params);
    let dc = DistillConfig {
        steps: a.steps,
        batch_size: a.batch,
        lr: a.lr,
        schedule: AnnealSchedule::new(a.anneal_start, a.anneal_end)?,
        weights: DistillWeights::new(a.alpha, a.beta)?,
        clip: (a.clip > 0.0).then_some(a.clip),
        seed,
    };
    let rows = distill(&cfg, &mut params, &mut projs, &task, &dc)?;
    emit(out, &distill_csv(&rows))
}

fn model_and_params<T: Scalar>(
    m: &ModelArgs,
    checkpoint: Option<&Path>,
    vocab: usize,
    seed: u64,
) -> Result<(ModelConfig, Params<T>), Failure> {
    match checkpoint {
        Some(path) => {
            let (manifest, params) = load_checkpoint::<T>(path)?;
            Ok((manifest.cfg, params))
        }
        None => {
            let cfg = build_model(m, 4, vocab, seed)?;
            let params = Params::<T>::init(&cfg)?;
            Ok((cfg, params))
        }
    }
}

fn attn_dump<T: Scalar>(a: &AttnDumpArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let task = build_task(&a.task, a.model.k)?;
    let (cfg, params) =
        model_and_params::<T>(&a.model, a.checkpoint.as_deref(), task.vocab_size(), seed)?;
    let sample = task.sample(&mut task_rng(seed, streams::PROBE));
    let n = sample.tokens.len();
    let query = a.query.unwrap_or(n - 1);
    if query >= n {
        return Err(Failure::Usage(format!(
            "--query {query} outside {n} text tokens"
        )));
    }
    let seq = if cfg.schedule().augments() {
        augment(n, &cfg.ksa)
    } else {
        ksa_core::AugmentedSequence::plain(n)
    };
    let (weights, seq) = attention_weights(
        &cfg,
        &params,
        &sample.tokens,
        a.layer,
        seq.text_index(query),
    )?;
    let roles = seq.roles();
    let mut csv = String::from("head,key_index,role,weight\n");
    for h in 0..cfg.heads {
        for (j, (w, role)) in weights.row(h).iter().zip(&roles).enumerate() {
            let _ = writeln!(csv, "{h},{j},{},{}", role.label(), w.as_f64());
        }
    }
    emit(out, &csv)
}

#[derive(Debug, Serialize)]
struct DecodeStep {
    step: usize,
    token: usize,
    cache_entries: usize,
    layers: Vec<Option<ksa_core::kvcache::CacheState>>,
}

fn decode_bench<T: Scalar>(a: &DecodeBenchArgs, seed: u64, out: Option<&Path>) -> Outcome {
    let task = build_task(&a.task, a.model.k)?;
    let (cfg, params) =
        model_and_params::<T>(&a.model, a.checkpoint.as_deref(), task.vocab_size(), seed)?;
    let mut rng = task_rng(seed, streams::PROBE);
    let steps = a.tokens.unwrap_or(task.seq_len);
    let mut tokens = Vec::with_capacity(steps);
    while tokens.len() < steps {
        tokens.extend(task.sample(&mut rng).tokens);
    }
    tokens.truncate(steps);
    let mut decoder = Decoder::new(&cfg, &params, steps.max(1))?;
    let mut data = if a.dump {
        String::new()
    } else {
        String::from("step,token,next_token,cache_entries\n")
    };
    let started = Instant::now();
    for (i, &tok) in tokens.iter().enumerate() {
        let logits = decoder.step(tok)?;
        if a.dump {
            let line = serde_json::to_string(&DecodeStep {
                step: i,
                token: tok,
                cache_entries: decoder.cache_entries(),
                layers: decoder.cache_states(),
            })
            .map_err(|e| Failure::Runtime(e.to_string()))?;
            data.push_str(&line);
            data.push('\n');
        } else {
            let next = logits
                .data()
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0;
            let _ = writeln!(data, "{i},{tok},{next},{}", decoder.cache_entries());
        }
    }
    let elapsed = started.elapsed();
    emit(out, &data)?;
    eprintln!(
        "decoded {steps} tokens in {:.3} ms ({:.1} tokens/s)",
        elapsed.as_secs_f64() * 1e3,
        steps as f64 / elapsed.as_secs_f64().max(1e-12)
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometric_range_is_inclusive() {
        let v = parse_range("1024:131072:x2").unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(v.last(), Some(&131_072));
        assert_eq!(parse_range("10:30:+10").unwrap(), vec![10, 20, 30]);
    }

    #[test]
    fn malformed_ranges_are_usage_errors() {
        for bad in ["1:2", "0:8:x2", "8:4:x2", "1:8:x1", "1:8:*2", "1:8:+0"] {
            assert_eq!(parse_range(bad).unwrap_err().code(), 2, "{bad}");
        }
    }
}
