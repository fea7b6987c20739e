//! Acceptance suite. Every check prints one `PASS`/`FAIL` line and then
//! asserts, so `cargo test --test acceptance -- --nocapture` doubles as a
//! readable scorecard.

use std::sync::OnceLock;
use std::time::Instant;

use moelab::evaluator::{evaluate, EvalOutcome};
use moelab::experiment::{run_experiment, ExperimentConfig, ModelSource, ProtocolPreset, Report};
use moelab::model::{
    forward_prefill, greedy_decode, greedy_decode_uncached, ExpertId, ModelConfig, MoEModel,
    Routing, RoutingObserver, Token,
};
use moelab::offload::{fetch_latency, transfer_time, TransferParams};
use moelab::perturbation::{
    inject_errors, resolve_plan, ErrorSpec, PerturbationPlan, TargetBound, TargetStrategy,
};
use moelab::rng::RngStream;
use moelab::stats::{
    expert_utilization, gini, imbalance_score, mann_whitney_u, normalized_entropy, ActivationLog,
};
use moelab::workbench::{
    generate_dataset, generate_split, gradient_check, train, Dataset, Example, Split, TaskSpec,
    TrainConfig,
};
use moelab_codec::{compress_eb, decompress_bytes, decompress_eb, dequantize_uniform, quantize_uniform, ratio};
use rayon::prelude::*;

fn report(name: &str, ok: bool, detail: &str, started: Instant) {
    println!(
        "{} {name}: {detail} ({:.2?})",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed()
    );
}

struct Trained {
    model: MoEModel,
    held_out: Dataset,
    steps_run: usize,
    seconds: f64,
}

fn trained() -> &'static Trained {
    static MODEL: OnceLock<Trained> = OnceLock::new();
    MODEL.get_or_init(|| {
        let t = Instant::now();
        let task = TaskSpec::modular_sum(10, 0);
        let data = generate_dataset(&task, 2000).unwrap();
        let held_out = generate_split(&task, 200, Split::Eval).unwrap();
        let config = TrainConfig {
            seed: 0,
            steps: 5000,
            ..TrainConfig::default()
        };
        let out = train(&ModelConfig::default(), &data, &held_out, &config).unwrap();
        Trained {
            model: out.model,
            held_out,
            steps_run: out.steps_run,
            seconds: t.elapsed().as_secs_f64(),
        }
    })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Sizes log-uniform in 1..=10⁵; magnitudes log-uniform over 1e-6..1e6 with a
/// sprinkling of subnormals, zeros and sign flips.
fn fuzz_tensor(rng: &mut RngStream) -> Vec<f64> {
    let n = (10f64.powf(5.0 * rng.uniform()) as usize).clamp(1, 100_000);
    let smooth = rng.uniform() < 0.5;
    let mut walk = 0.0;
    (0..n)
        .map(|_| {
            let r = rng.uniform();
            if r < 0.02 {
                return f64::MIN_POSITIVE * rng.uniform() * if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            }
            if r < 0.03 {
                return 0.0;
            }
            let mag = 10f64.powf(12.0 * rng.uniform() - 6.0);
            if smooth {
                walk += mag * 1e-3 * rng.standard_normal();
                walk
            } else {
                mag * rng.standard_normal().signum()
            }
        })
        .collect()
}

#[test]
fn compressor_hard_bound() {
    let t = Instant::now();
    let bounds = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1];
    let tensors = 10_000u64;
    let (elements, violations): (usize, usize) = (0..tensors)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngStream::new(0x5eed).child(&[i]);
            let data = fuzz_tensor(&mut rng);
            let eb = bounds[i as usize % bounds.len()];
            let block = compress_eb(&data, eb).unwrap();
            let back = decompress_bytes(&block.to_bytes()).unwrap();
            assert_eq!(back.len(), data.len());
            let bad = data.iter().zip(&back).filter(|(x, y)| !((*x - *y).abs() <= eb)).count();
            (data.len(), bad)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    let ok = violations == 0 && t.elapsed().as_secs() < 120;
    report(
        "compressor hard bound",
        ok,
        &format!("{tensors} tensors, {elements} elements, {violations} violations"),
        t,
    );
    assert!(ok);
}

#[test]
fn compressor_idempotence_and_format_stability() {
    let t = Instant::now();
    let mut failures = 0;
    for i in 0..200u64 {
        let mut rng = RngStream::new(77).child(&[i]);
        let data = fuzz_tensor(&mut rng);
        let eb = 10f64.powi(-1 - (i % 6) as i32);
        let first = decompress_eb(&compress_eb(&data, eb).unwrap()).unwrap();
        let second = decompress_eb(&compress_eb(&first, eb).unwrap()).unwrap();
        let bytes_a = compress_eb(&data, eb).unwrap().to_bytes();
        let bytes_b = compress_eb(&data, eb).unwrap().to_bytes();
        if bits(&first) != bits(&second) || bytes_a != bytes_b {
            failures += 1;
        }
    }
    let ok = failures == 0;
    report(
        "compressor idempotence and byte stability",
        ok,
        &format!("200 tensors, {failures} mismatches"),
        t,
    );
    assert!(ok);
}

/// 2¹⁶ weights drawn from N(0, 0.02²) with one in a thousand replaced by an
/// outlier of magnitude 1 to 5. The outliers stretch the min-max range that a
/// uniform quantizer must cover, while a predictive codec stores them raw and
/// keeps fine bins for the bulk.
fn heavy_tailed_weights() -> Vec<f64> {
    let mut rng = RngStream::new(2024);
    (0..1 << 16)
        .map(|_| {
            if rng.uniform() < 1e-3 {
                let m = 1.0 + 4.0 * rng.uniform();
                if rng.uniform() < 0.5 { -m } else { m }
            } else {
                0.02 * rng.standard_normal()
            }
        })
        .collect()
}

#[test]
fn quantizer_vs_codec_on_heavy_tails() {
    let t = Instant::now();
    let w = heavy_tailed_weights();
    let q = quantize_uniform(&w, 4).unwrap();
    let q_ratio = ratio(&q, &w);
    let deq = dequantize_uniform(&q);
    let q_err = w.iter().zip(&deq).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    // loosest grid bound first; keep the tightest one still matching the ratio
    let mut best = None;
    for step in 0..60 {
        let eb = 0.5 * 0.85f64.powi(step);
        let block = compress_eb(&w, eb).unwrap();
        if ratio(&block, &w) < q_ratio {
            break;
        }
        let back = decompress_eb(&block).unwrap();
        let err = w.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= eb);
        best = Some((eb, ratio(&block, &w)));
    }
    let (eb, c_ratio) = best.expect("some bound matches the quantizer's ratio");
    let ok = q_err > eb;
    report(
        "quantizer vs codec contrast",
        ok,
        &format!(
            "4-bit ratio {q_ratio:.2} max error {q_err:.4}; codec ratio {c_ratio:.2} at bound {eb:.5}"
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn injection_statistics() {
    let t = Instant::now();
    // 4·64 experts of 2·32·64 parameters each: 1,048,576 perturbed values
    let config = ModelConfig {
        num_experts: 64,
        ..ModelConfig::default()
    };
    let mut model = MoEModel::init(config, 3).unwrap();
    let mut targets = Vec::new();
    for layer in 0..config.num_layers {
        for expert in 0..config.num_experts {
            let id = ExpertId::new(layer, expert);
            for w in model.expert_mut(id).unwrap().tensors_mut() {
                w.data_mut().fill(1.0);
            }
            targets.push(TargetBound { id, error_bound: 0.1 });
        }
    }
    let deltas = |clamp: bool| {
        let mut error = ErrorSpec::new(0.1, 11);
        error.clamp_to_bound = clamp;
        let plan = PerturbationPlan {
            strategy: TargetStrategy::AllInLayer { layer: 0 },
            error,
            targets: targets.clone(),
        };
        let out = inject_errors(&model, &plan).unwrap();
        plan.ids()
            .iter()
            .flat_map(|&id| out.expert(id).unwrap().params().map(|v| v - 1.0).collect::<Vec<_>>())
            .collect::<Vec<f64>>()
    };
    let d = deltas(false);
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let std = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let clamped = deltas(true);
    let violations = clamped.iter().filter(|x| x.abs() > 0.1).count();
    let ok = d.len() >= 1_000_000
        && (0.0995..=0.1005).contains(&std)
        && mean.abs() <= 5e-4
        && violations == 0;
    report(
        "error injection statistics",
        ok,
        &format!("n {} std {std:.6} mean {mean:.2e} clamp violations {violations}", d.len()),
        t,
    );
    assert!(ok);
}

fn prefill_bits(model: &MoEModel, data: &Dataset) -> Vec<Vec<u64>> {
    data.samples
        .iter()
        .flat_map(|s| forward_prefill(model, &s.prompt, None).unwrap().logits)
        .map(|row| bits(&row))
        .collect()
}

fn same_scores(a: &EvalOutcome, b: &EvalOutcome) -> bool {
    a.ica == b.ica && a.pia == b.pia && a.records == b.records
}

#[test]
fn zero_perturbation_transparency() {
    let t = Instant::now();
    let tr = trained();
    let base = evaluate(&tr.model, &tr.held_out, true).unwrap();
    let log = base.log.clone().unwrap();
    let base_logits = prefill_bits(&tr.model, &tr.held_out);

    let mut plans: Vec<PerturbationPlan> = [
        TargetStrategy::SingleExpert(ExpertId::new(1, 2)),
        TargetStrategy::HighestFrequent { layer: 0 },
        TargetStrategy::TopKFrequent { layer: 2, k: 3 },
        TargetStrategy::AllInLayer { layer: 3 },
    ]
    .iter()
    .map(|s| resolve_plan(&tr.model, s, ErrorSpec::new(0.0, 9), &log).unwrap())
    .collect();
    plans.push(PerturbationPlan {
        strategy: TargetStrategy::AllInLayer { layer: 0 },
        error: ErrorSpec::new(0.5, 9),
        targets: Vec::new(),
    });

    let mut failures = 0;
    for plan in &plans {
        let m = plan.apply(&tr.model).unwrap();
        let eval = evaluate(&m, &tr.held_out, false).unwrap();
        if !m.bit_eq(&tr.model)
            || prefill_bits(&m, &tr.held_out) != base_logits
            || !same_scores(&eval.outcome, &base.outcome)
        {
            failures += 1;
        }
    }
    let ok = failures == 0;
    report(
        "zero-perturbation transparency",
        ok,
        &format!("{} plans (p = 0 and empty targets), {failures} differ from baseline", plans.len()),
        t,
    );
    assert!(ok);
}

fn gini_oracle(x: &[u64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<u64>() as f64 / n;
    let pairs: f64 = x
        .iter()
        .flat_map(|a| x.iter().map(move |b| (*a as f64 - *b as f64).abs()))
        .sum();
    pairs / (2.0 * n * n * mean)
}

fn entropy_oracle(x: &[u64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let total = x.iter().sum::<u64>() as f64;
    let h: f64 = x
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| c as f64 / total)
        .map(|p| -p * p.log2())
        .sum();
    h / (x.len() as f64).log2()
}

fn cv_oracle(x: &[u64]) -> f64 {
    let v: Vec<f64> = x.iter().map(|&c| c as f64).collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / n).sqrt() / mean
}

#[test]
fn metric_oracles() {
    let t = Instant::now();
    let mut rng = RngStream::new(31);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let e = 1 + rng.below(64) as usize;
        let mut row: Vec<u64> = (0..e)
            .map(|_| if rng.uniform() < 0.3 { 0 } else { rng.below(1000) })
            .collect();
        if row.iter().all(|&c| c == 0) {
            row[0] = 1;
        }
        let used = row.iter().filter(|&&c| c != 0).count() as f64 / e as f64;
        for (got, want) in [
            (expert_utilization(&row), used),
            (normalized_entropy(&row).unwrap(), entropy_oracle(&row)),
            (gini(&row).unwrap(), gini_oracle(&row)),
            (imbalance_score(&row).unwrap(), cv_oracle(&row)),
        ] {
            worst = worst.max((got - want).abs());
        }
    }
    let mut one_hot = vec![0u64; 64];
    one_hot[17] = 5;
    let g = gini(&one_hot).unwrap();
    let h = normalized_entropy(&[2, 1, 1]).unwrap();
    let ok = worst <= 1e-9 && (g - 63.0 / 64.0).abs() <= 1e-9 && (h - 0.946395).abs() <= 5e-7;
    report(
        "metric oracles",
        ok,
        &format!("100 rows, max deviation {worst:.2e}; one-hot gini {g}; entropy [.5,.25,.25] {h:.6}"),
        t,
    );
    assert!(ok);
}

/// Forwards every routing decision to an activation log and tracks the
/// largest deviation of a token's weights from summing to one.
struct Audit {
    log: ActivationLog,
    worst_weight_sum: f64,
    records: usize,
}

impl RoutingObserver for Audit {
    fn record(&mut self, layer: usize, routing: &Routing) {
        let s: f64 = routing.weights.iter().sum();
        self.worst_weight_sum = self.worst_weight_sum.max((s - 1.0).abs());
        self.records += 1;
        self.log.record(layer, routing);
    }

    fn token_processed(&mut self) {
        self.log.token_processed();
    }
}

#[test]
fn routing_conservation() {
    let t = Instant::now();
    let config = ModelConfig {
        top_k: 3,
        use_shared_expert: true,
        ..ModelConfig::default()
    };
    let model = MoEModel::init(config, 5).unwrap();
    let mut audit = Audit {
        log: ActivationLog::for_model(&model),
        worst_weight_sum: 0.0,
        records: 0,
    };
    let mut rng = RngStream::new(8);
    let mut remaining = 1000usize;
    while remaining > 0 {
        let len = remaining.min(1 + rng.below(config.max_seq_len as u64) as usize);
        let prompt: Vec<Token> = (0..len).map(|_| rng.below(config.vocab_size as u64) as Token).collect();
        forward_prefill(&model, &prompt, Some(&mut audit)).unwrap();
        remaining -= len;
    }
    let tokens = audit.log.tokens_processed();
    let counts_ok = (0..config.num_layers)
        .all(|l| audit.log.counts_row(l).iter().sum::<u64>() == tokens * config.top_k as u64);
    let ok = tokens == 1000
        && counts_ok
        && audit.records == 1000 * config.num_layers
        && audit.worst_weight_sum <= 1e-9
        && audit.log.check_conservation().is_ok();
    report(
        "routing conservation",
        ok,
        &format!(
            "{tokens} tokens, per-layer counts = tokens·k: {counts_ok}, worst weight-sum deviation {:.1e}",
            audit.worst_weight_sum
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn gradient_fidelity() {
    let t = Instant::now();
    let mut rng = RngStream::new(404);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..10u64 {
        let num_experts = 2 + rng.below(5) as usize;
        let config = ModelConfig {
            num_layers: 1 + rng.below(3) as usize,
            num_experts,
            top_k: 1 + rng.below(num_experts as u64) as usize,
            d_model: 4 + rng.below(5) as usize,
            d_ff: 4 + rng.below(5) as usize,
            vocab_size: 29 + rng.below(4) as usize,
            max_seq_len: 16,
            use_shared_expert: rng.uniform() < 0.5,
        };
        let model = MoEModel::init(config, i).unwrap();
        let data = generate_dataset(&TaskSpec::modular_sum(2 + rng.below(20) as u32, i), 3).unwrap();
        let batch: Vec<Example> = data.samples.iter().map(Example::from_sample).collect();
        let r = gradient_check(&model, &batch).unwrap();
        worst = worst.max(r.max_rel_error);
        checked += r.checked;
    }
    let ok = worst <= 1e-5;
    report(
        "gradient fidelity",
        ok,
        &format!("10 configs, {checked} parameters, max relative error {worst:.2e}"),
        t,
    );
    assert!(ok);
}

#[test]
fn trained_baseline() {
    let t = Instant::now();
    let tr = trained();
    let eval = evaluate(&tr.model, &tr.held_out, false).unwrap().outcome;
    let ok = tr.steps_run <= 5000 && eval.pia >= 0.95 && eval.ica >= 0.90;
    report(
        "trained baseline",
        ok,
        &format!(
            "{} steps in {:.1}s, held-out ICA {:.3} PIA {:.3}",
            tr.steps_run, tr.seconds, eval.ica, eval.pia
        ),
        t,
    );
    assert!(ok);
}

#[test]
fn kv_cache_equivalence() {
    let t = Instant::now();
    let tr = trained();
    let fresh = MoEModel::init(ModelConfig { use_shared_expert: true, ..ModelConfig::default() }, 12).unwrap();
    let mut rng = RngStream::new(99);
    let mut mismatches = 0;
    for i in 0..100 {
        let model = if i % 2 == 0 { &tr.model } else { &fresh };
        let max = model.config.max_seq_len;
        let len = 1 + rng.below(16) as usize;
        let prompt: Vec<Token> = (0..len).map(|_| rng.below(model.config.vocab_size as u64) as Token).collect();
        let max_new = rng.below((max - len + 1) as u64) as usize;
        let stop = (i % 3 == 0).then_some(27);
        let cached = greedy_decode(model, &prompt, max_new, stop, None).unwrap();
        let uncached = greedy_decode_uncached(model, &prompt, max_new, stop).unwrap();
        if cached != uncached {
            mismatches += 1;
        }
    }
    let ok = mismatches == 0;
    report(
        "kv-cache equivalence",
        ok,
        &format!("100 prompts, {mismatches} mismatches"),
        t,
    );
    assert!(ok);
}

#[test]
fn offload_arithmetic() {
    let t = Instant::now();
    let tt = transfer_time(66.6e9, 32e9).unwrap();
    let exact = (tt - 2.08125).abs() / 2.08125 <= 1e-9;

    let mut monotone = true;
    for overlap in [true, false] {
        let params = TransferParams { overlap, ..TransferParams::default() };
        for r in [1.0, 1.5, 2.0, 4.0, 10.0] {
            let lat: Vec<f64> = [0.0, 1e3, 1e6, 1e8, 6.66e10]
                .iter()
                .map(|&b| fetch_latency(b, r, &params).unwrap())
                .collect();
            monotone &= lat.windows(2).all(|w| w[0] <= w[1]);
        }
        let by_ratio: Vec<f64> = [1.0, 1.2, 2.0, 5.0, 50.0]
            .iter()
            .map(|&r| fetch_latency(1e9, r, &params).unwrap())
            .collect();
        monotone &= by_ratio.windows(2).all(|w| w[0] >= w[1]);
        let by_bw: Vec<f64> = [1e9, 8e9, 32e9, 64e9]
            .iter()
            .map(|&bw| fetch_latency(1e9, 3.0, &TransferParams { pcie_bandwidth: bw, ..params }).unwrap())
            .collect();
        monotone &= by_bw.windows(2).all(|w| w[0] >= w[1]);
    }
    let ok = exact && monotone;
    report(
        "offload arithmetic",
        ok,
        &format!("transfer_time(66.6e9, 32e9) = {tt}; monotone sweep: {monotone}"),
        t,
    );
    assert!(ok);
}

fn mean_pia(report: &Report, arm: &str, p: f64) -> Vec<f64> {
    report
        .cells
        .iter()
        .filter(|c| c.arm == arm && c.p == p)
        .map(|c| c.score.pia)
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn directional_sensitivity() {
    let t = Instant::now();
    let tr = trained();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.moem");
    tr.model.save(&ckpt).unwrap();
    let layers = tr.model.config.num_layers;
    let seeds: Vec<u64> = (0..10).collect();

    let run = |protocol: ProtocolPreset| {
        run_experiment(&ExperimentConfig {
            model: ModelSource::Checkpoint { path: ckpt.clone() },
            task: tr.held_out.task,
            eval_samples: tr.held_out.len(),
            protocol,
            p_values: vec![0.3, 0.8],
            seeds: seeds.clone(),
            clamp: false,
            compression_p: 0.1,
            transfer: TransferParams::default(),
            output_dir: dir.path().to_path_buf(),
        })
        .unwrap()
    };
    let all = run(ProtocolPreset::AllInLayer { layers: None });
    let base = all.baseline.pia;

    let mut strict = true;
    let mut monotone = true;
    let mut pooled_low = Vec::new();
    let mut pooled_high = Vec::new();
    for layer in 0..layers {
        let single = run(ProtocolPreset::SingleExpert { layer, expert: 0 });
        let arm = format!("L{layer}");
        let all_low = mean_pia(&all, &arm, 0.3);
        let all_high = mean_pia(&all, &arm, 0.8);
        let single_high = mean_pia(&single, &format!("L{layer}.E0"), 0.8);
        let drop_all = base - mean(&all_high);
        let drop_single = base - mean(&single_high);
        let test = mann_whitney_u(&all_low, &all_high).unwrap();
        println!(
            "  layer {layer}: PIA drop at p=0.8 all-in-layer {drop_all:.3} vs single expert {drop_single:.3}; \
             all-in-layer mean PIA p=0.3 {:.3} p=0.8 {:.3} (one-sided p {:.2e})",
            mean(&all_low),
            mean(&all_high),
            test.p_greater
        );
        strict &= drop_all > drop_single;
        monotone &= mean(&all_high) <= mean(&all_low);
        pooled_low.extend(all_low);
        pooled_high.extend(all_high);
    }
    let pooled = mann_whitney_u(&pooled_low, &pooled_high).unwrap();
    let worst = (0..layers)
        .min_by(|&a, &b| {
            mean(&mean_pia(&all, &format!("L{a}"), 0.8)).total_cmp(&mean(&mean_pia(&all, &format!("L{b}"), 0.8)))
        })
        .unwrap();
    let ok = strict && monotone && pooled.p_greater < 0.05 && t.elapsed().as_secs() < 900;
    report(
        "directional sensitivity",
        ok,
        &format!(
            "baseline PIA {base:.3}; all-in-layer worse than single expert on every layer: {strict}; \
             monotone in p: {monotone}; pooled Mann-Whitney p {:.2e}; most sensitive layer L{worst}",
            pooled.p_greater
        ),
        t,
    );
    assert!(ok);
}
