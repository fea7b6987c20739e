use moelab::model::{greedy_decode, ModelConfig, MoEModel, Token};
use moelab::rng::RngStream;
use moelab::stats::{
    expert_utilization, export_heatmap, gini, heatmap_csv, imbalance_score, normalized_entropy,
    ActivationLog,
};
use proptest::prelude::*;

fn row() -> impl Strategy<Value = Vec<u64>> {
    prop::collection::vec(0u64..500, 1..70).prop_filter("some activation", |r| r.iter().any(|&c| c > 0))
}

fn model() -> MoEModel {
    MoEModel::init(ModelConfig { use_shared_expert: true, ..ModelConfig::default() }, 1).unwrap()
}

/// Decodes a short continuation of each prompt, all into `log`.
fn run(model: &MoEModel, prompts: &[Vec<Token>], log: &mut ActivationLog) {
    for p in prompts {
        greedy_decode(model, p, 4, None, Some(log)).unwrap();
    }
}

fn prompts(seed: u64, n: usize) -> Vec<Vec<Token>> {
    let mut rng = RngStream::new(seed);
    (0..n)
        .map(|_| (0..1 + rng.below(10)).map(|_| rng.below(29) as Token).collect())
        .collect()
}

proptest! {
    #[test]
    fn metrics_stay_in_range(r in row()) {
        let e = r.len() as f64;
        prop_assert!((0.0..=1.0).contains(&expert_utilization(&r)));
        prop_assert!((0.0..=1.0).contains(&normalized_entropy(&r).unwrap()));
        let g = gini(&r).unwrap();
        prop_assert!(g >= 0.0 && g <= (e - 1.0) / e + 1e-12);
        prop_assert!(imbalance_score(&r).unwrap() >= 0.0);
    }

    #[test]
    fn imbalance_is_scale_invariant(r in row(), c in 1u64..50) {
        let scaled: Vec<u64> = r.iter().map(|x| x * c).collect();
        let (a, b) = (imbalance_score(&r).unwrap(), imbalance_score(&scaled).unwrap());
        prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
    }

    #[test]
    fn merge_commutes_and_has_identity(s1 in any::<u64>(), s2 in any::<u64>()) {
        let m = model();
        let (mut a, mut b) = (ActivationLog::for_model(&m), ActivationLog::for_model(&m));
        run(&m, &prompts(s1, 3), &mut a);
        run(&m, &prompts(s2, 2), &mut b);
        prop_assert_eq!(a.merge(&b).unwrap(), b.merge(&a).unwrap());
        prop_assert_eq!(a.merge(&ActivationLog::for_model(&m)).unwrap(), a);
    }
}

#[test]
fn merged_single_question_logs_replay_the_joint_run() {
    let m = model();
    let ps = prompts(5, 3);
    let mut joint = ActivationLog::for_model(&m);
    run(&m, &ps, &mut joint);
    let mut merged = ActivationLog::for_model(&m);
    for p in &ps {
        let mut one = ActivationLog::for_model(&m);
        run(&m, std::slice::from_ref(p), &mut one);
        merged = merged.merge(&one).unwrap();
    }
    // weight sums may differ in the last bit from summation order
    assert_eq!(merged.all_counts(), joint.all_counts());
    assert_eq!(merged.tokens_processed(), joint.tokens_processed());
    for l in 0..merged.num_layers() {
        for (a, b) in merged.weight_row(l).iter().zip(joint.weight_row(l)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
    merged.check_conservation().unwrap();
}

#[test]
fn heatmap_reparses_to_in_memory_totals() {
    let m = model();
    let mut log = ActivationLog::for_model(&m);
    run(&m, &prompts(9, 20), &mut log);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("heatmap.csv");
    export_heatmap(&log, &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    export_heatmap(&log, &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());

    let text = String::from_utf8(first).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("layer,expert,count,weight_sum"));
    let mut per_layer = vec![0u64; log.num_layers()];
    let mut weight = vec![0f64; log.num_layers()];
    let mut rows = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let l: usize = f[0].parse().unwrap();
        per_layer[l] += f[2].parse::<u64>().unwrap();
        weight[l] += f[3].parse::<f64>().unwrap();
        rows += 1;
    }
    assert_eq!(rows, log.num_layers() * log.num_experts());
    for l in 0..log.num_layers() {
        let total: u64 = log.counts_row(l).iter().sum();
        assert_eq!(per_layer[l], total);
        assert_eq!(total, log.tokens_processed() * log.top_k() as u64);
        assert!((weight[l] - log.tokens_processed() as f64).abs() <= 1e-6);
    }
}

#[test]
fn two_by_two_heatmap_has_four_rows() {
    let log = ActivationLog::new(2, 2, 1);
    assert_eq!(heatmap_csv(&log).lines().count(), 1 + 4);
}
