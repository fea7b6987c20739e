use std::fs;

use moelab::experiment::{
    emit_report, run_experiment, summary_csv, ExperimentConfig, ModelSource, ProtocolPreset,
};
use moelab::model::ModelConfig;
use moelab::offload::TransferParams;
use moelab::perturbation::TargetStrategy;
use moelab::workbench::{TaskSpec, TrainConfig};
use moelab::Error;

fn config(protocol: ProtocolPreset, p_values: Vec<f64>, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        model: ModelSource::Train {
            config: ModelConfig::default(),
            train: TrainConfig { steps: 60, eval_every: 30, ..TrainConfig::default() },
            train_samples: 300,
        },
        task: TaskSpec::modular_sum(10, 0),
        eval_samples: 40,
        protocol,
        p_values,
        seeds,
        clamp: false,
        compression_p: 0.1,
        transfer: TransferParams::default(),
        output_dir: "unused".into(),
    }
}

#[test]
fn zero_p_cells_equal_the_baseline() {
    let report = run_experiment(&config(ProtocolPreset::CrossLayer, vec![0.0], vec![0, 1, 2])).unwrap();
    assert_eq!(report.cells.len(), 4 * 3);
    for c in &report.cells {
        assert_eq!(c.score, report.baseline, "{} seed {}", c.arm, c.seed);
    }
}

#[test]
fn identical_configs_give_identical_reports_and_files() {
    let cfg = config(ProtocolPreset::AllInLayer { layers: Some(vec![1, 2]) }, vec![0.2, 0.6], vec![3, 4, 5]);
    let a = run_experiment(&cfg).unwrap();
    let b = run_experiment(&cfg).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&b).unwrap());

    // regenerated from its own embedded config
    let c = run_experiment(&a.config).unwrap();
    assert_eq!(serde_json::to_vec(&a).unwrap(), serde_json::to_vec(&c).unwrap());

    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let files = emit_report(&a, d1.path()).unwrap();
    emit_report(&a, d2.path()).unwrap();
    emit_report(&a, d1.path()).unwrap();
    assert_eq!(files.len(), 4);
    for f in &files {
        let name = f.file_name().unwrap();
        assert_eq!(fs::read(f).unwrap(), fs::read(d2.path().join(name)).unwrap());
    }
    let summary = fs::read_to_string(d1.path().join("summary.csv")).unwrap();
    assert_eq!(summary, summary_csv(&a));
    // one row per arm × p × seed plus the baseline
    assert_eq!(summary.lines().count() - 1, 2 * 2 * 3 + 1);
}

#[test]
fn report_carries_full_provenance() {
    let cfg = config(ProtocolPreset::Topk { layer: 1, ks: vec![1, 3] }, vec![0.1, 0.4], vec![7, 8]);
    let r = run_experiment(&cfg).unwrap();
    assert_eq!(r.config_hash, cfg.hash());
    assert_eq!(r.config, cfg);
    assert!(!r.rng.is_empty() && !r.generator.is_empty());
    assert_eq!(r.model.checkpoint_sha256.len(), 64);
    assert_eq!(r.arms.len(), 2);
    for (arm, k) in r.arms.iter().zip([1, 3]) {
        assert_eq!(arm.strategy, TargetStrategy::TopKFrequent { layer: 1, k });
        assert_eq!(arm.resolved.len(), 2);
        for res in &arm.resolved {
            assert_eq!(res.targets.len(), k);
            assert!(res.targets.iter().all(|t| t.id.layer == 1 && t.error_bound > 0.0));
        }
    }
    let seeds: Vec<u64> = r.cells.iter().map(|c| c.seed).collect();
    assert!(seeds.contains(&7) && seeds.contains(&8));
    assert_eq!(r.dose_response.len(), 2);
}

#[test]
fn presets_resolve_to_their_strategies() {
    let cfg = config(ProtocolPreset::Grouped { groups: None }, vec![0.3], vec![0]);
    let r = run_experiment(&cfg).unwrap();
    for arm in &r.arms {
        let TargetStrategy::GroupedHighestFrequent { ranges } = &arm.strategy else {
            panic!("grouped preset resolved to {:?}", arm.strategy);
        };
        // one pick per layer of the group
        assert_eq!(arm.resolved[0].targets.len(), ranges.len());
    }
    let r = run_experiment(&config(ProtocolPreset::Randomize { layer: 0, expert: 2 }, vec![0.5], vec![0, 1])).unwrap();
    assert!(matches!(r.arms[0].strategy, TargetStrategy::RandomizeExpert(_)));
}

#[test]
fn empty_seed_list_fails_validation() {
    let cfg = config(ProtocolPreset::CrossLayer, vec![0.5], vec![]);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    assert!(matches!(run_experiment(&cfg), Err(Error::Config(_))));
    let cfg = config(ProtocolPreset::CrossLayer, vec![1.5], vec![0]);
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}
