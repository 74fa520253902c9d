use imbal_core::harness::{
    aggregate_file_name, checkpoint_file_name, read_json, run_experiment, trial_file_name, DatasetSource,
    ExperimentConfig, ExperimentSummary, MethodConfig, TrialReport,
};
use imbal_core::models::Model;
use imbal_core::optim::TrainConfig;

fn config(seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSource::Gaussian {
            n_classes: 3,
            n_train_per_class: 60,
            n_test_per_class: 30,
            dim: 2,
            mean_radius: 3.0,
            sigma: 0.5,
            data_seed: None,
        },
        r_train: Some(0.2),
        r_test: None,
        majority_growth: None,
        method: MethodConfig::default().apply_preset("sam_a_one_minus+smooth").unwrap(),
        train: TrainConfig {
            epochs: 4,
            warmup_epochs: 1,
            batch_size: 16,
            ..Default::default()
        },
        seeds,
        eval_every: 2,
        hidden: vec![16, 16],
        projector: vec![8, 8],
    }
}

#[test]
fn written_artifacts_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(vec![2, 0, 1]);
    let (summary, trials) = run_experiment(&cfg, Some(dir.path())).unwrap();
    let hash = cfg.hash();
    assert_eq!(summary.overall_accuracy.seeds, vec![0, 1, 2]);

    let stored: ExperimentSummary = read_json(&dir.path().join(aggregate_file_name(&hash))).unwrap();
    assert_eq!(stored, summary);
    for t in &trials {
        let seed = t.report.seed;
        let report: TrialReport = read_json(&dir.path().join(trial_file_name(&hash, seed))).unwrap();
        assert_eq!(report, t.report);
        let model = Model::load_checkpoint(&dir.path().join(checkpoint_file_name(&hash, seed))).unwrap();
        assert_eq!(model.parameters(), t.eval_model.parameters());
        assert_eq!(model.predict(t.data.test.x()).unwrap(), t.eval_model.predict(t.data.test.x()).unwrap());
    }
}

#[test]
fn seed_results_do_not_depend_on_seed_set() {
    let (_, all) = run_experiment(&config(vec![0, 1]), None).unwrap();
    let (_, one) = run_experiment(&config(vec![1]), None).unwrap();
    let a = all.iter().find(|t| t.report.seed == 1).unwrap();
    assert_eq!(a.report.metrics, one[0].report.metrics);
    assert_eq!(a.model.parameters(), one[0].model.parameters());
}

#[test]
fn config_json_round_trip_keeps_hash() {
    let cfg = config(vec![0]);
    let text = serde_json::to_string_pretty(&cfg).unwrap();
    let back = ExperimentConfig::from_json(&text).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
    assert_eq!(cfg.hash().len(), 16);
}
