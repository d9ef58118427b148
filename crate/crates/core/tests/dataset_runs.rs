use std::collections::BTreeMap;

use balpm_core::acquisition::{Policy, PolicyConfig};
use balpm_core::feature_store::{initial_split, save_dataset, FeatureDataset, Format, PreferenceTuple};
use balpm_core::harness::config::{DatasetPaths, ModelConfig};
use balpm_core::harness::{default_label_source, load_data, run_experiment, DataSource, ExperimentConfig, RunOptions};
use balpm_core::model::TrainConfig;
use balpm_core::sim::{SimConfig, SimWorld};

#[test]
fn full_size_initial_split() {
    let tuples = (0..92_858)
        .map(|i| PreferenceTuple {
            tuple_id: format!("t{i}"),
            prompt_id: format!("p{}", i / 3),
            prompt_vec: vec![(i / 3) as f32],
            pair1_vec: vec![0.0],
            pair2_vec: vec![1.0],
            label: None,
        })
        .collect();
    let ds = FeatureDataset::new("train", tuples).unwrap();
    let split = initial_split(&ds, 320, 0).unwrap();
    assert_eq!(split.train_ids.len(), 320);
    assert_eq!(split.pool_ids.len(), 92_538);
}

#[derive(serde::Deserialize)]
struct State {
    labels: BTreeMap<String, bool>,
}

#[test]
fn dataset_mode_uses_file_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let world = SimWorld::new(SimConfig { n_prompts: 30, ..Default::default() }).unwrap();
    let (pool, _) = world.generate_labeled("pool", 30).unwrap();
    let (val, _) = world.generate_labeled("val", 10).unwrap();
    let (test, _) = world.generate_labeled("test", 10).unwrap();
    save_dataset(&pool, &d.join("pool.ndjson"), Format::Ndjson).unwrap();
    save_dataset(&val, &d.join("val.bin"), Format::Binary).unwrap();
    save_dataset(&test, &d.join("test.ndjson"), Format::Ndjson).unwrap();

    let cfg = ExperimentConfig {
        data: DataSource::Dataset(DatasetPaths {
            pool: d.join("pool.ndjson"),
            val: d.join("val.bin"),
            test: d.join("test.ndjson"),
            texts: None,
        }),
        policy: PolicyConfig { policy: Policy::Balpm, batch_size: 10, ..Default::default() },
        train: TrainConfig { learning_rate: 1e-2, max_epochs: 5, ..Default::default() },
        model: ModelConfig { ensemble_size: 2, hidden: vec![8] },
        rounds: 3,
        init_train_size: 10,
        output_dir: d.join("run"),
        ..Default::default()
    };
    let data = load_data(&cfg).unwrap();
    assert!(!data.pool.is_labeled(), "pool labels are hidden from the loop");
    let mut source = default_label_source(&cfg, &data).unwrap();
    let summary = run_experiment(&cfg, &data, source.as_mut(), &RunOptions::default()).unwrap();
    assert_eq!(summary.labels_used, 40);

    let state: State = serde_json::from_str(&std::fs::read_to_string(d.join("run/state.json")).unwrap()).unwrap();
    assert_eq!(state.labels.len(), 40);
    for (id, label) in &state.labels {
        assert_eq!(pool.get(id).unwrap().label, Some(*label), "{id}");
    }
}
