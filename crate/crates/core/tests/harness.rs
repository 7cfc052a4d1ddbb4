//! End-to-end harness tests on tiny desk-scale configs: metrics bookkeeping,
//! determinism, frozen-run fixed points, checkpointing, and export.

use std::path::Path;

use fewfuse_core::config::{DataSource, Modality, RunConfig};
use fewfuse_core::episodes::{save_manifest, Split, SyntheticSpec};
use fewfuse_core::train::{
    evaluate_checkpoint, export_checkpoint_embeddings, load_dataset, run_training, Harness,
};

fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes_per_split: [4, 2, 2],
        items_per_class: 4,
        latent_dim: 4,
        image_noise: 0.5,
        text_signal_rate: 0.8,
        image_shape: [1, 16, 16],
        vocab_size: 64,
        n_sentences: 2,
        sentence_len: 4,
        seed,
    }
}

fn tiny_config(seed: u64) -> RunConfig {
    let mut config: RunConfig =
        serde_json::from_str(r#"{ "data": { "manifest": "replaced" } }"#).unwrap();
    config.data = DataSource::Synthetic(tiny_spec(seed));
    config.n_way = 2;
    config.k_shot = 1;
    config.t_query = 2;
    config.embedding_dim = 8;
    config.encoder.channels = 2;
    config.encoder.text_hidden = 8;
    config.encoder.vocab_buckets = 64;
    config.epochs = 1;
    config.episodes_per_epoch = 2;
    config.val_period = 1;
    config.val_episodes = 2;
    config.eval_episodes = 4;
    config.seed = seed;
    config
}

fn read_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect()
}

#[test]
fn one_epoch_run_writes_expected_metrics_rows() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_training(&tiny_config(1), dir.path()).unwrap();
    let lines = read_lines(&report.metrics_path);
    // header + 1 train row + 1 final-epoch validation row
    assert_eq!(lines.len(), 3, "{lines:?}");
    assert!(lines[0].starts_with("epoch,split,accuracy_pct"));
    assert!(lines[1].starts_with("0,train,"));
    assert!(lines[2].starts_with("0,meta_val,"));
    assert!(report.config_path.exists());
    assert!(report.checkpoint_path.exists());
    assert!(report.timings_path.exists());

    // Epoch column is monotone over a longer run.
    let mut config = tiny_config(1);
    config.epochs = 3;
    config.val_period = 10;
    let dir2 = tempfile::tempdir().unwrap();
    let report = run_training(&config, dir2.path()).unwrap();
    let lines = read_lines(&report.metrics_path);
    assert_eq!(lines.len(), 1 + 3 + 1); // header + 3 train + final val
    let epochs: Vec<u64> = lines[1..]
        .iter()
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(epochs.windows(2).all(|w| w[0] <= w[1]), "{epochs:?}");
}

#[test]
fn equal_seeds_give_byte_identical_outputs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let mut config = tiny_config(7);
    config.epochs = 2;
    run_training(&config, dir_a.path()).unwrap();
    run_training(&config, dir_b.path()).unwrap();
    let metrics_a = std::fs::read(dir_a.path().join("metrics.csv")).unwrap();
    let metrics_b = std::fs::read(dir_b.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics_a, metrics_b);
    let ckpt_a = std::fs::read(dir_a.path().join("best.ckpt")).unwrap();
    let ckpt_b = std::fs::read(dir_b.path().join("best.ckpt")).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn frozen_run_repeats_train_loss_across_epochs() {
    let mut config = tiny_config(3);
    config.epochs = 3;
    config.val_period = 10;
    config.optimizer.lr = 0.0;
    let dir = tempfile::tempdir().unwrap();
    let report = run_training(&config, dir.path()).unwrap();
    let lines = read_lines(&report.metrics_path);
    let train_rows: Vec<&String> = lines.iter().filter(|l| l.contains(",train,")).collect();
    assert_eq!(train_rows.len(), 3);
    let loss_of = |row: &str| -> f64 { row.split(',').nth(6).unwrap().parse().unwrap() };
    let first = loss_of(train_rows[0]);
    for row in &train_rows[1..] {
        assert!((loss_of(row) - first).abs() <= 1e-6, "{row}");
    }
}

#[test]
fn checkpoint_evaluates_and_exports_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_config(5);
    config.epochs = 2;
    let report = run_training(&config, dir.path()).unwrap();

    // Materialize the synthetic dataset as a manifest for the CLI-style path.
    let manifest = load_dataset(&config).unwrap();
    let data_path = dir.path().join("data.jsonl");
    save_manifest(&manifest, &data_path).unwrap();

    let (acc1, ci1) =
        evaluate_checkpoint(&report.checkpoint_path, &data_path, Split::MetaTest, 8, 42).unwrap();
    let (acc2, ci2) =
        evaluate_checkpoint(&report.checkpoint_path, &data_path, Split::MetaTest, 8, 42).unwrap();
    assert_eq!(acc1.to_bits(), acc2.to_bits());
    assert_eq!(ci1.to_bits(), ci2.to_bits());
    assert!((0.0..=100.0).contains(&acc1));
    assert!(ci1 >= 0.0);

    let export_a = dir.path().join("emb_a.csv");
    let export_b = dir.path().join("emb_b.csv");
    let rows = export_checkpoint_embeddings(
        &report.checkpoint_path,
        &data_path,
        Split::MetaTest,
        2,
        2,
        9,
        &export_a,
    )
    .unwrap();
    export_checkpoint_embeddings(
        &report.checkpoint_path,
        &data_path,
        Split::MetaTest,
        2,
        2,
        9,
        &export_b,
    )
    .unwrap();
    assert_eq!(rows, 4);
    let lines = read_lines(&export_a);
    assert_eq!(lines.len(), 5); // header + 4 rows
    assert!(lines[0].starts_with("class,item,e0,"));
    assert_eq!(std::fs::read(&export_a).unwrap(), std::fs::read(&export_b).unwrap());
}

#[test]
fn export_shortfall_is_a_data_error() {
    let config = tiny_config(6);
    let harness = Harness::<f32>::new(config).unwrap();
    let out = tempfile::tempdir().unwrap().path().join("e.csv");
    // meta_test has only 2 classes.
    assert!(harness.export_embeddings(Split::MetaTest, 10, 2, 0, &out).is_err());
}

#[test]
fn single_modality_runs_skip_matching_loss() {
    for modality in [Modality::ImageOnly, Modality::TextOnly] {
        let mut config = tiny_config(8);
        config.modality = modality;
        let dir = tempfile::tempdir().unwrap();
        let report = run_training(&config, dir.path()).unwrap();
        // matching_loss column is exactly zero in every row.
        for line in &read_lines(&report.metrics_path)[1..] {
            let matching: f64 = line.split(',').nth(5).unwrap().parse().unwrap();
            assert_eq!(matching, 0.0, "{line}");
        }
        // No cross-modal parameters exist.
        match modality {
            Modality::ImageOnly => {
                assert!(report.param_names.iter().all(|n| n.starts_with("conv4.")))
            }
            Modality::TextOnly => {
                assert!(report.param_names.iter().all(|n| n.starts_with("text.")))
            }
            _ => unreachable!(),
        }
    }
}

#[test]
fn all_four_fusion_methods_train_end_to_end() {
    for fusion in ["mean", "fc", "attention", "attention_residual"] {
        let mut config = tiny_config(9);
        config.fusion = serde_json::from_str(&format!("\"{fusion}\"")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let report = run_training(&config, dir.path()).unwrap();
        assert!(report.checkpoint_path.exists(), "{fusion}");
        assert!(report.best_val_accuracy >= 0.0, "{fusion}");
    }
}

#[test]
fn maml_trains_end_to_end() {
    let mut config = tiny_config(10);
    config.model = serde_json::from_str("\"maml\"").unwrap();
    config.maml.inner_lr = 0.5;
    config.maml.inner_steps = 1;
    let dir = tempfile::tempdir().unwrap();
    let report = run_training(&config, dir.path()).unwrap();
    assert!(report.checkpoint_path.exists());
}
