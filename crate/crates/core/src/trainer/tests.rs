use std::path::Path;

use tempfile::tempdir;

use super::*;
use crate::data::synth::{generate, SynthConfig};

fn quick_dataset(dir: &Path) -> PathBuf {
    generate(
        dir,
        &SynthConfig {
            size: 12,
            train_per_class: 6,
            val_per_class: 3,
            test_per_class: 3,
            seed: 5,
            ..Default::default()
        },
    )
    .unwrap()
}

fn quick_config(manifest: PathBuf, out: PathBuf) -> RunConfig {
    RunConfig {
        model: ModelSpec::Preset { preset: "tiny".into(), input: [1, 12, 12], num_classes: 3 },
        manifest,
        augmentation: AugmentationConfig::identity(1.0 / 255.0),
        attack: None,
        eval_attack: None,
        batch_size: 8,
        max_epochs: 2,
        rounds: 2,
        learning_rate: 3e-3,
        seed: 7,
        output_dir: out,
    }
}

#[test]
fn one_epoch_cap_yields_one_epoch_and_a_checkpoint() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());
    let mut config = quick_config(manifest, out.path().to_path_buf());
    config.max_epochs = 1;

    let record = train_round(&config, 0).unwrap();
    assert_eq!(record.halt_epoch, 1);
    assert_eq!(record.train_losses.len(), 1);
    assert_eq!(record.val_losses.len(), 1);
    assert_eq!(record.best_epoch, 1);
    let ckpt_path = config.output_dir.join(&record.checkpoint_path);
    assert!(ckpt_path.is_file());
    let ckpt = crate::model::load(&ckpt_path).unwrap();
    assert_eq!(ckpt.meta.epoch, 1);
}

#[test]
fn identical_seeds_reproduce_records_bit_for_bit() {
    let data = tempdir().unwrap();
    let manifest = quick_dataset(data.path());

    let out1 = tempdir().unwrap();
    let out2 = tempdir().unwrap();
    let c1 = quick_config(manifest.clone(), out1.path().to_path_buf());
    let c2 = quick_config(manifest, out2.path().to_path_buf());
    train_round(&c1, 0).unwrap();
    train_round(&c2, 0).unwrap();

    let rec1 = std::fs::read(out1.path().join("round-0/record.json")).unwrap();
    let rec2 = std::fs::read(out2.path().join("round-0/record.json")).unwrap();
    assert_eq!(rec1, rec2);
    let ck1 = std::fs::read(out1.path().join("round-0/checkpoint.rlck")).unwrap();
    let ck2 = std::fs::read(out2.path().join("round-0/checkpoint.rlck")).unwrap();
    assert_eq!(ck1, ck2);
}

#[test]
fn separable_toy_set_is_fit_within_fifty_epochs() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest_path = generate(
        data.path(),
        &SynthConfig {
            size: 16,
            train_per_class: 10,
            val_per_class: 4,
            test_per_class: 4,
            noise: 0.05,
            seed: 1,
            ..Default::default()
        },
    )
    .unwrap();
    let mut config = quick_config(manifest_path.clone(), out.path().to_path_buf());
    config.model = ModelSpec::Preset { preset: "tiny".into(), input: [1, 16, 16], num_classes: 3 };
    config.max_epochs = 50;
    config.batch_size = 6;

    let record = train_round(&config, 0).unwrap();
    let ckpt = crate::model::load(&config.output_dir.join(&record.checkpoint_path)).unwrap();
    let manifest = crate::data::load_manifest(&manifest_path).unwrap();
    let aug = AugmentationConfig::default();
    let batches = crate::data::batch_iter::<f32>(&manifest, Split::Train, (16, 16), 10, &aug, false, 0).unwrap();
    let train_report =
        crate::adversarial::evaluate_clean(&ckpt.config, &ckpt.params, batches, POSITIVE_CLASS).unwrap();
    assert_eq!(train_report.accuracy, 1.0, "separable data must be fit");
}

#[test]
fn lr_trace_is_non_increasing_and_best_epoch_is_argmin() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());
    let mut config = quick_config(manifest, out.path().to_path_buf());
    config.max_epochs = 8;

    let record = train_round(&config, 0).unwrap();
    for pair in record.lr_trace.windows(2) {
        assert!(pair[1] <= pair[0]);
    }
    // best snapshot is the argmin of validation losses, ties to earlier
    let mut best = 0usize;
    for (i, &v) in record.val_losses.iter().enumerate() {
        if v < record.val_losses[best] {
            best = i;
        }
    }
    assert_eq!(record.best_epoch, best as u32 + 1);
    assert!((record.best_val_loss - record.val_losses[best]).abs() < 1e-15);

    // the checkpoint on disk is that epoch's snapshot
    let ckpt = crate::model::load(&config.output_dir.join(&record.checkpoint_path)).unwrap();
    assert_eq!(ckpt.meta.epoch, u64::from(record.best_epoch));
}

#[test]
fn repeating_a_round_aggregates_to_zero_half_width() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());
    let config = quick_config(manifest, out.path().to_path_buf());

    let r1 = train_round(&config, 0).unwrap();
    let r2 = train_round(&config, 0).unwrap();
    let agg = crate::metrics::aggregate(&[r1.test.clone(), r2.test]).unwrap();
    assert_eq!(agg.accuracy.half_width, 0.0);
}

#[test]
fn experiment_writes_the_artifact_layout() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());
    let mut config = quick_config(manifest, out.path().join("exp"));
    config.eval_attack = Some(crate::adversarial::AttackConfig::with_epsilon(0.02));

    let report = run_experiment(&config).unwrap();
    assert_eq!(report.rounds, 2);
    assert!(report.perturbed.is_some());
    let dir = &config.output_dir;
    assert!(dir.join("config.json").is_file());
    assert!(dir.join("report.txt").is_file());
    assert!(dir.join("report.json").is_file());
    for round in 0..2 {
        assert!(dir.join(format!("round-{round}/checkpoint.rlck")).is_file());
        assert!(dir.join(format!("round-{round}/record.json")).is_file());
    }
    let table = std::fs::read_to_string(dir.join("report.txt")).unwrap();
    assert!(table.contains("tiny") && table.contains("tiny*"), "{table}");
}

#[test]
fn merged_reports_pair_clean_and_starred_rows() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());

    let mut std_config = quick_config(manifest.clone(), out.path().join("std"));
    std_config.eval_attack = Some(crate::adversarial::AttackConfig::with_epsilon(0.02));
    run_experiment(&std_config).unwrap();

    let mut adv_config = quick_config(manifest, out.path().join("adv"));
    adv_config.attack = Some(crate::adversarial::AttackConfig::with_epsilon(0.02));
    adv_config.eval_attack = Some(crate::adversarial::AttackConfig::with_epsilon(0.02));
    run_experiment(&adv_config).unwrap();

    let (table, reports) = merge_reports(&[out.path().join("std"), out.path().join("adv")]).unwrap();
    assert_eq!(reports.len(), 2);
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 5, "{table}");
    assert!(lines[1].contains("tiny ") || lines[1].contains("tiny  "));
    assert!(lines[2].contains("tiny*"));
    assert!(lines[3].contains("tiny-adv "));
    assert!(lines[4].contains("tiny-adv*"));
}

#[test]
fn untrained_model_scores_at_chance_on_the_balanced_test_split() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest_path = generate(
        data.path(),
        &SynthConfig {
            size: 12,
            train_per_class: 2,
            val_per_class: 2,
            test_per_class: 40,
            seed: 3,
            ..Default::default()
        },
    )
    .unwrap();

    // write an untrained checkpoint
    let model_config = crate::model::ModelConfig::tiny([1, 12, 12], 3, 99);
    let params = crate::model::build::<f32>(&model_config).unwrap();
    let ckpt = crate::model::Checkpoint {
        config: model_config,
        meta: crate::model::CheckpointMeta { epoch: 0, best_val_loss: 0.0, rng_seed: 99 },
        params,
    };
    let ckpt_path = out.path().join("untrained.rlck");
    crate::model::save(&ckpt, &ckpt_path).unwrap();

    let report = evaluate_checkpoint(&ckpt_path, &manifest_path, Split::Test, 16, None).unwrap();
    assert_eq!(report.samples, 120);
    assert!((report.accuracy - 1.0 / 3.0).abs() < 0.2, "accuracy {}", report.accuracy);
}

#[test]
fn rounds_must_be_at_least_two_for_aggregation() {
    let data = tempdir().unwrap();
    let out = tempdir().unwrap();
    let manifest = quick_dataset(data.path());
    let mut config = quick_config(manifest, out.path().to_path_buf());
    config.rounds = 1;
    assert!(run_experiment(&config).is_err());
}
