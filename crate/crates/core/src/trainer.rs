//! End-to-end experiment orchestration: standard and adversarial training
//! runs, the multi-round protocol, and report emission.
//!
//! Output directory layout per experiment:
//! `config.json`, `round-<i>/checkpoint.rlck`, `round-<i>/record.json`,
//! `report.txt`, `report.json`. All recorded paths are relative to the
//! experiment directory so identical seeds produce identical bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversarial::{adversarial_train_step, evaluate_clean, evaluate_under_attack, AttackConfig};
use crate::data::{
    batch_iter, load_manifest, mix_seed, AugmentationConfig, DatasetManifest, Split, POSITIVE_CLASS,
};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, format_table, MetricsReport, RoundsAggregate};
use crate::model::{build, Checkpoint, CheckpointMeta, ModelConfig, ModelParams};
use crate::optim::{
    batch_loss, train_step, AdamState, Decision, EarlyStopState, PlateauState,
    DEFAULT_LEARNING_RATE, EARLY_STOP_PATIENCE,
};

/// Worker-thread cap, from `ROBUSTLENS_THREADS` (default 1).
pub fn worker_threads() -> usize {
    std::env::var("ROBUSTLENS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Model reference in a run config: a named preset with an input shape, or
/// a fully custom architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset {
        preset: String,
        input: [usize; 3],
        #[serde(default = "default_num_classes")]
        num_classes: usize,
    },
    Custom {
        custom: ModelConfig,
    },
}

fn default_num_classes() -> usize {
    3
}

impl ModelSpec {
    pub fn to_config(&self, seed: u64) -> Result<ModelConfig> {
        match self {
            ModelSpec::Preset { preset, input, num_classes } => match preset.as_str() {
                "tiny" => Ok(ModelConfig::tiny(*input, *num_classes, seed)),
                "vgg-mini" => Ok(ModelConfig::vgg_mini(*input, *num_classes, seed)),
                other => Err(Error::Config(format!(
                    "unknown model preset {other:?} (expected tiny or vgg-mini)"
                ))),
            },
            ModelSpec::Custom { custom } => {
                let mut config = custom.clone();
                config.seed = seed;
                config.validate()?;
                Ok(config)
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            ModelSpec::Preset { preset, .. } => preset.clone(),
            ModelSpec::Custom { .. } => "custom".to_string(),
        }
    }
}

/// Full description of one experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub manifest: PathBuf,
    #[serde(default)]
    pub augmentation: AugmentationConfig,
    /// Adversarial training when present; training hyper-parameters are
    /// identical to the standard run either way.
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    /// Perturbed ("starred") test evaluation alongside the clean one.
    #[serde(default)]
    pub eval_attack: Option<AttackConfig>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: u32,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Adam learning rate; the protocol default is 1e-4.
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default)]
    pub seed: u64,
    pub output_dir: PathBuf,
}

fn default_batch_size() -> usize {
    32
}

fn default_max_epochs() -> u32 {
    100
}

fn default_rounds() -> u32 {
    15
}

fn default_learning_rate() -> f64 {
    DEFAULT_LEARNING_RATE
}

impl RunConfig {
    /// Desk-scale defaults: 64x64 tiny model, 3 rounds.
    pub fn desk_scale(manifest: PathBuf, output_dir: PathBuf) -> Self {
        RunConfig {
            model: ModelSpec::Preset { preset: "tiny".into(), input: [1, 64, 64], num_classes: 3 },
            manifest,
            augmentation: AugmentationConfig::default(),
            attack: None,
            eval_attack: None,
            batch_size: 32,
            max_epochs: 100,
            rounds: 3,
            learning_rate: DEFAULT_LEARNING_RATE,
            seed: 0,
            output_dir,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.to_config(self.seed)?;
        self.augmentation.validate()?;
        if let Some(a) = &self.attack {
            a.validate()?;
        }
        if let Some(a) = &self.eval_attack {
            a.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be at least 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !self.manifest.is_file() {
            return Err(Error::Manifest(format!("manifest {} not found", self.manifest.display())));
        }
        Ok(())
    }

    /// Row label for reports: the preset name, marked when adversarially
    /// trained.
    pub fn label(&self) -> String {
        if self.attack.is_some() {
            format!("{}-adv", self.model.label())
        } else {
            self.model.label()
        }
    }

}

/// Everything one round produced. Paths are relative to the experiment
/// directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub round: u32,
    pub round_seed: u64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    /// Learning rate in effect during each epoch.
    pub lr_trace: Vec<f64>,
    pub halt_epoch: u32,
    pub best_epoch: u32,
    pub best_val_loss: f64,
    pub checkpoint_path: PathBuf,
    pub test: MetricsReport,
    pub test_perturbed: Option<MetricsReport>,
}

/// Train one round: epochs with augmented train batches, per-epoch
/// validation, plateau decay and early stopping, best-snapshot selection,
/// and a final test evaluation of the best checkpoint.
pub fn train_round(config: &RunConfig, round: u32) -> Result<RunRecord> {
    config.validate()?;
    let round_seed = config.seed.wrapping_add(u64::from(round));
    let model_config = config.model.to_config(round_seed)?;
    let manifest = load_manifest(&config.manifest)?;
    let target = (model_config.input[1], model_config.input[2]);

    let mut params: ModelParams<f32> = build(&model_config)?;
    let mut adam = AdamState::new(&params, config.learning_rate as f32);
    let mut plateau = PlateauState::new();
    let mut early_stop: EarlyStopState<Checkpoint> =
        EarlyStopState::with_limits(EARLY_STOP_PATIENCE, config.max_epochs);

    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut lr_trace = Vec::new();
    let mut halt_epoch = 0;

    for epoch in 1..=config.max_epochs {
        lr_trace.push(f64::from(adam.lr()));
        let epoch_seed = mix_seed(round_seed, u64::from(epoch));

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        let batches = batch_iter::<f32>(
            &manifest,
            Split::Train,
            target,
            config.batch_size,
            &config.augmentation,
            true,
            epoch_seed,
        )?;
        for batch in batches {
            let batch = batch?;
            let n = batch.labels.len();
            let loss = match &config.attack {
                Some(attack) => adversarial_train_step(
                    &model_config,
                    &mut params,
                    &mut adam,
                    &batch.images,
                    &batch.labels,
                    attack,
                ),
                None => train_step(&model_config, &mut params, &mut adam, &batch.images, &batch.labels),
            }
            .map_err(|e| annotate_epoch(e, epoch, "train"))?;
            loss_sum += f64::from(loss) * n as f64;
            seen += n;
        }
        train_losses.push(loss_sum / seen as f64);

        let val_loss = split_loss(&model_config, &params, &manifest, Split::Val, config, round_seed)
            .map_err(|e| annotate_epoch(e, epoch, "validation"))?;
        val_losses.push(val_loss);

        let new_lr = plateau.update(val_loss, f64::from(adam.lr()));
        adam.set_lr(new_lr as f32);

        let snapshot = Checkpoint {
            config: model_config.clone(),
            meta: CheckpointMeta { epoch: u64::from(epoch), best_val_loss: val_loss, rng_seed: round_seed },
            params: params.clone(),
        };
        halt_epoch = epoch;
        if early_stop.update(epoch, val_loss, snapshot) == Decision::Halt {
            break;
        }
    }

    let best_val_loss = early_stop.best_loss();
    let (best_epoch, best) = early_stop
        .into_best_snapshot()
        .expect("at least one epoch ran, so a best snapshot exists");

    let round_dir = config.output_dir.join(format!("round-{round}"));
    fs::create_dir_all(&round_dir)?;
    let checkpoint_rel = PathBuf::from(format!("round-{round}/checkpoint.rlck"));
    crate::model::save(&best, &config.output_dir.join(&checkpoint_rel))?;

    let test = evaluate_split(&model_config, &best.params, &manifest, Split::Test, config, round_seed, None)?;
    let test_perturbed = match &config.eval_attack {
        Some(attack) => Some(evaluate_split(
            &model_config,
            &best.params,
            &manifest,
            Split::Test,
            config,
            round_seed,
            Some(attack),
        )?),
        None => None,
    };

    let record = RunRecord {
        round,
        round_seed,
        train_losses,
        val_losses,
        lr_trace,
        halt_epoch,
        best_epoch,
        best_val_loss,
        checkpoint_path: checkpoint_rel,
        test,
        test_perturbed,
    };
    fs::write(
        round_dir.join("record.json"),
        serde_json::to_string_pretty(&record)? + "\n",
    )?;
    Ok(record)
}

fn annotate_epoch(e: Error, epoch: u32, phase: &str) -> Error {
    match e {
        Error::NonFinite { context } => {
            Error::NonFinite { context: format!("{context} (epoch {epoch}, {phase})") }
        }
        other => other,
    }
}

/// Mean cross-entropy over a split, rescale only, fixed batch order.
fn split_loss(
    model_config: &ModelConfig,
    params: &ModelParams<f32>,
    manifest: &DatasetManifest,
    split: Split,
    config: &RunConfig,
    round_seed: u64,
) -> Result<f64> {
    let target = (model_config.input[1], model_config.input[2]);
    let batches = batch_iter::<f32>(
        manifest,
        split,
        target,
        config.batch_size,
        &config.augmentation,
        false,
        mix_seed(round_seed, 0x5EED),
    )?;
    let mut loss_sum = 0.0f64;
    let mut seen = 0usize;
    for batch in batches {
        let batch = batch?;
        let n = batch.labels.len();
        let loss = batch_loss(model_config, params, &batch.images, &batch.labels)?;
        loss_sum += f64::from(loss) * n as f64;
        seen += n;
    }
    Ok(loss_sum / seen as f64)
}

/// Metrics over a split, clean or under attack.
fn evaluate_split(
    model_config: &ModelConfig,
    params: &ModelParams<f32>,
    manifest: &DatasetManifest,
    split: Split,
    config: &RunConfig,
    round_seed: u64,
    attack: Option<&AttackConfig>,
) -> Result<MetricsReport> {
    let target = (model_config.input[1], model_config.input[2]);
    let batches = batch_iter::<f32>(
        manifest,
        split,
        target,
        config.batch_size,
        &config.augmentation,
        false,
        mix_seed(round_seed, 0x7E57),
    )?;
    match attack {
        Some(attack) => evaluate_under_attack(model_config, params, batches, attack, POSITIVE_CLASS),
        None => evaluate_clean(model_config, params, batches, POSITIVE_CLASS),
    }
}

/// Aggregated results of one experiment (all rounds of one config).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub label: String,
    pub rounds: u32,
    pub clean: RoundsAggregate,
    pub perturbed: Option<RoundsAggregate>,
}

impl ExperimentReport {
    /// Table rows: the clean aggregate plus a starred row for the
    /// perturbed evaluation when present.
    pub fn rows(&self) -> Vec<(String, RoundsAggregate)> {
        let mut rows = vec![(self.label.clone(), self.clean.clone())];
        if let Some(p) = &self.perturbed {
            rows.push((format!("{}*", self.label), p.clone()));
        }
        rows
    }
}

/// Run every round of an experiment (in parallel up to
/// `ROBUSTLENS_THREADS`), aggregate the metrics, and write the artifact
/// directory.
pub fn run_experiment(config: &RunConfig) -> Result<ExperimentReport> {
    config.validate()?;
    if config.rounds < 2 {
        return Err(Error::Config(format!(
            "aggregation needs at least 2 rounds, got {}",
            config.rounds
        )));
    }
    fs::create_dir_all(&config.output_dir)?;
    fs::write(
        config.output_dir.join("config.json"),
        serde_json::to_string_pretty(config)? + "\n",
    )?;

    let records = run_rounds(config)?;

    let clean: Vec<MetricsReport> = records.iter().map(|r| r.test.clone()).collect();
    let perturbed: Option<Vec<MetricsReport>> = records
        .iter()
        .map(|r| r.test_perturbed.clone())
        .collect::<Option<Vec<_>>>();

    let report = ExperimentReport {
        label: config.label(),
        rounds: config.rounds,
        clean: aggregate(&clean)?,
        perturbed: match perturbed {
            Some(p) => Some(aggregate(&p)?),
            None => None,
        },
    };

    fs::write(config.output_dir.join("report.txt"), format_table(&report.rows()))?;
    fs::write(
        config.output_dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    Ok(report)
}

fn run_rounds(config: &RunConfig) -> Result<Vec<RunRecord>> {
    let threads = worker_threads();
    let rounds: Vec<u32> = (0..config.rounds).collect();
    if threads <= 1 {
        return rounds.iter().map(|&r| train_round(config, r)).collect();
    }
    let mut results: Vec<Option<Result<RunRecord>>> = Vec::new();
    results.resize_with(rounds.len(), || None);
    for chunk in rounds.chunks(threads) {
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&r| scope.spawn(move || (r, train_round(config, r))))
                .collect();
            for handle in handles {
                let (r, result) = handle.join().expect("round worker panicked");
                results[r as usize] = Some(result);
            }
        });
    }
    results
        .into_iter()
        .map(|r| r.expect("every round index was scheduled"))
        .collect()
}

/// Merge `report.json` files from several experiment directories into one
/// table with paired starred rows.
pub fn merge_reports(dirs: &[PathBuf]) -> Result<(String, Vec<ExperimentReport>)> {
    if dirs.is_empty() {
        return Err(Error::Config("no experiment directories given".into()));
    }
    let mut reports = Vec::new();
    let mut rows = Vec::new();
    for dir in dirs {
        let path = dir.join("report.json");
        let text = fs::read_to_string(&path)
            .map_err(|e| Error::Manifest(format!("cannot read {}: {e}", path.display())))?;
        let report: ExperimentReport = serde_json::from_str(&text)?;
        rows.extend(report.rows());
        reports.push(report);
    }
    Ok((format_table(&rows), reports))
}

/// Load the manifest and evaluate a checkpoint on one split.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest_path: &Path,
    split: Split,
    batch_size: usize,
    attack: Option<&AttackConfig>,
) -> Result<MetricsReport> {
    let ckpt = crate::model::load(checkpoint)?;
    let manifest = load_manifest(manifest_path)?;
    let target = (ckpt.config.input[1], ckpt.config.input[2]);
    let aug = AugmentationConfig::default();
    let batches = batch_iter::<f32>(&manifest, split, target, batch_size, &aug, false, 0)?;
    match attack {
        Some(attack) => evaluate_under_attack(&ckpt.config, &ckpt.params, batches, attack, POSITIVE_CLASS),
        None => evaluate_clean(&ckpt.config, &ckpt.params, batches, POSITIVE_CLASS),
    }
}

#[cfg(test)]
mod tests;
