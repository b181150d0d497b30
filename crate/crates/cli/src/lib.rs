//! Command-line surface: train, train-adv, eval, attack, gradcam, report.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (manifests, images, checkpoints, I/O), 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use robustlens_core::adversarial::{fgsm, AttackConfig};
use robustlens_core::data::{image_io, load_manifest, load_sample, Split};
use robustlens_core::error::Error;
use robustlens_core::gradcam::{gradcam, overlay, score_containment, SaliencyScore};
use robustlens_core::model::{argmax_rows, load, predict};
use robustlens_core::trainer::{
    evaluate_checkpoint, merge_reports, run_experiment, RunConfig,
};
use robustlens_core::Result;

#[derive(Parser)]
#[command(name = "robustlens", version, about = "Train, attack, harden, and explain small CNN classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON.
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of rounds.
    #[arg(long)]
    rounds: Option<u32>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Perturbation budget override (training attack for train-adv,
    /// starred evaluation for both).
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluate on perturbed twins of the split (a starred row).
    #[arg(long)]
    perturbed: bool,
    #[arg(long, default_value_t = 0.02)]
    epsilon: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Directory receiving report.json.
    #[arg(long, default_value = ".")]
    output: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 0.02)]
    epsilon: f64,
    /// Directory receiving the perturbed images and flips.json.
    #[arg(long)]
    output: PathBuf,
    /// Cap the number of attacked images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Conv layer to tap (conv0, conv1, ...); defaults to the last one.
    #[arg(long)]
    layer: Option<String>,
    /// Directory receiving overlays and saliency.json.
    #[arg(long)]
    output: PathBuf,
    /// Also render heatmaps for misclassified images.
    #[arg(long)]
    include_misclassified: bool,
    /// Cap the number of rendered images.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Experiment directories to merge (each holding report.json).
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Directory receiving the merged report.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Standard training experiment (all rounds plus aggregate report).
    Train(TrainArgs),
    /// Adversarial training experiment with identical hyper-parameters.
    TrainAdv(TrainArgs),
    /// Evaluate a checkpoint on a manifest split.
    Eval(EvalArgs),
    /// Write perturbed copies of a split and the prediction flips.
    Attack(AttackArgs),
    /// Render heatmap overlays with mask-containment scores.
    Gradcam(GradcamArgs),
    /// Merge experiment reports into one table.
    Report(ReportArgs),
}

/// Parse and dispatch; returns the process exit code.
pub fn run(argv: &[String]) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args, false),
        Command::TrainAdv(args) => cmd_train(args, true),
        Command::Eval(args) => cmd_eval(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Gradcam(args) => cmd_gradcam(args),
        Command::Report(args) => cmd_report(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// 1 usage/config, 2 data, 3 numerical.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } | Error::GraphConsumed => 3,
        Error::Manifest(_)
        | Error::Image { .. }
        | Error::Checkpoint(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Json(_) => 2,
        Error::ShapeMismatch { .. } | Error::InvalidConfig { .. } | Error::Config(_) => 1,
    }
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn load_run_config(args: &TrainArgs) -> Result<RunConfig> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", args.config.display())))?;
    let mut config: RunConfig = serde_json::from_str(&text)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(rounds) = args.rounds {
        config.rounds = rounds;
    }
    if let Some(output) = &args.output {
        config.output_dir = output.clone();
    }
    Ok(config)
}

fn cmd_train(args: TrainArgs, adversarial: bool) -> Result<()> {
    let mut config = load_run_config(&args)?;
    if adversarial {
        let mut attack = config.attack.unwrap_or_default();
        if let Some(eps) = args.epsilon {
            attack.epsilon = eps;
        }
        config.attack = Some(attack);
        if config.eval_attack.is_none() {
            config.eval_attack = Some(attack);
        }
    } else {
        config.attack = None;
        if let Some(eps) = args.epsilon {
            let mut attack = config.eval_attack.unwrap_or_default();
            attack.epsilon = eps;
            config.eval_attack = Some(attack);
        }
    }
    let report = run_experiment(&config)?;
    print!("{}", robustlens_core::metrics::format_table(&report.rows()));
    println!("artifacts: {}", config.output_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let attack = args.perturbed.then(|| AttackConfig::with_epsilon(args.epsilon));
    let report = evaluate_checkpoint(&args.checkpoint, &args.manifest, split, args.batch_size, attack.as_ref())?;
    fs::create_dir_all(&args.output)?;
    let json = serde_json::to_string_pretty(&report)? + "\n";
    fs::write(args.output.join("report.json"), &json)?;
    print!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct FlipRecord {
    path: String,
    label: usize,
    clean_prediction: usize,
    adversarial_prediction: usize,
    flipped: bool,
}

fn cmd_attack(args: AttackArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let attack = AttackConfig::with_epsilon(args.epsilon);
    attack.validate()?;
    let ckpt = load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let target = (ckpt.config.input[1], ckpt.config.input[2]);

    let images_dir = args.output.join("images");
    fs::create_dir_all(&images_dir)?;

    let mut flips = Vec::new();
    let mut records = manifest.split(split);
    if let Some(limit) = args.limit {
        records.truncate(limit);
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!("split {split} is empty")));
    }
    for record in records {
        let sample = load_sample::<f32>(&manifest, record, target, 1.0 / 255.0)?;
        let batch = robustlens_core::tensor::Tensor::new(
            vec![1, 1, target.0, target.1],
            sample.image.data().to_vec(),
        )?;
        let clean_pred = argmax_rows(&predict(&ckpt.config, &ckpt.params, &batch)?)[0];
        let perturbed = fgsm(&ckpt.config, &ckpt.params, &batch, &[record.label], &attack)?;
        let adv_pred = argmax_rows(&predict(&ckpt.config, &ckpt.params, &perturbed.adversarial)?)[0];

        let name = record
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("record{}", record.source));
        let out_path = images_dir.join(format!("{name}.png"));
        let plane = image_io::to_u8_plane(perturbed.adversarial.data());
        image_io::write_gray_png(&out_path, &plane, target.0, target.1)?;

        flips.push(FlipRecord {
            path: record.path.display().to_string(),
            label: record.label,
            clean_prediction: clean_pred,
            adversarial_prediction: adv_pred,
            flipped: clean_pred != adv_pred,
        });
    }
    let flipped = flips.iter().filter(|f| f.flipped).count();
    fs::write(
        args.output.join("flips.json"),
        serde_json::to_string_pretty(&flips)? + "\n",
    )?;
    println!(
        "attacked {} images at epsilon {}: {} predictions flipped",
        flips.len(),
        args.epsilon,
        flipped
    );
    Ok(())
}

#[derive(Serialize)]
struct SaliencyRecord {
    path: String,
    label: usize,
    predicted: usize,
    correct: bool,
    zero_map: bool,
    score: Option<SaliencyScore>,
}

fn cmd_gradcam(args: GradcamArgs) -> Result<()> {
    let split = parse_split(&args.split)?;
    let ckpt = load(&args.checkpoint)?;
    let manifest = load_manifest(&args.manifest)?;
    let target = (ckpt.config.input[1], ckpt.config.input[2]);
    let layer = match &args.layer {
        Some(name) => ckpt.config.resolve_conv_layer(name)?,
        None => ckpt.config.last_conv_layer()?,
    };

    let overlays_dir = args.output.join("overlays");
    fs::create_dir_all(&overlays_dir)?;

    let mut results = Vec::new();
    let mut records = manifest.split(split);
    if let Some(limit) = args.limit {
        records.truncate(limit);
    }
    for record in records {
        let sample = load_sample::<f32>(&manifest, record, target, 1.0 / 255.0)?;
        let batch = robustlens_core::tensor::Tensor::new(
            vec![1, 1, target.0, target.1],
            sample.image.data().to_vec(),
        )?;
        let predicted = argmax_rows(&predict(&ckpt.config, &ckpt.params, &batch)?)[0];
        let correct = predicted == record.label;
        if !correct && !args.include_misclassified {
            continue;
        }
        // explain the predicted class
        let heat = gradcam(&ckpt.config, &ckpt.params, &sample.image, predicted, layer)?;
        let rgb = overlay(&heat.map, &sample.image)?;
        let name = record
            .path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("record{}", record.source));
        image_io::write_rgb_png(&overlays_dir.join(format!("{name}.png")), &rgb, target.0, target.1)?;

        let score = match &sample.mask {
            Some(mask) => Some(score_containment(&heat.map, mask)?),
            None => None,
        };
        results.push(SaliencyRecord {
            path: record.path.display().to_string(),
            label: record.label,
            predicted,
            correct,
            zero_map: heat.zero_map,
            score,
        });
    }
    fs::write(
        args.output.join("saliency.json"),
        serde_json::to_string_pretty(&results)? + "\n",
    )?;
    println!("rendered {} heatmap overlays to {}", results.len(), args.output.display());
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let (table, reports) = merge_reports(&args.inputs)?;
    fs::create_dir_all(&args.output)?;
    fs::write(args.output.join("report.txt"), &table)?;
    fs::write(
        args.output.join("report.json"),
        serde_json::to_string_pretty(&reports)? + "\n",
    )?;
    print!("{table}");
    Ok(())
}

/// Evaluate a manifest split's clean accuracy with a given checkpoint.
pub fn clean_accuracy(checkpoint: &Path, manifest: &Path, split: Split) -> Result<f64> {
    let report = evaluate_checkpoint(checkpoint, manifest, split, 32, None)?;
    Ok(report.accuracy)
}
