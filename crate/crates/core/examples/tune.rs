//! Scratch harness for calibrating the toy attack/defense experiments.

use std::path::PathBuf;

use robustlens_core::adversarial::AttackConfig;
use robustlens_core::data::synth::{generate, StampSpec, SynthConfig};
use robustlens_core::data::{load_manifest, load_sample, AugmentationConfig, Split};
use robustlens_core::gradcam::{gradcam, region_mass, score_containment};
use robustlens_core::model::{argmax_rows, predict};
use robustlens_core::trainer::{train_round, ModelSpec, RunConfig};

fn twin_config(manifest: PathBuf, out: PathBuf, seed: u64, adv: bool, epochs: u32, lr: f64, size: usize, batch: usize) -> RunConfig {
    RunConfig {
        model: ModelSpec::Preset { preset: "tiny".into(), input: [1, size, size], num_classes: 3 },
        manifest,
        augmentation: AugmentationConfig::identity(1.0 / 255.0),
        attack: adv.then(|| AttackConfig::with_epsilon(0.02)),
        eval_attack: Some(AttackConfig::with_epsilon(0.02)),
        batch_size: batch,
        max_epochs: epochs,
        rounds: 2,
        learning_rate: lr,
        seed,
        output_dir: out,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("attack");
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0, 1, 2, 3, 4]);
    let epochs: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(25);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let size: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(32);
    let noise: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.12);
    let blob: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.55);
    let stamp_intensity: f64 = args.get(8).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let train_per_class: usize = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(60);
    let batch: usize = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(32);
    let fragile: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    for &seed in &seeds {
        let start = std::time::Instant::now();
        let tmp = tempdir_path(seed, mode);
        std::fs::create_dir_all(&tmp).unwrap();
        let synth = SynthConfig {
            size,
            train_per_class,
            val_per_class: 12,
            test_per_class: 20,
            noise,
            blob_amplitude: blob,
            fragile_amplitude: fragile,
            stamp: (mode == "stamp").then_some(StampSpec { class: 1, probability: 0.9, intensity: stamp_intensity }),
            seed: seed * 1000 + 17,
        };
        let manifest_path = generate(&tmp.join("data"), &synth).unwrap();

        let std_cfg = twin_config(manifest_path.clone(), tmp.join("std"), seed, false, epochs, lr, size, batch);
        let adv_cfg = twin_config(manifest_path.clone(), tmp.join("adv"), seed, true, epochs, lr, size, batch);
        let std_rec = train_round(&std_cfg, 0).unwrap();
        let adv_rec = train_round(&adv_cfg, 0).unwrap();

        let std_clean = std_rec.test.accuracy;
        let std_pert = std_rec.test_perturbed.as_ref().unwrap().accuracy;
        let adv_clean = adv_rec.test.accuracy;
        let adv_pert = adv_rec.test_perturbed.as_ref().unwrap().accuracy;

        print!(
            "seed {seed}: std {std_clean:.3}/{std_pert:.3}* adv {adv_clean:.3}/{adv_pert:.3}*  gap {:.3} defense {:.3} cleandiff {:.3}  [{}s]",
            std_clean - std_pert,
            adv_pert - std_pert,
            (adv_clean - std_clean).abs(),
            start.elapsed().as_secs()
        );

        if mode == "stamp" {
            let manifest = load_manifest(&manifest_path).unwrap();
            let rect = robustlens_core::data::synth::stamp_rect(size);
            let std_ck = robustlens_core::model::load(&std_cfg.output_dir.join(&std_rec.checkpoint_path)).unwrap();
            let adv_ck = robustlens_core::model::load(&adv_cfg.output_dir.join(&adv_rec.checkpoint_path)).unwrap();
            let mut sums = [0.0f64; 4]; // std_mass, adv_mass, std_cont, adv_cont
            let mut n = 0usize;
            for record in manifest.split(Split::Test) {
                if record.label != 1 {
                    continue;
                }
                let sample = load_sample::<f32>(&manifest, record, (size, size), 1.0 / 255.0).unwrap();
                let batch = robustlens_core::tensor::Tensor::new(
                    vec![1, 1, size, size],
                    sample.image.data().to_vec(),
                )
                .unwrap();
                let p_std = argmax_rows(&predict(&std_ck.config, &std_ck.params, &batch).unwrap())[0];
                let p_adv = argmax_rows(&predict(&adv_ck.config, &adv_ck.params, &batch).unwrap())[0];
                if p_std != 1 || p_adv != 1 {
                    continue; // only correctly classified by both
                }
                let layer = std_ck.config.last_conv_layer().unwrap();
                let h_std = gradcam(&std_ck.config, &std_ck.params, &sample.image, 1, layer).unwrap();
                let h_adv = gradcam(&adv_ck.config, &adv_ck.params, &sample.image, 1, layer).unwrap();
                let mask = sample.mask.as_ref().unwrap();
                sums[0] += region_mass(&h_std.map, rect).unwrap();
                sums[1] += region_mass(&h_adv.map, rect).unwrap();
                sums[2] += score_containment(&h_std.map, mask).unwrap().containment;
                sums[3] += score_containment(&h_adv.map, mask).unwrap().containment;
                n += 1;
            }
            let nf = n.max(1) as f64;
            print!(
                "  stamp n={n} mass std {:.4} adv {:.4} ({}) cont std {:.4} adv {:.4} ({})",
                sums[0] / nf,
                sums[1] / nf,
                if sums[1] <= sums[0] { "OK" } else { "X" },
                sums[2] / nf,
                sums[3] / nf,
                if sums[3] >= sums[2] { "OK" } else { "X" },
            );
        }
        println!();
    }
}

fn tempdir_path(seed: u64, mode: &str) -> PathBuf {
    std::env::temp_dir().join(format!("robustlens-tune-{mode}-{seed}"))
}
