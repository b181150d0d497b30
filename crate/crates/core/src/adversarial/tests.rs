use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::Batch;
use crate::model::{build, LayerSpec, ModelConfig, Role};
use crate::optim::{batch_loss, AdamState, DEFAULT_LEARNING_RATE};
use crate::tensor::Tensor;

/// One-pixel logistic model: logits = [w*x, 0], so the loss gradient in x
/// is w * p0 and analytic throughout.
fn logistic_model(w: f64) -> (ModelConfig, crate::model::ModelParams<f64>) {
    let config = ModelConfig {
        input: [1, 1, 1],
        layers: vec![LayerSpec::Flatten, LayerSpec::Dense { width: 2 }],
        num_classes: 2,
        seed: 0,
    };
    let mut params = build::<f64>(&config).unwrap();
    params
        .set_all(vec![
            ((1, Role::Weight), vec![w, 0.0]),
            ((1, Role::Bias), vec![0.0, 0.0]),
        ])
        .unwrap();
    (config, params)
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, hw: usize) -> (Tensor<f32>, Vec<usize>) {
    let data = (0..n * hw * hw).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels = (0..n).map(|i| i % 3).collect();
    (Tensor::new(vec![n, 1, hw, hw], data).unwrap(), labels)
}

#[test]
fn zero_epsilon_is_the_identity_bitwise() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 1);
    let params = build::<f32>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (batch, labels) = random_batch(&mut rng, 4, 8);
    let out = fgsm(&config, &params, &batch, &labels, &AttackConfig::with_epsilon(0.0)).unwrap();
    assert!(out
        .adversarial
        .data()
        .iter()
        .zip(batch.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()));
    assert!(out.perturbation.data().iter().all(|&e| e == 0.0));
}

#[test]
fn positive_input_gradient_pushes_the_pixel_up() {
    let (config, params) = logistic_model(2.0);
    let x = Tensor::new(vec![1, 1, 1, 1], vec![0.4f64]).unwrap();
    // label 1: J = log(1 + exp(w x)), dJ/dx = w * p0 > 0
    let out = fgsm(&config, &params, &x, &[1], &AttackConfig::with_epsilon(0.05)).unwrap();
    assert!((out.adversarial.data()[0] - 0.45).abs() < 1e-12);

    // near the clip bound the pixel saturates at 1
    let x = Tensor::new(vec![1, 1, 1, 1], vec![0.98f64]).unwrap();
    let out = fgsm(&config, &params, &x, &[1], &AttackConfig::with_epsilon(0.05)).unwrap();
    assert_eq!(out.adversarial.data()[0], 1.0);
}

#[test]
fn perturbation_saturates_the_budget_where_gradients_are_nonzero() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 3);
    let params = build::<f32>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // keep pixels away from the clip bounds so the budget binds
    let data: Vec<f32> = (0..2 * 64).map(|_| rng.gen_range(0.1..0.9)).collect();
    let batch = Tensor::new(vec![2, 1, 8, 8], data).unwrap();
    let out = fgsm(&config, &params, &batch, &[0, 1], &AttackConfig::with_epsilon(0.02)).unwrap();
    let max_delta = out
        .adversarial
        .data()
        .iter()
        .zip(batch.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(max_delta <= 0.02);
    assert!(max_delta > 0.0199, "budget should bind somewhere, got {max_delta}");
}

#[test]
fn hard_bounds_hold_for_random_inputs() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 5);
    let params = build::<f32>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for round in 0..20 {
        let eps = [0.0, 0.005, 0.02, 0.1, 1.0][round % 5];
        let (batch, labels) = random_batch(&mut rng, 3, 8);
        let out = fgsm(&config, &params, &batch, &labels, &AttackConfig::with_epsilon(eps)).unwrap();
        for (&a, &x) in out.adversarial.data().iter().zip(batch.data()) {
            assert!((a - x).abs() <= eps as f32, "|{a} - {x}| > {eps}");
            assert!((0.0..=1.0).contains(&a));
        }
        for &e in out.perturbation.data() {
            assert!(e.abs() <= eps as f32);
        }
    }
}

#[test]
fn fgsm_never_mutates_parameters() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 9);
    let params = build::<f32>(&config).unwrap();
    let before = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (batch, labels) = random_batch(&mut rng, 2, 8);
    let _ = fgsm(&config, &params, &batch, &labels, &AttackConfig::default()).unwrap();
    assert_eq!(params, before);
}

#[test]
fn zero_epsilon_training_step_equals_the_standard_step() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 13);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (batch, labels) = random_batch(&mut rng, 4, 8);

    let mut std_params = build::<f32>(&config).unwrap();
    let mut std_adam = AdamState::new(&std_params, DEFAULT_LEARNING_RATE as f32);
    let std_loss = train_step(&config, &mut std_params, &mut std_adam, &batch, &labels).unwrap();

    let mut adv_params = build::<f32>(&config).unwrap();
    let mut adv_adam = AdamState::new(&adv_params, DEFAULT_LEARNING_RATE as f32);
    let adv_loss = adversarial_train_step(
        &config,
        &mut adv_params,
        &mut adv_adam,
        &batch,
        &labels,
        &AttackConfig::with_epsilon(0.0),
    )
    .unwrap();

    assert_eq!(std_loss.to_bits(), adv_loss.to_bits());
    for ((k1, t1), (k2, t2)) in std_params.entries().iter().zip(adv_params.entries()) {
        assert_eq!(k1, k2);
        assert!(t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn adversarial_step_is_deterministic() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (batch, labels) = random_batch(&mut rng, 4, 8);
    let run = || {
        let mut params = build::<f32>(&config).unwrap();
        let mut adam = AdamState::new(&params, DEFAULT_LEARNING_RATE as f32);
        adversarial_train_step(&config, &mut params, &mut adam, &batch, &labels, &AttackConfig::default())
            .unwrap();
        params
    };
    let a = run();
    let b = run();
    for ((_, t1), (_, t2)) in a.entries().iter().zip(b.entries()) {
        assert!(t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn loss_under_attack_is_monotone_in_epsilon_for_the_logistic_oracle() {
    let (config, params) = logistic_model(3.0);
    let x = Tensor::new(vec![1, 1, 1, 1], vec![0.3f64]).unwrap();
    let labels = [1usize];
    let mut last = f64::NEG_INFINITY;
    for eps in [0.0, 0.01, 0.02, 0.05, 0.1, 0.3] {
        let adv = fgsm(&config, &params, &x, &labels, &AttackConfig::with_epsilon(eps)).unwrap();
        let loss = batch_loss(&config, &params, &adv.adversarial, &labels).unwrap();
        assert!(loss >= last - 1e-12, "loss {loss} dropped below {last} at eps {eps}");
        last = loss;
    }
}

fn in_memory_batches(images: &Tensor<f32>, labels: &[usize], chunk: usize) -> Vec<crate::Result<Batch<f32>>> {
    let n = labels.len();
    let hw: usize = images.shape()[2] * images.shape()[3];
    (0..n)
        .step_by(chunk)
        .map(|start| {
            let end = (start + chunk).min(n);
            let data = images.data()[start * hw..end * hw].to_vec();
            Ok(Batch {
                images: Tensor::new(vec![end - start, 1, images.shape()[2], images.shape()[3]], data).unwrap(),
                labels: labels[start..end].to_vec(),
                records: (start..end).collect(),
            })
        })
        .collect()
}

#[test]
fn zero_epsilon_evaluation_equals_clean_evaluation() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 19);
    let params = build::<f32>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (images, labels) = random_batch(&mut rng, 12, 8);

    let clean = evaluate_clean(&config, &params, in_memory_batches(&images, &labels, 5), 1).unwrap();
    let attacked = evaluate_under_attack(
        &config,
        &params,
        in_memory_batches(&images, &labels, 5),
        &AttackConfig::with_epsilon(0.0),
        1,
    )
    .unwrap();
    assert_eq!(clean, attacked);
}

#[test]
fn random_weights_score_at_chance_on_a_balanced_set() {
    let config = ModelConfig::tiny([1, 8, 8], 3, 23);
    let params = build::<f32>(&config).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let n = 300;
    let (images, labels) = random_batch(&mut rng, n, 8);
    let report = evaluate_clean(&config, &params, in_memory_batches(&images, &labels, 32), 1).unwrap();
    // inputs carry no class signal, so accuracy sits at 1/3 within a
    // generous binomial window (4 sigma at n=300 is about 0.11)
    assert!((report.accuracy - 1.0 / 3.0).abs() < 0.12, "accuracy {}", report.accuracy);
}
