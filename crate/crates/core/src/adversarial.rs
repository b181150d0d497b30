//! Gradient-sign perturbation generation and the adversarial training
//! step: `eta = epsilon * sign(grad_x J(theta, x, y))`, applied fresh at
//! every training iteration.

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::metrics::{confusion, report, MetricsReport};
use crate::model::{argmax_rows, bind_params, forward, predict, ModelConfig, ModelParams};
use crate::optim::{train_step, AdamState};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Perturbation budget and pixel clip bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Max-norm budget in `[0,1]`.
    pub epsilon: f64,
    /// Pixel clip range applied after perturbation.
    pub clip: [f64; 2],
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig { epsilon: 0.02, clip: [0.0, 1.0] }
    }
}

impl AttackConfig {
    pub fn with_epsilon(epsilon: f64) -> Self {
        AttackConfig { epsilon, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon must be in [0,1], got {}", self.epsilon)));
        }
        if self.clip[0] >= self.clip[1] {
            return Err(Error::Config(format!("clip lower bound must be below upper, got {:?}", self.clip)));
        }
        Ok(())
    }
}

/// Adversarial images with the raw sign perturbation and original labels.
#[derive(Clone, Debug)]
pub struct PerturbedBatch<T> {
    pub adversarial: Tensor<T>,
    pub perturbation: Tensor<T>,
    pub labels: Vec<usize>,
}

/// Gradient of the batch loss with respect to the input pixels. Model
/// parameters are bound as constants and never touched.
pub fn input_gradient<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<Vec<T>> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    let input = graph.leaf(batch.clone().with_requires_grad());
    let out = forward(&mut graph, config, &bound, input)?;
    let loss = graph.softmax_cross_entropy(out.logits, labels)?;
    graph.backward(loss)?;
    graph
        .grad(input)
        .map(<[T]>::to_vec)
        .ok_or_else(|| Error::non_finite("input gradient missing"))
}

/// One-step sign attack: `x_adv = clip(x + epsilon * sign(grad), lo, hi)`
/// with `sign(0) = 0`. The max-norm bound `|x_adv - x| <= epsilon` holds
/// exactly: after clipping, any last-ulp rounding overshoot is walked back
/// toward the original pixel.
pub fn fgsm<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    attack: &AttackConfig,
) -> Result<PerturbedBatch<T>> {
    attack.validate()?;
    let grad = input_gradient(config, params, batch, labels)?;
    let eps = T::from_f64(attack.epsilon);
    let lo = T::from_f64(attack.clip[0]);
    let hi = T::from_f64(attack.clip[1]);

    let mut eta = Vec::with_capacity(grad.len());
    let mut adv = Vec::with_capacity(grad.len());
    for (&g, &x) in grad.iter().zip(batch.data()) {
        let sign = if g > T::zero() {
            T::one()
        } else if g < T::zero() {
            -T::one()
        } else {
            T::zero()
        };
        let e = eps * sign;
        let mut v = (x + e).max(lo).min(hi);
        while (v - x).abs() > eps {
            v = v.step_toward(x);
        }
        eta.push(e);
        adv.push(v);
    }
    Ok(PerturbedBatch {
        adversarial: Tensor::new(batch.shape().to_vec(), adv)?,
        perturbation: Tensor::new(batch.shape().to_vec(), eta)?,
        labels: labels.to_vec(),
    })
}

/// One adversarial training step: attack the batch against the current
/// parameters, then take a standard step on the perturbed batch. All
/// hyper-parameters are those of standard training.
pub fn adversarial_train_step<T: Scalar>(
    config: &ModelConfig,
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
    attack: &AttackConfig,
) -> Result<T> {
    let perturbed = fgsm(config, params, batch, labels, attack)?;
    train_step(config, params, adam, &perturbed.adversarial, labels)
}

/// Evaluate on batches where every image is replaced by its perturbed twin
/// generated against the evaluated model itself.
pub fn evaluate_under_attack<T: Scalar, I>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batches: I,
    attack: &AttackConfig,
    positive_class: usize,
) -> Result<MetricsReport>
where
    I: IntoIterator<Item = Result<Batch<T>>>,
{
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for batch in batches {
        let batch = batch?;
        let perturbed = fgsm(config, params, &batch.images, &batch.labels, attack)?;
        let logits = predict(config, params, &perturbed.adversarial)?;
        preds.extend(argmax_rows(&logits));
        labels.extend(batch.labels);
    }
    let cm = confusion(&labels, &preds, config.num_classes)?;
    report(&cm, positive_class)
}

/// Clean evaluation over batches.
pub fn evaluate_clean<T: Scalar, I>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batches: I,
    positive_class: usize,
) -> Result<MetricsReport>
where
    I: IntoIterator<Item = Result<Batch<T>>>,
{
    let mut labels = Vec::new();
    let mut preds = Vec::new();
    for batch in batches {
        let batch = batch?;
        let logits = predict(config, params, &batch.images)?;
        preds.extend(argmax_rows(&logits));
        labels.extend(batch.labels);
    }
    let cm = confusion(&labels, &preds, config.num_classes)?;
    report(&cm, positive_class)
}

#[cfg(test)]
mod tests;
