//! Adam optimization with reduce-on-plateau learning-rate decay, early
//! stopping, and best-state tracking.

use crate::error::{Error, Result};
use crate::model::{bind_params, forward, ModelConfig, ModelParams, ParamKey};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;
pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

pub const PLATEAU_FACTOR: f64 = 0.2;
pub const PLATEAU_PATIENCE: u32 = 2;
pub const PLATEAU_MIN_DELTA: f64 = 1e-4;

pub const EARLY_STOP_PATIENCE: u32 = 15;
pub const MAX_EPOCHS: u32 = 100;

/// Per-parameter first and second moment estimates plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    step: u64,
    lr: T,
    moments: Vec<(ParamKey, Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamState<T> {
    /// Fresh state with zeroed moments matching the parameter layout.
    pub fn new(params: &ModelParams<T>, lr: T) -> Self {
        let moments = params
            .entries()
            .iter()
            .map(|(key, t)| (*key, vec![T::zero(); t.numel()], vec![T::zero(); t.numel()]))
            .collect();
        AdamState { step: 0, lr, moments }
    }

    pub fn lr(&self) -> T {
        self.lr
    }

    pub fn set_lr(&mut self, lr: T) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update:
    /// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
    /// `theta <- theta - lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[(ParamKey, Vec<T>)]) -> Result<()> {
        if grads.len() != self.moments.len() {
            return Err(Error::Config(format!(
                "adam: {} gradient tensors for {} parameters",
                grads.len(),
                self.moments.len()
            )));
        }
        self.step += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPSILON);
        let corr1 = T::one() - T::from_f64(ADAM_BETA1.powi(self.step as i32));
        let corr2 = T::one() - T::from_f64(ADAM_BETA2.powi(self.step as i32));

        for ((key, m, v), (gkey, grad)) in self.moments.iter_mut().zip(grads) {
            if key != gkey {
                return Err(Error::Config("adam: gradient order does not match parameters".into()));
            }
            if !grad.iter().all(|g| g.is_finite()) {
                return Err(Error::non_finite(format!("adam gradient for layer {} {:?}", key.0, key.1)));
            }
            let theta = params
                .get_mut(*key)
                .ok_or_else(|| Error::Config(format!("adam: unknown parameter {key:?}")))?;
            for ((t, m), (v, &g)) in theta
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(grad.iter()))
            {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                let m_hat = *m / corr1;
                let v_hat = *v / corr2;
                let update = self.lr * m_hat / (v_hat.sqrt() + eps);
                if !update.is_finite() {
                    return Err(Error::non_finite("adam update"));
                }
                *t = *t - update;
            }
        }
        Ok(())
    }
}

/// One standard training step: forward pass, fused softmax cross-entropy,
/// backward pass, Adam update. Returns the batch loss.
pub fn train_step<T: Scalar>(
    config: &ModelConfig,
    params: &mut ModelParams<T>,
    adam: &mut AdamState<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, true);
    let input = graph.constant(batch.clone());
    let out = forward(&mut graph, config, &bound, input)?;
    let loss = graph.softmax_cross_entropy(out.logits, labels)?;
    let loss_value = graph.loss_value(loss)?;
    graph.backward(loss)?;
    let grads = bound.grads(&graph)?;
    adam.step(params, &grads)?;
    Ok(loss_value.value())
}

/// Batch loss without any update, for validation.
pub fn batch_loss<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParams<T>,
    batch: &Tensor<T>,
    labels: &[usize],
) -> Result<T> {
    let mut graph = Graph::new();
    let bound = bind_params(&mut graph, params, false);
    let input = graph.constant(batch.clone());
    let out = forward(&mut graph, config, &bound, input)?;
    let loss = graph.softmax_cross_entropy(out.logits, labels)?;
    Ok(graph.loss_value(loss)?.value())
}

/// Reduce-on-plateau monitor: after `PLATEAU_PATIENCE` consecutive epochs
/// whose validation-loss decrease is `PLATEAU_MIN_DELTA` or less, the
/// learning rate is multiplied by `PLATEAU_FACTOR`.
#[derive(Clone, Debug)]
pub struct PlateauState {
    best: f64,
    stale: u32,
}

impl Default for PlateauState {
    fn default() -> Self {
        Self::new()
    }
}

impl PlateauState {
    pub fn new() -> Self {
        PlateauState { best: f64::INFINITY, stale: 0 }
    }

    pub fn stale_epochs(&self) -> u32 {
        self.stale
    }

    /// Observe one epoch's validation loss and return the learning rate to
    /// use next. A decrease of exactly the delta does NOT count as an
    /// improvement; the inequality is strict.
    pub fn update(&mut self, val_loss: f64, current_lr: f64) -> f64 {
        if self.best - val_loss > PLATEAU_MIN_DELTA {
            self.best = val_loss;
            self.stale = 0;
            current_lr
        } else {
            self.stale += 1;
            if self.stale >= PLATEAU_PATIENCE {
                self.stale = 0;
                current_lr * PLATEAU_FACTOR
            } else {
                current_lr
            }
        }
    }
}

/// Whether training should continue after an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Halt,
}

/// Early-stopping monitor that also keeps the best snapshot seen so far.
/// Improvement is a strict decrease of the validation loss; ties keep the
/// earlier snapshot.
#[derive(Clone, Debug)]
pub struct EarlyStopState<C> {
    best: f64,
    stale: u32,
    patience: u32,
    max_epochs: u32,
    best_snapshot: Option<(u32, C)>,
}

impl<C> Default for EarlyStopState<C> {
    fn default() -> Self {
        Self::new()
    }
}

impl<C> EarlyStopState<C> {
    pub fn new() -> Self {
        Self::with_limits(EARLY_STOP_PATIENCE, MAX_EPOCHS)
    }

    /// Override the patience and epoch cap, for short runs.
    pub fn with_limits(patience: u32, max_epochs: u32) -> Self {
        EarlyStopState { best: f64::INFINITY, stale: 0, patience, max_epochs, best_snapshot: None }
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }

    pub fn best_epoch(&self) -> Option<u32> {
        self.best_snapshot.as_ref().map(|(e, _)| *e)
    }

    pub fn best_snapshot(&self) -> Option<&C> {
        self.best_snapshot.as_ref().map(|(_, c)| c)
    }

    pub fn into_best_snapshot(self) -> Option<(u32, C)> {
        self.best_snapshot
    }

    /// Observe one epoch. `snapshot` is this epoch's model state; it is
    /// kept only when the loss strictly improves.
    pub fn update(&mut self, epoch: u32, val_loss: f64, snapshot: C) -> Decision {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            self.best_snapshot = Some((epoch, snapshot));
        } else {
            self.stale += 1;
        }
        if self.stale >= self.patience || epoch >= self.max_epochs {
            Decision::Halt
        } else {
            Decision::Continue
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, LayerSpec, ModelConfig, Role};

    fn scalar_model() -> (ModelConfig, ModelParams<f64>) {
        let config = ModelConfig {
            input: [1, 1, 1],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { width: 1 }],
            num_classes: 1,
            seed: 0,
        };
        let mut params = build::<f64>(&config).unwrap();
        params
            .set_all(vec![((1, Role::Weight), vec![1.0]), ((1, Role::Bias), vec![0.0])])
            .unwrap();
        (config, params)
    }

    fn grads_of(params: &ModelParams<f64>, g: f64) -> Vec<(ParamKey, Vec<f64>)> {
        params.entries().iter().map(|(k, t)| (*k, vec![g; t.numel()])).collect()
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let (_, mut params) = scalar_model();
        let before = params.clone();
        let mut adam = AdamState::new(&params, 1e-4);
        let grads = grads_of(&params, 0.0);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // theta=1, g=1, lr=1e-4, t=1: m_hat=1, v_hat=1,
        // theta' = 1 - 1e-4 / (1 + 1e-8)
        let (_, mut params) = scalar_model();
        let mut adam = AdamState::new(&params, 1e-4);
        let grads = grads_of(&params, 1.0);
        adam.step(&mut params, &grads).unwrap();
        let theta = params.get((1, Role::Weight)).unwrap().data()[0];
        let expect = 1.0 - 1e-4 * 1.0 / (1.0f64.sqrt() + 1e-8);
        assert!((theta - expect).abs() < 1e-15, "{theta} vs {expect}");
        assert!((theta - 0.9999).abs() < 1e-8);
    }

    #[test]
    fn identical_tensors_get_identical_updates() {
        let config = ModelConfig {
            input: [1, 1, 2],
            layers: vec![LayerSpec::Flatten, LayerSpec::Dense { width: 2 }],
            num_classes: 2,
            seed: 9,
        };
        let mut params = build::<f64>(&config).unwrap();
        params
            .set_all(vec![
                ((1, Role::Weight), vec![0.5, 0.5, 0.5, 0.5]),
                ((1, Role::Bias), vec![0.25, 0.25]),
            ])
            .unwrap();
        let grads = grads_of(&params, 0.3);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &grads).unwrap();
        let w = params.get((1, Role::Weight)).unwrap().data().to_vec();
        assert!(w.iter().all(|&v| v == w[0]));
    }

    #[test]
    fn update_magnitude_respects_adam_bound() {
        let (_, mut params) = scalar_model();
        let mut adam = AdamState::new(&params, 1e-2);
        let mut prev = params.get((1, Role::Weight)).unwrap().data()[0];
        for i in 0..50 {
            let g = ((i * 37 % 11) as f64 - 5.0) * 0.2;
            let grads = grads_of(&params, g);
            adam.step(&mut params, &grads).unwrap();
            let now = params.get((1, Role::Weight)).unwrap().data()[0];
            let corr1 = 1.0 - ADAM_BETA1.powi(adam.step_count() as i32);
            let corr2 = 1.0 - ADAM_BETA2.powi(adam.step_count() as i32);
            // |delta| <= lr * sqrt(corr2)/corr1 * |m|/sqrt(v) is bounded by
            // lr / (1 - b1) in the worst case; use the standard loose bound.
            let bound = 1e-2 * corr2.sqrt() / corr1 / (1.0 - ADAM_BETA1) + 1e-12;
            assert!((now - prev).abs() <= bound, "step {i}: {} > {bound}", (now - prev).abs());
            prev = now;
        }
    }

    #[test]
    fn plateau_keeps_lr_on_improvement() {
        let mut p = PlateauState::new();
        let lr = p.update(1.0, 1e-4);
        assert_eq!(lr, 1e-4);
        let lr = p.update(0.5, lr);
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn plateau_decays_after_two_stale_epochs() {
        let mut p = PlateauState::new();
        let mut lr = p.update(1.0, 1e-4); // first observation improves on +inf
        lr = p.update(1.0, lr);
        assert_eq!(lr, 1e-4);
        lr = p.update(1.0, lr);
        assert!((lr - 2e-5).abs() < 1e-20, "{lr}");
        assert_eq!(p.stale_epochs(), 0);
    }

    #[test]
    fn decrease_of_exactly_min_delta_is_not_improvement() {
        let mut p = PlateauState::new();
        let mut lr = p.update(1.0, 1e-4);
        lr = p.update(1.0 - 1e-4, lr); // boundary: not improved
        assert_eq!(p.stale_epochs(), 1);
        lr = p.update(1.0 - 2e-4, lr); // still within delta of best=1.0? 2e-4 > 1e-4: improved
        assert_eq!(p.stale_epochs(), 0);
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn early_stop_runs_to_max_epochs_on_steady_improvement() {
        let mut es = EarlyStopState::new();
        let mut halt_epoch = 0;
        for epoch in 1..=MAX_EPOCHS {
            let loss = 1.0 / f64::from(epoch);
            if es.update(epoch, loss, epoch) == Decision::Halt {
                halt_epoch = epoch;
                break;
            }
        }
        assert_eq!(halt_epoch, MAX_EPOCHS);
        assert_eq!(es.best_epoch(), Some(MAX_EPOCHS));
    }

    #[test]
    fn early_stop_halts_after_fifteen_flat_epochs() {
        let mut es = EarlyStopState::new();
        assert_eq!(es.update(1, 0.5, 1), Decision::Continue);
        let mut halted_at = None;
        for epoch in 2..=40 {
            if es.update(epoch, 0.5, epoch) == Decision::Halt {
                halted_at = Some(epoch);
                break;
            }
        }
        assert_eq!(halted_at, Some(16));
        assert_eq!(es.best_epoch(), Some(1));
    }

    #[test]
    fn sawtooth_never_beating_first_epoch_halts_at_sixteen() {
        let mut es = EarlyStopState::new();
        assert_eq!(es.update(1, 0.5, 1), Decision::Continue);
        let mut halted_at = None;
        for epoch in 2..=40 {
            // oscillates above the first loss, never improving on it
            let loss = if epoch % 2 == 0 { 0.9 } else { 0.7 };
            if es.update(epoch, loss, epoch) == Decision::Halt {
                halted_at = Some(epoch);
                break;
            }
        }
        assert_eq!(halted_at, Some(16));
        assert_eq!(es.best_epoch(), Some(1));
        assert_eq!(es.best_loss(), 0.5);
    }

    #[test]
    fn equal_loss_keeps_the_earlier_snapshot() {
        let mut es = EarlyStopState::new();
        es.update(1, 0.5, "first");
        es.update(2, 0.5, "second");
        assert_eq!(es.best_snapshot(), Some(&"first"));
    }
}
