//! Deterministic mini-batch training: Adam, cosine-annealed learning rate,
//! and early stopping on validation loss.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::derive_seed;

/// Hyperparameters of the training loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Initial learning rate for Adam; annealed to zero on a cosine schedule.
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation improvement before stopping. 0 stops at the
    /// first non-improving epoch.
    pub patience: usize,
    /// Fraction of the training subjects held out for validation.
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 500,
            batch_size: 32,
            patience: 20,
            validation_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for spatial datasets (larger batches; many rows per subject).
    pub fn spatial_default() -> Self {
        TrainConfig {
            batch_size: 1024,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config("validation fraction must be in (0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max epochs must be positive".into()));
        }
        Ok(())
    }
}

/// A differentiable model with a flat parameter vector. The training loop is
/// generic over this, so the additive atlas, the joint MLP baseline, and the
/// dependence networks all share one optimizer and schedule.
pub trait GradModel {
    type Sample;

    fn param_count(&self) -> usize;
    fn read_params(&self, out: &mut [f64]);
    fn write_params(&mut self, src: &[f64]);

    /// Mean loss over the batch; the mean gradient is accumulated into `grad`
    /// (same layout as the parameter vector, assumed zeroed by the caller).
    fn batch_loss_grad(&mut self, batch: &[&Self::Sample], grad: &mut [f64]) -> Result<f64>;

    /// Mean loss only (no gradient); used for validation.
    fn batch_loss(&mut self, batch: &[&Self::Sample]) -> Result<f64>;

    /// Hook run after every optimizer step (e.g. Lipschitz weight
    /// renormalization, so constraints hold throughout training).
    fn after_step(&mut self) {}
}

/// One epoch of the loss history.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Validation loss at initialization, before any update.
    pub initial_val_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grads[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

fn cosine_lr(initial: f64, epoch: usize, max_epochs: usize) -> f64 {
    let t = epoch as f64 / max_epochs as f64;
    0.5 * initial * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Trains `model` on `train`, early-stopping on `val`, and restores the
/// best-validation parameters before returning. Deterministic for a fixed
/// config: batches are reshuffled every epoch from a seed derived from
/// `(config.seed, epoch)`.
pub fn train_loop<M: GradModel>(
    model: &mut M,
    train: &[M::Sample],
    val: &[M::Sample],
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Data("validation set is empty".into()));
    }

    let n_params = model.param_count();
    let mut params = vec![0.0; n_params];
    model.read_params(&mut params);
    let mut grads = vec![0.0; n_params];
    let mut adam = Adam::new(n_params);

    let val_refs: Vec<&M::Sample> = val.iter().collect();
    let initial_val_loss = model.batch_loss(&val_refs)?;
    let mut best_val = initial_val_loss;
    let mut best_params = params.clone();
    let mut best_epoch = 0;
    let mut epochs_since_improvement = 0usize;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(config.learning_rate, epoch, config.max_epochs);
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, "batch-shuffle", epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&M::Sample> = chunk.iter().map(|&i| &train[i]).collect();
            grads.iter_mut().for_each(|g| *g = 0.0);
            let loss = model.batch_loss_grad(&batch, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::Numerical {
                    epoch,
                    batch: batch_idx,
                    message: format!("loss is {loss}"),
                });
            }
            if grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numerical {
                    epoch,
                    batch: batch_idx,
                    message: "gradient contains NaN/Inf".into(),
                });
            }
            adam.step(&mut params, &grads, lr);
            model.write_params(&params);
            model.after_step();
            model.read_params(&mut params);
            epoch_loss += loss;
            n_batches += 1;
        }

        let val_loss = model.batch_loss(&val_refs)?;
        if !val_loss.is_finite() {
            return Err(Error::Numerical {
                epoch,
                batch: 0,
                message: format!("validation loss is {val_loss}"),
            });
        }
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            train_loss: epoch_loss / n_batches as f64,
            val_loss,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_params.copy_from_slice(&params);
            best_epoch = epoch;
            epochs_since_improvement = 0;
        } else {
            if epochs_since_improvement >= config.patience {
                stopped_early = true;
                break;
            }
            epochs_since_improvement += 1;
        }
    }

    model.write_params(&best_params);
    Ok(TrainReport {
        history,
        initial_val_loss,
        best_epoch,
        best_val_loss: best_val,
        stopped_early,
    })
}

/// Borrows every element of a slice; convenience for [`GradModel`] callers.
pub fn sample_refs<T>(samples: &[T]) -> Vec<&T> {
    samples.iter().collect()
}
