//! Mini-batch ADAM with early stopping on a validation set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MaskedNetwork, NnError, Sample};
use crate::grid::FeederModel;
use crate::measurements::MeasurementSet;
use crate::topology::MaskPlan;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Share of a dataset used for training; the rest is the test set.
    pub train_fraction: f64,
    /// Share of the training part held out for early stopping.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            train_fraction: 0.9,
            validation_fraction: 0.1,
        }
    }
}

/// Mean squared magnitude error per sample after each epoch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingCurve {
    pub train_nu: Vec<f64>,
    pub validation_nu: Vec<f64>,
    /// Epoch whose parameters were kept, counted from 1.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(net: &MaskedNetwork) -> Self {
        let zeros: Vec<Vec<f64>> = net.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    /// One bias-corrected update, then the weight masks are re-applied.
    pub fn update(&mut self, net: &mut MaskedNetwork, grads: &[Vec<f64>], config: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - config.beta1.powi(self.step);
        let c2 = 1.0 - config.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let w = &mut net.tensors[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..g.len() {
                m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g[k];
                v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                w[k] -= config.learning_rate * mh / (vh.sqrt() + config.epsilon);
            }
        }
        net.apply_masks();
    }
}

/// Builds a network for `plan`, fits normalization on `train_set` and
/// trains it. Returns the parameters with the lowest validation error.
pub fn train(
    model: &FeederModel,
    plan: &MaskPlan,
    template: &MeasurementSet,
    train_set: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
) -> Result<(MaskedNetwork, TrainingCurve), NnError> {
    if train_set.is_empty() {
        return Err(NnError::Empty("train on"));
    }
    let mut net = MaskedNetwork::new(model, plan, template, config.seed)?;
    net.fit_normalization(train_set)?;
    let curve = fit(&mut net, train_set, validation, config)?;
    Ok((net, curve))
}

/// Trains `net` in place. Without a validation set the training error
/// drives early stopping.
pub fn fit(net: &mut MaskedNetwork, train_set: &[Sample], validation: &[Sample], config: &TrainConfig) -> Result<TrainingCurve, NnError> {
    if train_set.is_empty() {
        return Err(NnError::Empty("train on"));
    }
    let batch_size = config.batch_size.max(1);
    // Offset the shuffle stream from the initialization stream.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut adam = Adam::new(net);
    let mut curve = TrainingCurve::default();
    let mut best = (f64::INFINITY, net.tensors.clone());
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (bi, chunk) in order.chunks(batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let (loss, mut grads) = net.loss_and_gradients(&batch)?;
            if !loss.is_finite() {
                return Err(NnError::Diverged { epoch, batch: bi, loss });
            }
            total += loss;
            let scale = 1.0 / batch.len() as f64;
            for g in grads.iter_mut().flatten() {
                *g *= scale;
            }
            adam.update(net, &grads, config);
        }
        let train_nu = total / train_set.len() as f64;
        curve.train_nu.push(train_nu);
        let score = if validation.is_empty() {
            train_nu
        } else {
            let v = net.evaluate(validation)?.nu;
            curve.validation_nu.push(v);
            v
        };
        if !score.is_finite() {
            return Err(NnError::Diverged {
                epoch,
                batch: usize::MAX,
                loss: score,
            });
        }
        if score < best.0 {
            best = (score, net.tensors.clone());
            curve.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                curve.stopped_early = true;
                break;
            }
        }
    }
    if curve.best_epoch > 0 {
        net.tensors = best.1;
    }
    Ok(curve)
}
