//! Mini-batch training loop: Adam on softmax cross-entropy.

use super::{Binding, Model, ModelError};
use crate::data::WindowSample;
use crate::tensor::rng;
use crate::tensor::{AdamState, Tape};
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            learning_rate: 0.001,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    /// Mean batch loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains in place. Deterministic for a given config: the only randomness is
/// the seeded epoch shuffle.
pub fn train(
    model: &mut Model,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory, ModelError> {
    if windows.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let classes = model.n_classes();
    for w in windows {
        if w.label >= classes {
            return Err(ModelError::Config(format!(
                "label {} out of range for {} classes",
                w.label, classes
            )));
        }
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(ModelError::Config("epochs and batch size must be positive".into()));
    }

    let mut adam = AdamState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };
    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng::seeded(rng::derive_seed(cfg.seed, epoch as u64));
        order.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| windows[i].features.as_slice()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| windows[i].label).collect();

            let mut tape = Tape::new();
            let binding: Binding = model.bind(&mut tape);
            let logits = model.forward_train(&mut tape, &binding, &xs)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            tape.backward(loss)?;
            model.apply_grads(&tape, &binding)?;
            let mut params = model.params_mut();
            adam.step(&mut params)?;

            loss_sum += tape.value(loss)[0];
            batches += 1;
        }
        history.epoch_loss.push(loss_sum / batches as f64);
    }
    Ok(history)
}
