//! Mini-batch training loop.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledImage};
use crate::error::{ColonyError, Result};
use crate::nn::{Mode, Network, OptimizerState, UpdateRule};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: u32,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rule: UpdateRule,
    /// Seeds the per-epoch shuffles.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 64,
            learning_rate: 0.01,
            rule: UpdateRule::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: u64,
    /// Mean minibatch loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub seconds: f64,
}

pub fn fit(net: &mut Network<f32>, images: &[LabeledImage], cfg: &TrainConfig) -> Result<TrainReport> {
    if images.is_empty() {
        return Err(ColonyError::Input("cannot train on an empty set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(ColonyError::Config("epochs and batch size must be positive".into()));
    }
    let start = Instant::now();
    let mut opt = OptimizerState::new(cfg.rule, cfg.learning_rate)?;
    let previous = net.mode;
    net.mode = Mode::Train;
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut seed::stream(cfg.seed, &format!("epoch/{epoch}")));
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&LabeledImage> = chunk.iter().map(|&i| &images[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|x| x.label as usize).collect();
            let loss = net.loss_and_grad(&data::to_batch(&refs)?, &labels)?;
            if !loss.is_finite() {
                net.mode = previous;
                return Err(ColonyError::Numeric(format!(
                    "non-finite loss in epoch {epoch} after {} steps",
                    opt.steps()
                )));
            }
            opt.step(net)?;
            total += loss as f64;
            batches += 1;
        }
        epoch_loss.push(total / batches as f64);
    }
    net.mode = previous;
    Ok(TrainReport {
        steps: opt.steps(),
        epoch_loss,
        seconds: start.elapsed().as_secs_f64(),
    })
}
