//! Local client training: plain mini-batch SGD on the activated rules.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::fnn::{dataset_loss, LabeledDataset, RuleBank};
use crate::grad::batch_backward;
use crate::seed::{rng_for, stream};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Seed of this client's training run; epoch shuffles derive from it.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A seeded permutation of `0..len` cut into chunks of `batch_size`; the last
/// chunk may be short.
pub fn batch_iterator(len: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng_for(epoch_seed, &[]));
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains a private copy of `snapshot` on `dataset` for `cfg.epochs` epochs.
///
/// Returns the updated bank and the mean training loss after the last step.
/// Rules that are inactive in `active` come back untouched.
pub fn local_train(
    dataset: &LabeledDataset,
    snapshot: &RuleBank,
    active: &[bool],
    cfg: &TrainConfig,
) -> Result<(RuleBank, f64)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut bank = snapshot.clone();
    for epoch in 0..cfg.epochs {
        let epoch_seed = crate::seed::derive_seed(cfg.seed, &[stream::EPOCH, epoch as u64]);
        for (b, batch) in batch_iterator(dataset.len(), cfg.batch_size, epoch_seed)
            .into_iter()
            .enumerate()
        {
            let samples = batch.iter().map(|&i| (dataset.sample(i), dataset.label(i)));
            let (loss, grads) = batch_backward(samples, &bank, active)?;
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b });
            }
            for ((rule, grad), _) in bank
                .rules_mut()
                .iter_mut()
                .zip(&grads.rules)
                .zip(active)
                .filter(|(_, &a)| a)
            {
                for (w, g) in rule.params_mut().zip(grad.values()) {
                    *w -= cfg.learning_rate * g;
                }
                rule.clamp_spreads();
            }
        }
    }
    let loss = dataset_loss(dataset, &bank, active)?;
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch: cfg.epochs,
            batch: 0,
        });
    }
    Ok((bank, loss))
}
