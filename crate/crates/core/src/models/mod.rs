//! The desk-scale classifier and VAE, their trainers, and checkpointing.

pub mod checkpoint;
mod classifier;
mod train;
mod vae;

pub use classifier::Classifier;
pub use train::{train_classifier, train_vae};
pub use vae::{gaussian_kl, vae_loss, Vae, LATENT_DIM};

use std::path::Path;

use crate::error::{Error, Result};
use crate::io;

/// Shared training hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// KL weight; ignored by the classifier trainer.
    pub beta: f32,
    /// Weight the cross entropy by inverse class frequency.
    pub class_weighting: bool,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.beta < 0.0 {
            return Err(Error::invalid(format!(
                "train config must have positive lr/epochs/batch and beta ≥ 0: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Per-epoch losses recorded by the trainers.
#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Writes a loss curve as `epoch,train_loss,val_loss` CSV.
pub fn write_loss_curve(path: &Path, curve: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for row in curve {
        out.push_str(&format!(
            "{},{:.6},{:.6}\n",
            row.epoch, row.train_loss, row.val_loss
        ));
    }
    io::write_atomic(path, out.as_bytes())
}

/// Inverse-class-frequency weights normalized to mean 1; uniform weights when
/// weighting is disabled. Errors if any class is empty.
pub fn class_weights(counts: &[usize], enabled: bool) -> Result<Vec<f32>> {
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::invalid(format!("empty class in counts {counts:?}")));
    }
    if !enabled {
        return Ok(vec![1.0; counts.len()]);
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let mean = inv.iter().sum::<f64>() / inv.len() as f64;
    Ok(inv.iter().map(|&v| (v / mean) as f32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_classes_get_unit_weights() {
        let w = class_weights(&[50, 50], true).unwrap();
        assert_eq!(w, vec![1.0, 1.0]);
    }

    #[test]
    fn weights_average_to_one_and_favor_the_rare_class() {
        let w = class_weights(&[30, 10], true).unwrap();
        assert!((w.iter().sum::<f32>() / 2.0 - 1.0).abs() < 1e-6);
        assert!(w[1] > w[0]);
        // 1/30 and 1/10 against mean (1/30+1/10)/2 = 1/15.
        assert!((w[0] - 0.5).abs() < 1e-6);
        assert!((w[1] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn disabled_weighting_is_uniform_and_empty_class_rejected() {
        assert_eq!(class_weights(&[30, 10], false).unwrap(), vec![1.0, 1.0]);
        assert!(class_weights(&[30, 0], true).is_err());
    }
}
