//! Mini-batch Adam trainers for the classifier and the VAE.
//!
//! Both trainers are fully deterministic in the config seed: epoch shuffles
//! and reparameterization noise come from stage-tagged generators, so the same
//! seed reproduces the final weights bit for bit. Per-epoch train/validation
//! losses are returned for curve files; the validation column is NaN when the
//! dataset has no validation split.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::models::vae::LATENT_DIM;
use crate::models::{class_weights, Classifier, EpochStats, TrainConfig, Vae};
use crate::optim::AdamState;
use crate::rng::stage_rng;
use crate::tensor::Tensor;

/// Weighted cross-entropy training: batch gradient is Σᵢ wᵢ ∇CEᵢ / Σᵢ wᵢ with
/// wᵢ the inverse-frequency weight of sample i's class (all 1 when the toggle
/// is off).
pub fn train_classifier(
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Classifier, Vec<EpochStats>)> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("train_classifier: empty training split"));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for &i in &train_idx {
        counts[data.samples[i].label] += 1;
    }
    let weights = class_weights(&counts, cfg.class_weighting)?;
    let val_idx = data.indices(Split::Val);

    let mut model = Classifier::new(cfg.seed);
    let mut trainer = ParamTrainer::new(
        model.params().iter().map(|(n, t)| (*n, t.shape().to_vec())),
        cfg.lr,
    );

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stage_rng(cfg.seed, &format!("clf-shuffle-{epoch}")));
        let mut loss_num = 0.0f64;
        let mut loss_den = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            trainer.zero();
            let mut batch_w = 0.0f64;
            for &i in batch {
                let sample = &data.samples[i];
                let w = weights[sample.label];
                let mut g = CompGraph::new();
                let x = g.input("x", &Classifier::input_shape());
                let (logits, pnodes) = model.attach(&mut g, x)?;
                let ce = g.cross_entropy_logits(logits, sample.label)?;
                g.forward(&[("x", &sample.image)])?;
                let loss = g.value(ce)?.scalar_value()? as f64;
                trainer.accumulate(&g, ce, &pnodes, w)?;
                batch_w += w as f64;
                loss_num += w as f64 * loss;
                loss_den += w as f64;
            }
            trainer.step(&mut model.params_mut(), batch_w)?;
        }
        let val_loss = classifier_split_loss(&model, data, &val_idx, &weights)?;
        curve.push(EpochStats { epoch, train_loss: loss_num / loss_den, val_loss });
    }
    Ok((model, curve))
}

/// Weighted mean cross-entropy of `model` over the given samples; NaN when
/// the index list is empty.
fn classifier_split_loss(
    model: &Classifier,
    data: &Dataset,
    idx: &[usize],
    weights: &[f32],
) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    for &i in idx {
        let sample = &data.samples[i];
        let mut g = CompGraph::new();
        let x = g.input("x", &Classifier::input_shape());
        let (logits, _) = model.attach(&mut g, x)?;
        let ce = g.cross_entropy_logits(logits, sample.label)?;
        g.forward(&[("x", &sample.image)])?;
        let w = weights[sample.label] as f64;
        num += w * g.value(ce)?.scalar_value()? as f64;
        den += w;
    }
    Ok(num / den)
}

/// β-weighted ELBO training with one reparameterization draw per sample:
/// loss = MSE(x, decode(μ + σ·ε)) + β·KL. With β = 0 the KL node is never
/// built, so the objective is a plain autoencoder.
pub fn train_vae(data: &Dataset, cfg: &TrainConfig) -> Result<(Vae, Vec<EpochStats>)> {
    cfg.validate()?;
    let train_idx = data.indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::invalid("train_vae: empty training split"));
    }
    let val_idx = data.indices(Split::Val);

    let mut model = Vae::new(cfg.seed);
    let mut trainer = ParamTrainer::new(
        model.params().iter().map(|(n, t)| (*n, t.shape().to_vec())),
        cfg.lr,
    );

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut stage_rng(cfg.seed, &format!("vae-shuffle-{epoch}")));
        let mut eps_rng = stage_rng(cfg.seed, &format!("vae-eps-{epoch}"));
        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            trainer.zero();
            for &i in batch {
                let sample = &data.samples[i];
                let eps =
                    Tensor::from_fn(&[LATENT_DIM], |_| eps_rng.sample::<f32, _>(StandardNormal));
                let mut g = CompGraph::new();
                let x = g.input("x", &Vae::input_shape());
                let enc = model.attach_encoder(&mut g, x)?;
                let std = {
                    let half = g.scale(enc.logvar, 0.5)?;
                    g.exp(half)?
                };
                let eps_node = g.constant(eps);
                let noise = g.mul(std, eps_node)?;
                let z = g.add(enc.mu, noise)?;
                let dec = model.attach_decoder(&mut g, z)?;
                let mse = g.mse_loss(dec.image, x)?;
                let loss = if cfg.beta == 0.0 {
                    mse
                } else {
                    let kl = g.gaussian_kl(enc.mu, enc.logvar)?;
                    let weighted = g.scale(kl, cfg.beta)?;
                    g.add(mse, weighted)?
                };
                g.forward(&[("x", &sample.image)])?;
                loss_sum += g.value(loss)?.scalar_value()? as f64;
                seen += 1;
                let pnodes: Vec<(&'static str, NodeId)> =
                    enc.params.iter().chain(&dec.params).copied().collect();
                trainer.accumulate(&g, loss, &pnodes, 1.0)?;
            }
            trainer.step(&mut model.params_mut(), batch.len() as f64)?;
        }
        let val_loss = vae_split_loss(&model, data, &val_idx, cfg.beta)?;
        curve.push(EpochStats { epoch, train_loss: loss_sum / seen as f64, val_loss });
    }
    Ok((model, curve))
}

/// Mean deterministic loss (reconstruction from μ, no sampling) over the
/// given samples; NaN when the index list is empty.
fn vae_split_loss(model: &Vae, data: &Dataset, idx: &[usize], beta: f32) -> Result<f64> {
    if idx.is_empty() {
        return Ok(f64::NAN);
    }
    let mut sum = 0.0f64;
    for &i in idx {
        let sample = &data.samples[i];
        let (mu, logvar) = model.encode(&sample.image)?;
        let recon = model.decode(&mu)?;
        sum += super::vae::vae_loss(&sample.image, &recon, &mu, &logvar, beta)?;
    }
    Ok(sum / idx.len() as f64)
}

/// Per-parameter Adam states plus a gradient accumulator keyed by parameter
/// name, so graph-side node order never has to match the model's parameter
/// order.
struct ParamTrainer {
    names: Vec<&'static str>,
    acc: Vec<Tensor>,
    adams: Vec<AdamState>,
}

impl ParamTrainer {
    fn new(params: impl Iterator<Item = (&'static str, Vec<usize>)>, lr: f32) -> Self {
        let mut names = Vec::new();
        let mut acc = Vec::new();
        let mut adams = Vec::new();
        for (name, shape) in params {
            names.push(name);
            acc.push(Tensor::zeros(&shape));
            adams.push(AdamState::new(&shape, lr));
        }
        ParamTrainer { names, acc, adams }
    }

    fn zero(&mut self) {
        for t in &mut self.acc {
            t.data_mut().fill(0.0);
        }
    }

    /// Adds `weight` times the gradient of `out` w.r.t. each named node.
    fn accumulate(
        &mut self,
        g: &CompGraph,
        out: NodeId,
        pnodes: &[(&'static str, NodeId)],
        weight: f32,
    ) -> Result<()> {
        let wrt: Vec<NodeId> = pnodes.iter().map(|(_, id)| *id).collect();
        let grads = g.backward(out, &wrt)?;
        for ((name, _), grad) in pnodes.iter().zip(&grads.grads) {
            let slot = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter {name}")))?;
            for (a, &v) in self.acc[slot].data_mut().iter_mut().zip(grad.data()) {
                *a += weight * v;
            }
        }
        Ok(())
    }

    /// Applies one Adam step per parameter using the accumulated gradients
    /// divided by `total_weight`.
    fn step(
        &mut self,
        params: &mut [(&'static str, &mut Arc<Tensor>)],
        total_weight: f64,
    ) -> Result<()> {
        if total_weight <= 0.0 {
            return Err(Error::invalid("step called with non-positive total weight"));
        }
        let inv = (1.0 / total_weight) as f32;
        for (name, param) in params.iter_mut() {
            let slot = self
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Graph(format!("no accumulator for parameter {name}")))?;
            let grad = self.acc[slot].scale(inv);
            self.adams[slot].step(Arc::make_mut(param), &grad)?;
        }
        Ok(())
    }
}
