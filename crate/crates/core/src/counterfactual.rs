//! Latent-space search for a normal-looking counterpart of an input image.
//!
//! The search starts from the deterministic encoding z₀ = μ(x) and runs Adam
//! on ∇_z CE(classifier(decoder(z)), normal class) until the normal-class
//! softmax reaches the confidence threshold. No similarity penalty is
//! applied: staying near z₀ is an initialization effect, not a constraint.
//! A non-finite forward value or gradient anywhere in the composed
//! decoder/classifier graph aborts the search with an error.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{CLASS_NORMAL, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::graph::CompGraph;
use crate::models::{Classifier, Vae, LATENT_DIM};
use crate::optim::AdamState;
use crate::rng::stage_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct CfConfig {
    pub lr: f32,
    pub max_iters: usize,
    /// Normal-class softmax probability at which the search stops.
    pub threshold: f32,
    pub normal_class: usize,
    /// Record a decoded snapshot every this many iterations (plus the final
    /// iterate). `None` disables trajectory capture.
    pub snapshot_every: Option<usize>,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            lr: 0.1,
            max_iters: 50,
            threshold: 0.99,
            normal_class: CLASS_NORMAL,
            snapshot_every: None,
        }
    }
}

impl CfConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("cf lr must be positive, got {}", self.lr)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("cf max_iters must be ≥ 1"));
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return Err(Error::invalid(format!(
                "cf threshold must be in (0,1], got {}",
                self.threshold
            )));
        }
        if self.normal_class >= NUM_CLASSES {
            return Err(Error::invalid(format!(
                "normal class {} out of range (classes: {NUM_CLASSES})",
                self.normal_class
            )));
        }
        if self.snapshot_every == Some(0) {
            return Err(Error::invalid("snapshot interval must be ≥ 1"));
        }
        Ok(())
    }
}

/// One recorded point along the search path.
#[derive(Debug, Clone)]
pub struct TrajectoryPoint {
    pub iteration: usize,
    pub ce_loss: f64,
    pub confidence: f32,
    pub image: Tensor,
}

#[derive(Debug, Clone)]
pub struct CounterfactualResult {
    pub z_star: Tensor,
    pub x_star: Tensor,
    /// Adam steps actually executed (equals `max_iters` when not converged).
    pub iterations_used: usize,
    /// Normal-class confidence of `x_star`.
    pub final_confidence: f32,
    /// True iff the threshold was reached within the iteration budget. When
    /// false, `z_star`/`x_star` are the best-confidence iterate seen.
    pub converged: bool,
    pub trajectory: Vec<TrajectoryPoint>,
}

pub fn find_counterfactual(
    x: &Tensor,
    clf: &Classifier,
    vae: &Vae,
    cfg: &CfConfig,
) -> Result<CounterfactualResult> {
    cfg.validate()?;
    if x.shape() != Vae::input_shape() {
        return Err(Error::invalid(format!(
            "counterfactual input must be {:?}, got {:?}",
            Vae::input_shape(),
            x.shape()
        )));
    }
    if x.min() < 0.0 || x.max() > 1.0 {
        return Err(Error::invalid("counterfactual input must lie in [0,1]"));
    }

    let (mut z, _) = vae.encode(x)?;

    // One reusable graph: z ↦ decode ↦ classify ↦ (confidence, CE); only the
    // feed changes between iterations, so shapes are checked once.
    let mut g = CompGraph::new();
    let z_node = g.input("z", &[LATENT_DIM]);
    let dec = vae.attach_decoder(&mut g, z_node)?;
    let (logits, _) = clf.attach(&mut g, dec.image)?;
    let conf_node = g.softmax_prob(logits, cfg.normal_class)?;
    let ce_node = g.cross_entropy_logits(logits, cfg.normal_class)?;

    let eval = |g: &mut CompGraph, z: &Tensor| -> Result<(f32, f64, Tensor)> {
        g.forward(&[("z", z)])?;
        Ok((
            g.value(conf_node)?.scalar_value()?,
            g.value(ce_node)?.scalar_value()? as f64,
            g.value(dec.image)?.clone(),
        ))
    };

    let mut trajectory = Vec::new();

    let (conf0, ce0, image0) = eval(&mut g, &z)?;
    maybe_snapshot(&mut trajectory, cfg, 0, ce0, conf0, &image0);
    if conf0 >= cfg.threshold {
        return Ok(CounterfactualResult {
            z_star: z,
            x_star: image0,
            iterations_used: 0,
            final_confidence: conf0,
            converged: true,
            trajectory,
        });
    }

    let mut best = (conf0, ce0, z.clone(), image0, 0usize);
    let mut adam = AdamState::new(&[LATENT_DIM], cfg.lr);
    for t in 1..=cfg.max_iters {
        let grad = g.backward(ce_node, &[z_node])?;
        adam.step(&mut z, &grad.grads[0])?;
        let (conf, ce, image) = eval(&mut g, &z)?;
        maybe_snapshot(&mut trajectory, cfg, t, ce, conf, &image);
        if conf >= cfg.threshold {
            finalize_trajectory(&mut trajectory, t, ce, conf, &image, cfg);
            return Ok(CounterfactualResult {
                z_star: z,
                x_star: image,
                iterations_used: t,
                final_confidence: conf,
                converged: true,
                trajectory,
            });
        }
        if conf > best.0 {
            best = (conf, ce, z.clone(), image, t);
        }
    }

    let (conf, ce, z_star, x_star, at) = best;
    finalize_trajectory(&mut trajectory, at, ce, conf, &x_star, cfg);
    Ok(CounterfactualResult {
        z_star,
        x_star,
        iterations_used: cfg.max_iters,
        final_confidence: conf,
        converged: false,
        trajectory,
    })
}

fn maybe_snapshot(
    trajectory: &mut Vec<TrajectoryPoint>,
    cfg: &CfConfig,
    iteration: usize,
    ce_loss: f64,
    confidence: f32,
    image: &Tensor,
) {
    if let Some(every) = cfg.snapshot_every {
        if iteration % every == 0 {
            trajectory.push(TrajectoryPoint {
                iteration,
                ce_loss,
                confidence,
                image: image.clone(),
            });
        }
    }
}

/// Ensures the returned iterate is the last trajectory entry.
fn finalize_trajectory(
    trajectory: &mut Vec<TrajectoryPoint>,
    iteration: usize,
    ce_loss: f64,
    confidence: f32,
    image: &Tensor,
    cfg: &CfConfig,
) {
    if cfg.snapshot_every.is_none() {
        return;
    }
    if trajectory.last().map(|p| p.iteration) != Some(iteration) {
        trajectory.push(TrajectoryPoint { iteration, ce_loss, confidence, image: image.clone() });
    }
}

/// σ default for counterfactual baseline sampling: 0.1 · RMS(z*). Zero for an
/// all-zero latent (the point-mass case).
pub fn default_cf_sigma(z_star: &Tensor) -> f32 {
    let ms: f64 = z_star.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>()
        / z_star.numel() as f64;
    (0.1 * ms.sqrt()) as f32
}

/// Latent draws z* + σ·g with g ~ N(0, I), deterministic under `seed`.
pub fn sample_cf_latents(z_star: &Tensor, sigma: f32, n: usize, seed: u64) -> Result<Vec<Tensor>> {
    if n == 0 {
        return Err(Error::invalid("baseline set size must be ≥ 1"));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::invalid(format!("sigma must be ≥ 0, got {sigma}")));
    }
    let mut rng = stage_rng(seed, "cf-baseline-latents");
    Ok((0..n)
        .map(|_| {
            let data: Vec<f32> = z_star
                .data()
                .iter()
                .map(|&m| m + sigma * rng.sample::<f32, _>(StandardNormal))
                .collect();
            Tensor::from_vec(z_star.shape().to_vec(), data).expect("latent shape is valid")
        })
        .collect())
}

/// Decoded baseline set for expected gradients over counterfactuals: n images
/// decode(z* + σ·gᵢ). σ=0 yields n copies of x̂*.
pub fn sample_cf_baseline_set(
    result: &CounterfactualResult,
    vae: &Vae,
    sigma: f32,
    n: usize,
    seed: u64,
) -> Result<Vec<Tensor>> {
    sample_cf_latents(&result.z_star, sigma, n, seed)?
        .iter()
        .map(|z| vae.decode(z))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::IMG_H;
    use crate::data::IMG_W;

    fn fixture() -> (Classifier, Vae, Tensor) {
        let clf = Classifier::new(21);
        let vae = Vae::new(22);
        let mut rng = stage_rng(23, "cf-test-image");
        let x = Tensor::from_fn(&[1, IMG_H, IMG_W], |_| rng.gen_range(0.0..1.0));
        (clf, vae, x)
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let ok = CfConfig::default();
        ok.validate().unwrap();
        assert!(CfConfig { lr: 0.0, ..ok.clone() }.validate().is_err());
        assert!(CfConfig { max_iters: 0, ..ok.clone() }.validate().is_err());
        assert!(CfConfig { threshold: 0.0, ..ok.clone() }.validate().is_err());
        assert!(CfConfig { threshold: 1.5, ..ok.clone() }.validate().is_err());
        assert!(CfConfig { normal_class: 7, ..ok.clone() }.validate().is_err());
        assert!(CfConfig { snapshot_every: Some(0), ..ok }.validate().is_err());
    }

    #[test]
    fn already_confident_input_returns_after_zero_iterations() {
        let (clf, vae, x) = fixture();
        // An untrained classifier sits near 0.5 on either class, so a low
        // threshold makes the loop precondition fire immediately.
        let cfg = CfConfig { threshold: 0.05, ..CfConfig::default() };
        let res = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations_used, 0);
        assert!(res.x_star.bits_eq(&vae.reconstruct(&x).unwrap()));
    }

    #[test]
    fn converged_flag_implies_an_independent_rescore_meets_the_threshold() {
        let (clf, vae, x) = fixture();
        let cfg = CfConfig { threshold: 0.55, max_iters: 30, ..CfConfig::default() };
        let res = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        if res.converged {
            let rescored = clf.confidence(&res.x_star, cfg.normal_class).unwrap();
            assert!(rescored >= cfg.threshold, "rescored {rescored} < {}", cfg.threshold);
            assert_eq!(rescored.to_bits(), res.final_confidence.to_bits());
        } else {
            assert_eq!(res.iterations_used, cfg.max_iters);
        }
    }

    #[test]
    fn endpoint_confidence_never_falls_below_the_start() {
        let (clf, vae, x) = fixture();
        // Unreachable threshold forces the full budget and best-iterate fallback.
        let cfg = CfConfig { threshold: 1.0, max_iters: 8, ..CfConfig::default() };
        let res = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        assert!(!res.converged);
        assert_eq!(res.iterations_used, 8);
        let start_conf = clf
            .confidence(&vae.reconstruct(&x).unwrap(), cfg.normal_class)
            .unwrap();
        assert!(res.final_confidence >= start_conf);
    }

    #[test]
    fn search_is_deterministic() {
        let (clf, vae, x) = fixture();
        let cfg = CfConfig { threshold: 1.0, max_iters: 5, ..CfConfig::default() };
        let a = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        let b = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        assert!(a.z_star.bits_eq(&b.z_star));
        assert!(a.x_star.bits_eq(&b.x_star));
        assert_eq!(a.final_confidence.to_bits(), b.final_confidence.to_bits());
    }

    #[test]
    fn trajectory_records_the_requested_cadence_and_final_iterate() {
        let (clf, vae, x) = fixture();
        let cfg = CfConfig {
            threshold: 1.0,
            max_iters: 5,
            snapshot_every: Some(2),
            ..CfConfig::default()
        };
        let res = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        let iters: Vec<usize> = res.trajectory.iter().map(|p| p.iteration).collect();
        assert!(iters.starts_with(&[0, 2, 4]), "got snapshots at {iters:?}");
        let last = res.trajectory.last().unwrap();
        assert_eq!(last.confidence.to_bits(), res.final_confidence.to_bits());
        assert!(last.image.bits_eq(&res.x_star));
        // CSV-relevant fields are populated and consistent.
        for p in &res.trajectory {
            assert!(p.ce_loss.is_finite() && p.confidence > 0.0);
        }
    }

    #[test]
    fn out_of_range_inputs_are_rejected() {
        let (clf, vae, _) = fixture();
        let x = Tensor::full(&[1, IMG_H, IMG_W], 1.5);
        assert!(find_counterfactual(&x, &clf, &vae, &CfConfig::default()).is_err());
        let wrong = Tensor::zeros(&[1, 8, 8]);
        assert!(find_counterfactual(&wrong, &clf, &vae, &CfConfig::default()).is_err());
    }

    #[test]
    fn zero_sigma_baseline_set_is_n_copies_of_the_counterfactual() {
        let (clf, vae, x) = fixture();
        let cfg = CfConfig { threshold: 0.05, ..CfConfig::default() };
        let res = find_counterfactual(&x, &clf, &vae, &cfg).unwrap();
        let set = sample_cf_baseline_set(&res, &vae, 0.0, 4, 99).unwrap();
        assert_eq!(set.len(), 4);
        for img in &set {
            assert!(img.bits_eq(&res.x_star));
        }
    }

    #[test]
    fn latent_sample_mean_concentrates_on_z_star() {
        let z_star = Tensor::from_fn(&[LATENT_DIM], |i| (i as f32 * 0.37).sin());
        let sigma = 0.5f32;
        let n = 400;
        let draws = sample_cf_latents(&z_star, sigma, n, 7).unwrap();
        let bound = 3.0 * sigma as f64 / (n as f64).sqrt();
        for d in 0..LATENT_DIM {
            let mean: f64 =
                draws.iter().map(|z| z.data()[d] as f64).sum::<f64>() / n as f64;
            let err = (mean - z_star.data()[d] as f64).abs();
            assert!(err < bound, "coordinate {d}: |{err}| ≥ {bound}");
        }
    }

    #[test]
    fn default_sigma_is_a_tenth_of_the_latent_rms() {
        let z = Tensor::full(&[LATENT_DIM], 2.0);
        assert!((default_cf_sigma(&z) - 0.2).abs() < 1e-7);
        assert_eq!(default_cf_sigma(&Tensor::zeros(&[LATENT_DIM])), 0.0);
    }

    #[test]
    fn baseline_sampling_rejects_bad_arguments() {
        let z = Tensor::zeros(&[LATENT_DIM]);
        assert!(sample_cf_latents(&z, 0.1, 0, 1).is_err());
        assert!(sample_cf_latents(&z, -0.1, 4, 1).is_err());
        assert!(sample_cf_latents(&z, f32::NAN, 4, 1).is_err());
    }
}
