//! The variational autoencoder: a strided-conv encoder ending in μ and
//! log σ² affine heads, and a transposed-conv decoder ending in a sigmoid.
//!
//! Encoding is deterministic (distribution parameters only); sampling via the
//! reparameterization trick happens in the trainer. Everywhere else the mean
//! μ is used as the latent representation.

use std::path::Path;
use std::sync::Arc;

use crate::data::{IMG_H, IMG_W};
use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::models::classifier::{init_weight, LEAKY_SLOPE};
use crate::models::checkpoint;
use crate::rng::stage_rng;
use crate::tensor::Tensor;

pub const LATENT_DIM: usize = 32;
const WIDTHS: [usize; 3] = [8, 16, 32];
/// Spatial extent at the bottleneck: 64 / 2³.
const BOTTLENECK: usize = 8;
const FLAT: usize = WIDTHS[2] * BOTTLENECK * BOTTLENECK;

pub struct EncoderNodes {
    pub x: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    pub params: Vec<(&'static str, NodeId)>,
}

pub struct DecoderNodes {
    pub z: NodeId,
    pub image: NodeId,
    pub params: Vec<(&'static str, NodeId)>,
}

pub struct Vae {
    enc_w: [Arc<Tensor>; 3],
    enc_b: [Arc<Tensor>; 3],
    mu_w: Arc<Tensor>,
    mu_b: Arc<Tensor>,
    logvar_w: Arc<Tensor>,
    logvar_b: Arc<Tensor>,
    fc_w: Arc<Tensor>,
    fc_b: Arc<Tensor>,
    dec_w: [Arc<Tensor>; 3],
    dec_b: [Arc<Tensor>; 3],
}

impl Vae {
    /// Fresh weights: convolutions random, μ/log σ² heads zero-initialized so
    /// an untrained encoder maps everything to the prior mean.
    pub fn new(seed: u64) -> Self {
        let mut rng = stage_rng(seed, "vae-init");
        let mut chans = vec![1];
        chans.extend(WIDTHS);
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for i in 0..3 {
            let (ci, co) = (chans[i], chans[i + 1]);
            enc_w.push(init_weight(&mut rng, &[co, ci, 4, 4], ci * 16));
            enc_b.push(Arc::new(Tensor::zeros(&[co])));
        }
        let fc_w = init_weight(&mut rng, &[FLAT, LATENT_DIM], LATENT_DIM);
        let fc_b = Arc::new(Tensor::zeros(&[FLAT]));
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for i in 0..3 {
            let (ci, co) = (chans[3 - i], chans[2 - i]);
            dec_w.push(init_weight(&mut rng, &[ci, co, 4, 4], ci * 16));
            dec_b.push(Arc::new(Tensor::zeros(&[co])));
        }
        Vae {
            enc_w: enc_w.try_into().unwrap(),
            enc_b: enc_b.try_into().unwrap(),
            mu_w: Arc::new(Tensor::zeros(&[LATENT_DIM, FLAT])),
            mu_b: Arc::new(Tensor::zeros(&[LATENT_DIM])),
            logvar_w: Arc::new(Tensor::zeros(&[LATENT_DIM, FLAT])),
            logvar_b: Arc::new(Tensor::zeros(&[LATENT_DIM])),
            fc_w,
            fc_b,
            dec_w: dec_w.try_into().unwrap(),
            dec_b: dec_b.try_into().unwrap(),
        }
    }

    pub fn input_shape() -> [usize; 3] {
        [1, IMG_H, IMG_W]
    }

    /// Appends the encoder to `g`, consuming image node `x`.
    pub fn attach_encoder(&self, g: &mut CompGraph, x: NodeId) -> Result<EncoderNodes> {
        let mut params = Vec::new();
        let mut cur = x;
        for (i, names) in [("enc1.w", "enc1.b"), ("enc2.w", "enc2.b"), ("enc3.w", "enc3.b")]
            .iter()
            .enumerate()
        {
            let w = g.shared(self.enc_w[i].clone());
            let b = g.shared(self.enc_b[i].clone());
            params.push((names.0, w));
            params.push((names.1, b));
            cur = g.conv2d(cur, w, b, 2, 1)?;
            cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
        }
        let flat = g.reshape(cur, &[FLAT])?;
        let mu_w = g.shared(self.mu_w.clone());
        let mu_b = g.shared(self.mu_b.clone());
        let lv_w = g.shared(self.logvar_w.clone());
        let lv_b = g.shared(self.logvar_b.clone());
        params.push(("mu.w", mu_w));
        params.push(("mu.b", mu_b));
        params.push(("logvar.w", lv_w));
        params.push(("logvar.b", lv_b));
        let mu = g.affine(flat, mu_w, mu_b)?;
        let logvar = g.affine(flat, lv_w, lv_b)?;
        Ok(EncoderNodes { x, mu, logvar, params })
    }

    /// Appends the decoder to `g`, consuming latent node `z`.
    pub fn attach_decoder(&self, g: &mut CompGraph, z: NodeId) -> Result<DecoderNodes> {
        let mut params = Vec::new();
        let fc_w = g.shared(self.fc_w.clone());
        let fc_b = g.shared(self.fc_b.clone());
        params.push(("fc.w", fc_w));
        params.push(("fc.b", fc_b));
        let mut cur = g.affine(z, fc_w, fc_b)?;
        cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
        cur = g.reshape(cur, &[WIDTHS[2], BOTTLENECK, BOTTLENECK])?;
        for (i, names) in [("dec1.w", "dec1.b"), ("dec2.w", "dec2.b"), ("dec3.w", "dec3.b")]
            .iter()
            .enumerate()
        {
            let w = g.shared(self.dec_w[i].clone());
            let b = g.shared(self.dec_b[i].clone());
            params.push((names.0, w));
            params.push((names.1, b));
            cur = g.convt2d(cur, w, b, 2, 1)?;
            if i < 2 {
                cur = g.leaky_relu(cur, LEAKY_SLOPE)?;
            }
        }
        let image = g.sigmoid(cur)?;
        Ok(DecoderNodes { z, image, params })
    }

    /// Distribution parameters (μ, log σ²) for an image; deterministic.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = CompGraph::new();
        let input = g.input("x", &Self::input_shape());
        let nodes = self.attach_encoder(&mut g, input)?;
        g.forward(&[("x", x)])?;
        Ok((g.value(nodes.mu)?.clone(), g.value(nodes.logvar)?.clone()))
    }

    /// Decoded image for a latent vector; values in (0,1).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape() != [LATENT_DIM] {
            return Err(Error::invalid(format!(
                "decode expects latent of shape [{LATENT_DIM}], got {:?}",
                z.shape()
            )));
        }
        if !z.all_finite() {
            return Err(Error::invalid("decode: non-finite latent"));
        }
        let mut g = CompGraph::new();
        let input = g.input("z", &[LATENT_DIM]);
        let nodes = self.attach_decoder(&mut g, input)?;
        g.forward(&[("z", z)])?;
        Ok(g.value(nodes.image)?.clone())
    }

    /// decode(μ(x)): the deterministic reconstruction used at inference.
    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    pub fn params(&self) -> Vec<(&'static str, Arc<Tensor>)> {
        vec![
            ("enc1.w", self.enc_w[0].clone()),
            ("enc1.b", self.enc_b[0].clone()),
            ("enc2.w", self.enc_w[1].clone()),
            ("enc2.b", self.enc_b[1].clone()),
            ("enc3.w", self.enc_w[2].clone()),
            ("enc3.b", self.enc_b[2].clone()),
            ("mu.w", self.mu_w.clone()),
            ("mu.b", self.mu_b.clone()),
            ("logvar.w", self.logvar_w.clone()),
            ("logvar.b", self.logvar_b.clone()),
            ("fc.w", self.fc_w.clone()),
            ("fc.b", self.fc_b.clone()),
            ("dec1.w", self.dec_w[0].clone()),
            ("dec1.b", self.dec_b[0].clone()),
            ("dec2.w", self.dec_w[1].clone()),
            ("dec2.b", self.dec_b[1].clone()),
            ("dec3.w", self.dec_w[2].clone()),
            ("dec3.b", self.dec_b[2].clone()),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Arc<Tensor>)> {
        let [e1w, e2w, e3w] = &mut self.enc_w;
        let [e1b, e2b, e3b] = &mut self.enc_b;
        let [d1w, d2w, d3w] = &mut self.dec_w;
        let [d1b, d2b, d3b] = &mut self.dec_b;
        vec![
            ("enc1.w", e1w),
            ("enc1.b", e1b),
            ("enc2.w", e2w),
            ("enc2.b", e2b),
            ("enc3.w", e3w),
            ("enc3.b", e3b),
            ("mu.w", &mut self.mu_w),
            ("mu.b", &mut self.mu_b),
            ("logvar.w", &mut self.logvar_w),
            ("logvar.b", &mut self.logvar_b),
            ("fc.w", &mut self.fc_w),
            ("fc.b", &mut self.fc_b),
            ("dec1.w", d1w),
            ("dec1.b", d1b),
            ("dec2.w", d2w),
            ("dec2.b", d2b),
            ("dec3.w", d3w),
            ("dec3.b", d3b),
        ]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let params = self.params();
        let named: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (*n, t.as_ref())).collect();
        checkpoint::save(
            dir,
            &named,
            &[
                ("kind", "vae".into()),
                ("latent", LATENT_DIM.to_string()),
                ("widths", format!("{},{},{}", WIDTHS[0], WIDTHS[1], WIDTHS[2])),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut ck = checkpoint::load(dir)?;
        if ck.meta.get("kind").map(String::as_str) != Some("vae") {
            return Err(Error::Corrupt(format!("{} is not a vae checkpoint", dir.display())));
        }
        if ck.meta_usize("latent")? != LATENT_DIM {
            return Err(Error::Corrupt("latent dimension mismatch".into()));
        }
        let mut chans = vec![1];
        chans.extend(WIDTHS);
        let mut enc_w = Vec::new();
        let mut enc_b = Vec::new();
        for (i, names) in [("enc1.w", "enc1.b"), ("enc2.w", "enc2.b"), ("enc3.w", "enc3.b")]
            .iter()
            .enumerate()
        {
            let (ci, co) = (chans[i], chans[i + 1]);
            enc_w.push(ck.take(names.0, &[co, ci, 4, 4])?);
            enc_b.push(ck.take(names.1, &[co])?);
        }
        let mut dec_w = Vec::new();
        let mut dec_b = Vec::new();
        for (i, names) in [("dec1.w", "dec1.b"), ("dec2.w", "dec2.b"), ("dec3.w", "dec3.b")]
            .iter()
            .enumerate()
        {
            let (ci, co) = (chans[3 - i], chans[2 - i]);
            dec_w.push(ck.take(names.0, &[ci, co, 4, 4])?);
            dec_b.push(ck.take(names.1, &[co])?);
        }
        Ok(Vae {
            enc_w: enc_w.try_into().unwrap(),
            enc_b: enc_b.try_into().unwrap(),
            mu_w: ck.take("mu.w", &[LATENT_DIM, FLAT])?,
            mu_b: ck.take("mu.b", &[LATENT_DIM])?,
            logvar_w: ck.take("logvar.w", &[LATENT_DIM, FLAT])?,
            logvar_b: ck.take("logvar.b", &[LATENT_DIM])?,
            fc_w: ck.take("fc.w", &[FLAT, LATENT_DIM])?,
            fc_b: ck.take("fc.b", &[FLAT])?,
            dec_w: dec_w.try_into().unwrap(),
            dec_b: dec_b.try_into().unwrap(),
        })
    }
}

/// MSE(x, x_recon) + β · KL with KL = −½ Σ_d (1 + logσ² − μ² − σ²).
pub fn vae_loss(
    x: &Tensor,
    x_recon: &Tensor,
    mu: &Tensor,
    logvar: &Tensor,
    beta: f32,
) -> Result<f64> {
    if x.shape() != x_recon.shape() || mu.shape() != logvar.shape() {
        return Err(Error::invalid(format!(
            "vae_loss shapes disagree: x {:?} vs {:?}, mu {:?} vs {:?}",
            x.shape(),
            x_recon.shape(),
            mu.shape(),
            logvar.shape()
        )));
    }
    if beta < 0.0 {
        return Err(Error::invalid(format!("beta must be ≥ 0, got {beta}")));
    }
    let mse: f64 = x
        .data()
        .iter()
        .zip(x_recon.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum::<f64>()
        / x.numel() as f64;
    Ok(mse + beta as f64 * gaussian_kl(mu, logvar))
}

/// −½ Σ_d (1 + logσ² − μ² − σ²): KL(q‖N(0,I)) summed over latent dims.
pub fn gaussian_kl(mu: &Tensor, logvar: &Tensor) -> f64 {
    let sum: f64 = mu
        .data()
        .iter()
        .zip(logvar.data())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            1.0 + lv - m * m - lv.exp()
        })
        .sum();
    -0.5 * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(seed: u64) -> Tensor {
        let mut rng = stage_rng(seed, "vae-test-img");
        Tensor::from_fn(&[1, IMG_H, IMG_W], |_| rng.gen_range(0.0..1.0))
    }

    fn random_latent(seed: u64) -> Tensor {
        let mut rng = stage_rng(seed, "vae-test-z");
        Tensor::from_fn(&[LATENT_DIM], |_| rng.gen_range(-2.0..2.0))
    }

    #[test]
    fn untrained_heads_encode_to_the_prior_mean() {
        let vae = Vae::new(1);
        let (mu, logvar) = vae.encode(&random_image(2)).unwrap();
        assert_eq!(mu.data(), vec![0.0; LATENT_DIM].as_slice());
        assert_eq!(logvar.data(), vec![0.0; LATENT_DIM].as_slice());
    }

    #[test]
    fn encoding_is_deterministic() {
        let vae = Vae::new(3);
        let x = random_image(4);
        let (mu_a, lv_a) = vae.encode(&x).unwrap();
        let (mu_b, lv_b) = vae.encode(&x).unwrap();
        assert!(mu_a.bits_eq(&mu_b));
        assert!(lv_a.bits_eq(&lv_b));
    }

    #[test]
    fn decoded_images_live_in_the_open_unit_interval() {
        let vae = Vae::new(5);
        let img = vae.decode(&random_latent(6)).unwrap();
        assert_eq!(img.shape(), &[1, IMG_H, IMG_W]);
        assert!(img.min() > 0.0 && img.max() < 1.0);
    }

    #[test]
    fn decode_rejects_bad_latents() {
        let vae = Vae::new(7);
        assert!(vae.decode(&Tensor::ones(&[LATENT_DIM + 1])).is_err());
        let mut z = random_latent(8);
        z.data_mut()[0] = f32::INFINITY;
        assert!(vae.decode(&z).is_err());
    }

    #[test]
    fn decode_is_continuous_in_the_latent() {
        let vae = Vae::new(9);
        let z = random_latent(10);
        let eps = 1e-3f32;
        let z2 = z.map(|v| v + eps);
        let a = vae.decode(&z).unwrap();
        let b = vae.decode(&z2).unwrap();
        let max_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0, "perturbation had no effect at all");
        assert!(max_diff < 0.05, "O(1e-3) latent shift moved a pixel by {max_diff}");
    }

    #[test]
    fn loss_is_zero_for_perfect_recon_and_standard_posterior() {
        let x = random_image(11);
        let mu = Tensor::zeros(&[LATENT_DIM]);
        let lv = Tensor::zeros(&[LATENT_DIM]);
        assert_eq!(vae_loss(&x, &x, &mu, &lv, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn unit_mean_single_dim_kl_is_half() {
        let x = Tensor::scalar(0.3);
        let mu = Tensor::scalar(1.0);
        let lv = Tensor::scalar(0.0);
        let loss = vae_loss(&x, &x, &mu, &lv, 1.0).unwrap();
        assert!((loss - 0.5).abs() < 1e-9);
    }

    #[test]
    fn beta_scales_the_kl_term_linearly() {
        let x = random_image(12);
        let recon = random_image(13);
        let mu = random_latent(14);
        let lv = random_latent(15).scale(0.1);
        let l0 = vae_loss(&x, &recon, &mu, &lv, 0.0).unwrap();
        let l1 = vae_loss(&x, &recon, &mu, &lv, 1.0).unwrap();
        let l2 = vae_loss(&x, &recon, &mu, &lv, 2.0).unwrap();
        let kl1 = l1 - l0;
        let kl2 = l2 - l0;
        assert!((kl2 - 2.0 * kl1).abs() < 1e-9 * kl1.abs().max(1.0));
        // β=0 is exactly the reconstruction error.
        let mse: f64 = x
            .data()
            .iter()
            .zip(recon.data())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / x.numel() as f64;
        assert!((l0 - mse).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_the_prior() {
        for mu_v in [-2.0f32, -0.5, 0.0, 0.5, 2.0] {
            for lv_v in [-2.0f32, -0.5, 0.0, 0.5, 2.0] {
                let mu = Tensor::full(&[4], mu_v);
                let lv = Tensor::full(&[4], lv_v);
                let kl = gaussian_kl(&mu, &lv);
                if mu_v == 0.0 && lv_v == 0.0 {
                    assert_eq!(kl, 0.0);
                } else {
                    assert!(kl > 0.0, "KL not positive at mu {mu_v}, logvar {lv_v}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let vae = Vae::new(16);
        let dir = tempfile::tempdir().unwrap();
        vae.save(dir.path()).unwrap();
        let back = Vae::load(dir.path()).unwrap();
        let z = random_latent(17);
        assert!(vae.decode(&z).unwrap().bits_eq(&back.decode(&z).unwrap()));
    }
}
