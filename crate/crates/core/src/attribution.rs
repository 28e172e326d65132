//! Path attributions: integrated gradients, expected gradients, and the
//! baseline constructions they are evaluated over.
//!
//! Everything funnels through [`path_attribution`], which averages
//! (x − x̂) ⊙ ∇score over (baseline, α) draws with f64 accumulation.
//! Integrated gradients is the single-baseline midpoint-grid special case, so
//! "EG with one baseline and a midpoint α-grid equals IG" holds bit for bit
//! by construction.

use rand::Rng;

use crate::blur::gaussian_blur;
use crate::counterfactual::{default_cf_sigma, sample_cf_baseline_set, CounterfactualResult};
use crate::error::{Error, Result};
use crate::models::{Classifier, Vae};
use crate::rng::{sample_rng, stage_rng};
use crate::tensor::Tensor;

/// A scalar score with an input gradient, for a fixed class. The classifier's
/// softmax probability is the production implementation; tests substitute
/// closed-form scorers.
pub trait ScoreModel {
    fn value_and_grad(&self, x: &Tensor, class: usize) -> Result<(f32, Tensor)>;
}

impl ScoreModel for Classifier {
    fn value_and_grad(&self, x: &Tensor, class: usize) -> Result<(f32, Tensor)> {
        self.prob_and_input_grad(x, class)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct IgConfig {
    /// Midpoint-rule quadrature steps along the path.
    pub steps: usize,
}

impl Default for IgConfig {
    fn default() -> Self {
        IgConfig { steps: 64 }
    }
}

/// α-grid (k+½)/steps, k = 0..steps.
pub fn midpoint_alphas(steps: usize) -> Vec<f32> {
    (0..steps).map(|k| ((k as f64 + 0.5) / steps as f64) as f32).collect()
}

/// One uniform draw per stratum [k/n, (k+1)/n): stratified U(0,1).
pub fn stratified_alphas(draws: usize, rng: &mut impl Rng) -> Vec<f32> {
    (0..draws)
        .map(|k| ((k as f64 + rng.gen_range(0.0..1.0f64)) / draws as f64) as f32)
        .collect()
}

/// Mean of (x − x̂) ⊙ ∇score(x̂ + α(x − x̂)) over every (baseline, α) pair;
/// `alphas[i]` lists the α draws for `baselines[i]`. Accumulation is f64 per
/// pixel, so draw order is the only thing that matters for reproducibility.
pub fn path_attribution(
    x: &Tensor,
    baselines: &[Tensor],
    alphas: &[Vec<f32>],
    model: &impl ScoreModel,
    class: usize,
) -> Result<Tensor> {
    if baselines.is_empty() || baselines.len() != alphas.len() {
        return Err(Error::invalid(format!(
            "need one α list per baseline: {} baselines, {} lists",
            baselines.len(),
            alphas.len()
        )));
    }
    let mut acc = vec![0.0f64; x.numel()];
    let mut draws = 0usize;
    for (baseline, alpha_list) in baselines.iter().zip(alphas) {
        if baseline.shape() != x.shape() {
            return Err(Error::invalid(format!(
                "baseline shape {:?} does not match input {:?}",
                baseline.shape(),
                x.shape()
            )));
        }
        if alpha_list.is_empty() {
            return Err(Error::invalid("empty α list for a baseline"));
        }
        for &alpha in alpha_list {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::invalid(format!("α must be in [0,1], got {alpha}")));
            }
            let interp: Vec<f32> = baseline
                .data()
                .iter()
                .zip(x.data())
                .map(|(&b, &xv)| b + alpha * (xv - b))
                .collect();
            let point = Tensor::from_vec(x.shape().to_vec(), interp)?;
            let (_, grad) = model.value_and_grad(&point, class)?;
            if grad.shape() != x.shape() {
                return Err(Error::invalid(format!(
                    "gradient shape {:?} does not match input {:?}",
                    grad.shape(),
                    x.shape()
                )));
            }
            for ((a, (&xv, &b)), &gv) in acc
                .iter_mut()
                .zip(x.data().iter().zip(baseline.data()))
                .zip(grad.data())
            {
                *a += (xv - b) as f64 * gv as f64;
            }
            draws += 1;
        }
    }
    let inv = 1.0 / draws as f64;
    let data: Vec<f32> = acc.iter().map(|&v| (v * inv) as f32).collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// IG_i(x) = (x_i − x̂_i) · ∫₀¹ ∂score/∂x_i dα, midpoint rule.
pub fn integrated_gradients(
    x: &Tensor,
    baseline: &Tensor,
    model: &impl ScoreModel,
    class: usize,
    cfg: &IgConfig,
) -> Result<Tensor> {
    if cfg.steps == 0 {
        return Err(Error::invalid("quadrature steps must be ≥ 1"));
    }
    path_attribution(
        x,
        std::slice::from_ref(baseline),
        std::slice::from_ref(&midpoint_alphas(cfg.steps)),
        model,
        class,
    )
}

/// How α draws are produced for each baseline in an expectation.
#[derive(Debug, Clone, Copy)]
pub enum AlphaMode {
    /// Stratified U(0,1), one independent stream per baseline index.
    Stratified { seed: u64 },
    /// The deterministic midpoint grid (makes EG degenerate to IG).
    Midpoint,
}

/// Monte-Carlo expectation of path attributions over a baseline set.
pub fn expected_gradients(
    x: &Tensor,
    baselines: &[Tensor],
    model: &impl ScoreModel,
    class: usize,
    draws_per_baseline: usize,
    mode: AlphaMode,
) -> Result<Tensor> {
    if draws_per_baseline == 0 {
        return Err(Error::invalid("α draws per baseline must be ≥ 1"));
    }
    let alphas: Vec<Vec<f32>> = (0..baselines.len())
        .map(|i| match mode {
            AlphaMode::Stratified { seed } => {
                let mut rng = sample_rng(seed, "eg-alpha", i as u64);
                stratified_alphas(draws_per_baseline, &mut rng)
            }
            AlphaMode::Midpoint => midpoint_alphas(draws_per_baseline),
        })
        .collect();
    path_attribution(x, baselines, &alphas, model, class)
}

/// abs → cap at the 99.9th percentile → min-max to [0,1]; an all-constant
/// map (no information) normalizes to all zeros.
pub fn normalize_attribution(raw: &Tensor) -> Tensor {
    let abs: Vec<f64> = raw.data().iter().map(|&v| (v as f64).abs()).collect();
    let cap = percentile(&abs, 99.9);
    let capped: Vec<f64> = abs.iter().map(|&v| v.min(cap)).collect();
    let lo = capped.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = capped.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let data: Vec<f32> = if range <= 0.0 {
        vec![0.0; capped.len()]
    } else {
        capped.iter().map(|&v| ((v - lo) / range) as f32).collect()
    };
    Tensor::from_vec(raw.shape().to_vec(), data).expect("shape preserved")
}

/// Linear-interpolation percentile over order statistics, q in [0,100].
fn percentile(values: &[f64], q: f64) -> f64 {
    debug_assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("attribution values are finite"));
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= sorted.len() {
        sorted[sorted.len() - 1]
    } else {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    }
}

/// A computed attribution with its evaluation-ready normalized form.
#[derive(Debug, Clone)]
pub struct AttributionMap {
    /// Signed per-pixel attribution, image-shaped `[H,W]`.
    pub raw: Tensor,
    /// abs/capped/min-maxed form in [0,1], same shape.
    pub normalized: Tensor,
    pub class: usize,
    /// Which baseline produced it (stable lowercase tag).
    pub baseline: String,
}

impl AttributionMap {
    /// Wraps a raw attribution over a `[1,H,W]` or `[H,W]` input, squeezing
    /// the channel dimension so metrics can align maps with `[H,W]` masks.
    pub fn new(raw: Tensor, class: usize, baseline: &str) -> Result<Self> {
        let squeezed = match raw.shape() {
            [1, h, w] => {
                let (h, w) = (*h, *w);
                raw.reshaped(&[h, w])?
            }
            [_, _] => raw,
            other => {
                return Err(Error::invalid(format!(
                    "attribution shape {other:?} is not an image"
                )))
            }
        };
        let normalized = normalize_attribution(&squeezed);
        Ok(AttributionMap {
            raw: squeezed,
            normalized,
            class,
            baseline: baseline.to_string(),
        })
    }
}

/// The evaluated baseline family. Seeds are per-sample: the caller derives
/// them from the run seed and sample id.
#[derive(Debug, Clone)]
pub enum BaselineSpec {
    Zeros,
    Ones,
    Blurred { sigma: f64 },
    Uniform { seed: u64 },
    /// Draws from the training images.
    Eg { n: usize, seed: u64 },
    /// The single counterfactual for this input.
    Cf,
    /// Decoded perturbations around the counterfactual latent; `sigma: None`
    /// uses 0.1 · RMS(z*).
    EgCf { n: usize, sigma: Option<f32>, seed: u64 },
}

impl BaselineSpec {
    /// Stable lowercase tag used in reports and file names.
    pub fn label(&self) -> &'static str {
        match self {
            BaselineSpec::Zeros => "zeros",
            BaselineSpec::Ones => "ones",
            BaselineSpec::Blurred { .. } => "blurred",
            BaselineSpec::Uniform { .. } => "uniform",
            BaselineSpec::Eg { .. } => "eg",
            BaselineSpec::Cf => "cf",
            BaselineSpec::EgCf { .. } => "egcf",
        }
    }

    /// Whether this variant is attributed as an expectation over a set
    /// (stratified α) rather than a single path (midpoint grid).
    pub fn is_set_valued(&self) -> bool {
        matches!(self, BaselineSpec::Eg { .. } | BaselineSpec::EgCf { .. })
    }
}

/// What baseline construction may need beyond the input itself.
pub struct BaselineContext<'a> {
    /// Training-split images (for expected-gradients draws).
    pub train_images: &'a [&'a Tensor],
    pub vae: Option<&'a Vae>,
    /// Precomputed counterfactual for the current input.
    pub cf: Option<&'a CounterfactualResult>,
}

impl<'a> BaselineContext<'a> {
    pub fn empty() -> Self {
        BaselineContext { train_images: &[], vae: None, cf: None }
    }
}

/// A constructed baseline set plus any non-fatal construction note.
pub struct BaselineSet {
    pub images: Vec<Tensor>,
    pub warning: Option<String>,
}

impl BaselineSet {
    fn plain(images: Vec<Tensor>) -> Self {
        BaselineSet { images, warning: None }
    }
}

pub fn build_baseline(
    spec: &BaselineSpec,
    x: &Tensor,
    ctx: &BaselineContext,
) -> Result<BaselineSet> {
    match spec {
        BaselineSpec::Zeros => Ok(BaselineSet::plain(vec![Tensor::zeros(x.shape())])),
        BaselineSpec::Ones => Ok(BaselineSet::plain(vec![Tensor::ones(x.shape())])),
        BaselineSpec::Blurred { sigma } => {
            Ok(BaselineSet::plain(vec![gaussian_blur(x, *sigma)?]))
        }
        BaselineSpec::Uniform { seed } => {
            let mut rng = stage_rng(*seed, "uniform-baseline");
            Ok(BaselineSet::plain(vec![Tensor::from_fn(x.shape(), |_| {
                rng.gen_range(0.0..1.0)
            })]))
        }
        BaselineSpec::Eg { n, seed } => {
            if *n == 0 {
                return Err(Error::invalid("eg baseline needs n ≥ 1"));
            }
            let pool = ctx.train_images;
            if pool.is_empty() {
                return Err(Error::MissingContext(
                    "eg baseline needs training images".into(),
                ));
            }
            let mut rng = stage_rng(*seed, "eg-baseline-draw");
            let (indices, warning) = if *n <= pool.len() {
                (rand::seq::index::sample(&mut rng, pool.len(), *n).into_vec(), None)
            } else {
                let idx = (0..*n).map(|_| rng.gen_range(0..pool.len())).collect();
                let warning = format!(
                    "eg baseline: only {} training images for {} draws; sampling with replacement",
                    pool.len(),
                    n
                );
                (idx, Some(warning))
            };
            let images = indices
                .into_iter()
                .map(|i| {
                    let img = pool[i];
                    if img.shape() != x.shape() {
                        return Err(Error::invalid(format!(
                            "training image shape {:?} does not match input {:?}",
                            img.shape(),
                            x.shape()
                        )));
                    }
                    Ok(img.clone())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BaselineSet { images, warning })
        }
        BaselineSpec::Cf => {
            let cf = ctx
                .cf
                .ok_or_else(|| Error::MissingContext("cf baseline needs a counterfactual".into()))?;
            Ok(BaselineSet::plain(vec![cf.x_star.clone()]))
        }
        BaselineSpec::EgCf { n, sigma, seed } => {
            let cf = ctx
                .cf
                .ok_or_else(|| Error::MissingContext("egcf baseline needs a counterfactual".into()))?;
            let vae = ctx
                .vae
                .ok_or_else(|| Error::MissingContext("egcf baseline needs the vae".into()))?;
            let sigma = sigma.unwrap_or_else(|| default_cf_sigma(&cf.z_star));
            Ok(BaselineSet::plain(sample_cf_baseline_set(cf, vae, sigma, *n, *seed)?))
        }
    }
}
