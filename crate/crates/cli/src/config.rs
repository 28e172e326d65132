//! Run configuration: a versioned JSON file with every knob the pipeline
//! reads. Unknown keys are rejected so a typo fails fast instead of silently
//! running defaults, and the seed is mandatory — no wall-clock fallback.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Schema version; must equal [`CONFIG_VERSION`].
    pub version: u32,
    /// Master seed; all stage randomness derives from it via fixed tags.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub classifier: FitConfig,
    pub vae: VaeFitConfig,
    #[serde(default)]
    pub counterfactual: CfSection,
    #[serde(default)]
    pub attribution: AttributionSection,
    /// Baseline variants to attribute with, in report order.
    #[serde(default = "default_baselines")]
    pub baselines: Vec<String>,
    #[serde(default)]
    pub metrics: MetricsSection,
    /// Output directory for all artifacts; overridable with --out.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// "band" or "blob".
    pub family: String,
    pub n: usize,
    /// Gap-fraction range (band) or blob-radius range in pixels (blob).
    pub geometry: (f64, f64),
    pub noise: f64,
    /// Train/val/test fractions.
    pub split: (f64, f64, f64),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default = "default_true")]
    pub class_weighting: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeFitConfig {
    pub lr: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// KL weight.
    pub beta: f32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CfSection {
    pub lr: f32,
    pub max_iters: usize,
    pub threshold: f32,
    /// Emit trajectory dumps (snapshots every 10 iterations).
    pub trajectories: bool,
}

impl Default for CfSection {
    fn default() -> Self {
        CfSection { lr: 0.1, max_iters: 50, threshold: 0.99, trajectories: false }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributionSection {
    /// Riemann steps for single-baseline integrated gradients.
    pub ig_steps: usize,
    /// Training images drawn for the expected-gradients baseline set.
    pub eg_baselines: usize,
    /// Decoded latent perturbations for the counterfactual-set baseline.
    pub egcf_baselines: usize,
    /// α draws per baseline for the expectation variants.
    pub draws_per_baseline: usize,
    /// Latent σ for the counterfactual set; null → 0.1·RMS(z*).
    pub egcf_sigma: Option<f32>,
    /// σ of the blurred-input baseline.
    pub blur_sigma: f64,
}

impl Default for AttributionSection {
    fn default() -> Self {
        AttributionSection {
            ig_steps: 64,
            eg_baselines: 50,
            egcf_baselines: 50,
            draws_per_baseline: 8,
            egcf_sigma: None,
            blur_sigma: 20.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSection {
    /// Top-k ablation fractions, strictly increasing in (0,1].
    pub topk_fractions: Vec<f64>,
    /// Mass-center square sizes, strictly increasing.
    pub masscenter_sizes: Vec<usize>,
    /// Imputers to run both protocols with.
    pub imputers: Vec<String>,
    /// σ for the blur and blurred-counterfactual imputers.
    pub impute_blur_sigma: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            topk_fractions: vec![0.005, 0.01, 0.02, 0.05, 0.10, 0.20],
            masscenter_sizes: vec![4, 8, 12, 16, 20, 24, 28, 32],
            imputers: vec![
                "mean".into(),
                "blur".into(),
                "cf".into(),
                "blur_cf".into(),
                "mean_normal".into(),
            ],
            impute_blur_sigma: 20.0,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_baselines() -> Vec<String> {
    ["zeros", "ones", "blurred", "uniform", "eg", "cf", "egcf"]
        .map(String::from)
        .to_vec()
}

pub const KNOWN_BASELINES: [&str; 7] = ["zeros", "ones", "blurred", "uniform", "eg", "cf", "egcf"];
pub const KNOWN_IMPUTERS: [&str; 5] = ["mean", "blur", "cf", "blur_cf", "mean_normal"];

impl RunConfig {
    /// Parses and validates, applying CLI overrides before validation.
    pub fn load(
        path: &Path,
        out_override: Option<&Path>,
        seed_override: Option<u64>,
        baseline_override: Option<&[String]>,
    ) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        if let Some(out) = out_override {
            cfg.out_dir = out.to_path_buf();
        }
        if let Some(seed) = seed_override {
            cfg.seed = seed;
        }
        if let Some(baselines) = baseline_override {
            cfg.baselines = baselines.to_vec();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            bail!("config version {} unsupported (expected {CONFIG_VERSION})", self.version);
        }
        match self.dataset.family.as_str() {
            "band" | "blob" => {}
            other => bail!("unknown dataset family {other:?} (expected \"band\" or \"blob\")"),
        }
        if self.dataset.n == 0 {
            bail!("dataset.n must be positive");
        }
        let (tr, va, te) = self.dataset.split;
        if tr <= 0.0 || va < 0.0 || te <= 0.0 || (tr + va + te - 1.0).abs() > 1e-9 {
            bail!("dataset.split must be nonnegative fractions summing to 1, train/test > 0");
        }
        for (what, fit) in [("classifier", &self.classifier)] {
            if fit.lr <= 0.0 || !fit.lr.is_finite() {
                bail!("{what}.lr must be positive and finite");
            }
            if fit.epochs == 0 || fit.batch_size == 0 {
                bail!("{what}.epochs and batch_size must be positive");
            }
        }
        if self.vae.lr <= 0.0 || !self.vae.lr.is_finite() {
            bail!("vae.lr must be positive and finite");
        }
        if self.vae.epochs == 0 || self.vae.batch_size == 0 {
            bail!("vae.epochs and batch_size must be positive");
        }
        if self.vae.beta < 0.0 {
            bail!("vae.beta must be nonnegative");
        }
        let cf = &self.counterfactual;
        if cf.lr <= 0.0 || cf.max_iters == 0 || !(0.0..=1.0).contains(&cf.threshold) || cf.threshold == 0.0 {
            bail!("counterfactual section: lr > 0, max_iters ≥ 1, threshold in (0,1] required");
        }
        let at = &self.attribution;
        if at.ig_steps == 0 || at.eg_baselines == 0 || at.egcf_baselines == 0 || at.draws_per_baseline == 0 {
            bail!("attribution counts (ig_steps, eg_baselines, egcf_baselines, draws_per_baseline) must be positive");
        }
        if at.blur_sigma <= 0.0 {
            bail!("attribution.blur_sigma must be positive");
        }
        if let Some(s) = at.egcf_sigma {
            if s < 0.0 || !s.is_finite() {
                bail!("attribution.egcf_sigma must be nonnegative and finite");
            }
        }
        if self.baselines.is_empty() {
            bail!("baselines list must not be empty");
        }
        for b in &self.baselines {
            if !KNOWN_BASELINES.contains(&b.as_str()) {
                bail!("unknown baseline {b:?} (known: {})", KNOWN_BASELINES.join(", "));
            }
        }
        if self.baselines.len()
            != self.baselines.iter().collect::<std::collections::HashSet<_>>().len()
        {
            bail!("baselines list contains duplicates");
        }
        let m = &self.metrics;
        if m.topk_fractions.is_empty()
            || m.topk_fractions.windows(2).any(|w| w[1] <= w[0])
            || m.topk_fractions[0] <= 0.0
            || *m.topk_fractions.last().unwrap() > 1.0
        {
            bail!("metrics.topk_fractions must be strictly increasing within (0,1]");
        }
        if m.masscenter_sizes.is_empty()
            || m.masscenter_sizes.windows(2).any(|w| w[1] <= w[0])
            || m.masscenter_sizes[0] == 0
        {
            bail!("metrics.masscenter_sizes must be strictly increasing and positive");
        }
        if m.imputers.is_empty() {
            bail!("metrics.imputers must not be empty");
        }
        for imp in &m.imputers {
            if !KNOWN_IMPUTERS.contains(&imp.as_str()) {
                bail!("unknown imputer {imp:?} (known: {})", KNOWN_IMPUTERS.join(", "));
            }
        }
        if m.impute_blur_sigma <= 0.0 {
            bail!("metrics.impute_blur_sigma must be positive");
        }
        if self.out_dir.as_os_str().is_empty() {
            bail!("out_dir must not be empty");
        }
        Ok(())
    }

    /// Hash of everything that affects results. `out_dir` is excluded so a
    /// run can be relocated; the version and seed are included.
    pub fn result_hash(&self) -> String {
        let mut stripped = self.clone();
        stripped.out_dir = PathBuf::new();
        let canonical =
            serde_json::to_string(&stripped).expect("config serialization cannot fail");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut hex = String::with_capacity(64);
        for byte in digest {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> serde_json::Value {
        serde_json::json!({
            "version": 1,
            "seed": 42,
            "dataset": {
                "family": "band",
                "n": 600,
                "geometry": [0.2, 0.5],
                "noise": 0.05,
                "split": [0.6, 0.15, 0.25]
            },
            "classifier": { "lr": 1e-3, "epochs": 20, "batch_size": 16 },
            "vae": { "lr": 1e-2, "epochs": 40, "batch_size": 16, "beta": 5e-4 },
            "out_dir": "run"
        })
    }

    fn parse(v: serde_json::Value) -> Result<RunConfig> {
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = parse(minimal_json()).unwrap();
        assert_eq!(cfg.baselines, default_baselines());
        assert_eq!(cfg.attribution.ig_steps, 64);
        assert_eq!(cfg.attribution.eg_baselines, 50);
        assert_eq!(cfg.counterfactual.max_iters, 50);
        assert_eq!(cfg.metrics.topk_fractions.len(), 6);
        assert_eq!(cfg.metrics.masscenter_sizes, vec![4, 8, 12, 16, 20, 24, 28, 32]);
        assert!(cfg.classifier.class_weighting);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = minimal_json();
        v["tpyo"] = serde_json::json!(1);
        assert!(parse(v).is_err());
        let mut v = minimal_json();
        v["dataset"]["gap"] = serde_json::json!([0.2, 0.5]);
        assert!(parse(v).is_err());
    }

    #[test]
    fn missing_seed_is_rejected() {
        let mut v = minimal_json();
        v.as_object_mut().unwrap().remove("seed");
        assert!(parse(v).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let cases: Vec<(&str, serde_json::Value)> = vec![
            ("version", serde_json::json!(2)),
            ("baselines", serde_json::json!(["zeros", "zeros"])),
            ("baselines", serde_json::json!(["gaussian"])),
            ("baselines", serde_json::json!([])),
        ];
        for (key, value) in cases {
            let mut v = minimal_json();
            v[key] = value.clone();
            assert!(parse(v).is_err(), "accepted {key}={value}");
        }
        let mut v = minimal_json();
        v["dataset"]["split"] = serde_json::json!([0.5, 0.2, 0.2]);
        assert!(parse(v).is_err(), "split must sum to 1");
        let mut v = minimal_json();
        v["metrics"] = serde_json::json!({
            "topk_fractions": [0.1, 0.1],
            "masscenter_sizes": [4],
            "imputers": ["mean"],
            "impute_blur_sigma": 20.0
        });
        assert!(parse(v).is_err(), "non-increasing fractions");
    }

    #[test]
    fn result_hash_ignores_out_dir_but_tracks_seed() {
        let a = parse(minimal_json()).unwrap();
        let mut moved = a.clone();
        moved.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.result_hash(), moved.result_hash());
        let mut reseeded = a.clone();
        reseeded.seed = 43;
        assert_ne!(a.result_hash(), reseeded.result_hash());
    }
}
