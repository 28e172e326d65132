//! Faithfulness evaluation: mask-overlap metrics (ROC-AUC, FPAR), spatial
//! spread, pixel imputation, ablation curves under two protocols, and
//! aggregation with paired significance tests.
//!
//! Metrics operate on normalized attribution maps (`[H,W]`, values in [0,1])
//! against binary pathology masks. Degenerate cases (all-zero attributions,
//! single-class masks) are reported as [`Error::Undefined`] so callers can
//! skip the sample with a logged reason instead of averaging garbage.

use std::collections::BTreeMap;

use crate::blur::gaussian_blur;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::stats::{self, tie_averaged_ranks};
use crate::tensor::Tensor;

/// Softmax confidence for a fixed class; the classifier is the production
/// implementation, tests substitute closed-form models.
pub trait ConfidenceModel {
    fn confidence(&self, x: &Tensor, class: usize) -> Result<f32>;
}

impl ConfidenceModel for Classifier {
    fn confidence(&self, x: &Tensor, class: usize) -> Result<f32> {
        Classifier::confidence(self, x, class)
    }
}

fn expect_same_shape(attr: &Tensor, mask: &Tensor) -> Result<()> {
    if attr.shape() != mask.shape() {
        return Err(Error::invalid(format!(
            "attribution shape {:?} does not match mask {:?}",
            attr.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Rank-based (Mann–Whitney) ROC-AUC of the attribution map as a predictor of
/// the mask, ties credited half. Errors with [`Error::Undefined`] when the
/// mask has a single class.
pub fn roc_auc(attr: &Tensor, mask: &Tensor) -> Result<f64> {
    expect_same_shape(attr, mask)?;
    let n_pos = mask.data().iter().filter(|&&m| m > 0.5).count();
    let n_neg = mask.numel() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Undefined(format!(
            "roc_auc needs both classes in the mask (positives: {n_pos})"
        )));
    }
    let values: Vec<f64> = attr.data().iter().map(|&v| v as f64).collect();
    let ranks = tie_averaged_ranks(&values);
    let pos_rank_sum: f64 = ranks
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m > 0.5)
        .map(|(&r, _)| r)
        .sum();
    let u = pos_rank_sum - (n_pos as f64) * (n_pos as f64 + 1.0) / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// False-positive attribution ratio: Σ A·(1−M) / Σ A. Undefined for an
/// all-zero map.
pub fn fpar(attr: &Tensor, mask: &Tensor) -> Result<f64> {
    expect_same_shape(attr, mask)?;
    let mut outside = 0.0f64;
    let mut total = 0.0f64;
    for (&a, &m) in attr.data().iter().zip(mask.data()) {
        let a = a as f64;
        total += a;
        if m <= 0.5 {
            outside += a;
        }
    }
    if total <= 0.0 {
        return Err(Error::Undefined("fpar of an all-zero attribution".into()));
    }
    Ok(outside / total)
}

/// Intensity-weighted mean distance from the attribution's center of mass,
/// S = (1/(H·W)) Σ A_{ij} ‖r_{ij} − r_c‖ with r = (column, row).
pub fn spatial_spread(attr: &Tensor) -> Result<f64> {
    let (h, w) = grid_dims(attr)?;
    let (cc, cr) = center_of_mass(attr, h, w)?;
    let mut s = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            let a = attr.data()[row * w + col] as f64;
            let dc = col as f64 - cc;
            let dr = row as f64 - cr;
            s += a * (dc * dc + dr * dr).sqrt();
        }
    }
    Ok(s / (h * w) as f64)
}

fn grid_dims(attr: &Tensor) -> Result<(usize, usize)> {
    match attr.shape() {
        [h, w] => Ok((*h, *w)),
        other => Err(Error::invalid(format!("expected a 2-d map, got {other:?}"))),
    }
}

/// Attribution-weighted mean coordinate (column, row), unrounded.
fn center_of_mass(attr: &Tensor, h: usize, w: usize) -> Result<(f64, f64)> {
    let mut total = 0.0f64;
    let mut col_acc = 0.0f64;
    let mut row_acc = 0.0f64;
    for row in 0..h {
        for col in 0..w {
            let a = attr.data()[row * w + col] as f64;
            total += a;
            col_acc += a * col as f64;
            row_acc += a * row as f64;
        }
    }
    if total <= 0.0 {
        return Err(Error::Undefined("center of mass of an all-zero attribution".into()));
    }
    Ok((col_acc / total, row_acc / total))
}

/// Center of mass rounded to the nearest pixel, as (row, column).
pub fn attribution_center(attr: &Tensor) -> Result<(usize, usize)> {
    let (h, w) = grid_dims(attr)?;
    let (cc, cr) = center_of_mass(attr, h, w)?;
    let row = (cr.round() as i64).clamp(0, h as i64 - 1) as usize;
    let col = (cc.round() as i64).clamp(0, w as i64 - 1) as usize;
    Ok((row, col))
}

/// Pixel-replacement strategies for ablation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ImputeMethod {
    /// Image-wide mean of the input itself.
    Mean,
    /// Gaussian-blurred input.
    Blur { sigma: f64 },
    /// Matching pixel of the counterfactual image.
    Counterfactual,
    /// Matching pixel of the blurred counterfactual.
    BlurredCounterfactual { sigma: f64 },
    /// Matching pixel of the pixelwise mean over normal training images.
    MeanNormal,
}

impl ImputeMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ImputeMethod::Mean => "mean",
            ImputeMethod::Blur { .. } => "blur",
            ImputeMethod::Counterfactual => "cf",
            ImputeMethod::BlurredCounterfactual { .. } => "blur_cf",
            ImputeMethod::MeanNormal => "mean_normal",
        }
    }
}

/// Side inputs some imputers need.
pub struct ImputeContext<'a> {
    /// Counterfactual image for the current sample.
    pub cf_image: Option<&'a Tensor>,
    /// Pixelwise mean over normal-class training images.
    pub normal_mean: Option<&'a Tensor>,
}

impl<'a> ImputeContext<'a> {
    pub fn empty() -> Self {
        ImputeContext { cf_image: None, normal_mean: None }
    }
}

/// The full-image replacement source a method imputes from.
pub fn replacement_image(x: &Tensor, method: ImputeMethod, ctx: &ImputeContext) -> Result<Tensor> {
    let require = |t: Option<&Tensor>, what: &str| -> Result<Tensor> {
        let t = t.ok_or_else(|| Error::MissingContext(format!("imputation needs {what}")))?;
        if t.shape() != x.shape() {
            return Err(Error::invalid(format!(
                "{what} shape {:?} does not match input {:?}",
                t.shape(),
                x.shape()
            )));
        }
        Ok(t.clone())
    };
    match method {
        ImputeMethod::Mean => Ok(Tensor::full(x.shape(), x.mean() as f32)),
        ImputeMethod::Blur { sigma } => gaussian_blur(x, sigma),
        ImputeMethod::Counterfactual => require(ctx.cf_image, "the counterfactual image"),
        ImputeMethod::BlurredCounterfactual { sigma } => {
            gaussian_blur(&require(ctx.cf_image, "the counterfactual image")?, sigma)
        }
        ImputeMethod::MeanNormal => require(ctx.normal_mean, "the normal-training mean image"),
    }
}

/// Replaces exactly the listed pixels (flat row-major indices into the H×W
/// grid) from the method's replacement image; all other pixels are
/// bit-identical to `x`.
pub fn impute(
    x: &Tensor,
    pixels: &[usize],
    method: ImputeMethod,
    ctx: &ImputeContext,
) -> Result<Tensor> {
    let replacement = replacement_image(x, method, ctx)?;
    let mut out = x.clone();
    let n = x.numel();
    for &p in pixels {
        if p >= n {
            return Err(Error::invalid(format!("pixel index {p} out of range ({n} pixels)")));
        }
        out.data_mut()[p] = replacement.data()[p];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    TopK,
    MassCenter,
}

impl Protocol {
    pub fn label(&self) -> &'static str {
        match self {
            Protocol::TopK => "topk",
            Protocol::MassCenter => "masscenter",
        }
    }
}

/// Confidence as a function of how much of the image has been ablated. The
/// first point is always the unablated confidence at x-coordinate 0.
#[derive(Debug, Clone)]
pub struct AblationCurve {
    pub protocol: Protocol,
    pub imputer: &'static str,
    /// Fractions (top-k) or square sizes (mass-center), including leading 0.
    pub xs: Vec<f64>,
    pub confidences: Vec<f32>,
}

impl AblationCurve {
    /// Trapezoidal area under the curve; lower means ablation destroyed the
    /// class evidence faster.
    pub fn auc(&self) -> f64 {
        self.xs
            .windows(2)
            .zip(self.confidences.windows(2))
            .map(|(x, y)| (x[1] - x[0]) * (y[0] as f64 + y[1] as f64) / 2.0)
            .sum()
    }

    /// Stable key for reports: `auc_<protocol>_<imputer>`.
    pub fn metric_key(&self) -> String {
        format!("auc_{}_{}", self.protocol.label(), self.imputer)
    }
}

/// Pixel indices sorted by descending attribution, ties broken by raster
/// order (so a constant map selects the top-left block first).
pub fn ranked_pixels(attr: &Tensor) -> Result<Vec<usize>> {
    grid_dims(attr)?;
    let mut order: Vec<usize> = (0..attr.numel()).collect();
    order.sort_by(|&a, &b| {
        attr.data()[b]
            .partial_cmp(&attr.data()[a])
            .expect("normalized attributions are finite")
            .then(a.cmp(&b))
    });
    Ok(order)
}

fn check_image_matches_map(x: &Tensor, attr: &Tensor) -> Result<()> {
    let (h, w) = grid_dims(attr)?;
    let ok = x.shape() == [h, w] || x.shape() == [1, h, w];
    if !ok {
        return Err(Error::invalid(format!(
            "image shape {:?} does not cover a {h}×{w} attribution map",
            x.shape()
        )));
    }
    Ok(())
}

/// Ablates the top-`fraction` pixels of the map for each fraction, imputes,
/// and records the target-class confidence.
pub fn topk_ablation_curve(
    x: &Tensor,
    attr: &Tensor,
    model: &impl ConfidenceModel,
    target: usize,
    method: ImputeMethod,
    ctx: &ImputeContext,
    fractions: &[f64],
) -> Result<AblationCurve> {
    check_image_matches_map(x, attr)?;
    if fractions.is_empty() {
        return Err(Error::invalid("no ablation fractions given"));
    }
    for pair in fractions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::invalid(format!("fractions must strictly increase: {fractions:?}")));
        }
    }
    if fractions[0] <= 0.0 || *fractions.last().unwrap() > 1.0 {
        return Err(Error::invalid(format!("fractions must lie in (0,1]: {fractions:?}")));
    }
    let order = ranked_pixels(attr)?;
    let n = order.len();
    let mut xs = vec![0.0f64];
    let mut confidences = vec![model.confidence(x, target)?];
    for &fraction in fractions {
        let k = ((fraction * n as f64).round() as usize).min(n);
        let ablated = impute(x, &order[..k], method, ctx)?;
        xs.push(fraction);
        confidences.push(model.confidence(&ablated, target)?);
    }
    Ok(AblationCurve { protocol: Protocol::TopK, imputer: method.label(), xs, confidences })
}

/// Flat indices of the s×s square centered at (row, col), clipped to the
/// grid. Even sizes place the center at offset s/2 inside the square.
fn square_pixels(center: (usize, usize), size: usize, h: usize, w: usize) -> Vec<usize> {
    let half = size as i64 / 2;
    let r0 = (center.0 as i64 - half).max(0) as usize;
    let c0 = (center.1 as i64 - half).max(0) as usize;
    let r1 = (center.0 as i64 - half + size as i64).clamp(0, h as i64) as usize;
    let c1 = (center.1 as i64 - half + size as i64).clamp(0, w as i64) as usize;
    let mut out = Vec::with_capacity((r1 - r0) * (c1 - c0));
    for row in r0..r1 {
        for col in c0..c1 {
            out.push(row * w + col);
        }
    }
    out
}

/// Ablates growing squares centered at the map's (fixed) center of mass.
pub fn mass_center_ablation_curve(
    x: &Tensor,
    attr: &Tensor,
    model: &impl ConfidenceModel,
    target: usize,
    method: ImputeMethod,
    ctx: &ImputeContext,
    sizes: &[usize],
) -> Result<AblationCurve> {
    check_image_matches_map(x, attr)?;
    let (h, w) = grid_dims(attr)?;
    if sizes.is_empty() {
        return Err(Error::invalid("no ablation sizes given"));
    }
    for pair in sizes.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::invalid(format!("sizes must strictly increase: {sizes:?}")));
        }
    }
    if sizes[0] == 0 || *sizes.last().unwrap() > h.max(w) {
        return Err(Error::invalid(format!(
            "sizes must lie in [1, image side]: {sizes:?}"
        )));
    }
    let center = attribution_center(attr)?;
    let mut xs = vec![0.0f64];
    let mut confidences = vec![model.confidence(x, target)?];
    for &size in sizes {
        let pixels = square_pixels(center, size, h, w);
        let ablated = impute(x, &pixels, method, ctx)?;
        xs.push(size as f64);
        confidences.push(model.confidence(&ablated, target)?);
    }
    Ok(AblationCurve { protocol: Protocol::MassCenter, imputer: method.label(), xs, confidences })
}

/// Everything measured for one (sample, baseline) pair.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub sample_id: usize,
    pub baseline: String,
    pub roc_auc: f64,
    pub fpar: f64,
    pub spread: f64,
    pub curves: Vec<AblationCurve>,
}

impl EvalRecord {
    /// Scalar metrics in report order: the three map metrics, then one AUC
    /// per ablation curve.
    pub fn metric_values(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("roc_auc".to_string(), self.roc_auc),
            ("fpar".to_string(), self.fpar),
            ("spread".to_string(), self.spread),
        ];
        for curve in &self.curves {
            out.push((curve.metric_key(), curve.auc()));
        }
        out
    }
}

/// Whether a larger or smaller value of a metric is better, for picking the
/// "best" baseline to test others against.
pub fn metric_direction(metric: &str) -> Direction {
    if metric == "roc_auc" {
        Direction::Higher
    } else {
        // fpar, spread, and every ablation AUC: lower is better.
        Direction::Lower
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Higher,
    Lower,
}

/// One (baseline, metric) cell of the aggregate report.
#[derive(Debug, Clone)]
pub struct AggregateCell {
    pub baseline: String,
    pub metric: String,
    pub mean: f64,
    pub sem: f64,
    pub n: usize,
    /// SEM is 0 by convention when n = 1; flagged here.
    pub degenerate: bool,
    /// Paired two-sided p-value against the best baseline on this metric;
    /// `None` on the best row itself (or when pairing is impossible).
    pub p_vs_best: Option<f64>,
    pub test: Option<&'static str>,
}

/// One evaluated (sample, baseline) pair reduced to scalar metrics — the
/// shape of a per-sample report row.
#[derive(Debug, Clone)]
pub struct MetricRow {
    pub sample_id: usize,
    pub baseline: String,
    pub values: Vec<(String, f64)>,
}

impl EvalRecord {
    pub fn to_row(&self) -> MetricRow {
        MetricRow {
            sample_id: self.sample_id,
            baseline: self.baseline.clone(),
            values: self.metric_values(),
        }
    }
}

/// Groups records into per-(baseline, metric) means with SEMs and paired
/// p-values against the best baseline per metric. Baselines keep their order
/// of first appearance; metrics keep record order.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<AggregateCell>> {
    let rows: Vec<MetricRow> = records.iter().map(EvalRecord::to_row).collect();
    aggregate_rows(&rows)
}

/// Row-based aggregation; lets reports recompute from emitted CSVs.
pub fn aggregate_rows(rows: &[MetricRow]) -> Result<Vec<AggregateCell>> {
    if rows.is_empty() {
        return Err(Error::invalid("no records to aggregate"));
    }
    let mut baselines: Vec<String> = Vec::new();
    let mut metrics: Vec<String> = Vec::new();
    // (baseline, metric) → sample_id → value; BTreeMap keys align pairs.
    let mut table: BTreeMap<(String, String), BTreeMap<usize, f64>> = BTreeMap::new();
    for row in rows {
        if !baselines.contains(&row.baseline) {
            baselines.push(row.baseline.clone());
        }
        for (metric, value) in &row.values {
            if !metrics.contains(metric) {
                metrics.push(metric.clone());
            }
            let cell = table.entry((row.baseline.clone(), metric.clone())).or_default();
            if cell.insert(row.sample_id, *value).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate record for sample {} baseline {}",
                    row.sample_id, row.baseline
                )));
            }
        }
    }

    let mut out = Vec::new();
    for metric in &metrics {
        let direction = metric_direction(metric);
        let mut means: Vec<(String, f64)> = Vec::new();
        for baseline in &baselines {
            if let Some(cell) = table.get(&(baseline.clone(), metric.clone())) {
                let values: Vec<f64> = cell.values().copied().collect();
                means.push((baseline.clone(), stats::mean(&values)));
            }
        }
        let best = means
            .iter()
            .reduce(|a, b| {
                let better = match direction {
                    Direction::Higher => b.1 > a.1,
                    Direction::Lower => b.1 < a.1,
                };
                if better {
                    b
                } else {
                    a
                }
            })
            .expect("≥1 baseline per metric")
            .0
            .clone();
        let best_cell = table[&(best.clone(), metric.clone())].clone();

        for baseline in &baselines {
            let Some(cell) = table.get(&(baseline.clone(), metric.clone())) else {
                continue;
            };
            let values: Vec<f64> = cell.values().copied().collect();
            let (p_vs_best, test) = if *baseline == best {
                (None, None)
            } else {
                // Pair by sample id; samples missing on either side drop out.
                let mut a = Vec::new();
                let mut b = Vec::new();
                for (id, &v) in cell {
                    if let Some(&bv) = best_cell.get(id) {
                        a.push(bv);
                        b.push(v);
                    }
                }
                match stats::paired_test(&a, &b) {
                    Ok(res) => (Some(res.p_value), Some(res.test.label())),
                    Err(_) => (None, None), // too few shared samples to pair
                }
            };
            out.push(AggregateCell {
                baseline: baseline.clone(),
                metric: metric.clone(),
                mean: stats::mean(&values),
                sem: stats::sem(&values),
                n: values.len(),
                degenerate: values.len() == 1,
                p_vs_best,
                test,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stage_rng;
    use rand::Rng;

    /// confidence = clamp(weighted pixel sum): cheap, deterministic, and
    /// sensitive to exactly which pixels are ablated.
    struct PixelMeanModel;

    impl ConfidenceModel for PixelMeanModel {
        fn confidence(&self, x: &Tensor, _class: usize) -> Result<f32> {
            Ok(x.mean().clamp(0.0, 1.0) as f32)
        }
    }

    fn random_unit_map(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = stage_rng(seed, "metrics-test");
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0f32))
    }

    fn random_mask(seed: u64, shape: &[usize]) -> Tensor {
        let mut rng = stage_rng(seed, "metrics-mask");
        Tensor::from_fn(shape, |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
    }

    #[test]
    fn roc_auc_hits_the_three_textbook_cases() {
        let mask = random_mask(1, &[8, 8]);
        assert_eq!(roc_auc(&mask, &mask).unwrap(), 1.0);
        let inverted = mask.map(|v| 1.0 - v);
        assert_eq!(roc_auc(&inverted, &mask).unwrap(), 0.0);
        let constant = Tensor::full(&[8, 8], 0.4);
        assert_eq!(roc_auc(&constant, &mask).unwrap(), 0.5);
    }

    #[test]
    fn roc_auc_rejects_single_class_masks() {
        let attr = random_unit_map(2, &[8, 8]);
        assert!(matches!(roc_auc(&attr, &Tensor::zeros(&[8, 8])), Err(Error::Undefined(_))));
        assert!(matches!(roc_auc(&attr, &Tensor::ones(&[8, 8])), Err(Error::Undefined(_))));
    }

    #[test]
    fn roc_auc_matches_a_pairwise_counting_oracle() {
        let attr = random_unit_map(3, &[8, 8]);
        let mask = random_mask(4, &[8, 8]);
        let fast = roc_auc(&attr, &mask).unwrap();
        // Count (positive, negative) pairs ranked correctly, half for ties.
        let mut wins = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, &m1) in mask.data().iter().enumerate() {
            if m1 <= 0.5 {
                continue;
            }
            for (j, &m0) in mask.data().iter().enumerate() {
                if m0 > 0.5 {
                    continue;
                }
                pairs += 1.0;
                let (p, q) = (attr.data()[i], attr.data()[j]);
                if p > q {
                    wins += 1.0;
                } else if p == q {
                    wins += 0.5;
                }
            }
        }
        assert!((fast - wins / pairs).abs() < 1e-12);
    }

    #[test]
    fn fpar_matches_hand_cases_and_the_double_loop() {
        // All attribution inside the mask.
        let mask = random_mask(5, &[8, 8]);
        assert_eq!(fpar(&mask, &mask).unwrap(), 0.0);
        // Uniform attribution, single-pixel mask on 2×2: 3c/4c.
        let uniform = Tensor::full(&[2, 2], 0.7);
        let mut m = Tensor::zeros(&[2, 2]);
        m.data_mut()[3] = 1.0;
        assert!((fpar(&uniform, &m).unwrap() - 0.75).abs() < 1e-12);
        // Brute force on a random pair.
        let attr = random_unit_map(6, &[8, 8]);
        let mask = random_mask(7, &[8, 8]);
        let mut outside = 0.0f64;
        let mut total = 0.0f64;
        for i in 0..64 {
            total += attr.data()[i] as f64;
            outside += attr.data()[i] as f64 * (1.0 - mask.data()[i] as f64);
        }
        assert!((fpar(&attr, &mask).unwrap() - outside / total).abs() < 1e-12);
        assert!(matches!(fpar(&Tensor::zeros(&[8, 8]), &mask), Err(Error::Undefined(_))));
    }

    #[test]
    fn spread_matches_hand_cases_and_the_double_loop() {
        // Point mass: zero spread wherever it sits.
        let mut point = Tensor::zeros(&[8, 8]);
        point.data_mut()[27] = 0.9;
        assert_eq!(spatial_spread(&point).unwrap(), 0.0);
        // 1×3 map (1,0,1): center at column 1, S = (1+1)/3.
        let strip = Tensor::from_vec(vec![1, 3], vec![1.0, 0.0, 1.0]).unwrap();
        assert!((spatial_spread(&strip).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        // Brute force on a random map.
        let attr = random_unit_map(8, &[8, 8]);
        let total: f64 = attr.data().iter().map(|&v| v as f64).sum();
        let mut cc = 0.0;
        let mut cr = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                cc += attr.data()[r * 8 + c] as f64 * c as f64 / total;
                cr += attr.data()[r * 8 + c] as f64 * r as f64 / total;
            }
        }
        let mut s = 0.0;
        for r in 0..8 {
            for c in 0..8 {
                s += attr.data()[r * 8 + c] as f64
                    * ((c as f64 - cc).powi(2) + (r as f64 - cr).powi(2)).sqrt();
            }
        }
        assert!((spatial_spread(&attr).unwrap() - s / 64.0).abs() < 1e-12);
        assert!(matches!(spatial_spread(&Tensor::zeros(&[8, 8])), Err(Error::Undefined(_))));
    }

    #[test]
    fn spread_is_translation_invariant() {
        let mut small = Tensor::zeros(&[16, 16]);
        for (i, v) in [(34usize, 0.5f32), (35, 0.25), (50, 0.75), (66, 1.0)] {
            small.data_mut()[i] = v;
        }
        let shifted = {
            let mut t = Tensor::zeros(&[16, 16]);
            for r in 0..16 {
                for c in 0..16 {
                    let v = small.data()[r * 16 + c];
                    if v != 0.0 {
                        t.data_mut()[(r + 3) * 16 + (c + 2)] = v;
                    }
                }
            }
            t
        };
        let a = spatial_spread(&small).unwrap();
        let b = spatial_spread(&shifted).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn imputation_replaces_exactly_the_requested_pixels() {
        let x = random_unit_map(9, &[1, 8, 8]);
        let ctx = ImputeContext::empty();
        // Empty set: identity, bit-exact.
        let same = impute(&x, &[], ImputeMethod::Mean, &ctx).unwrap();
        assert!(same.bits_eq(&x));
        // Mean of a 2×2 checkerboard is 0.5 at the imputed pixel.
        let board = Tensor::from_vec(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = impute(&board, &[0], ImputeMethod::Mean, &ctx).unwrap();
        assert_eq!(out.data(), &[0.5, 1.0, 1.0, 0.0]);
        // Locality: untouched pixels bit-identical under every method.
        let cf = random_unit_map(10, &[1, 8, 8]);
        let normal_mean = random_unit_map(11, &[1, 8, 8]);
        let ctx = ImputeContext { cf_image: Some(&cf), normal_mean: Some(&normal_mean) };
        let pixels = [3usize, 17, 40];
        for method in [
            ImputeMethod::Mean,
            ImputeMethod::Blur { sigma: 2.0 },
            ImputeMethod::Counterfactual,
            ImputeMethod::BlurredCounterfactual { sigma: 2.0 },
            ImputeMethod::MeanNormal,
        ] {
            let out = impute(&x, &pixels, method, &ctx).unwrap();
            for i in 0..64 {
                if !pixels.contains(&i) {
                    assert_eq!(out.data()[i].to_bits(), x.data()[i].to_bits());
                }
            }
        }
        // Full replacement with the counterfactual gives the counterfactual.
        let all: Vec<usize> = (0..64).collect();
        let out = impute(&x, &all, ImputeMethod::Counterfactual, &ctx).unwrap();
        assert!(out.bits_eq(&cf));
    }

    #[test]
    fn imputation_without_required_context_is_rejected() {
        let x = random_unit_map(12, &[8, 8]);
        let ctx = ImputeContext::empty();
        assert!(matches!(
            impute(&x, &[0], ImputeMethod::Counterfactual, &ctx),
            Err(Error::MissingContext(_))
        ));
        assert!(matches!(
            impute(&x, &[0], ImputeMethod::MeanNormal, &ctx),
            Err(Error::MissingContext(_))
        ));
        assert!(impute(&x, &[99], ImputeMethod::Mean, &ctx).is_err());
    }

    #[test]
    fn ranked_pixels_break_ties_in_raster_order() {
        let uniform = Tensor::full(&[4, 4], 0.3);
        let order = ranked_pixels(&uniform).unwrap();
        assert_eq!(order, (0..16).collect::<Vec<_>>());
        let mut attr = Tensor::zeros(&[2, 2]);
        attr.data_mut()[2] = 1.0;
        attr.data_mut()[1] = 0.5;
        assert_eq!(ranked_pixels(&attr).unwrap(), vec![2, 1, 0, 3]);
    }

    #[test]
    fn topk_curve_starts_at_the_unablated_confidence() {
        let x = random_unit_map(13, &[8, 8]);
        let attr = random_unit_map(14, &[8, 8]);
        let model = PixelMeanModel;
        let curve = topk_ablation_curve(
            &x,
            &attr,
            &model,
            0,
            ImputeMethod::Mean,
            &ImputeContext::empty(),
            &[0.1, 0.5, 1.0],
        )
        .unwrap();
        assert_eq!(curve.xs[0], 0.0);
        assert_eq!(
            curve.confidences[0].to_bits(),
            model.confidence(&x, 0).unwrap().to_bits()
        );
        assert_eq!(curve.xs.len(), 4);
        assert!(curve.confidences.iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn topk_full_fraction_with_counterfactual_imputer_scores_the_counterfactual() {
        let x = random_unit_map(15, &[8, 8]);
        let attr = random_unit_map(16, &[8, 8]);
        let cf = random_unit_map(17, &[8, 8]);
        let ctx = ImputeContext { cf_image: Some(&cf), normal_mean: None };
        let model = PixelMeanModel;
        let curve =
            topk_ablation_curve(&x, &attr, &model, 0, ImputeMethod::Counterfactual, &ctx, &[1.0])
                .unwrap();
        let expected = model.confidence(&cf, 0).unwrap();
        assert_eq!(curve.confidences[1].to_bits(), expected.to_bits());
    }

    #[test]
    fn topk_rejects_bad_fraction_lists() {
        let x = random_unit_map(18, &[8, 8]);
        let attr = random_unit_map(19, &[8, 8]);
        let model = PixelMeanModel;
        let ctx = ImputeContext::empty();
        for bad in [vec![], vec![0.5, 0.5], vec![0.5, 0.2], vec![0.0, 0.5], vec![0.5, 1.2]] {
            assert!(
                topk_ablation_curve(&x, &attr, &model, 0, ImputeMethod::Mean, &ctx, &bad).is_err(),
                "accepted {bad:?}"
            );
        }
    }

    #[test]
    fn mass_center_square_tracks_a_single_peak_and_clips_at_borders() {
        let mut attr = Tensor::zeros(&[16, 16]);
        attr.data_mut()[10 * 16 + 10] = 1.0;
        assert_eq!(attribution_center(&attr).unwrap(), (10, 10));
        let pixels = square_pixels((10, 10), 3, 16, 16);
        let expected: Vec<usize> = (9..12)
            .flat_map(|r| (9..12).map(move |c| r * 16 + c))
            .collect();
        assert_eq!(pixels, expected);
        // A corner peak clips to the in-bounds quadrant.
        let corner = square_pixels((0, 0), 4, 16, 16);
        assert_eq!(corner, vec![0, 1, 16, 17]);
    }

    #[test]
    fn mass_center_full_size_equals_total_replacement() {
        let x = random_unit_map(20, &[8, 8]);
        let attr = random_unit_map(21, &[8, 8]);
        let model = PixelMeanModel;
        let ctx = ImputeContext::empty();
        let curve = mass_center_ablation_curve(
            &x,
            &attr,
            &model,
            0,
            ImputeMethod::Mean,
            &ctx,
            &[2, 8],
        )
        .unwrap();
        // Full-size square must reduce to full-image imputation... but only
        // when the center square covers everything, i.e. size = side and the
        // center is interior enough; with size 8 on an 8×8 grid the clip
        // covers at least the quadrant. Check instead against direct
        // imputation of the same pixel set.
        let center = attribution_center(&attr).unwrap();
        let pixels = square_pixels(center, 8, 8, 8);
        let direct = impute(&x, &pixels, ImputeMethod::Mean, &ctx).unwrap();
        let expected = model.confidence(&direct, 0).unwrap();
        assert_eq!(curve.confidences[2].to_bits(), expected.to_bits());
        assert_eq!(curve.xs, vec![0.0, 2.0, 8.0]);
    }

    #[test]
    fn curve_auc_is_the_trapezoid_sum() {
        let curve = AblationCurve {
            protocol: Protocol::TopK,
            imputer: "mean",
            xs: vec![0.0, 0.5, 1.0],
            confidences: vec![1.0, 0.5, 0.0],
        };
        // Trapezoids: 0.5·(1+0.5)/2 + 0.5·(0.5+0)/2 = 0.375 + 0.125.
        assert!((curve.auc() - 0.5).abs() < 1e-12);
        assert_eq!(curve.metric_key(), "auc_topk_mean");
    }

    fn record(sample: usize, baseline: &str, roc: f64) -> EvalRecord {
        EvalRecord {
            sample_id: sample,
            baseline: baseline.into(),
            roc_auc: roc,
            fpar: 1.0 - roc,
            spread: 1.0,
            curves: vec![],
        }
    }

    #[test]
    fn aggregate_means_and_sems_match_hand_arithmetic() {
        let records = vec![
            record(0, "cf", 1.0),
            record(1, "cf", 2.0),
            record(2, "cf", 3.0),
        ];
        let cells = aggregate(&records).unwrap();
        let roc = cells.iter().find(|c| c.metric == "roc_auc").unwrap();
        assert_eq!(roc.mean, 2.0);
        assert!((roc.sem - 1.0 / 3.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(roc.n, 3);
        assert!(!roc.degenerate);
        assert!(roc.p_vs_best.is_none(), "single baseline is its own best");
    }

    #[test]
    fn aggregate_flags_single_records_and_pairs_against_the_best() {
        let mut records = Vec::new();
        for i in 0..8 {
            records.push(record(i, "good", 0.9 + (i as f64) * 1e-3));
            records.push(record(i, "bad", 0.5 + (i as f64) * 1e-3));
        }
        records.push(record(0, "lone", 0.7));
        let cells = aggregate(&records).unwrap();
        let lone = cells
            .iter()
            .find(|c| c.baseline == "lone" && c.metric == "roc_auc")
            .unwrap();
        assert!(lone.degenerate && lone.sem == 0.0);
        assert!(lone.p_vs_best.is_none(), "cannot pair a single sample");
        let bad = cells
            .iter()
            .find(|c| c.baseline == "bad" && c.metric == "roc_auc")
            .unwrap();
        assert!(bad.p_vs_best.unwrap() < 0.01, "clearly separated baselines");
        let good = cells
            .iter()
            .find(|c| c.baseline == "good" && c.metric == "roc_auc")
            .unwrap();
        assert!(good.p_vs_best.is_none(), "best row carries no p-value");
        // fpar is lower-better: "good" has the lowest fpar, so it is best
        // there too and "bad" gets a p-value.
        let bad_fpar = cells
            .iter()
            .find(|c| c.baseline == "bad" && c.metric == "fpar")
            .unwrap();
        assert!(bad_fpar.p_vs_best.is_some());
    }

    #[test]
    fn aggregate_rejects_duplicates_and_empty_input() {
        assert!(aggregate(&[]).is_err());
        let records = vec![record(0, "cf", 1.0), record(0, "cf", 0.9)];
        assert!(aggregate(&records).is_err());
    }
}
