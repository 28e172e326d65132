//! Paired significance testing and aggregation arithmetic.
//!
//! The paired test screens the differences for approximate normality with
//! moment thresholds (|skewness| < 1 and |excess kurtosis| < 1) and then
//! applies either a paired t-test or a Wilcoxon signed-rank test with the
//! normal approximation. The screen's moments are population-style (1/n
//! central moments); an undefined screen (zero variance) falls through to
//! Wilcoxon, whose tie handling copes with constant differences.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n−1 denominator); 0 for fewer than two values.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Standard error of the mean: sample std / √n (0 for a single value).
pub fn sem(xs: &[f64]) -> f64 {
    sample_std(xs) / (xs.len() as f64).sqrt()
}

fn central_moment(xs: &[f64], k: i32) -> f64 {
    let m = mean(xs);
    xs.iter().map(|&x| (x - m).powi(k)).sum::<f64>() / xs.len() as f64
}

/// Moment-based skewness m₃/m₂^{3/2}; NaN when the variance is zero.
pub fn skewness(xs: &[f64]) -> f64 {
    central_moment(xs, 3) / central_moment(xs, 2).powf(1.5)
}

/// Moment-based excess kurtosis m₄/m₂² − 3; NaN when the variance is zero.
pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    central_moment(xs, 4) / central_moment(xs, 2).powi(2) - 3.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    PairedT,
    Wilcoxon,
    /// All differences are exactly zero; p = 1 by convention.
    Degenerate,
}

impl TestKind {
    pub fn label(&self) -> &'static str {
        match self {
            TestKind::PairedT => "paired_t",
            TestKind::Wilcoxon => "wilcoxon",
            TestKind::Degenerate => "degenerate",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TestResult {
    pub statistic: f64,
    /// Two-sided p-value.
    pub p_value: f64,
    pub test: TestKind,
}

/// Two-sided paired test of `a` vs `b` (paired by position).
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<TestResult> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 5 {
        return Err(Error::invalid(format!("paired test needs n ≥ 5, got {}", a.len())));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::invalid("paired test requires finite scores"));
    }
    if diffs.iter().all(|&d| d == 0.0) {
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, test: TestKind::Degenerate });
    }
    let skew = skewness(&diffs);
    let kurt = excess_kurtosis(&diffs);
    let normalish = skew.is_finite() && kurt.is_finite() && skew.abs() < 1.0 && kurt.abs() < 1.0;
    if normalish {
        paired_t(&diffs)
    } else {
        wilcoxon_signed_rank(&diffs)
    }
}

fn paired_t(diffs: &[f64]) -> Result<TestResult> {
    let n = diffs.len() as f64;
    let sd = sample_std(diffs);
    debug_assert!(sd > 0.0, "zero-variance differences are screened to Wilcoxon");
    let t = mean(diffs) / (sd / n.sqrt());
    let p = 2.0 * (1.0 - student_t_cdf(t.abs(), n - 1.0));
    Ok(TestResult { statistic: t, p_value: p.clamp(0.0, 1.0), test: TestKind::PairedT })
}

/// Normal-approximation Wilcoxon: zeros dropped, tie-averaged ranks, tie
/// correction in the variance, no continuity correction.
fn wilcoxon_signed_rank(diffs: &[f64]) -> Result<TestResult> {
    let nonzero: Vec<f64> = diffs.iter().copied().filter(|&d| d != 0.0).collect();
    if nonzero.is_empty() {
        return Ok(TestResult { statistic: 0.0, p_value: 1.0, test: TestKind::Degenerate });
    }
    let n = nonzero.len();
    let ranks = tie_averaged_ranks(&nonzero.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let w_plus: f64 = nonzero
        .iter()
        .zip(&ranks)
        .filter(|(&d, _)| d > 0.0)
        .map(|(_, &r)| r)
        .sum();
    let mu = n as f64 * (n as f64 + 1.0) / 4.0;
    let mut var = n as f64 * (n as f64 + 1.0) * (2.0 * n as f64 + 1.0) / 24.0;
    var -= tie_correction(&ranks) / 48.0;
    if var <= 0.0 {
        // Only possible when every rank ties and n is tiny; call it degenerate.
        return Ok(TestResult { statistic: w_plus, p_value: 1.0, test: TestKind::Degenerate });
    }
    let z = (w_plus - mu) / var.sqrt();
    let p = 2.0 * (1.0 - normal_cdf(z.abs()));
    Ok(TestResult { statistic: w_plus, p_value: p.clamp(0.0, 1.0), test: TestKind::Wilcoxon })
}

/// Ranks 1..n with tied values sharing their average rank.
pub fn tie_averaged_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Σ over tie groups of (t³ − t), from the rank vector.
fn tie_correction(ranks: &[f64]) -> f64 {
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let mut total = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        total += t * t * t - t;
        i = j + 1;
    }
    total
}

/// Φ(x) via the Abramowitz–Stegun 7.1.26 erf approximation (|ε| < 1.5e-7).
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

/// Student-t CDF via the regularized incomplete beta:
/// F(t) = 1 − ½·I_{ν/(ν+t²)}(ν/2, ½) for t ≥ 0, mirrored for t < 0.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    debug_assert!(df > 0.0);
    if t == 0.0 {
        return 0.5;
    }
    let x = df / (df + t * t);
    let tail = 0.5 * reg_inc_beta(0.5 * df, 0.5, x);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Regularized incomplete beta I_x(a,b) by Lentz continued fractions.
fn reg_inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let front =
        (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    // Use the symmetry relation where the continued fraction converges fast.
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
            + b * (1.0 - x).ln()
            + a * x.ln())
        .exp()
            * beta_cf(b, a, 1.0 - x)
            / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 200;
    const EPS: f64 = 1e-14;
    const TINY: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Lanczos log-gamma (g = 7, n = 9), |ε| < 1e-13 on the positive axis.
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    debug_assert!(x > 0.0);
    let x = x - 1.0;
    let mut acc = COEFFS[0];
    for (i, &cf) in COEFFS.iter().enumerate().skip(1) {
        acc += cf / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
