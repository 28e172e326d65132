//! Separable Gaussian blur with reflect padding.
//!
//! Used for the blurred-input baseline and for blur imputation; deliberately
//! outside the autodiff graph. The kernel is built and applied in f64 so
//! constant images come back bit-identical after the final f32 rounding.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Normalized 1-D Gaussian taps for offsets −r..=r with r = ⌈3σ⌉.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be positive, got {sigma}")));
    }
    let r = sigma.mul_add(3.0, 0.0).ceil() as i64;
    let mut taps: Vec<f64> = (-r..=r)
        .map(|k| (-(k as f64 * k as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= total;
    }
    Ok(taps)
}

/// Folds an out-of-range index back into [0, n) by reflection about the
/// borders (the edge sample is not repeated).
fn reflect(mut i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

fn blur_axis(src: &[f64], h: usize, w: usize, taps: &[f64], horizontal: bool) -> Vec<f64> {
    let r = (taps.len() / 2) as i64;
    let mut out = vec![0.0f64; src.len()];
    if horizontal {
        for row in 0..h {
            let line = &src[row * w..][..w];
            let out_line = &mut out[row * w..][..w];
            for (i, o) in out_line.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for (t, &tap) in taps.iter().enumerate() {
                    let j = reflect(i as i64 + t as i64 - r, w as i64);
                    acc += tap * line[j];
                }
                *o = acc;
            }
        }
    } else {
        for col in 0..w {
            for i in 0..h {
                let mut acc = 0.0f64;
                for (t, &tap) in taps.iter().enumerate() {
                    let j = reflect(i as i64 + t as i64 - r, h as i64);
                    acc += tap * src[j * w + col];
                }
                out[i * w + col] = acc;
            }
        }
    }
    out
}

/// Gaussian-blurs a [H,W] or [1,H,W] image, preserving its shape.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Result<Tensor> {
    let (h, w) = match image.shape() {
        [h, w] => (*h, *w),
        [1, h, w] => (*h, *w),
        s => return Err(Error::invalid(format!("blur expects [H,W] or [1,H,W], got {s:?}"))),
    };
    let taps = gaussian_kernel(sigma)?;
    let src: Vec<f64> = image.data().iter().map(|&v| v as f64).collect();
    let pass1 = blur_axis(&src, h, w, &taps, true);
    let pass2 = blur_axis(&pass1, h, w, &taps, false);
    Tensor::from_vec(
        image.shape().to_vec(),
        pass2.into_iter().map(|v| v as f32).collect(),
    )
}
