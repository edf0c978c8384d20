//! Moment-matching fits of generalized Gaussian (GGD) and asymmetric
//! generalized Gaussian (AGGD) distributions.

use std::sync::LazyLock;

use libm::lgamma;

use super::QualityError;

pub const ALPHA_MIN: f64 = 0.05;
pub const ALPHA_MAX: f64 = 20.0;
pub const ALPHA_STEP: f64 = 0.001;

/// `(alpha, rho(alpha))`, ascending in both columns.
struct RatioGrid {
    alphas: Vec<f64>,
    ratios: Vec<f64>,
}

static GRID: LazyLock<RatioGrid> = LazyLock::new(|| {
    let lo = (ALPHA_MIN / ALPHA_STEP).round() as u32;
    let hi = (ALPHA_MAX / ALPHA_STEP).round() as u32;
    let alphas: Vec<f64> = (lo..=hi).map(|i| f64::from(i) * ALPHA_STEP).collect();
    let ratios = alphas.iter().map(|&a| generalized_gaussian_ratio(a)).collect();
    RatioGrid { alphas, ratios }
});

/// `Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a))`, i.e. `E|x|^2 / E[x^2]` of a GGD.
pub fn generalized_gaussian_ratio(alpha: f64) -> f64 {
    (2.0 * lgamma(2.0 / alpha) - lgamma(1.0 / alpha) - lgamma(3.0 / alpha)).exp()
}

/// Nearest grid alpha whose ratio matches `target`; ties go to the smaller alpha.
pub fn invert_ratio(target: f64) -> f64 {
    let grid = &*GRID;
    let idx = grid.ratios.partition_point(|r| *r < target);
    if idx == 0 {
        return grid.alphas[0];
    }
    if idx == grid.ratios.len() {
        return grid.alphas[idx - 1];
    }
    let below = target - grid.ratios[idx - 1];
    let above = grid.ratios[idx] - target;
    if below <= above {
        grid.alphas[idx - 1]
    } else {
        grid.alphas[idx]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdFit {
    pub alpha: f64,
    pub sigma2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggdFit {
    pub alpha: f64,
    pub sigma_l: f64,
    pub sigma_r: f64,
    pub mean_offset: f64,
}

fn check_finite(samples: &[f64]) -> Result<(), QualityError> {
    if samples.is_empty() {
        return Err(QualityError::Degenerate("no samples".into()));
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(QualityError::Contract("non-finite sample".into()));
    }
    Ok(())
}

fn abs_and_square_means(samples: &[f64]) -> (f64, f64) {
    let n = samples.len() as f64;
    let mean_abs = samples.iter().map(|v| v.abs()).sum::<f64>() / n;
    let mean_sq = samples.iter().map(|v| v * v).sum::<f64>() / n;
    (mean_abs, mean_sq)
}

pub fn fit_ggd(samples: &[f64]) -> Result<GgdFit, QualityError> {
    check_finite(samples)?;
    let first = samples[0];
    if samples.iter().all(|v| *v == first) {
        return Err(QualityError::Degenerate("all samples identical".into()));
    }
    let (mean_abs, sigma2) = abs_and_square_means(samples);
    let alpha = invert_ratio(mean_abs * mean_abs / sigma2);
    Ok(GgdFit { alpha, sigma2 })
}

pub fn fit_aggd(samples: &[f64]) -> Result<AggdFit, QualityError> {
    check_finite(samples)?;
    let (mut left_sq, mut left_n, mut right_sq, mut right_n) = (0.0, 0usize, 0.0, 0usize);
    for &v in samples {
        if v < 0.0 {
            left_sq += v * v;
            left_n += 1;
        } else if v > 0.0 {
            right_sq += v * v;
            right_n += 1;
        }
    }
    if left_n == 0 || right_n == 0 {
        return Err(QualityError::Degenerate("asymmetric fit needs both negative and positive samples".into()));
    }
    let sigma_l = (left_sq / left_n as f64).sqrt();
    let sigma_r = (right_sq / right_n as f64).sqrt();
    let gamma = sigma_l / sigma_r;
    let (mean_abs, mean_sq) = abs_and_square_means(samples);
    let r = mean_abs * mean_abs / mean_sq;
    let r_norm = r * (gamma.powi(3) + 1.0) * (gamma + 1.0) / (gamma * gamma + 1.0).powi(2);
    let alpha = invert_ratio(r_norm);

    // Side scales of the density, then the distribution mean.
    let scale = (lgamma(1.0 / alpha) - lgamma(3.0 / alpha)).exp().sqrt();
    let (beta_l, beta_r) = (sigma_l * scale, sigma_r * scale);
    let mean_offset = (beta_r - beta_l) * (lgamma(2.0 / alpha) - lgamma(1.0 / alpha)).exp();
    Ok(AggdFit { alpha, sigma_l, sigma_r, mean_offset })
}
