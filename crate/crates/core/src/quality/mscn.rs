//! Mean-subtracted contrast-normalized (MSCN) luminance coefficients.

use std::sync::LazyLock;

use super::plane::LumaPlane;
use super::QualityError;

pub const WINDOW: usize = 7;
const RADIUS: isize = (WINDOW / 2) as isize;
pub const GAUSSIAN_SIGMA: f64 = 7.0 / 6.0;

/// Stabilizer for luminance on `[0, 1]` (1.0 on the 8-bit scale).
pub const DEFAULT_STABILIZER: f64 = 1.0 / 255.0;

/// Normalized 7x7 Gaussian weights, row-major.
pub static KERNEL: LazyLock<[f64; WINDOW * WINDOW]> = LazyLock::new(|| {
    let mut k = [0.0; WINDOW * WINDOW];
    let two_s2 = 2.0 * GAUSSIAN_SIGMA * GAUSSIAN_SIGMA;
    for dy in -RADIUS..=RADIUS {
        for dx in -RADIUS..=RADIUS {
            let r2 = (dx * dx + dy * dy) as f64;
            k[((dy + RADIUS) as usize) * WINDOW + (dx + RADIUS) as usize] = (-r2 / two_s2).exp();
        }
    }
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
});

#[derive(Debug, Clone, PartialEq)]
pub struct MscnField {
    pub width: usize,
    pub height: usize,
    pub coefficients: Vec<f64>,
}

impl MscnField {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.coefficients[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.coefficients.iter().sum::<f64>() / self.coefficients.len() as f64
    }
}

/// Half-sample symmetric extension: `-1 -> 0`, `n -> n - 1`.
#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// `(I - mu) / (sigma + stabilizer)` with Gaussian-weighted local moments.
///
/// Moments are accumulated from differences against the centre pixel so a
/// flat neighbourhood yields an exact zero numerator.
pub fn mscn(image: &LumaPlane, stabilizer: f64) -> Result<MscnField, QualityError> {
    if stabilizer <= 0.0 || !stabilizer.is_finite() {
        return Err(QualityError::Contract(format!("stabilizer must be positive, got {stabilizer}")));
    }
    let (w, h) = (image.width(), image.height());
    if w < WINDOW || h < WINDOW {
        return Err(QualityError::Degenerate(format!("image {w}x{h} smaller than the {WINDOW}x{WINDOW} window")));
    }
    let kernel = &*KERNEL;
    let mut out = Vec::with_capacity(w * h);
    let mut diffs = [0.0f64; WINDOW * WINDOW];
    for y in 0..h {
        for x in 0..w {
            let centre = image.get(x, y);
            let mut shift = 0.0;
            for dy in -RADIUS..=RADIUS {
                let yy = reflect(y as isize + dy, h);
                for dx in -RADIUS..=RADIUS {
                    let xx = reflect(x as isize + dx, w);
                    let k = ((dy + RADIUS) as usize) * WINDOW + (dx + RADIUS) as usize;
                    let d = image.get(xx, yy) - centre;
                    diffs[k] = d;
                    shift += kernel[k] * d;
                }
            }
            let var: f64 = diffs.iter().zip(kernel.iter()).map(|(d, k)| k * (d - shift) * (d - shift)).sum();
            out.push(-shift / (var.sqrt() + stabilizer));
        }
    }
    Ok(MscnField { width: w, height: h, coefficients: out })
}
