use image::{DynamicImage, RgbImage};

use super::QualityError;

/// Smallest edge accepted for a luminance plane.
pub const MIN_EDGE: usize = 8;

/// Single-channel luminance raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct LumaPlane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl LumaPlane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, QualityError> {
        if width < MIN_EDGE || height < MIN_EDGE {
            return Err(QualityError::Degenerate(format!(
                "plane {width}x{height} is smaller than {MIN_EDGE}x{MIN_EDGE}"
            )));
        }
        if data.len() != width * height {
            return Err(QualityError::Contract(format!(
                "plane data has {} values, expected {}",
                data.len(),
                width * height
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(QualityError::Contract(format!("luminance {v} outside [0, 1]")));
        }
        Ok(Self { width, height, data })
    }

    pub fn constant(width: usize, height: usize, value: f64) -> Result<Self, QualityError> {
        Self::new(width, height, vec![value; width * height])
    }

    /// Builds a plane from an 8-bit raster using Rec. 601 luma weights.
    pub fn from_rgb(img: &RgbImage) -> Result<Self, QualityError> {
        let data = img
            .pixels()
            .map(|p| {
                let [r, g, b] = p.0;
                (0.299 * f64::from(r) + 0.587 * f64::from(g) + 0.114 * f64::from(b)) / 255.0
            })
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::new(img.width() as usize, img.height() as usize, data)
    }

    pub fn from_dynamic(img: &DynamicImage) -> Result<Self, QualityError> {
        Self::from_rgb(&img.to_rgb8())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// 2x2 box average, dropping a trailing odd row or column.
    pub fn downsample2(&self) -> Result<Self, QualityError> {
        let w = self.width / 2;
        let h = self.height / 2;
        let mut out = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let s = self.get(2 * x, 2 * y)
                    + self.get(2 * x + 1, 2 * y)
                    + self.get(2 * x, 2 * y + 1)
                    + self.get(2 * x + 1, 2 * y + 1);
                out.push(s / 4.0);
            }
        }
        Self::new(w, h, out)
    }

    /// Luminance negation `v -> 1 - v`.
    pub fn inverted(&self) -> Self {
        Self { width: self.width, height: self.height, data: self.data.iter().map(|v| 1.0 - v).collect() }
    }
}
