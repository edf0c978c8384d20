//! Composite rasters handed to the VLM: plate crops stacked as rows, and a
//! query | red bar | reference pair.

use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::imageops::{self, FilterType};
use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const RED: Rgb<u8> = Rgb([255, 0, 0]);

#[derive(Debug, Error)]
pub enum CompositeError {
    #[error("composite needs at least one image")]
    Empty,
    #[error("invalid composite spec: {0}")]
    Spec(String),
    #[error("image {0} has zero area")]
    ZeroArea(String),
    #[error("png encoding failed: {0}")]
    Encode(#[from] image::ImageError),
    #[error("writing composite: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layout {
    RowStack,
    PairRedBar,
}

impl Layout {
    pub fn file_tag(self) -> &'static str {
        match self {
            Layout::RowStack => "row_stack",
            Layout::PairRedBar => "pair_red_bar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompositeSpec {
    pub layout: Layout,
    pub cell_height: u32,
    pub pair_height: u32,
    pub separator_px: u32,
    pub separator_rgb: [u8; 3],
}

impl CompositeSpec {
    pub fn row_stack() -> Self {
        Self { layout: Layout::RowStack, cell_height: 96, pair_height: 224, separator_px: 8, separator_rgb: [0, 0, 0] }
    }

    pub fn pair_red_bar() -> Self {
        Self { layout: Layout::PairRedBar, separator_rgb: RED.0, ..Self::row_stack() }
    }

    fn validate(&self, expected: Layout) -> Result<(), CompositeError> {
        if self.layout != expected {
            return Err(CompositeError::Spec(format!("layout {:?} used where {expected:?} is required", self.layout)));
        }
        if self.separator_px == 0 {
            return Err(CompositeError::Spec("separator_px must be at least 1".into()));
        }
        if self.layout == Layout::PairRedBar && self.separator_rgb != RED.0 {
            return Err(CompositeError::Spec("pair separator must be pure red".into()));
        }
        let h = match self.layout {
            Layout::RowStack => self.cell_height,
            Layout::PairRedBar => self.pair_height,
        };
        if h == 0 {
            return Err(CompositeError::Spec("target height must be at least 1".into()));
        }
        Ok(())
    }
}

/// An image tagged with the identifier recorded in composite provenance.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub id: String,
    pub image: RgbImage,
}

impl LabeledImage {
    pub fn new(id: impl Into<String>, image: RgbImage) -> Self {
        Self { id: id.into(), image }
    }
}

#[derive(Debug, Clone)]
pub struct CompositeImage {
    pub image: RgbImage,
    pub provenance: Vec<String>,
}

impl CompositeImage {
    pub fn to_png(&self) -> Result<Vec<u8>, CompositeError> {
        encode_png(&self.image)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), CompositeError> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

pub fn encode_png(image: &RgbImage) -> Result<Vec<u8>, CompositeError> {
    let mut buf = Cursor::new(Vec::new());
    PngEncoder::new(&mut buf).write_image(
        image.as_raw(),
        image.width(),
        image.height(),
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf.into_inner())
}

/// Width after aspect-preserving scaling to `height`, floored, at least 1.
pub fn scaled_width(width: u32, height: u32, target_height: u32) -> u32 {
    ((u64::from(width) * u64::from(target_height)) / u64::from(height)).max(1) as u32
}

/// Bilinear aspect-preserving resize; a no-op when the height already matches.
pub fn scale_to_height(img: &RgbImage, target_height: u32) -> RgbImage {
    if img.height() == target_height {
        return img.clone();
    }
    let w = scaled_width(img.width(), img.height(), target_height);
    imageops::resize(img, w, target_height, FilterType::Triangle)
}

fn check_area(items: &[&LabeledImage]) -> Result<(), CompositeError> {
    match items.iter().find(|c| c.image.width() == 0 || c.image.height() == 0) {
        Some(c) => Err(CompositeError::ZeroArea(c.id.clone())),
        None => Ok(()),
    }
}

/// Stacks crops top-to-bottom in the given order, left-aligned on white.
pub fn compose_rows(crops: &[LabeledImage], spec: &CompositeSpec) -> Result<CompositeImage, CompositeError> {
    spec.validate(Layout::RowStack)?;
    if crops.is_empty() {
        return Err(CompositeError::Empty);
    }
    check_area(&crops.iter().collect::<Vec<_>>())?;
    let rows: Vec<RgbImage> = crops.iter().map(|c| scale_to_height(&c.image, spec.cell_height)).collect();
    let n = rows.len() as u32;
    let width = rows.iter().map(RgbImage::width).max().unwrap_or(1);
    let height = n * spec.cell_height + (n - 1) * spec.separator_px;
    let mut canvas = RgbImage::from_pixel(width, height, WHITE);
    let sep = Rgb(spec.separator_rgb);
    let mut y = 0;
    for (i, row) in rows.iter().enumerate() {
        if i > 0 {
            for yy in y..y + spec.separator_px {
                for x in 0..width {
                    canvas.put_pixel(x, yy, sep);
                }
            }
            y += spec.separator_px;
        }
        imageops::replace(&mut canvas, row, 0, i64::from(y));
        y += spec.cell_height;
    }
    Ok(CompositeImage { image: canvas, provenance: crops.iter().map(|c| c.id.clone()).collect() })
}

/// Query on the left, a full-height red bar, reference on the right.
pub fn compose_pair(
    query: &LabeledImage,
    reference: &LabeledImage,
    spec: &CompositeSpec,
) -> Result<CompositeImage, CompositeError> {
    spec.validate(Layout::PairRedBar)?;
    check_area(&[query, reference])?;
    let left = scale_to_height(&query.image, spec.pair_height);
    let right = scale_to_height(&reference.image, spec.pair_height);
    let width = left.width() + spec.separator_px + right.width();
    let mut canvas = RgbImage::from_pixel(width, spec.pair_height, RED);
    imageops::replace(&mut canvas, &left, 0, 0);
    imageops::replace(&mut canvas, &right, i64::from(left.width() + spec.separator_px), 0);
    Ok(CompositeImage { image: canvas, provenance: vec![query.id.clone(), reference.id.clone()] })
}

/// Uniform grid filled row-major; each image is fitted into its cell
/// preserving aspect, centred on white.
pub fn compose_grid(
    images: &[LabeledImage],
    columns: u32,
    cell: (u32, u32),
    gap_px: u32,
) -> Result<CompositeImage, CompositeError> {
    if images.is_empty() {
        return Err(CompositeError::Empty);
    }
    if columns == 0 || cell.0 == 0 || cell.1 == 0 {
        return Err(CompositeError::Spec("grid needs positive columns and cell size".into()));
    }
    check_area(&images.iter().collect::<Vec<_>>())?;
    let n = images.len() as u32;
    let columns = columns.min(n);
    let rows = n.div_ceil(columns);
    let width = columns * cell.0 + (columns - 1) * gap_px;
    let height = rows * cell.1 + (rows - 1) * gap_px;
    let mut canvas = RgbImage::from_pixel(width, height, WHITE);
    for (i, item) in images.iter().enumerate() {
        let (col, row) = (i as u32 % columns, i as u32 / columns);
        let fitted = fit_into(&item.image, cell);
        let x0 = col * (cell.0 + gap_px) + (cell.0 - fitted.width()) / 2;
        let y0 = row * (cell.1 + gap_px) + (cell.1 - fitted.height()) / 2;
        imageops::replace(&mut canvas, &fitted, i64::from(x0), i64::from(y0));
    }
    Ok(CompositeImage { image: canvas, provenance: images.iter().map(|c| c.id.clone()).collect() })
}

/// Largest aspect-preserving resize that fits in `bounds`.
pub fn fit_into(img: &RgbImage, bounds: (u32, u32)) -> RgbImage {
    let (w, h) = (u64::from(img.width()), u64::from(img.height()));
    let (bw, bh) = (u64::from(bounds.0), u64::from(bounds.1));
    let (nw, nh) = if w * bh >= h * bw { (bw, (h * bw / w).max(1)) } else { ((w * bh / h).max(1), bh) };
    if (nw, nh) == (w, h) {
        return img.clone();
    }
    imageops::resize(img, nw as u32, nh as u32, FilterType::Triangle)
}
