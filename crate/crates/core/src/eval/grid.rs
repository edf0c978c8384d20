use image::RgbImage;

use crate::compositing::{compose_grid, CompositeError, CompositeImage, LabeledImage};
use crate::quality::{FrameRanking, RankedFrame};

/// Cell size of audit grids.
pub const GRID_CELL: (u32, u32) = (160, 120);
const GRID_GAP: u32 = 4;

#[derive(Debug, Clone)]
pub struct ExtremesGrid {
    pub lowest: CompositeImage,
    pub highest: CompositeImage,
}

fn grid(entries: &[RankedFrame], frames: &[RgbImage]) -> Result<CompositeImage, CompositeError> {
    let cells: Vec<LabeledImage> = entries
        .iter()
        .map(|e| {
            let img = frames.get(e.frame_index).ok_or_else(|| {
                CompositeError::Spec(format!("ranking names frame {} of {}", e.frame_index, frames.len()))
            })?;
            Ok(LabeledImage::new(format!("frame {} score {:.4}", e.frame_index, e.score.value), img.clone()))
        })
        .collect::<Result<_, CompositeError>>()?;
    compose_grid(&cells, (cells.len() as u32).div_ceil(2), GRID_CELL, GRID_GAP)
}

/// The `n` lowest- and highest-quality frames by the ranking's metric, each
/// laid out two rows high. Short rankings use every frame.
pub fn quality_extremes_grid(
    ranking: &FrameRanking,
    frames: &[RgbImage],
    n: usize,
) -> Result<ExtremesGrid, CompositeError> {
    if n == 0 || ranking.is_empty() {
        return Err(CompositeError::Empty);
    }
    Ok(ExtremesGrid {
        lowest: grid(&ranking.worst(n).entries, frames)?,
        highest: grid(&ranking.best(n).entries, frames)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::{Metric, QualityScore};
    use image::Rgb;

    fn setup(count: usize) -> (FrameRanking, Vec<RgbImage>) {
        let frames: Vec<RgbImage> =
            (0..count).map(|i| RgbImage::from_pixel(40, 30, Rgb([i as u8 * 10, 0, 0]))).collect();
        let scores: Vec<(usize, QualityScore)> =
            (0..count).map(|i| (i, QualityScore::new(Metric::Brisque, i as f64))).collect();
        (FrameRanking::new(&scores).unwrap(), frames)
    }

    fn cells(c: &CompositeImage) -> (u32, u32) {
        (
            (c.image.width() + GRID_GAP) / (GRID_CELL.0 + GRID_GAP),
            (c.image.height() + GRID_GAP) / (GRID_CELL.1 + GRID_GAP),
        )
    }

    #[test]
    fn ten_of_twenty() {
        let (r, f) = setup(20);
        let g = quality_extremes_grid(&r, &f, 10).unwrap();
        assert_eq!(g.lowest.provenance.len(), 10);
        assert_eq!(cells(&g.lowest), (5, 2));
        assert!(g.lowest.provenance[0].starts_with("frame 19 "));
        assert!(g.highest.provenance[0].starts_with("frame 0 "));
    }

    #[test]
    fn boundaries() {
        let (r, f) = setup(20);
        let g = quality_extremes_grid(&r, &f, 1).unwrap();
        assert_eq!(g.highest.image.dimensions(), GRID_CELL);
        let (r, f) = setup(4);
        let g = quality_extremes_grid(&r, &f, 10).unwrap();
        assert_eq!((g.lowest.provenance.len(), cells(&g.lowest)), (4, (2, 2)));
        assert!(quality_extremes_grid(&r, &f, 0).is_err());
    }
}
