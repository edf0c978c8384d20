use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{QualityError, QualityScore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankedFrame {
    pub frame_index: usize,
    pub score: QualityScore,
}

/// Frames ordered best-first for their metric, ties on ascending frame index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRanking {
    pub entries: Vec<RankedFrame>,
}

fn order(a: &RankedFrame, b: &RankedFrame, best_first: bool) -> Ordering {
    let by_value = a.score.value.total_cmp(&b.score.value);
    let by_value = if a.score.higher_is_better == best_first { by_value.reverse() } else { by_value };
    by_value.then(a.frame_index.cmp(&b.frame_index))
}

impl FrameRanking {
    /// Ranks every frame. All scores must share one metric and orientation.
    pub fn new(scores: &[(usize, QualityScore)]) -> Result<Self, QualityError> {
        if let Some((_, first)) = scores.first() {
            if let Some((_, other)) =
                scores.iter().find(|(_, s)| s.metric != first.metric || s.higher_is_better != first.higher_is_better)
            {
                return Err(QualityError::Contract(format!(
                    "mixed metrics in ranking: {:?} and {:?}",
                    first.metric, other.metric
                )));
            }
        }
        let mut seen = HashSet::new();
        for (idx, s) in scores {
            if !seen.insert(*idx) {
                return Err(QualityError::Contract(format!("duplicate frame index {idx}")));
            }
            if !s.value.is_finite() {
                return Err(QualityError::Contract(format!("frame {idx} has non-finite score")));
            }
        }
        let mut entries: Vec<RankedFrame> = scores
            .iter()
            .map(|(frame_index, score)| RankedFrame { frame_index: *frame_index, score: *score })
            .collect();
        entries.sort_by(|a, b| order(a, b, true));
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frame_indices(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frame_index).collect()
    }

    pub fn best(&self, k: usize) -> FrameRanking {
        Self { entries: self.entries.iter().take(k).copied().collect() }
    }

    /// The `k` lowest-quality frames, worst first.
    pub fn worst(&self, k: usize) -> FrameRanking {
        let mut entries = self.entries.clone();
        entries.sort_by(|a, b| order(a, b, false));
        entries.truncate(k);
        Self { entries }
    }
}

pub fn rank_frames(scores: &[(usize, QualityScore)], k: usize) -> Result<FrameRanking, QualityError> {
    if k == 0 {
        return Err(QualityError::Contract("k must be at least 1".into()));
    }
    Ok(FrameRanking::new(scores)?.best(k))
}
