//! Match-score filtering: keep examples at or above an absolute score, or
//! keep the top fraction by score.

use crate::embed::ScoreArray;
use crate::error::{Error, Result};
use crate::mask::SelectionMask;

/// Which filtering rule the score stage applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScoreFilter {
    AbsoluteThreshold(f64),
    TopFraction(f64),
}

/// Keeps every id whose score is at least `t`; only strictly lower scores
/// are dropped.
pub fn filter_by_threshold(scores: &ScoreArray, t: f64) -> SelectionMask {
    let ids = scores
        .as_slice()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s as f64 >= t)
        .map(|(i, _)| i)
        .collect();
    SelectionMask::new(ids).expect("enumerate yields ascending ids")
}

/// Keeps the `ceil(fraction * rows)` highest-scoring ids; ties at the cut
/// break toward the lower id.
pub fn filter_top_fraction(scores: &ScoreArray, fraction: f64) -> Result<SelectionMask> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let rows = scores.len();
    let keep = (fraction * rows as f64).ceil() as usize;
    let keep = keep.min(rows);
    let mut order: Vec<usize> = (0..rows).collect();
    order.sort_unstable_by(|&a, &b| {
        scores.as_slice()[b]
            .total_cmp(&scores.as_slice()[a])
            .then(a.cmp(&b))
    });
    let mut ids: Vec<usize> = order[..keep].to_vec();
    ids.sort_unstable();
    SelectionMask::new(ids)
}
