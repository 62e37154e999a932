//! Semantic deduplication within clusters.
//!
//! Members of a cluster are visited most-prototypical-first (descending
//! similarity to the centroid, ties to the lower original index). A member
//! is dropped iff its cosine similarity to some already-kept member exceeds
//! the threshold, so the first-visited member of each duplicate group is the
//! representative that survives. Duplicates are only searched within a
//! cluster.

use rayon::prelude::*;

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::kmeans::{Assignment, KMeansModel};
use crate::mask::SelectionMask;
use crate::vecmath;

/// Configuration for the dedup stage: its own clustering plus either a fixed
/// threshold or a target keep fraction (exactly one drives a run).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DedupConfig {
    pub k: usize,
    pub criterion: DedupCriterion,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DedupCriterion {
    Threshold(f64),
    TargetKeepFraction(f64),
}

/// Result of a threshold search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdSearch {
    pub threshold: f64,
    pub kept: usize,
    pub probes: u32,
}

/// Deduplicates one cluster given each member's similarity to the cluster
/// centroid. Returns the kept local indices, ascending.
pub fn dedup_cluster(
    cluster: &EmbeddingMatrix,
    sims_to_centroid: &[f32],
    threshold: f64,
) -> Result<Vec<usize>> {
    if sims_to_centroid.len() != cluster.rows() {
        return Err(Error::Invalid(format!(
            "{} similarities for {} rows",
            sims_to_centroid.len(),
            cluster.rows()
        )));
    }
    if !cluster.is_normalized() {
        return Err(Error::Invalid(
            "dedup requires normalized embeddings".into(),
        ));
    }
    let members: Vec<usize> = (0..cluster.rows()).collect();
    Ok(greedy_keep(
        cluster,
        &members,
        |local| sims_to_centroid[local],
        threshold,
    ))
}

/// Deduplicates the whole dataset cluster by cluster and merges the kept ids
/// into one ascending mask. Clusters are independent, so they run in
/// parallel; the merge sorts ids, making the output independent of
/// completion order. Empty clusters contribute nothing.
pub fn dedup_dataset(
    m: &EmbeddingMatrix,
    model: &KMeansModel,
    assignment: &Assignment,
    threshold: f64,
) -> Result<SelectionMask> {
    if assignment.len() != m.rows() {
        return Err(Error::Invalid(format!(
            "assignment covers {} rows, matrix has {}",
            assignment.len(),
            m.rows()
        )));
    }
    if m.dim() != model.dim() {
        return Err(Error::Invalid(format!(
            "dim mismatch: data has {}, model has {}",
            m.dim(),
            model.dim()
        )));
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); model.k()];
    for (i, &c) in assignment.nearest.iter().enumerate() {
        let c = c as usize;
        if c >= model.k() {
            return Err(Error::Invalid(format!(
                "assignment references cluster {c}, model has k = {}",
                model.k()
            )));
        }
        members[c].push(i);
    }

    let mut kept: Vec<usize> = members
        .par_iter()
        .flat_map_iter(|ids| {
            greedy_keep(m, ids, |local| assignment.sim[ids[local]], threshold)
                .into_iter()
                .map(move |local| ids[local])
        })
        .collect();
    kept.sort_unstable();
    SelectionMask::new(kept)
}

/// Bisects the threshold in [-1, 1] for a target keep fraction, exploiting
/// that the kept count is non-decreasing in the threshold. Returns the
/// smallest probed threshold whose keep fraction reaches the target. Stops
/// after 30 probes or once the kept count moves by less than `tol * rows`
/// between consecutive probes.
pub fn find_threshold(
    m: &EmbeddingMatrix,
    model: &KMeansModel,
    assignment: &Assignment,
    target_keep_fraction: f64,
    tol: f64,
) -> Result<ThresholdSearch> {
    if !(target_keep_fraction > 0.0 && target_keep_fraction <= 1.0) {
        return Err(Error::Invalid(format!(
            "target keep fraction must be in (0, 1], got {target_keep_fraction}"
        )));
    }
    let rows = m.rows();
    if target_keep_fraction >= 1.0 {
        // only a threshold of 1.0 is guaranteed to keep everything
        return Ok(ThresholdSearch {
            threshold: 1.0,
            kept: rows,
            probes: 0,
        });
    }

    let reaches = |kept: usize| kept as f64 >= target_keep_fraction * rows as f64 - 1e-9;

    let floor_kept = dedup_dataset(m, model, assignment, -1.0)?.len();
    if reaches(floor_kept) {
        let floor_fraction = floor_kept as f64 / rows as f64;
        if floor_fraction > target_keep_fraction + 1e-9 {
            return Err(Error::Invalid(format!(
                "target keep fraction {target_keep_fraction} unreachable: even threshold -1 \
                 keeps {floor_kept}/{rows} = {floor_fraction:.4}"
            )));
        }
        return Ok(ThresholdSearch {
            threshold: -1.0,
            kept: floor_kept,
            probes: 1,
        });
    }

    let mut lo = -1.0f64;
    let mut hi = 1.0f64;
    let mut kept_hi = rows; // threshold 1.0 keeps everything by construction
    let mut probes = 1u32;
    let mut prev_kept = floor_kept;
    let mut bracketed = false;
    for _ in 0..30 {
        let mid = 0.5 * (lo + hi);
        let kept = dedup_dataset(m, model, assignment, mid)?.len();
        probes += 1;
        if reaches(kept) {
            hi = mid;
            kept_hi = kept;
            bracketed = true;
        } else {
            lo = mid;
        }
        // early stop only once a real bracket exists, otherwise two probes
        // in a flat region of the count curve would end the search at 1.0
        let change = kept.abs_diff(prev_kept);
        if bracketed && (change as f64) < tol * rows as f64 {
            break;
        }
        prev_kept = kept;
    }
    Ok(ThresholdSearch {
        threshold: hi,
        kept: kept_hi,
        probes,
    })
}

/// Greedy pass over one cluster's members. `members` are ascending original
/// ids; `sim` maps a local index to the member's similarity to the centroid.
/// Returns kept local indices, ascending.
fn greedy_keep(
    m: &EmbeddingMatrix,
    members: &[usize],
    sim: impl Fn(usize) -> f32,
    threshold: f64,
) -> Vec<usize> {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_unstable_by(|&a, &b| sim(b).total_cmp(&sim(a)).then(a.cmp(&b)));

    let mut kept: Vec<usize> = Vec::new();
    for local in order {
        let row = m.row(members[local]);
        let duplicate = kept
            .iter()
            .any(|&other| vecmath::unit_cosine(row, m.row(members[other])) > threshold);
        if !duplicate {
            kept.push(local);
        }
    }
    kept.sort_unstable();
    kept
}
