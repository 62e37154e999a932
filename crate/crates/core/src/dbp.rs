//! Density-based pruning: per-cluster distance statistics, a complexity-
//! driven sampling distribution, and least-prototypical selection.
//!
//! For each cluster the intra distance is the mean cosine distance of its
//! members to the centroid, the inter distance is the mean cosine distance
//! of the centroid to its `l` nearest other centroids, and the complexity is
//! their product. A temperature softmax over complexities gives per-cluster
//! sampling probabilities; multiplied by the target size `N` they become the
//! targets of the allocation program in [`crate::qp`]. Within each cluster
//! the members with the lowest similarity to the centroid survive.

use crate::embed::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::kmeans::{self, Assignment, KMeansModel};
use crate::mask::SelectionMask;
use crate::qp::{self, AllocationProblem};
use crate::vecmath;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbpConfig {
    /// Cluster count for this stage's k-means.
    pub k: usize,
    /// Nearest-centroid neighbors for the inter distance.
    pub l: usize,
    /// Softmax temperature.
    pub tau: f64,
    /// Number of examples to keep.
    pub n_keep: usize,
    /// Lower-bound lift in [0, 1]; 0 is pure complexity-driven allocation,
    /// 1 forces near-equal per-cluster counts.
    pub balance_ratio: f64,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl DbpConfig {
    pub fn validate(&self, rows: usize) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Invalid("dbp needs at least 2 clusters".into()));
        }
        if self.k > rows {
            return Err(Error::Invalid(format!(
                "k = {} exceeds the {rows} available rows",
                self.k
            )));
        }
        if self.l == 0 || self.l > self.k - 1 {
            return Err(Error::Invalid(format!(
                "l must be in [1, k - 1]; got l = {} with k = {}",
                self.l, self.k
            )));
        }
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(Error::Invalid(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.n_keep == 0 || self.n_keep > rows {
            return Err(Error::Invalid(format!(
                "n_keep must be in [1, rows]; got {} with {rows} rows",
                self.n_keep
            )));
        }
        if !(0.0..=1.0).contains(&self.balance_ratio) {
            return Err(Error::Invalid(format!(
                "balance ratio must be in [0, 1], got {}",
                self.balance_ratio
            )));
        }
        if self.kmeans_iters == 0 {
            return Err(Error::Invalid("kmeans_iters must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-cluster diagnostics for one pruning run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterStats {
    pub cluster_id: usize,
    /// Original member count M_j.
    pub members: usize,
    pub d_intra: f64,
    pub d_inter: f64,
    pub complexity: f64,
    /// Sampling probability P_j.
    pub prob: f64,
    /// Real target P_j * N.
    pub target_real: f64,
    pub alloc_real: f64,
    pub alloc_int: u64,
}

#[derive(Debug, Clone)]
pub struct DbpResult {
    /// Kept row ids, local to the matrix the stage ran on.
    pub mask: SelectionMask,
    /// One row per non-empty cluster, ascending cluster id.
    pub stats: Vec<ClusterStats>,
    pub lambda: f64,
    /// Neighbor count actually used (clamped when empty clusters shrink k).
    pub l_used: usize,
    pub tau: f64,
    /// Coefficient of variation of non-empty cluster sizes before pruning.
    pub cv_original: f64,
    /// Coefficient of variation of the kept per-cluster counts.
    pub cv_pruned: f64,
}

/// Mean cosine distance of each cluster's members to its centroid. Every
/// cluster in `0..k` must have at least one member.
pub fn compute_d_intra(assignment: &Assignment, k: usize) -> Result<Vec<f64>> {
    let mut sums = vec![0.0f64; k];
    let mut counts = vec![0usize; k];
    for (&c, &sim) in assignment.nearest.iter().zip(&assignment.sim) {
        let c = c as usize;
        if c >= k {
            return Err(Error::Invalid(format!(
                "assignment references cluster {c}, expected k = {k}"
            )));
        }
        sums[c] += (1.0 - sim as f64).clamp(0.0, 2.0);
        counts[c] += 1;
    }
    if let Some(j) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Invalid(format!(
            "cluster {j} is empty; drop empty clusters before computing stats"
        )));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s / c as f64)
        .collect())
}

/// Mean cosine distance of each centroid to its `l` nearest other centroids.
pub fn compute_d_inter(model: &KMeansModel, l: usize) -> Result<Vec<f64>> {
    let neighbors = kmeans::centroid_neighbors(model, l)?;
    Ok(neighbors
        .into_iter()
        .map(|sims| {
            let total: f64 = sims.iter().map(|&s| (1.0 - s).clamp(0.0, 2.0)).sum();
            total / l as f64
        })
        .collect())
}

/// Elementwise product of the two distance vectors.
pub fn complexity(d_inter: &[f64], d_intra: &[f64]) -> Result<Vec<f64>> {
    if d_inter.len() != d_intra.len() {
        return Err(Error::Invalid(format!(
            "length mismatch: {} inter vs {} intra",
            d_inter.len(),
            d_intra.len()
        )));
    }
    Ok(d_inter.iter().zip(d_intra).map(|(&a, &b)| a * b).collect())
}

/// Max-shifted softmax with temperature `tau`; the result sums to 1 within
/// 1e-12.
pub fn softmax_probs(c: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Invalid(format!("tau must be positive, got {tau}")));
    }
    if c.is_empty() {
        return Err(Error::Invalid("softmax over an empty vector".into()));
    }
    let max = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = c.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let total = vecmath::compensated_sum(exps.iter().copied());
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Real per-cluster targets `q_j = P_j * N`.
pub fn target_counts(probs: &[f64], n_keep: usize) -> Vec<f64> {
    probs.iter().map(|&p| p * n_keep as f64).collect()
}

/// Assembles the allocation program for integer counts: targets `q`, upper
/// bounds at the true member counts, and lower bounds lifted by the balance
/// ratio to `max(1, min(ub_j, round(beta * N / k)))`. A ratio of 0
/// reproduces the plain lower bound of 1 bit for bit.
pub fn build_allocation_problem(
    q: &[f64],
    member_counts: &[usize],
    n_keep: usize,
    balance_ratio: f64,
) -> Result<AllocationProblem> {
    if q.len() != member_counts.len() {
        return Err(Error::Invalid(format!(
            "{} targets for {} clusters",
            q.len(),
            member_counts.len()
        )));
    }
    if !(0.0..=1.0).contains(&balance_ratio) {
        return Err(Error::Invalid(format!(
            "balance ratio must be in [0, 1], got {balance_ratio}"
        )));
    }
    let k = member_counts.len();
    let lift = (balance_ratio * n_keep as f64 / k as f64).round();
    let ub: Vec<f64> = member_counts.iter().map(|&m| m as f64).collect();
    let lb: Vec<f64> = ub.iter().map(|&u| 1.0f64.max(lift.min(u))).collect();
    AllocationProblem::new(q.to_vec(), lb, ub, n_keep as f64)
}

/// Keeps the `x_int[j]` least prototypical members of each cluster: members
/// sorted ascending by similarity to the centroid (ties to the lower id),
/// first `x_int[j]` kept. Output ids ascending.
pub fn select_per_cluster(assignment: &Assignment, x_int: &[u64]) -> Result<SelectionMask> {
    let k = x_int.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignment.nearest.iter().enumerate() {
        let c = c as usize;
        if c >= k {
            return Err(Error::Invalid(format!(
                "assignment references cluster {c}, allocation has k = {k}"
            )));
        }
        members[c].push(i);
    }
    let mut kept = Vec::new();
    for (j, ids) in members.iter_mut().enumerate() {
        let want = x_int[j] as usize;
        if want == 0 || want > ids.len() {
            return Err(Error::Invalid(format!(
                "allocator bug: cluster {j} has {} members but x = {want}",
                ids.len()
            )));
        }
        ids.sort_unstable_by(|&a, &b| {
            assignment.sim[a]
                .total_cmp(&assignment.sim[b])
                .then(a.cmp(&b))
        });
        kept.extend_from_slice(&ids[..want]);
    }
    kept.sort_unstable();
    SelectionMask::new(kept)
}

/// Full pruning stage: cluster the input, score cluster complexity, allocate
/// counts with the quadratic program and keep the least prototypical members.
/// Clusters left empty by the final assignment are excluded from statistics
/// and allocation; `l` is clamped to the surviving cluster count minus one.
pub fn run_dbp(m: &EmbeddingMatrix, cfg: &DbpConfig) -> Result<DbpResult> {
    cfg.validate(m.rows())?;
    let model = kmeans::fit(m, cfg.k, cfg.kmeans_iters, cfg.seed)?;
    let assignment = kmeans::assign(m, &model)?;

    let mut counts = vec![0usize; cfg.k];
    for &c in &assignment.nearest {
        counts[c as usize] += 1;
    }
    let non_empty: Vec<usize> = (0..cfg.k).filter(|&j| counts[j] > 0).collect();
    let k_eff = non_empty.len();

    // compact clusters so stats and allocation see no empties
    let (assignment, model) = if k_eff == cfg.k {
        (assignment, model)
    } else {
        let mut remap = vec![u32::MAX; cfg.k];
        for (new, &old) in non_empty.iter().enumerate() {
            remap[old] = new as u32;
        }
        let nearest = assignment
            .nearest
            .iter()
            .map(|&c| remap[c as usize])
            .collect();
        let mut centroids = Vec::with_capacity(k_eff * m.dim());
        for &old in &non_empty {
            centroids.extend_from_slice(model.centroid(old));
        }
        let compact = KMeansModel::from_centroids(
            m.dim(),
            centroids,
            model.seed(),
            model.iters_run(),
            model.objective(),
        )?;
        (
            Assignment {
                nearest,
                sim: assignment.sim,
            },
            compact,
        )
    };
    let member_counts: Vec<usize> = non_empty.iter().map(|&j| counts[j]).collect();

    let d_intra = compute_d_intra(&assignment, k_eff)?;
    let (d_inter, l_used) = if k_eff == 1 {
        (vec![0.0], 0)
    } else {
        let l = cfg.l.min(k_eff - 1);
        (compute_d_inter(&model, l)?, l)
    };
    let c = complexity(&d_inter, &d_intra)?;
    let probs = softmax_probs(&c, cfg.tau)?;
    let q = target_counts(&probs, cfg.n_keep);

    let prob = build_allocation_problem(&q, &member_counts, cfg.n_keep, cfg.balance_ratio)?;
    let alloc = qp::allocate(&prob)?;
    let mask = select_per_cluster(&assignment, &alloc.x_int)?;

    let stats = non_empty
        .iter()
        .enumerate()
        .map(|(idx, &cluster_id)| ClusterStats {
            cluster_id,
            members: member_counts[idx],
            d_intra: d_intra[idx],
            d_inter: d_inter[idx],
            complexity: c[idx],
            prob: probs[idx],
            target_real: q[idx],
            alloc_real: alloc.x_real[idx],
            alloc_int: alloc.x_int[idx],
        })
        .collect();

    let original: Vec<f64> = member_counts.iter().map(|&v| v as f64).collect();
    let pruned: Vec<f64> = alloc.x_int.iter().map(|&v| v as f64).collect();
    Ok(DbpResult {
        mask,
        stats,
        lambda: alloc.lambda,
        l_used,
        tau: cfg.tau,
        cv_original: vecmath::coefficient_of_variation(&original),
        cv_pruned: vecmath::coefficient_of_variation(&pruned),
    })
}
