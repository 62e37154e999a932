//! Spherical k-means: Lloyd iterations with cosine similarity, centroids
//! renormalized to the unit sphere after every update.
//!
//! Determinism contract: `fit` is bitwise deterministic for a given
//! `(data, k, iters, seed)` regardless of thread count. Assignment is
//! parallel over fixed-size row chunks and the centroid update walks rows
//! in index order, so no result depends on scheduling.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::embed::EmbeddingMatrix;
use crate::error::{format_err, io_err, Error, Result};
use crate::vecmath;

/// Iteration count used by the pipeline when none is configured.
pub const DEFAULT_ITERS: usize = 100;

pub const MODEL_MAGIC: [u8; 4] = *b"KMC1";
const MODEL_HEADER_LEN: usize = 36;

/// Rows per parallel work unit. Fixed so that chunk boundaries (and thus
/// f64 accumulation order) never depend on the thread count.
const ASSIGN_CHUNK: usize = 1024;

#[derive(Debug, Clone)]
pub struct KMeansModel {
    k: usize,
    dim: usize,
    centroids: Vec<f32>,
    iters_run: u32,
    seed: u64,
    objective: f64,
    objective_trace: Vec<f64>,
}

impl KMeansModel {
    /// Builds a model from raw unit-norm centroids. Each centroid norm must
    /// be within 1e-5 of 1.
    pub fn from_centroids(
        dim: usize,
        centroids: Vec<f32>,
        seed: u64,
        iters_run: u32,
        objective: f64,
    ) -> Result<Self> {
        if dim == 0 || centroids.is_empty() || !centroids.len().is_multiple_of(dim) {
            return Err(Error::Invalid(format!(
                "centroid payload of {} values is not a multiple of dim {dim}",
                centroids.len()
            )));
        }
        let k = centroids.len() / dim;
        for (j, c) in centroids.chunks_exact(dim).enumerate() {
            let norm = vecmath::norm(c);
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::Invalid(format!(
                    "centroid {j} has norm {norm}, expected 1 within 1e-5"
                )));
            }
        }
        Ok(Self {
            k,
            dim,
            centroids,
            iters_run,
            seed,
            objective,
            objective_trace: Vec::new(),
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, j: usize) -> &[f32] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }

    pub fn centroids(&self) -> &[f32] {
        &self.centroids
    }

    pub fn iters_run(&self) -> u32 {
        self.iters_run
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Mean cosine similarity of training points to their assigned centroid,
    /// measured against the final centroids.
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// Objective after each assignment pass of `fit`, in order. Empty for
    /// models loaded from disk.
    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }
}

/// Per-example nearest centroid and the cosine similarity to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub nearest: Vec<u32>,
    pub sim: Vec<f32>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.nearest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nearest.is_empty()
    }
}

/// Lloyd iterations on the sphere.
///
/// Initialization samples `k` distinct data rows (seeded). Each iteration
/// assigns every point to its max-cosine centroid (ties to the lower cluster
/// id), recomputes centroids as normalized member means, and re-seeds any
/// empty cluster from the globally worst-fit point. Returns after `iters`
/// iterations, or earlier once assignments stop changing.
pub fn fit(m: &EmbeddingMatrix, k: usize, iters: usize, seed: u64) -> Result<KMeansModel> {
    if !m.is_normalized() {
        return Err(Error::Invalid("fit requires normalized embeddings".into()));
    }
    if k == 0 || k > m.rows() {
        return Err(Error::Invalid(format!(
            "k must be in [1, rows]; got k = {k} with {} rows",
            m.rows()
        )));
    }
    if iters == 0 {
        return Err(Error::Invalid("iters must be at least 1".into()));
    }
    let dim = m.dim();

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, m.rows(), k);
    let mut centroids = Vec::with_capacity(k * dim);
    for idx in init.iter() {
        push_normalized(&mut centroids, m.row(idx));
    }

    let mut trace = Vec::with_capacity(iters + 1);
    let mut prev_nearest: Option<Vec<u32>> = None;
    let mut iters_run = 0u32;
    for _ in 0..iters {
        let (nearest, sims, objective) = assign_rows(m, &centroids, k);
        trace.push(objective);
        if prev_nearest.as_ref() == Some(&nearest) {
            return Ok(KMeansModel {
                k,
                dim,
                centroids,
                iters_run,
                seed,
                objective,
                objective_trace: trace,
            });
        }
        let counts = update_centroids(m, &nearest, k, &mut centroids);
        reseed_empty_clusters(m, &sims, &counts, &mut centroids);
        prev_nearest = Some(nearest);
        iters_run += 1;
    }
    // one extra pass so the reported objective matches the final centroids
    let (_, _, objective) = assign_rows(m, &centroids, k);
    trace.push(objective);
    Ok(KMeansModel {
        k,
        dim,
        centroids,
        iters_run,
        seed,
        objective,
        objective_trace: trace,
    })
}

/// Exact nearest-centroid assignment by cosine similarity; ties break toward
/// the lower cluster id.
pub fn assign(m: &EmbeddingMatrix, model: &KMeansModel) -> Result<Assignment> {
    if m.dim() != model.dim {
        return Err(Error::Invalid(format!(
            "dim mismatch: data has {}, model has {}",
            m.dim(),
            model.dim
        )));
    }
    if !m.is_normalized() {
        return Err(Error::Invalid(
            "assign requires normalized embeddings".into(),
        ));
    }
    let (nearest, sim, _) = assign_rows(m, &model.centroids, model.k);
    Ok(Assignment { nearest, sim })
}

/// For each centroid, the cosine similarities of its `l` nearest OTHER
/// centroids, in descending order.
pub fn centroid_neighbors(model: &KMeansModel, l: usize) -> Result<Vec<Vec<f64>>> {
    if l == 0 || l >= model.k {
        return Err(Error::Invalid(format!(
            "neighbor count must be in [1, k - 1]; got l = {l} with k = {}",
            model.k
        )));
    }
    Ok((0..model.k)
        .into_par_iter()
        .map(|i| {
            let ci = model.centroid(i);
            let mut sims: Vec<(f64, usize)> = (0..model.k)
                .filter(|&j| j != i)
                // + 0.0 folds -0.0 into 0.0 so ties order by id
                .map(|j| (vecmath::dot(ci, model.centroid(j)) + 0.0, j))
                .collect();
            sims.sort_unstable_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            sims.truncate(l);
            sims.into_iter().map(|(s, _)| s).collect()
        })
        .collect())
}

pub fn save_model(path: &Path, model: &KMeansModel) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |buf: &[u8]| w.write_all(buf).map_err(|e| io_err(path, e));
    emit(&MODEL_MAGIC)?;
    emit(&(model.k as u64).to_le_bytes())?;
    emit(&(model.dim as u32).to_le_bytes())?;
    emit(&model.seed.to_le_bytes())?;
    emit(&model.iters_run.to_le_bytes())?;
    emit(&model.objective.to_le_bytes())?;
    for v in &model.centroids {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_model(path: &Path) -> Result<KMeansModel> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < MODEL_HEADER_LEN {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!(
                "truncated header: need {MODEL_HEADER_LEN} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    if bytes[0..4] != MODEL_MAGIC {
        return Err(format_err(
            path,
            0,
            format!(
                "bad magic {:?}, expected \"KMC1\"",
                String::from_utf8_lossy(&bytes[0..4])
            ),
        ));
    }
    let k = u64::from_le_bytes(bytes[4..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let seed = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let iters_run = u32::from_le_bytes(bytes[24..28].try_into().unwrap());
    let objective = f64::from_le_bytes(bytes[28..36].try_into().unwrap());
    if k == 0 {
        return Err(format_err(path, 4, "cluster count is zero"));
    }
    if dim == 0 {
        return Err(format_err(path, 12, "dim is zero"));
    }
    let expected = k
        .checked_mul(dim as u64)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| format_err(path, 4, "k * dim overflows"))?;
    let payload = &bytes[MODEL_HEADER_LEN..];
    if payload.len() as u64 != expected {
        return Err(format_err(
            path,
            (MODEL_HEADER_LEN + payload.len().min(expected as usize)) as u64,
            format!(
                "centroid payload: expected {expected} bytes, found {}",
                payload.len()
            ),
        ));
    }
    let mut centroids = Vec::with_capacity((k * dim as u64) as usize);
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(
                path,
                (MODEL_HEADER_LEN + i * 4) as u64,
                format!("non-finite centroid value {v}"),
            ));
        }
        centroids.push(v);
    }
    let mut model =
        KMeansModel::from_centroids(dim as usize, centroids, seed, iters_run, objective)
            .map_err(|e| format_err(path, MODEL_HEADER_LEN as u64, e.to_string()))?;
    if model.k != k as usize {
        return Err(format_err(path, 4, "inconsistent cluster count"));
    }
    model.objective = objective;
    Ok(model)
}

fn push_normalized(out: &mut Vec<f32>, row: &[f32]) {
    let norm = vecmath::norm(row);
    debug_assert!(norm > 0.0);
    out.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
}

/// Assigns every row to its max-cosine centroid. Returns the assignment,
/// per-row similarity and the mean similarity (the fit objective).
fn assign_rows(m: &EmbeddingMatrix, centroids: &[f32], k: usize) -> (Vec<u32>, Vec<f32>, f64) {
    let dim = m.dim();
    let rows = m.rows();
    let mut nearest = vec![0u32; rows];
    let mut sim = vec![0.0f32; rows];
    let chunk_sums: Vec<f64> = m
        .data()
        .par_chunks(ASSIGN_CHUNK * dim)
        .zip(nearest.par_chunks_mut(ASSIGN_CHUNK))
        .zip(sim.par_chunks_mut(ASSIGN_CHUNK))
        .map(|((rows_chunk, nearest_chunk), sim_chunk)| {
            let mut sum = 0.0f64;
            for (i, row) in rows_chunk.chunks_exact(dim).enumerate() {
                let mut best_j = 0usize;
                let mut best_s = vecmath::dot(row, &centroids[0..dim]);
                for j in 1..k {
                    let s = vecmath::dot(row, &centroids[j * dim..(j + 1) * dim]);
                    if s > best_s {
                        best_s = s;
                        best_j = j;
                    }
                }
                nearest_chunk[i] = best_j as u32;
                sim_chunk[i] = best_s as f32;
                sum += best_s;
            }
            sum
        })
        .collect();
    let objective = vecmath::compensated_sum(chunk_sums) / rows as f64;
    (nearest, sim, objective)
}

/// Replaces each non-empty cluster's centroid with the normalized mean of
/// its members; returns the member counts. Clusters whose mean degenerates
/// to zero keep their previous centroid.
fn update_centroids(
    m: &EmbeddingMatrix,
    nearest: &[u32],
    k: usize,
    centroids: &mut [f32],
) -> Vec<usize> {
    let dim = m.dim();
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &c) in nearest.iter().enumerate() {
        let c = c as usize;
        counts[c] += 1;
        let row = m.row(i);
        let acc = &mut sums[c * dim..(c + 1) * dim];
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v as f64;
        }
    }
    for j in 0..k {
        if counts[j] == 0 {
            continue;
        }
        let mean = &sums[j * dim..(j + 1) * dim];
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-12 {
            for (c, v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(mean) {
                *c = (v / norm) as f32;
            }
        }
    }
    counts
}

/// Re-seeds every empty cluster from the point with the lowest similarity to
/// its assigned centroid (ties to the lower row index), one distinct point
/// per empty cluster in ascending cluster order.
fn reseed_empty_clusters(
    m: &EmbeddingMatrix,
    sims: &[f32],
    counts: &[usize],
    centroids: &mut [f32],
) {
    let empties: Vec<usize> = (0..counts.len()).filter(|&j| counts[j] == 0).collect();
    if empties.is_empty() {
        return;
    }
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_unstable_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
    let dim = m.dim();
    for (slot, &j) in empties.iter().enumerate() {
        let row = m.row(order[slot]);
        let norm = vecmath::norm(row);
        for (c, &v) in centroids[j * dim..(j + 1) * dim].iter_mut().zip(row) {
            *c = (v as f64 / norm) as f32;
        }
    }
}
