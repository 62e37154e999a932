//! Synthetic test populations on the unit sphere.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::embed::{EmbeddingMatrix, ScoreArray};
use crate::error::{Error, Result};

/// Draws a mixture of spherical clusters: one random unit direction per
/// cluster, then `sizes[j]` points each sampled as
/// `direction + spreads[j] * gaussian`, renormalized to unit length.
///
/// Returns the (normalized) matrix plus the true cluster label of each row,
/// rows ordered cluster by cluster. Bitwise deterministic in
/// `(dim, sizes, spreads, seed)`.
pub fn gen_sphere_mixture(
    dim: usize,
    sizes: &[usize],
    spreads: &[f64],
    seed: u64,
) -> Result<(EmbeddingMatrix, Vec<u32>)> {
    if dim == 0 {
        return Err(Error::Invalid("dim must be at least 1".into()));
    }
    if sizes.is_empty() {
        return Err(Error::Invalid("at least one cluster is required".into()));
    }
    if sizes.len() != spreads.len() {
        return Err(Error::Invalid(format!(
            "{} sizes but {} spreads",
            sizes.len(),
            spreads.len()
        )));
    }
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Invalid(format!("cluster {j} has size 0")));
    }
    if let Some(j) = spreads.iter().position(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::Invalid(format!(
            "spread {} of cluster {j} outside [0, 1]",
            spreads[j]
        )));
    }

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let directions: Vec<Vec<f64>> = (0..sizes.len())
        .map(|_| random_unit(dim, &mut rng))
        .collect();

    let rows: usize = sizes.iter().sum();
    let mut data = Vec::with_capacity(rows * dim);
    let mut labels = Vec::with_capacity(rows);
    let mut point = vec![0.0f64; dim];
    for (j, (&size, &spread)) in sizes.iter().zip(spreads).enumerate() {
        for _ in 0..size {
            loop {
                for (p, d) in point.iter_mut().zip(&directions[j]) {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    *p = d + spread * noise;
                }
                let norm = point.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 1e-12 {
                    data.extend(point.iter().map(|v| (v / norm) as f32));
                    break;
                }
            }
            labels.push(j as u32);
        }
    }
    Ok((EmbeddingMatrix::from_unit_rows(rows, dim, data), labels))
}

/// Uniform scores in [0, 1), seeded independently of the mixture.
pub fn gen_scores(rows: usize, seed: u64) -> ScoreArray {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let uniform = Uniform::new(0.0f32, 1.0).expect("static range");
    let scores = (0..rows).map(|_| uniform.sample(&mut rng)).collect();
    ScoreArray::from_vec(scores).expect("uniform scores are finite")
}

fn random_unit(dim: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}
