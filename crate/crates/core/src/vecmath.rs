//! Small numeric kernels shared across the crate. All reductions over f32
//! data accumulate in f64.

/// Dot product with four independent accumulators so the f32 -> f64 widening
/// loop can pipeline.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] as f64 * b[j] as f64;
        acc[1] += a[j + 1] as f64 * b[j + 1] as f64;
        acc[2] += a[j + 2] as f64 * b[j + 2] as f64;
        acc[3] += a[j + 3] as f64 * b[j + 3] as f64;
    }
    let mut tail = 0.0f64;
    for j in chunks * 4..a.len() {
        tail += a[j] as f64 * b[j] as f64;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    dot(v, v).sqrt()
}

/// Cosine similarity of two unit-norm rows, clamped into [-1, 1] so that
/// rounding on near-duplicates cannot push it past the boundary.
pub(crate) fn unit_cosine(a: &[f32], b: &[f32]) -> f64 {
    dot(a, b).clamp(-1.0, 1.0)
}

/// Neumaier-compensated sum; error stays O(eps) independent of length.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Population coefficient of variation (std / mean) of non-negative counts.
pub(crate) fn coefficient_of_variation(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = compensated_sum(values.iter().copied()) / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = compensated_sum(values.iter().map(|v| (v - mean) * (v - mean))) / n;
    var.sqrt() / mean
}
