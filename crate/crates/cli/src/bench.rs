//! Timing table for the three hot operations: k-means fit, assignment and
//! the allocation solve.

use std::time::Instant;

use dbprune_core::dbp;
use dbprune_core::kmeans;
use dbprune_core::qp;
use dbprune_core::synth;

pub fn run(sizes: &[usize], dims: &[usize], ks: &[usize], iters: usize, seed: u64) {
    println!(
        "{:>9} {:>5} {:>6} {:>7} {:>12} {:>12} {:>12}",
        "rows", "dim", "k", "iters", "fit_ms", "assign_ms", "solve_us"
    );
    for &rows in sizes {
        for &dim in dims {
            for &k in ks {
                if k >= rows {
                    continue;
                }
                // four uneven clusters so fit has work to do
                let quarter = rows / 4;
                let cluster_sizes = [
                    rows - 3 * quarter + quarter / 2,
                    quarter + quarter / 4,
                    quarter + quarter / 4,
                    quarter,
                ];
                let spreads = [0.3, 0.25, 0.2, 0.35];
                let (m, _) =
                    synth::gen_sphere_mixture(dim, &cluster_sizes, &spreads, seed).expect("valid");

                let t0 = Instant::now();
                let model = kmeans::fit(&m, k, iters, seed).expect("fit");
                let fit_ms = t0.elapsed().as_millis();

                let t1 = Instant::now();
                let assignment = kmeans::assign(&m, &model).expect("assign");
                let assign_ms = t1.elapsed().as_millis();

                // an allocation problem shaped like this clustering
                let mut counts = vec![0usize; k];
                for &c in &assignment.nearest {
                    counts[c as usize] += 1;
                }
                let n_keep = (0.6 * rows as f64).round() as usize;
                let probs = vec![1.0 / k as f64; k];
                let q = dbp::target_counts(&probs, n_keep);
                let prob =
                    dbp::build_allocation_problem(&q, &counts, n_keep, 0.0).expect("feasible");
                let t2 = Instant::now();
                let _ = qp::allocate(&prob).expect("solve");
                let solve_us = t2.elapsed().as_micros();

                println!(
                    "{rows:>9} {dim:>5} {k:>6} {:>7} {fit_ms:>12} {assign_ms:>12} {solve_us:>12}",
                    model.iters_run()
                );
            }
        }
    }
}
