//! Exact solver for the per-cluster allocation quadratic program
//!
//! ```text
//!     minimize    sum_j (x_j^2 - 2 q_j x_j)
//!     subject to  sum_j x_j = N,   lb_j <= x_j <= ub_j
//! ```
//!
//! With an identity Hessian the minimizer is the Euclidean projection of `q`
//! onto the box-intersected simplex. The projection is separable in a scalar
//! multiplier: `x_j(lambda) = clamp(q_j + lambda, lb_j, ub_j)`, and
//! `g(lambda) = sum_j x_j(lambda) - N` is piecewise linear and non-decreasing,
//! so a monotone bisection on `lambda` solves the program to machine
//! precision. An exhaustive 3^k active-set oracle and a KKT checker are
//! provided as independent cross-checks, plus a largest-remainder repair that
//! turns the real solution into integer counts without breaking the total or
//! the bounds.

use std::path::Path;

use crate::error::{format_err, io_err, Error, Result};
use crate::vecmath::compensated_sum;

const SUM_TOL: f64 = 1e-9;
const BRACKET_TOL: f64 = 1e-12;
const MAX_BISECT: usize = 256;

/// Per-cluster targets and bounds for one allocation run.
#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub q: Vec<f64>,
    pub lb: Vec<f64>,
    pub ub: Vec<f64>,
    pub n_total: f64,
}

impl AllocationProblem {
    /// Validates shapes, bound ordering and feasibility
    /// (`sum(lb) <= N <= sum(ub)`).
    pub fn new(q: Vec<f64>, lb: Vec<f64>, ub: Vec<f64>, n_total: f64) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::Invalid(
                "allocation problem needs at least one cluster".into(),
            ));
        }
        if q.len() != lb.len() || q.len() != ub.len() {
            return Err(Error::Invalid(format!(
                "inconsistent lengths: {} targets, {} lower bounds, {} upper bounds",
                q.len(),
                lb.len(),
                ub.len()
            )));
        }
        if !n_total.is_finite() {
            return Err(Error::Invalid("total N must be finite".into()));
        }
        for j in 0..q.len() {
            if !q[j].is_finite() || !lb[j].is_finite() || !ub[j].is_finite() {
                return Err(Error::Invalid(format!("non-finite entry at cluster {j}")));
            }
            if lb[j] < 0.0 {
                return Err(Error::Invalid(format!(
                    "lower bound {} of cluster {j} is negative",
                    lb[j]
                )));
            }
            if lb[j] > ub[j] {
                return Err(Error::Invalid(format!(
                    "cluster {j} has lb {} > ub {}",
                    lb[j], ub[j]
                )));
            }
        }
        let prob = Self { q, lb, ub, n_total };
        prob.check_feasible()?;
        Ok(prob)
    }

    pub fn k(&self) -> usize {
        self.q.len()
    }

    fn check_feasible(&self) -> Result<()> {
        let sum_lb = compensated_sum(self.lb.iter().copied());
        let sum_ub = compensated_sum(self.ub.iter().copied());
        if sum_lb > self.n_total || self.n_total > sum_ub {
            return Err(Error::Infeasible {
                sum_lb,
                n: self.n_total,
                sum_ub,
            });
        }
        Ok(())
    }
}

/// Real minimizer plus the equality multiplier and active bound sets.
#[derive(Debug, Clone)]
pub struct RealSolution {
    pub x: Vec<f64>,
    pub lambda: f64,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
}

/// Full allocation: real optimum and its integer repair.
#[derive(Debug, Clone)]
pub struct Allocation {
    pub x_real: Vec<f64>,
    pub x_int: Vec<u64>,
    pub lambda: f64,
    pub active_lower: Vec<usize>,
    pub active_upper: Vec<usize>,
}

/// Constraint gap `g(lambda) = sum_j clamp(q_j + lambda, lb_j, ub_j) - N`.
/// Non-decreasing and piecewise linear in `lambda`.
pub fn constraint_gap(prob: &AllocationProblem, lambda: f64) -> f64 {
    let sum = compensated_sum(
        prob.q
            .iter()
            .zip(&prob.lb)
            .zip(&prob.ub)
            .map(|((&q, &lb), &ub)| (q + lambda).clamp(lb, ub)),
    );
    sum - prob.n_total
}

/// Solves the allocation program by bisection on the multiplier.
///
/// Terminates once `|g(lambda)| < 1e-9` or the bracket is narrower than
/// 1e-12. The minimizer is unique (strictly convex objective).
pub fn solve(prob: &AllocationProblem) -> Result<RealSolution> {
    prob.check_feasible()?;
    let k = prob.k();

    // bracket: all coordinates at lb / all at ub
    let mut lo = (0..k)
        .map(|j| prob.lb[j] - prob.q[j])
        .fold(f64::INFINITY, f64::min);
    let mut hi = (0..k)
        .map(|j| prob.ub[j] - prob.q[j])
        .fold(f64::NEG_INFINITY, f64::max);
    debug_assert!(lo <= hi);

    let mut lambda = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECT {
        lambda = 0.5 * (lo + hi);
        let gap = constraint_gap(prob, lambda);
        if gap.abs() < SUM_TOL || (hi - lo) < BRACKET_TOL {
            break;
        }
        if gap < 0.0 {
            lo = lambda;
        } else {
            hi = lambda;
        }
    }

    let x: Vec<f64> = (0..k)
        .map(|j| (prob.q[j] + lambda).clamp(prob.lb[j], prob.ub[j]))
        .collect();
    let active_lower = (0..k).filter(|&j| x[j] == prob.lb[j]).collect();
    let active_upper = (0..k).filter(|&j| x[j] == prob.ub[j]).collect();
    Ok(RealSolution {
        x,
        lambda,
        active_lower,
        active_upper,
    })
}

/// Verifies the KKT conditions of the allocation program at `(x, lambda)`:
/// the total matches `N`, bounds hold, free coordinates sit at
/// `q_j + lambda`, and clamped coordinates have the right multiplier sign.
pub fn kkt_check(prob: &AllocationProblem, x: &[f64], lambda: f64, tol: f64) -> bool {
    if x.len() != prob.k() {
        return false;
    }
    let total = compensated_sum(x.iter().copied());
    if (total - prob.n_total).abs() > tol {
        return false;
    }
    for (j, &xj) in x.iter().enumerate() {
        let (qj, lbj, ubj) = (prob.q[j], prob.lb[j], prob.ub[j]);
        if xj < lbj - tol || xj > ubj + tol {
            return false;
        }
        let at_lb = xj <= lbj + tol;
        let at_ub = xj >= ubj - tol;
        let lb_ok = at_lb && qj + lambda <= xj + tol;
        let ub_ok = at_ub && qj + lambda >= xj - tol;
        let free_ok = !at_lb && !at_ub && (xj - qj - lambda).abs() <= tol;
        if !(lb_ok || ub_ok || free_ok) {
            return false;
        }
    }
    true
}

/// Brute-force reference solver: enumerates all 3^k active-set patterns
/// (free / at-lb / at-ub), solves each equality-constrained projection in
/// closed form, keeps candidates that are feasible with correct multiplier
/// signs, and returns the one with the lowest objective.
///
/// Only intended for small `k` (at most 12).
pub fn oracle_solve(prob: &AllocationProblem) -> Result<Vec<f64>> {
    const PATTERN_TOL: f64 = 1e-9;
    let k = prob.k();
    if k > 12 {
        return Err(Error::Invalid(format!(
            "oracle_solve supports k <= 12, got {k}"
        )));
    }
    prob.check_feasible()?;

    let objective = |x: &[f64]| -> f64 {
        compensated_sum(
            x.iter()
                .zip(&prob.q)
                .map(|(&xj, &qj)| (xj - qj) * (xj - qj)),
        )
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let patterns = 3usize.pow(k as u32);
    let mut x = vec![0.0f64; k];
    for pattern in 0..patterns {
        let mut code = pattern;
        let mut free = Vec::new();
        let mut pinned_sum = 0.0f64;
        let mut free_q_sum = 0.0f64;
        for (j, xj) in x.iter_mut().enumerate() {
            match code % 3 {
                0 => {
                    free.push(j);
                    free_q_sum += prob.q[j];
                }
                1 => {
                    *xj = prob.lb[j];
                    pinned_sum += prob.lb[j];
                }
                _ => {
                    *xj = prob.ub[j];
                    pinned_sum += prob.ub[j];
                }
            }
            code /= 3;
        }

        let lambda = if free.is_empty() {
            if (pinned_sum - prob.n_total).abs() > PATTERN_TOL {
                continue;
            }
            // any multiplier between the tightest sign constraints works
            let mut lambda_min = f64::NEG_INFINITY;
            let mut lambda_max = f64::INFINITY;
            let mut code = pattern;
            for j in 0..k {
                match code % 3 {
                    1 => lambda_max = lambda_max.min(prob.lb[j] - prob.q[j]),
                    2 => lambda_min = lambda_min.max(prob.ub[j] - prob.q[j]),
                    _ => {}
                }
                code /= 3;
            }
            if lambda_min > lambda_max + PATTERN_TOL {
                continue;
            }
            lambda_min.max(lambda_max.min(0.0))
        } else {
            (prob.n_total - pinned_sum - free_q_sum) / free.len() as f64
        };

        let mut ok = true;
        for &j in &free {
            x[j] = prob.q[j] + lambda;
            if x[j] < prob.lb[j] - PATTERN_TOL || x[j] > prob.ub[j] + PATTERN_TOL {
                ok = false;
                break;
            }
        }
        if ok {
            let mut code = pattern;
            for j in 0..k {
                match code % 3 {
                    1 if prob.q[j] + lambda > prob.lb[j] + PATTERN_TOL => ok = false,
                    2 if prob.q[j] + lambda < prob.ub[j] - PATTERN_TOL => ok = false,
                    _ => {}
                }
                code /= 3;
            }
        }
        if !ok {
            continue;
        }
        let obj = objective(&x);
        if best.as_ref().is_none_or(|(b, _)| obj < *b) {
            best = Some((obj, x.clone()));
        }
    }

    best.map(|(_, x)| x)
        .ok_or_else(|| Error::Invalid("oracle found no KKT point for a feasible problem".into()))
}

/// Largest-remainder integerization of a feasible real solution.
///
/// Starts from `floor(x)` clamped into the integer part of each box, then
/// hands out the remaining `N - sum(floor)` units one at a time to the
/// coordinates with the largest fractional part that are still strictly
/// below their upper bound (ties to the lower index). The result sums to `N`
/// exactly and respects the bounds.
pub fn integer_repair(x_real: &[f64], prob: &AllocationProblem) -> Result<Vec<u64>> {
    if x_real.len() != prob.k() {
        return Err(Error::Invalid(
            "solution length does not match the problem".into(),
        ));
    }
    let n = prob.n_total.round();
    if (prob.n_total - n).abs() > 1e-6 {
        return Err(Error::Invalid(format!(
            "integer repair needs an integral total, got N = {}",
            prob.n_total
        )));
    }
    let n = n as i64;

    let mut base = Vec::with_capacity(x_real.len());
    let mut frac = Vec::with_capacity(x_real.len());
    let mut hi = Vec::with_capacity(x_real.len());
    for (j, &xj) in x_real.iter().enumerate() {
        let lo_j = prob.lb[j].ceil() as i64;
        let hi_j = prob.ub[j].floor() as i64;
        if lo_j > hi_j {
            return Err(Error::Invalid(format!(
                "no integer between bounds [{}, {}] of cluster {j}",
                prob.lb[j], prob.ub[j]
            )));
        }
        let floor = xj.floor();
        base.push((floor as i64).clamp(lo_j, hi_j));
        frac.push(xj - floor);
        hi.push(hi_j);
    }

    let mut residual = n - base.iter().sum::<i64>();
    let mut order: Vec<usize> = (0..base.len()).collect();
    order.sort_unstable_by(|&a, &b| frac[b].total_cmp(&frac[a]).then(a.cmp(&b)));

    while residual > 0 {
        let mut progressed = false;
        for &j in &order {
            if residual == 0 {
                break;
            }
            if base[j] < hi[j] {
                base[j] += 1;
                residual -= 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Invalid(
                "cannot reach the requested total without violating upper bounds".into(),
            ));
        }
    }
    while residual < 0 {
        let mut progressed = false;
        for &j in order.iter().rev() {
            if residual == 0 {
                break;
            }
            let lo_j = prob.lb[j].ceil() as i64;
            if base[j] > lo_j {
                base[j] -= 1;
                residual += 1;
                progressed = true;
            }
        }
        if !progressed {
            return Err(Error::Invalid(
                "cannot reach the requested total without violating lower bounds".into(),
            ));
        }
    }

    Ok(base.into_iter().map(|v| v as u64).collect())
}

/// Convenience wrapper: real solve plus integer repair.
pub fn allocate(prob: &AllocationProblem) -> Result<Allocation> {
    let real = solve(prob)?;
    let x_int = integer_repair(&real.x, prob)?;
    Ok(Allocation {
        x_real: real.x,
        x_int,
        lambda: real.lambda,
        active_lower: real.active_lower,
        active_upper: real.active_upper,
    })
}

/// Reads a text problem file: first line `N`, then one `q lb ub` line per
/// cluster, whitespace-separated.
pub fn load_problem(path: &Path) -> Result<AllocationProblem> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut offset = 0u64;
    let mut n_total: Option<f64> = None;
    let mut q = Vec::new();
    let mut lb = Vec::new();
    let mut ub = Vec::new();
    for line in text.split_inclusive('\n') {
        let content = line.trim_end_matches('\n').trim();
        if !content.is_empty() {
            if n_total.is_none() {
                n_total = Some(content.parse().map_err(|_| {
                    format_err(
                        path,
                        offset,
                        format!("total line is not a number: {content:?}"),
                    )
                })?);
            } else {
                let fields: Vec<&str> = content.split_whitespace().collect();
                if fields.len() != 3 {
                    return Err(format_err(
                        path,
                        offset,
                        format!("expected 'q lb ub', got {} fields", fields.len()),
                    ));
                }
                let mut parsed = [0.0f64; 3];
                for (slot, f) in parsed.iter_mut().zip(&fields) {
                    *slot = f
                        .parse()
                        .map_err(|_| format_err(path, offset, format!("not a number: {f:?}")))?;
                }
                q.push(parsed[0]);
                lb.push(parsed[1]);
                ub.push(parsed[2]);
            }
        }
        offset += line.len() as u64;
    }
    let n_total = n_total.ok_or_else(|| format_err(path, 0, "missing total line"))?;
    AllocationProblem::new(q, lb, ub, n_total)
}

/// Writes the solved allocation as one `x_real x_int` line per cluster.
pub fn write_solution(path: &Path, alloc: &Allocation) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for (xr, xi) in alloc.x_real.iter().zip(&alloc.x_int) {
        writeln!(w, "{xr} {xi}").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
