//! Exhaustive grid search over small allocation problems.
//!
//! Used to cross-check [`super::solve`]. It shares nothing with the price
//! search beyond evaluating `ln U`: every grid vector with `sum r <= R` is
//! scored, the best one wins, and ties go to the lexicographically smallest
//! vector.

use super::{AllocationProblem, SolverError};

pub const MAX_ORACLE_APPS: usize = 3;

/// Best grid allocation for a problem with at most three apps.
///
/// Each app's rate ranges over multiples of `grid_step` up to
/// `min(effective cap, R)`. Returned rates are in problem order.
pub fn brute_force_oracle(
    problem: &AllocationProblem,
    grid_step: f64,
) -> Result<Vec<f64>, SolverError> {
    let n = problem.app_count();
    if n > MAX_ORACLE_APPS {
        return Err(SolverError::TooManyApps(n));
    }
    if !(grid_step > 0.0 && grid_step.is_finite()) {
        return Err(SolverError::Invalid {
            field: "grid_step".into(),
            reason: format!("must be finite and > 0, got {grid_step}"),
        });
    }
    let budget = grid_index(problem.capacity, grid_step);

    // per-app score table indexed by grid point
    let mut tables: Vec<Vec<f64>> = Vec::with_capacity(MAX_ORACLE_APPS);
    for (beta, app) in problem.apps() {
        let top = grid_index(app.effective_cap(), grid_step).min(budget);
        let mut t = Vec::with_capacity(top + 1);
        for i in 0..=top {
            t.push(if app.is_active() {
                beta * app.alpha * app.utility.ln_eval(i as f64 * grid_step)?
            } else {
                0.0
            });
        }
        tables.push(t);
    }
    // pad to three apps with a single zero-score point
    while tables.len() < MAX_ORACLE_APPS {
        tables.push(vec![0.0]);
    }

    // best[m] = (score, index) of the last app over indices 0..=m,
    // keeping the smallest index among equal scores
    let last = &tables[2];
    let mut best = Vec::with_capacity(budget + 1);
    let mut acc = (last[0], 0usize);
    for m in 0..=budget {
        if m < last.len() && last[m] > acc.0 {
            acc = (last[m], m);
        }
        best.push(acc);
    }

    let mut winner: Option<(f64, [usize; 3])> = None;
    for (i0, &s0) in tables[0].iter().enumerate() {
        for (i1, &s1) in tables[1].iter().enumerate() {
            let Some(rest) = budget.checked_sub(i0 + i1) else {
                break;
            };
            let (s2, i2) = best[rest];
            let score = s0 + s1 + s2;
            if winner.is_none_or(|(w, _)| score > w) {
                winner = Some((score, [i0, i1, i2]));
            }
        }
    }
    let (_, idx) = winner.expect("grid always contains the origin");
    Ok(idx[..n].iter().map(|&i| i as f64 * grid_step).collect())
}

fn grid_index(x: f64, step: f64) -> usize {
    // tolerate representation error when x is an exact multiple of step
    ((x / step) * (1.0 + 1e-12)).floor() as usize
}
