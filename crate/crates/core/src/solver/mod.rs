//! Utility-proportional-fair rate allocation.
//!
//! Maximizes `sum_i beta_i sum_j alpha_ij ln U_ij(r_ij)` subject to
//! `sum r_ij <= R`, `0 <= r_ij <= cap_ij`, by dual decomposition: for a
//! shadow price `p` every application independently picks the rate where its
//! weighted marginal log-utility equals `p`, and a bisection on `p` clears the
//! capacity constraint. Because `ln U` is strictly concave, each best response
//! is unique and aggregate demand is nonincreasing in `p`.
//!
//! Both searches bisect geometrically (midpoint `sqrt(lo * hi)`): prices span
//! from `P_FLOOR` up to roughly `1 / R_LO`, rates from `R_LO` up to the cap.

pub mod oracle;

use std::collections::HashSet;

use thiserror::Error;

use crate::ids::{AppId, UeId};
use crate::utility::{UtilityError, UtilityFunction};

/// Smallest rate a best response can return for an active app.
pub const R_LO: f64 = 1e-9;
/// Lowest shadow price the search considers, per kbps.
pub const P_FLOOR: f64 = 1e-9;
/// Default capacity-residual tolerance, kbps.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
pub const MAX_PRICE_BISECTIONS: usize = 200;
pub const MAX_CEILING_DOUBLINGS: usize = 60;

/// Relative width at which the rate bisection stops.
const RATE_REL_TOL: f64 = 1e-11;
/// Relative width at which the price bisection gives up on hitting the tolerance.
const PRICE_REL_TOL: f64 = 1e-15;
const ALPHA_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("invalid {field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("shadow price must be finite and > 0, got {0}")]
    NonPositivePrice(f64),
    #[error("no application has a positive usage weight")]
    NoActiveApps,
    #[error("demand still exceeds capacity at price {0} after {MAX_CEILING_DOUBLINGS} doublings")]
    PriceCeiling(f64),
    #[error("oracle supports at most 3 applications, got {0}")]
    TooManyApps(usize),
    #[error(transparent)]
    Utility(#[from] UtilityError),
}

impl SolverError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

/// One application as seen by the allocator.
#[derive(Debug, Clone, PartialEq)]
pub struct AppDescriptor {
    pub app_id: AppId,
    pub ue_id: UeId,
    pub utility: UtilityFunction,
    /// Instantaneous usage share within the owning UE, in `[0, 1]`.
    pub alpha: f64,
    /// Upper bound on this app's allocation, kbps.
    pub rate_cap: f64,
}

impl AppDescriptor {
    /// Cap actually used by the allocator. A logarithmic utility is flat past
    /// `r_max`, so rates beyond it buy nothing.
    pub fn effective_cap(&self) -> f64 {
        match self.utility {
            UtilityFunction::Logarithmic { r_max, .. } => self.rate_cap.min(r_max),
            UtilityFunction::Sigmoidal { .. } => self.rate_cap,
        }
    }

    pub fn is_active(&self) -> bool {
        self.alpha > 0.0
    }
}

/// Rate cap an app gets when none is configured: `r_max` for logarithmic
/// utilities, `max(10 b, capacity)` for sigmoids (which have no natural one).
pub fn default_rate_cap(utility: &UtilityFunction, capacity: f64) -> f64 {
    match *utility {
        UtilityFunction::Sigmoidal { b, .. } => (10.0 * b).max(capacity),
        UtilityFunction::Logarithmic { r_max, .. } => r_max,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfile {
    pub ue_id: UeId,
    /// Subscriber priority weight.
    pub beta: f64,
    pub apps: Vec<AppDescriptor>,
}

impl UserProfile {
    pub fn validate(&self) -> Result<(), SolverError> {
        let ue = self.ue_id.as_str();
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(SolverError::invalid(
                format!("users.{ue}.beta"),
                format!("must be finite and > 0, got {}", self.beta),
            ));
        }
        let mut sum = 0.0;
        for app in &self.apps {
            let field = |name: &str| format!("users.{ue}.apps.{}.{name}", app.app_id);
            if app.ue_id != self.ue_id {
                return Err(SolverError::invalid(
                    field("ue_id"),
                    format!("app belongs to {}", app.ue_id),
                ));
            }
            if !(0.0..=1.0).contains(&app.alpha) {
                return Err(SolverError::invalid(
                    field("alpha"),
                    format!("must be in [0, 1], got {}", app.alpha),
                ));
            }
            if !(app.rate_cap > 0.0 && app.rate_cap.is_finite()) {
                return Err(SolverError::invalid(
                    field("rate_cap"),
                    format!("must be finite and > 0, got {}", app.rate_cap),
                ));
            }
            if let Some(v) = app.utility.validate().first() {
                return Err(SolverError::invalid(field("utility"), format!("{v:?}")));
            }
            sum += app.alpha;
        }
        if sum != 0.0 && (sum - 1.0).abs() > ALPHA_SUM_TOL {
            return Err(SolverError::invalid(
                format!("users.{ue}.alpha"),
                format!("usage shares must sum to 1 (or all be 0), got {sum}"),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationProblem {
    pub users: Vec<UserProfile>,
    /// Link capacity `R`, kbps.
    pub capacity: f64,
    /// Capacity-residual tolerance, kbps.
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AppRate {
    pub ue_id: UeId,
    pub app_id: AppId,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Per-app optimal rates, in problem order.
    pub rates: Vec<AppRate>,
    pub shadow_price: f64,
    /// Price bisections performed.
    pub iterations: usize,
    /// `|sum r - R|` when capacity binds, else 0.
    pub residual: f64,
    /// `sum beta alpha ln U(r)` over active apps.
    pub objective: f64,
    /// Whether the capacity constraint is active.
    pub binding: bool,
}

impl AllocationResult {
    pub fn total(&self) -> f64 {
        self.rates.iter().map(|r| r.rate).sum()
    }

    pub fn rate(&self, app: &AppId) -> Option<f64> {
        self.rates.iter().find(|r| &r.app_id == app).map(|r| r.rate)
    }
}

impl AllocationProblem {
    pub fn apps(&self) -> impl Iterator<Item = (f64, &AppDescriptor)> {
        self.users
            .iter()
            .flat_map(|u| u.apps.iter().map(move |a| (u.beta, a)))
    }

    pub fn app_count(&self) -> usize {
        self.users.iter().map(|u| u.apps.len()).sum()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.capacity > 0.0 && self.capacity.is_finite()) {
            return Err(SolverError::invalid(
                "network.capacity",
                format!("must be finite and > 0, got {}", self.capacity),
            ));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(SolverError::invalid(
                "network.delta",
                format!("must be finite and > 0, got {}", self.tolerance),
            ));
        }
        let mut ues = HashSet::new();
        let mut apps = HashSet::new();
        for user in &self.users {
            if !ues.insert(&user.ue_id) {
                return Err(SolverError::invalid(
                    format!("users.{}", user.ue_id),
                    "duplicate ue_id",
                ));
            }
            for app in &user.apps {
                if !apps.insert(&app.app_id) {
                    return Err(SolverError::invalid(
                        format!("users.{}.apps.{}", user.ue_id, app.app_id),
                        "duplicate app_id",
                    ));
                }
            }
            user.validate()?;
        }
        Ok(())
    }

    /// `sum beta alpha ln U(r)` for rates given in problem order; idle apps
    /// contribute nothing.
    pub fn objective(&self, rates: &[f64]) -> Result<f64, SolverError> {
        let mut total = 0.0;
        for ((beta, app), &r) in self.apps().zip(rates) {
            if app.is_active() {
                total += beta * app.alpha * app.utility.ln_eval(r)?;
            }
        }
        Ok(total)
    }

    fn demands(&self, price: f64) -> Result<Vec<f64>, SolverError> {
        self.apps()
            .map(|(beta, app)| best_response(app, beta, price))
            .collect()
    }
}

/// Rate maximizing `beta alpha ln U(r) - p r` over `[0, cap]`.
///
/// Idle apps get 0. Otherwise the answer is the root of
/// `marginal_log(r) = p / (beta alpha)`, clamped to `[R_LO, cap]`.
pub fn best_response(app: &AppDescriptor, beta: f64, price: f64) -> Result<f64, SolverError> {
    if !(price > 0.0 && price.is_finite()) {
        return Err(SolverError::NonPositivePrice(price));
    }
    if !app.is_active() {
        return Ok(0.0);
    }
    let cap = app.effective_cap();
    if cap <= R_LO {
        return Ok(cap);
    }
    let target = price / (beta * app.alpha);
    let u = &app.utility;
    if u.marginal_log(cap)? >= target {
        return Ok(cap);
    }
    if u.marginal_log(R_LO)? <= target {
        return Ok(R_LO);
    }
    // invariant: marginal(lo) > target > marginal(hi)
    let (mut lo, mut hi) = (R_LO, cap);
    for _ in 0..200 {
        if hi - lo <= RATE_REL_TOL * hi {
            break;
        }
        let mid = (lo * hi).sqrt();
        if u.marginal_log(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Total demand across all apps at shadow price `p`.
pub fn aggregate_demand(problem: &AllocationProblem, price: f64) -> Result<f64, SolverError> {
    Ok(problem.demands(price)?.iter().sum())
}

/// Solves the allocation problem.
///
/// If demand at the price floor already fits, those demands are returned at
/// `P_FLOOR`. Otherwise the price is bisected until demand is within the
/// tolerance of capacity or the bracket collapses. The remaining gap is then
/// closed by moving each app toward its demand on the other side of the
/// bracket, so a binding result fills the link to rounding error.
pub fn solve(problem: &AllocationProblem) -> Result<AllocationResult, SolverError> {
    problem.validate()?;
    if !problem.apps().any(|(_, a)| a.is_active()) {
        return Err(SolverError::NoActiveApps);
    }
    let capacity = problem.capacity;

    let floor_rates = problem.demands(P_FLOOR)?;
    if floor_rates.iter().sum::<f64>() <= capacity {
        return finish(problem, floor_rates, P_FLOOR, 0, false);
    }

    let mut ceiling = problem
        .apps()
        .filter(|(_, a)| a.is_active())
        .map(|(beta, a)| a.utility.marginal_log(R_LO).map(|m| beta * a.alpha * m))
        .try_fold(P_FLOOR, |acc, m| m.map(|m| acc.max(m)))?;
    let mut ceiling_rates = problem.demands(ceiling)?;
    let mut doublings = 0;
    while ceiling_rates.iter().sum::<f64>() > capacity {
        if doublings == MAX_CEILING_DOUBLINGS {
            return Err(SolverError::PriceCeiling(ceiling));
        }
        ceiling *= 2.0;
        doublings += 1;
        ceiling_rates = problem.demands(ceiling)?;
    }

    // lo: demand > R, hi: demand <= R
    let (mut lo, mut hi) = (P_FLOOR, ceiling);
    let mut lo_rates = floor_rates;
    let mut hi_rates = ceiling_rates;
    let mut iterations = 0;
    let mut price = None;
    while iterations < MAX_PRICE_BISECTIONS {
        iterations += 1;
        let mid = (lo * hi).sqrt();
        let rates = problem.demands(mid)?;
        let total: f64 = rates.iter().sum();
        let cleared = (total - capacity).abs() <= problem.tolerance;
        if total > capacity {
            lo = mid;
            lo_rates = rates;
        } else {
            hi = mid;
            hi_rates = rates;
        }
        if cleared {
            price = Some(mid);
            break;
        }
        if hi / lo - 1.0 < PRICE_REL_TOL {
            break;
        }
    }
    // Each app's demand is nonincreasing in price, so moving every app the
    // same fraction of the way from its hi-price demand to its lo-price
    // demand keeps it between two best responses. After a tolerance stop the
    // move is at most delta per app; after a collapse it bridges the jump a
    // sigmoid far below its knee makes across one ulp of price.
    let d_lo: f64 = lo_rates.iter().sum();
    let d_hi: f64 = hi_rates.iter().sum();
    let theta = ((capacity - d_hi) / (d_lo - d_hi)).clamp(0.0, 1.0);
    let rates = hi_rates
        .iter()
        .zip(&lo_rates)
        .map(|(h, l)| h + theta * (l - h))
        .collect::<Vec<_>>();
    let rates = if rates.iter().sum::<f64>() <= capacity + problem.tolerance {
        rates
    } else {
        hi_rates
    };
    finish(problem, rates, price.unwrap_or(hi), iterations, true)
}

fn finish(
    problem: &AllocationProblem,
    rates: Vec<f64>,
    price: f64,
    iterations: usize,
    binding: bool,
) -> Result<AllocationResult, SolverError> {
    let objective = problem.objective(&rates)?;
    let total: f64 = rates.iter().sum();
    let residual = if binding {
        (total - problem.capacity).abs()
    } else {
        0.0
    };
    let rates = problem
        .apps()
        .zip(rates)
        .map(|((_, app), rate)| AppRate {
            ue_id: app.ue_id.clone(),
            app_id: app.app_id.clone(),
            rate,
        })
        .collect();
    Ok(AllocationResult {
        rates,
        shadow_price: price,
        iterations,
        residual,
        objective,
        binding,
    })
}

/// One point of a capacity sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub capacity: f64,
    /// Per-app rates in problem order.
    pub rates: Vec<f64>,
    pub total: f64,
}

/// Solves the same user population at each capacity in `capacities`.
pub fn sweep(
    users: &[UserProfile],
    capacities: &[f64],
    tolerance: f64,
) -> Result<Vec<SweepRow>, SolverError> {
    if capacities.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(SolverError::invalid(
            "sweep",
            "capacities must be strictly ascending",
        ));
    }
    capacities
        .iter()
        .map(|&capacity| {
            let problem = AllocationProblem {
                users: users.to_vec(),
                capacity,
                tolerance,
            };
            let result = solve(&problem)?;
            Ok(SweepRow {
                capacity,
                total: result.total(),
                rates: result.rates.into_iter().map(|r| r.rate).collect(),
            })
        })
        .collect()
}

/// Worst-case deviation from the optimality conditions of a solution.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KktReport {
    /// Largest `|beta alpha marginal(r) / p - 1|` over interior apps.
    pub max_interior_deviation: f64,
    /// Capped apps whose weighted marginal is below the price.
    pub capped_violations: usize,
    /// Apps pinned near zero whose weighted marginal exceeds the price.
    pub floor_violations: usize,
    pub interior_apps: usize,
}

impl KktReport {
    pub fn holds(&self, rel_tol: f64) -> bool {
        self.max_interior_deviation <= rel_tol
            && self.capped_violations == 0
            && self.floor_violations == 0
    }
}

/// Checks stationarity of every active app against the result's price.
pub fn kkt_report(
    problem: &AllocationProblem,
    result: &AllocationResult,
) -> Result<KktReport, SolverError> {
    let p = result.shadow_price;
    let mut report = KktReport::default();
    for ((beta, app), r) in problem.apps().zip(&result.rates) {
        if !app.is_active() {
            continue;
        }
        let cap = app.effective_cap();
        let r = r.rate;
        let weighted = |x: f64| app.utility.marginal_log(x).map(|m| beta * app.alpha * m);
        if r > 2.0 * R_LO && r < cap * (1.0 - 1e-6) {
            let dev = (weighted(r)? / p - 1.0).abs();
            report.max_interior_deviation = report.max_interior_deviation.max(dev);
            report.interior_apps += 1;
        } else if r >= cap * (1.0 - 1e-6) {
            if weighted(cap)? < p * (1.0 - 1e-9) {
                report.capped_violations += 1;
            }
        } else if weighted(R_LO)? > p * (1.0 + 1e-9) {
            report.floor_violations += 1;
        }
    }
    Ok(report)
}
