//! Controller parameter planning.
//!
//! For a bus with dissipation `lambda`, the shift `gamma` and weight `w`
//! must keep `gamma` inside `[ks_min(w), ks_max(w)]` with `0 < w <= w_max`
//! for the online controller to stay within the storage bounds. Among those,
//! the planner picks the pair minimizing the certified gap `M(gamma) / w`.
//!
//! Every matrix inequality of the semidefinite formulation is a 2x2 block
//! `[[N, a], [a, c]] >= 0`, equivalent by Schur complement to `N c >= a²`.
//! At optimum the auxiliary `N` is tight, so the program collapses to
//! minimizing the convex piecewise-quadratic `M(gamma)` for fixed `w`
//! (solved exactly here) followed by a one-dimensional search over `w`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::ValidatedStorage;

/// Cap on `w` when the cost has a constant slope (`d_lo == d_hi`), as a
/// multiple of the storage capacity.
pub const W_CAP_FACTOR: f64 = 1e6;

const OUTER_GRID: usize = 2000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("sub-derivative bounds out of order: d_lo = {d_lo} > d_hi = {d_hi}")]
    SlopeOrder { d_lo: f64, d_hi: f64 },
    #[error("weight w = {0} must be positive")]
    Weight(f64),
    #[error("empty parameter region: w_max = {0}")]
    EmptyRegion(f64),
    #[error("invalid return-time moments: mean = {mean}, second moment = {second}")]
    Moments { mean: f64, second: f64 },
    #[error("bus lists differ in length: {0} storages, {1} slope bounds")]
    Dimension(usize, usize),
}

/// Upper limit on the weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightLimit {
    Finite(f64),
    /// `d_lo == d_hi`: any positive weight keeps the region nonempty.
    Unbounded,
}

impl WeightLimit {
    pub fn value_or_cap(&self, storage: &ValidatedStorage) -> f64 {
        match self {
            WeightLimit::Finite(w) => *w,
            WeightLimit::Unbounded => W_CAP_FACTOR * storage.capacity(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaWRegion {
    pub ks_min: f64,
    pub ks_max: f64,
    pub w_max: WeightLimit,
}

fn pos(x: f64) -> f64 {
    x.max(0.0)
}

/// Slack terms shared by the region formulas.
fn region_offsets(st: &ValidatedStorage) -> (f64, f64) {
    let top = pos(st.u_max - (1.0 - st.lambda) * st.s_max);
    let bottom = pos((1.0 - st.lambda) * st.s_min - st.u_min);
    (top, bottom)
}

pub fn gamma_w_region(storage: &ValidatedStorage, d_lo: f64, d_hi: f64, w: f64) -> Result<GammaWRegion, PlanError> {
    if !(d_lo <= d_hi) {
        return Err(PlanError::SlopeOrder { d_lo, d_hi });
    }
    let st = storage;
    let (top, bottom) = region_offsets(st);
    let ks_min = (-w * d_lo + top) / st.lambda - st.s_max;
    let ks_max = (-w * d_hi - bottom) / st.lambda - st.s_min;
    let w_max = if d_hi == d_lo {
        WeightLimit::Unbounded
    } else {
        WeightLimit::Finite((st.lambda * st.capacity() - bottom - top) / (d_hi - d_lo))
    };
    Ok(GammaWRegion { ks_min, ks_max, w_max })
}

/// `M^u(gamma)`.
pub fn ramp_term(st: &ValidatedStorage, gamma: f64) -> f64 {
    let drift = (1.0 - st.lambda) * gamma;
    0.5 * (st.u_min + drift).powi(2).max((st.u_max + drift).powi(2))
}

/// `M^s(gamma)`, without the `lambda (1 - lambda)` factor.
pub fn level_term(st: &ValidatedStorage, gamma: f64) -> f64 {
    (st.s_min + gamma).powi(2).max((st.s_max + gamma).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParts {
    /// `M^u(gamma)`.
    pub m_u: f64,
    /// `lambda (1 - lambda) M^s(gamma)`.
    pub m_s: f64,
}

impl BoundParts {
    pub fn total(&self) -> f64 {
        self.m_u + self.m_s
    }
}

pub fn bound_parts(st: &ValidatedStorage, gamma: f64) -> BoundParts {
    BoundParts { m_u: ramp_term(st, gamma), m_s: st.lambda * (1.0 - st.lambda) * level_term(st, gamma) }
}

/// `M(gamma) / w` for i.i.d. disturbances.
pub fn suboptimality_bound(storage: &ValidatedStorage, gamma: f64, w: f64) -> Result<f64, PlanError> {
    if !(w > 0.0) {
        return Err(PlanError::Weight(w));
    }
    Ok(bound_parts(storage, gamma).total() / w)
}

/// Bound under a finite-state Markov disturbance, given the first two moments
/// of the return time to the reference state.
pub fn markov_bound(storage: &ValidatedStorage, gamma: f64, w: f64, mean: f64, second_moment: f64) -> Result<f64, PlanError> {
    if !(w > 0.0) {
        return Err(PlanError::Weight(w));
    }
    if !(mean >= 1.0 && second_moment >= mean * mean * (1.0 - 1e-12) && second_moment.is_finite()) {
        return Err(PlanError::Moments { mean, second: second_moment });
    }
    let parts = bound_parts(storage, gamma);
    // R * E[M_T] = M^u (2 E[T²] + E[T]) / E[T]
    let epoch = (2.0 * second_moment + mean) / mean;
    Ok((parts.m_s + epoch * parts.m_u) / w)
}

/// Exact minimizer of the convex `M(gamma)` over `[lo, hi]`.
///
/// With `a = (u_min + u_max) / 2`, `b = (s_min + s_max) / 2` both terms are
/// of the form `(|x - c| + r)²`, so `M` is a sum of two such functions
/// centered at `c_u = -a / (1 - lambda)` and `c_s = -b`; the unconstrained
/// minimizer lies between the centers and solves a linear equation there.
pub fn minimize_m(st: &ValidatedStorage, lo: f64, hi: f64) -> f64 {
    let lam = st.lambda;
    let k = 1.0 - lam;
    let c_s = -(st.s_min + st.s_max) / 2.0;
    let r_s = (st.s_max - st.s_min) / 2.0;
    let weight_s = lam * k;
    let unconstrained = if weight_s == 0.0 {
        // lambda == 1: M is flat in gamma
        0.5 * (lo + hi)
    } else {
        let c_u = -(st.u_min + st.u_max) / (2.0 * k);
        let r_u = (st.u_max - st.u_min) / 2.0;
        if c_u == c_s {
            c_s
        } else {
            // on the segment between the centers, with sg = sign(c_u - c_s):
            // 0.5 (k (c_u - g) sg + r_u)² + ws ((g - c_s) sg + r_s)², derivative zero at
            // -k (k (c_u - g) sg + r_u) + 2 ws ((g - c_s) sg + r_s) = 0
            let sg = (c_u - c_s).signum();
            let g = (k * k * c_u * sg + k * r_u + 2.0 * weight_s * c_s * sg - 2.0 * weight_s * r_s) / (sg * (k * k + 2.0 * weight_s));
            g.clamp(c_u.min(c_s), c_u.max(c_s))
        }
    };
    unconstrained.clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BusParams {
    pub gamma: f64,
    pub w: f64,
    pub d_lo: f64,
    pub d_hi: f64,
    pub ks_min: f64,
    pub ks_max: f64,
    pub w_max: WeightLimit,
    pub m_u: f64,
    pub m_s: f64,
    /// `(m_u + m_s) / w`.
    pub bound: f64,
    /// Set when `w_max` was unbounded and `w` was capped.
    pub w_capped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Independent `w_v` per bus.
    #[default]
    PerBus,
    /// One `w` shared by all buses.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerParams {
    pub mode: WeightMode,
    pub buses: Vec<BusParams>,
    /// `sum_v M_v(gamma_v) / w_v`.
    pub certified_bound: f64,
}

impl ControllerParams {
    pub fn recompute_bound(&self, storages: &[ValidatedStorage]) -> f64 {
        self.buses
            .iter()
            .zip(storages)
            .map(|(b, st)| bound_parts(st, b.gamma).total() / b.w)
            .sum()
    }
}

fn bus_params(st: &ValidatedStorage, d_lo: f64, d_hi: f64, gamma: f64, w: f64, w_max: WeightLimit, capped: bool) -> BusParams {
    let region = gamma_w_region(st, d_lo, d_hi, w).expect("slopes checked");
    let parts = bound_parts(st, gamma);
    BusParams {
        gamma,
        w,
        d_lo,
        d_hi,
        ks_min: region.ks_min,
        ks_max: region.ks_max,
        w_max,
        m_u: parts.m_u,
        m_s: parts.m_s,
        bound: parts.total() / w,
        w_capped: capped,
    }
}

/// Best `gamma` for a given `w`, and the resulting `M(gamma)`.
fn inner(st: &ValidatedStorage, d_lo: f64, d_hi: f64, w: f64) -> (f64, f64) {
    let r = gamma_w_region(st, d_lo, d_hi, w).expect("slopes checked");
    // at w = w_max the interval can be inverted by round-off
    let (lo, hi) = if r.ks_min <= r.ks_max { (r.ks_min, r.ks_max) } else { let mid = 0.5 * (r.ks_min + r.ks_max); (mid, mid) };
    let gamma = minimize_m(st, lo, hi);
    (gamma, bound_parts(st, gamma).total())
}

/// Minimizes `f` over `(0, w_max]`: a uniform grid followed by golden-section
/// refinement around the best grid point.
fn minimize_over_w(w_max: f64, f: impl Fn(f64) -> f64) -> f64 {
    let step = w_max / OUTER_GRID as f64;
    let mut best_i = OUTER_GRID;
    let mut best = f(w_max);
    for i in (1..OUTER_GRID).rev() {
        let v = f(step * i as f64);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let mut a = step * (best_i as f64 - 1.0).max(0.0);
    let mut b = (step * (best_i as f64 + 1.0)).min(w_max);
    if a <= 0.0 {
        a = step * 1e-3;
    }
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = b - phi * (b - a);
    let mut x2 = a + phi * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..100 {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - phi * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + phi * (b - a);
            f2 = f(x2);
        }
        if b - a <= 1e-14 * w_max {
            break;
        }
    }
    let mut best_w = step * best_i as f64;
    for (w, v) in [(x1, f1), (x2, f2)] {
        if v < best {
            best = v;
            best_w = w;
        }
    }
    best_w
}

/// Bound-minimizing parameters for one bus.
pub fn plan_bus(storage: &ValidatedStorage, d_lo: f64, d_hi: f64) -> Result<BusParams, PlanError> {
    let st = storage;
    let region = gamma_w_region(st, d_lo, d_hi, 0.0)?;
    let (w_max, capped) = match region.w_max {
        WeightLimit::Finite(w) => (w, false),
        WeightLimit::Unbounded => (W_CAP_FACTOR * st.capacity(), true),
    };
    if !(w_max > 0.0) {
        return Err(PlanError::EmptyRegion(w_max));
    }
    if st.lambda == 1.0 {
        // M does not depend on gamma; the largest weight is optimal and the
        // gamma interval collapses to a point when the weight limit is finite.
        let gamma = if capped {
            let r = gamma_w_region(st, d_lo, d_hi, w_max)?;
            0.5 * (r.ks_min + r.ks_max)
        } else {
            -(d_hi * (st.s_max - st.u_max) + d_lo * (st.u_min - st.s_min)) / (d_hi - d_lo)
        };
        return Ok(bus_params(st, d_lo, d_hi, gamma, w_max, region.w_max, capped));
    }
    let w = minimize_over_w(w_max, |w| inner(st, d_lo, d_hi, w).1 / w);
    let (gamma, _) = inner(st, d_lo, d_hi, w);
    Ok(bus_params(st, d_lo, d_hi, gamma, w, region.w_max, capped))
}

/// Plans every bus. In [`WeightMode::PerBus`] the objective separates and
/// each bus is planned on its own; in [`WeightMode::Shared`] one weight is
/// searched over `(0, min_v w_max_v]`.
pub fn plan_parameters(storages: &[ValidatedStorage], slopes: &[(f64, f64)], mode: WeightMode) -> Result<ControllerParams, PlanError> {
    if storages.len() != slopes.len() {
        return Err(PlanError::Dimension(storages.len(), slopes.len()));
    }
    let buses = match mode {
        WeightMode::PerBus => storages
            .iter()
            .zip(slopes)
            .map(|(st, &(lo, hi))| plan_bus(st, lo, hi))
            .collect::<Result<Vec<_>, _>>()?,
        WeightMode::Shared => {
            let mut w_max = f64::INFINITY;
            let mut limits = Vec::new();
            let mut capped = false;
            for (st, &(lo, hi)) in storages.iter().zip(slopes) {
                let r = gamma_w_region(st, lo, hi, 0.0)?;
                capped |= r.w_max == WeightLimit::Unbounded;
                w_max = w_max.min(r.w_max.value_or_cap(st));
                limits.push(r.w_max);
            }
            if !(w_max > 0.0) {
                return Err(PlanError::EmptyRegion(w_max));
            }
            let total = |w: f64| -> f64 {
                storages.iter().zip(slopes).map(|(st, &(lo, hi))| inner(st, lo, hi, w).1).sum::<f64>() / w
            };
            let all_lossless = storages.iter().all(|st| st.lambda == 1.0);
            let w = if all_lossless { w_max } else { minimize_over_w(w_max, total) };
            storages
                .iter()
                .zip(slopes)
                .zip(limits)
                .map(|((st, &(lo, hi)), lim)| {
                    let (gamma, _) = inner(st, lo, hi, w);
                    bus_params(st, lo, hi, gamma, w, lim, capped)
                })
                .collect()
        }
    };
    let certified_bound = buses.iter().map(|b| b.bound).sum();
    Ok(ControllerParams { mode, buses, certified_bound })
}
