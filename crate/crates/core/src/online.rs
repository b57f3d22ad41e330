//! Per-period online optimization.
//!
//! Each period the controller minimizes
//! `sum_v lambda_v (s_v + gamma_v) u_v / w_v + g_v(u_v, f)` over the ramp box
//! and the feasible flow set. A single bus is solved exactly by enumerating
//! the kinks of its convex piecewise-linear objective; networks go through an
//! epigraph LP over split charge/discharge variables and line flows.

use thiserror::Error;

use crate::cost::{CostModel, CostRealization, TermKind};
use crate::lp::{LinearProgram, LpError, RowKind};
use crate::network::{FlowVector, PowerNetwork, FLOW_TOL};
use crate::storage::{StorageState, ValidatedStorage};

/// Objective agreement required between the LP and the re-evaluated netted
/// solution, relative to `1 + |objective|`.
pub const OBJECTIVE_TOL: f64 = 1e-9;
/// Margin used by the threshold-structure diagnostic.
pub const THRESHOLD_TOL: f64 = 1e-9;
const FLAT_SLOPE_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("internal LP failure: {0}")]
    Lp(#[from] LpError),
    #[error("netting changed the objective from {lp} to {netted}")]
    Netting { lp: f64, netted: f64 },
    #[error("dispatched flow violates the network constraints")]
    FlowInfeasible,
    #[error("expected {expected} bus inputs, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// How to choose among equally good operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TieBreak {
    /// Smallest `|u|`.
    SmallestMagnitude,
    /// Largest `u`, i.e. store energy whenever it is free to do so.
    LargestCharge,
}

/// One bus's share of the online problem.
#[derive(Debug, Clone)]
pub struct BusInput<'a> {
    pub storage: &'a ValidatedStorage,
    pub cost: &'a CostModel,
    pub realization: CostRealization,
    /// Coefficient of `u` in the objective, e.g. `lambda (s + gamma) / w`.
    pub drift: f64,
    /// Extra bounds on `u` enforced as constraint rows, e.g. the next-level
    /// window `[s_min - lambda s, s_max - lambda s]` for the myopic policy.
    pub level_window: Option<(f64, f64)>,
    /// Forces `u = 0`.
    pub idle: bool,
}

impl<'a> BusInput<'a> {
    /// Input for the Lyapunov controller.
    pub fn lyapunov(
        storage: &'a ValidatedStorage,
        cost: &'a CostModel,
        realization: CostRealization,
        state: StorageState,
        gamma: f64,
        w: f64,
    ) -> Self {
        let drift = storage.lambda * (state.level + gamma) / w;
        Self { storage, cost, realization, drift, level_window: None, idle: false }
    }
}

#[derive(Debug, Clone)]
pub struct OnlineProblem<'a> {
    pub buses: Vec<BusInput<'a>>,
    pub network: &'a PowerNetwork,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OnlineSolution {
    pub u: Vec<f64>,
    pub f: FlowVector,
    /// Per-bus realized stage cost `g_v`.
    pub stage_costs: Vec<f64>,
    /// `sum_v drift_v u_v + g_v`.
    pub objective: f64,
}

fn objective_single(bus: &BusInput<'_>, u: f64, inflow: f64) -> f64 {
    bus.drift * u + bus.cost.evaluate(bus.storage, &bus.realization, u, inflow)
}

/// Exact minimizer of `drift * u + g(u)` over `[lo, hi]` with a fixed
/// network inflow.
pub fn solve_scalar(bus: &BusInput<'_>, lo: f64, hi: f64, inflow: f64, tie: TieBreak) -> f64 {
    let st = bus.storage;
    let mut cands = vec![lo, hi];
    if lo < 0.0 && hi > 0.0 {
        cands.push(0.0);
    }
    for (term, p) in bus.cost.terms().iter().zip(&bus.realization.prices) {
        if term.kind != TermKind::PositivePart || *p == 0.0 {
            continue;
        }
        let base = term.argument(st, bus.realization.period, bus.realization.delta, 0.0, inflow);
        // u > 0: base + charge_coeff * u = 0
        let a = term.charge_coeff(st);
        if a != 0.0 {
            let u = -base / a;
            if u > 0.0 && u > lo && u < hi {
                cands.push(u);
            }
        }
        // u < 0: base + discharge_coeff * (-u) = 0
        let b = term.discharge_coeff(st);
        if b != 0.0 {
            let u = base / b;
            if u < 0.0 && u > lo && u < hi {
                cands.push(u);
            }
        }
    }
    cands.sort_by(|a, b| a.total_cmp(b));
    cands.dedup();
    let values: Vec<f64> = cands.iter().map(|&u| objective_single(bus, u, inflow)).collect();
    let mut k = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[k] {
            k = i;
        }
    }
    // widen to the flat stretch around the minimizer, judged by the analytic
    // slope on each segment so that near-flat pieces are never merged
    let flat = |i: usize| slope_at(bus, 0.5 * (cands[i] + cands[i + 1]), inflow).abs() <= FLAT_SLOPE_TOL;
    let mut a = k;
    while a > 0 && flat(a - 1) {
        a -= 1;
    }
    let mut b = k;
    while b + 1 < cands.len() && flat(b) {
        b += 1;
    }
    match tie {
        TieBreak::SmallestMagnitude => 0.0f64.clamp(cands[a], cands[b]),
        TieBreak::LargestCharge => cands[b],
    }
}

/// Derivative of `drift * u + g(u)` at a point where `g` is differentiable.
fn slope_at(bus: &BusInput<'_>, u: f64, inflow: f64) -> f64 {
    let st = bus.storage;
    let mut slope = bus.drift;
    for (term, p) in bus.cost.terms().iter().zip(&bus.realization.prices) {
        let d = if u > 0.0 { term.charge_coeff(st) } else { -term.discharge_coeff(st) };
        let active = match term.kind {
            TermKind::Linear => true,
            TermKind::PositivePart => term.argument(st, bus.realization.period, bus.realization.delta, u, inflow) > 0.0,
        };
        if active {
            slope += p * d;
        }
    }
    slope
}

/// Exact single-bus online step (no network inflow), ties toward the
/// smallest `|u|`.
pub fn solve_single_bus(bus: &BusInput<'_>) -> f64 {
    let (lo, hi) = effective_range(bus);
    solve_scalar(bus, lo, hi, 0.0, TieBreak::SmallestMagnitude)
}

/// Ramp box intersected with the level window, or `{0}` when idle.
pub fn effective_range(bus: &BusInput<'_>) -> (f64, f64) {
    if bus.idle {
        return (0.0, 0.0);
    }
    let (mut lo, mut hi) = (bus.storage.u_min, bus.storage.u_max);
    if let Some((a, b)) = bus.level_window {
        lo = lo.max(a);
        hi = hi.min(b);
    }
    if lo > hi {
        // an empty window can only come from round-off at a bound
        let mid = 0.5 * (lo + hi);
        return (mid, mid);
    }
    (lo, hi)
}

struct BusVars {
    charge: usize,
    discharge: usize,
}

struct DispatchLp {
    lp: LinearProgram,
    buses: Vec<BusVars>,
    flows: Vec<usize>,
    constant: f64,
}

/// Builds the epigraph LP. Positive-part terms with a zero realized price
/// drop out; linear terms go straight into the objective.
fn build_lp(problem: &OnlineProblem<'_>) -> DispatchLp {
    let net = problem.network;
    let mut lp = LinearProgram::new();
    let mut buses = Vec::with_capacity(problem.buses.len());
    for bus in &problem.buses {
        let st = bus.storage;
        let (up_hi, dn_hi) = if bus.idle { (0.0, 0.0) } else { (st.u_max, -st.u_min) };
        let charge = lp.add_var(bus.drift, 0.0, up_hi);
        let discharge = lp.add_var(-bus.drift, 0.0, dn_hi);
        buses.push(BusVars { charge, discharge });
    }
    let flows: Vec<usize> = net.f_max().iter().map(|cap| lp.add_var(0.0, -cap, *cap)).collect();

    let mut constant = 0.0;
    for (v, bus) in problem.buses.iter().enumerate() {
        let st = bus.storage;
        let vars = &buses[v];
        if let Some((lo, hi)) = bus.level_window {
            let row = vec![(vars.charge, 1.0), (vars.discharge, -1.0)];
            lp.add_row(row.clone(), RowKind::Ge, lo);
            lp.add_row(row, RowKind::Le, hi);
        }
        for (term, &p) in bus.cost.terms().iter().zip(&bus.realization.prices) {
            if p == 0.0 {
                continue;
            }
            let a_up = term.charge_coeff(st);
            let a_dn = term.discharge_coeff(st);
            let base = term.argument(st, bus.realization.period, bus.realization.delta, 0.0, 0.0);
            let flow_coeffs: Vec<(usize, f64)> = net
                .edges()
                .iter()
                .zip(&flows)
                .filter_map(|(e, &fv)| {
                    let sign = if e.to == v {
                        1.0
                    } else if e.from == v {
                        -1.0
                    } else {
                        return None;
                    };
                    (term.alpha_flow != 0.0).then_some((fv, sign * term.alpha_flow))
                })
                .collect();
            match term.kind {
                TermKind::PositivePart => {
                    let z = lp.add_var(p, 0.0, f64::INFINITY);
                    // z >= base + a_up up + a_dn dn + flow terms
                    let mut row = vec![(z, 1.0), (vars.charge, -a_up), (vars.discharge, -a_dn)];
                    row.extend(flow_coeffs.iter().map(|&(fv, c)| (fv, -c)));
                    lp.add_row(row, RowKind::Ge, base);
                }
                TermKind::Linear => {
                    lp.cost[vars.charge] += p * a_up;
                    lp.cost[vars.discharge] += p * a_dn;
                    for &(fv, c) in &flow_coeffs {
                        lp.cost[fv] += p * c;
                    }
                    constant += p * base;
                }
            }
        }
    }
    for k_row in net.k_matrix() {
        let coeffs: Vec<(usize, f64)> = k_row.iter().zip(&flows).filter(|(k, _)| **k != 0.0).map(|(k, &fv)| (fv, *k)).collect();
        lp.add_row(coeffs, RowKind::Eq, 0.0);
    }
    DispatchLp { lp, buses, flows, constant }
}

/// Solves the period problem over storages and flows.
///
/// With a `tie` rule, a second LP picks among the points within a small
/// fraction of [`OBJECTIVE_TOL`] of the optimum. Without one the optimal
/// vertex of the first solve is kept. Charge and
/// discharge are then netted into `u = u⁺ - u⁻` and the objective is
/// re-evaluated on the true cost; a disagreement is an error.
pub fn solve_dispatch(problem: &OnlineProblem<'_>, tie: Option<TieBreak>) -> Result<OnlineSolution, SolveError> {
    let net = problem.network;
    if problem.buses.len() != net.bus_count() {
        return Err(SolveError::Dimension { expected: net.bus_count(), got: problem.buses.len() });
    }
    let DispatchLp { mut lp, buses, flows, constant } = build_lp(problem);
    let first = lp.solve()?;
    let lp_objective = first.objective + constant;

    let x = match tie {
        None => first.x,
        Some(tie) => {
            let optimum_row: Vec<(usize, f64)> =
                lp.cost.iter().enumerate().filter(|(_, c)| **c != 0.0).map(|(j, c)| (j, *c)).collect();
            let slack = OBJECTIVE_TOL * 0.1 * (1.0 + lp_objective.abs());
            lp.add_row(optimum_row, RowKind::Le, first.objective + slack);
            let mut secondary = vec![0.0; lp.num_vars()];
            for vars in &buses {
                let (c, d) = match tie {
                    TieBreak::SmallestMagnitude => (1.0, 1.0),
                    TieBreak::LargestCharge => (-1.0, 1.0),
                };
                secondary[vars.charge] = c;
                secondary[vars.discharge] = d;
            }
            lp.cost = secondary;
            // the tie-break pass can only fail through round-off; keep the first point then
            lp.solve().map(|s| s.x).unwrap_or(first.x)
        }
    };

    let u: Vec<f64> = buses.iter().map(|b| x[b.charge] - x[b.discharge]).collect();
    let f = FlowVector(flows.iter().map(|&j| x[j]).collect());
    if !net.flow_feasible(&f, FLOW_TOL) {
        return Err(SolveError::FlowInfeasible);
    }
    let mut objective = 0.0;
    let mut stage_costs = Vec::with_capacity(u.len());
    for (v, bus) in problem.buses.iter().enumerate() {
        let inflow = net.inflow_unchecked(&f.0, v);
        let g = bus.cost.evaluate(bus.storage, &bus.realization, u[v], inflow);
        stage_costs.push(g);
        objective += bus.drift * u[v] + g;
    }
    if (objective - lp_objective).abs() > OBJECTIVE_TOL * (1.0 + lp_objective.abs()) {
        return Err(SolveError::Netting { lp: lp_objective, netted: objective });
    }
    Ok(OnlineSolution { u, f, stage_costs, objective })
}

/// The Lyapunov controller's period problem over storages and flows.
pub fn solve_network(problem: &OnlineProblem<'_>) -> Result<OnlineSolution, SolveError> {
    solve_dispatch(problem, None)
}

/// Per-bus exact solve when no line can carry flow; otherwise the LP.
/// The scalar path resolves flat stretches with `tie`, defaulting to the
/// smallest `|u|`.
pub fn solve_period(problem: &OnlineProblem<'_>, tie: Option<TieBreak>) -> Result<OnlineSolution, SolveError> {
    let net = problem.network;
    if net.f_max().iter().any(|c| *c > 0.0) {
        return solve_dispatch(problem, tie);
    }
    if problem.buses.len() != net.bus_count() {
        return Err(SolveError::Dimension { expected: net.bus_count(), got: problem.buses.len() });
    }
    let mut u = Vec::with_capacity(problem.buses.len());
    let mut stage_costs = Vec::with_capacity(problem.buses.len());
    let mut objective = 0.0;
    for bus in &problem.buses {
        let (lo, hi) = effective_range(bus);
        let x = solve_scalar(bus, lo, hi, 0.0, tie.unwrap_or(TieBreak::SmallestMagnitude));
        let g = bus.cost.evaluate(bus.storage, &bus.realization, x, 0.0);
        objective += bus.drift * x + g;
        u.push(x);
        stage_costs.push(g);
    }
    Ok(OnlineSolution { u, f: FlowVector::zeros(net.edge_count()), stage_costs, objective })
}

/// Which threshold clause, if any, a solution breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdFlag {
    Ok,
    /// `lambda s~ >= -w d_lo` but `u != u_min`.
    ShouldDischarge,
    /// `lambda s~ <= -w d_hi` but `u != u_max`.
    ShouldCharge,
}

/// Checks the threshold structure of a Lyapunov step, in the normalized
/// form `lambda s~ / w` against `-d_lo` and `-d_hi`.
pub fn threshold_check(storage: &ValidatedStorage, drift: f64, d_lo: f64, d_hi: f64, u: f64) -> ThresholdFlag {
    if drift + d_lo >= THRESHOLD_TOL && (u - storage.u_min).abs() > THRESHOLD_TOL {
        return ThresholdFlag::ShouldDischarge;
    }
    if drift + d_hi <= -THRESHOLD_TOL && (u - storage.u_max).abs() > THRESHOLD_TOL {
        return ThresholdFlag::ShouldCharge;
    }
    ThresholdFlag::Ok
}
