//! Closed-loop simulation, online auditing and summary statistics.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cost::{CostError, CostModel, CostRealization};
use crate::network::{PowerNetwork, FLOW_TOL};
use crate::online::{threshold_check, SolveError, ThresholdFlag};
use crate::planner::{markov_bound, plan_parameters, ControllerParams, PlanError, WeightMode};
use crate::policy::{act, Policy, PolicyKind, System};
use crate::stochastic::{return_time_moments, sample_prices, DisturbanceProcess, DisturbanceSampler, StochasticError};
use crate::storage::{step, StorageError, StorageSpec, StorageState, ValidatedStorage, LEVEL_TOL};

/// Batches used for batch-means standard errors.
pub const BATCHES: usize = 20;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("bus {bus}: {source}")]
    Storage { bus: usize, source: StorageError },
    #[error("bus {bus}: {source}")]
    Cost { bus: usize, source: CostError },
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Stochastic(#[from] StochasticError),
    #[error("period {t}: {source}")]
    Solve { t: u64, source: SolveError },
    #[error("period {t}, bus {bus}: {source}\nstate: {dump}")]
    Violation { t: u64, bus: usize, source: StorageError, dump: String },
    #[error("period {t}: dispatched flow is infeasible\nstate: {dump}")]
    FlowViolation { t: u64, dump: String },
    #[error("bus {bus}: initial level {level} outside [{s_min}, {s_max}]")]
    InitialLevel { bus: usize, level: f64, s_min: f64, s_max: f64 },
    #[error("{0}")]
    Dimension(String),
    #[error("summary needs {0} traces")]
    MissingPolicy(&'static str),
}

/// Capacity sweep: every bus gets `s_max` and ramps `±u_ratio * s_max`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sweep {
    pub s_max: Vec<f64>,
    pub u_ratio: f64,
}

/// A fully validated simulation setup.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub storages: Vec<ValidatedStorage>,
    pub costs: Vec<CostModel>,
    pub initial_levels: Vec<f64>,
    pub network: PowerNetwork,
    pub disturbance: DisturbanceProcess,
    pub horizon: u64,
    pub seed: u64,
    pub warmup: u64,
    pub weight_mode: WeightMode,
    pub sweep: Option<Sweep>,
}

impl Scenario {
    /// Checks cross-component consistency: one storage, cost model and
    /// initial level per bus, convex costs, and a valid disturbance.
    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.network.bus_count();
        for (what, len) in [("storages", self.storages.len()), ("cost models", self.costs.len()), ("initial levels", self.initial_levels.len())] {
            if len != n {
                return Err(SimError::Dimension(format!("{len} {what} for {n} buses")));
            }
        }
        for (bus, (st, cost)) in self.storages.iter().zip(&self.costs).enumerate() {
            cost.check_convexity(st).map_err(|source| SimError::Cost { bus, source })?;
            let level = self.initial_levels[bus];
            if !(level >= st.s_min && level <= st.s_max) {
                return Err(SimError::InitialLevel { bus, level, s_min: st.s_min, s_max: st.s_max });
            }
        }
        self.disturbance.validate(n)?;
        Ok(())
    }

    pub fn system(&self) -> System<'_> {
        System { storages: &self.storages, costs: &self.costs, network: &self.network }
    }

    pub fn slopes(&self) -> Result<Vec<(f64, f64)>, SimError> {
        self.storages
            .iter()
            .zip(&self.costs)
            .enumerate()
            .map(|(bus, (st, c))| c.subderivative_bounds(st).map_err(|source| SimError::Cost { bus, source }))
            .collect()
    }

    pub fn plan(&self) -> Result<ControllerParams, SimError> {
        Ok(plan_parameters(&self.storages, &self.slopes()?, self.weight_mode)?)
    }

    /// Certified bound on the excess average cost: `sum_v M_v / w_v` for
    /// i.i.d. disturbances, the return-time version for a Markov chain.
    pub fn certified_bound(&self, params: &ControllerParams) -> Result<f64, SimError> {
        match &self.disturbance {
            DisturbanceProcess::Markov { chain, .. } => {
                let (mean, second) = return_time_moments(chain, chain.initial_state)?;
                let mut total = 0.0;
                for (st, p) in self.storages.iter().zip(&params.buses) {
                    total += markov_bound(st, p.gamma, p.w, mean, second)?;
                }
                Ok(total)
            }
            _ => Ok(params.certified_bound),
        }
    }

    /// Total storage capacity `sum_v s_max`.
    pub fn total_capacity(&self) -> f64 {
        self.storages.iter().map(|s| s.s_max).sum()
    }

    /// Copy with every bus resized to `s_max` and ramps `±u_ratio * s_max`.
    /// Initial levels are clipped into the new range.
    pub fn resized(&self, s_max: f64, u_ratio: f64) -> Result<Scenario, SimError> {
        let mut out = self.clone();
        out.sweep = None;
        for (bus, st) in self.storages.iter().enumerate() {
            let spec = StorageSpec { s_max, u_min: -u_ratio * s_max, u_max: u_ratio * s_max, ..*st.spec() };
            out.storages[bus] = spec.validate().map_err(|source| SimError::Storage { bus, source })?;
            out.initial_levels[bus] = self.initial_levels[bus].clamp(st.s_min, s_max.max(st.s_min));
        }
        out.validate()?;
        Ok(out)
    }

    /// The sweep points, or the scenario itself when it has no sweep.
    pub fn sweep_points(&self) -> Result<Vec<Scenario>, SimError> {
        match &self.sweep {
            None => Ok(vec![self.clone()]),
            Some(sw) => sw.s_max.iter().map(|&s| self.resized(s, sw.u_ratio)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PeriodRecord {
    pub t: u64,
    /// Levels at the start of the period.
    pub levels: Vec<f64>,
    pub u: Vec<f64>,
    pub flows: Vec<f64>,
    pub costs: Vec<f64>,
    pub flags: Vec<ThresholdFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationTrace {
    pub policy: PolicyKind,
    pub seed: u64,
    pub records: Vec<PeriodRecord>,
}

impl SimulationTrace {
    /// System cost `sum_v g_v` per period.
    pub fn total_costs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.costs.iter().sum()).collect()
    }

    pub fn cumulative_average(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.total_costs()
            .into_iter()
            .enumerate()
            .map(|(i, c)| {
                acc += c;
                acc / (i + 1) as f64
            })
            .collect()
    }

    pub fn flag_count(&self) -> usize {
        self.records.iter().flat_map(|r| &r.flags).filter(|f| **f != ThresholdFlag::Ok).count()
    }
}

fn dump(t: u64, states: &[StorageState], u: &[f64], flows: &[f64], deltas: &[f64]) -> String {
    let levels: Vec<f64> = states.iter().map(|s| s.level).collect();
    format!("t={t} levels={levels:?} u={u:?} flows={flows:?} deltas={deltas:?}")
}

/// Runs `policy` for `scenario.horizon` periods with disturbances drawn from `seed`.
pub fn run(scenario: &Scenario, policy: &Policy, seed: u64) -> Result<SimulationTrace, SimError> {
    let n = scenario.network.bus_count();
    let sys = scenario.system();
    if let Policy::Lyapunov(params) = policy {
        if params.buses.len() != n {
            return Err(SimError::Dimension(format!("{} controller entries for {n} buses", params.buses.len())));
        }
    }
    let mut sampler = DisturbanceSampler::new(scenario.disturbance.clone(), seed, n)?;
    let mut states: Vec<StorageState> = scenario.initial_levels.iter().map(|&level| StorageState { level }).collect();
    let mut records = Vec::with_capacity(scenario.horizon as usize);
    for t in 1..=scenario.horizon {
        let deltas = sampler.next_deltas();
        let realizations: Vec<CostRealization> = (0..n)
            .map(|v| CostRealization { period: t, delta: deltas[v], prices: sample_prices(&scenario.costs[v], seed, v, t) })
            .collect();
        let sol = act(policy, sys, &states, realizations).map_err(|source| SimError::Solve { t, source })?;
        let flags = match policy {
            Policy::Lyapunov(params) => (0..n)
                .map(|v| {
                    let st = &scenario.storages[v];
                    let p = &params.buses[v];
                    let drift = st.lambda * (states[v].level + p.gamma) / p.w;
                    threshold_check(st, drift, p.d_lo, p.d_hi, sol.u[v])
                })
                .collect(),
            _ => vec![ThresholdFlag::Ok; n],
        };
        if !scenario.network.flow_feasible(&sol.f, FLOW_TOL) {
            return Err(SimError::FlowViolation { t, dump: dump(t, &states, &sol.u, &sol.f.0, &deltas) });
        }
        let levels: Vec<f64> = states.iter().map(|s| s.level).collect();
        let mut next = Vec::with_capacity(n);
        for v in 0..n {
            match step(&scenario.storages[v], states[v], sol.u[v]) {
                Ok(s) => next.push(s),
                Err(source) => {
                    return Err(SimError::Violation { t, bus: v, source, dump: dump(t, &states, &sol.u, &sol.f.0, &deltas) });
                }
            }
        }
        states = next;
        records.push(PeriodRecord { t, levels, u: sol.u, flows: sol.f.0, costs: sol.stage_costs, flags });
    }
    Ok(SimulationTrace { policy: policy.kind(), seed, records })
}

/// Mean with a standard error, `None` when too few samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: Option<f64>,
}

/// Batch-means estimate of the mean of a (possibly correlated) series.
pub fn batch_means(series: &[f64]) -> Estimate {
    let n = series.len();
    if n == 0 {
        return Estimate { mean: f64::NAN, se: None };
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let batches = BATCHES.min(n);
    if batches < 2 {
        return Estimate { mean, se: None };
    }
    let size = n / batches;
    let means: Vec<f64> = (0..batches).map(|b| series[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    Estimate { mean, se: Some((var / batches as f64).sqrt()) }
}

/// Average over seeds of per-seed batch-means estimates.
pub fn pooled_estimate(series: &[Vec<f64>]) -> Estimate {
    let k = series.len() as f64;
    let ests: Vec<Estimate> = series.iter().map(|s| batch_means(s)).collect();
    let mean = ests.iter().map(|e| e.mean).sum::<f64>() / k;
    let se = ests.iter().map(|e| e.se.map(|s| s * s)).sum::<Option<f64>>().map(|v| v.sqrt() / k);
    Estimate { mean, se }
}

/// Time-average estimate of the total cost after `warmup` periods.
pub fn cost_estimate(traces: &[SimulationTrace], warmup: u64) -> Estimate {
    let series: Vec<Vec<f64>> = traces.iter().map(|tr| tr.total_costs().split_off((warmup as usize).min(tr.records.len()))).collect();
    pooled_estimate(&series)
}

/// Estimate of `J(a) - J(b)` from paired traces (common random numbers).
pub fn paired_difference(a: &[SimulationTrace], b: &[SimulationTrace], warmup: u64) -> Estimate {
    let series: Vec<Vec<f64>> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.total_costs().iter().zip(y.total_costs()).skip(warmup as usize).map(|(p, q)| p - q).collect())
        .collect();
    pooled_estimate(&series)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryMetrics {
    pub j: BTreeMap<PolicyKind, Estimate>,
    /// Certified `M / W`.
    pub bound: f64,
    /// `J(lyapunov) - M / W`, a lower envelope for the optimal average cost.
    pub lower_bound: f64,
    /// `[J(NS) - J(ol), J(NS) - J(ol) + M / W]`.
    pub vos_interval: [f64; 2],
    /// `(J(NS) - J(policy)) / J(NS)`; `None` when `J(NS) = 0`.
    pub pct_savings: BTreeMap<PolicyKind, Option<f64>>,
    /// `(J(NS) - J(ol) + M / W) / J(NS)`; `None` when `J(NS) = 0`.
    pub pct_savings_upper_bound: Option<f64>,
    pub violation_count: usize,
    pub threshold_flags: usize,
}

/// Summarizes traces of the same scenario (one list of seeds per policy).
/// No-storage and Lyapunov traces are required.
pub fn summarize(runs: &BTreeMap<PolicyKind, Vec<SimulationTrace>>, bound: f64, warmup: u64, violation_count: usize) -> Result<SummaryMetrics, SimError> {
    let j: BTreeMap<PolicyKind, Estimate> = runs.iter().map(|(k, tr)| (*k, cost_estimate(tr, warmup))).collect();
    let ns = j.get(&PolicyKind::NoStorage).ok_or(SimError::MissingPolicy("no-storage"))?.mean;
    let ol = j.get(&PolicyKind::Lyapunov).ok_or(SimError::MissingPolicy("lyapunov"))?.mean;
    let pct = |x: f64| (ns != 0.0).then(|| x / ns);
    let vos = ns - ol;
    Ok(SummaryMetrics {
        pct_savings: j.iter().map(|(k, e)| (*k, pct(ns - e.mean))).collect(),
        j,
        bound,
        lower_bound: ol - bound,
        vos_interval: [vos, vos + bound],
        pct_savings_upper_bound: pct(vos + bound),
        violation_count,
        threshold_flags: runs.values().flatten().map(SimulationTrace::flag_count).sum(),
    })
}

/// One point of a comparison sweep.
#[derive(Debug, Clone, Serialize)]
pub struct ComparePoint {
    /// Total storage capacity at this point.
    pub s_max: f64,
    pub params: ControllerParams,
    pub summary: SummaryMetrics,
    #[serde(skip)]
    pub runs: BTreeMap<PolicyKind, Vec<SimulationTrace>>,
}

/// Runs every policy on every sweep point with common random numbers.
pub fn compare(scenario: &Scenario, seeds: &[u64]) -> Result<Vec<ComparePoint>, SimError> {
    let points = scenario.sweep_points()?;
    let planned: Vec<(Scenario, ControllerParams)> = points
        .into_iter()
        .map(|sc| {
            let params = sc.plan()?;
            Ok((sc, params))
        })
        .collect::<Result<_, SimError>>()?;
    let jobs: Vec<(usize, PolicyKind, u64)> = (0..planned.len())
        .flat_map(|i| PolicyKind::ALL.into_iter().flat_map(move |k| seeds.iter().map(move |&s| (i, k, s))))
        .collect();
    let traces: Vec<SimulationTrace> = jobs
        .par_iter()
        .map(|&(i, kind, seed)| {
            let (sc, params) = &planned[i];
            let policy = match kind {
                PolicyKind::Lyapunov => Policy::Lyapunov(params.clone()),
                PolicyKind::Greedy => Policy::Greedy,
                PolicyKind::NoStorage => Policy::NoStorage,
            };
            run(sc, &policy, seed)
        })
        .collect::<Result<_, SimError>>()?;
    let mut grouped: Vec<BTreeMap<PolicyKind, Vec<SimulationTrace>>> = vec![BTreeMap::new(); planned.len()];
    for ((i, kind, _), tr) in jobs.into_iter().zip(traces) {
        grouped[i].entry(kind).or_default().push(tr);
    }
    planned
        .into_iter()
        .zip(grouped)
        .map(|((sc, params), runs)| {
            let bound = sc.certified_bound(&params)?;
            let summary = summarize(&runs, bound, sc.warmup, 0)?;
            Ok(ComparePoint { s_max: sc.total_capacity(), params, summary, runs })
        })
        .collect()
}

/// `true` when every recorded level lies within the storage bounds.
pub fn levels_within_bounds(scenario: &Scenario, trace: &SimulationTrace) -> bool {
    trace.records.iter().all(|r| {
        r.levels.iter().zip(&scenario.storages).all(|(s, st)| *s >= st.s_min - LEVEL_TOL && *s <= st.s_max + LEVEL_TOL)
    })
}
