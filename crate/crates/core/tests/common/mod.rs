//! Independent oracles and random instance generators shared by the
//! integration tests and the acceptance suite.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use storenet::cost::{CostModel, CostRealization, CostTerm, PriceProcess};
use storenet::lp::{LinearProgram, RowKind};
use storenet::network::{Edge, PowerNetwork};
use storenet::stochastic::MarkovChain;
use storenet::storage::{StorageSpec, ValidatedStorage};

pub fn scenario_path(name: &str) -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

// ---------------------------------------------------------------- LP oracle

/// Minimum of a box-bounded LP by enumerating every basic solution: each
/// choice of `n` tight constraints among rows and bounds is solved and the
/// feasible ones compared. `None` when no vertex is feasible.
pub fn vertex_enumeration(lp: &LinearProgram) -> Option<f64> {
    let n = lp.num_vars();
    // every constraint as a . x (<=|=|>=) b
    let mut planes: Vec<(Vec<f64>, f64)> = Vec::new();
    for row in &lp.rows {
        let mut a = vec![0.0; n];
        for &(j, c) in &row.coeffs {
            a[j] += c;
        }
        planes.push((a, row.rhs));
    }
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        planes.push((e.clone(), lp.lower[j]));
        planes.push((e, lp.upper[j]));
    }
    let feasible = |x: &[f64]| {
        let tol = 1e-9;
        (0..n).all(|j| x[j] >= lp.lower[j] - tol && x[j] <= lp.upper[j] + tol)
            && lp.rows.iter().all(|r| {
                let v: f64 = r.coeffs.iter().map(|&(j, c)| c * x[j]).sum();
                match r.kind {
                    RowKind::Le => v <= r.rhs + tol,
                    RowKind::Ge => v >= r.rhs - tol,
                    RowKind::Eq => (v - r.rhs).abs() <= tol,
                }
            })
    };
    let eq_rows: Vec<usize> = lp.rows.iter().enumerate().filter(|(_, r)| r.kind == RowKind::Eq).map(|(i, _)| i).collect();
    let mut best: Option<f64> = None;
    let mut pick = Vec::with_capacity(n);
    combinations(planes.len(), n, &mut pick, &mut |idx| {
        if !eq_rows.iter().all(|e| idx.contains(e)) {
            return;
        }
        let a = DMatrix::from_fn(n, n, |r, c| planes[idx[r]].0[c]);
        let b = DVector::from_fn(n, |r, _| planes[idx[r]].1);
        if a.determinant().abs() < 1e-12 {
            return;
        }
        let Some(x) = a.lu().solve(&b) else { return };
        let x: Vec<f64> = x.iter().copied().collect();
        if feasible(&x) {
            let obj: f64 = lp.cost.iter().zip(&x).map(|(c, v)| c * v).sum();
            best = Some(best.map_or(obj, |b: f64| b.min(obj)));
        }
    });
    best
}

fn combinations(n: usize, k: usize, pick: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
    if pick.len() == k {
        f(pick);
        return;
    }
    let start = pick.last().map_or(0, |l| l + 1);
    for i in start..n {
        if n - i < k - pick.len() {
            break;
        }
        pick.push(i);
        combinations(n, k, pick, f);
        pick.pop();
    }
}

/// Random LP with `n` boxed variables and `m` inequality rows.
pub fn random_lp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> LinearProgram {
    let mut lp = LinearProgram::new();
    for _ in 0..n {
        let lo = rng.gen_range(-2.0..0.5);
        let hi = lo + rng.gen_range(0.1..3.0);
        lp.add_var(rng.gen_range(-2.0..2.0), lo, hi);
    }
    for _ in 0..m {
        let mut coeffs = Vec::new();
        for j in 0..n {
            if rng.gen_bool(0.7) {
                coeffs.push((j, rng.gen_range(-2.0..2.0)));
            }
        }
        let kind = if rng.gen_bool(0.5) { RowKind::Le } else { RowKind::Ge };
        lp.add_row(coeffs, kind, rng.gen_range(-1.0..1.0));
    }
    lp
}

// ----------------------------------------------------------- storage/costs

/// A random storage satisfying the standing assumptions with `lambda` in `[0.5, 1]`.
pub fn random_storage(rng: &mut ChaCha8Rng) -> ValidatedStorage {
    loop {
        let s_min = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(-1.0..1.0) };
        let cap = rng.gen_range(0.5..5.0);
        let u_max = rng.gen_range(0.02..0.45) * cap;
        let u_min = -rng.gen_range(0.02..0.45) * cap;
        let lambda = if rng.gen_bool(0.2) { 1.0 } else { rng.gen_range(0.5..1.0) };
        let mu_c = rng.gen_range(0.8..1.0);
        let mu_d = rng.gen_range(0.8..1.0);
        if let Ok(st) = StorageSpec::new(s_min, s_min + cap, u_min, u_max, mu_c, mu_d, lambda).validate() {
            return st;
        }
    }
}

/// A random convex cost drawn from the balancing, unserved-demand and
/// arbitrage families.
pub fn random_cost(rng: &mut ChaCha8Rng, st: &ValidatedStorage) -> CostModel {
    loop {
        let model = match rng.gen_range(0..4) {
            0 => CostModel::balancing(rng.gen_range(0.5..3.0)),
            1 => CostModel::unserved_demand(PriceProcess::DayNight { day: rng.gen_range(1.0..4.0), night: rng.gen_range(0.2..1.0) }),
            2 => {
                let low = rng.gen_range(0.1..1.0);
                CostModel::unserved_demand(PriceProcess::Uniform { low, high: low + rng.gen_range(0.1..2.0) })
            }
            _ => {
                // buy at the price, sell back at a fraction of it
                let p = rng.gen_range(0.5..2.0);
                let sell = rng.gen_range(0.2..0.9);
                CostModel::new(vec![
                    CostTerm::positive_part(-1.0, -1.0, -1.0, -1.0, PriceProcess::Constant(p)),
                    CostTerm::linear(-1.0, -1.0, -1.0, -1.0, PriceProcess::Constant(p * sell)),
                ])
                .unwrap()
            }
        };
        if model.check_convexity(st).is_ok() {
            return model;
        }
    }
}

// ------------------------------------------------------------ planner oracle

/// `M(gamma)` from its definition.
pub fn m_of(st: &StorageSpec, gamma: f64) -> f64 {
    let k = 1.0 - st.lambda;
    let m_u = 0.5 * (st.u_min + k * gamma).powi(2).max((st.u_max + k * gamma).powi(2));
    let m_s = (st.s_min + gamma).powi(2).max((st.s_max + gamma).powi(2));
    m_u + st.lambda * k * m_s
}

/// Feasible shift interval for weight `w`.
pub fn shift_interval(st: &StorageSpec, d_lo: f64, d_hi: f64, w: f64) -> (f64, f64) {
    let l = st.lambda;
    let lo = (-w * d_lo + (st.u_max - (1.0 - l) * st.s_max).max(0.0)) / l - st.s_max;
    let hi = (-w * d_hi - ((1.0 - l) * st.s_min - st.u_min).max(0.0)) / l - st.s_min;
    (lo, hi)
}

pub fn w_max(st: &StorageSpec, d_lo: f64, d_hi: f64) -> f64 {
    let l = st.lambda;
    let slack = l * (st.s_max - st.s_min) - (st.u_max - (1.0 - l) * st.s_max).max(0.0) - ((1.0 - l) * st.s_min - st.u_min).max(0.0);
    slack / (d_hi - d_lo)
}

/// Best `M(gamma) / w` over `gamma` on a `grid`-point mesh of the feasible
/// interval (plus the two kinks of `M`) for each `w` in `ws`. Returns the
/// value and the index of the best `w`.
fn best_over(st: &StorageSpec, d_lo: f64, d_hi: f64, ws: &[f64], grid: usize) -> (f64, usize) {
    let mut best = (f64::INFINITY, 0);
    for (i, &w) in ws.iter().enumerate() {
        let (lo, hi) = shift_interval(st, d_lo, d_hi, w);
        if lo > hi + 1e-12 {
            continue;
        }
        let hi = hi.max(lo);
        let mut consider = |g: f64| {
            let v = m_of(st, g) / w;
            if v < best.0 {
                best = (v, i);
            }
        };
        for j in 0..grid {
            consider(if grid == 1 { lo } else { lo + (hi - lo) * j as f64 / (grid - 1) as f64 });
        }
        // the two places where a max in M switches branch
        let mut kinks = vec![-(st.s_min + st.s_max) / 2.0];
        if st.lambda < 1.0 {
            kinks.push(-(st.u_min + st.u_max) / (2.0 * (1.0 - st.lambda)));
        }
        for g in kinks {
            if g >= lo && g <= hi {
                consider(g);
            }
        }
    }
    best
}

/// Plain `grid x grid` search over `(0, w_max] x [ks_min(w), ks_max(w)]`.
pub fn planner_grid_oracle(st: &StorageSpec, d_lo: f64, d_hi: f64, grid: usize) -> f64 {
    let wm = w_max(st, d_lo, d_hi);
    let ws: Vec<f64> = (1..=grid).map(|i| wm * i as f64 / grid as f64).collect();
    best_over(st, d_lo, d_hi, &ws, grid).0
}

/// The plain grid search followed by `rounds` zoomed grids over the two
/// cells around the best `w`. The bound can have a kink in `w`, so the
/// plain grid alone is only first-order accurate there.
pub fn planner_refined_oracle(st: &StorageSpec, d_lo: f64, d_hi: f64, grid: usize, rounds: usize) -> f64 {
    let wm = w_max(st, d_lo, d_hi);
    let mut ws: Vec<f64> = (1..=grid).map(|i| wm * i as f64 / grid as f64).collect();
    let (mut best, mut i) = best_over(st, d_lo, d_hi, &ws, grid);
    for _ in 0..rounds {
        let a = if i == 0 { ws[0] * 1e-3 } else { ws[i - 1] };
        let b = ws[(i + 1).min(ws.len() - 1)];
        ws = (0..grid).map(|k| a + (b - a) * k as f64 / (grid - 1) as f64).collect();
        let (v, j) = best_over(st, d_lo, d_hi, &ws, grid);
        if v < best {
            best = v;
        }
        i = j;
    }
    best
}

// ------------------------------------------------------------ network oracle

/// One bus of a network oracle instance.
pub struct OracleBus<'a> {
    pub storage: &'a ValidatedStorage,
    pub cost: &'a CostModel,
    pub realization: CostRealization,
    pub drift: f64,
}

fn bus_value(b: &OracleBus<'_>, u: f64, inflow: f64) -> f64 {
    b.drift * u + b.cost.evaluate(b.storage, &b.realization, u, inflow)
}

/// Ternary search of a convex function on `[lo, hi]`.
fn ternary(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..90 {
        let a = lo + (hi - lo) / 3.0;
        let b = hi - (hi - lo) / 3.0;
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f(0.5 * (lo + hi))
}

/// `min_u drift u + g(u, inflow)` by ternary search (convex in `u`).
fn bus_min(b: &OracleBus<'_>, inflow: f64) -> f64 {
    let (lo, hi) = (b.storage.u_min, b.storage.u_max);
    let ends = bus_value(b, lo, inflow).min(bus_value(b, hi, inflow));
    ends.min(ternary(lo, hi, |u| bus_value(b, u, inflow)))
}

fn inflows(edges: &[Edge], f: &[f64], n: usize) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for (e, fe) in edges.iter().zip(f) {
        x[e.to] += fe;
        x[e.from] -= fe;
    }
    x
}

fn network_value(buses: &[OracleBus<'_>], edges: &[Edge], f: &[f64]) -> f64 {
    let x = inflows(edges, f, buses.len());
    buses.iter().zip(&x).map(|(b, i)| bus_min(b, *i)).sum()
}

/// Optimal period objective on a tree network with at most two lines:
/// a grid of step `1e-3` over the flows, then nested ternary refinement
/// (the partial minimum over storage operations is convex in the flows).
pub fn network_grid_oracle(buses: &[OracleBus<'_>], edges: &[Edge], caps: &[f64]) -> f64 {
    let grid = |cap: f64| {
        let steps = ((2.0 * cap) / 1e-3).round().max(1.0) as usize;
        (0..=steps).map(move |i| -cap + 2.0 * cap * i as f64 / steps as f64)
    };
    match edges.len() {
        0 => network_value(buses, edges, &[]),
        1 => {
            let coarse = grid(caps[0]).map(|f| network_value(buses, edges, &[f])).fold(f64::INFINITY, f64::min);
            coarse.min(ternary(-caps[0], caps[0], |f| network_value(buses, edges, &[f])))
        }
        2 => {
            let mut coarse = f64::INFINITY;
            for f0 in grid(caps[0]) {
                for f1 in grid(caps[1]) {
                    coarse = coarse.min(network_value(buses, edges, &[f0, f1]));
                }
            }
            let refined = ternary(-caps[0], caps[0], |f0| ternary(-caps[1], caps[1], |f1| network_value(buses, edges, &[f0, f1])));
            coarse.min(refined)
        }
        _ => panic!("oracle supports at most two lines"),
    }
}

// ---------------------------------------------------------------- graphs

/// Random connected multigraph on `n` buses: a random spanning tree plus
/// `extra` additional edges (parallel edges allowed, no self-loops).
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra: usize) -> (Vec<Edge>, Vec<f64>) {
    let mut edges = Vec::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        edges.push(if rng.gen_bool(0.5) { Edge { from: u, to: v } } else { Edge { from: v, to: u } });
    }
    for _ in 0..extra {
        let a = rng.gen_range(0..n);
        let mut b = rng.gen_range(0..n);
        while b == a {
            b = rng.gen_range(0..n);
        }
        edges.push(Edge { from: a, to: b });
    }
    let beta = edges.iter().map(|_| rng.gen_range(0.2..5.0)).collect();
    (edges, beta)
}

pub fn build_network(n: usize, edges: Vec<Edge>, beta: Vec<f64>, cap: f64) -> PowerNetwork {
    let m = edges.len();
    PowerNetwork::build(n, edges, beta, vec![cap; m]).unwrap()
}

// ----------------------------------------------------------------- Markov

/// Random irreducible aperiodic chain on `n` states.
pub fn random_chain(rng: &mut ChaCha8Rng, n: usize) -> MarkovChain {
    loop {
        let transition: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.6) { rng.gen_range(0.05..1.0) } else { 0.0 }).collect();
                let s: f64 = raw.iter().sum();
                if s == 0.0 {
                    let mut r = vec![0.0; n];
                    r[rng.gen_range(0..n)] = 1.0;
                    r
                } else {
                    raw.iter().map(|x| x / s).collect()
                }
            })
            .collect();
        if let Ok(chain) = MarkovChain::new(transition, rng.gen_range(0..n)) {
            return chain;
        }
    }
}

/// First two sample moments of `samples` return times to the initial state.
pub fn monte_carlo_return_moments(rng: &mut ChaCha8Rng, chain: &MarkovChain, samples: usize) -> (f64, f64) {
    let start = chain.initial_state;
    let (mut s1, mut s2) = (0.0, 0.0);
    let mut state = start;
    for _ in 0..samples {
        let mut t = 0u64;
        loop {
            state = chain.next_state(state, rng.gen::<f64>());
            t += 1;
            if state == start {
                break;
            }
        }
        s1 += t as f64;
        s2 += (t * t) as f64;
    }
    (s1 / samples as f64, s2 / samples as f64)
}

// -------------------------------------------------------- network instances

/// A period problem owned in full, for comparing the LP against the oracle.
pub struct NetworkInstance {
    pub storages: Vec<ValidatedStorage>,
    pub costs: Vec<CostModel>,
    pub edges: Vec<Edge>,
    pub caps: Vec<f64>,
    pub network: PowerNetwork,
    pub deltas: Vec<f64>,
    pub drifts: Vec<f64>,
    pub period: u64,
}

impl NetworkInstance {
    pub fn new(storages: Vec<ValidatedStorage>, costs: Vec<CostModel>, edges: Vec<Edge>, caps: Vec<f64>, deltas: Vec<f64>, drifts: Vec<f64>) -> Self {
        let beta = vec![1.0; edges.len()];
        let network = PowerNetwork::build(storages.len(), edges.clone(), beta, caps.clone()).unwrap();
        Self { storages, costs, edges, caps, network, deltas, drifts, period: 9 }
    }

    pub fn realization(&self, v: usize) -> CostRealization {
        CostRealization { period: self.period, delta: self.deltas[v], prices: self.costs[v].nominal_prices(self.period) }
    }

    pub fn oracle(&self) -> f64 {
        let buses: Vec<OracleBus<'_>> = (0..self.storages.len())
            .map(|v| OracleBus { storage: &self.storages[v], cost: &self.costs[v], realization: self.realization(v), drift: self.drifts[v] })
            .collect();
        network_grid_oracle(&buses, &self.edges, &self.caps)
    }

    pub fn solve(&self) -> storenet::online::OnlineSolution {
        use storenet::online::{solve_network, BusInput, OnlineProblem};
        let buses = (0..self.storages.len())
            .map(|v| BusInput {
                storage: &self.storages[v],
                cost: &self.costs[v],
                realization: self.realization(v),
                drift: self.drifts[v],
                level_window: None,
                idle: false,
            })
            .collect();
        solve_network(&OnlineProblem { buses, network: &self.network }).unwrap()
    }
}

fn unit_storage() -> ValidatedStorage {
    StorageSpec::new(0.0, 1.0, -0.1, 0.1, 1.0, 1.0, 1.0).validate().unwrap()
}

/// The worked two-bus line examples: caps 1 and 0.2, imbalances (+0.5, -0.5),
/// unserved demand priced at 2, zero drift.
pub fn two_bus_examples() -> Vec<NetworkInstance> {
    [1.0, 0.2]
        .into_iter()
        .map(|cap| {
            let cost = CostModel::unserved_demand(PriceProcess::Constant(2.0));
            NetworkInstance::new(
                vec![unit_storage(), unit_storage()],
                vec![cost.clone(), cost],
                vec![Edge { from: 0, to: 1 }],
                vec![cap],
                vec![0.5, -0.5],
                vec![0.0, 0.0],
            )
        })
        .collect()
}

/// Random two- and three-bus tree instances with mixed costs and drifts.
pub fn random_network_instance(rng: &mut ChaCha8Rng, n: usize) -> NetworkInstance {
    let storages: Vec<ValidatedStorage> = (0..n)
        .map(|_| {
            let u = rng.gen_range(0.05..0.2);
            StorageSpec::new(0.0, 1.0, -u, u, rng.gen_range(0.85..1.0), rng.gen_range(0.85..1.0), rng.gen_range(0.9..1.0)).validate().unwrap()
        })
        .collect();
    let costs: Vec<CostModel> = storages
        .iter()
        .map(|st| loop {
            let c = match rng.gen_range(0..3) {
                0 => CostModel::balancing(rng.gen_range(0.5..2.0)),
                1 => CostModel::unserved_demand(PriceProcess::Constant(rng.gen_range(0.5..3.0))),
                _ => random_cost(rng, st),
            };
            if c.check_convexity(st).is_ok() && !c.terms().iter().any(|t| matches!(t.price, PriceProcess::Uniform { .. })) {
                break c;
            }
        })
        .collect();
    let edges: Vec<Edge> = (1..n).map(|v| Edge { from: rng.gen_range(0..v), to: v }).collect();
    let caps: Vec<f64> = edges.iter().map(|_| rng.gen_range(0.05..0.25)).collect();
    let deltas = (0..n).map(|_| rng.gen_range(-0.4..0.4)).collect();
    let drifts = (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect();
    NetworkInstance::new(storages, costs, edges, caps, deltas, drifts)
}
