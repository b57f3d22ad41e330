//! DC network model. Flows satisfy the capacity box and Kirchhoff's voltage
//! law, the latter encoded as `K f = 0` where the rows of `K` span the
//! nullspace of `(diag(beta) A)^T`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default tolerance for [`PowerNetwork::flow_feasible`].
pub const FLOW_TOL: f64 = 1e-8;

/// Relative threshold below which a residual vector is treated as dependent
/// during orthogonalization.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("network needs at least one bus")]
    NoBuses,
    #[error("edge {edge} references bus {bus}, but the network has {n} buses")]
    UnknownBus { edge: usize, bus: usize, n: usize },
    #[error("edge {edge} is a self-loop on bus {bus}")]
    SelfLoop { edge: usize, bus: usize },
    #[error("edge {edge} has nonpositive admittance {beta}")]
    Admittance { edge: usize, beta: f64 },
    #[error("edge {edge} has invalid capacity {f_max}")]
    Capacity { edge: usize, f_max: f64 },
    #[error("expected {expected} per-edge values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("network is disconnected: bus {0} is unreachable from bus 0")]
    Disconnected(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
}

/// Signed per-edge energy flow, positive in the edge direction.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowVector(pub Vec<f64>);

impl FlowVector {
    pub fn zeros(m: usize) -> Self {
        Self(vec![0.0; m])
    }
}

#[derive(Debug, Clone)]
pub struct PowerNetwork {
    n: usize,
    edges: Vec<Edge>,
    beta: Vec<f64>,
    f_max: Vec<f64>,
    /// `m x n`, row-major.
    incidence: Vec<Vec<f64>>,
    /// `(m - n + 1) x m`, row-major, orthonormal rows.
    k_matrix: Vec<Vec<f64>>,
}

impl PowerNetwork {
    /// Builds a network over buses `0..n`.
    pub fn build(n: usize, edges: Vec<Edge>, beta: Vec<f64>, f_max: Vec<f64>) -> Result<Self, NetworkError> {
        if n == 0 {
            return Err(NetworkError::NoBuses);
        }
        let m = edges.len();
        for len in [beta.len(), f_max.len()] {
            if len != m {
                return Err(NetworkError::Dimension { expected: m, got: len });
            }
        }
        for (e, edge) in edges.iter().enumerate() {
            for bus in [edge.from, edge.to] {
                if bus >= n {
                    return Err(NetworkError::UnknownBus { edge: e, bus, n });
                }
            }
            if edge.from == edge.to {
                return Err(NetworkError::SelfLoop { edge: e, bus: edge.from });
            }
            if !(beta[e] > 0.0) || !beta[e].is_finite() {
                return Err(NetworkError::Admittance { edge: e, beta: beta[e] });
            }
            if !(f_max[e] >= 0.0) || !f_max[e].is_finite() {
                return Err(NetworkError::Capacity { edge: e, f_max: f_max[e] });
            }
        }
        check_connected(n, &edges)?;

        let mut incidence = vec![vec![0.0; n]; m];
        for (e, edge) in edges.iter().enumerate() {
            incidence[e][edge.from] = 1.0;
            incidence[e][edge.to] = -1.0;
        }
        let k_matrix = kvl_basis(&incidence, &beta, n);
        Ok(Self { n, edges, beta, f_max, incidence, k_matrix })
    }

    pub fn single_bus() -> Self {
        Self::build(1, Vec::new(), Vec::new(), Vec::new()).expect("single bus network is valid")
    }

    pub fn bus_count(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn f_max(&self) -> &[f64] {
        &self.f_max
    }

    pub fn incidence(&self) -> &[Vec<f64>] {
        &self.incidence
    }

    pub fn k_matrix(&self) -> &[Vec<f64>] {
        &self.k_matrix
    }

    /// `diag(beta) A`, `m x n`.
    pub fn h_matrix(&self) -> Vec<Vec<f64>> {
        self.incidence
            .iter()
            .zip(&self.beta)
            .map(|(row, b)| row.iter().map(|a| a * b).collect())
            .collect()
    }

    /// `max |K H|` entrywise; zero when `K` is empty.
    pub fn kvl_residual(&self) -> f64 {
        let h = self.h_matrix();
        let mut worst = 0.0f64;
        for k_row in &self.k_matrix {
            for col in 0..self.n {
                let v: f64 = k_row.iter().zip(&h).map(|(k, h_row)| k * h_row[col]).sum();
                worst = worst.max(v.abs());
            }
        }
        worst
    }

    /// `K f`.
    pub fn kvl_violation(&self, f: &FlowVector) -> Vec<f64> {
        self.k_matrix.iter().map(|row| row.iter().zip(&f.0).map(|(k, x)| k * x).sum()).collect()
    }

    pub fn flow_feasible(&self, f: &FlowVector, tol: f64) -> bool {
        assert_eq!(f.0.len(), self.edges.len(), "flow dimension mismatch");
        let boxed = f.0.iter().zip(&self.f_max).all(|(x, cap)| x.abs() <= cap + tol);
        boxed && self.kvl_violation(f).iter().all(|r| r.abs() <= tol)
    }

    /// Flow into bus `v` minus flow out of it.
    pub fn net_inflow(&self, f: &FlowVector, v: usize) -> Result<f64, NetworkError> {
        if v >= self.n {
            return Err(NetworkError::UnknownBus { edge: usize::MAX, bus: v, n: self.n });
        }
        assert_eq!(f.0.len(), self.edges.len(), "flow dimension mismatch");
        Ok(self.inflow_unchecked(&f.0, v))
    }

    pub(crate) fn inflow_unchecked(&self, f: &[f64], v: usize) -> f64 {
        self.edges
            .iter()
            .zip(f)
            .map(|(e, x)| {
                if e.to == v {
                    *x
                } else if e.from == v {
                    -*x
                } else {
                    0.0
                }
            })
            .sum()
    }
}

fn check_connected(n: usize, edges: &[Edge]) -> Result<(), NetworkError> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.from].push(e.to);
        adj[e.to].push(e.from);
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &w in &adj[v] {
            if !seen[w] {
                seen[w] = true;
                stack.push(w);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(v) => Err(NetworkError::Disconnected(v)),
        None => Ok(()),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Subtracts the projection onto `basis` twice (classical Gram-Schmidt with
/// reorthogonalization).
fn orthogonalize(v: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let c = dot(v, q);
            for (x, y) in v.iter_mut().zip(q) {
                *x -= c * y;
            }
        }
    }
}

/// Orthonormal basis of `N(H^T)` with `H = diag(beta) A`.
///
/// First builds an orthonormal basis of `R(H)` from the columns of `H`, then
/// completes it against the unit vectors `e_1..e_m` in order. The completion
/// vectors span the orthogonal complement, which is `N(H^T)`. Each row is then
/// sign-normalized so its first nonzero entry is positive.
fn kvl_basis(incidence: &[Vec<f64>], beta: &[f64], n: usize) -> Vec<Vec<f64>> {
    let m = incidence.len();
    if m == 0 {
        return Vec::new();
    }
    let mut range: Vec<Vec<f64>> = Vec::new();
    for col in 0..n {
        let mut v: Vec<f64> = (0..m).map(|e| beta[e] * incidence[e][col]).collect();
        let scale = norm(&v);
        if scale == 0.0 {
            continue;
        }
        orthogonalize(&mut v, &range);
        let r = norm(&v);
        if r > RANK_TOL * scale {
            v.iter_mut().for_each(|x| *x /= r);
            range.push(v);
        }
    }
    let target = m + 1 - n;
    let mut all = range;
    let mut null = Vec::with_capacity(target);
    for i in 0..m {
        if null.len() == target {
            break;
        }
        let mut v = vec![0.0; m];
        v[i] = 1.0;
        orthogonalize(&mut v, &all);
        let r = norm(&v);
        if r > 1e-6 {
            v.iter_mut().for_each(|x| *x /= r);
            all.push(v.clone());
            null.push(v);
        }
    }
    for row in &mut null {
        // exact zeros from cancellation are noise; tiny entries must not pick the sign
        for x in row.iter_mut() {
            if x.abs() < 1e-14 {
                *x = 0.0;
            }
        }
        if let Some(first) = row.iter().find(|x| **x != 0.0) {
            if *first < 0.0 {
                row.iter_mut().for_each(|x| *x = -*x);
            }
        }
    }
    null
}
