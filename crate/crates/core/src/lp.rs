//! Dense bounded-variable primal simplex.
//!
//! Small LPs only (tens of variables). Two phases with one artificial per
//! row, Bland's smallest-index rule for both entering and leaving choices,
//! and a final refactorization of the basis against the original data so the
//! reported point does not carry accumulated tableau round-off. The pivot
//! sequence depends only on the input, so identical problems give
//! bit-identical results.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Reduced-cost threshold for optimality; dual feasibility is certified at
/// [`CERTIFY_TOL`].
const DUAL_TOL: f64 = 1e-10;
const PIVOT_TOL: f64 = 1e-11;
const PRIMAL_TOL: f64 = 1e-9;
pub const CERTIFY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LpError {
    #[error("LP is infeasible (phase-one residual {0})")]
    Infeasible(f64),
    #[error("LP is unbounded along variable {0}")]
    Unbounded(usize),
    #[error("LP hit the iteration limit of {0}")]
    IterationLimit(usize),
    #[error("malformed LP: {0}")]
    Malformed(String),
    #[error("LP solution failed certification: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowKind {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub coeffs: Vec<(usize, f64)>,
    pub kind: RowKind,
    pub rhs: f64,
}

/// `min cost·x` subject to `rows` and `lower <= x <= upper`. Bounds may be
/// infinite on one side.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinearProgram {
    pub cost: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub rows: Vec<Row>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpStatus {
    Optimal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    pub status: LpStatus,
    pub iterations: usize,
}

impl LinearProgram {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a variable and returns its index.
    pub fn add_var(&mut self, cost: f64, lower: f64, upper: f64) -> usize {
        self.cost.push(cost);
        self.lower.push(lower);
        self.upper.push(upper);
        self.cost.len() - 1
    }

    pub fn add_row(&mut self, coeffs: Vec<(usize, f64)>, kind: RowKind, rhs: f64) {
        self.rows.push(Row { coeffs, kind, rhs });
    }

    pub fn num_vars(&self) -> usize {
        self.cost.len()
    }

    pub fn objective_at(&self, x: &[f64]) -> f64 {
        self.cost.iter().zip(x).map(|(c, v)| c * v).sum()
    }

    pub fn solve(&self) -> Result<LpSolution, LpError> {
        lp_solve(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum NonBasic {
    Lower,
    Upper,
    /// Free variable parked at zero.
    Zero,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// `B^{-1} [A | I | S]`, row-major.
    t: Vec<f64>,
    lower: Vec<f64>,
    upper: Vec<f64>,
    value: Vec<f64>,
    basis: Vec<usize>,
    /// `None` for basic columns.
    status: Vec<Option<NonBasic>>,
    iterations: usize,
    limit: usize,
}

impl Tableau {
    fn at(&self, i: usize, j: usize) -> f64 {
        self.t[i * self.cols + j]
    }

    fn reduced_costs(&self, cost: &[f64]) -> Vec<f64> {
        let mut d = cost.to_vec();
        for (i, &b) in self.basis.iter().enumerate() {
            let cb = cost[b];
            if cb != 0.0 {
                let row = &self.t[i * self.cols..(i + 1) * self.cols];
                for (dj, tij) in d.iter_mut().zip(row) {
                    *dj -= cb * tij;
                }
            }
        }
        d
    }

    fn run(&mut self, cost: &[f64]) -> Result<(), LpError> {
        loop {
            if self.iterations >= self.limit {
                return Err(LpError::IterationLimit(self.limit));
            }
            let d = self.reduced_costs(cost);
            let mut entering = None;
            for j in 0..self.cols {
                let Some(st) = self.status[j] else { continue };
                if self.lower[j] == self.upper[j] {
                    continue;
                }
                let dir = match st {
                    NonBasic::Lower if d[j] < -DUAL_TOL => 1.0,
                    NonBasic::Upper if d[j] > DUAL_TOL => -1.0,
                    NonBasic::Zero if d[j] < -DUAL_TOL => 1.0,
                    NonBasic::Zero if d[j] > DUAL_TOL => -1.0,
                    _ => continue,
                };
                entering = Some((j, dir));
                break;
            }
            let Some((j, dir)) = entering else { return Ok(()) };
            self.iterations += 1;

            // ratio test; ties go to the smallest variable index, a bound flip
            // of the entering variable counts as its own index
            let mut theta = self.upper[j] - self.lower[j];
            let mut leave: Option<(usize, usize)> = None; // (row, var)
            let mut best_idx = if theta.is_finite() { j } else { usize::MAX };
            for i in 0..self.rows {
                let alpha = self.at(i, j);
                if alpha.abs() <= PIVOT_TOL {
                    continue;
                }
                let b = self.basis[i];
                let rate = -dir * alpha;
                let room = if rate < 0.0 {
                    (self.value[b] - self.lower[b]).max(0.0) / -rate
                } else {
                    (self.upper[b] - self.value[b]).max(0.0) / rate
                };
                if !room.is_finite() {
                    continue;
                }
                if room < theta || (room == theta && b < best_idx) {
                    theta = room;
                    leave = Some((i, b));
                    best_idx = b;
                }
            }
            if !theta.is_finite() {
                return Err(LpError::Unbounded(j));
            }

            self.value[j] += dir * theta;
            for i in 0..self.rows {
                let alpha = self.at(i, j);
                if alpha != 0.0 {
                    let b = self.basis[i];
                    self.value[b] -= dir * theta * alpha;
                }
            }
            match leave {
                None => {
                    // bound flip
                    let st = if dir > 0.0 { NonBasic::Upper } else { NonBasic::Lower };
                    self.value[j] = if dir > 0.0 { self.upper[j] } else { self.lower[j] };
                    self.status[j] = Some(st);
                }
                Some((r, b)) => {
                    let alpha = self.at(r, j);
                    let rate = -dir * alpha;
                    let (st, v) = if rate < 0.0 { (NonBasic::Lower, self.lower[b]) } else { (NonBasic::Upper, self.upper[b]) };
                    self.value[b] = v;
                    self.status[b] = Some(st);
                    self.status[j] = None;
                    self.basis[r] = j;
                    self.pivot(r, j);
                }
            }
        }
    }

    fn pivot(&mut self, r: usize, j: usize) {
        let cols = self.cols;
        let p = self.t[r * cols + j];
        for k in 0..cols {
            self.t[r * cols + k] /= p;
        }
        self.t[r * cols + j] = 1.0;
        let pivot_row: Vec<f64> = self.t[r * cols..(r + 1) * cols].to_vec();
        for i in 0..self.rows {
            if i == r {
                continue;
            }
            let f = self.t[i * cols + j];
            if f == 0.0 {
                continue;
            }
            let row = &mut self.t[i * cols..(i + 1) * cols];
            for (x, y) in row.iter_mut().zip(&pivot_row) {
                *x -= f * y;
            }
            row[j] = 0.0;
        }
    }
}

/// Solves `lp` to optimality or reports why it cannot.
pub fn lp_solve(lp: &LinearProgram) -> Result<LpSolution, LpError> {
    let n = lp.cost.len();
    if lp.lower.len() != n || lp.upper.len() != n {
        return Err(LpError::Malformed("bound vectors do not match cost length".into()));
    }
    for j in 0..n {
        if lp.lower[j].is_nan() || lp.upper[j].is_nan() || lp.lower[j] > lp.upper[j] || !lp.cost[j].is_finite() {
            return Err(LpError::Malformed(format!("variable {j} has invalid bounds or cost")));
        }
    }
    let m = lp.rows.len();
    for (i, row) in lp.rows.iter().enumerate() {
        if !row.rhs.is_finite() || row.coeffs.iter().any(|(k, a)| *k >= n || !a.is_finite()) {
            return Err(LpError::Malformed(format!("row {i} is malformed")));
        }
    }

    // columns: structural 0..n, slacks n..n+m, artificials n+m..n+2m
    let cols = n + 2 * m;
    let mut a = vec![0.0; m * n];
    for (i, row) in lp.rows.iter().enumerate() {
        for &(k, v) in &row.coeffs {
            a[i * n + k] += v;
        }
    }
    let mut lower = Vec::with_capacity(cols);
    let mut upper = Vec::with_capacity(cols);
    let mut value = Vec::with_capacity(cols);
    let mut status = Vec::with_capacity(cols);
    for j in 0..n {
        lower.push(lp.lower[j]);
        upper.push(lp.upper[j]);
        let (st, v) = if lp.lower[j].is_finite() {
            (NonBasic::Lower, lp.lower[j])
        } else if lp.upper[j].is_finite() {
            (NonBasic::Upper, lp.upper[j])
        } else {
            (NonBasic::Zero, 0.0)
        };
        value.push(v);
        status.push(Some(st));
    }
    for row in &lp.rows {
        let (lo, hi) = match row.kind {
            RowKind::Le => (0.0, f64::INFINITY),
            RowKind::Ge => (f64::NEG_INFINITY, 0.0),
            RowKind::Eq => (0.0, 0.0),
        };
        lower.push(lo);
        upper.push(hi);
        value.push(0.0);
        status.push(Some(if lo == 0.0 { NonBasic::Lower } else { NonBasic::Upper }));
    }
    let mut sign = vec![1.0; m];
    let mut t = vec![0.0; m * cols];
    let mut basis = Vec::with_capacity(m);
    for i in 0..m {
        let activity: f64 = (0..n).map(|k| a[i * n + k] * value[k]).sum();
        let resid = lp.rows[i].rhs - activity;
        sign[i] = if resid >= 0.0 { 1.0 } else { -1.0 };
        let s = sign[i];
        for k in 0..n {
            t[i * cols + k] = s * a[i * n + k];
        }
        t[i * cols + n + i] = s;
        t[i * cols + n + m + i] = 1.0;
        basis.push(n + m + i);
    }
    for i in 0..m {
        lower.push(0.0);
        upper.push(f64::INFINITY);
        let activity: f64 = (0..n).map(|k| a[i * n + k] * value[k]).sum();
        value.push((lp.rows[i].rhs - activity).abs());
        status.push(None);
    }

    let mut tab = Tableau { rows: m, cols, t, lower, upper, value, basis, status, iterations: 0, limit: 50 * (m + n).max(1) };

    if m > 0 {
        let mut phase_one = vec![0.0; cols];
        phase_one[n + m..].iter_mut().for_each(|c| *c = 1.0);
        tab.run(&phase_one)?;
        let infeas: f64 = (n + m..cols).map(|j| tab.value[j]).sum();
        let scale = 1.0 + lp.rows.iter().map(|r| r.rhs.abs()).fold(0.0, f64::max);
        if infeas > PRIMAL_TOL * scale {
            return Err(LpError::Infeasible(infeas));
        }
        for j in n + m..cols {
            tab.upper[j] = 0.0;
            if tab.status[j].is_some() {
                tab.value[j] = 0.0;
                tab.status[j] = Some(NonBasic::Lower);
            }
        }
    }
    let mut cost = vec![0.0; cols];
    cost[..n].copy_from_slice(&lp.cost);
    tab.run(&cost)?;

    let x = refactor(&tab, &a, lp, &sign, &cost, n)?;
    let objective = lp.objective_at(&x);
    Ok(LpSolution { x, objective, status: LpStatus::Optimal, iterations: tab.iterations })
}

/// Column `j` of `[A | I | S]`.
fn column(a: &[f64], sign: &[f64], n: usize, m: usize, j: usize) -> DVector<f64> {
    let mut c = DVector::zeros(m);
    if j < n {
        for i in 0..m {
            c[i] = a[i * n + j];
        }
    } else if j < n + m {
        c[j - n] = 1.0;
    } else {
        c[j - n - m] = sign[j - n - m];
    }
    c
}

/// Recomputes basic values from the original data, then certifies primal
/// and dual feasibility.
fn refactor(tab: &Tableau, a: &[f64], lp: &LinearProgram, sign: &[f64], cost: &[f64], n: usize) -> Result<Vec<f64>, LpError> {
    let m = tab.rows;
    let mut value = tab.value.clone();
    if m > 0 {
        let mut b_mat = DMatrix::zeros(m, m);
        for (i, &bj) in tab.basis.iter().enumerate() {
            b_mat.set_column(i, &column(a, sign, n, m, bj));
        }
        let mut rhs = DVector::from_iterator(m, lp.rows.iter().map(|r| r.rhs));
        for j in 0..tab.cols {
            if tab.status[j].is_some() && value[j] != 0.0 {
                rhs -= column(a, sign, n, m, j) * value[j];
            }
        }
        let lu = b_mat.clone().lu();
        let xb = lu.solve(&rhs).ok_or_else(|| LpError::Numerical("singular basis".into()))?;
        for (i, &bj) in tab.basis.iter().enumerate() {
            value[bj] = xb[i];
        }
        for (i, &bj) in tab.basis.iter().enumerate() {
            let scale = 1.0 + value[bj].abs();
            if value[bj] < tab.lower[bj] - PRIMAL_TOL * scale || value[bj] > tab.upper[bj] + PRIMAL_TOL * scale {
                return Err(LpError::Numerical(format!("basic variable {bj} (row {i}) = {} violates its bounds", value[bj])));
            }
        }
        let cb = DVector::from_iterator(m, tab.basis.iter().map(|&bj| cost[bj]));
        let y = b_mat
            .transpose()
            .lu()
            .solve(&cb)
            .ok_or_else(|| LpError::Numerical("singular basis transpose".into()))?;
        for j in 0..tab.cols {
            let Some(st) = tab.status[j] else { continue };
            if tab.lower[j] == tab.upper[j] {
                continue;
            }
            let d = cost[j] - column(a, sign, n, m, j).dot(&y);
            let bad = match st {
                NonBasic::Lower => d < -CERTIFY_TOL,
                NonBasic::Upper => d > CERTIFY_TOL,
                NonBasic::Zero => d.abs() > CERTIFY_TOL,
            };
            if bad {
                return Err(LpError::Numerical(format!("reduced cost {d} of variable {j} is not dual feasible")));
            }
        }
    }
    Ok(value[..n].iter().zip(lp.lower.iter().zip(&lp.upper)).map(|(v, (lo, hi))| v.clamp(*lo, *hi)).collect())
}
