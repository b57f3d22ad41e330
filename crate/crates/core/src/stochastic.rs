//! Disturbance processes and return-time analysis of finite Markov chains.
//!
//! Every draw comes from a ChaCha stream keyed by `(seed, stream, t)`, so an
//! i.i.d. sample depends only on those three values and not on how many
//! draws were taken before it.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostModel, PriceProcess};

/// Laplace samples beyond this many scale units are redrawn.
pub const LAPLACE_TRUNCATION: f64 = 8.0;
/// Row-sum tolerance for transition matrices.
pub const ROW_SUM_TOL: f64 = 1e-12;

const WORDS_PER_PERIOD: u128 = 1 << 10;
const MARKOV_STREAM: u64 = 1 << 40;
const PRICE_STREAM: u64 = 1 << 41;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StochasticError {
    #[error("{0} must be finite")]
    NonFinite(&'static str),
    #[error("laplace sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("empirical distribution needs a nonempty support")]
    EmptySupport,
    #[error("empirical weights must be nonnegative with a positive sum and match the support length")]
    Weights,
    #[error("transition matrix must be square and nonempty")]
    Shape,
    #[error("transition row {row} is not a probability vector (sum {sum})")]
    NotStochastic { row: usize, sum: f64 },
    #[error("markov chain is not irreducible: state {0} is not mutually reachable with state 0")]
    Reducible(usize),
    #[error("markov chain is periodic with period {0}")]
    Periodic(usize),
    #[error("initial state {state} out of range for {states} states")]
    InitialState { state: usize, states: usize },
    #[error("state {state} needs {expected} per-bus disturbances, got {got}")]
    Dimension { state: usize, expected: usize, got: usize },
    #[error("singular first-passage system")]
    Singular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
    #[serde(default)]
    pub initial_state: usize,
}

impl MarkovChain {
    pub fn new(transition: Vec<Vec<f64>>, initial_state: usize) -> Result<Self, StochasticError> {
        let chain = Self { transition, initial_state };
        chain.validate()?;
        Ok(chain)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    /// Row-stochastic, irreducible and aperiodic.
    pub fn validate(&self) -> Result<(), StochasticError> {
        let n = self.states();
        if n == 0 || self.transition.iter().any(|r| r.len() != n) {
            return Err(StochasticError::Shape);
        }
        if self.initial_state >= n {
            return Err(StochasticError::InitialState { state: self.initial_state, states: n });
        }
        for (i, row) in self.transition.iter().enumerate() {
            if row.iter().any(|p| !p.is_finite()) {
                return Err(StochasticError::NonFinite("transition probability"));
            }
            let sum: f64 = row.iter().sum();
            if row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(StochasticError::NotStochastic { row: i, sum });
            }
        }
        let forward = bfs_levels(n, |i| self.successors(i).collect());
        let backward = bfs_levels(n, |j| (0..n).filter(|&i| self.transition[i][j] > 0.0).collect());
        if let Some(v) = (0..n).find(|&v| forward[v].is_none() || backward[v].is_none()) {
            return Err(StochasticError::Reducible(v));
        }
        // period = gcd over edges i -> j of level(i) + 1 - level(j)
        let mut period = 0usize;
        for i in 0..n {
            let li = forward[i].unwrap() as i64;
            for j in self.successors(i) {
                let lj = forward[j].unwrap() as i64;
                period = gcd(period, (li + 1 - lj).unsigned_abs() as usize);
            }
        }
        if period != 1 {
            return Err(StochasticError::Periodic(period));
        }
        Ok(())
    }

    fn successors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.transition[i].iter().enumerate().filter(|(_, p)| **p > 0.0).map(|(j, _)| j)
    }

    /// Next state given a uniform draw in `[0, 1)`.
    pub fn next_state(&self, state: usize, draw: f64) -> usize {
        let row = &self.transition[state];
        let mut acc = 0.0;
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if draw < acc {
                return j;
            }
        }
        // round-off in the row sum: fall back to the last reachable state
        row.iter().rposition(|p| *p > 0.0).unwrap_or(state)
    }

    /// Stationary distribution by power iteration on the lazy chain.
    pub fn stationary_distribution(&self) -> Vec<f64> {
        let n = self.states();
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..1_000_000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                next[i] += 0.5 * pi[i];
                for j in 0..n {
                    next[j] += 0.5 * pi[i] * self.transition[i][j];
                }
            }
            let sum: f64 = next.iter().sum();
            next.iter_mut().for_each(|x| *x /= sum);
            let diff = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            pi = next;
            if diff < 1e-16 {
                break;
            }
        }
        pi
    }
}

fn bfs_levels(n: usize, neighbours: impl Fn(usize) -> Vec<usize>) -> Vec<Option<usize>> {
    let mut level = vec![None; n];
    level[0] = Some(0);
    let mut queue = VecDeque::from([0]);
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i) {
            if level[j].is_none() {
                level[j] = Some(level[i].unwrap() + 1);
                queue.push_back(j);
            }
        }
    }
    level
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// First two moments of the return time to `state`.
///
/// With `m_i` and `s_i` the first two moments of the hitting time of `state`
/// from `i != state`,
/// `m_i = 1 + sum_{j != state} P_ij m_j` and
/// `s_i = 1 + 2 sum_{j != state} P_ij m_j + sum_{j != state} P_ij s_j`;
/// the same one-step expansions from `state` itself give the return moments.
pub fn return_time_moments(chain: &MarkovChain, state: usize) -> Result<(f64, f64), StochasticError> {
    chain.validate()?;
    let n = chain.states();
    if state >= n {
        return Err(StochasticError::InitialState { state, states: n });
    }
    let others: Vec<usize> = (0..n).filter(|&i| i != state).collect();
    let k = others.len();
    let p = &chain.transition;
    let (m, s) = if k == 0 {
        (DVector::zeros(0), DVector::zeros(0))
    } else {
        let a = DMatrix::from_fn(k, k, |r, c| if r == c { 1.0 } else { 0.0 } - p[others[r]][others[c]]);
        let lu = a.lu();
        let m = lu.solve(&DVector::from_element(k, 1.0)).ok_or(StochasticError::Singular)?;
        let rhs = DVector::from_fn(k, |r, _| 1.0 + 2.0 * others.iter().enumerate().map(|(c, &j)| p[others[r]][j] * m[c]).sum::<f64>());
        let s = lu.solve(&rhs).ok_or(StochasticError::Singular)?;
        (m, s)
    };
    let pm: f64 = others.iter().enumerate().map(|(c, &j)| p[state][j] * m[c]).sum();
    let ps: f64 = others.iter().enumerate().map(|(c, &j)| p[state][j] * s[c]).sum();
    Ok((1.0 + pm, 1.0 + 2.0 * pm + ps))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DisturbanceProcess {
    /// Zero-mean Laplace with standard deviation `sigma`, i.i.d. per bus and period.
    IidLaplace { sigma: f64 },
    /// Finite distribution, i.i.d. per bus and period.
    IidEmpirical { support: Vec<f64>, weights: Vec<f64> },
    /// One system-wide chain; `deltas[state][bus]` is the imbalance in each state.
    Markov { chain: MarkovChain, deltas: Vec<Vec<f64>> },
}

impl DisturbanceProcess {
    pub fn validate(&self, buses: usize) -> Result<(), StochasticError> {
        match self {
            Self::IidLaplace { sigma } => {
                if !sigma.is_finite() {
                    return Err(StochasticError::NonFinite("sigma"));
                }
                if *sigma <= 0.0 {
                    return Err(StochasticError::Sigma(*sigma));
                }
            }
            Self::IidEmpirical { support, weights } => {
                if support.is_empty() {
                    return Err(StochasticError::EmptySupport);
                }
                if support.iter().chain(weights).any(|x| !x.is_finite()) {
                    return Err(StochasticError::NonFinite("empirical support or weight"));
                }
                if weights.len() != support.len() || weights.iter().any(|w| *w < 0.0) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(StochasticError::Weights);
                }
            }
            Self::Markov { chain, deltas } => {
                chain.validate()?;
                if deltas.len() != chain.states() {
                    return Err(StochasticError::Shape);
                }
                for (state, row) in deltas.iter().enumerate() {
                    if row.len() != buses {
                        return Err(StochasticError::Dimension { state, expected: buses, got: row.len() });
                    }
                    if row.iter().any(|x| !x.is_finite()) {
                        return Err(StochasticError::NonFinite("markov disturbance"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest `|delta|` the process can produce.
    pub fn max_abs(&self) -> f64 {
        match self {
            Self::IidLaplace { sigma } => LAPLACE_TRUNCATION * sigma / std::f64::consts::SQRT_2,
            Self::IidEmpirical { support, .. } => support.iter().fold(0.0, |m, x| m.max(x.abs())),
            Self::Markov { deltas, .. } => deltas.iter().flatten().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

fn stream_rng(seed: u64, stream: u64, t: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(t as u128 * WORDS_PER_PERIOD);
    rng
}

/// Truncated Laplace draw with standard deviation `sigma`.
pub fn laplace(rng: &mut impl Rng, sigma: f64) -> f64 {
    let b = sigma / std::f64::consts::SQRT_2;
    loop {
        let u: f64 = rng.gen::<f64>() - 0.5;
        let x = -b * u.signum() * (1.0 - 2.0 * u.abs()).ln();
        if x.abs() <= LAPLACE_TRUNCATION * b {
            return x;
        }
    }
}

fn empirical(rng: &mut impl Rng, support: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    let draw = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (x, w) in support.iter().zip(weights) {
        acc += w;
        if draw < acc {
            return *x;
        }
    }
    support[weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)]
}

/// Realized prices of every term of `cost` at bus `bus` and period `t`.
pub fn sample_prices(cost: &CostModel, seed: u64, bus: usize, t: u64) -> Vec<f64> {
    cost.terms()
        .iter()
        .enumerate()
        .map(|(l, term)| match term.price {
            PriceProcess::Uniform { low, high } => {
                let mut rng = stream_rng(seed, PRICE_STREAM + ((bus as u64) << 16) + l as u64, t);
                low + (high - low) * rng.gen::<f64>()
            }
            ref p => p.deterministic_at(t).expect("non-random price process"),
        })
        .collect()
}

/// Sequential disturbance sampler for a fixed seed.
#[derive(Debug, Clone)]
pub struct DisturbanceSampler {
    process: DisturbanceProcess,
    seed: u64,
    buses: usize,
    t: u64,
    state: usize,
}

impl DisturbanceSampler {
    pub fn new(process: DisturbanceProcess, seed: u64, buses: usize) -> Result<Self, StochasticError> {
        process.validate(buses)?;
        let state = match &process {
            DisturbanceProcess::Markov { chain, .. } => chain.initial_state,
            _ => 0,
        };
        Ok(Self { process, seed, buses, t: 0, state })
    }

    /// Index of the next period to be drawn.
    pub fn period(&self) -> u64 {
        self.t
    }

    /// Current chain state (always 0 for i.i.d. processes).
    pub fn state(&self) -> usize {
        self.state
    }

    /// Per-bus disturbances of the next period.
    pub fn next_deltas(&mut self) -> Vec<f64> {
        let t = self.t;
        self.t += 1;
        match &self.process {
            DisturbanceProcess::IidLaplace { sigma } => {
                (0..self.buses).map(|v| laplace(&mut stream_rng(self.seed, v as u64, t), *sigma)).collect()
            }
            DisturbanceProcess::IidEmpirical { support, weights } => (0..self.buses)
                .map(|v| empirical(&mut stream_rng(self.seed, v as u64, t), support, weights))
                .collect(),
            DisturbanceProcess::Markov { chain, deltas } => {
                if t > 0 {
                    let draw = stream_rng(self.seed, MARKOV_STREAM, t).gen::<f64>();
                    self.state = chain.next_state(self.state, draw);
                }
                deltas[self.state].clone()
            }
        }
    }
}
