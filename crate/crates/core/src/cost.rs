//! Stochastic piecewise-linear stage cost.
//!
//! Each term acts on the affine argument
//!
//! ```text
//! arg = a_delta * delta - a_charge * u⁺ / mu_c + a_discharge * mu_d * u⁻
//!       + a_flow * inflow + a_const(t)
//! ```
//!
//! and contributes `p * max(arg, 0)` (positive-part terms) or `p * arg`
//! (linear terms), with `p` drawn from the term's price process.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::storage::ValidatedStorage;

const CONVEXITY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("term {term}: coefficient `{field}` is not finite")]
    NonFinite { term: usize, field: &'static str },
    #[error("term {term}: price bounds [{low}, {high}] are invalid")]
    PriceBounds { term: usize, low: f64, high: f64 },
    #[error("term {term}: positive-part terms need nonnegative prices (p_min = {p_min})")]
    NegativePrice { term: usize, p_min: f64 },
    #[error("term {term}: price schedule is empty")]
    EmptySchedule { term: usize },
    #[error(
        "cost is not convex in the storage operation: worst slope change at u = 0 is {jump} \
         (charging/discharging simultaneously would lower the cost)"
    )]
    NonConvex { jump: f64 },
    #[error("cost has {expected} terms but the realization carries {got} prices")]
    RealizationSize { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TermKind {
    PositivePart,
    Linear,
}

/// Coefficient process of one cost term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriceProcess {
    Constant(f64),
    /// Deterministic table indexed by `t mod len`.
    Schedule(Vec<f64>),
    /// `day` during `7 <= t mod 24 < 19`, `night` otherwise.
    DayNight { day: f64, night: f64 },
    /// I.i.d. uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
}

impl PriceProcess {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            PriceProcess::Constant(p) => (*p, *p),
            PriceProcess::Schedule(v) => v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(*p), hi.max(*p))),
            PriceProcess::DayNight { day, night } => (day.min(*night), day.max(*night)),
            PriceProcess::Uniform { low, high } => (*low, *high),
        }
    }

    /// Price at period `t` for deterministic processes, `None` for stochastic ones.
    pub fn deterministic_at(&self, t: u64) -> Option<f64> {
        match self {
            PriceProcess::Constant(p) => Some(*p),
            PriceProcess::Schedule(v) => Some(v[(t % v.len() as u64) as usize]),
            PriceProcess::DayNight { day, night } => Some(if is_day(t) { *day } else { *night }),
            PriceProcess::Uniform { .. } => None,
        }
    }
}

pub fn is_day(t: u64) -> bool {
    (7..19).contains(&(t % 24))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTerm {
    pub kind: TermKind,
    pub alpha_delta: f64,
    pub alpha_charge: f64,
    pub alpha_discharge: f64,
    pub alpha_flow: f64,
    /// Period-of-day constant, indexed by `t mod len`; empty means zero.
    #[serde(default)]
    pub alpha_const: Vec<f64>,
    pub price: PriceProcess,
}

impl CostTerm {
    pub fn positive_part(alpha_delta: f64, alpha_charge: f64, alpha_discharge: f64, alpha_flow: f64, price: PriceProcess) -> Self {
        Self { kind: TermKind::PositivePart, alpha_delta, alpha_charge, alpha_discharge, alpha_flow, alpha_const: Vec::new(), price }
    }

    pub fn linear(alpha_delta: f64, alpha_charge: f64, alpha_discharge: f64, alpha_flow: f64, price: PriceProcess) -> Self {
        Self { kind: TermKind::Linear, ..Self::positive_part(alpha_delta, alpha_charge, alpha_discharge, alpha_flow, price) }
    }

    pub fn constant_at(&self, t: u64) -> f64 {
        if self.alpha_const.is_empty() {
            0.0
        } else {
            self.alpha_const[(t % self.alpha_const.len() as u64) as usize]
        }
    }

    /// Argument slope in `u⁺`.
    pub fn charge_coeff(&self, storage: &ValidatedStorage) -> f64 {
        -self.alpha_charge / storage.mu_c
    }

    /// Argument slope in `u⁻`.
    pub fn discharge_coeff(&self, storage: &ValidatedStorage) -> f64 {
        self.alpha_discharge * storage.mu_d
    }

    /// Change in the argument's slope across `u = 0` (right minus left).
    fn kink_jump(&self, storage: &ValidatedStorage) -> f64 {
        self.charge_coeff(storage) + self.discharge_coeff(storage)
    }

    pub fn argument(&self, storage: &ValidatedStorage, t: u64, delta: f64, u: f64, inflow: f64) -> f64 {
        self.alpha_delta * delta
            + self.charge_coeff(storage) * u.max(0.0)
            + self.discharge_coeff(storage) * (-u).max(0.0)
            + self.alpha_flow * inflow
            + self.constant_at(t)
    }
}

/// Realized stochastic parameters at one bus and period.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRealization {
    pub period: u64,
    pub delta: f64,
    pub prices: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CostModel {
    terms: Vec<CostTerm>,
}

impl CostModel {
    pub fn new(terms: Vec<CostTerm>) -> Result<Self, CostError> {
        for (i, term) in terms.iter().enumerate() {
            let coeffs = [
                ("alpha_delta", term.alpha_delta),
                ("alpha_charge", term.alpha_charge),
                ("alpha_discharge", term.alpha_discharge),
                ("alpha_flow", term.alpha_flow),
            ];
            for (field, v) in coeffs {
                if !v.is_finite() {
                    return Err(CostError::NonFinite { term: i, field });
                }
            }
            if term.alpha_const.iter().any(|c| !c.is_finite()) {
                return Err(CostError::NonFinite { term: i, field: "alpha_const" });
            }
            if matches!(&term.price, PriceProcess::Schedule(v) if v.is_empty()) {
                return Err(CostError::EmptySchedule { term: i });
            }
            let (low, high) = term.price.bounds();
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return Err(CostError::PriceBounds { term: i, low, high });
            }
            if term.kind == TermKind::PositivePart && low < 0.0 {
                return Err(CostError::NegativePrice { term: i, p_min: low });
            }
        }
        Ok(Self { terms })
    }

    pub fn terms(&self) -> &[CostTerm] {
        &self.terms
    }

    /// Symmetric balancing cost `q·|r|` on the residual imbalance.
    pub fn balancing(q: f64) -> Self {
        Self::new(vec![
            CostTerm::positive_part(1.0, 1.0, 1.0, 1.0, PriceProcess::Constant(q)),
            CostTerm::positive_part(-1.0, -1.0, -1.0, -1.0, PriceProcess::Constant(q)),
        ])
        .expect("balancing cost is well formed")
    }

    /// Penalizes only unserved demand `(-r)⁺`, with price process `price`.
    pub fn unserved_demand(price: PriceProcess) -> Self {
        Self::new(vec![CostTerm::positive_part(-1.0, -1.0, -1.0, -1.0, price)]).expect("well formed")
    }

    /// Deterministic prices at period `t`, with stochastic ones left at their midpoint.
    pub fn nominal_prices(&self, t: u64) -> Vec<f64> {
        self.terms
            .iter()
            .map(|term| {
                term.price.deterministic_at(t).unwrap_or_else(|| {
                    let (lo, hi) = term.price.bounds();
                    0.5 * (lo + hi)
                })
            })
            .collect()
    }

    /// Rejects costs that are not convex in `u` for some admissible price
    /// realization. Away from `u = 0` every kink is a zero crossing of a
    /// positive part and therefore convex; at `u = 0` the worst case has every
    /// positive-part term with a concave argument active.
    pub fn check_convexity(&self, storage: &ValidatedStorage) -> Result<(), CostError> {
        let mut worst = 0.0;
        for term in &self.terms {
            let jump = term.kink_jump(storage);
            let (lo, hi) = term.price.bounds();
            worst += match term.kind {
                TermKind::Linear => (lo * jump).min(hi * jump),
                TermKind::PositivePart => (lo * jump).min(hi * jump).min(0.0),
            };
        }
        if worst < -CONVEXITY_TOL {
            return Err(CostError::NonConvex { jump: worst });
        }
        Ok(())
    }

    /// Greatest lower and least upper bound of the sub-derivatives of the
    /// stage cost in `u`, over all admissible prices, imbalances and flows.
    ///
    /// Per branch (`u > 0` uses the charge slopes, `u < 0` the discharge
    /// slopes) each term contributes `indicator * p * slope`, where the
    /// indicator ranges over `{0, 1}` for positive parts and is fixed at 1 for
    /// linear terms; the extremes are summed across terms.
    pub fn subderivative_bounds(&self, storage: &ValidatedStorage) -> Result<(f64, f64), CostError> {
        self.check_convexity(storage)?;
        let mut d_lo = f64::INFINITY;
        let mut d_hi = f64::NEG_INFINITY;
        for charging in [true, false] {
            let (mut lo, mut hi) = (0.0, 0.0);
            for term in &self.terms {
                // d(arg)/du: u⁺ grows with u, u⁻ shrinks with u
                let slope = if charging { term.charge_coeff(storage) } else { -term.discharge_coeff(storage) };
                let (p_lo, p_hi) = term.price.bounds();
                let mut cands = vec![p_lo * slope, p_hi * slope];
                if term.kind == TermKind::PositivePart {
                    cands.push(0.0);
                }
                lo += cands.iter().copied().fold(f64::INFINITY, f64::min);
                hi += cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            }
            d_lo = d_lo.min(lo);
            d_hi = d_hi.max(hi);
        }
        Ok((d_lo, d_hi))
    }

    pub fn evaluate(&self, storage: &ValidatedStorage, real: &CostRealization, u: f64, inflow: f64) -> f64 {
        assert_eq!(real.prices.len(), self.terms.len(), "price vector does not match cost terms");
        self.terms
            .iter()
            .zip(&real.prices)
            .map(|(term, p)| {
                let arg = term.argument(storage, real.period, real.delta, u, inflow);
                match term.kind {
                    TermKind::PositivePart => p * arg.max(0.0),
                    TermKind::Linear => p * arg,
                }
            })
            .sum()
    }
}

pub fn evaluate_cost(model: &CostModel, storage: &ValidatedStorage, real: &CostRealization, u: f64, inflow: f64) -> f64 {
    model.evaluate(storage, real, u, inflow)
}

pub fn subderivative_bounds(model: &CostModel, storage: &ValidatedStorage) -> Result<(f64, f64), CostError> {
    model.subderivative_bounds(storage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::StorageSpec;
    use proptest::prelude::*;

    fn storage(mu: f64) -> ValidatedStorage {
        StorageSpec::new(0.0, 1.0, -0.1, 0.1, mu, mu, 1.0).validate().unwrap()
    }

    fn day_night() -> CostModel {
        CostModel::unserved_demand(PriceProcess::DayNight { day: 3.0, night: 1.0 })
    }

    fn real(period: u64, delta: f64, prices: Vec<f64>) -> CostRealization {
        CostRealization { period, delta, prices }
    }

    /// Independent slope oracle: every (branch, indicator, price-extreme)
    /// combination listed explicitly and the extreme sums taken.
    fn enumerate_slopes(model: &CostModel, s: &ValidatedStorage) -> (f64, f64) {
        let n = model.terms().len();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for branch in 0..2 {
            for mask in 0..(4usize.pow(n as u32)) {
                let mut total = 0.0;
                let mut m = mask;
                for term in model.terms() {
                    let choice = m % 4;
                    m /= 4;
                    let (p_lo, p_hi) = term.price.bounds();
                    let p = if choice % 2 == 0 { p_lo } else { p_hi };
                    let active = choice < 2 || term.kind == TermKind::Linear;
                    let slope = if branch == 0 { -term.alpha_charge / s.mu_c } else { -term.alpha_discharge * s.mu_d };
                    if active {
                        total += p * slope;
                    }
                }
                lo = lo.min(total);
                hi = hi.max(total);
            }
        }
        (lo, hi)
    }

    #[test]
    fn balancing_cost_examples() {
        let s = storage(1.0);
        let model = CostModel::balancing(1.0);
        assert!((model.evaluate(&s, &real(1, 0.2, vec![1.0, 1.0]), 0.0, 0.0) - 0.2).abs() < 1e-15);
        assert_eq!(model.subderivative_bounds(&s).unwrap(), (-1.0, 1.0));
        assert_eq!(enumerate_slopes(&model, &s), (-1.0, 1.0));
    }

    #[test]
    fn day_night_cost_examples() {
        let s = storage(0.95);
        let model = day_night();
        // t = 12 is daytime: 3 * (0.1)⁺
        let p = model.nominal_prices(12);
        assert_eq!(p, vec![3.0]);
        assert!((model.evaluate(&s, &real(12, -0.1, p), 0.0, 0.0) - 0.3).abs() < 1e-15);
        assert_eq!(model.nominal_prices(3), vec![1.0]);
        assert_eq!(model.nominal_prices(19), vec![1.0]);
        assert_eq!(model.nominal_prices(7), vec![3.0]);
        let (lo, hi) = model.subderivative_bounds(&s).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 3.0 / 0.95).abs() < 1e-12);
        assert!((hi - 3.15789).abs() < 1e-5);
        let (olo, ohi) = enumerate_slopes(&model, &s);
        assert!((lo - olo).abs() < 1e-15 && (hi - ohi).abs() < 1e-15);
    }

    #[test]
    fn asymmetric_balancing_bounds() {
        let s = storage(1.0);
        let model = CostModel::new(vec![
            CostTerm::positive_part(1.0, 1.0, 1.0, 0.0, PriceProcess::Constant(2.0)),
            CostTerm::positive_part(-1.0, -1.0, -1.0, 0.0, PriceProcess::Constant(1.0)),
        ])
        .unwrap();
        assert_eq!(model.subderivative_bounds(&s).unwrap(), (-2.0, 1.0));
        assert_eq!(enumerate_slopes(&model, &s), (-2.0, 1.0));
    }

    #[test]
    fn arbitrage_linear_term() {
        let s = storage(1.0);
        // cost p * (u⁺/mu_c - mu_d u⁻) written as a linear term on -h(u)
        let model = CostModel::new(vec![CostTerm::linear(0.0, -1.0, -1.0, 0.0, PriceProcess::Constant(5.0))]).unwrap();
        assert!((model.evaluate(&s, &real(1, 0.0, vec![5.0]), 1.0, 0.0) - 5.0).abs() < 1e-15);
        assert_eq!(model.subderivative_bounds(&s).unwrap(), (5.0, 5.0));
    }

    #[test]
    fn surplus_penalty_with_losses_is_rejected() {
        // (r)⁺ with lossy conversion is concave at u = 0 when active
        let s = storage(0.9);
        let model = CostModel::new(vec![CostTerm::positive_part(1.0, 1.0, 1.0, 0.0, PriceProcess::Constant(1.0))]).unwrap();
        assert!(matches!(model.check_convexity(&s), Err(CostError::NonConvex { .. })));
        // lossless is fine
        assert!(model.check_convexity(&storage(1.0)).is_ok());
    }

    #[test]
    fn malformed_terms_rejected() {
        let bad = CostTerm::positive_part(1.0, 1.0, 1.0, 0.0, PriceProcess::Uniform { low: -1.0, high: 1.0 });
        assert!(matches!(CostModel::new(vec![bad]), Err(CostError::NegativePrice { .. })));
        let bad = CostTerm::linear(1.0, 1.0, 1.0, 0.0, PriceProcess::Uniform { low: 2.0, high: 1.0 });
        assert!(matches!(CostModel::new(vec![bad]), Err(CostError::PriceBounds { .. })));
        let bad = CostTerm::linear(f64::NAN, 1.0, 1.0, 0.0, PriceProcess::Constant(1.0));
        assert!(matches!(CostModel::new(vec![bad]), Err(CostError::NonFinite { .. })));
        let bad = CostTerm::linear(1.0, 1.0, 1.0, 0.0, PriceProcess::Schedule(vec![]));
        assert!(matches!(CostModel::new(vec![bad]), Err(CostError::EmptySchedule { .. })));
    }

    fn models() -> Vec<(CostModel, ValidatedStorage)> {
        vec![
            (CostModel::balancing(1.0), storage(1.0)),
            (day_night(), storage(0.95)),
            (
                CostModel::new(vec![
                    CostTerm::positive_part(-1.0, -1.0, -1.0, -1.0, PriceProcess::Uniform { low: 0.5, high: 2.0 }),
                    CostTerm::linear(0.0, -1.0, -1.0, 0.0, PriceProcess::Uniform { low: 0.0, high: 1.0 }),
                ])
                .unwrap(),
                storage(0.8),
            ),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]
        #[test]
        fn finite_difference_slopes_within_bounds(
            which in 0usize..3, u in -0.1..0.1f64, delta in -1.0..1.0f64,
            inflow in -0.5..0.5f64, pfrac in 0.0..=1.0f64, t in 0u64..48,
        ) {
            let (model, s) = &models()[which];
            let (lo, hi) = model.subderivative_bounds(s).unwrap();
            let prices: Vec<f64> = model.terms().iter().map(|term| {
                term.price.deterministic_at(t).unwrap_or_else(|| {
                    let (a, b) = term.price.bounds();
                    a + pfrac * (b - a)
                })
            }).collect();
            let r = real(t, delta, prices);
            let h = 1e-6;
            let slope = (model.evaluate(s, &r, u + h, inflow) - model.evaluate(s, &r, u, inflow)) / h;
            prop_assert!(slope >= lo - 1e-7 && slope <= hi + 1e-7, "slope {} outside [{}, {}]", slope, lo, hi);
        }

        #[test]
        fn midpoint_convexity(
            which in 0usize..3, a in -0.1..0.1f64, b in -0.1..0.1f64,
            delta in -1.0..1.0f64, inflow in -0.5..0.5f64, t in 0u64..48,
        ) {
            let (model, s) = &models()[which];
            let r = real(t, delta, model.nominal_prices(t));
            let mid = model.evaluate(s, &r, 0.5 * (a + b), inflow);
            let avg = 0.5 * (model.evaluate(s, &r, a, inflow) + model.evaluate(s, &r, b, inflow));
            prop_assert!(mid <= avg + 1e-9);
        }

        #[test]
        fn zero_prices_give_zero_cost(which in 0usize..3, u in -0.1..0.1f64, delta in -1.0..1.0f64, inflow in -1.0..1.0f64) {
            let (model, s) = &models()[which];
            let r = real(1, delta, vec![0.0; model.terms().len()]);
            prop_assert_eq!(model.evaluate(s, &r, u, inflow), 0.0);
        }
    }
}
