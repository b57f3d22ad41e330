//! Controllers: the Lyapunov controller and the greedy and no-storage baselines.

use serde::{Deserialize, Serialize};

use crate::cost::{CostModel, CostRealization};
use crate::network::PowerNetwork;
use crate::online::{solve_period, BusInput, OnlineProblem, OnlineSolution, SolveError, TieBreak};
use crate::planner::ControllerParams;
use crate::storage::{StorageState, ValidatedStorage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    Lyapunov,
    Greedy,
    NoStorage,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::NoStorage, PolicyKind::Greedy, PolicyKind::Lyapunov];

    pub fn name(self) -> &'static str {
        match self {
            Self::Lyapunov => "lyapunov",
            Self::Greedy => "greedy",
            Self::NoStorage => "no-storage",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    Lyapunov(ControllerParams),
    Greedy,
    NoStorage,
}

impl Policy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            Self::Lyapunov(_) => PolicyKind::Lyapunov,
            Self::Greedy => PolicyKind::Greedy,
            Self::NoStorage => PolicyKind::NoStorage,
        }
    }
}

/// The fixed parts of a system shared by every period.
#[derive(Debug, Clone, Copy)]
pub struct System<'a> {
    pub storages: &'a [ValidatedStorage],
    pub costs: &'a [CostModel],
    pub network: &'a PowerNetwork,
}

/// One period of the Lyapunov controller.
pub fn lyapunov_action(
    params: &ControllerParams,
    sys: System<'_>,
    states: &[StorageState],
    realizations: Vec<CostRealization>,
) -> Result<OnlineSolution, SolveError> {
    let buses = realizations
        .into_iter()
        .enumerate()
        .map(|(v, real)| {
            let p = &params.buses[v];
            BusInput::lyapunov(&sys.storages[v], &sys.costs[v], real, states[v], p.gamma, p.w)
        })
        .collect();
    solve_period(&OnlineProblem { buses, network: sys.network }, None)
}

/// Myopic stage-cost minimization subject to the next level staying in
/// bounds, ties toward the smallest `|u|`.
pub fn greedy_action(sys: System<'_>, states: &[StorageState], realizations: Vec<CostRealization>) -> Result<OnlineSolution, SolveError> {
    let buses = realizations
        .into_iter()
        .enumerate()
        .map(|(v, realization)| {
            let st = &sys.storages[v];
            let carry = st.lambda * states[v].level;
            BusInput {
                storage: st,
                cost: &sys.costs[v],
                realization,
                drift: 0.0,
                level_window: Some((st.s_min - carry, st.s_max - carry)),
                idle: false,
            }
        })
        .collect();
    solve_period(&OnlineProblem { buses, network: sys.network }, Some(TieBreak::SmallestMagnitude))
}

/// Storage idle; flows still dispatched to minimize the stage cost.
pub fn no_storage_action(sys: System<'_>, realizations: Vec<CostRealization>) -> Result<OnlineSolution, SolveError> {
    let buses = realizations
        .into_iter()
        .enumerate()
        .map(|(v, realization)| BusInput {
            storage: &sys.storages[v],
            cost: &sys.costs[v],
            realization,
            drift: 0.0,
            level_window: None,
            idle: true,
        })
        .collect();
    solve_period(&OnlineProblem { buses, network: sys.network }, None)
}

/// Dispatches to the controller of `policy`.
pub fn act(policy: &Policy, sys: System<'_>, states: &[StorageState], realizations: Vec<CostRealization>) -> Result<OnlineSolution, SolveError> {
    match policy {
        Policy::Lyapunov(params) => lyapunov_action(params, sys, states, realizations),
        Policy::Greedy => greedy_action(sys, states, realizations),
        Policy::NoStorage => no_storage_action(sys, realizations),
    }
}
