//! Command-line front end.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::planner::{BusParams, ControllerParams, WeightMode};
use crate::policy::{Policy, PolicyKind};
use crate::scenario::{load_scenario, LoadedScenario};
use crate::sim::{compare, cost_estimate, run, ComparePoint, Estimate, SimError, SimulationTrace};
use crate::stochastic::{return_time_moments, DisturbanceProcess};

pub const TOOL: &str = env!("CARGO_PKG_NAME");
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "storenet", version, about = "Plan, run and audit online Lyapunov control of storage networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load and validate a scenario file.
    Validate { scenario: PathBuf },
    /// Compute controller parameters and write the plan report.
    Plan {
        scenario: PathBuf,
        /// Report file; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the certified sub-optimality bound.
    Bound {
        scenario: PathBuf,
        /// Use the return-time bound of a Markov disturbance.
        #[arg(long)]
        markov: bool,
    },
    /// Simulate one policy over one or more seeds.
    Simulate {
        scenario: PathBuf,
        #[arg(long, value_enum)]
        policy: PolicyKind,
        /// Number of seeds, starting at the scenario seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Directory for traces and the summary report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every policy with common random numbers and write the sweep table.
    Compare {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Print the KVL matrix and its diagnostics.
    Kmatrix { scenario: PathBuf },
}

/// Parses `args` and runs the selected command.
pub fn run_cli<I, T>(args: I, stdout: &mut dyn Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    dispatch(cli.command, stdout)
}

pub fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Validate { scenario } => {
            let sc = load(&scenario)?;
            writeln!(
                out,
                "ok: {} buses, {} edges, horizon {}, hash {}",
                sc.scenario.network.bus_count(),
                sc.scenario.network.edge_count(),
                sc.scenario.horizon,
                sc.hash()
            )?;
        }
        Command::Plan { scenario, out: path } => {
            let sc = load(&scenario)?;
            let params = sc.scenario.plan().context("planning failed")?;
            let text = json(&plan_report(&sc, &params))?;
            match path {
                Some(p) => write_atomic(&p, text.as_bytes())?,
                None => out.write_all(text.as_bytes())?,
            }
        }
        Command::Bound { scenario, markov } => {
            let sc = load(&scenario)?;
            let params = sc.scenario.plan().context("planning failed")?;
            if markov {
                let DisturbanceProcess::Markov { chain, .. } = &sc.scenario.disturbance else {
                    bail!("--markov needs a markov disturbance in the scenario");
                };
                let (mean, second) = return_time_moments(chain, chain.initial_state)?;
                writeln!(out, "return time to state {}: E[T] = {mean}, E[T^2] = {second}", chain.initial_state)?;
            }
            let bound = sc.scenario.certified_bound(&params)?;
            for (id, p) in sc.bus_ids().iter().zip(&params.buses) {
                writeln!(out, "bus {id}: gamma = {}, w = {}, m_u = {}, m_s = {}, bound = {}", p.gamma, p.w, p.m_u, p.m_s, p.bound)?;
            }
            writeln!(out, "certified bound: {bound}")?;
        }
        Command::Simulate { scenario, policy, seeds, out: dir } => simulate(&scenario, policy, seeds, dir.as_deref(), out)?,
        Command::Compare { scenario, out: dir, seeds } => {
            let sc = load(&scenario)?;
            let seeds = seed_list(&sc, seeds)?;
            let points = compare(&sc.scenario, &seeds)?;
            let csv = compare_csv(&points)?;
            let report = json(&CompareReport {
                tool: TOOL,
                version: VERSION,
                scenario_hash: sc.hash(),
                seeds: seeds.clone(),
                lower_bound_note: LOWER_BOUND_NOTE,
                upper_pct_savings_unit: "percent",
                points: &points,
            })?;
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            write_atomic(&dir.join("compare.csv"), csv.as_bytes())?;
            write_atomic(&dir.join("report.json"), report.as_bytes())?;
            writeln!(out, "wrote {} and {}", dir.join("compare.csv").display(), dir.join("report.json").display())?;
        }
        Command::Kmatrix { scenario } => {
            let sc = load(&scenario)?;
            let net = &sc.scenario.network;
            let k = net.k_matrix();
            writeln!(out, "edges: {}", sc.edge_ids().join(","))?;
            for row in k {
                let cells: Vec<String> = row.iter().map(|x| format!("{x:.12}")).collect();
                writeln!(out, "{}", cells.join(" "))?;
            }
            let (m, n) = (net.edge_count(), net.bus_count());
            writeln!(out, "rows: {} (expected m - n + 1 = {})", k.len(), m + 1 - n)?;
            writeln!(out, "max |K H|: {:e}", net.kvl_residual())?;
        }
    }
    Ok(())
}

const LOWER_BOUND_NOTE: &str = "lower_bound = J(lyapunov) - M/W, a lower envelope for the optimal average cost";

fn load(path: &Path) -> Result<LoadedScenario> {
    load_scenario(path).with_context(|| format!("loading {}", path.display()))
}

fn seed_list(sc: &LoadedScenario, k: u64) -> Result<Vec<u64>> {
    if k == 0 {
        bail!("--seeds must be at least 1");
    }
    Ok((0..k).map(|i| sc.scenario.seed.wrapping_add(i)).collect())
}

fn json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes through a temporary file in the target directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct BusPlan<'a> {
    id: &'a str,
    #[serde(flatten)]
    params: &'a BusParams,
}

#[derive(Serialize)]
struct PlanReport<'a> {
    tool: &'static str,
    version: &'static str,
    scenario_hash: String,
    mode: WeightMode,
    buses: Vec<BusPlan<'a>>,
    certified_bound: f64,
}

fn plan_report<'a>(sc: &'a LoadedScenario, params: &'a ControllerParams) -> PlanReport<'a> {
    PlanReport {
        tool: TOOL,
        version: VERSION,
        scenario_hash: sc.hash(),
        mode: params.mode,
        buses: sc.file.buses.iter().zip(&params.buses).map(|(b, p)| BusPlan { id: &b.id, params: p }).collect(),
        certified_bound: params.certified_bound,
    }
}

#[derive(Serialize)]
struct CompareReport<'a> {
    tool: &'static str,
    version: &'static str,
    scenario_hash: String,
    seeds: Vec<u64>,
    lower_bound_note: &'static str,
    upper_pct_savings_unit: &'static str,
    points: &'a [ComparePoint],
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".to_string(), |v| v.to_string())
}

/// The sweep table: one row per capacity point.
pub fn compare_csv(points: &[ComparePoint]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["s_max", "j_no_storage", "j_greedy", "j_lyapunov", "lower_bound", "upper_pct_savings"])?;
    for p in points {
        let j = |k: PolicyKind| p.summary.j.get(&k).map(|e| e.mean);
        w.write_record([
            p.s_max.to_string(),
            fmt_opt(j(PolicyKind::NoStorage)),
            fmt_opt(j(PolicyKind::Greedy)),
            fmt_opt(j(PolicyKind::Lyapunov)),
            p.summary.lower_bound.to_string(),
            fmt_opt(p.summary.pct_savings_upper_bound.map(|x| 100.0 * x)),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Per-period trace: `t,bus,s,u,cost` then one `flow:<edge-id>` column per edge.
pub fn trace_csv(trace: &SimulationTrace, bus_ids: &[&str], edge_ids: &[&str]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string(), "bus".into(), "s".into(), "u".into(), "cost".into()];
    header.extend(edge_ids.iter().map(|e| format!("flow:{e}")));
    w.write_record(&header)?;
    for r in &trace.records {
        for (v, id) in bus_ids.iter().enumerate() {
            let mut row = vec![r.t.to_string(), id.to_string(), r.levels[v].to_string(), r.u[v].to_string(), r.costs[v].to_string()];
            row.extend(r.flows.iter().map(|f| f.to_string()));
            w.write_record(&row)?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

#[derive(Serialize)]
struct SeedSummary {
    seed: u64,
    j: f64,
    threshold_flags: usize,
}

#[derive(Serialize)]
struct SimulateReport {
    tool: &'static str,
    version: &'static str,
    scenario_hash: String,
    policy: PolicyKind,
    horizon: u64,
    warmup: u64,
    j: Estimate,
    certified_bound: Option<f64>,
    violation_count: usize,
    threshold_flags: usize,
    seeds: Vec<SeedSummary>,
    violations: BTreeMap<u64, String>,
}

fn simulate(path: &Path, kind: PolicyKind, seeds: u64, dir: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let sc = load(path)?;
    let seeds = seed_list(&sc, seeds)?;
    let (policy, bound) = match kind {
        PolicyKind::Lyapunov => {
            let params = sc.scenario.plan().context("planning failed")?;
            let bound = sc.scenario.certified_bound(&params)?;
            (Policy::Lyapunov(params), Some(bound))
        }
        PolicyKind::Greedy => (Policy::Greedy, None),
        PolicyKind::NoStorage => (Policy::NoStorage, None),
    };
    let results: Vec<Result<SimulationTrace, SimError>> = seeds.par_iter().map(|&s| run(&sc.scenario, &policy, s)).collect();
    let mut traces = Vec::new();
    let mut violations = BTreeMap::new();
    for (seed, r) in seeds.iter().zip(results) {
        match r {
            Ok(tr) => traces.push(tr),
            Err(e @ (SimError::Violation { .. } | SimError::FlowViolation { .. })) => {
                violations.insert(*seed, e.to_string());
            }
            Err(e) => return Err(e).with_context(|| format!("seed {seed}")),
        }
    }
    let report = SimulateReport {
        tool: TOOL,
        version: VERSION,
        scenario_hash: sc.hash(),
        policy: kind,
        horizon: sc.scenario.horizon,
        warmup: sc.scenario.warmup,
        j: cost_estimate(&traces, sc.scenario.warmup),
        certified_bound: bound,
        violation_count: violations.len(),
        threshold_flags: traces.iter().map(SimulationTrace::flag_count).sum(),
        seeds: traces
            .iter()
            .map(|t| SeedSummary {
                seed: t.seed,
                j: cost_estimate(std::slice::from_ref(t), sc.scenario.warmup).mean,
                threshold_flags: t.flag_count(),
            })
            .collect(),
        violations,
    };
    let text = json(&report)?;
    match dir {
        Some(dir) => {
            let bus_ids = sc.bus_ids();
            let edge_ids = sc.edge_ids();
            let files: Vec<(PathBuf, String)> = traces
                .iter()
                .map(|t| Ok((dir.join(format!("trace-{}-seed{}.csv", kind.name(), t.seed)), trace_csv(t, &bus_ids, &edge_ids)?)))
                .collect::<Result<_>>()?;
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            for (p, body) in files {
                write_atomic(&p, body.as_bytes())?;
            }
            write_atomic(&dir.join(format!("simulate-{}.json", kind.name())), text.as_bytes())?;
            writeln!(out, "wrote {} trace(s) to {}", traces.len(), dir.display())?;
        }
        None => out.write_all(text.as_bytes())?,
    }
    if report.violation_count > 0 {
        bail!("{} seed(s) violated storage or flow bounds", report.violation_count);
    }
    Ok(())
}
