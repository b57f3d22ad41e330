//! Scenario files: a versioned JSON document that fully determines a run.
//!
//! ```json
//! {
//!   "version": 1,
//!   "buses": [{ "id": "b0", "storage": { ... }, "cost": [ ... ] }],
//!   "network": { "edges": [{ "id": "e0", "from": "b0", "to": "b1", "beta": 1.0, "f_max": 0.149 }] },
//!   "disturbance": { "kind": "iid_laplace", "sigma": 0.149 },
//!   "horizon": 1000,
//!   "seed": 1
//! }
//! ```
//!
//! Loading reports three error classes: malformed JSON, documents that do
//! not fit the schema, and documents whose values are inconsistent.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cost::{CostModel, CostTerm};
use crate::network::{Edge, PowerNetwork};
use crate::planner::WeightMode;
use crate::policy::PolicyKind;
use crate::sim::{Scenario, Sweep};
use crate::stochastic::DisturbanceProcess;
use crate::storage::StorageSpec;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("invalid value at {path}: {message}")]
    Semantic { path: String, message: String },
}

fn schema(path: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Schema { path: path.into(), message: message.to_string() }
}

fn semantic(path: impl Into<String>, message: impl ToString) -> ScenarioError {
    ScenarioError::Semantic { path: path.into(), message: message.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusEntry {
    pub id: String,
    pub storage: StorageSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_level: Option<f64>,
    pub cost: Vec<CostTerm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub id: String,
    pub from: String,
    pub to: String,
    pub beta: f64,
    pub f_max: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkEntry {
    #[serde(default)]
    pub edges: Vec<EdgeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepEntry {
    pub s_max: Vec<f64>,
    pub u_ratio: f64,
}

fn default_policy() -> PolicyKind {
    PolicyKind::Lyapunov
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub buses: Vec<BusEntry>,
    #[serde(default)]
    pub network: NetworkEntry,
    pub disturbance: DisturbanceProcess,
    pub horizon: u64,
    pub seed: u64,
    #[serde(default)]
    pub warmup: u64,
    #[serde(default = "default_policy")]
    pub policy: PolicyKind,
    #[serde(default)]
    pub planner: WeightMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepEntry>,
}

/// A loaded and validated scenario together with its source document.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub file: ScenarioFile,
    pub scenario: Scenario,
}

impl LoadedScenario {
    pub fn bus_ids(&self) -> Vec<&str> {
        self.file.buses.iter().map(|b| b.id.as_str()).collect()
    }

    pub fn edge_ids(&self) -> Vec<&str> {
        self.file.network.edges.iter().map(|e| e.id.as_str()).collect()
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        scenario_hash(&self.file)
    }
}

/// Canonical text form: pretty-printed JSON with a trailing newline.
pub fn to_canonical_string(file: &ScenarioFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("scenario serializes");
    s.push('\n');
    s
}

pub fn scenario_hash(file: &ScenarioFile) -> String {
    hex::encode(Sha256::digest(to_canonical_string(file).as_bytes()))
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<LoadedScenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    parse_scenario(&text)
}

pub fn parse_scenario(text: &str) -> Result<LoadedScenario, ScenarioError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    let file: ScenarioFile = serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        schema(path, e.into_inner())
    })?;
    let scenario = build_scenario(&file)?;
    Ok(LoadedScenario { file, scenario })
}

/// Validates a scenario document and assembles the runtime scenario.
pub fn build_scenario(file: &ScenarioFile) -> Result<Scenario, ScenarioError> {
    if file.version != SCHEMA_VERSION {
        return Err(schema("version", format!("unsupported version {}, expected {SCHEMA_VERSION}", file.version)));
    }
    if file.buses.is_empty() {
        return Err(schema("buses", "at least one bus is required"));
    }
    let mut index = HashMap::new();
    for (i, bus) in file.buses.iter().enumerate() {
        if index.insert(bus.id.as_str(), i).is_some() {
            return Err(schema(format!("buses[{i}].id"), format!("duplicate bus id {:?}", bus.id)));
        }
    }
    let mut storages = Vec::with_capacity(file.buses.len());
    let mut costs = Vec::with_capacity(file.buses.len());
    let mut initial_levels = Vec::with_capacity(file.buses.len());
    for (i, bus) in file.buses.iter().enumerate() {
        let st = bus.storage.validate().map_err(|e| semantic(format!("buses[{i}].storage"), e))?;
        let cost = CostModel::new(bus.cost.clone()).map_err(|e| semantic(format!("buses[{i}].cost"), e))?;
        cost.check_convexity(&st).map_err(|e| semantic(format!("buses[{i}].cost"), e))?;
        let level = bus.initial_level.unwrap_or(st.s_min);
        if !(level >= st.s_min && level <= st.s_max) {
            return Err(semantic(format!("buses[{i}].initial_level"), format!("{level} outside [{}, {}]", st.s_min, st.s_max)));
        }
        storages.push(st);
        costs.push(cost);
        initial_levels.push(level);
    }

    let mut edges = Vec::with_capacity(file.network.edges.len());
    let mut seen = HashMap::new();
    for (k, e) in file.network.edges.iter().enumerate() {
        let path = format!("network.edges[{k}]");
        if seen.insert(e.id.as_str(), k).is_some() {
            return Err(schema(format!("{path}.id"), format!("duplicate edge id {:?}", e.id)));
        }
        let lookup = |end: &str, id: &str| {
            index.get(id).copied().ok_or_else(|| semantic(format!("{path}.{end}"), format!("edge {:?} references unknown bus {id:?}", e.id)))
        };
        edges.push(Edge { from: lookup("from", &e.from)?, to: lookup("to", &e.to)? });
    }
    let beta = file.network.edges.iter().map(|e| e.beta).collect();
    let f_max = file.network.edges.iter().map(|e| e.f_max).collect();
    let network = PowerNetwork::build(file.buses.len(), edges, beta, f_max).map_err(|e| semantic("network", e))?;

    file.disturbance.validate(file.buses.len()).map_err(|e| semantic("disturbance", e))?;

    let sweep = match &file.sweep {
        None => None,
        Some(sw) => {
            if sw.s_max.is_empty() {
                return Err(schema("sweep.s_max", "at least one capacity is required"));
            }
            Some(Sweep { s_max: sw.s_max.clone(), u_ratio: sw.u_ratio })
        }
    };
    let scenario = Scenario {
        storages,
        costs,
        initial_levels,
        network,
        disturbance: file.disturbance.clone(),
        horizon: file.horizon,
        seed: file.seed,
        warmup: file.warmup,
        weight_mode: file.planner,
        sweep,
    };
    scenario.validate().map_err(|e| semantic("buses", e))?;
    if let Some(sw) = &scenario.sweep {
        for (j, &s) in sw.s_max.iter().enumerate() {
            scenario.resized(s, sw.u_ratio).map_err(|e| semantic(format!("sweep.s_max[{j}]"), e))?;
        }
    }
    if file.warmup > file.horizon {
        return Err(semantic("warmup", format!("warmup {} exceeds horizon {}", file.warmup, file.horizon)));
    }
    Ok(scenario)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
  "version": 1,
  "buses": [
    {
      "id": "a",
      "storage": { "s_min": 0.0, "s_max": 1.0, "u_min": -0.1, "u_max": 0.1, "mu_c": 1.0, "mu_d": 1.0, "lambda": 1.0 },
      "cost": [
        { "kind": "positive_part", "alpha_delta": -1.0, "alpha_charge": -1.0, "alpha_discharge": -1.0, "alpha_flow": -1.0, "price": { "constant": 1.0 } }
      ]
    },
    {
      "id": "b",
      "storage": { "s_min": 0.0, "s_max": 1.0, "u_min": -0.1, "u_max": 0.1, "mu_c": 1.0, "mu_d": 1.0, "lambda": 1.0 },
      "cost": []
    }
  ],
  "network": { "edges": [ { "id": "ab", "from": "a", "to": "b", "beta": 1.0, "f_max": 0.5 } ] },
  "disturbance": { "kind": "iid_laplace", "sigma": 0.149 },
  "horizon": 10,
  "seed": 3
}"#;

    #[test]
    fn minimal_loads() {
        let s = parse_scenario(MINIMAL).unwrap();
        assert_eq!(s.scenario.network.bus_count(), 2);
        assert_eq!(s.edge_ids(), vec!["ab"]);
        assert_eq!(s.scenario.initial_levels, vec![0.0, 0.0]);
        assert_eq!(s.file.policy, PolicyKind::Lyapunov);
    }

    #[test]
    fn canonical_round_trip() {
        let s = parse_scenario(MINIMAL).unwrap();
        let canon = to_canonical_string(&s.file);
        let again = parse_scenario(&canon).unwrap();
        assert_eq!(to_canonical_string(&again.file), canon);
        assert_eq!(again.hash(), s.hash());
    }

    #[test]
    fn error_classes() {
        assert!(matches!(parse_scenario("{ not json"), Err(ScenarioError::Parse(_))));

        let empty = MINIMAL.replace(r#""id": "a""#, r#""id": "a", "bogus": 1"#);
        match parse_scenario(&empty) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "buses[0].bogus"),
            other => panic!("{other:?}"),
        }

        let mut v: serde_json::Value = serde_json::from_str(MINIMAL).unwrap();
        v["buses"] = serde_json::json!([]);
        match parse_scenario(&v.to_string()) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "buses"),
            other => panic!("{other:?}"),
        }

        let unknown = MINIMAL.replace(r#""to": "b""#, r#""to": "zz""#);
        match parse_scenario(&unknown) {
            Err(e @ ScenarioError::Semantic { .. }) => {
                let msg = e.to_string();
                assert!(msg.contains("network.edges[0].to") && msg.contains("\"ab\""), "{msg}");
            }
            other => panic!("{other:?}"),
        }

        let bad_type = MINIMAL.replace(r#""horizon": 10"#, r#""horizon": "ten""#);
        match parse_scenario(&bad_type) {
            Err(ScenarioError::Schema { path, .. }) => assert_eq!(path, "horizon"),
            other => panic!("{other:?}"),
        }

        let bad_storage = MINIMAL.replacen(r#""u_max": 0.1"#, r#""u_max": 0.95"#, 1);
        match parse_scenario(&bad_storage) {
            Err(ScenarioError::Semantic { path, .. }) => assert_eq!(path, "buses[0].storage"),
            other => panic!("{other:?}"),
        }
    }
}
