//! Generalized storage: bounds, ramp limits, conversion efficiencies and
//! dissipation, with the consistency checks the controller relies on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute slack allowed on storage-level and ramp checks.
pub const LEVEL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StorageError {
    #[error("storage parameter `{field}` is not finite")]
    NonFinite { field: &'static str },
    #[error("level bounds out of order: s_min = {s_min} > s_max = {s_max}")]
    LevelBounds { s_min: f64, s_max: f64 },
    #[error("ramp bounds must satisfy u_min <= 0 <= u_max (got u_min = {u_min}, u_max = {u_max})")]
    RampBounds { u_min: f64, u_max: f64 },
    #[error("efficiency `{field}` = {value} must lie in (0, 1]")]
    Efficiency { field: &'static str, value: f64 },
    #[error("dissipation factor lambda = {0} must lie in (0, 1]")]
    Dissipation(f64),
    #[error("cannot recover from the lower bound: lambda*s_min + u_max = {lhs} < s_min = {s_min}")]
    RecoverFromMin { lhs: f64, s_min: f64 },
    #[error("cannot recover from the upper bound: lambda*s_max + u_min = {lhs} > s_max = {s_max}")]
    RecoverFromMax { lhs: f64, s_max: f64 },
    #[error("control range u_max - u_min = {control} must be smaller than capacity s_max - s_min = {capacity}")]
    ControlRange { control: f64, capacity: f64 },
    #[error("operation u = {u} outside ramp bounds [{u_min}, {u_max}]")]
    RampViolation { u: f64, u_min: f64, u_max: f64 },
    #[error("level {level} outside [{s_min}, {s_max}]")]
    LevelViolation { level: f64, s_min: f64, s_max: f64 },
}

/// The seven-parameter generalized storage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageSpec {
    pub s_min: f64,
    pub s_max: f64,
    pub u_min: f64,
    pub u_max: f64,
    pub mu_c: f64,
    pub mu_d: f64,
    pub lambda: f64,
}

impl StorageSpec {
    pub fn new(s_min: f64, s_max: f64, u_min: f64, u_max: f64, mu_c: f64, mu_d: f64, lambda: f64) -> Self {
        Self { s_min, s_max, u_min, u_max, mu_c, mu_d, lambda }
    }

    pub fn validate(self) -> Result<ValidatedStorage, StorageError> {
        validate_storage(self)
    }
}

/// A [`StorageSpec`] that passed [`validate_storage`]. Only constructible
/// through validation, so downstream code can rely on the feasibility
/// assumptions holding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidatedStorage(StorageSpec);

impl ValidatedStorage {
    pub fn spec(&self) -> &StorageSpec {
        &self.0
    }

    pub fn capacity(&self) -> f64 {
        self.0.s_max - self.0.s_min
    }

    /// Energy withdrawn from the bus per unit of charge.
    pub fn charge_factor(&self) -> f64 {
        1.0 / self.0.mu_c
    }

    /// Energy injected into the bus per unit of discharge.
    pub fn discharge_factor(&self) -> f64 {
        self.0.mu_d
    }
}

impl std::ops::Deref for ValidatedStorage {
    type Target = StorageSpec;
    fn deref(&self) -> &StorageSpec {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageState {
    pub level: f64,
}

impl StorageState {
    pub fn new(level: f64) -> Self {
        Self { level }
    }
}

pub fn validate_storage(spec: StorageSpec) -> Result<ValidatedStorage, StorageError> {
    let fields = [
        ("s_min", spec.s_min),
        ("s_max", spec.s_max),
        ("u_min", spec.u_min),
        ("u_max", spec.u_max),
        ("mu_c", spec.mu_c),
        ("mu_d", spec.mu_d),
        ("lambda", spec.lambda),
    ];
    for (field, v) in fields {
        if !v.is_finite() {
            return Err(StorageError::NonFinite { field });
        }
    }
    if spec.s_min > spec.s_max {
        return Err(StorageError::LevelBounds { s_min: spec.s_min, s_max: spec.s_max });
    }
    if spec.u_min > 0.0 || spec.u_max < 0.0 {
        return Err(StorageError::RampBounds { u_min: spec.u_min, u_max: spec.u_max });
    }
    for (field, value) in [("mu_c", spec.mu_c), ("mu_d", spec.mu_d)] {
        if !(value > 0.0 && value <= 1.0) {
            return Err(StorageError::Efficiency { field, value });
        }
    }
    if !(spec.lambda > 0.0 && spec.lambda <= 1.0) {
        return Err(StorageError::Dissipation(spec.lambda));
    }
    let lhs = spec.lambda * spec.s_min + spec.u_max;
    if lhs < spec.s_min {
        return Err(StorageError::RecoverFromMin { lhs, s_min: spec.s_min });
    }
    let lhs = spec.lambda * spec.s_max + spec.u_min;
    if lhs > spec.s_max {
        return Err(StorageError::RecoverFromMax { lhs, s_max: spec.s_max });
    }
    let control = spec.u_max - spec.u_min;
    let capacity = spec.s_max - spec.s_min;
    if control >= capacity {
        return Err(StorageError::ControlRange { control, capacity });
    }
    Ok(ValidatedStorage(spec))
}

/// Advances `s(t+1) = lambda * s(t) + u`. Out-of-range results are errors,
/// never clamped.
pub fn step(spec: &ValidatedStorage, state: StorageState, u: f64) -> Result<StorageState, StorageError> {
    check_ramp(spec, u)?;
    let level = spec.lambda * state.level + u;
    if level < spec.s_min - LEVEL_TOL || level > spec.s_max + LEVEL_TOL {
        return Err(StorageError::LevelViolation { level, s_min: spec.s_min, s_max: spec.s_max });
    }
    Ok(StorageState { level })
}

pub fn check_ramp(spec: &ValidatedStorage, u: f64) -> Result<(), StorageError> {
    if !(u >= spec.u_min - LEVEL_TOL && u <= spec.u_max + LEVEL_TOL) {
        return Err(StorageError::RampViolation { u, u_min: spec.u_min, u_max: spec.u_max });
    }
    Ok(())
}

/// Net energy injected into the bus by operation `u`: `mu_d * u⁻ - u⁺ / mu_c`.
pub fn net_injection(spec: &ValidatedStorage, u: f64) -> f64 {
    let charge = u.max(0.0);
    let discharge = (-u).max(0.0);
    spec.mu_d * discharge - charge / spec.mu_c
}
