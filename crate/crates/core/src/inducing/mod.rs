//! Binding periods, inducing times and the induced map.
//!
//! A point `x` in `Delta(c, delta)` shadows the critical orbit while
//! `|f^j(x) - c_j| <= gamma_j d(c_j)`; the first `j` where this fails is the
//! binding period `p(x)` (always 1 for points that do not bind). Points whose
//! orbit meets `Delta` at some time `l0 < q0` are induced with
//! `tau = l0 + p(f^l0 x)`; the rest with `tau = q0`.

mod partition;
mod verify;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{MapError, MapSpec};
use crate::orbit::{compute_all_orbits, OrbitError, OrbitRecord};

pub use partition::{
    build_partition, build_partition_unchecked, BranchClass, DeltaPiece, InducedBranch, InducedPartition,
    PartitionParams, UnresolvedInterval, UnresolvedReason, DEFAULT_RESOLUTION, DEFAULT_UNRESOLVED_BUDGET,
    SCAN_POINTS,
};
pub use verify::{verify_binding_lemmas, BindingLemmaReport, SandwichRow};

pub const DEFAULT_P_MAX: usize = 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InducingError {
    #[error("x = {0} is not in any critical neighbourhood")]
    NotInDelta(f64),
    #[error("x = {0} is not in a resolved branch of the partition")]
    Unresolved(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("induced map not smooth on ({a}, {b}) at step {step}")]
    NotSmooth { a: f64, b: f64, step: usize },
    #[error("unresolved measure {measure:e} exceeds budget {budget:e}")]
    PartitionQuality { measure: f64, budget: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingStep {
    pub j: usize,
    /// `|f^j(x) - c_j|`.
    pub hat_len: f64,
    /// `gamma_j d(c_j)`; zero for non-binding points.
    pub threshold: f64,
    /// Distance of `(f^j(x), c_j)` to the critical set.
    pub dist: f64,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingResult {
    pub x: f64,
    pub critical: usize,
    pub p: usize,
    pub trajectory: Vec<BindingStep>,
    pub truncated: bool,
    /// `|Df^p(x)|`.
    pub df_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducingTime {
    pub tau: usize,
    pub l0: Option<usize>,
    pub p0: Option<usize>,
    pub critical: Option<usize>,
    pub truncated: bool,
}

/// A map together with `delta`, `q0`, `p_max` and the critical orbits the
/// binding periods compare against.
#[derive(Clone, Debug)]
pub struct InducingContext {
    pub map: MapSpec,
    pub q0: usize,
    pub p_max: usize,
    pub orbits: Vec<OrbitRecord>,
}

impl InducingContext {
    pub fn new(map: &MapSpec, delta: f64, q0: usize, p_max: usize) -> Result<Self, InducingError> {
        if q0 == 0 {
            return Err(InducingError::InvalidParameter("q0 must be at least 1".into()));
        }
        if p_max == 0 {
            return Err(InducingError::InvalidParameter("p_max must be at least 1".into()));
        }
        let map = map.with_delta(delta)?;
        let orbits = if map.critical.is_empty() {
            Vec::new()
        } else {
            compute_all_orbits(&map, p_max + 1)?
        };
        Ok(Self { map, q0, p_max, orbits })
    }

    pub fn delta(&self) -> f64 {
        self.map.delta
    }

    /// Binding period of `x`, which must lie in some `Delta(c, delta)`.
    pub fn binding_period(&self, x: f64) -> Result<BindingResult, InducingError> {
        let idx = self.map.delta_index(x).ok_or(InducingError::NotInDelta(x))?;
        self.binding_period_at(x, idx)
    }

    /// Binding period of `x` against the orbit of `critical[idx]`, without
    /// checking that `x` lies in its neighbourhood.
    pub fn binding_period_at(&self, x: f64, idx: usize) -> Result<BindingResult, InducingError> {
        let map = &self.map;
        let c = &map.critical[idx];
        let rec = &self.orbits[idx];
        let limit = if c.binds() { self.p_max } else { 1 };
        let mut y = x;
        let mut df = 1.0;
        let mut trajectory = Vec::new();
        for j in 1..=limit {
            let jet = map.step_jet(y)?;
            df *= jet.d1.abs();
            y = jet.value.clamp(map.domain[0], map.domain[1]);
            let Some(e) = rec.entries.get(j - 1) else {
                break;
            };
            let hat_len = (y - e.c_n).abs();
            let gamma = e.gamma.unwrap_or(0.0);
            let threshold = gamma * e.d;
            trajectory.push(BindingStep {
                j,
                hat_len,
                threshold,
                dist: map.critical_distance(y).min(e.d),
                gamma,
            });
            if hat_len > threshold || !c.binds() {
                return Ok(BindingResult {
                    x,
                    critical: idx,
                    p: j,
                    trajectory,
                    truncated: false,
                    df_p: df,
                });
            }
        }
        Ok(BindingResult {
            x,
            critical: idx,
            p: trajectory.len().max(1),
            trajectory,
            truncated: true,
            df_p: df,
        })
    }

    /// First time `l < q0` at which the orbit of `x` enters `Delta`, with
    /// the critical point entered.
    pub fn first_entry(&self, x: f64) -> Result<Option<(usize, usize)>, InducingError> {
        first_entry(&self.map, x, self.map.delta, self.q0)
    }

    pub fn inducing_time(&self, x: f64) -> Result<InducingTime, InducingError> {
        match self.first_entry(x)? {
            None => Ok(InducingTime {
                tau: self.q0,
                l0: None,
                p0: None,
                critical: None,
                truncated: false,
            }),
            Some((l0, idx)) => {
                let mut y = x;
                for _ in 0..l0 {
                    y = self.map.step(y)?;
                }
                let b = self.binding_period_at(y, idx)?;
                Ok(InducingTime {
                    tau: l0 + b.p,
                    l0: Some(l0),
                    p0: Some(b.p),
                    critical: Some(idx),
                    truncated: b.truncated,
                })
            }
        }
    }
}

/// `min { 0 <= l < q0 : f^l(x) in Delta(delta) }` together with the index
/// of the critical point whose neighbourhood is entered.
pub fn first_entry(map: &MapSpec, x: f64, delta: f64, q0: usize) -> Result<Option<(usize, usize)>, InducingError> {
    let mut y = x;
    for l in 0..q0 {
        if let Some(i) = map.delta_index_with(y, delta) {
            return Ok(Some((l, i)));
        }
        if l + 1 < q0 {
            y = map.step(y)?;
        }
    }
    Ok(None)
}

/// `(f^tau(x), |Df^tau(x)|, tau)` for `x` in a resolved branch.
pub fn eval_induced(map: &MapSpec, partition: &InducedPartition, x: f64) -> Result<(f64, f64, usize), InducingError> {
    let br = partition.branch_containing(x).ok_or(InducingError::Unresolved(x))?;
    let mut y = x;
    let mut df = 1.0;
    for _ in 0..br.tau {
        let j = map.step_jet(y)?;
        df *= j.d1.abs();
        y = j.value.clamp(map.domain[0], map.domain[1]);
    }
    Ok((y, df, br.tau))
}

#[cfg(test)]
pub(crate) mod tests;
