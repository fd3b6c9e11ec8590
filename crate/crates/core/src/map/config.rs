//! Map-config JSON schema.
//!
//! Two forms are accepted. An explicit map:
//!
//! ```json
//! {"name": "chebyshev", "domain": [-1, 1], "delta": 0.1,
//!  "branches": [{"interval": [-1, 0], "expr": "1 - 2*x^2", "params": {}},
//!               {"interval": [0, 1],  "expr": "1 - 2*x^2", "params": {}}],
//!  "critical_points": [{"location": 0, "side": "-", "order": 2},
//!                      {"location": 0, "side": "+", "order": 2}]}
//! ```
//!
//! or a built-in family:
//!
//! ```json
//! {"family": "lorenz", "params": {"a": 1.9, "s": 0.6}, "delta": 0.1}
//! ```
//!
//! Unknown keys are rejected in both forms. `params` on a branch is optional;
//! `name` and `delta` are optional for families.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::MapError;

pub const DEFAULT_DELTA: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub interval: [f64; 2],
    pub expr: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalConfig {
    pub location: f64,
    pub side: String,
    pub order: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitConfig {
    pub name: String,
    pub domain: [f64; 2],
    pub delta: f64,
    pub branches: Vec<BranchConfig>,
    pub critical_points: Vec<CriticalConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    pub family: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub name: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MapConfig {
    Explicit(ExplicitConfig),
    Family(FamilyConfig),
}

impl MapConfig {
    pub fn from_json_str(text: &str) -> Result<Self, MapError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| MapError::Schema(e.to_string()))?;
        Self::from_json(value)
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, MapError> {
        let is_family = value.get("family").is_some();
        if is_family {
            serde_json::from_value(value)
                .map(MapConfig::Family)
                .map_err(|e| MapError::Schema(e.to_string()))
        } else {
            serde_json::from_value(value)
                .map(MapConfig::Explicit)
                .map_err(|e| MapError::Schema(e.to_string()))
        }
    }

    pub fn family(name: &str, params: &[(&str, f64)]) -> Self {
        MapConfig::Family(FamilyConfig {
            family: name.to_string(),
            params: params.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            delta: None,
            name: None,
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            MapConfig::Explicit(e) => serde_json::to_value(e),
            MapConfig::Family(f) => serde_json::to_value(f),
        }
        .expect("config serializes")
    }

    /// Expand a family into its explicit branch description.
    pub fn resolve(&self) -> Result<ExplicitConfig, MapError> {
        match self {
            MapConfig::Explicit(e) => Ok(e.clone()),
            MapConfig::Family(f) => expand_family(f),
        }
    }
}

fn take_params(
    f: &FamilyConfig,
    defaults: &[(&str, f64)],
) -> Result<BTreeMap<String, f64>, MapError> {
    let mut out: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    for (k, v) in &f.params {
        if !out.contains_key(k) {
            return Err(MapError::Schema(format!(
                "unknown parameter `{k}` for family `{}`",
                f.family
            )));
        }
        if !v.is_finite() {
            return Err(MapError::Schema(format!("parameter `{k}` must be finite")));
        }
        out.insert(k.clone(), *v);
    }
    Ok(out)
}

fn crit(location: f64, side: &str, order: f64) -> CriticalConfig {
    CriticalConfig {
        location,
        side: side.to_string(),
        order,
    }
}

fn branch(a: f64, b: f64, expr: &str, params: &BTreeMap<String, f64>) -> BranchConfig {
    BranchConfig {
        interval: [a, b],
        expr: expr.to_string(),
        params: params.clone(),
    }
}

fn expand_family(f: &FamilyConfig) -> Result<ExplicitConfig, MapError> {
    let delta = f.delta.unwrap_or(DEFAULT_DELTA);
    let name = f.name.clone().unwrap_or_else(|| f.family.clone());
    match f.family.as_str() {
        "chebyshev" => {
            let p = take_params(f, &[])?;
            let e = "1 - 2*x^2";
            Ok(ExplicitConfig {
                name,
                domain: [-1.0, 1.0],
                delta,
                branches: vec![branch(-1.0, 0.0, e, &p), branch(0.0, 1.0, e, &p)],
                critical_points: vec![crit(0.0, "-", 2.0), crit(0.0, "+", 2.0)],
            })
        }
        "unimodal" => {
            let p = take_params(f, &[("a", 2.0), ("ell", 2.0)])?;
            let ell = p["ell"];
            let e = "1 - a*abs(x)^ell";
            Ok(ExplicitConfig {
                name,
                domain: [-1.0, 1.0],
                delta,
                branches: vec![branch(-1.0, 0.0, e, &p), branch(0.0, 1.0, e, &p)],
                critical_points: vec![crit(0.0, "-", ell), crit(0.0, "+", ell)],
            })
        }
        "lorenz" => {
            let p = take_params(f, &[("a", 1.9), ("s", 0.6)])?;
            let s = p["s"];
            let e = "sign(x)*(a*abs(x)^s - 1)";
            Ok(ExplicitConfig {
                name,
                domain: [-1.0, 1.0],
                delta,
                branches: vec![branch(-1.0, 0.0, e, &p), branch(0.0, 1.0, e, &p)],
                critical_points: vec![crit(0.0, "-", s), crit(0.0, "+", s)],
            })
        }
        "singular_unimodal" => {
            let p = take_params(f, &[("A", 2.5), ("B", 1.0), ("s", 0.5)])?;
            let (s, b) = (p["s"], p["B"]);
            if !(s > 0.0 && b > 0.0) {
                return Err(MapError::Schema("singular_unimodal needs s > 0 and B > 0".into()));
            }
            let turn = s / (b * (1.0 + s));
            if turn >= 1.0 {
                return Err(MapError::Schema(format!(
                    "turning point {turn} lies outside (0, 1)"
                )));
            }
            let e = "sign(x)*A*abs(x)^s*(1 - B*abs(x))";
            Ok(ExplicitConfig {
                name,
                domain: [-1.0, 1.0],
                delta,
                branches: vec![
                    branch(-1.0, -turn, e, &p),
                    branch(-turn, 0.0, e, &p),
                    branch(0.0, turn, e, &p),
                    branch(turn, 1.0, e, &p),
                ],
                critical_points: vec![
                    crit(-turn, "-", 2.0),
                    crit(-turn, "+", 2.0),
                    crit(0.0, "-", s),
                    crit(0.0, "+", s),
                    crit(turn, "-", 2.0),
                    crit(turn, "+", 2.0),
                ],
            })
        }
        other => Err(MapError::Schema(format!("unknown family `{other}`"))),
    }
}
