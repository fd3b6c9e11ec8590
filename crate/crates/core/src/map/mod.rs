//! Piecewise-monotone interval maps with one-sided critical and singular
//! points.
//!
//! A [`MapSpec`] is built from a [`MapConfig`]. Every interior branch boundary
//! carries two one-sided points `c-` and `c+`, each with a declared order
//! `ell`; `ell > 1` is critical, `ell < 1` singular and `ell == 1` is accepted
//! as a flat-linear degenerate case (handled like a singular point, with a
//! warning). One-sided values `f(c)` are computed as limits, never supplied.

pub mod config;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{self, Expr, ExprError, Program};
use crate::jet::Jet2;

pub use config::{BranchConfig, CriticalConfig, ExplicitConfig, FamilyConfig, MapConfig};

/// Points per branch used for the monotonicity and image checks.
pub const MONOTONE_GRID: usize = 1024;
/// Slack allowed for branch images leaving the domain.
pub const IMAGE_TOLERANCE: f64 = 1e-9;
const BOUNDARY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MapError {
    #[error("invalid config: {0}")]
    Schema(String),
    #[error("branch {branch}: {source}")]
    Expr { branch: usize, source: ExprError },
    #[error("gap in branch cover between {left} and {right}")]
    Gap { left: f64, right: f64 },
    #[error("branches overlap between {left} and {right}")]
    Overlap { left: f64, right: f64 },
    #[error("branch {branch} is not monotone near x = {x}")]
    NonMonotone { branch: usize, x: f64 },
    #[error("branch {branch} maps x = {x} to {value}, outside the domain")]
    ImageEscapes { branch: usize, x: f64, value: f64 },
    #[error("delta = {delta} too large: {reason}")]
    DeltaTooLarge { delta: f64, reason: String },
    #[error("no order declared for one-sided point {location}{side}")]
    UndeclaredCritical { location: f64, side: Side },
    #[error("critical point {0} is not an interior branch boundary")]
    CriticalNotAtBoundary(f64),
    #[error("x = {0} lies outside the domain")]
    OutsideDomain(f64),
    #[error("x = {0} is a branch endpoint; a side is required")]
    SideRequired(f64),
    #[error("orbit hit the critical set at x = {0}")]
    HitsCritical(f64),
    #[error("evaluation failed at x = {x}: {source}")]
    Eval { x: f64, source: ExprError },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Side {
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "+")]
    Plus,
}

impl Side {
    pub fn parse(s: &str) -> Option<Side> {
        match s {
            "+" | "plus" => Some(Side::Plus),
            "-" | "minus" => Some(Side::Minus),
            _ => None,
        }
    }

    /// Direction pointing from `c` into `Delta(c)`.
    pub fn sign(self) -> f64 {
        match self {
            Side::Plus => 1.0,
            Side::Minus => -1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Plus => "+",
            Side::Minus => "-",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CriticalKind {
    Critical,
    Singular,
    FlatLinear,
}

impl CriticalKind {
    pub fn of_order(order: f64) -> Self {
        if order > 1.0 {
            CriticalKind::Critical
        } else if order < 1.0 {
            CriticalKind::Singular
        } else {
            CriticalKind::FlatLinear
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub location: f64,
    pub side: Side,
    pub order: f64,
    pub kind: CriticalKind,
    /// One-sided value `f(c)`.
    pub value: f64,
    /// Branch adjacent to `c` on `side`.
    pub branch: usize,
}

impl CriticalPoint {
    /// Only genuinely critical points (`ell > 1`) bind; everything else has
    /// binding period one.
    pub fn binds(&self) -> bool {
        self.kind == CriticalKind::Critical
    }

    /// `1 / (2 ell - 1)`, the exponent applied to `D_{n-1}` throughout.
    pub fn growth_exponent(&self) -> f64 {
        1.0 / (2.0 * self.order - 1.0)
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.location, self.side)
    }
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub lo: f64,
    pub hi: f64,
    pub source: String,
    pub params: BTreeMap<String, f64>,
    expr: Expr,
    program: Option<Program>,
    pub increasing: bool,
    /// Zeros of `D^2 f` inside the branch, ascending.
    pub inflections: Vec<f64>,
    lo_jet: Jet2,
    hi_jet: Jet2,
}

impl Branch {
    pub fn contains_open(&self, x: f64) -> bool {
        self.lo < x && x < self.hi
    }

    /// Jet at `x` in the closed branch interval; endpoints return the
    /// one-sided limits computed at build time.
    pub fn jet(&self, x: f64) -> Result<Jet2, MapError> {
        if x == self.lo {
            return Ok(self.lo_jet);
        }
        if x == self.hi {
            return Ok(self.hi_jet);
        }
        match &self.program {
            Some(p) => p.jet(x),
            None => self.expr.jet(x, &no_params),
        }
        .map_err(|source| MapError::Eval { x, source })
    }

    pub fn value(&self, x: f64) -> Result<f64, MapError> {
        if x == self.lo {
            return Ok(self.lo_jet.value);
        }
        if x == self.hi {
            return Ok(self.hi_jet.value);
        }
        match &self.program {
            Some(p) => p.eval(x),
            None => self.expr.eval(x, &no_params),
        }
        .map_err(|source| MapError::Eval { x, source })
    }

    pub fn endpoint_jets(&self) -> (Jet2, Jet2) {
        (self.lo_jet, self.hi_jet)
    }

    /// Exact (up to rounding) `inf` and `sup` of `|Df|` over `[a, b]`,
    /// a subinterval of the closed branch. `|Df|` is monotone between
    /// consecutive inflection points so the extrema sit at endpoints or
    /// inflections.
    pub fn df_range(&self, a: f64, b: f64) -> Result<(f64, f64), MapError> {
        let (a, b) = if a <= b { (a, b) } else { (b, a) };
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        let mut visit = |x: f64| -> Result<(), MapError> {
            let d = self.jet(x)?.d1.abs();
            lo = lo.min(d);
            hi = hi.max(d);
            Ok(())
        };
        visit(a)?;
        visit(b)?;
        for &z in &self.inflections {
            if a < z && z < b {
                visit(z)?;
            }
        }
        Ok((lo, hi))
    }

    /// Solve `f(y) = target` for `y` in `[a, b]` (a subinterval of the
    /// branch) by Newton's method safeguarded with bisection. Returns the
    /// nearer endpoint when `target` lies outside the image.
    /// Preimage of `target` in `[lo, hi]` when `f(lo)` and `f(hi)` are
    /// already known: Newton from the secant guess, stopping once the
    /// quadratic error estimate is below rounding. Falls back to
    /// [`Branch::invert`] if an iterate leaves the bracket.
    pub fn invert_from(&self, target: f64, lo: f64, hi: f64, flo: f64, fhi: f64) -> Result<f64, MapError> {
        let (vmin, vmax) = (flo.min(fhi), flo.max(fhi));
        if target <= vmin {
            return Ok(if flo <= fhi { lo } else { hi });
        }
        if target >= vmax {
            return Ok(if flo <= fhi { hi } else { lo });
        }
        let mut x = lo + (hi - lo) * ((target - flo) / (fhi - flo));
        for _ in 0..8 {
            if !(x >= lo && x <= hi) {
                break;
            }
            let j = self.jet(x)?;
            let g = j.value - target;
            if g == 0.0 {
                return Ok(x);
            }
            let step = g / j.d1;
            let next = x - step;
            if !next.is_finite() || next < lo || next > hi {
                break;
            }
            let tiny = 4.0 * f64::EPSILON * next.abs().max(hi - lo);
            if step.abs() <= tiny || (0.5 * j.d2 / j.d1).abs() * step * step <= tiny {
                return Ok(next);
            }
            x = next;
        }
        self.invert(target, lo, hi)
    }

    pub fn invert(&self, target: f64, a: f64, b: f64) -> Result<f64, MapError> {
        let (mut lo, mut hi) = if a <= b { (a, b) } else { (b, a) };
        let flo = self.value(lo)?;
        let fhi = self.value(hi)?;
        let s = if self.increasing { 1.0 } else { -1.0 };
        // g is increasing in y with a root in [lo, hi].
        let g = |v: f64| s * (v - target);
        if g(flo) >= 0.0 {
            return Ok(lo);
        }
        if g(fhi) <= 0.0 {
            return Ok(hi);
        }
        let (glo, ghi) = (g(flo), g(fhi));
        let mut y = lo + (hi - lo) * (-glo / (ghi - glo));
        if !(y > lo && y < hi) {
            y = 0.5 * (lo + hi);
        }
        for _ in 0..200 {
            let j = self.jet(y)?;
            let gy = g(j.value);
            if gy == 0.0 {
                return Ok(y);
            }
            if gy < 0.0 {
                lo = y;
            } else {
                hi = y;
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            let newton = y - gy / (s * j.d1);
            if newton > lo && newton < hi && (newton - y).abs() <= 2.0 * f64::EPSILON * y.abs() {
                return Ok(newton);
            }
            y = if newton > lo && newton < hi && newton.is_finite() && newton != y {
                newton
            } else {
                mid
            };
        }
        // Pick whichever bracket end gives the smaller residual.
        let rl = g(self.value(lo)?).abs();
        let rh = g(self.value(hi)?).abs();
        Ok(if rl <= rh { lo } else { hi })
    }
}

fn no_params(_: &str) -> Option<f64> {
    None
}

/// Where a point sits relative to the branch structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Interior(usize),
    /// Interior boundary between branch `i` and `i + 1`.
    Boundary(usize),
    DomainLo,
    DomainHi,
}

#[derive(Clone, Debug)]
pub struct MapSpec {
    pub name: String,
    pub domain: [f64; 2],
    pub delta: f64,
    pub branches: Vec<Branch>,
    /// One-sided points sorted by (location, side).
    pub critical: Vec<CriticalPoint>,
    /// Distinct critical locations, ascending.
    pub locations: Vec<f64>,
    pub warnings: Vec<String>,
    pub config: ExplicitConfig,
}

fn aitken(a: f64, b: f64, c: f64) -> f64 {
    let d1 = b - a;
    let d2 = c - b;
    let den = d2 - d1;
    if den == 0.0 || !den.is_finite() {
        return c;
    }
    let l = c - d2 * d2 / den;
    if l.is_finite() {
        l
    } else {
        c
    }
}

/// One-sided jet of `expr` at `x`, approaching from direction `dir`.
///
/// The value is the extrapolated limit of samples at `x + dir*eta` for
/// `eta in {1e-6, 1e-7, 1e-8} * scale`; the sample closest to `x` (one
/// float step inside) replaces it when both agree to 1e-12, which keeps
/// exactly representable limits exact. Derivatives whose order exponent
/// `ell - k` is negative are reported as signed infinities, positive ones
/// as 0.
fn one_sided_jet(expr: &Expr, x: f64, dir: f64, order: Option<f64>, scale: f64) -> Result<Jet2, ExprError> {
    if let Ok(j) = expr.jet(x, &no_params) {
        if j.is_finite() {
            return Ok(j);
        }
    }
    let etas = [1e-6 * scale, 1e-7 * scale, 1e-8 * scale];
    let mut samples = [Jet2::constant(0.0); 3];
    for (s, eta) in samples.iter_mut().zip(etas) {
        *s = expr.jet(x + dir * eta, &no_params)?;
    }
    let near_x = if x == 0.0 {
        dir * f64::from_bits(1)
    } else if dir > 0.0 {
        x.next_up()
    } else {
        x.next_down()
    };
    let limit = aitken(samples[0].value, samples[1].value, samples[2].value);
    let value = match expr.eval(near_x, &no_params) {
        Ok(v) if (v - limit).abs() <= 1e-12 * (1.0 + limit.abs()) => v,
        _ => limit,
    };
    let deriv = |k: usize| -> f64 {
        let pick = |j: &Jet2| if k == 1 { j.d1 } else { j.d2 };
        let extrapolated = aitken(pick(&samples[0]), pick(&samples[1]), pick(&samples[2]));
        match order {
            Some(l) => {
                let e = l - k as f64;
                if e < 0.0 {
                    let s = pick(&samples[2]).signum();
                    s * f64::INFINITY
                } else if e > 0.0 {
                    0.0
                } else {
                    extrapolated
                }
            }
            None => extrapolated,
        }
    };
    Ok(Jet2::new(value, deriv(1), deriv(2)))
}

fn find_inflections(expr: &Expr, lo: f64, hi: f64) -> Vec<f64> {
    let n = MONOTONE_GRID;
    let d2 = |x: f64| expr.jet(x, &no_params).map(|j| j.d2).unwrap_or(f64::NAN);
    let mut out = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    for k in 0..n {
        let x = lo + (hi - lo) * (k as f64 + 0.5) / n as f64;
        let v = d2(x);
        if !v.is_finite() || v == 0.0 {
            continue;
        }
        if let Some((px, pv)) = prev {
            if pv.signum() != v.signum() {
                let (mut a, mut b, mut va) = (px, x, pv);
                while b - a > 1e-12 * (1.0 + a.abs()) {
                    let m = 0.5 * (a + b);
                    let vm = d2(m);
                    if vm == 0.0 {
                        a = m;
                        b = m;
                        break;
                    }
                    if vm.signum() == va.signum() {
                        a = m;
                        va = vm;
                    } else {
                        b = m;
                    }
                }
                out.push(0.5 * (a + b));
            }
        }
        prev = Some((x, v));
    }
    out
}

impl MapSpec {
    /// Validate a config and construct the map.
    pub fn build(config: &MapConfig) -> Result<Self, MapError> {
        let cfg = config.resolve()?;
        let [dlo, dhi] = cfg.domain;
        if !(dlo.is_finite() && dhi.is_finite() && dlo < dhi) {
            return Err(MapError::Schema(format!("domain [{dlo}, {dhi}] is not a proper interval")));
        }
        if !(cfg.delta.is_finite() && cfg.delta > 0.0) {
            return Err(MapError::Schema(format!("delta must be positive, got {}", cfg.delta)));
        }
        if cfg.branches.is_empty() {
            return Err(MapError::Schema("at least one branch is required".into()));
        }

        let mut raw: Vec<(usize, &BranchConfig)> = cfg.branches.iter().enumerate().collect();
        raw.sort_by(|a, b| a.1.interval[0].total_cmp(&b.1.interval[0]));
        let mut cursor = dlo;
        for (_, b) in &raw {
            let [a, bb] = b.interval;
            if !(a.is_finite() && bb.is_finite() && a < bb) {
                return Err(MapError::Schema(format!("branch interval [{a}, {bb}] is empty")));
            }
            if a > cursor + BOUNDARY_TOL {
                return Err(MapError::Gap { left: cursor, right: a });
            }
            if a < cursor - BOUNDARY_TOL {
                return Err(MapError::Overlap { left: a, right: cursor });
            }
            cursor = bb;
        }
        if (cursor - dhi).abs() > BOUNDARY_TOL {
            return Err(if cursor < dhi {
                MapError::Gap { left: cursor, right: dhi }
            } else {
                MapError::Overlap { left: dhi, right: cursor }
            });
        }

        // Snap boundaries so adjacent branches share bit-identical endpoints.
        let n = raw.len();
        let mut bounds = Vec::with_capacity(n + 1);
        bounds.push(dlo);
        for (_, b) in raw.iter().take(n - 1) {
            bounds.push(b.interval[1]);
        }
        bounds.push(dhi);

        // One-sided points.
        let mut declared: BTreeMap<(usize, Side), f64> = BTreeMap::new();
        for cp in &cfg.critical_points {
            let side = Side::parse(&cp.side)
                .ok_or_else(|| MapError::Schema(format!("side must be \"+\" or \"-\", got `{}`", cp.side)))?;
            if !(cp.order.is_finite() && cp.order > 0.0) {
                return Err(MapError::Schema(format!("order must be positive, got {}", cp.order)));
            }
            let at = (1..n)
                .find(|&i| (bounds[i] - cp.location).abs() <= BOUNDARY_TOL)
                .ok_or(MapError::CriticalNotAtBoundary(cp.location))?;
            if declared.insert((at, side), cp.order).is_some() {
                return Err(MapError::Schema(format!(
                    "one-sided point {}{} declared twice",
                    cp.location, side
                )));
            }
        }
        for (i, &b) in bounds.iter().enumerate().take(n).skip(1) {
            for side in [Side::Minus, Side::Plus] {
                if !declared.contains_key(&(i, side)) {
                    return Err(MapError::UndeclaredCritical { location: b, side });
                }
            }
        }

        let mut branches = Vec::with_capacity(n);
        for (k, (orig, bc)) in raw.iter().enumerate() {
            let names: Vec<&str> = bc.params.keys().map(String::as_str).collect();
            let parsed = expr::parse(&bc.expr, names)
                .map_err(|source| MapError::Expr { branch: *orig, source })?;
            let bound = parsed
                .bind(&bc.params)
                .map_err(|source| MapError::Expr { branch: *orig, source })?;
            let (lo, hi) = (bounds[k], bounds[k + 1]);
            let scale = (hi - lo).min(1.0);
            let lo_order = (k > 0).then(|| declared[&(k, Side::Plus)]);
            let hi_order = (k + 1 < n).then(|| declared[&(k + 1, Side::Minus)]);
            let lo_jet = one_sided_jet(&bound, lo, 1.0, lo_order, scale)
                .map_err(|source| MapError::Expr { branch: k, source })?;
            let hi_jet = one_sided_jet(&bound, hi, -1.0, hi_order, scale)
                .map_err(|source| MapError::Expr { branch: k, source })?;

            let mut sign = 0.0f64;
            for i in 0..MONOTONE_GRID {
                let x = lo + (hi - lo) * (i as f64 + 0.5) / MONOTONE_GRID as f64;
                let j = bound
                    .jet(x, &no_params)
                    .map_err(|source| MapError::Eval { x, source })?;
                if !j.is_finite() || j.d1 == 0.0 || (sign != 0.0 && j.d1.signum() != sign) {
                    return Err(MapError::NonMonotone { branch: k, x });
                }
                sign = j.d1.signum();
                if j.value < dlo - IMAGE_TOLERANCE || j.value > dhi + IMAGE_TOLERANCE {
                    return Err(MapError::ImageEscapes { branch: k, x, value: j.value });
                }
            }
            for (x, v) in [(lo, lo_jet.value), (hi, hi_jet.value)] {
                if !v.is_finite() || v < dlo - IMAGE_TOLERANCE || v > dhi + IMAGE_TOLERANCE {
                    return Err(MapError::ImageEscapes { branch: k, x, value: v });
                }
            }
            branches.push(Branch {
                lo,
                hi,
                source: bc.expr.clone(),
                params: bc.params.clone(),
                inflections: find_inflections(&bound, lo, hi),
                program: Program::compile(&bound),
                expr: bound,
                increasing: sign > 0.0,
                lo_jet,
                hi_jet,
            });
        }

        let mut critical = Vec::new();
        let mut warnings = Vec::new();
        for (&(at, side), &order) in &declared {
            let branch = if side == Side::Plus { at } else { at - 1 };
            let value = if side == Side::Plus {
                branches[branch].lo_jet.value
            } else {
                branches[branch].hi_jet.value
            };
            let kind = CriticalKind::of_order(order);
            if kind == CriticalKind::FlatLinear {
                warnings.push(format!(
                    "one-sided point {}{} has order 1; treated as singular (binding period 1)",
                    bounds[at], side
                ));
            }
            critical.push(CriticalPoint {
                location: bounds[at],
                side,
                order,
                kind,
                value,
                branch,
            });
        }
        critical.sort_by(|a, b| a.location.total_cmp(&b.location).then(a.side.cmp(&b.side)));
        let locations: Vec<f64> = bounds[1..n].to_vec();

        let map = MapSpec {
            name: cfg.name.clone(),
            domain: cfg.domain,
            delta: cfg.delta,
            branches,
            critical,
            locations,
            warnings,
            config: cfg,
        };
        map.check_delta(map.delta)?;
        Ok(map)
    }

    pub fn from_json_str(text: &str) -> Result<Self, MapError> {
        Self::build(&MapConfig::from_json_str(text)?)
    }

    /// Neighbourhoods `Delta(c, delta)` must sit inside their adjacent
    /// branch and be pairwise disjoint.
    pub fn check_delta(&self, delta: f64) -> Result<(), MapError> {
        if !(delta.is_finite() && delta > 0.0) {
            return Err(MapError::Schema(format!("delta must be positive, got {delta}")));
        }
        for (k, b) in self.branches.iter().enumerate() {
            let ends = usize::from(k > 0) + usize::from(k + 1 < self.branches.len());
            let width = b.hi - b.lo;
            if ends as f64 * delta > width {
                return Err(MapError::DeltaTooLarge {
                    delta,
                    reason: if ends == 2 {
                        format!("neighbourhoods overlap inside branch ({}, {})", b.lo, b.hi)
                    } else {
                        format!("neighbourhood leaves branch ({}, {})", b.lo, b.hi)
                    },
                });
            }
        }
        Ok(())
    }

    /// Same map with a different critical-neighbourhood radius.
    pub fn with_delta(&self, delta: f64) -> Result<Self, MapError> {
        self.check_delta(delta)?;
        let mut m = self.clone();
        m.delta = delta;
        m.config.delta = delta;
        Ok(m)
    }

    pub fn domain_length(&self) -> f64 {
        self.domain[1] - self.domain[0]
    }

    pub fn locate(&self, x: f64) -> Result<Location, MapError> {
        let [lo, hi] = self.domain;
        if !(x >= lo && x <= hi) {
            return Err(MapError::OutsideDomain(x));
        }
        if x == lo {
            return Ok(Location::DomainLo);
        }
        if x == hi {
            return Ok(Location::DomainHi);
        }
        let i = self.branches.partition_point(|b| b.hi < x);
        if self.branches[i].hi == x {
            Ok(Location::Boundary(i))
        } else {
            Ok(Location::Interior(i))
        }
    }

    /// Jet of `f` at `x`. At interior branch endpoints `side` selects the
    /// one-sided limit.
    pub fn evaluate(&self, x: f64, side: Option<Side>) -> Result<Jet2, MapError> {
        match self.locate(x)? {
            Location::Interior(i) => self.branches[i].jet(x),
            Location::DomainLo => Ok(self.branches[0].lo_jet),
            Location::DomainHi => Ok(self.branches[self.branches.len() - 1].hi_jet),
            Location::Boundary(i) => match side {
                None => Err(MapError::SideRequired(x)),
                Some(Side::Minus) => Ok(self.branches[i].hi_jet),
                Some(Side::Plus) => Ok(self.branches[i + 1].lo_jet),
            },
        }
    }

    /// Branch used to iterate `x`, rejecting interior boundaries.
    pub fn branch_at(&self, x: f64) -> Result<usize, MapError> {
        match self.locate(x)? {
            Location::Interior(i) => Ok(i),
            Location::DomainLo => Ok(0),
            Location::DomainHi => Ok(self.branches.len() - 1),
            Location::Boundary(_) => Err(MapError::HitsCritical(x)),
        }
    }

    /// `f(x)`; fails when `x` lands on an interior boundary. Images are
    /// clamped to the domain, absorbing the validation slack.
    pub fn step(&self, x: f64) -> Result<f64, MapError> {
        let b = self.branch_at(x)?;
        let y = self.branches[b].value(x)?;
        Ok(y.clamp(self.domain[0], self.domain[1]))
    }

    pub fn step_jet(&self, x: f64) -> Result<Jet2, MapError> {
        let b = self.branch_at(x)?;
        self.branches[b].jet(x)
    }

    /// Distance from `x` to the critical set (infinite when it is empty).
    pub fn critical_distance(&self, x: f64) -> f64 {
        nearest(&self.locations, x).map_or(f64::INFINITY, |(_, c)| (x - c).abs())
    }

    /// Index into `critical` of the one-sided point at `location` on `side`.
    pub fn critical_index(&self, location: f64, side: Side) -> Option<usize> {
        self.critical
            .iter()
            .position(|c| c.location == location && c.side == side)
    }

    /// One-sided point whose side `x` sits on, for the nearest location.
    pub fn nearest_critical(&self, x: f64) -> Option<usize> {
        let (_, c) = nearest(&self.locations, x)?;
        let side = if x >= c { Side::Plus } else { Side::Minus };
        self.critical_index(c, side)
    }

    /// Order of the one-sided point nearest to `x`.
    pub fn nearest_order(&self, x: f64) -> Option<f64> {
        self.nearest_critical(x).map(|i| self.critical[i].order)
    }

    /// The critical point whose neighbourhood `Delta(c, delta)` (open)
    /// contains `x`, if any.
    pub fn delta_index(&self, x: f64) -> Option<usize> {
        self.delta_index_with(x, self.delta)
    }

    pub fn delta_index_with(&self, x: f64, delta: f64) -> Option<usize> {
        let (_, c) = nearest(&self.locations, x)?;
        let d = x - c;
        if d == 0.0 || d.abs() >= delta {
            return None;
        }
        self.critical_index(c, if d > 0.0 { Side::Plus } else { Side::Minus })
    }

    /// Whether `x` lies within `delta` of the critical set (the complement
    /// of the expansion region).
    pub fn near_critical(&self, x: f64, delta: f64) -> bool {
        self.critical_distance(x) <= delta
    }

    /// The open neighbourhood `Delta(c, delta)` as `(lo, hi)`.
    pub fn delta_interval(&self, idx: usize, delta: f64) -> (f64, f64) {
        let c = &self.critical[idx];
        match c.side {
            Side::Plus => (c.location, c.location + delta),
            Side::Minus => (c.location - delta, c.location),
        }
    }

    /// Image of `Delta(c, delta)` under the adjacent branch, as `(lo, hi)`.
    pub fn delta_image(&self, idx: usize, delta: f64) -> Result<(f64, f64), MapError> {
        let c = &self.critical[idx];
        let (a, b) = self.delta_interval(idx, delta);
        let br = &self.branches[c.branch];
        let (fa, fb) = (br.value(a)?, br.value(b)?);
        Ok((fa.min(fb), fa.max(fb)))
    }

    /// Sample the implied constants of the order relations on a geometric
    /// grid in each `Delta(c, delta)`.
    pub fn verify_nondegeneracy(&self, grid_size: usize, bound: f64) -> Result<NondegeneracyReport, MapError> {
        if grid_size < 64 {
            return Err(MapError::Schema(format!("grid_size must be at least 64, got {grid_size}")));
        }
        let mut points = Vec::with_capacity(self.critical.len());
        for (idx, c) in self.critical.iter().enumerate() {
            points.push(self.nondegeneracy_at(idx, c, grid_size, bound)?);
        }
        let pass = points.iter().all(|p| p.pass);
        Ok(NondegeneracyReport {
            grid_size,
            bound,
            points,
            pass,
            warnings: self.warnings.clone(),
        })
    }

    fn nondegeneracy_at(
        &self,
        _idx: usize,
        c: &CriticalPoint,
        grid_size: usize,
        bound: f64,
    ) -> Result<CriticalNondegeneracy, MapError> {
        let br = &self.branches[c.branch];
        let ell = c.order;
        let mut rf = RatioRange::default();
        let mut r1 = RatioRange::default();
        let mut r2 = RatioRange::default();
        let mut rd = RatioRange::default();
        let mut skipped = 0usize;
        let mut samples = 0usize;
        for k in 1..=grid_size {
            let d = self.delta * (-(k as f64) / NONDEGENERACY_STEPS_PER_OCTAVE).exp2();
            let x = c.location + c.side.sign() * d;
            let j = br.jet(x)?;
            let diff = (j.value - c.value).abs();
            if diff < 1e-12 * (1.0 + c.value.abs()) {
                skipped += 1;
                continue;
            }
            samples += 1;
            rf.push(diff / d.powf(ell));
            r1.push(j.d1.abs() / d.powf(ell - 1.0));
            r2.push(j.d2.abs() / d.powf(ell - 2.0));
            rd.push(self.critical_distance(x) * j.d2.abs() / j.d1.abs());
        }
        let mut failures = Vec::new();
        let mut check = |name: &str, r: &RatioRange| {
            if samples == 0 {
                failures.push(format!("{name}: no usable samples"));
            } else if !(r.min > 0.0 && r.max.is_finite()) {
                failures.push(format!("{name}: range [{:e}, {:e}] degenerates", r.min, r.max));
            } else if r.max / r.min > bound {
                failures.push(format!(
                    "{name}: max/min = {:e} exceeds {bound} (order misdeclared?)",
                    r.max / r.min
                ));
            }
        };
        check("|f(x)-f(c)|/d^l", &rf);
        check("|Df|/d^(l-1)", &r1);
        if c.kind != CriticalKind::FlatLinear {
            check("|D2f|/d^(l-2)", &r2);
            check("d|D2f|/|Df|", &rd);
        }
        Ok(CriticalNondegeneracy {
            location: c.location,
            side: c.side,
            order: ell,
            samples,
            skipped,
            ratio_value: rf,
            ratio_d1: r1,
            ratio_d2: r2,
            ratio_distortion: rd,
            pass: failures.is_empty(),
            failures,
        })
    }

    /// Short JSON description used in reports.
    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "name": self.name,
            "domain": self.domain,
            "delta": self.delta,
            "branches": self.branches.iter().map(|b| serde_json::json!({
                "interval": [b.lo, b.hi],
                "expr": b.source,
                "params": b.params,
                "increasing": b.increasing,
            })).collect::<Vec<_>>(),
            "critical_points": self.critical,
            "warnings": self.warnings,
        })
    }
}

/// Geometric grid density for the nondegeneracy scan: distances
/// `delta * 2^(-k/4)`.
pub const NONDEGENERACY_STEPS_PER_OCTAVE: f64 = 4.0;
pub const DEFAULT_RATIO_BOUND: f64 = 100.0;

fn nearest(sorted: &[f64], x: f64) -> Option<(usize, f64)> {
    if sorted.is_empty() {
        return None;
    }
    let i = sorted.partition_point(|&c| c < x);
    let mut best = None::<(usize, f64)>;
    for j in [i.wrapping_sub(1), i] {
        if let Some(&c) = sorted.get(j) {
            if best.is_none_or(|(_, b)| (x - c).abs() < (x - b).abs()) {
                best = Some((j, c));
            }
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRange {
    pub min: f64,
    pub max: f64,
}

impl Default for RatioRange {
    fn default() -> Self {
        Self {
            min: f64::INFINITY,
            max: 0.0,
        }
    }
}

impl RatioRange {
    fn push(&mut self, v: f64) {
        if v.is_nan() {
            self.min = f64::NAN;
            return;
        }
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticalNondegeneracy {
    pub location: f64,
    pub side: Side,
    pub order: f64,
    pub samples: usize,
    /// Grid points dropped because `f(x) - f(c)` cancelled to rounding.
    pub skipped: usize,
    pub ratio_value: RatioRange,
    pub ratio_d1: RatioRange,
    pub ratio_d2: RatioRange,
    pub ratio_distortion: RatioRange,
    pub pass: bool,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NondegeneracyReport {
    pub grid_size: usize,
    pub bound: f64,
    pub points: Vec<CriticalNondegeneracy>,
    pub pass: bool,
    pub warnings: Vec<String>,
}

#[cfg(test)]
mod tests;
