//! Critical orbits, derivative growth along them and the summability
//! diagnostics built from it.
//!
//! For a one-sided point `c` of order `ell`, `c_1 = f(c)` and
//! `c_{n+1} = f(c_n)`; `D_n = |Df(c_1)| ... |Df(c_n)|` with `D_0 = 1`.
//! All verdicts are finite-horizon: they hold "up to N terms" only.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::{MapError, MapSpec, Side};

/// Orbits closer than this to the critical set are stopped and flagged.
pub const HIT_TOLERANCE: f64 = 1e-13;
pub const DEFAULT_STAR_EPSILON: f64 = 1e-6;
/// Number of trailing terms whose increment decides a summability verdict.
pub const TAIL_TERMS: usize = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OrbitError {
    #[error("critical point index {0} out of range")]
    NoSuchPoint(usize),
    #[error("orbit length must be at least 1")]
    EmptyOrbit,
    #[error("orbit escaped the domain at step {step} (value {value})")]
    Escaped { step: usize, value: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitEntry {
    pub n: usize,
    pub c_n: f64,
    /// Distance to the critical set.
    pub d: f64,
    /// Order of the one-sided point nearest to `c_n`.
    pub ell_n: f64,
    /// `|Df(c_n)|`; absent at a step flagged as hitting the critical set.
    pub abs_df: Option<f64>,
    /// `D_n`; absent when `abs_df` is.
    pub dn: Option<f64>,
    /// `D_{n-1}`.
    pub dn_prev: f64,
    pub gamma: Option<f64>,
    pub star_term: Option<f64>,
    pub star_star_term: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrbitRecord {
    pub location: f64,
    pub side: Side,
    pub order: f64,
    pub n_max: usize,
    pub entries: Vec<OrbitEntry>,
    /// Step at which the orbit came within [`HIT_TOLERANCE`] of the
    /// critical set.
    pub hit_critical: Option<usize>,
}

fn entry(n: usize, c_n: f64, d: f64, ell_n: f64, abs_df: Option<f64>, dn_prev: f64, order: f64) -> OrbitEntry {
    let binds = order > 1.0;
    let growth = dn_prev.powf(1.0 / (2.0 * order - 1.0));
    let log_term = (-d.ln()).max(0.0);
    let gamma = binds.then(|| (1.0 / (d * growth)).min(0.5));
    let star_term = binds.then(|| {
        if d == 0.0 {
            f64::INFINITY
        } else {
            log_term * n as f64 / (d * growth)
        }
    });
    let star_star_term = binds.then(|| {
        if d == 0.0 {
            f64::INFINITY
        } else {
            n as f64 * log_term / (d.powf(1.0 - ell_n) * growth)
        }
    });
    OrbitEntry {
        n,
        c_n,
        d,
        ell_n,
        abs_df,
        dn: abs_df.map(|a| dn_prev * a),
        dn_prev,
        gamma,
        star_term,
        star_star_term,
    }
}

/// Orbit of the one-sided point `map.critical[idx]` up to `n_max` steps.
pub fn compute_orbit(map: &MapSpec, idx: usize, n_max: usize) -> Result<OrbitRecord, OrbitError> {
    let c = map.critical.get(idx).ok_or(OrbitError::NoSuchPoint(idx))?;
    if n_max == 0 {
        return Err(OrbitError::EmptyOrbit);
    }
    let mut entries = Vec::with_capacity(n_max);
    let mut hit = None;
    let mut x = c.value;
    let mut dn_prev = 1.0;
    for n in 1..=n_max {
        if !x.is_finite() || x < map.domain[0] || x > map.domain[1] {
            return Err(OrbitError::Escaped { step: n, value: x });
        }
        let d = map.critical_distance(x);
        let ell_n = map.nearest_order(x).unwrap_or(f64::NAN);
        if d < HIT_TOLERANCE {
            entries.push(entry(n, x, d, ell_n, None, dn_prev, c.order));
            hit = Some(n);
            break;
        }
        let j = map.step_jet(x)?;
        let e = entry(n, x, d, ell_n, Some(j.d1.abs()), dn_prev, c.order);
        dn_prev = e.dn.unwrap_or(f64::NAN);
        entries.push(e);
        if n < n_max {
            x = map.step(x)?;
        }
    }
    Ok(OrbitRecord {
        location: c.location,
        side: c.side,
        order: c.order,
        n_max,
        entries,
        hit_critical: hit,
    })
}

/// Orbits of every one-sided point, computed in parallel.
pub fn compute_all_orbits(map: &MapSpec, n_max: usize) -> Result<Vec<OrbitRecord>, OrbitError> {
    (0..map.critical.len())
        .into_par_iter()
        .map(|i| compute_orbit(map, i, n_max))
        .collect()
}

impl OrbitRecord {
    /// Record with prescribed distances and derivative products, for
    /// checking the diagnostics on known sequences. `dn[n-1]` is `D_n`.
    pub fn synthetic(order: f64, d: &[f64], dn: &[f64], ell_n: &[f64]) -> Self {
        assert!(d.len() == dn.len() && d.len() == ell_n.len());
        let mut prev = 1.0;
        let entries = (0..d.len())
            .map(|i| {
                let abs_df = dn[i] / prev;
                let mut e = entry(i + 1, f64::NAN, d[i], ell_n[i], Some(abs_df), prev, order);
                e.dn = Some(dn[i]);
                prev = dn[i];
                e
            })
            .collect();
        OrbitRecord {
            location: 0.0,
            side: Side::Plus,
            order,
            n_max: d.len(),
            entries,
            hit_critical: None,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn binds(&self) -> bool {
        self.order > 1.0
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.location, self.side)
    }

    /// `D_{n-1}^{1/(2 ell - 1)}` for `n` in `1..=len`.
    pub fn growth(&self, n: usize) -> f64 {
        self.entries[n - 1].dn_prev.powf(1.0 / (2.0 * self.order - 1.0))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,c_n,d,ell_n,Dn,gamma_n,star_term,star_partial\n");
        let partial = partial_sums(self.entries.iter().map(|e| e.star_term));
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for (e, s) in self.entries.iter().zip(partial) {
            let _ = writeln!(
                out,
                "{},{:e},{:e},{},{},{},{},{}",
                e.n,
                e.c_n,
                e.d,
                e.ell_n,
                opt(e.dn),
                opt(e.gamma),
                opt(e.star_term),
                opt(s)
            );
        }
        out
    }
}

fn partial_sums(terms: impl Iterator<Item = Option<f64>>) -> Vec<Option<f64>> {
    let mut acc = 0.0;
    terms
        .map(|t| {
            t.map(|v| {
                acc += v;
                acc
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SumVerdict {
    SummableSoFar,
    Fail,
    NotApplicable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SumReport {
    pub point: String,
    pub partial_sums: Vec<f64>,
    pub terms: usize,
    /// Increment over the last [`TAIL_TERMS`] terms.
    pub tail_increment: f64,
    pub epsilon: f64,
    pub verdict: SumVerdict,
    pub diagnostic_only: bool,
    pub label: String,
}

impl SumReport {
    pub fn passes(&self) -> bool {
        self.verdict != SumVerdict::Fail
    }
}

fn sum_report(rec: &OrbitRecord, terms: Vec<f64>, epsilon: f64, diagnostic_only: bool) -> SumReport {
    let n = terms.len();
    if !rec.binds() {
        return SumReport {
            point: rec.label(),
            partial_sums: Vec::new(),
            terms: 0,
            tail_increment: 0.0,
            epsilon,
            verdict: SumVerdict::NotApplicable,
            diagnostic_only,
            label: "not applicable: order <= 1".into(),
        };
    }
    let mut acc = 0.0;
    let partial: Vec<f64> = terms
        .iter()
        .map(|t| {
            acc += t;
            acc
        })
        .collect();
    let tail: f64 = terms[n.saturating_sub(TAIL_TERMS)..].iter().sum();
    let ok = n > 0 && partial.iter().all(|s| s.is_finite()) && tail < epsilon;
    SumReport {
        point: rec.label(),
        partial_sums: partial,
        terms: n,
        tail_increment: tail,
        epsilon,
        verdict: if ok { SumVerdict::SummableSoFar } else { SumVerdict::Fail },
        diagnostic_only,
        label: format!("up to {n} terms"),
    }
}

/// Partial sums of the summability series along the orbit.
pub fn star_sum(rec: &OrbitRecord, epsilon: f64) -> SumReport {
    let terms = rec.entries.iter().filter_map(|e| e.star_term).collect();
    sum_report(rec, terms, epsilon, false)
}

/// Partial sums of the weaker series with `d^(1 - ell_n)` in place of `d`.
/// Reported as a diagnostic only.
pub fn star_star_sum(rec: &OrbitRecord, epsilon: f64) -> SumReport {
    let terms = rec.entries.iter().filter_map(|e| e.star_star_term).collect();
    sum_report(rec, terms, epsilon, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthFit {
    pub lambda_hat: f64,
    pub alpha_hat: f64,
    pub margin: f64,
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Least-squares exponential rates of `D_n` and of the recurrence
/// `d(c_n)`. `None` with fewer than 10 usable entries.
pub fn growth_fit(rec: &OrbitRecord) -> Option<GrowthFit> {
    let grow: Vec<(f64, f64)> = rec
        .entries
        .iter()
        .filter_map(|e| e.dn.filter(|v| *v > 0.0 && v.is_finite()).map(|v| (e.n as f64, v.ln())))
        .collect();
    let rec_pts: Vec<(f64, f64)> = rec
        .entries
        .iter()
        .filter(|e| e.d > 0.0)
        .map(|e| (e.n as f64, -e.d.ln()))
        .collect();
    if grow.len() < 10 || rec_pts.len() < 10 {
        return None;
    }
    let lambda_hat = slope(&grow);
    let alpha_hat = slope(&rec_pts).max(0.0);
    Some(GrowthFit {
        lambda_hat,
        alpha_hat,
        margin: lambda_hat / (2.0 * rec.order - 1.0) - alpha_hat,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::map::MapConfig;

    fn chebyshev() -> MapSpec {
        MapSpec::build(&MapConfig::family("chebyshev", &[])).unwrap()
    }

    #[test]
    fn chebyshev_orbit_by_hand() {
        let m = chebyshev();
        let i = m.critical_index(0.0, Side::Plus).unwrap();
        let r = compute_orbit(&m, i, 5).unwrap();
        let cs: Vec<f64> = r.entries.iter().map(|e| e.c_n).collect();
        assert_eq!(cs, vec![1.0, -1.0, -1.0, -1.0, -1.0]);
        for e in &r.entries {
            assert_eq!(e.d, 1.0);
            let want = 4f64.powi(e.n as i32);
            assert!((e.dn.unwrap() - want).abs() <= 1e-12 * want);
        }
        let g: Vec<f64> = r.entries.iter().map(|e| e.gamma.unwrap()).collect();
        assert_eq!(g[0], 0.5);
        assert_eq!(g[1], 0.5);
        assert!((g[2] - 4f64.powf(-2.0 / 3.0)).abs() < 1e-12);
        assert!((g[3] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn unimodal_sides_agree() {
        let m = MapSpec::build(&MapConfig::family("unimodal", &[])).unwrap();
        let a = compute_orbit(&m, m.critical_index(0.0, Side::Plus).unwrap(), 12).unwrap();
        let b = compute_orbit(&m, m.critical_index(0.0, Side::Minus).unwrap(), 12).unwrap();
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn prefix_is_stable() {
        let m = MapSpec::build(&MapConfig::family("unimodal", &[("a", 1.8)])).unwrap();
        let a = compute_orbit(&m, 1, 20).unwrap();
        let b = compute_orbit(&m, 1, 10).unwrap();
        assert_eq!(a.entries[..10], b.entries[..]);
    }

    #[test]
    fn chebyshev_sums_vanish() {
        let m = chebyshev();
        for r in compute_all_orbits(&m, 30).unwrap() {
            let s = star_sum(&r, DEFAULT_STAR_EPSILON);
            assert!(s.partial_sums.iter().all(|v| *v == 0.0));
            assert_eq!(s.verdict, SumVerdict::SummableSoFar);
            let ss = star_star_sum(&r, DEFAULT_STAR_EPSILON);
            assert!(ss.partial_sums.iter().all(|v| *v == 0.0) && ss.diagnostic_only);
            let fit = growth_fit(&r).unwrap();
            assert!((fit.lambda_hat - 4f64.ln()).abs() < 1e-9);
            assert_eq!(fit.alpha_hat, 0.0);
            assert!((fit.margin - 4f64.ln() / 3.0).abs() < 1e-9);
        }
    }

    fn exp_record(lam: f64, alpha: f64, n: usize) -> OrbitRecord {
        let d: Vec<f64> = (1..=n).map(|k| (-alpha * k as f64).exp()).collect();
        let dn: Vec<f64> = (1..=n).map(|k| (lam * k as f64).exp()).collect();
        OrbitRecord::synthetic(2.0, &d, &dn, &vec![2.0; n])
    }

    #[test]
    fn synthetic_regimes() {
        let r = exp_record(0.9, 0.1, 200);
        let s = star_sum(&r, DEFAULT_STAR_EPSILON);
        assert_eq!(s.verdict, SumVerdict::SummableSoFar);
        for e in &r.entries {
            let n = e.n as f64;
            let want = 0.1 * n * n * (0.1 * n - 0.3 * (n - 1.0)).exp();
            assert!((e.star_term.unwrap() - want).abs() <= 1e-10 * want);
            assert!(e.star_star_term.unwrap() <= e.star_term.unwrap());
        }
        let fit = growth_fit(&r).unwrap();
        assert!((fit.margin - 0.2).abs() < 1e-9);

        let bad = exp_record(0.0, 1.0, 60);
        assert_eq!(star_sum(&bad, DEFAULT_STAR_EPSILON).verdict, SumVerdict::Fail);
        assert!(growth_fit(&bad).unwrap().lambda_hat.abs() < 1e-12);
    }

    #[test]
    fn zero_distance_fails() {
        let r = OrbitRecord::synthetic(2.0, &[0.5, 0.0], &[2.0, 4.0], &[2.0, 2.0]);
        let s = star_sum(&r, DEFAULT_STAR_EPSILON);
        assert_eq!(s.verdict, SumVerdict::Fail);
        assert!(star_star_sum(&r, 1.0).partial_sums[0].is_finite());
    }

    #[test]
    fn singular_is_not_applicable() {
        let m = MapSpec::build(&MapConfig::family("lorenz", &[])).unwrap();
        let r = compute_orbit(&m, 0, 10).unwrap();
        assert_eq!(star_sum(&r, 1e-6).verdict, SumVerdict::NotApplicable);
        assert!(r.entries.iter().all(|e| e.gamma.is_none()));
    }

    #[test]
    fn csv_header() {
        let r = compute_orbit(&chebyshev(), 0, 3).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with("n,c_n,d,ell_n,Dn,gamma_n,star_term,star_partial\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    proptest! {
        #[test]
        fn record_invariants(a in 1.5f64..2.0) {
            let m = MapSpec::build(&MapConfig::family("unimodal", &[("a", a)])).unwrap();
            let r = compute_orbit(&m, 1, 40).unwrap();
            let mut prev = 1.0;
            let mut gsum = 0.0;
            for e in &r.entries {
                let g = e.gamma.unwrap();
                prop_assert!(g <= 0.5);
                prop_assert!(e.star_term.unwrap() >= 0.0);
                prop_assert_eq!(e.dn_prev, prev);
                if let Some(dn) = e.dn {
                    prop_assert!((dn - prev * e.abs_df.unwrap()).abs() <= 1e-12 * dn.abs());
                    prev = dn;
                }
                if g < 0.5 {
                    let want = r.growth(e.n).recip();
                    prop_assert!((g * e.d - want).abs() <= 1e-12 * want);
                }
                let next = gsum + g;
                prop_assert!(next >= gsum);
                gsum = next;
            }
        }
    }
}
