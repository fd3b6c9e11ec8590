//! Generalized distortion, variation of `1/|Df^l|` and the summability of
//! the induced map's variation and inducing times.

mod bv;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inducing::{BranchClass, InducedBranch, InducedPartition, InducingContext, DEFAULT_UNRESOLVED_BUDGET};
use crate::map::{MapError, MapSpec};

pub use bv::{bv_selftest, sup_sum_variation, BvCheck, BvReport};

pub const DEFAULT_SUM_EPSILON: f64 = 1e-4;
/// Grid used for `inf |Df^l|` in the variation bound.
pub const INF_GRID: usize = 256;
pub const QUAD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistortionError {
    #[error("f^{step} is not a diffeomorphism on ({lo}, {hi})")]
    NotDiffeomorphism { step: usize, lo: f64, hi: f64 },
    #[error("interval ({lo}, {hi}) at step {step} touches the critical set")]
    InfiniteIntegral { step: usize, lo: f64, hi: f64 },
    #[error("quadrature did not converge on ({a}, {b})")]
    Quadrature { a: f64, b: f64 },
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionStep {
    pub lo: f64,
    pub hi: f64,
    pub branch: usize,
    pub sup_df: f64,
    pub inf_df: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistortionResult {
    pub a: f64,
    pub b: f64,
    pub n: usize,
    pub steps: Vec<DistortionStep>,
    pub product: f64,
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// The intervals `I_j = f^j(I)`, `0 <= j < n`, with the branch carrying
/// each. Fails when some `I_j` straddles a branch boundary.
pub fn interval_orbit(map: &MapSpec, a: f64, b: f64, n: usize) -> Result<Vec<(f64, f64, usize)>, DistortionError> {
    let (mut u, mut v) = ordered(a, b);
    let mut out = Vec::with_capacity(n);
    for step in 0..n {
        let mid = 0.5 * (u + v);
        let bi = map.branch_at(mid).map_err(|_| DistortionError::NotDiffeomorphism { step, lo: u, hi: v })?;
        let br = &map.branches[bi];
        let slack = 1e-12 * (1.0 + u.abs().max(v.abs()));
        if u < br.lo - slack || v > br.hi + slack {
            return Err(DistortionError::NotDiffeomorphism { step, lo: u, hi: v });
        }
        u = u.clamp(br.lo, br.hi);
        v = v.clamp(br.lo, br.hi);
        out.push((u, v, bi));
        let (nu, nv) = ordered(br.value(u)?, br.value(v)?);
        u = nu.clamp(map.domain[0], map.domain[1]);
        v = nv.clamp(map.domain[0], map.domain[1]);
    }
    Ok(out)
}

/// `D(f^n, I)`: product over `j < n` of `sup |Df| / inf |Df|` on `I_j`.
pub fn generalized_distortion(map: &MapSpec, a: f64, b: f64, n: usize) -> Result<DistortionResult, DistortionError> {
    let orbit = interval_orbit(map, a, b, n)?;
    let mut steps = Vec::with_capacity(n);
    let mut product = 1.0;
    for &(lo, hi, bi) in &orbit {
        let (inf_df, sup_df) = map.branches[bi].df_range(lo, hi)?;
        let ratio = sup_df / inf_df;
        product *= ratio;
        steps.push(DistortionStep {
            lo,
            hi,
            branch: bi,
            sup_df,
            inf_df,
            ratio,
        });
    }
    Ok(DistortionResult { a, b, n, steps, product })
}

/// `int_u^v dx / d(x)` in closed form, splitting where the nearest critical
/// location changes.
pub fn inverse_distance_integral(map: &MapSpec, u: f64, v: f64) -> Option<f64> {
    let (u, v) = ordered(u, v);
    let locs = &map.locations;
    if locs.is_empty() || u == v {
        return Some(0.0);
    }
    if locs.iter().any(|&c| c >= u && c <= v) {
        return None;
    }
    let mut cuts = vec![u];
    for w in locs.windows(2) {
        let m = 0.5 * (w[0] + w[1]);
        if m > u && m < v {
            cuts.push(m);
        }
    }
    cuts.push(v);
    let mut total = 0.0;
    for w in cuts.windows(2) {
        let (s, t) = (w[0], w[1]);
        let mid = 0.5 * (s + t);
        let c = locs
            .iter()
            .copied()
            .min_by(|x, y| (mid - x).abs().total_cmp(&(mid - y).abs()))
            .expect("non-empty");
        total += ((t - c).abs().ln() - (s - c).abs().ln()).abs();
    }
    Some(total)
}

/// Sum over `j < l` of `int_{I_j} dx/d(x)`.
pub fn log_distance_sum(map: &MapSpec, a: f64, b: f64, l: usize) -> Result<f64, DistortionError> {
    let orbit = interval_orbit(map, a, b, l)?;
    let mut s = 0.0;
    for (step, &(lo, hi, _)) in orbit.iter().enumerate() {
        s += inverse_distance_integral(map, lo, hi).ok_or(DistortionError::InfiniteIntegral { step, lo, hi })?;
    }
    Ok(s)
}

/// `|Df^l(x)|` by the chain rule.
pub fn df_iterate(map: &MapSpec, x: f64, l: usize) -> Result<f64, MapError> {
    let mut y = x;
    let mut d = 1.0;
    for _ in 0..l {
        let j = map.step_jet(y)?;
        d *= j.d1.abs();
        y = j.value.clamp(map.domain[0], map.domain[1]);
    }
    Ok(d)
}

/// Evaluate along the branch chain of `I` (so endpoints on branch
/// boundaries use the one-sided jets of the carrying branch).
fn chain_df(map: &MapSpec, chain: &[(f64, f64, usize)], x: f64) -> Result<(f64, f64), MapError> {
    // Returns (|Df^l(x)|, |D(1/|Df^l|)(x)|).
    let mut y = x;
    let mut dfj = 1.0f64;
    let mut acc = 0.0f64;
    for &(lo, hi, bi) in chain {
        let j = map.branches[bi].jet(y.clamp(lo, hi))?;
        acc += j.d2 / j.d1 * dfj;
        dfj *= j.d1;
        y = j.value.clamp(map.domain[0], map.domain[1]);
    }
    Ok((dfj.abs(), (acc / dfj).abs()))
}

/// Calibrated upper estimate for `var_I 1/|Df^l|`:
/// `D(f^l, I) / inf_I |Df^l| * sum_j int_{I_j} dx/d(x)`. The infimum is
/// taken over a grid of [`INF_GRID`]` + 1` points including the endpoints.
pub fn variation_bound(map: &MapSpec, a: f64, b: f64, l: usize) -> Result<f64, DistortionError> {
    if l == 0 {
        return Ok(0.0);
    }
    let chain = interval_orbit(map, a, b, l)?;
    let dist = generalized_distortion(map, a, b, l)?.product;
    let (lo, hi) = ordered(a, b);
    let mut inf = f64::INFINITY;
    for k in 0..=INF_GRID {
        let x = if k == INF_GRID { hi } else { lo + (hi - lo) * k as f64 / INF_GRID as f64 };
        inf = inf.min(chain_df(map, &chain, x)?.0);
    }
    let sum = log_distance_sum(map, a, b, l)?;
    Ok(dist / inf * sum)
}

fn gauss5(f: &dyn Fn(f64) -> Result<f64, MapError>, a: f64, b: f64) -> Result<f64, MapError> {
    const X: [f64; 5] = [0.0, -0.538_469_310_105_683_1, 0.538_469_310_105_683_1, -0.906_179_845_938_664, 0.906_179_845_938_664];
    const W: [f64; 5] = [0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1, 0.236_926_885_056_189_1];
    let h = 0.5 * (b - a);
    let m = 0.5 * (a + b);
    let mut s = 0.0;
    for i in 0..5 {
        s += W[i] * f(m + h * X[i])?;
    }
    Ok(s * h)
}

struct Quad<'a> {
    deriv: &'a dyn Fn(f64) -> Result<f64, MapError>,
    value: &'a dyn Fn(f64) -> Result<f64, MapError>,
    floor: f64,
}

impl Quad<'_> {
    // Local tolerance halves per level down to `floor`; a panel still failing
    // at depth 0 is treated as monotone, so its variation is `|g(b) - g(a)|`.
    // That only happens next to integrable endpoint singularities.
    fn adaptive(&self, a: f64, b: f64, whole: f64, tol: f64, depth: usize) -> Result<Option<f64>, MapError> {
        let m = 0.5 * (a + b);
        let left = gauss5(self.deriv, a, m)?;
        let right = gauss5(self.deriv, m, b)?;
        let both = left + right;
        if (both - whole).abs() <= tol || (b - a) < 1e-15 * (1.0 + a.abs()) {
            return Ok(Some(both));
        }
        // int |g'| >= |g(b) - g(a)| with equality on monotone pieces; near a
        // singular endpoint the integrand is noisy but g is not.
        let jump = ((self.value)(b)? - (self.value)(a)?).abs();
        if depth == 0 || (both - jump).abs() <= 1e-6 * jump {
            return Ok(jump.is_finite().then_some(jump));
        }
        let t = (0.5 * tol).max(self.floor);
        let l = self.adaptive(a, m, left, t, depth - 1)?;
        let r = self.adaptive(m, b, right, t, depth - 1)?;
        Ok(match (l, r) {
            (Some(l), Some(r)) => Some(l + r),
            _ => None,
        })
    }
}

/// `var_I 1/|Df^l| = int_I |D(1/|Df^l|)|` by adaptive Gauss-Legendre
/// quadrature (nodes never touch the endpoints).
pub fn variation_exact(map: &MapSpec, a: f64, b: f64, l: usize, tol: f64) -> Result<f64, DistortionError> {
    if l == 0 || a == b {
        return Ok(0.0);
    }
    let chain = interval_orbit(map, a, b, l)?;
    let (lo, hi) = ordered(a, b);
    let f = |x: f64| chain_df(map, &chain, x).map(|v| v.1);
    let g = |x: f64| chain_df(map, &chain, x).map(|v| 1.0 / v.0);
    // Start from a few panels so narrow features are not missed.
    let panels = 8;
    let mut total = 0.0;
    for k in 0..panels {
        let s = lo + (hi - lo) * k as f64 / panels as f64;
        let t = if k + 1 == panels { hi } else { lo + (hi - lo) * (k + 1) as f64 / panels as f64 };
        let whole = gauss5(&f, s, t)?;
        let local = tol.max(1e-15) / panels as f64 * (1.0 + whole.abs());
        let q = Quad {
            deriv: &f,
            value: &g,
            floor: local * 1e-6,
        };
        match q.adaptive(s, t, whole, local, 40)? {
            Some(v) => total += v,
            None => return Err(DistortionError::Quadrature { a: s, b: t }),
        }
    }
    Ok(total)
}

/// `var_M omega_I = var_I(1/|Df^tau|) + 2 sup_I(1/|Df^tau|)` with the sup
/// bounded by the branch's certified `1/inf |Df^tau|`.
pub fn omega_variation(map: &MapSpec, branch: &InducedBranch) -> Result<f64, DistortionError> {
    let v = variation_exact(map, branch.a, branch.b, branch.tau, QUAD_TOL)?;
    Ok(v + 2.0 / branch.inf_df)
}

/// Variation over `M` of `1_I / |Df^tau|` itself: interior variation plus
/// the two jumps to zero at the endpoints.
pub fn omega_variation_exact(map: &MapSpec, branch: &InducedBranch) -> Result<f64, DistortionError> {
    let chain = interval_orbit(map, branch.a, branch.b, branch.tau)?;
    let v = variation_exact(map, branch.a, branch.b, branch.tau, QUAD_TOL)?;
    let fa = chain_df(map, &chain, branch.a)?.0;
    let fb = chain_df(map, &chain, branch.b)?.0;
    Ok(v + 1.0 / fa + 1.0 / fb)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: usize,
    pub count: usize,
    pub sum_var_omega: f64,
    pub sum_tau_len: f64,
    /// Sum of the per-branch theoretical bound over bound branches with
    /// `p >= 2`.
    pub bound_gap_term: f64,
    pub partial_var_omega: f64,
    pub partial_tau_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummabilityReport {
    pub rows: Vec<TauRow>,
    pub total_var_omega: f64,
    pub total_tau_len: f64,
    /// Constant bounding `sum_j int_{I_j} dx/d` over free branches.
    pub d_hat: f64,
    /// Least-squares slope of `log sum_tau_len` per `tau` past the median.
    pub tail_decay: Option<f64>,
    pub horizon: usize,
    /// Relative increments over `tau in (0.9 H, H]`.
    pub tail_increment_var: f64,
    pub tail_increment_tau: f64,
    pub epsilon: f64,
    pub unresolved_measure: f64,
    pub budget: f64,
    pub variation_summable: bool,
    pub inducing_times_summable: bool,
    pub pass: bool,
    pub label: String,
}

impl SummabilityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,count,sum_var_omega,sum_tau_len,bound_gap_term\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:e}",
                r.tau, r.count, r.sum_var_omega, r.sum_tau_len, r.bound_gap_term
            );
        }
        out
    }

    /// Two-column curves `(tau, partial sum)` for plotting.
    pub fn plot_data(&self) -> (String, String) {
        let mut v = String::from("tau,partial_var_omega\n");
        let mut t = String::from("tau,partial_tau_len\n");
        for r in &self.rows {
            let _ = writeln!(v, "{},{:e}", r.tau, r.partial_var_omega);
            let _ = writeln!(t, "{},{:e}", r.tau, r.partial_tau_len);
        }
        (v, t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummabilityParams {
    pub epsilon: f64,
    /// Fraction of `|M|` allowed to stay unresolved.
    pub budget: f64,
}

impl Default for SummabilityParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_SUM_EPSILON,
            budget: DEFAULT_UNRESOLVED_BUDGET,
        }
    }
}

struct PerBranch {
    tau: usize,
    omega: f64,
    tau_len: f64,
    free_log_sum: f64,
}

fn gap_term(ctx: &InducingContext, br: &InducedBranch, d_hat: f64) -> f64 {
    let (Some(idx), Some(p)) = (br.critical, br.p0) else {
        return 0.0;
    };
    let c = &ctx.map.critical[idx];
    if p < 2 || !c.binds() {
        return 0.0;
    }
    let rec = &ctx.orbits[idx];
    let Some(e) = rec.entries.get(p - 2) else {
        return f64::INFINITY;
    };
    // e is the entry n = p - 1: d(c_{p-1}) and D_{p-2}.
    let d = e.d;
    (d_hat + (1.0 / d).ln().max(0.0)) / (d * e.dn_prev.powf(c.growth_exponent()))
}

/// Accumulate `var_M omega_I` and `tau(I)|I|` over the resolved branches in
/// increasing `tau`, with finite-horizon summability verdicts.
pub fn summability_report(
    ctx: &InducingContext,
    partition: &InducedPartition,
    params: SummabilityParams,
) -> Result<SummabilityReport, DistortionError> {
    let map = &ctx.map;
    let per: Vec<PerBranch> = partition
        .branches
        .par_iter()
        .map(|br| {
            let omega = omega_variation(map, br)?;
            let free_log_sum = if br.class == BranchClass::Free {
                log_distance_sum(map, br.a, br.b, br.tau).unwrap_or(f64::INFINITY)
            } else {
                0.0
            };
            Ok(PerBranch {
                tau: br.tau,
                omega,
                tau_len: br.tau as f64 * br.len(),
                free_log_sum,
            })
        })
        .collect::<Result<_, DistortionError>>()?;
    let d_hat = per.iter().map(|p| p.free_log_sum).fold(0.0, f64::max);

    let mut groups: BTreeMap<usize, TauRow> = BTreeMap::new();
    for (br, pb) in partition.branches.iter().zip(&per) {
        let gap = gap_term(ctx, br, d_hat);
        let row = groups.entry(pb.tau).or_insert(TauRow {
            tau: pb.tau,
            count: 0,
            sum_var_omega: 0.0,
            sum_tau_len: 0.0,
            bound_gap_term: 0.0,
            partial_var_omega: 0.0,
            partial_tau_len: 0.0,
        });
        row.count += 1;
        row.sum_var_omega += pb.omega;
        row.sum_tau_len += pb.tau_len;
        row.bound_gap_term += gap;
    }
    let mut rows: Vec<TauRow> = groups.into_values().collect();
    let (mut pv, mut pt) = (0.0, 0.0);
    for r in rows.iter_mut() {
        pv += r.sum_var_omega;
        pt += r.sum_tau_len;
        r.partial_var_omega = pv;
        r.partial_tau_len = pt;
    }

    let horizon = ctx.q0.saturating_sub(1) + ctx.p_max;
    let cut = 0.9 * horizon as f64;
    let tail = |f: fn(&TauRow) -> f64, total: f64| -> f64 {
        let s: f64 = rows.iter().filter(|r| r.tau as f64 > cut).map(f).fold(0.0, |s, v| s + v);
        if total > 0.0 {
            s / total
        } else {
            0.0
        }
    };
    let tail_var = tail(|r| r.sum_var_omega, pv);
    let tail_tau = tail(|r| r.sum_tau_len, pt);

    let tail_decay = {
        let median = rows.get(rows.len() / 2).map_or(0, |r| r.tau);
        let pts: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.tau >= median && r.sum_tau_len > 0.0)
            .map(|r| (r.tau as f64, r.sum_tau_len.ln()))
            .collect();
        (pts.len() >= 3).then(|| {
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
            sxy / sxx
        })
    };

    let budget = params.budget * map.domain_length();
    let within_budget = partition.unresolved_measure <= budget;
    let variation_summable = pv.is_finite() && tail_var < params.epsilon && within_budget;
    let inducing_times_summable = pt.is_finite() && tail_tau < params.epsilon && within_budget;
    Ok(SummabilityReport {
        rows,
        total_var_omega: pv,
        total_tau_len: pt,
        d_hat,
        tail_decay,
        horizon,
        tail_increment_var: tail_var,
        tail_increment_tau: tail_tau,
        epsilon: params.epsilon,
        unresolved_measure: partition.unresolved_measure,
        budget,
        variation_summable,
        inducing_times_summable,
        pass: variation_summable && inducing_times_summable,
        label: format!("up to tau = {horizon}"),
    })
}

#[cfg(test)]
mod tests;
