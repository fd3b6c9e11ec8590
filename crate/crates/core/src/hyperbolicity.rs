//! Expansion away from the critical set: empirical `kappa`, `c(delta)`,
//! `lambda(delta)`, and the selection of `delta` and `q0`.
//!
//! All constants are lower-envelope estimates over a finite sample (a
//! uniform grid plus uniform random points) and carry their sample counts;
//! they are not certified bounds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inducing::{InducingContext, InducingError, DEFAULT_P_MAX};
use crate::map::{MapError, MapSpec};
use crate::orbit::{compute_all_orbits, OrbitError};

pub const DEFAULT_MARGIN: f64 = 10.0;
pub const DEFAULT_CANDIDATES: [f64; 8] = [0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001];
pub const LAMBDA_FLOOR: f64 = 1e-6;
/// `n` enters the expansion fit only with this many admissible samples.
pub const MIN_FIT_SAMPLES: usize = 10;
/// Distances `2^(-k/H_PER_OCTAVE)` scanned for `h(delta)`.
pub const H_PER_OCTAVE: usize = 16;
pub const H_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HyperbolicityError {
    #[error("no delta candidates given")]
    NoCandidates,
    #[error("no delta candidate passes: {0:?}")]
    SelectionFailure(Vec<CandidateDiagnostic>),
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("c must be positive, got {0}")]
    NonPositiveC(f64),
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Orbit(#[from] OrbitError),
    #[error(transparent)]
    Inducing(#[from] InducingError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    /// Uniform grid points `lo + L k / grid`, `0 < k < grid`.
    pub grid: usize,
    pub random: usize,
    pub seed: u64,
    pub n_max: usize,
}

impl Default for Sampling {
    fn default() -> Self {
        Self {
            grid: 4096,
            random: 10_000,
            seed: 0,
            n_max: 60,
        }
    }
}

impl Sampling {
    pub fn points(&self, map: &MapSpec) -> Vec<f64> {
        let [lo, hi] = map.domain;
        let mut pts: Vec<f64> = (1..self.grid).map(|k| lo + (hi - lo) * k as f64 / self.grid as f64).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        pts.extend((0..self.random).map(|_| rng.gen_range(lo..hi)));
        pts
    }
}

/// Per-`n` minima of `log |Df^n|` over admissible samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub delta: f64,
    pub samples: usize,
    pub n_max: usize,
    /// `min log|Df^n(x)|` over `x` whose orbit avoids `Delta` for
    /// `0..n-1`; index 0 is `n = 1`.
    pub log_min: Vec<f64>,
    pub counts: Vec<usize>,
    /// `min |Df^n(x)|` at the first entry time `n >= 1` into `Delta`.
    pub kappa_hat: Option<f64>,
    pub entries: usize,
}

#[derive(Clone)]
struct Acc {
    log_min: Vec<f64>,
    counts: Vec<usize>,
    kappa: f64,
    entries: usize,
}

impl Acc {
    fn new(n: usize) -> Self {
        Self {
            log_min: vec![f64::INFINITY; n],
            counts: vec![0; n],
            kappa: f64::INFINITY,
            entries: 0,
        }
    }

    fn merge(mut self, o: Acc) -> Acc {
        for i in 0..self.log_min.len() {
            self.log_min[i] = self.log_min[i].min(o.log_min[i]);
            self.counts[i] += o.counts[i];
        }
        self.kappa = self.kappa.min(o.kappa);
        self.entries += o.entries;
        self
    }
}

fn in_delta(map: &MapSpec, x: f64, delta: f64) -> bool {
    map.critical_distance(x) < delta
}

/// Walk every sample forward until it enters `Delta` or `n_max` steps pass.
pub fn sample_envelope(map: &MapSpec, delta: f64, sampling: &Sampling) -> Envelope {
    let pts = sampling.points(map);
    let n_max = sampling.n_max.max(1);
    let acc = pts
        .par_iter()
        .fold(
            || Acc::new(n_max),
            |mut acc, &x| {
                if in_delta(map, x, delta) {
                    return acc;
                }
                let mut y = x;
                let mut logd = 0.0;
                for n in 1..=n_max {
                    let Ok(j) = map.step_jet(y) else { break };
                    logd += j.d1.abs().ln();
                    y = j.value.clamp(map.domain[0], map.domain[1]);
                    if !logd.is_finite() {
                        break;
                    }
                    acc.log_min[n - 1] = acc.log_min[n - 1].min(logd);
                    acc.counts[n - 1] += 1;
                    if in_delta(map, y, delta) {
                        acc.kappa = acc.kappa.min(logd.exp());
                        acc.entries += 1;
                        break;
                    }
                }
                acc
            },
        )
        .reduce(|| Acc::new(n_max), Acc::merge);
    Envelope {
        delta,
        samples: pts.len(),
        n_max,
        log_min: acc.log_min,
        counts: acc.counts,
        kappa_hat: (acc.entries > 0).then_some(acc.kappa),
        entries: acc.entries,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaEstimate {
    pub kappa_hat: f64,
    pub segments: usize,
    pub samples: usize,
}

/// Smallest `|Df^n(x)|` observed at a first entry into `Delta`; `None`
/// when no sampled orbit enters within `n_max` steps.
pub fn estimate_kappa(map: &MapSpec, delta: f64, sampling: &Sampling) -> Option<KappaEstimate> {
    let env = sample_envelope(map, delta, sampling);
    env.kappa_hat.map(|k| KappaEstimate {
        kappa_hat: k,
        segments: env.entries,
        samples: env.samples,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionFit {
    pub c_hat: f64,
    pub lambda_hat: f64,
    /// Slope before clamping.
    pub raw_lambda: f64,
    /// `false` when the raw slope is not positive.
    pub expanding: bool,
    pub points_used: usize,
}

/// Fit `log c + lambda n` under the points `(n, m(n))`: `lambda` is the
/// slope of the last edge of the lower convex hull, `log c` the largest
/// intercept keeping the line below every point.
pub fn fit_lower_envelope(points: &[(f64, f64)]) -> Option<ExpansionFit> {
    if points.is_empty() {
        return None;
    }
    let raw = if points.len() == 1 {
        points[0].1
    } else {
        let mut hull: Vec<(f64, f64)> = Vec::new();
        for &p in points {
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                let cross = (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(p);
        }
        let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
        (b.1 - a.1) / (b.0 - a.0)
    };
    let lambda_hat = raw.max(LAMBDA_FLOOR);
    let log_c = points.iter().map(|&(n, m)| m - lambda_hat * n).fold(f64::INFINITY, f64::min);
    Some(ExpansionFit {
        c_hat: log_c.exp(),
        lambda_hat,
        raw_lambda: raw,
        expanding: raw > 0.0,
        points_used: points.len(),
    })
}

impl Envelope {
    pub fn fit_points(&self) -> Vec<(f64, f64)> {
        let mut pts: Vec<(f64, f64)> = self
            .log_min
            .iter()
            .zip(&self.counts)
            .enumerate()
            .filter(|(_, (m, c))| **c >= MIN_FIT_SAMPLES && m.is_finite())
            .map(|(i, (m, _))| ((i + 1) as f64, *m))
            .collect();
        if pts.is_empty() {
            // Fall back to whatever n = 1 offers.
            if self.counts[0] > 0 {
                pts.push((1.0, self.log_min[0]));
            }
        }
        pts
    }

    pub fn fit(&self) -> Option<ExpansionFit> {
        fit_lower_envelope(&self.fit_points())
    }
}

/// `(c_hat, lambda_hat)` for the expansion outside `Delta`.
pub fn estimate_expansion(map: &MapSpec, delta: f64, sampling: &Sampling) -> Option<ExpansionFit> {
    sample_envelope(map, delta, sampling).fit()
}

/// Smallest `q0 >= 1` with `c e^(lambda q0) >= 2`.
pub fn choose_q0(c_hat: f64, lambda_hat: f64) -> Result<usize, HyperbolicityError> {
    if !(lambda_hat > 0.0 && lambda_hat.is_finite()) {
        return Err(HyperbolicityError::NonPositiveLambda(lambda_hat));
    }
    if !(c_hat > 0.0) {
        return Err(HyperbolicityError::NonPositiveC(c_hat));
    }
    let ok = |q: usize| c_hat * (lambda_hat * q as f64).exp() >= 2.0;
    let guess = ((2.0 / c_hat).ln() / lambda_hat).ceil();
    let mut q = if guess.is_finite() && guess > 1.0 { guess as usize } else { 1 };
    while q > 1 && ok(q - 1) {
        q -= 1;
    }
    while !ok(q) {
        q += 1;
    }
    Ok(q)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HDelta {
    pub h: usize,
    /// Minimum binding period per critical point (1 for non-binding ones).
    pub per_point: Vec<usize>,
    pub grid_points: usize,
}

/// Distances `2^(-k/per_octave) < delta`, down to [`H_FLOOR`]. The lattice
/// is absolute, so a smaller `delta` scans a subset of the same points.
pub fn h_lattice(delta: f64, per_octave: usize) -> Vec<f64> {
    let per = per_octave.max(1) as f64;
    let k0 = (-(delta.log2()) * per).floor().max(0.0) as i64;
    (k0..)
        .map(|k| (-(k as f64) / per).exp2())
        .skip_while(|&s| s >= delta)
        .take_while(|&s| s >= H_FLOOR)
        .collect()
}

/// `h(delta)`: smallest binding period over the lattice in each
/// neighbourhood.
pub fn compute_h_delta(map: &MapSpec, delta: f64, per_octave: usize, p_max: usize) -> Result<HDelta, HyperbolicityError> {
    let ctx = InducingContext::new(map, delta, 1, p_max)?;
    compute_h_delta_ctx(&ctx, per_octave)
}

pub fn compute_h_delta_ctx(ctx: &InducingContext, per_octave: usize) -> Result<HDelta, HyperbolicityError> {
    let lattice = h_lattice(ctx.delta(), per_octave);
    let mut per_point = Vec::with_capacity(ctx.map.critical.len());
    for (idx, c) in ctx.map.critical.iter().enumerate() {
        if !c.binds() {
            per_point.push(1);
            continue;
        }
        let ps: Vec<usize> = lattice
            .par_iter()
            .map(|&s| ctx.binding_period_at(c.location + c.side.sign() * s, idx).map(|b| b.p))
            .collect::<Result<_, _>>()?;
        per_point.push(ps.into_iter().min().unwrap_or(ctx.p_max));
    }
    Ok(HDelta {
        h: per_point.iter().copied().min().unwrap_or(1),
        per_point,
        grid_points: lattice.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateDiagnostic {
    pub delta: f64,
    /// Disjoint neighbourhoods with images avoiding every neighbourhood.
    pub item1: bool,
    /// `gamma_n < 1/2` for `h <= n <= horizon`.
    pub item2: bool,
    /// `D_{n-1}^{1/(2 ell - 1)} >= margin * 2 / kappa` for `h <= n <= horizon`.
    pub item3: bool,
    pub kappa_hat: Option<f64>,
    pub h_delta: Option<usize>,
    pub notes: Vec<String>,
}

impl CandidateDiagnostic {
    pub fn passes(&self) -> bool {
        self.item1 && self.item2 && self.item3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpansionReport {
    pub delta: f64,
    pub kappa_hat: Option<f64>,
    pub c_hat: f64,
    pub lambda_hat: f64,
    pub raw_lambda: f64,
    pub expanding: bool,
    pub h_delta: usize,
    pub q0: usize,
    pub margin: f64,
    pub margin_check: [bool; 3],
    pub samples: usize,
    pub n_max: usize,
    pub candidates: Vec<CandidateDiagnostic>,
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0.max(b.0) < a.1.min(b.1)
}

fn check_item1(map: &MapSpec, delta: f64, notes: &mut Vec<String>) -> bool {
    if let Err(e) = map.check_delta(delta) {
        notes.push(e.to_string());
        return false;
    }
    for i in 0..map.critical.len() {
        let img = match map.delta_image(i, delta) {
            Ok(v) => v,
            Err(e) => {
                notes.push(e.to_string());
                return false;
            }
        };
        for j in 0..map.critical.len() {
            if overlaps(img, map.delta_interval(j, delta)) {
                notes.push(format!(
                    "image of Delta({}) meets Delta({})",
                    map.critical[i].label(),
                    map.critical[j].label()
                ));
                return false;
            }
        }
    }
    true
}

/// Largest candidate satisfying the three selection conditions, with the
/// expansion report at that `delta`.
pub fn choose_delta(
    map: &MapSpec,
    candidates: &[f64],
    margin: f64,
    sampling: &Sampling,
    p_max: usize,
) -> Result<ExpansionReport, HyperbolicityError> {
    if candidates.is_empty() {
        return Err(HyperbolicityError::NoCandidates);
    }
    let mut cands = candidates.to_vec();
    cands.sort_by(|a, b| b.total_cmp(a));
    let horizon = p_max.max(1);
    let orbits = if map.critical.is_empty() {
        Vec::new()
    } else {
        compute_all_orbits(map, horizon)?
    };
    let mut diags = Vec::new();
    for &delta in &cands {
        let mut notes = Vec::new();
        let item1 = check_item1(map, delta, &mut notes);
        if !item1 {
            diags.push(CandidateDiagnostic {
                delta,
                item1,
                item2: false,
                item3: false,
                kappa_hat: None,
                h_delta: None,
                notes,
            });
            continue;
        }
        let env = sample_envelope(map, delta, sampling);
        let h = compute_h_delta(map, delta, H_PER_OCTAVE, p_max)?;
        let mut item2 = true;
        let mut item3 = true;
        for (c, rec) in map.critical.iter().zip(&orbits) {
            if !c.binds() {
                continue;
            }
            for e in rec.entries.iter().filter(|e| e.n >= h.h) {
                if e.gamma.is_some_and(|g| g >= 0.5) {
                    if item2 {
                        notes.push(format!("gamma_{} = 1/2 at {}", e.n, c.label()));
                    }
                    item2 = false;
                }
                if let Some(k) = env.kappa_hat {
                    let g = rec.growth(e.n);
                    if g < margin * 2.0 / k {
                        if item3 {
                            notes.push(format!(
                                "D_(n-1)^(1/(2l-1)) = {g:.4e} < {:.4e} at n = {} for {}",
                                margin * 2.0 / k,
                                e.n,
                                c.label()
                            ));
                        }
                        item3 = false;
                    }
                }
            }
            if rec.len() < h.h {
                notes.push(format!("h(delta) = {} beyond orbit horizon for {}", h.h, c.label()));
            }
        }
        if env.kappa_hat.is_none() {
            notes.push("no sampled orbit enters Delta; item (3) vacuous".into());
        }
        let diag = CandidateDiagnostic {
            delta,
            item1,
            item2,
            item3,
            kappa_hat: env.kappa_hat,
            h_delta: Some(h.h),
            notes,
        };
        let pass = diag.passes();
        diags.push(diag);
        if pass {
            let fit = env.fit().unwrap_or(ExpansionFit {
                c_hat: 1.0,
                lambda_hat: LAMBDA_FLOOR,
                raw_lambda: 0.0,
                expanding: false,
                points_used: 0,
            });
            let q0 = choose_q0(fit.c_hat, fit.lambda_hat)?;
            return Ok(ExpansionReport {
                delta,
                kappa_hat: env.kappa_hat,
                c_hat: fit.c_hat,
                lambda_hat: fit.lambda_hat,
                raw_lambda: fit.raw_lambda,
                expanding: fit.expanding,
                h_delta: h.h,
                q0,
                margin,
                margin_check: [item1, item2, item3],
                samples: env.samples,
                n_max: env.n_max,
                candidates: diags,
            });
        }
    }
    Err(HyperbolicityError::SelectionFailure(diags))
}

/// Convenience wrapper with the default sampling and `p_max`.
pub fn choose_delta_default(map: &MapSpec, candidates: &[f64], margin: f64) -> Result<ExpansionReport, HyperbolicityError> {
    choose_delta(map, candidates, margin, &Sampling::default(), DEFAULT_P_MAX)
}
