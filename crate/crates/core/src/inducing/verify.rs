//! Numerical checks of the binding-period estimates on a built partition.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InducedPartition, InducingContext, InducingError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SandwichRow {
    pub critical: usize,
    pub p: usize,
    pub d_min: f64,
    pub d_max: f64,
    /// `d_min * D_{p-1}^{2/(2 ell - 1)}`.
    pub lower: f64,
    /// `d_max * D_{p-2}^{2/(2 ell - 1)}`.
    pub upper: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub x: f64,
    pub j: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BindingLemmaReport {
    pub samples: usize,
    /// Largest `(|I_j| / d(I_j)) / (2 gamma_j)` over samples and `j < p`.
    pub binding_ratio_max: f64,
    pub binding_ratio_pass: bool,
    pub binding_witness: Option<Witness>,
    /// Largest distortion of `f^(p-1)` on `(f(x), c_1)`.
    pub gamma_hat: f64,
    /// Smallest `|Df^p(x)| / D_{p-1}^{1/(2 ell - 1)}`.
    pub margin_ratio: f64,
    pub margin_pass: bool,
    pub sandwich: Vec<SandwichRow>,
    pub c1: f64,
    pub c2: f64,
    pub sandwich_pass: bool,
    /// Binding periods in `[h, p_max]` with no level set, per critical
    /// point; the sandwich check is vacuous there.
    pub empty_levels: Vec<(usize, usize)>,
    pub min_inf_df: f64,
    pub min_inf_df_free: f64,
    pub min_inf_df_bound: f64,
    pub expansion_pass: bool,
    pub pass: bool,
}

struct Sample {
    ratio: f64,
    witness: Option<Witness>,
    distortion: f64,
    margin: f64,
}

fn sample(ctx: &InducingContext, idx: usize, x: f64) -> Result<Option<Sample>, InducingError> {
    let map = &ctx.map;
    let b = ctx.binding_period_at(x, idx)?;
    if b.truncated {
        return Ok(None);
    }
    let rec = &ctx.orbits[idx];
    let mut ratio = 0.0f64;
    let mut witness = None;
    let mut distortion = 1.0;
    for st in b.trajectory.iter().take(b.p - 1) {
        let r = st.hat_len / st.dist;
        let bound = 2.0 * st.gamma;
        if r / bound > ratio {
            ratio = r / bound;
            witness = Some(Witness {
                x,
                j: st.j,
                value: r,
                bound,
            });
        }
    }
    // Distortion along I_1, ..., I_{p-1}; each lies in a single branch.
    let mut y = map.step(x)?;
    for j in 1..b.p {
        let cj = rec.entries[j - 1].c_n;
        let bi = map.branch_at(0.5 * (y + cj))?;
        let (lo, hi) = map.branches[bi].df_range(y, cj)?;
        distortion *= hi / lo;
        y = map.step(y)?;
    }
    let margin = b.df_p / rec.growth(b.p).max(f64::MIN_POSITIVE);
    Ok(Some(Sample {
        ratio,
        witness,
        distortion,
        margin,
    }))
}

/// Sample `n_samples` points in each binding neighbourhood and evaluate the
/// binding estimates; also checks expansion of the induced branches.
pub fn verify_binding_lemmas(
    ctx: &InducingContext,
    partition: &InducedPartition,
    n_samples: usize,
) -> Result<BindingLemmaReport, InducingError> {
    let map = &ctx.map;
    let delta = ctx.delta();
    let mut xs = Vec::new();
    for (idx, c) in map.critical.iter().enumerate() {
        if !c.binds() {
            continue;
        }
        let resolved: Vec<_> = partition.delta_pieces[idx].iter().filter(|p| p.p.is_some()).collect();
        let Some(s_in) = resolved.iter().map(|p| (p.lo - c.location).abs().min((p.hi - c.location).abs())).reduce(f64::min) else {
            continue;
        };
        let s_in = s_in.max(f64::MIN_POSITIVE);
        for k in 0..n_samples {
            let s = delta * (s_in / delta).powf((k as f64 + 0.5) / n_samples as f64);
            let x = c.location + c.side.sign() * s;
            if resolved.iter().any(|p| p.lo < x && x < p.hi) {
                xs.push((idx, x));
            }
        }
    }
    let results: Vec<Option<Sample>> = xs
        .par_iter()
        .map(|&(idx, x)| sample(ctx, idx, x))
        .collect::<Result<_, _>>()?;
    let results: Vec<Sample> = results.into_iter().flatten().collect();

    let mut ratio_max = 0.0f64;
    let mut witness = None;
    let mut gamma_hat = 1.0f64;
    let mut margin = f64::INFINITY;
    for s in &results {
        if s.ratio > ratio_max {
            ratio_max = s.ratio;
            witness = s.witness.clone();
        }
        gamma_hat = gamma_hat.max(s.distortion);
        margin = margin.min(s.margin);
    }

    let mut sandwich = Vec::new();
    let mut empty_levels = Vec::new();
    for (idx, c) in map.critical.iter().enumerate() {
        if !c.binds() {
            continue;
        }
        let rec = &ctx.orbits[idx];
        let e2 = 2.0 / (2.0 * c.order - 1.0);
        let pieces = &partition.delta_pieces[idx];
        let h = pieces.iter().filter_map(|p| p.p).min();
        for p in h.unwrap_or(usize::MAX)..=ctx.p_max {
            let level: Vec<_> = pieces.iter().filter(|q| q.p == Some(p)).collect();
            if level.is_empty() {
                empty_levels.push((idx, p));
                continue;
            }
            if p < 2 {
                continue;
            }
            let d_min = level.iter().map(|q| (q.lo - c.location).abs().min((q.hi - c.location).abs())).fold(f64::INFINITY, f64::min);
            let d_max = level.iter().map(|q| (q.lo - c.location).abs().max((q.hi - c.location).abs())).fold(0.0, f64::max);
            let dp1 = rec.entries[p - 1].dn_prev;
            let dp2 = rec.entries[p - 2].dn_prev;
            sandwich.push(SandwichRow {
                critical: idx,
                p,
                d_min,
                d_max,
                lower: d_min * dp1.powf(e2),
                upper: d_max * dp2.powf(e2),
            });
        }
    }
    let c1 = sandwich.iter().map(|r| r.lower).fold(f64::INFINITY, f64::min);
    let c2 = sandwich.iter().map(|r| r.upper).fold(0.0, f64::max);

    let min_of = |it: &mut dyn Iterator<Item = f64>| it.fold(f64::INFINITY, f64::min);
    let min_inf_df_free = min_of(&mut partition.free().map(|b| b.inf_df));
    let min_inf_df_bound = min_of(&mut partition.bound().map(|b| b.inf_df));
    let min_inf_df = min_inf_df_free.min(min_inf_df_bound);

    let binding_ratio_pass = ratio_max <= 1.0;
    let margin_pass = results.is_empty() || (margin > 0.0 && margin.is_finite());
    let sandwich_pass = sandwich.is_empty() || (c1 > 0.0 && c2.is_finite());
    let expansion_pass = min_inf_df >= 2.0;
    Ok(BindingLemmaReport {
        samples: results.len(),
        binding_ratio_max: ratio_max,
        binding_ratio_pass,
        binding_witness: witness,
        gamma_hat,
        margin_ratio: margin,
        margin_pass,
        sandwich,
        c1,
        c2,
        sandwich_pass,
        empty_levels,
        min_inf_df,
        min_inf_df_free,
        min_inf_df_bound,
        expansion_pass,
        pass: binding_ratio_pass && margin_pass && sandwich_pass && expansion_pass && gamma_hat.is_finite(),
    })
}
