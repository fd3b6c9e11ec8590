//! Invariant densities: Ulam discretization of the induced map, power
//! iteration, pull-back to the original map and Birkhoff histograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inducing::{InducedPartition, DEFAULT_UNRESOLVED_BUDGET};
use crate::map::{MapError, MapSpec};

pub const DEFAULT_CELLS: usize = 4096;
pub const MIN_CELLS: usize = 64;
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 100_000;
pub const DEFAULT_BURN_IN: usize = 1000;
pub const MIN_BIRKHOFF_STEPS: usize = 100_000;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unresolved measure {measure} exceeds budget {budget}")]
    PartitionQuality { measure: f64, budget: f64 },
    #[error("power iteration did not converge after {iterations} iterations (step change {step_change:e})")]
    NonConvergence { iterations: usize, step_change: f64 },
    #[error("power iteration oscillates (step change {step_change:e} after averaging)")]
    Oscillation { step_change: f64 },
    #[error("every orbit left the domain")]
    AllEscaped,
    #[error(transparent)]
    Map(#[from] MapError),
}

/// Uniform cells over the domain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub m: usize,
}

impl Grid {
    pub fn new(domain: [f64; 2], m: usize) -> Self {
        Self { lo: domain[0], hi: domain[1], m }
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.m as f64
    }

    /// Left edge of cell `k`; `k == m` gives the right end of the domain.
    pub fn edge(&self, k: usize) -> f64 {
        if k >= self.m {
            self.hi
        } else {
            self.lo + (self.hi - self.lo) * k as f64 / self.m as f64
        }
    }

    pub fn cell(&self, x: f64) -> usize {
        let k = ((x - self.lo) / (self.hi - self.lo) * self.m as f64).floor();
        if k.is_nan() || k < 0.0 {
            0
        } else {
            (k as usize).min(self.m - 1)
        }
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.m).map(|k| 0.5 * (self.edge(k) + self.edge(k + 1))).collect()
    }
}

/// Forward images of an interval along an itinerary.
struct Tower {
    /// `f^j([a, b])` as an ordered interval, `j = 0..=n`.
    hulls: Vec<(f64, f64)>,
    /// Orientation of `f^j`.
    increasing: Vec<bool>,
}

fn tower(map: &MapSpec, itinerary: &[usize], a: f64, b: f64) -> Result<Tower, MapError> {
    let mut hulls = Vec::with_capacity(itinerary.len() + 1);
    let mut increasing = Vec::with_capacity(itinerary.len() + 1);
    hulls.push((a, b));
    increasing.push(true);
    let [dlo, dhi] = map.domain;
    for &k in itinerary {
        let br = &map.branches[k];
        let (u, v) = *hulls.last().unwrap();
        let (fu, fv) = (br.value(u.clamp(br.lo, br.hi))?, br.value(v.clamp(br.lo, br.hi))?);
        hulls.push((fu.min(fv).clamp(dlo, dhi), fu.max(fv).clamp(dlo, dhi)));
        let inc = *increasing.last().unwrap();
        increasing.push(inc == br.increasing);
    }
    Ok(Tower { hulls, increasing })
}

/// Split `[a, b]` into pieces on which both `x` and `f^j(x)` stay in a
/// single cell, where `f^j` follows `itinerary`. Returns
/// `(cell of x, cell of f^j x, length)` in increasing `x`.
pub fn segment_cells(
    map: &MapSpec,
    itinerary: &[usize],
    a: f64,
    b: f64,
    grid: &Grid,
) -> Result<Vec<(usize, usize, f64)>, MapError> {
    let t = tower(map, itinerary, a, b)?;
    let mut out = Vec::new();
    level_segments(map, itinerary, &t, itinerary.len(), grid, &mut out)?;
    Ok(out)
}

fn level_segments(
    map: &MapSpec,
    itinerary: &[usize],
    t: &Tower,
    j: usize,
    grid: &Grid,
    out: &mut Vec<(usize, usize, f64)>,
) -> Result<(), MapError> {
    let (a, b) = t.hulls[0];
    let (u, v) = t.hulls[j];
    let increasing = t.increasing[j];
    let (ku, kv) = (grid.cell(u), grid.cell(v));

    // Preimages of image-cell edges, increasing in x.
    let mut pre: Vec<(f64, usize)> = Vec::with_capacity(kv - ku);
    for e in ku + 1..=kv {
        let mut z = grid.edge(e);
        for step in (0..j).rev() {
            let br = &map.branches[itinerary[step]];
            let (lo, hi) = t.hulls[step];
            let (lo, hi) = (lo.max(br.lo), hi.min(br.hi));
            let (ilo, ihi) = t.hulls[step + 1];
            let (flo, fhi) = if br.increasing { (ilo, ihi) } else { (ihi, ilo) };
            z = br.invert_from(z, lo, hi, flo, fhi)?;
        }
        // Crossing edge e moves the image from cell e-1 to e (or back).
        pre.push((z, if increasing { e } else { e - 1 }));
    }
    if !increasing {
        pre.reverse();
    }
    let mut image_cell = if increasing { ku } else { kv };

    let mut x = a;
    let mut dom_cell = grid.cell(a);
    let mut dom_next = dom_cell + 1;
    let mut p = 0;
    loop {
        let dom_edge = if dom_next <= grid.m { grid.edge(dom_next).min(b) } else { b };
        let pre_edge = pre.get(p).map_or(b, |&(z, _)| z.clamp(x, b));
        let next = dom_edge.min(pre_edge);
        if next > x {
            out.push((dom_cell, image_cell, next - x));
            x = next;
        }
        if x >= b {
            break;
        }
        if pre_edge <= dom_edge {
            image_cell = pre[p].1;
            p += 1;
        } else {
            dom_cell = dom_next.min(grid.m - 1);
            dom_next += 1;
        }
    }
    Ok(())
}

/// Sparse transition table on a uniform grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferTable {
    pub grid: Grid,
    /// Row `i` lists `(j, P_ij)` with `j` ascending.
    pub rows: Vec<Vec<(usize, f64)>>,
    /// Resolved length inside each cell.
    pub resolved: Vec<f64>,
    /// Rows renormalized over a partially resolved cell.
    pub flagged: Vec<usize>,
    /// Cells with no resolved length.
    pub dead: Vec<usize>,
}

impl TransferTable {
    /// Table from explicit rows; every row must be stochastic.
    pub fn from_rows(grid: Grid, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let w = grid.width();
        Self {
            resolved: vec![w; grid.m],
            grid,
            rows,
            flagged: Vec::new(),
            dead: Vec::new(),
        }
    }

    fn assemble(grid: Grid, pieces: Vec<Vec<(usize, usize, f64)>>) -> Self {
        let m = grid.m;
        let mut raw: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
        let mut resolved = vec![0.0; m];
        for piece in pieces {
            for (i, j, len) in piece {
                raw[i].push((j, len));
                resolved[i] += len;
            }
        }
        let w = grid.width();
        let mut rows = Vec::with_capacity(m);
        let (mut flagged, mut dead) = (Vec::new(), Vec::new());
        for (i, mut r) in raw.into_iter().enumerate() {
            r.sort_by_key(|e| e.0);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(r.len());
            for (j, len) in r {
                match merged.last_mut() {
                    Some(last) if last.0 == j => last.1 += len,
                    _ => merged.push((j, len)),
                }
            }
            let total: f64 = merged.iter().map(|e| e.1).sum();
            if total <= 0.0 {
                dead.push(i);
                merged.clear();
            } else {
                if total < w * (1.0 - 1e-9) {
                    flagged.push(i);
                }
                for e in &mut merged {
                    e.1 /= total;
                }
            }
            rows.push(merged);
        }
        Self {
            grid,
            rows,
            resolved,
            flagged,
            dead,
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// One step `v P` on cell masses. Mass on dead rows is dropped.
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.m];
        for (i, row) in self.rows.iter().enumerate() {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            for &(j, p) in row {
                out[j] += vi * p;
            }
        }
        out
    }
}

/// Ulam table of the induced map: `P_ij = |cell_i ∩ f̂^{-1} cell_j| / |cell_i|`,
/// with `|cell_i|` replaced by its resolved length.
pub fn ulam_matrix(map: &MapSpec, partition: &InducedPartition, m: usize) -> Result<TransferTable, DensityError> {
    if m == 0 {
        return Err(DensityError::InvalidParameter("m must be positive".into()));
    }
    let grid = Grid::new(map.domain, m);
    let pieces = partition
        .branches
        .par_iter()
        .map(|br| segment_cells(map, &br.itinerary, br.a, br.b, &grid))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransferTable::assemble(grid, pieces))
}

/// Ulam table of `f` itself.
pub fn map_table(map: &MapSpec, m: usize) -> Result<TransferTable, DensityError> {
    if m == 0 {
        return Err(DensityError::InvalidParameter("m must be positive".into()));
    }
    let grid = Grid::new(map.domain, m);
    let pieces = (0..map.branches.len())
        .into_par_iter()
        .map(|k| segment_cells(map, &[k], map.branches[k].lo, map.branches[k].hi, &grid))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TransferTable::assemble(grid, pieces))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stationary {
    /// Cell masses, summing to 1.
    pub mass: Vec<f64>,
    pub iterations: usize,
    pub step_change: f64,
    /// Set when the period-2 average was taken.
    pub averaged: bool,
}

fn normalize(v: &mut [f64]) -> f64 {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        for x in v.iter_mut() {
            *x /= s;
        }
    }
    s
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Power iteration from the uniform vector. A vector that is already
/// stationary (e.g. for the identity table) is returned after one step.
pub fn stationary_density(table: &TransferTable, tol: f64, max_iters: usize) -> Result<Stationary, DensityError> {
    let m = table.grid.m;
    let mut v = vec![1.0 / m as f64; m];
    let mut prev2: Option<Vec<f64>> = None;
    let mut step = f64::INFINITY;
    for it in 1..=max_iters {
        let mut next = table.apply(&v);
        if normalize(&mut next) == 0.0 {
            return Err(DensityError::NonConvergence { iterations: it, step_change: f64::INFINITY });
        }
        step = l1(&next, &v);
        if step < tol {
            return Ok(Stationary { mass: next, iterations: it, step_change: step, averaged: false });
        }
        // Period two: v_{k+1} ~ v_{k-1} while v_{k+1} and v_k differ.
        if it > 100 {
            if let Some(p2) = &prev2 {
                if l1(&next, p2) < tol {
                    let mut avg: Vec<f64> = next.iter().zip(&v).map(|(a, b)| 0.5 * (a + b)).collect();
                    normalize(&mut avg);
                    let mut check = table.apply(&avg);
                    normalize(&mut check);
                    let s = l1(&check, &avg);
                    if s < 10.0 * tol {
                        return Ok(Stationary { mass: avg, iterations: it, step_change: s, averaged: true });
                    }
                    return Err(DensityError::Oscillation { step_change: s });
                }
            }
        }
        prev2 = Some(std::mem::replace(&mut v, next));
    }
    Err(DensityError::NonConvergence { iterations: max_iters, step_change: step })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PullBack {
    /// Per-cell density, integrating to 1.
    pub density: Vec<f64>,
    /// Total pushed mass before normalization.
    pub raw_mass: f64,
    /// `sum_I tau(I) * mass(I)`.
    pub expected_mass: f64,
}

/// Spread `h_induced` (cell masses of the induced measure) over the
/// tower: push its restriction to each branch `I` forward by `f^j`,
/// `0 <= j < tau(I)`, bin by cell and normalize.
pub fn pull_back(
    map: &MapSpec,
    partition: &InducedPartition,
    table: &TransferTable,
    h_induced: &[f64],
) -> Result<PullBack, DensityError> {
    let grid = table.grid;
    // Density of the induced measure on the resolved part of each cell.
    let dens: Vec<f64> = h_induced
        .iter()
        .zip(&table.resolved)
        .map(|(&v, &r)| if r > 0.0 { v / r } else { 0.0 })
        .collect();
    let per_branch = partition
        .branches
        .par_iter()
        .map(|br| -> Result<(Vec<(usize, f64)>, f64), MapError> {
            let t = tower(map, &br.itinerary, br.a, br.b)?;
            let mut acc = Vec::new();
            let mut mass_i = 0.0;
            let mut segs = Vec::new();
            for j in 0..br.tau {
                segs.clear();
                level_segments(map, &br.itinerary, &t, j, &grid, &mut segs)?;
                for &(i, k, len) in &segs {
                    let w = dens[i] * len;
                    if j == 0 {
                        mass_i += w;
                    }
                    acc.push((k, w));
                }
            }
            Ok((acc, br.tau as f64 * mass_i))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut density = vec![0.0; grid.m];
    let mut expected = 0.0;
    for (acc, e) in per_branch {
        for (k, w) in acc {
            density[k] += w;
        }
        expected += e;
    }
    let raw = normalize(&mut density);
    let w = grid.width();
    for d in &mut density {
        *d /= w;
    }
    Ok(PullBack { density, raw_mass: raw, expected_mass: expected })
}

/// `L1` distance between a density and its image under one step of the
/// Ulam table of `f`.
pub fn invariance_residual(table: &TransferTable, h: &[f64]) -> f64 {
    let w = table.grid.width();
    let mass: Vec<f64> = h.iter().map(|d| d * w).collect();
    l1(&table.apply(&mass), &mass)
}

/// `sum |h1 - h2| * width`.
pub fn l1_distance(grid: &Grid, h1: &[f64], h2: &[f64]) -> f64 {
    l1(h1, h2) * grid.width()
}

/// Cell averages of `1 / (pi sqrt(1 - x^2))` on `[-1, 1]`.
pub fn chebyshev_reference(grid: &Grid) -> Vec<f64> {
    let w = grid.width();
    (0..grid.m)
        .map(|k| {
            let (u, v) = (grid.edge(k).clamp(-1.0, 1.0), grid.edge(k + 1).clamp(-1.0, 1.0));
            (v.asin() - u.asin()) / (std::f64::consts::PI * w)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffParams {
    pub seeds: usize,
    /// Total counted steps, split evenly across seeds.
    pub steps: usize,
    pub m: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for BirkhoffParams {
    fn default() -> Self {
        Self {
            seeds: 10,
            steps: 10_000_000,
            m: 1024,
            burn_in: DEFAULT_BURN_IN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffHistogram {
    pub grid: Grid,
    pub density: Vec<f64>,
    pub counted: u64,
    /// Orbits restarted after landing on a branch boundary or sticking
    /// at an exact fixed point.
    pub restarts: u64,
}

/// Occupation histogram of forward orbits from uniformly random starts.
pub fn birkhoff_histogram(map: &MapSpec, params: &BirkhoffParams) -> Result<BirkhoffHistogram, DensityError> {
    if params.steps < MIN_BIRKHOFF_STEPS || params.seeds == 0 || params.m == 0 {
        return Err(DensityError::InvalidParameter(format!(
            "need steps >= {MIN_BIRKHOFF_STEPS}, seeds >= 1 and m >= 1"
        )));
    }
    let grid = Grid::new(map.domain, params.m);
    let per_seed = params.steps / params.seeds;
    let [lo, hi] = map.domain;
    let runs: Vec<(Vec<u64>, u64, u64)> = (0..params.seeds)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
            rng.set_stream(s as u64);
            let mut counts = vec![0u64; grid.m];
            let mut restarts = 0u64;
            let mut counted = 0u64;
            let fresh = |rng: &mut ChaCha8Rng| rng.gen_range(lo..hi);
            let mut x = fresh(&mut rng);
            let mut burn = params.burn_in;
            let mut failures = 0usize;
            while (counted as usize) < per_seed {
                match map.step(x) {
                    Ok(y) if y != x && y.is_finite() => {
                        x = y;
                        failures = 0;
                        if burn > 0 {
                            burn -= 1;
                        } else {
                            counts[grid.cell(x)] += 1;
                            counted += 1;
                        }
                    }
                    _ => {
                        restarts += 1;
                        failures += 1;
                        if failures > 1000 {
                            break;
                        }
                        x = fresh(&mut rng);
                    }
                }
            }
            (counts, counted, restarts)
        })
        .collect();
    let mut counts = vec![0u64; grid.m];
    let (mut counted, mut restarts) = (0u64, 0u64);
    for (c, n, r) in runs {
        for (a, b) in counts.iter_mut().zip(c) {
            *a += b;
        }
        counted += n;
        restarts += r;
    }
    if counted == 0 {
        return Err(DensityError::AllEscaped);
    }
    let scale = 1.0 / (counted as f64 * grid.width());
    let density = counts.iter().map(|&c| c as f64 * scale).collect();
    Ok(BirkhoffHistogram { grid, density, counted, restarts })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityParams {
    pub m: usize,
    pub tol: f64,
    pub max_iters: usize,
    /// Allowed unresolved measure as a fraction of the domain length.
    pub budget: f64,
}

impl Default for DensityParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_CELLS,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            budget: DEFAULT_UNRESOLVED_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub grid: Grid,
    pub h_induced: Vec<f64>,
    pub h_map: Vec<f64>,
    pub invariance_residual: f64,
    pub unresolved_mass: f64,
    pub iterations: usize,
    pub step_change: f64,
    pub averaged: bool,
    pub raw_mass: f64,
    pub expected_mass: f64,
    pub flagged_rows: usize,
    pub dead_rows: usize,
}

impl DensityEstimate {
    /// `cell_center,density` rows of the density for `f`.
    pub fn to_csv(&self) -> String {
        density_csv(&self.grid, &self.h_map)
    }

    pub fn induced_csv(&self) -> String {
        density_csv(&self.grid, &self.h_induced)
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "m": self.grid.m,
            "domain": [self.grid.lo, self.grid.hi],
            "invariance_residual": self.invariance_residual,
            "unresolved_mass": self.unresolved_mass,
            "iterations": self.iterations,
            "step_change": self.step_change,
            "period_two_averaged": self.averaged,
            "raw_mass": self.raw_mass,
            "expected_mass": self.expected_mass,
            "flagged_rows": self.flagged_rows,
            "dead_rows": self.dead_rows,
        })
    }
}

pub fn density_csv(grid: &Grid, h: &[f64]) -> String {
    let mut s = String::from("cell_center,density\n");
    for (c, d) in grid.centers().iter().zip(h) {
        s.push_str(&format!("{c},{d}\n"));
    }
    s
}

/// Induced density, pull-back and invariance residual in one go.
pub fn estimate_density(
    map: &MapSpec,
    partition: &InducedPartition,
    params: &DensityParams,
) -> Result<DensityEstimate, DensityError> {
    if params.m < MIN_CELLS {
        return Err(DensityError::InvalidParameter(format!("m must be at least {MIN_CELLS}")));
    }
    let budget = params.budget * map.domain_length();
    if partition.unresolved_measure > budget {
        return Err(DensityError::PartitionQuality { measure: partition.unresolved_measure, budget });
    }
    let table = ulam_matrix(map, partition, params.m)?;
    let st = stationary_density(&table, params.tol, params.max_iters)?;
    let w = table.grid.width();
    let pb = pull_back(map, partition, &table, &st.mass)?;
    let one_step = map_table(map, params.m)?;
    let residual = invariance_residual(&one_step, &pb.density);
    Ok(DensityEstimate {
        grid: table.grid,
        h_induced: st.mass.iter().map(|v| v / w).collect(),
        h_map: pb.density,
        invariance_residual: residual,
        unresolved_mass: partition.unresolved_measure,
        iterations: st.iterations,
        step_change: st.step_change,
        averaged: st.averaged,
        raw_mass: pb.raw_mass,
        expected_mass: pb.expected_mass,
        flagged_rows: table.flagged.len(),
        dead_rows: table.dead.len(),
    })
}

#[cfg(test)]
mod tests;
