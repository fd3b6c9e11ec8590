//! Construction of the partition on which the induced map is smooth.
//!
//! Each critical neighbourhood is first cut into the level sets `I(c, p)` of
//! the binding period. The domain is then refined level by level: at depth
//! `l` every node is an interval `J` on which `f^l` is a diffeomorphism, and
//! its image is cut at branch boundaries and neighbourhood endpoints. Pieces
//! landing in a neighbourhood become bound branches (one per `I(c, p)` they
//! meet); pieces outside either descend one more level or, at depth
//! `q0 - 1`, become free branches.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{InducingContext, InducingError};
use crate::map::MapSpec;

/// Grid points used to scan the binding period across a neighbourhood.
pub const SCAN_POINTS: usize = 4096;
pub const DEFAULT_RESOLUTION: f64 = 1e-10;
/// Allowed unresolved measure, as a fraction of the domain length.
pub const DEFAULT_UNRESOLVED_BUDGET: f64 = 1e-3;
const SUB_PIECES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionParams {
    pub resolution: f64,
    pub budget: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            budget: DEFAULT_UNRESOLVED_BUDGET,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchClass {
    Free,
    Bound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnresolvedReason {
    PMaxExceeded,
    BoundaryUnlocated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedBranch {
    pub a: f64,
    pub b: f64,
    pub class: BranchClass,
    pub l0: Option<usize>,
    pub critical: Option<usize>,
    pub p0: Option<usize>,
    pub tau: usize,
    /// `f^tau` of the branch, as an ordered interval.
    pub image: [f64; 2],
    pub inf_df: f64,
    pub sup_df: f64,
    /// Branch of `f` used at each of the `tau` steps.
    pub itinerary: Vec<usize>,
}

impl InducedBranch {
    pub fn len(&self) -> f64 {
        self.b - self.a
    }

    pub fn is_empty(&self) -> bool {
        self.b <= self.a
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnresolvedInterval {
    pub a: f64,
    pub b: f64,
    pub reason: UnresolvedReason,
}

/// One level set of the binding period inside a neighbourhood.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaPiece {
    pub lo: f64,
    pub hi: f64,
    pub p: Option<usize>,
    pub reason: Option<UnresolvedReason>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InducedPartition {
    pub branches: Vec<InducedBranch>,
    pub unresolved: Vec<UnresolvedInterval>,
    pub unresolved_measure: f64,
    pub delta: f64,
    pub q0: usize,
    pub p_max: usize,
    pub resolution: f64,
    /// Level sets of `p` in each neighbourhood, indexed like the map's
    /// critical points.
    pub delta_pieces: Vec<Vec<DeltaPiece>>,
}

impl InducedPartition {
    pub fn branch_containing(&self, x: f64) -> Option<&InducedBranch> {
        let i = self.branches.partition_point(|b| b.a <= x);
        let br = self.branches.get(i.checked_sub(1)?)?;
        (x >= br.a && x <= br.b).then_some(br)
    }

    pub fn free(&self) -> impl Iterator<Item = &InducedBranch> {
        self.branches.iter().filter(|b| b.class == BranchClass::Free)
    }

    pub fn bound(&self) -> impl Iterator<Item = &InducedBranch> {
        self.branches.iter().filter(|b| b.class == BranchClass::Bound)
    }

    pub fn resolved_measure(&self) -> f64 {
        self.branches.iter().map(InducedBranch::len).sum()
    }

    /// Smallest binding period over the resolved level sets of each
    /// neighbourhood.
    pub fn min_binding_period(&self) -> Option<usize> {
        self.delta_pieces.iter().flatten().filter_map(|p| p.p).min()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("a,b,class,l0,p0,tau,inf_df,sup_df\n");
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for b in &self.branches {
            let class = match b.class {
                BranchClass::Free => "free",
                BranchClass::Bound => "bound",
            };
            let _ = writeln!(
                out,
                "{:e},{:e},{class},{},{},{},{:e},{:e}",
                b.a,
                b.b,
                opt(b.l0),
                opt(b.p0),
                b.tau,
                b.inf_df,
                b.sup_df
            );
        }
        out
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "delta": self.delta,
            "q0": self.q0,
            "p_max": self.p_max,
            "resolution": self.resolution,
            "branches": self.branches.len(),
            "free_branches": self.free().count(),
            "bound_branches": self.bound().count(),
            "unresolved_intervals": self.unresolved.len(),
            "unresolved_measure": self.unresolved_measure,
            "min_binding_period": self.min_binding_period(),
            "max_tau": self.branches.iter().map(|b| b.tau).max(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PVal {
    P(usize),
    Trunc,
    Fail,
    NonMonotone,
}

impl PVal {
    fn rank(self) -> Option<usize> {
        match self {
            PVal::P(p) => Some(p),
            PVal::Trunc => Some(usize::MAX),
            _ => None,
        }
    }
}

fn p_at(ctx: &InducingContext, idx: usize, s: f64) -> PVal {
    let c = &ctx.map.critical[idx];
    let x = c.location + c.side.sign() * s;
    match ctx.binding_period_at(x, idx) {
        Ok(b) if !b.truncated => PVal::P(b.p),
        Ok(_) => PVal::Trunc,
        Err(_) => PVal::Fail,
    }
}

/// Locate the jumps of `p` between distances `sa > sb`; pushes
/// `(s, value just inside s)` breakpoints.
fn refine(ctx: &InducingContext, idx: usize, res: f64, (sa, va): (f64, PVal), (sb, vb): (f64, PVal), out: &mut Vec<(f64, PVal)>) {
    if va == vb {
        return;
    }
    let m = 0.5 * (sa + sb);
    if sa - sb <= res || m <= sb || m >= sa {
        out.push((m, vb));
        return;
    }
    let vm = p_at(ctx, idx, m);
    if let (Some(a), Some(b), Some(mm)) = (va.rank(), vb.rank(), vm.rank()) {
        if mm < a.min(b) || mm > a.max(b) {
            out.push((sa, PVal::NonMonotone));
            out.push((sb, vb));
            return;
        }
    }
    refine(ctx, idx, res, (sa, va), (m, vm), out);
    refine(ctx, idx, res, (m, vm), (sb, vb), out);
}

fn piece_of(lo: f64, hi: f64, v: PVal) -> DeltaPiece {
    let (p, reason) = match v {
        PVal::P(p) => (Some(p), None),
        PVal::Trunc => (None, Some(UnresolvedReason::PMaxExceeded)),
        PVal::Fail | PVal::NonMonotone => (None, Some(UnresolvedReason::BoundaryUnlocated)),
    };
    DeltaPiece { lo, hi, p, reason }
}

/// Level sets of the binding period in `Delta(critical[idx])`, ascending.
pub(crate) fn scan_delta(ctx: &InducingContext, idx: usize, resolution: f64) -> Vec<DeltaPiece> {
    let c = &ctx.map.critical[idx];
    let delta = ctx.delta();
    let sgn = c.side.sign();
    let to_x = |s: f64| c.location + sgn * s;
    let mut out = if !c.binds() {
        vec![(delta, PVal::P(1)), (0.0, PVal::P(1))]
    } else {
        let s_min = resolution.max(delta * 1e-14);
        let n = SCAN_POINTS;
        let grid: Vec<f64> = (0..n)
            .map(|k| {
                if k == 0 {
                    delta
                } else {
                    delta * (s_min / delta).powf(k as f64 / (n - 1) as f64)
                }
            })
            .collect();
        let vals: Vec<PVal> = grid.par_iter().map(|&s| p_at(ctx, idx, s)).collect();
        let cells: Vec<Vec<(f64, PVal)>> = (0..n - 1)
            .into_par_iter()
            .map(|k| {
                let mut v = Vec::new();
                refine(ctx, idx, resolution, (grid[k], vals[k]), (grid[k + 1], vals[k + 1]), &mut v);
                v
            })
            .collect();
        let mut bps = vec![(delta, vals[0])];
        bps.extend(cells.into_iter().flatten());
        let inner = match vals[n - 1] {
            PVal::Trunc => PVal::Trunc,
            _ => PVal::Fail,
        };
        bps.push((s_min, inner));
        bps.push((0.0, inner));
        bps
    };
    // Merge equal neighbours; breakpoints run from delta inwards.
    out.dedup_by(|next, prev| next.1 == prev.1 && next.0 != 0.0);
    let mut pieces = Vec::with_capacity(out.len());
    for w in out.windows(2) {
        let (s_hi, v) = w[0];
        let s_lo = w[1].0;
        if s_hi <= s_lo {
            continue;
        }
        let (a, b) = if sgn > 0.0 { (to_x(s_lo), to_x(s_hi)) } else { (to_x(s_hi), to_x(s_lo)) };
        pieces.push(piece_of(a, b, v));
    }
    pieces.sort_by(|p, q| p.lo.total_cmp(&q.lo));
    let mut merged: Vec<DeltaPiece> = Vec::with_capacity(pieces.len());
    for p in pieces {
        match merged.last_mut() {
            Some(last) if last.p == p.p && last.reason == p.reason && last.hi == p.lo => last.hi = p.hi,
            _ => merged.push(p),
        }
    }
    merged
}

#[derive(Clone, Debug)]
struct Node {
    j: (f64, f64),
    /// Image interval at each depth `0..=l` (ascending endpoints), used as
    /// brackets when pulling points back.
    images: Vec<(f64, f64)>,
    chain: Vec<usize>,
    increasing: bool,
}

enum Leaf {
    Free { a: f64, b: f64, itinerary: Vec<usize> },
    Bound { a: f64, b: f64, l0: usize, idx: usize, p: usize, prefix: Vec<usize> },
    Unresolved(UnresolvedInterval),
}

fn pull_back(map: &MapSpec, node: &Node, t: f64) -> Result<f64, InducingError> {
    let mut y = t;
    for k in (0..node.chain.len()).rev() {
        let (lo, hi) = node.images[k];
        y = map.branches[node.chain[k]].invert(y, lo, hi)?;
    }
    Ok(y)
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

fn process(ctx: &InducingContext, pieces: &[Vec<DeltaPiece>], node: &Node) -> Result<(Vec<Node>, Vec<Leaf>), InducingError> {
    let map = &ctx.map;
    let delta = ctx.delta();
    let l = node.chain.len();
    let (u, v) = node.images[l];
    let mut cuts: Vec<f64> = map
        .locations
        .iter()
        .copied()
        .chain(map.critical.iter().map(|c| c.location + c.side.sign() * delta))
        .filter(|&t| t > u && t < v)
        .collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    // Depth-0 preimage of an image point; endpoints map to J's ends.
    let (ju, jv) = if node.increasing { node.j } else { (node.j.1, node.j.0) };
    let back = |t: f64| -> Result<f64, InducingError> {
        if t == u {
            Ok(ju)
        } else if t == v {
            Ok(jv)
        } else {
            pull_back(map, node, t)
        }
    };

    let mut ts = Vec::with_capacity(cuts.len() + 2);
    ts.push(u);
    ts.extend(cuts);
    ts.push(v);
    let xs: Vec<f64> = ts.iter().map(|&t| back(t)).collect::<Result<_, _>>()?;

    let mut children = Vec::new();
    let mut leaves = Vec::new();
    for i in 0..ts.len() - 1 {
        let (t0, t1) = (ts[i], ts[i + 1]);
        let (x0, x1) = ordered(xs[i], xs[i + 1]);
        if x0 >= x1 || t0 >= t1 {
            continue;
        }
        let mid = 0.5 * (t0 + t1);
        if let Some(idx) = map.delta_index(mid) {
            for piece in &pieces[idx] {
                let lo = piece.lo.max(t0);
                let hi = piece.hi.min(t1);
                if lo >= hi {
                    continue;
                }
                let (a, b) = ordered(back(lo)?, back(hi)?);
                if a >= b {
                    continue;
                }
                leaves.push(match (piece.p, piece.reason) {
                    (Some(p), _) => Leaf::Bound {
                        a,
                        b,
                        l0: l,
                        idx,
                        p,
                        prefix: node.chain.clone(),
                    },
                    (None, reason) => Leaf::Unresolved(UnresolvedInterval {
                        a,
                        b,
                        reason: reason.unwrap_or(UnresolvedReason::BoundaryUnlocated),
                    }),
                });
            }
            continue;
        }
        let bi = map.branch_at(mid)?;
        if l + 1 == ctx.q0 {
            let mut itinerary = node.chain.clone();
            itinerary.push(bi);
            leaves.push(Leaf::Free { a: x0, b: x1, itinerary });
            continue;
        }
        let br = &map.branches[bi];
        let img = ordered(br.value(t0)?, br.value(t1)?);
        let mut images = node.images[..l].to_vec();
        images.push((t0, t1));
        images.push(img);
        let mut chain = node.chain.clone();
        chain.push(bi);
        children.push(Node {
            j: (x0, x1),
            images,
            chain,
            increasing: node.increasing == br.increasing,
        });
    }
    Ok((children, leaves))
}

/// Push `[a, b]` through `tau` steps, returning the ordered image, the
/// certified `inf`/`sup` of `|Df^tau|` and the itinerary. Steps beyond
/// `prefix` pick the branch containing the midpoint's orbit.
fn finalize(map: &MapSpec, a: f64, b: f64, tau: usize, prefix: &[usize]) -> Option<([f64; 2], f64, f64, Vec<usize>)> {
    let mut pts: Vec<f64> = (0..=SUB_PIECES)
        .map(|i| if i == SUB_PIECES { b } else { a + (b - a) * i as f64 / SUB_PIECES as f64 })
        .collect();
    let mut inf = vec![1.0f64; SUB_PIECES];
    let mut sup = vec![1.0f64; SUB_PIECES];
    let mut itinerary = Vec::with_capacity(tau);
    for k in 0..tau {
        let bi = match prefix.get(k) {
            Some(&bi) => bi,
            None => map.branch_at(pts[SUB_PIECES / 2]).ok()?,
        };
        let br = &map.branches[bi];
        let (lo, hi) = ordered(pts[0], pts[SUB_PIECES]);
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if lo < br.lo - slack || hi > br.hi + slack {
            return None;
        }
        for p in pts.iter_mut() {
            *p = p.clamp(br.lo, br.hi);
        }
        for i in 0..SUB_PIECES {
            let (dl, dh) = br.df_range(pts[i], pts[i + 1]).ok()?;
            inf[i] *= dl;
            sup[i] *= dh;
        }
        for p in pts.iter_mut() {
            *p = br.value(*p).ok()?.clamp(map.domain[0], map.domain[1]);
        }
        itinerary.push(bi);
    }
    let (lo, hi) = ordered(pts[0], pts[SUB_PIECES]);
    let inf_df = inf.iter().copied().fold(f64::INFINITY, f64::min);
    let sup_df = sup.iter().copied().fold(0.0, f64::max);
    Some(([lo, hi], inf_df, sup_df, itinerary))
}

/// Build the partition without enforcing the unresolved-measure budget.
pub fn build_partition_unchecked(ctx: &InducingContext, resolution: f64) -> Result<InducedPartition, InducingError> {
    if !(resolution > 0.0 && resolution < ctx.delta()) {
        return Err(InducingError::InvalidParameter(format!(
            "resolution must lie in (0, delta), got {resolution}"
        )));
    }
    let map = &ctx.map;
    let pieces: Vec<Vec<DeltaPiece>> = (0..map.critical.len()).map(|i| scan_delta(ctx, i, resolution)).collect();

    let mut nodes = vec![Node {
        j: (map.domain[0], map.domain[1]),
        images: vec![(map.domain[0], map.domain[1])],
        chain: Vec::new(),
        increasing: true,
    }];
    let mut leaves = Vec::new();
    while !nodes.is_empty() {
        let out: Vec<(Vec<Node>, Vec<Leaf>)> = nodes
            .par_iter()
            .map(|n| process(ctx, &pieces, n))
            .collect::<Result<_, _>>()?;
        nodes = Vec::new();
        for (c, l) in out {
            nodes.extend(c);
            leaves.extend(l);
        }
    }

    enum Done {
        Branch(InducedBranch),
        Unresolved(UnresolvedInterval),
    }
    let done: Vec<Done> = leaves
        .into_par_iter()
        .map(|leaf| match leaf {
            Leaf::Unresolved(u) => Done::Unresolved(u),
            Leaf::Free { a, b, itinerary } => match finalize(map, a, b, ctx.q0, &itinerary) {
                Some((image, inf_df, sup_df, itinerary)) => Done::Branch(InducedBranch {
                    a,
                    b,
                    class: BranchClass::Free,
                    l0: None,
                    critical: None,
                    p0: None,
                    tau: ctx.q0,
                    image,
                    inf_df,
                    sup_df,
                    itinerary,
                }),
                None => Done::Unresolved(UnresolvedInterval {
                    a,
                    b,
                    reason: UnresolvedReason::BoundaryUnlocated,
                }),
            },
            Leaf::Bound { a, b, l0, idx, p, prefix } => match finalize(map, a, b, l0 + p, &prefix) {
                Some((image, inf_df, sup_df, itinerary)) => Done::Branch(InducedBranch {
                    a,
                    b,
                    class: BranchClass::Bound,
                    l0: Some(l0),
                    critical: Some(idx),
                    p0: Some(p),
                    tau: l0 + p,
                    image,
                    inf_df,
                    sup_df,
                    itinerary,
                }),
                None => Done::Unresolved(UnresolvedInterval {
                    a,
                    b,
                    reason: UnresolvedReason::BoundaryUnlocated,
                }),
            },
        })
        .collect();

    let mut branches = Vec::new();
    let mut unresolved = Vec::new();
    for d in done {
        match d {
            Done::Branch(b) => branches.push(b),
            Done::Unresolved(u) => unresolved.push(u),
        }
    }
    branches.sort_by(|p, q| p.a.total_cmp(&q.a));
    unresolved.sort_by(|p, q| p.a.total_cmp(&q.a));
    let unresolved_measure = unresolved.iter().map(|u| u.b - u.a).fold(0.0, |s, w| s + w);
    Ok(InducedPartition {
        branches,
        unresolved,
        unresolved_measure,
        delta: ctx.delta(),
        q0: ctx.q0,
        p_max: ctx.p_max,
        resolution,
        delta_pieces: pieces,
    })
}

/// Build the partition and fail when the unresolved measure exceeds
/// `params.budget * |M|`.
pub fn build_partition(ctx: &InducingContext, params: PartitionParams) -> Result<InducedPartition, InducingError> {
    let part = build_partition_unchecked(ctx, params.resolution)?;
    let budget = params.budget * ctx.map.domain_length();
    if part.unresolved_measure > budget {
        return Err(InducingError::PartitionQuality {
            measure: part.unresolved_measure,
            budget,
        });
    }
    Ok(part)
}
