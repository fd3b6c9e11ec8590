use proptest::prelude::*;

use super::*;
use crate::inducing::tests::tent;
use crate::inducing::{build_partition, build_partition_unchecked, InducingContext, PartitionParams, DEFAULT_P_MAX, DEFAULT_RESOLUTION};
use crate::map::MapConfig;

fn chebyshev() -> MapSpec {
    MapSpec::build(&MapConfig::family("chebyshev", &[])).unwrap()
}

fn cheb_partition() -> (InducingContext, InducedPartition) {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    (ctx, part)
}

#[test]
fn grid_cells() {
    let g = Grid::new([-1.0, 1.0], 4);
    assert_eq!(g.width(), 0.5);
    assert_eq!(g.cell(-1.0), 0);
    assert_eq!(g.cell(1.0), 3);
    assert_eq!(g.cell(-0.5), 1);
    assert_eq!(g.edge(4), 1.0);
    assert_eq!(g.centers(), vec![-0.75, -0.25, 0.25, 0.75]);
}

#[test]
fn induced_rows_are_stochastic() {
    let (ctx, part) = cheb_partition();
    let t = ulam_matrix(&ctx.map, &part, 256).unwrap();
    for (i, row) in t.rows.iter().enumerate() {
        if t.dead.contains(&i) {
            continue;
        }
        let s: f64 = row.iter().map(|e| e.1).sum();
        assert!((s - 1.0).abs() < 1e-12, "row {i}: {s}");
        assert!(row.windows(2).all(|w| w[0].0 < w[1].0));
    }
    let one = ulam_matrix(&ctx.map, &part, 1).unwrap();
    assert_eq!(one.rows, vec![vec![(0, 1.0)]]);
}

#[test]
fn affine_slope_four_splits_evenly() {
    let ctx = InducingContext::new(&tent(), 0.05, 2, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    let t = ulam_matrix(&ctx.map, &part, 64).unwrap();
    let mut seen = 0;
    for (i, row) in t.rows.iter().enumerate() {
        let (a, b) = (t.grid.edge(i), t.grid.edge(i + 1));
        let inside = part.free().any(|br| br.a <= a && b <= br.b);
        if inside {
            assert_eq!(row.len(), 4, "row {i}: {row:?}");
            for e in row {
                assert!((e.1 - 0.25).abs() < 1e-12);
            }
            seen += 1;
        }
    }
    assert!(seen > 0);
}

#[test]
fn stationary_trivial_tables() {
    let m = 8;
    let g = Grid::new([0.0, 1.0], m);
    // Doubling: cell i maps onto cells 2i, 2i+1 (mod m).
    let rows = (0..m).map(|i| {
        let mut r = vec![((2 * i) % m, 0.5), ((2 * i + 1) % m, 0.5)];
        r.sort_by_key(|e| e.0);
        r
    });
    let t = TransferTable::from_rows(g, rows.collect());
    let s = stationary_density(&t, DEFAULT_TOL, 1000).unwrap();
    assert!(s.mass.iter().all(|&v| (v - 1.0 / m as f64).abs() < 1e-15));
    let id = TransferTable::from_rows(g, (0..m).map(|i| vec![(i, 1.0)]).collect());
    let s = stationary_density(&id, DEFAULT_TOL, 1000).unwrap();
    assert_eq!(s.iterations, 1);
    assert_eq!(s.mass, vec![1.0 / m as f64; m]);
}

#[test]
fn period_two_is_averaged() {
    let g = Grid::new([0.0, 1.0], 2);
    let swap = TransferTable::from_rows(g, vec![vec![(1, 1.0)], vec![(0, 1.0)]]);
    // From uniform the swap is already stationary.
    assert_eq!(stationary_density(&swap, DEFAULT_TOL, 10).unwrap().iterations, 1);
    let g = Grid::new([0.0, 1.0], 3);
    // 0 -> 1 -> {0, 2}, 2 -> 1: a bipartite chain oscillates from uniform.
    let t = TransferTable::from_rows(g, vec![vec![(1, 1.0)], vec![(0, 0.5), (2, 0.5)], vec![(1, 1.0)]]);
    let s = stationary_density(&t, DEFAULT_TOL, 1000).unwrap();
    assert!(s.averaged);
    assert!((s.mass[1] - 0.5).abs() < 1e-9 && (s.mass[0] - 0.25).abs() < 1e-9);
    assert!(matches!(stationary_density(&t, DEFAULT_TOL, 50), Err(DensityError::NonConvergence { .. })));
}

#[test]
fn stationary_vector_properties() {
    let (ctx, part) = cheb_partition();
    let t = ulam_matrix(&ctx.map, &part, 512).unwrap();
    let s = stationary_density(&t, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
    assert!(s.mass.iter().all(|&v| v >= 0.0));
    assert!((s.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut next = t.apply(&s.mass);
    normalize(&mut next);
    assert!(l1(&next, &s.mass) <= 10.0 * DEFAULT_TOL);
}

#[test]
fn pull_back_with_unit_times_is_identity() {
    let ctx = InducingContext::new(&tent(), 0.05, 1, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    assert!(part.branches.iter().all(|b| b.tau == 1));
    let t = ulam_matrix(&ctx.map, &part, 128).unwrap();
    let s = stationary_density(&t, DEFAULT_TOL, DEFAULT_MAX_ITERS).unwrap();
    let pb = pull_back(&ctx.map, &part, &t, &s.mass).unwrap();
    let w = t.grid.width();
    for (d, v) in pb.density.iter().zip(&s.mass) {
        assert!((d - v / w).abs() < 1e-9);
    }
}

#[test]
fn chebyshev_pull_back() {
    let (ctx, part) = cheb_partition();
    let est = estimate_density(&ctx.map, &part, &DensityParams::default()).unwrap();
    assert!((est.raw_mass - est.expected_mass).abs() < 1e-9, "{} {}", est.raw_mass, est.expected_mass);
    assert!(est.h_map.iter().all(|&h| h >= 0.0));
    let w = est.grid.width();
    assert!((est.h_map.iter().sum::<f64>() * w - 1.0).abs() < 1e-9);
    let d = l1_distance(&est.grid, &est.h_map, &chebyshev_reference(&est.grid));
    assert!(d <= 0.05, "{d}");
    assert!(est.invariance_residual <= 0.02, "{}", est.invariance_residual);
    assert!(est.to_csv().starts_with("cell_center,density\n"));
}

#[test]
fn one_step_residuals() {
    let m = chebyshev();
    let t = map_table(&m, 256).unwrap();
    let s = stationary_density(&t, 1e-13, DEFAULT_MAX_ITERS).unwrap();
    let w = t.grid.width();
    let h: Vec<f64> = s.mass.iter().map(|v| v / w).collect();
    assert!(invariance_residual(&t, &h) <= 1e-10);
    let uniform = vec![0.5; 256];
    assert!(invariance_residual(&t, &uniform) > 0.1);
}

#[test]
fn birkhoff_chebyshev() {
    let m = chebyshev();
    let p = BirkhoffParams { seeds: 4, steps: 2_000_000, m: 128, burn_in: 100, seed: 7 };
    let h = birkhoff_histogram(&m, &p).unwrap();
    assert_eq!(h.counted, 2_000_000);
    assert!((h.density.iter().sum::<f64>() * h.grid.width() - 1.0).abs() < 1e-12);
    let d = l1_distance(&h.grid, &h.density, &chebyshev_reference(&h.grid));
    assert!(d <= 0.02, "{d}");
    let again = birkhoff_histogram(&m, &p).unwrap();
    assert_eq!(h, again);
    assert!(birkhoff_histogram(&m, &BirkhoffParams { steps: 10, ..p }).is_err());
}

#[test]
fn rejects_small_grids_and_poor_partitions() {
    let (ctx, mut part) = cheb_partition();
    let small = DensityParams { m: 32, ..Default::default() };
    assert!(matches!(estimate_density(&ctx.map, &part, &small), Err(DensityError::InvalidParameter(_))));
    part.unresolved_measure = 1.0;
    assert!(matches!(
        estimate_density(&ctx.map, &part, &DensityParams::default()),
        Err(DensityError::PartitionQuality { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn segments_tile_the_interval(a in 0.01f64..0.9, w in 1e-6f64..0.09, n in 0usize..4, m in 1usize..300) {
        let map = chebyshev();
        let b = a + w;
        // Itinerary of a, kept only while [a, b] stays on one branch.
        let mut itin = Vec::new();
        let (mut u, mut v) = (a, b);
        for _ in 0..n {
            let k = map.branch_at(u).unwrap();
            if !(map.branches[k].lo <= u.min(v) && u.max(v) <= map.branches[k].hi) || (u < 0.0) != (v < 0.0) {
                break;
            }
            itin.push(k);
            (u, v) = (map.step(u).unwrap(), map.step(v).unwrap());
        }
        let g = Grid::new(map.domain, m);
        let segs = segment_cells(&map, &itin, a, b, &g).unwrap();
        let total: f64 = segs.iter().map(|s| s.2).sum();
        prop_assert!((total - w).abs() <= 1e-12);
        // Spot check: the midpoint of each piece lands in the stated cells.
        let mut x = a;
        for &(i, k, len) in &segs {
            let mid = x + 0.5 * len;
            if len > 1e-9 {
                let mut y = mid;
                for _ in 0..itin.len() {
                    y = map.step(y).unwrap();
                }
                prop_assert_eq!(g.cell(mid), i);
                prop_assert_eq!(g.cell(y), k);
            }
            x += len;
        }
    }
}

