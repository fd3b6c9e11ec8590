use super::*;
use crate::map::{MapConfig, MapSpec, Side};

fn chebyshev() -> MapSpec {
    MapSpec::build(&MapConfig::family("chebyshev", &[])).unwrap()
}

fn cheb(x: f64) -> f64 {
    1.0 - 2.0 * x * x
}

pub(crate) fn tent() -> MapSpec {
    MapSpec::from_json_str(
        r#"{"name":"tent","domain":[0,1],"delta":0.1,
            "branches":[{"interval":[0,0.5],"expr":"2*x"},{"interval":[0.5,1],"expr":"2-2*x"}],
            "critical_points":[{"location":0.5,"side":"-","order":1},{"location":0.5,"side":"+","order":1}]}"#,
    )
    .unwrap()
}

#[test]
fn chebyshev_binding_by_hand() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let b = ctx.binding_period(0.1).unwrap();
    assert_eq!(b.p, 4);
    assert!(!b.truncated);
    let hat: Vec<f64> = b.trajectory.iter().map(|s| s.hat_len).collect();
    let want = [0.02, 0.0792, 0.30426, 1.0319];
    for (h, w) in hat.iter().zip(want) {
        assert!((h - w).abs() < 1e-4, "{hat:?}");
    }
    let thr: Vec<f64> = b.trajectory.iter().map(|s| s.threshold).collect();
    assert!((thr[0] - 0.5).abs() < 1e-12 && (thr[1] - 0.5).abs() < 1e-12);
    assert!((thr[2] - 0.396850).abs() < 1e-6 && (thr[3] - 0.25).abs() < 1e-12);
    // Chain rule oracle for |Df^4(0.1)|.
    let mut y = 0.1f64;
    let mut d = 1.0;
    for _ in 0..4 {
        d *= (4.0 * y).abs();
        y = cheb(y);
    }
    assert!((b.df_p - d).abs() <= 1e-12 * d);
}

#[test]
fn immediate_failure_and_singular() {
    let ctx = InducingContext::new(&chebyshev(), 0.9, 1, DEFAULT_P_MAX).unwrap();
    assert_eq!(ctx.binding_period(0.8).unwrap().p, 1);
    assert!(matches!(ctx.binding_period(0.95), Err(InducingError::NotInDelta(_))));
    let lorenz = MapSpec::build(&MapConfig::family("lorenz", &[])).unwrap();
    let ctx = InducingContext::new(&lorenz, 0.1, 3, DEFAULT_P_MAX).unwrap();
    for x in [0.001, 0.05, -0.07, 0.0999] {
        assert_eq!(ctx.binding_period(x).unwrap().p, 1);
    }
}

#[test]
fn first_entry_by_hand() {
    let m = chebyshev();
    assert_eq!(first_entry(&m, 0.9, 0.05, 3).unwrap(), None);
    let plus = m.critical_index(0.0, Side::Plus).unwrap();
    assert_eq!(first_entry(&m, 0.9, 0.25, 4).unwrap(), Some((2, plus)));
    assert_eq!(first_entry(&m, 0.01, 0.25, 4).unwrap(), Some((0, plus)));
}

#[test]
fn inducing_time_by_hand() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let t = ctx.inducing_time(0.1).unwrap();
    assert_eq!((t.tau, t.l0, t.p0), (4, Some(0), Some(4)));
    let ctx = InducingContext::new(&chebyshev(), 0.25, 5, DEFAULT_P_MAX).unwrap();
    let t = ctx.inducing_time(0.9).unwrap();
    let p = ctx.binding_period(cheb(cheb(0.9))).unwrap().p;
    assert_eq!(t.tau, 2 + p);
    let ctx = InducingContext::new(&chebyshev(), 0.05, 3, DEFAULT_P_MAX).unwrap();
    assert_eq!(ctx.inducing_time(0.9).unwrap().tau, 3);
}

#[test]
fn chebyshev_partition_small() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    let total = part.resolved_measure() + part.unresolved_measure;
    assert!((total - 2.0).abs() < 1e-9, "{total}");
    assert!(part.unresolved_measure < 1e-3);
    let h = part.min_binding_period().unwrap();
    assert!(h <= 4);
    // Disjoint and sorted.
    let mut all: Vec<(f64, f64)> = part.branches.iter().map(|b| (b.a, b.b)).collect();
    all.extend(part.unresolved.iter().map(|u| (u.a, u.b)));
    all.sort_by(|p, q| p.0.total_cmp(&q.0));
    for w in all.windows(2) {
        assert!(w[0].1 <= w[1].0 + 1e-15, "{w:?}");
    }
    for b in &part.branches {
        match b.class {
            BranchClass::Free => assert_eq!(b.tau, 3),
            BranchClass::Bound => {
                assert_eq!(b.tau, b.l0.unwrap() + b.p0.unwrap());
                assert!(b.p0.unwrap() >= h && b.p0.unwrap() <= DEFAULT_P_MAX);
            }
        }
        assert_eq!(b.itinerary.len(), b.tau);
        let x = 0.5 * (b.a + b.b);
        let (y, _, tau) = eval_induced(&ctx.map, &part, x).unwrap();
        assert_eq!(tau, b.tau);
        let slack = 1e-9 * (1.0 + b.image[1] - b.image[0]);
        assert!(y >= b.image[0] - slack && y <= b.image[1] + slack);
    }
    let again = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    assert_eq!(part, again);
}

#[test]
fn eval_induced_matches_iteration() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    let (y, d, tau) = eval_induced(&ctx.map, &part, 0.1).unwrap();
    assert_eq!(tau, 4);
    let mut z = 0.1f64;
    let mut dz = 1.0;
    for _ in 0..4 {
        dz *= (4.0 * z).abs();
        z = cheb(z);
    }
    assert!((y - z).abs() < 1e-12 && (y - 0.031877).abs() < 1e-6, "{y} {z}");
    assert!((d - dz).abs() <= 1e-12 * dz);
}

#[test]
fn tent_free_branches_are_linear() {
    let ctx = InducingContext::new(&tent(), 0.05, 4, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    assert!(part.free().count() > 0);
    for b in part.free() {
        assert_eq!(b.inf_df, 16.0);
        assert_eq!(b.sup_df, 16.0);
    }
    for b in part.bound() {
        assert_eq!(b.p0, Some(1));
    }
    assert_eq!(part.unresolved_measure, 0.0);
}

#[test]
fn lorenz_bound_branches_bind_once() {
    let lorenz = MapSpec::build(&MapConfig::family("lorenz", &[])).unwrap();
    let ctx = InducingContext::new(&lorenz, 0.1, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    for b in part.bound() {
        assert_eq!(b.p0, Some(1));
        assert!(b.tau <= 3);
    }
}

#[test]
fn binding_lemmas_on_chebyshev() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    let r = verify_binding_lemmas(&ctx, &part, 200).unwrap();
    assert!(r.binding_ratio_pass, "{r:?}");
    assert!(r.gamma_hat.is_finite());
    assert!(r.margin_pass && r.sandwich_pass);
    assert!(r.c1 > 0.0 && r.c2.is_finite());
}
