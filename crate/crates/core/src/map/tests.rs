use proptest::prelude::*;

use super::*;

fn chebyshev() -> MapSpec {
    MapSpec::build(&MapConfig::family("chebyshev", &[])).unwrap()
}

fn lorenz() -> MapSpec {
    MapSpec::build(&MapConfig::family("lorenz", &[])).unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn chebyshev_jet_interior() {
    let m = chebyshev();
    let j = m.evaluate(0.5, None).unwrap();
    assert!(close(j.value, 0.5, 1e-12) && close(j.d1, -2.0, 1e-12) && close(j.d2, -4.0, 1e-12));
}

#[test]
fn chebyshev_one_sided_values() {
    let m = chebyshev();
    assert_eq!(m.evaluate(0.0, Some(Side::Plus)).unwrap().value, 1.0);
    assert_eq!(m.evaluate(0.0, Some(Side::Minus)).unwrap().value, 1.0);
    assert!(matches!(m.evaluate(0.0, None), Err(MapError::SideRequired(_))));
    assert!(matches!(m.evaluate(1.5, None), Err(MapError::OutsideDomain(_))));
    // Domain endpoints need no side.
    assert_eq!(m.evaluate(1.0, None).unwrap().value, -1.0);
    assert_eq!(m.critical.len(), 2);
    assert!(m.critical.iter().all(|c| c.value == 1.0 && c.kind == CriticalKind::Critical));
}

#[test]
fn lorenz_one_sided_limits() {
    let m = lorenz();
    let plus = m.evaluate(0.0, Some(Side::Plus)).unwrap();
    assert_eq!(plus.value, -1.0);
    assert_eq!(plus.d1, f64::INFINITY);
    let minus = m.evaluate(0.0, Some(Side::Minus)).unwrap();
    assert_eq!(minus.value, 1.0);
    assert_eq!(minus.d1, f64::INFINITY);
    assert!(m.critical.iter().all(|c| c.kind == CriticalKind::Singular));
}

#[test]
fn unimodal_abs_power_limit() {
    let m = MapSpec::build(&MapConfig::family("unimodal", &[("a", 1.8), ("ell", 3.0)])).unwrap();
    let j = m.evaluate(0.0, Some(Side::Plus)).unwrap();
    assert_eq!(j.value, 1.0);
    assert_eq!(j.d1, 0.0);
    assert_eq!(j.d2, 0.0);
}

#[test]
fn singular_unimodal_has_six_points() {
    let m = MapSpec::build(&MapConfig::family("singular_unimodal", &[])).unwrap();
    assert_eq!(m.branches.len(), 4);
    assert_eq!(m.critical.len(), 6);
    let turn = 0.5 / 1.5;
    let top = m.evaluate(turn, Some(Side::Minus)).unwrap();
    let expect = 2.5 * turn.sqrt() * (1.0 - turn);
    assert!(close(top.value, expect, 1e-10));
    assert!(top.d1.abs() < 1e-6);
}

fn explicit(branches: &str, crit: &str, delta: f64) -> Result<MapSpec, MapError> {
    let text = format!(
        r#"{{"name":"t","domain":[0,1],"delta":{delta},"branches":[{branches}],"critical_points":[{crit}]}}"#
    );
    MapSpec::from_json_str(&text)
}

#[test]
fn gap_is_rejected() {
    let err = explicit(
        r#"{"interval":[0,0.4],"expr":"x"},{"interval":[0.5,1],"expr":"x"}"#,
        r#"{"location":0.4,"side":"-","order":1},{"location":0.4,"side":"+","order":1}"#,
        0.1,
    )
    .unwrap_err();
    assert!(matches!(err, MapError::Gap { .. }), "{err}");
}

#[test]
fn undeclared_side_is_rejected() {
    let err = explicit(
        r#"{"interval":[0,0.5],"expr":"2*x"},{"interval":[0.5,1],"expr":"2-2*x"}"#,
        r#"{"location":0.5,"side":"-","order":1}"#,
        0.1,
    )
    .unwrap_err();
    assert!(matches!(err, MapError::UndeclaredCritical { side: Side::Plus, .. }), "{err}");
}

#[test]
fn tent_map_warns_flat_linear() {
    let m = explicit(
        r#"{"interval":[0,0.5],"expr":"2*x"},{"interval":[0.5,1],"expr":"2-2*x"}"#,
        r#"{"location":0.5,"side":"-","order":1},{"location":0.5,"side":"+","order":1}"#,
        0.1,
    )
    .unwrap();
    assert_eq!(m.warnings.len(), 2);
    assert!(m.critical.iter().all(|c| c.kind == CriticalKind::FlatLinear));
    assert!(m.branches.iter().all(|b| b.inflections.is_empty()));
}

#[test]
fn non_monotone_and_escape() {
    let err = explicit(
        r#"{"interval":[0,0.5],"expr":"4*x*(1-2*x)"},{"interval":[0.5,1],"expr":"2-2*x"}"#,
        r#"{"location":0.5,"side":"-","order":1},{"location":0.5,"side":"+","order":1}"#,
        0.1,
    )
    .unwrap_err();
    assert!(matches!(err, MapError::NonMonotone { .. }), "{err}");
    let err = explicit(
        r#"{"interval":[0,0.5],"expr":"3*x"},{"interval":[0.5,1],"expr":"2-2*x"}"#,
        r#"{"location":0.5,"side":"-","order":1},{"location":0.5,"side":"+","order":1}"#,
        0.1,
    )
    .unwrap_err();
    assert!(matches!(err, MapError::ImageEscapes { .. }), "{err}");
}

#[test]
fn delta_must_fit_branches() {
    let m = MapSpec::build(&MapConfig::family("singular_unimodal", &[])).unwrap();
    // The middle branches have width 1/3 and two critical ends.
    assert!(m.with_delta(0.16).is_ok());
    assert!(matches!(m.with_delta(0.17), Err(MapError::DeltaTooLarge { .. })));
}

#[test]
fn critical_distance_examples() {
    let m = chebyshev();
    assert_eq!(m.critical_distance(0.3), 0.3);
    assert_eq!(m.critical_distance(-0.25), 0.25);
    assert_eq!(m.critical_distance(0.0), 0.0);
    assert_eq!(m.delta_index(0.05), m.critical_index(0.0, Side::Plus));
    assert_eq!(m.delta_index(-0.05), m.critical_index(0.0, Side::Minus));
    assert_eq!(m.delta_index(0.2), None);
    assert_eq!(m.delta_index(0.0), None);
}

#[test]
fn chebyshev_nondegeneracy_ratios() {
    let r = chebyshev().verify_nondegeneracy(128, DEFAULT_RATIO_BOUND).unwrap();
    assert!(r.pass, "{r:?}");
    for p in &r.points {
        assert!(close(p.ratio_value.min, 2.0, 1e-3) && close(p.ratio_value.max, 2.0, 1e-3));
        assert!(close(p.ratio_d1.min, 4.0, 1e-9) && close(p.ratio_d1.max, 4.0, 1e-9));
        assert!(close(p.ratio_d2.min, 4.0, 1e-9) && close(p.ratio_d2.max, 4.0, 1e-9));
    }
}

#[test]
fn misdeclared_order_fails_nondegeneracy() {
    let cfg = MapConfig::from_json_str(
        r#"{"name":"bad","domain":[-1,1],"delta":0.1,
            "branches":[{"interval":[-1,0],"expr":"1 - 2*x^2"},{"interval":[0,1],"expr":"1 - 2*x^2"}],
            "critical_points":[{"location":0,"side":"-","order":1.5},{"location":0,"side":"+","order":1.5}]}"#,
    )
    .unwrap();
    let r = MapSpec::build(&cfg).unwrap().verify_nondegeneracy(128, DEFAULT_RATIO_BOUND).unwrap();
    assert!(!r.pass);
}

#[test]
fn lorenz_nondegeneracy_value_ratio() {
    let r = lorenz().verify_nondegeneracy(128, DEFAULT_RATIO_BOUND).unwrap();
    assert!(r.pass, "{r:?}");
    for p in &r.points {
        assert!(close(p.ratio_value.min, 1.9, 1e-9) && close(p.ratio_value.max, 1.9, 1e-9));
    }
}

#[test]
fn df_range_uses_inflections() {
    let m = MapSpec::build(&MapConfig::family("singular_unimodal", &[])).unwrap();
    let b = &m.branches[2];
    assert_eq!(b.inflections.len(), 0);
    let (lo, hi) = b.df_range(0.1, 0.3).unwrap();
    let d = |x: f64| b.jet(x).unwrap().d1.abs();
    for k in 0..=100 {
        let x = 0.1 + 0.2 * k as f64 / 100.0;
        assert!(d(x) >= lo * (1.0 - 1e-12) && d(x) <= hi * (1.0 + 1e-12));
    }
    let y = b.invert(0.8, b.lo, b.hi).unwrap();
    assert!(close(b.value(y).unwrap(), 0.8, 1e-12));
}

proptest! {
    #[test]
    fn critical_distance_is_lipschitz(x in -1.0f64..1.0, y in -1.0f64..1.0) {
        let m = MapSpec::build(&MapConfig::family("singular_unimodal", &[])).unwrap();
        let gap = (m.critical_distance(x) - m.critical_distance(y)).abs();
        prop_assert!(gap <= (x - y).abs() + 1e-15);
    }
}
