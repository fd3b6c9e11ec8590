use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::inducing::{build_partition, build_partition_unchecked, InducingContext, PartitionParams, DEFAULT_P_MAX, DEFAULT_RESOLUTION};
use crate::map::MapConfig;

fn chebyshev() -> MapSpec {
    MapSpec::build(&MapConfig::family("chebyshev", &[])).unwrap()
}

fn tent() -> MapSpec {
    MapSpec::from_json_str(
        r#"{"name":"tent","domain":[0,1],"delta":0.1,
            "branches":[{"interval":[0,0.5],"expr":"2*x"},{"interval":[0.5,1],"expr":"2-2*x"}],
            "critical_points":[{"location":0.5,"side":"-","order":1},{"location":0.5,"side":"+","order":1}]}"#,
    )
    .unwrap()
}

#[test]
fn distortion_examples() {
    let m = chebyshev();
    assert_eq!(generalized_distortion(&m, 0.2, 0.3, 0).unwrap().product, 1.0);
    let d1 = generalized_distortion(&m, 0.2, 0.3, 1).unwrap().product;
    assert!((d1 - 1.5).abs() < 1e-12);
    // Grid oracle for n = 2.
    let d2 = generalized_distortion(&m, 0.2, 0.3, 2).unwrap().product;
    let mut prod = 1.0;
    let (mut u, mut v) = (0.2f64, 0.3f64);
    for _ in 0..2 {
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        let n = 1_000_000;
        for k in 0..=n {
            let x = u + (v - u) * k as f64 / n as f64;
            let d = (4.0 * x).abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        prod *= hi / lo;
        let (a, b) = (1.0 - 2.0 * u * u, 1.0 - 2.0 * v * v);
        (u, v) = (a.min(b), a.max(b));
    }
    assert!((d2 - prod).abs() < 1e-6);
    assert!(matches!(
        generalized_distortion(&m, -0.1, 0.1, 1),
        Err(DistortionError::NotDiffeomorphism { .. })
    ));
}

#[test]
fn variation_examples() {
    let m = chebyshev();
    let b = variation_bound(&m, 0.2, 0.3, 1).unwrap();
    assert!((inverse_distance_integral(&m, 0.2, 0.3).unwrap() - 1.5f64.ln()).abs() < 1e-15);
    assert!((b - 1.5 / 0.8 * 1.5f64.ln()).abs() < 1e-9, "{b}");
    assert_eq!(variation_bound(&m, 0.2, 0.3, 0).unwrap(), 0.0);
    let v = variation_exact(&m, 0.2, 0.3, 1, QUAD_TOL).unwrap();
    assert!((v - 5.0 / 12.0).abs() < 1e-9, "{v}");
    let t = tent();
    assert!(variation_exact(&t, 0.01, 0.05, 3, QUAD_TOL).unwrap().abs() < 1e-12);
    // Far from the critical set the integral is at most w / delta.
    let w = inverse_distance_integral(&m, 0.5, 0.6).unwrap();
    assert!(w <= 0.1 / 0.5);
    assert!(inverse_distance_integral(&m, -0.1, 0.1).is_none());
}

#[test]
fn variation_exact_matches_sup_sum() {
    let m = chebyshev();
    let (a, b, l) = (0.31, 0.36, 3);
    let v = variation_exact(&m, a, b, l, QUAD_TOL).unwrap();
    let phi = |x: f64| 1.0 / df_iterate(&m, x, l).unwrap();
    let s = sup_sum_variation(&phi, a, b, 200_000);
    assert!((v - s).abs() < 1e-6 * (1.0 + v), "{v} {s}");
}

fn random_cases(seed: u64, n: usize, m: &MapSpec) -> Vec<(f64, f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    while out.len() < n {
        let a: f64 = rng.gen_range(-0.95..0.95);
        let w: f64 = rng.gen_range(1e-4..0.02);
        let l: usize = rng.gen_range(1..4);
        if generalized_distortion(m, a, a + w, l).is_ok() && log_distance_sum(m, a, a + w, l).is_ok() {
            out.push((a, a + w, l));
        }
    }
    out
}

#[test]
fn calibrated_variation_constant() {
    let m = chebyshev();
    let ratio = |cases: &[(f64, f64, usize)]| {
        cases
            .iter()
            .map(|&(a, b, l)| {
                let e = variation_exact(&m, a, b, l, QUAD_TOL).unwrap();
                let bd = variation_bound(&m, a, b, l).unwrap();
                e / bd
            })
            .fold(0.0, f64::max)
    };
    let c_map = ratio(&random_cases(1, 100, &m));
    assert!(c_map.is_finite() && c_map > 0.0);
    let held_out = ratio(&random_cases(2, 100, &m));
    assert!(held_out <= 2.0 * c_map, "{held_out} vs {c_map}");
}

#[test]
fn supbound_and_gendist() {
    let m = chebyshev();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &(a, b, n) in &[(0.2, 0.3, 2), (0.55, 0.6, 3), (-0.9, -0.85, 2)] {
        let d = generalized_distortion(&m, a, b, n).unwrap();
        let prod_sup_inv: f64 = d.steps.iter().map(|s| 1.0 / s.inf_df).product();
        for _ in 0..100 {
            let x = rng.gen_range(a..b);
            assert!(prod_sup_inv <= d.product / df_iterate(&m, x, n).unwrap() * (1.0 + 1e-12));
        }
        for s in &d.steps {
            // |D2 f| = 4 everywhere.
            assert!(s.ratio <= 1.0 + 4.0 / s.inf_df * (s.hi - s.lo) + 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn distortion_properties(a in 0.05f64..0.6, w in 1e-4f64..0.1, cut in 0.1f64..0.9, m_steps in 0usize..3, n_steps in 0usize..3) {
        let m = chebyshev();
        let b = a + w;
        let Ok(whole) = generalized_distortion(&m, a, b, m_steps + n_steps) else { return Ok(()) };
        prop_assert!(whole.product >= 1.0);
        let first = generalized_distortion(&m, a, b, m_steps).unwrap();
        let (lo, hi) = if m_steps == 0 {
            (a, b)
        } else {
            let s = &whole.steps[m_steps - 1];
            let br = &m.branches[s.branch];
            let (x, y) = (br.value(s.lo).unwrap(), br.value(s.hi).unwrap());
            (x.min(y), x.max(y))
        };
        let second = generalized_distortion(&m, lo, hi, n_steps).unwrap();
        prop_assert!(whole.product <= first.product * second.product * (1.0 + 1e-9));
        let inner = generalized_distortion(&m, a + cut * w * 0.5, b - (1.0 - cut) * w * 0.5, m_steps + n_steps).unwrap();
        prop_assert!(inner.product <= whole.product * (1.0 + 1e-12));
    }
}

#[test]
fn omega_on_linear_branches() {
    let ctx = InducingContext::new(&tent(), 0.05, 4, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    for b in part.free() {
        let w = omega_variation(&ctx.map, b).unwrap();
        assert!((w - 2.0 / 16.0).abs() < 1e-12);
    }
    let r = summability_report(&ctx, &part, SummabilityParams::default()).unwrap();
    let free_len: f64 = part.free().map(|b| b.len()).sum();
    let free_row = r.rows.iter().find(|row| row.tau == 4).unwrap();
    let bound_at_4: f64 = part.bound().filter(|b| b.tau == 4).map(|b| 4.0 * b.len()).sum();
    assert!((free_row.sum_tau_len - bound_at_4 - 4.0 * free_len).abs() < 1e-12);
}

#[test]
fn omega_matches_extended_sup_sum() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    let br = part.free().max_by(|p, q| p.len().total_cmp(&q.len())).unwrap().clone();
    let exact = omega_variation_exact(&ctx.map, &br).unwrap();
    let formula = omega_variation(&ctx.map, &br).unwrap();
    assert!(formula >= exact - 1e-12);
    // Fine-grid sup-sum of 1_I / |Df^tau| on a window around I.
    let pad = 0.01 * br.len();
    let phi = |x: f64| {
        if x >= br.a && x <= br.b {
            1.0 / df_iterate(&ctx.map, x, br.tau).unwrap()
        } else {
            0.0
        }
    };
    let s = sup_sum_variation(&phi, br.a - pad, br.b + pad, 400_000);
    assert!((s - exact).abs() < 1e-4, "{s} vs {exact}");
    assert!(formula >= 2.0 / br.sup_df);
}

#[test]
fn singular_endpoint_variation() {
    // Second Lorenz branch at delta 0.2: |Df^5| blows up at the right end.
    let map = MapSpec::build(&MapConfig::family("lorenz", &[])).unwrap();
    let ctx = InducingContext::new(&map, 0.2, 5, DEFAULT_P_MAX).unwrap();
    let part = build_partition(&ctx, PartitionParams::default()).unwrap();
    let br = part.branches.iter().find(|b| b.sup_df > 1e6).unwrap().clone();
    let v = variation_exact(&map, br.a, br.b, br.tau, QUAD_TOL).unwrap();
    let chain = interval_orbit(&map, br.a, br.b, br.tau).unwrap();
    let g = |x: f64| 1.0 / chain_df(&map, &chain, x).unwrap().0;
    // Monotone here, so the sup-sum is the endpoint difference.
    let s = sup_sum_variation(&g, br.a, br.b, 100_000);
    assert!((s - (g(br.a) - g(br.b)).abs()).abs() < 1e-12);
    assert!((v - s).abs() < 1e-8, "{v} vs {s}");
}

#[test]
fn chebyshev_summability_converges() {
    let ctx = InducingContext::new(&chebyshev(), 0.2, 3, DEFAULT_P_MAX).unwrap();
    let part = build_partition_unchecked(&ctx, DEFAULT_RESOLUTION).unwrap();
    let r = summability_report(&ctx, &part, SummabilityParams::default()).unwrap();
    assert!(r.variation_summable && r.inducing_times_summable, "{:?}", (r.tail_increment_var, r.tail_increment_tau));
    for w in r.rows.windows(2) {
        assert!(w[1].partial_var_omega >= w[0].partial_var_omega);
        assert!(w[1].partial_tau_len >= w[0].partial_tau_len);
    }
    assert!(r.to_csv().starts_with("tau,count,sum_var_omega,sum_tau_len,bound_gap_term\n"));
}

#[test]
fn bv_properties_hold() {
    let r = bv_selftest();
    let failed: Vec<_> = r.checks.iter().filter(|c| !c.pass).collect();
    assert!(r.pass, "{failed:?}");
    let x2 = r.checks.iter().find(|c| c.property.starts_with("V5") && c.case == "x^2").unwrap();
    assert!((x2.lhs - 1.0).abs() < 1e-6);
    // The sign/step pair breaks the |phi| form of the product rule.
    assert!(!r.product_rule_counterexamples.is_empty());
}
