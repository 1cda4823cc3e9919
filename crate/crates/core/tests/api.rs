//! Public-API checks against Gaussian closed forms computed here.

use std::sync::Arc;

use bdlab_core::{
    estimate_lhs, estimate_lhs_quadrature, estimate_rhs, field_catalog, lsi_check, ou_apply,
    parse_field, parse_functional, sample_brownian, truncate, BrownianStream, ConstantPolicy,
    GaussianQuadrature, PathBatch, PathSource, TimeGrid, TruncationSpec,
};
use proptest::prelude::*;

fn grid(steps: usize) -> Arc<TimeGrid> {
    Arc::new(TimeGrid::new(1.0, steps, &[1.0]).unwrap())
}

fn double_factorial(n: u32) -> f64 {
    (1..=n).rev().step_by(2).map(f64::from).product()
}

#[test]
fn streamed_and_materialized_paths_agree() {
    let g = grid(8);
    let stream = BrownianStream::new(g.clone(), 2, 10_000, 11).unwrap();
    let parts: Vec<PathBatch> = (0..stream.n_chunks())
        .map(|i| stream.chunk(i).into_owned())
        .collect();
    let joined = PathBatch::concat(&parts).unwrap();
    let direct = sample_brownian(g.clone(), 2, 10_000, 11).unwrap();
    assert_eq!(joined.values(), direct.values());
    let other = sample_brownian(g, 2, 10_000, 12).unwrap();
    assert_ne!(other.values(), direct.values());
}

#[test]
fn terminal_marginal_has_unit_variance() {
    let g = grid(16);
    let n = 200_000;
    let b = sample_brownian(g.clone(), 1, n, 3).unwrap();
    let last = g.len() - 1;
    let xs: Vec<f64> = (0..n).map(|p| b.at(p, last)[0]).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    // se(mean) = 1/√n, se(var) = √(2/n)
    assert!(mean.abs() < 5.0 / (n as f64).sqrt(), "mean {mean}");
    assert!(
        (var - 1.0).abs() < 5.0 * (2.0 / n as f64).sqrt(),
        "var {var}"
    );
    assert_eq!(b.at(0, 0), &[0.0]);
}

#[test]
fn monte_carlo_lhs_matches_the_mgf() {
    let f = parse_functional("linear:a=0.5").unwrap();
    let r = estimate_lhs(&f, &sample_brownian(grid(10), 1, 100_000, 5).unwrap()).unwrap();
    assert!((r.value - 0.125).abs() <= 4.0 * r.std_error, "{r:?}");
}

#[test]
fn constant_drift_rhs_matches_its_expectation() {
    // E[a (B_1 + u)] − u²/2 = a u − u²/2
    let f = parse_functional("linear:a=1").unwrap();
    let base = sample_brownian(grid(20), 1, 100_000, 9).unwrap();
    for u in [-1.0, 0.0, 0.5, 1.0, 2.0] {
        let r = estimate_rhs(&f, &ConstantPolicy::new(vec![u]), &base).unwrap();
        let want = u - 0.5 * u * u;
        assert!(
            (r.value - want).abs() <= 4.0 * r.std_error + 1e-9,
            "u={u}: {r:?}"
        );
        assert!(r.value <= 0.5 + 3.0 * r.std_error + 1e-9);
    }
}

#[test]
fn ou_semigroup_of_a_linear_field_is_mehler() {
    let f = parse_field("linear").unwrap();
    let quad = GaussianQuadrature::new(1, 32).unwrap();
    let a = f.value(&[1.0]) - f.value(&[0.0]);
    for t in [0.1f64, 0.5, 2.0] {
        for x in [-1.5, 0.0, 0.7] {
            let got = ou_apply(&f, t, &[x], &quad).unwrap();
            let want = f.value(&[0.0]) + (-t).exp() * a * x;
            assert!((got - want).abs() < 1e-12, "t={t} x={x}: {got} vs {want}");
        }
    }
}

#[test]
fn lsi_holds_on_every_field_with_a_gradient() {
    for f in field_catalog().iter().filter(|f| f.has_grad()) {
        let order = if f.dim() == 1 { 64 } else { 24 };
        let quad = GaussianQuadrature::new(f.dim(), order).unwrap();
        let r = lsi_check(f, &quad).unwrap();
        assert!(r.deficit >= -1e-9, "{}: {r:?}", f.spec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn quadrature_lhs_matches_gaussian_mgf(a in -2.0..2.0f64, c in -1.0..0.3f64, d in 1usize..=3) {
        let lin = parse_functional(&format!("linear:a={a},d={d}")).unwrap();
        let r = estimate_lhs_quadrature(&lin).unwrap();
        prop_assert!((r.value - d as f64 * a * a / 2.0).abs() < 1e-9, "{:?}", r);
        let quad = parse_functional(&format!("quadratic:c={c},d={d}")).unwrap();
        let r = estimate_lhs_quadrature(&quad).unwrap();
        let want = -0.5 * d as f64 * (1.0 - 2.0 * c).ln();
        prop_assert!((r.value - want).abs() < 1e-8, "{} vs {}", r.value, want);
    }

    #[test]
    fn gauss_hermite_integrates_even_moments(k in 0u32..12, order in 13usize..40) {
        let quad = GaussianQuadrature::new(1, order).unwrap();
        let got = quad.expectation(|x| x[0].powi(2 * k as i32));
        let want = if k == 0 { 1.0 } else { double_factorial(2 * k - 1) };
        prop_assert!((got - want).abs() <= 1e-10 * want, "k={} {} vs {}", k, got, want);
        let odd = quad.expectation(|x| x[0].powi(2 * k as i32 + 1));
        prop_assert!(odd.abs() < 1e-9 * want);
    }

    #[test]
    fn capping_is_monotone_in_the_level(m1 in 0.1..6.0f64, dm in 0.0..6.0f64) {
        let f = parse_functional("quadratic:c=0.25").unwrap();
        let lo = estimate_lhs_quadrature(&truncate(&f, TruncationSpec::cap(m1)).unwrap()).unwrap();
        let hi = estimate_lhs_quadrature(&truncate(&f, TruncationSpec::cap(m1 + dm)).unwrap()).unwrap();
        prop_assert!(lo.value <= hi.value + 1e-12);
        prop_assert!(hi.value <= m1 + dm + 1e-12);
        let exact = -0.5 * 0.5f64.ln();
        prop_assert!(hi.value <= exact + 1e-9);
    }
}
