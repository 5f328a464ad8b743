use conemv_core::cone::{ConeKind, ConeSpec};
use proptest::prelude::*;

const TOL: f64 = 1e-10;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn nonzero(dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0..1.0f64, dim).prop_filter("away from zero", |v| dot(v, v) > 0.01)
}

fn cone(dim: usize) -> impl Strategy<Value = ConeSpec> {
    prop_oneof![
        Just(ConeSpec::full_space(dim).unwrap()),
        Just(ConeSpec::nonnegative_orthant(dim).unwrap()),
        nonzero(dim).prop_map(|d| ConeSpec::ray(d).unwrap()),
        prop::collection::vec(nonzero(dim), 1..dim + 4).prop_map(|g| ConeSpec::finitely_generated(g).unwrap()),
    ]
}

fn case() -> impl Strategy<Value = (ConeSpec, Vec<f64>, Vec<f64>, f64)> {
    (1usize..6).prop_flat_map(|dim| (cone(dim), prop::collection::vec(-5.0..5.0f64, dim), prop::collection::vec(-5.0..5.0f64, dim), 0.0..10.0f64))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn projection_is_idempotent_and_homogeneous((k, a, _, lambda) in case()) {
        let p = k.project(&a).unwrap();
        prop_assert!(dist(&k.project(&p).unwrap(), &p) <= TOL);
        let scaled: Vec<f64> = a.iter().map(|x| lambda * x).collect();
        let expect: Vec<f64> = p.iter().map(|x| lambda * x).collect();
        prop_assert!(dist(&k.project(&scaled).unwrap(), &expect) <= TOL);
        prop_assert!(k.contains(&p, TOL).unwrap());
    }

    #[test]
    fn projection_is_nonexpansive((k, a, b, _) in case()) {
        let (pa, pb) = (k.project(&a).unwrap(), k.project(&b).unwrap());
        prop_assert!(dist(&pa, &pb) <= dist(&a, &b) + TOL);
    }

    #[test]
    fn moreau_decomposition_holds((k, a, _, _) in case()) {
        let p = k.project(&a).unwrap();
        let q = k.polar_residual(&a).unwrap();
        prop_assert!(dot(&p, &q).abs() <= TOL);
        prop_assert!((dot(&a, &p) - dot(&p, &p)).abs() <= TOL);
        for i in 0..a.len() {
            prop_assert!((p[i] + q[i] - a[i]).abs() <= TOL);
        }
        let polar_ok = match k.kind() {
            ConeKind::FullSpace { .. } => q.iter().all(|x| x.abs() <= TOL),
            ConeKind::NonnegativeOrthant { .. } => q.iter().all(|x| *x <= TOL),
            ConeKind::Ray { direction } => dot(&q, direction) <= TOL,
            ConeKind::FinitelyGenerated { generators } => generators.iter().all(|g| dot(&q, g) <= TOL),
        };
        prop_assert!(polar_ok);
    }
}
