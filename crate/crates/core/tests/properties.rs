//! Property tests for the invariants the modules promise.

use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use proptest::prelude::*;

use thinobs::analysis::{compute_sigma, compute_sigma_field, decompose_contact, holder_seminorm, omega_gamma_set, SigmaField};
use thinobs::geometry::{parabolic_distance, CylinderKind, GridSpec, HalfCylinderGrid, ParabolicPoint};
use thinobs::library::{explicit_grid, BuiltIn};
use thinobs::operators::{pucci_minus, pucci_plus, reflect_matrix, EllipticOperator, EllipticityPair, SymMatrix};
use thinobs::problem::{PolyBoundary, Polynomial};
use thinobs::solvers::{solve_penalized, solve_signorini, SolveResult, SolverConfig, SpaceTimeField};

fn point() -> impl Strategy<Value = ParabolicPoint> {
    (-1.0..1.0f64, -1.0..1.0f64, 0.0..1.0f64, -1.0..0.0f64).prop_map(|(a, b, y, t)| ParabolicPoint { x: [a, b], y, t })
}

fn sym2() -> impl Strategy<Value = SymMatrix> {
    (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(a, b, c)| SymMatrix::from_rows(&[&[a, b], &[b, c]]).unwrap())
}

fn psd2() -> impl Strategy<Value = SymMatrix> {
    (-1.5..1.5f64, -1.5..1.5f64, -1.5..1.5f64, -1.5..1.5f64).prop_map(|(a, b, c, d)| {
        // v v^T + w w^T
        SymMatrix::from_rows(&[&[a * a + c * c, a * b + c * d], &[a * b + c * d, b * b + d * d]]).unwrap()
    })
}

fn operators() -> Vec<EllipticOperator> {
    let pair = EllipticityPair::new(1.0, 2.0).unwrap();
    vec![
        EllipticOperator::trace(2),
        EllipticOperator::pucci_minus(2, pair),
        EllipticOperator::pucci_plus(2, pair),
        BuiltIn::P3.operator(2),
    ]
}

fn small_grid() -> HalfCylinderGrid {
    HalfCylinderGrid::new(GridSpec::new(2, 0.125, 0.0625, -1.0, 0.0).unwrap()).unwrap()
}

fn p2_solve() -> &'static SolveResult {
    static CELL: OnceLock<SolveResult> = OnceLock::new();
    CELL.get_or_init(|| solve_signorini(&BuiltIn::P2.spec(2, 0.0625).unwrap(), &SolverConfig::default()).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn parabolic_distance_is_a_metric(a in point(), b in point(), c in point()) {
        let (ab, ba) = (parabolic_distance(&a, &b), parabolic_distance(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert_eq!(parabolic_distance(&a, &a), 0.0);
        prop_assert!(ab <= parabolic_distance(&a, &c) + parabolic_distance(&c, &b) + 1e-12);
    }

    #[test]
    fn cylinders_grow_with_radius(x in -0.9..0.9f64, t in -0.5..0.0f64, r1 in 0.05..0.6f64, dr in 0.0..0.4f64) {
        let grid = small_grid();
        let center = ParabolicPoint { x: [x, 0.0], y: 0.0, t };
        for kind in [CylinderKind::Half, CylinderKind::Thin] {
            let inner: HashSet<_> = grid.cylinder_nodes(&center, r1, kind).into_iter().collect();
            let outer: HashSet<_> = grid.cylinder_nodes(&center, r1 + dr, kind).into_iter().collect();
            prop_assert!(inner.is_subset(&outer));
            for node in &inner {
                prop_assert!(parabolic_distance(&grid.point(*node), &center) < r1 + 1e-12);
            }
        }
    }

    #[test]
    fn operators_are_uniformly_elliptic(m in sym2(), n in psd2()) {
        for op in operators() {
            let e = op.ellipticity();
            let diff = op.apply(&m.add(&n)) - op.apply(&m);
            let tr = n.trace();
            prop_assert!(diff >= e.lambda() * tr - 1e-9 && diff <= e.big_lambda() * tr + 1e-9);
            let f = op.apply(&m);
            prop_assert!(f >= pucci_minus(&m, e.lambda(), e.big_lambda()) - 1e-9);
            prop_assert!(f <= pucci_plus(&m, e.lambda(), e.big_lambda()) + 1e-9);
            prop_assert!((op.apply(&reflect_matrix(&m)) - f).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_is_linear(a in -2.0..2.0f64, b in -2.0..2.0f64, p in -1.0..1.0f64, q in -1.0..1.0f64) {
        let grid = small_grid();
        let u = |x: &[f64], y: f64, t: f64| x[0] * x[0] + p * y * y * y - y * t;
        let v = |x: &[f64], y: f64, _t: f64| (q * x[0] + y).exp();
        let su = compute_sigma_field(&SpaceTimeField::from_fn(grid.clone(), u)).unwrap();
        let sv = compute_sigma_field(&SpaceTimeField::from_fn(grid.clone(), v)).unwrap();
        let sw = compute_sigma_field(&SpaceTimeField::from_fn(grid, |x, y, t| a * u(x, y, t) + b * v(x, y, t))).unwrap();
        for ((_, w), ((_, s1), (_, s2))) in sw.iter().zip(su.iter().zip(sv.iter())) {
            prop_assert!((w - (a * s1 + b * s2)).abs() < 1e-9);
        }
    }

    #[test]
    fn holder_seminorm_grows_with_alpha(
        pts in proptest::collection::vec((0.0..0.5f64, 0.0..0.5f64, 0.0..0.25f64, -1.0..1.0f64), 2..20),
        a1 in 0.05..0.95f64,
        da in 0.0..0.5f64,
    ) {
        // every pair is closer than 1, so d^-alpha increases with alpha
        let points: Vec<_> = pts.iter().map(|&(x, y, t, _)| ParabolicPoint { x: [x, 0.0], y, t }).collect();
        let values: Vec<f64> = pts.iter().map(|p| p.3).collect();
        let a2 = (a1 + da).min(1.0);
        let lo = holder_seminorm(&points, &values, a1).unwrap();
        let hi = holder_seminorm(&points, &values, a2).unwrap();
        prop_assert!(lo <= hi * (1.0 + 1e-12));
    }

    #[test]
    fn omega_sets_are_nested(g1 in 1e-4..1.0f64, dg in 0.0..1.0f64, shift in -0.5..0.5f64) {
        let sigma = SigmaField::from_fn(small_grid(), |x, t| -(x[0] - shift).abs() * (1.0 - t));
        let small: HashSet<_> = omega_gamma_set(&sigma, g1).unwrap().into_iter().collect();
        let large: HashSet<_> = omega_gamma_set(&sigma, g1 + dg).unwrap().into_iter().collect();
        prop_assert!(small.is_subset(&large));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn contact_set_grows_with_tolerance(t1 in 0.0..1e-2f64, dt in 0.0..1e-2f64) {
        let r = p2_solve();
        let lo = decompose_contact(r, t1);
        let hi = decompose_contact(r, t1 + dt);
        let a: HashSet<_> = lo.delta_nodes().into_iter().collect();
        let b: HashSet<_> = hi.delta_nodes().into_iter().collect();
        prop_assert!(a.is_subset(&b));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn ordered_data_give_ordered_solutions(c in 0.0..0.3f64, s in 0.0..0.2f64) {
        // raise P2's data by c + s x^2 (>= 0): the Signorini solution can only rise
        let op = BuiltIn::P2.operator(2);
        let grid = explicit_grid(&op, 2, 0.125, -0.25, 0.0, 0.9).unwrap();
        let low = BuiltIn::P2.spec_on(grid).unwrap();
        let shift = Polynomial::new(3, vec![(vec![0, 0, 0], c), (vec![2, 0, 0], s)]).unwrap();
        let mut high = low.clone();
        let base = low.boundary.clone();
        high.boundary = Arc::new(Shifted(base, PolyBoundary(shift)));
        let cfg = SolverConfig::default();
        let (u, v) = (solve_signorini(&low, &cfg).unwrap(), solve_signorini(&high, &cfg).unwrap());
        for (a, b) in u.field.values().iter().zip(v.field.values()) {
            prop_assert!(a <= b);
        }
    }

    #[test]
    fn penalty_flux_is_signed_and_solutions_are_ordered(k1 in 1.0..100.0f64, ratio in 1.0..8.0f64) {
        let op = BuiltIn::P2.operator(2);
        let spec = BuiltIn::P2.spec_on(explicit_grid(&op, 2, 0.125, -0.5, 0.0, 0.9).unwrap()).unwrap();
        let cfg = SolverConfig::default();
        let a = solve_penalized(&spec, k1, &cfg).unwrap();
        let b = solve_penalized(&spec, k1 * ratio, &cfg).unwrap();
        let sig = solve_signorini(&spec, &cfg).unwrap();
        prop_assert!(a.flux.iter().all(|&g| g <= 0.0));
        let sigma = compute_sigma(&a).unwrap();
        prop_assert!(sigma.sup_norm().is_finite());
        for ((ua, ub), us) in a.field.values().iter().zip(b.field.values()).zip(sig.field.values()) {
            prop_assert!(ua <= &(ub + 1e-12));
            prop_assert!(ub <= &(us + 1e-12));
        }
    }
}

#[derive(Debug)]
struct Shifted(Arc<dyn thinobs::problem::BoundaryData>, PolyBoundary);

impl thinobs::problem::BoundaryData for Shifted {
    fn value(&self, x: &[f64], y: f64, t: f64) -> f64 {
        self.0.value(x, y, t) + self.1.value(x, y, t)
    }
}
