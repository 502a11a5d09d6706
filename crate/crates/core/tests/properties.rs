use std::f64::consts::TAU;
use std::sync::Arc;

use proptest::prelude::*;

use isoembed::atlas::{breathing_family, build_atlas, decompose_metric, reconstruction_defect, Manifold};
use isoembed::fixed_point::{solve_fixed_point, FixedPointConfig};
use isoembed::frame::{apply_e, build_frame};
use isoembed::grid::{derivative, make_grid, Grid, MultiIndex, ScalarField, SupportRadii, SymTensorField, VecField};
use isoembed::holder::{holder_norm, monitor_recurrence, HolderSpec};
use isoembed::ops::OperatorEval;
use isoembed::poisson::solve_dirichlet;
use isoembed::profile::{plateau, Cutoff};
use isoembed::random::SmoothFieldSampler;

fn line(n: usize) -> Arc<Grid> {
    make_grid(1, n, SupportRadii::new(0.5, 0.75)).unwrap()
}

fn disk(n: usize) -> Arc<Grid> {
    make_grid(2, n, SupportRadii::new(0.5, 0.75)).unwrap()
}

fn close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-300)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn holder_norm_is_absolutely_homogeneous(seed in 0u64..10_000, c in -5.0f64..5.0, m in 0usize..3) {
        let g = line(97);
        let u = SmoothFieldSampler::new(seed).scalar(&g);
        let lhs = holder_norm(&u.scale(c), m, 0.5).unwrap().value;
        let rhs = c.abs() * holder_norm(&u, m, 0.5).unwrap().value;
        prop_assert!(close(lhs, rhs, 1e-12), "{lhs} vs {rhs}");
    }

    #[test]
    fn high_order_homogeneity_is_limited_by_stencil_rounding(seed in 0u64..10_000, c in -5.0f64..5.0, m in 3usize..5) {
        // Rounding of c·u is amplified by the m-th difference stencil, about
        // 2^m ε max|u| / h^m in sup, and by a further 2 / h^α in the seminorm.
        let g = line(97);
        let u = SmoothFieldSampler::new(seed).scalar(&g);
        let lhs = holder_norm(&u.scale(c), m, 0.5).unwrap().value;
        let rhs = c.abs() * holder_norm(&u, m, 0.5).unwrap().value;
        let h = g.spacing();
        let noise = 4.0 * 2f64.powi(m as i32) * f64::EPSILON * c.abs() * u.max_abs() / h.powi(m as i32);
        let floor = noise * (1.0 + 2.0 / h.sqrt());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs + floor, "{lhs} vs {rhs}");
    }

    #[test]
    fn holder_norm_satisfies_triangle_inequality(seed in 0u64..10_000, m in 0usize..4, alpha in 0.1f64..0.9) {
        let g = line(97);
        let mut s = SmoothFieldSampler::new(seed);
        let (u, v) = (s.scalar(&g), s.scalar(&g));
        let lhs = holder_norm(&u.add(&v).unwrap(), m, alpha).unwrap().value;
        let rhs = holder_norm(&u, m, alpha).unwrap().value + holder_norm(&v, m, alpha).unwrap().value;
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn product_rule_holds_in_c0alpha(seed in 0u64..10_000) {
        let g = line(129);
        let mut s = SmoothFieldSampler::new(seed);
        let (u, v) = (s.scalar(&g), s.scalar(&g));
        let spec = HolderSpec::default();
        let lhs = spec.value(&u.mul(&v).unwrap(), 0).unwrap();
        let rhs = spec.value(&u, 0).unwrap() * spec.value(&v, 0).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-12));
    }

    #[test]
    fn derivative_is_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0, two_d in any::<bool>(), order in 0usize..5) {
        let g = if two_d { disk(25) } else { line(81) };
        let mut s = SmoothFieldSampler::new(seed);
        let (u, v) = (s.scalar(&g), s.scalar(&g));
        let mut idx = vec![0usize; g.dim()];
        idx[0] = order.min(4);
        let mi = MultiIndex::new(&idx);
        let combined = derivative(&u.scale(a).add(&v.scale(b)).unwrap(), mi).unwrap();
        let separate = derivative(&u, mi).unwrap().scale(a).add(&derivative(&v, mi).unwrap().scale(b)).unwrap();
        // Rounding of the combined input, amplified by the stencil weights.
        let input = a.abs() * u.max_abs() + b.abs() * v.max_abs();
        let tol = 64.0 * f64::EPSILON * (input / g.spacing().powi(idx[0] as i32) + combined.max_abs());
        prop_assert!(max_diff(combined.values(), separate.values()) <= tol);
    }

    #[test]
    fn poisson_solve_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0, b in -2.0f64..2.0, two_d in any::<bool>()) {
        let g = if two_d { disk(33) } else { line(101) };
        let mut s = SmoothFieldSampler::new(seed);
        let (f, h) = (s.scalar(&g), s.scalar(&g));
        let combined = solve_dirichlet(&f.scale(a).add(&h.scale(b)).unwrap()).unwrap().u;
        let separate = solve_dirichlet(&f).unwrap().u.scale(a).add(&solve_dirichlet(&h).unwrap().u.scale(b)).unwrap();
        prop_assert!(max_diff(combined.values(), separate.values()) <= 1e-10);
    }

    #[test]
    fn dirichlet_solution_vanishes_on_the_boundary(seed in 0u64..10_000) {
        let g = disk(33);
        let f = SmoothFieldSampler::new(seed).scalar(&g);
        let sol = solve_dirichlet(&f).unwrap();
        prop_assert!(sol.boundary_sup == 0.0);
        prop_assert!(sol.residual_sup < 1e-8);
    }

    #[test]
    fn operators_are_quadratic(seed in 0u64..10_000, c in -3.0f64..3.0) {
        let g = line(101);
        let cutoff = Cutoff::for_grid(&g).unwrap();
        let v = SmoothFieldSampler::new(seed).vector(&g, 2);
        let e1 = OperatorEval::new(&cutoff, &v).unwrap();
        let e2 = OperatorEval::new(&cutoff, &v.scale(c)).unwrap();
        let c2 = c * c;
        let check = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(a, b)| (c2 * a - b).abs() <= 1e-10 * (1.0 + b.abs()));
        prop_assert!(check(e1.n[0].values(), e2.n[0].values()));
        prop_assert!(check(e1.q.get(0, 0), e2.q.get(0, 0)));
        prop_assert!(check(e1.p.component(0), e2.p.component(0)));
    }

    #[test]
    fn operator_outputs_live_in_the_cutoff_support(seed in 0u64..10_000) {
        let g = line(101);
        let cutoff = Cutoff::for_grid(&g).unwrap();
        let v = SmoothFieldSampler::new(seed).vector(&g, 3);
        let e = OperatorEval::new(&cutoff, &v).unwrap();
        for p in 0..g.len() {
            if g.radius(p) >= 0.75 {
                prop_assert!(e.n[0].values()[p] == 0.0);
                prop_assert!(e.q.get(0, 0)[p].abs() <= 1e-12);
                prop_assert!(e.p.component(0)[p].abs() <= 1e-12);
                prop_assert!(e.u2.get(0, 0)[p].abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn frame_inverts_on_perturbed_parabolas(eps in -0.2f64..0.2, k in 0.5f64..3.0) {
        let g = line(101);
        let f0 = VecField::from_fn(&g, 3, |x| vec![x[0] + eps * (k * x[0]).sin(), x[0] * x[0], eps * (k * x[0]).cos()]);
        let frame = build_frame(&f0).unwrap();
        prop_assert!(frame.identity_residual <= 1e-10);
    }

    #[test]
    fn e_is_linear(seed in 0u64..10_000, a in -2.0f64..2.0) {
        let g = disk(25);
        let f0 = VecField::from_fn(&g, 5, |x| vec![x[0], x[1], 0.5 * x[0] * x[0], x[0] * x[1], 0.5 * x[1] * x[1]]);
        let frame = build_frame(&f0).unwrap();
        let mut s = SmoothFieldSampler::new(seed);
        let (h1, h2) = (s.vector(&g, 2), s.vector(&g, 2));
        let (f1, f2) = (s.sym_tensor(&g), s.sym_tensor(&g));
        let lhs = apply_e(&frame, &h1.scale(a).add(&h2).unwrap(), &f1.scale(a).add(&f2).unwrap()).unwrap();
        let rhs = apply_e(&frame, &h1, &f1).unwrap().scale(a).add(&apply_e(&frame, &h2, &f2).unwrap()).unwrap();
        for c in 0..5 {
            prop_assert!(max_diff(lhs.component(c), rhs.component(c)) <= 1e-10);
        }
    }

    #[test]
    fn partition_of_unity_sums_to_one(theta in 0.0f64..TAU, phi in 0.0f64..TAU) {
        let circle = build_atlas(Manifold::Circle, 2).unwrap();
        prop_assert!((circle.pu_sum(&[theta]) - 1.0).abs() <= 1e-12);
        let torus = build_atlas(Manifold::FlatTorus, 4).unwrap();
        prop_assert!((torus.pu_sum(&[theta, phi]) - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metric_decomposition_reconstructs_the_change(theta in 0.0f64..TAU, t in 0.0f64..1.0, rate in -0.5f64..0.5) {
        let atlas = build_atlas(Manifold::Circle, 3).unwrap();
        let family = breathing_family(Manifold::Circle, rate, 1.0, 4).unwrap();
        let pieces = decompose_metric(&atlas, &family).unwrap();
        prop_assert!(reconstruction_defect(&atlas, &family, &pieces, &[(vec![theta], t)]) <= 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn converging_traces_pass_the_recurrence_monitor(amp in 0.001f64..0.01, width in 0.3f64..0.45) {
        let g = make_grid(1, 201, SupportRadii::new(0.5, 0.9)).unwrap();
        let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
        let bump = ScalarField::from_fn(&g, |x| amp * plateau(x[0].abs(), 0.0, width));
        let f = SymTensorField::new(g.clone(), vec![bump.into_values()]).unwrap();
        let frame = build_frame(&f0).unwrap();
        let cutoff = Cutoff::for_grid(&g).unwrap();
        let (v, trace) = solve_fixed_point(&frame, &cutoff, &f, &FixedPointConfig::default()).unwrap();
        prop_assert!(trace.bound_held);
        prop_assert!(monitor_recurrence(0.0, trace.e0_norm / 2.0, &trace.norms()));
        prop_assert!(trace.sup_norm_c3().is_finite());
        let u = v.scale_by(&cutoff.a.mul(&cutoff.a).unwrap()).unwrap();
        for p in 0..g.len() {
            if g.radius(p) >= 0.9 {
                prop_assert!(u.at(p).iter().all(|&x| x == 0.0));
            }
        }
    }
}
