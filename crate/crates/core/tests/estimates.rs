//! Empirical constants of the analytic estimates: finite, stable under grid
//! refinement, and unchanged in order of magnitude when the arguments carry a
//! time index.

use std::sync::Arc;

use isoembed::family::{charts, solve_family, FamilyConfig, MetricFamily};
use isoembed::frame::{apply_e, build_frame, estimate_e_norm, higher_norm_witness};
use isoembed::grid::{make_grid, Grid, SupportRadii, VecField};
use isoembed::holder::HolderSpec;
use isoembed::ops::continuity_witness;
use isoembed::poisson::{elliptic_witness, support_witness};
use isoembed::profile::Cutoff;
use isoembed::random::SmoothFieldSampler;

fn line(n: usize) -> Arc<Grid> {
    make_grid(1, n, SupportRadii::new(0.5, 0.75)).unwrap()
}

#[test]
fn schauder_ratios_are_bounded_over_compact_corpus() {
    let spec = HolderSpec::default();
    for g in [line(101), make_grid(2, 33, SupportRadii::new(0.5, 0.75)).unwrap()] {
        let mut s = SmoothFieldSampler::new(21);
        let corpus: Vec<_> = (0..50).map(|_| s.compact(&g, 0.75)).collect();
        for m in 0..=2 {
            let w = elliptic_witness(&corpus, m, &spec).unwrap();
            assert!(w.max_ratio.is_finite() && w.max_ratio < 100.0, "m={m}: {}", w.max_ratio);
        }
    }
}

#[test]
fn support_constant_depends_only_on_alpha_and_radius() {
    let spec = HolderSpec::default();
    let g = line(101);
    let mut s = SmoothFieldSampler::new(22);
    let corpus: Vec<_> = (0..50).map(|_| s.compact(&g, 0.75)).collect();
    let w = support_witness(&corpus, 0.75, &spec).unwrap();
    assert!(w.spread < 10.0, "{w:?}");
}

fn pairs(g: &Arc<Grid>, seed: u64, count: usize) -> Vec<(VecField, VecField)> {
    let mut s = SmoothFieldSampler::new(seed);
    (0..count).map(|_| (s.vector(g, 2).scale(0.1), s.vector(g, 2).scale(0.1))).collect()
}

#[test]
fn continuity_constants_are_finite_and_resolution_independent() {
    let spec = HolderSpec::default();
    let coarse_grid = line(201);
    let fine_grid = line(401);
    let coarse = continuity_witness(&Cutoff::for_grid(&coarse_grid).unwrap(), &pairs(&coarse_grid, 9, 50), &spec).unwrap();
    let fine = continuity_witness(&Cutoff::for_grid(&fine_grid).unwrap(), &pairs(&fine_grid, 9, 50), &spec).unwrap();
    for (c, f) in [(coarse.n, fine.n), (coarse.m, fine.m), (coarse.pq, fine.pq)] {
        assert!(c.is_finite() && f.is_finite());
        assert!(f / c < 2.0 && c / f < 2.0, "{coarse:?} vs {fine:?}");
    }
}

#[test]
fn time_indexed_arguments_share_the_static_constants() {
    let spec = HolderSpec::default();
    let g = line(201);
    let cutoff = Cutoff::for_grid(&g).unwrap();
    let stat = continuity_witness(&cutoff, &pairs(&g, 9, 30), &spec).unwrap();
    let mut s = SmoothFieldSampler::new(10);
    let (base, drift) = (s.vector(&g, 2).scale(0.1), s.vector(&g, 2).scale(0.1));
    let at = |t: f64| base.add(&drift.scale(t)).unwrap();
    let times = [(0.0, 0.25), (0.25, 0.5), (0.1, 0.9), (0.5, 1.0)];
    let timed: Vec<_> = times.iter().map(|&(a, b)| (at(a), at(b))).collect();
    let dyn_w = continuity_witness(&cutoff, &timed, &spec).unwrap();
    for (st, dy) in [(stat.n, dyn_w.n), (stat.m, dyn_w.m), (stat.pq, dyn_w.pq)] {
        assert!(dy <= 10.0 * st, "{stat:?} vs {dyn_w:?}");
    }
}

#[test]
fn higher_norm_bound_for_e_has_finite_constant() {
    let g = line(101);
    let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
    let frame = build_frame(&f0).unwrap();
    let c = higher_norm_witness(&frame, &HolderSpec::default(), 20, 5).unwrap();
    assert!(c.is_finite() && c >= 0.0);
}

#[test]
fn time_derivative_of_e_is_bounded_by_the_static_norm() {
    // E is linear, so ∂_t E(h, f) = E(∂_t h, ∂_t f) for a fixed frame.
    let spec = HolderSpec::default();
    let g = line(101);
    let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
    let frame = build_frame(&f0).unwrap();
    let n_e = estimate_e_norm(&frame, &spec, 20).unwrap();
    let mut s = SmoothFieldSampler::new(31);
    let (h0, h1) = (s.vector(&g, 1), s.vector(&g, 1));
    let (k0, k1) = (s.sym_tensor(&g), s.sym_tensor(&g));
    let dt = 0.05;
    for r in 0..=1usize {
        let e_at = |t: f64| apply_e(&frame, &h0.add(&h1.scale(t)).unwrap(), &k0.add(&k1.scale(t)).unwrap()).unwrap();
        let (lhs, rhs) = if r == 0 {
            (spec.value(&e_at(0.3), 2).unwrap(), spec.value(&h0.add(&h1.scale(0.3)).unwrap(), 2).unwrap() + spec.value(&k0.add(&k1.scale(0.3)).unwrap(), 2).unwrap())
        } else {
            let d = e_at(0.3 + dt).sub(&e_at(0.3)).unwrap().scale(1.0 / dt);
            (spec.value(&d, 2).unwrap(), spec.value(&h1, 2).unwrap() + spec.value(&k1, 2).unwrap())
        };
        assert!(lhs / rhs <= 10.0 * n_e, "r={r}: {} vs {n_e}", lhs / rhs);
    }
}

#[test]
fn product_rule_for_time_dependent_frame_has_first_order_error() {
    let spec = HolderSpec::default();
    let g = line(101);
    let mut s = SmoothFieldSampler::new(41);
    let (h, f) = (s.vector(&g, 1), s.sym_tensor(&g));
    let (dh, df) = (s.vector(&g, 1), s.sym_tensor(&g));
    let embedding = |t: f64| VecField::from_fn(&g, 2, move |x| vec![x[0] + 0.1 * t * x[0].sin(), x[0] * x[0] + 0.1 * t * x[0].cos()]);
    let e_at = |t: f64, a: f64| {
        let frame = build_frame(&embedding(t)).unwrap();
        apply_e(&frame, &h.add(&dh.scale(a)).unwrap(), &f.add(&df.scale(a)).unwrap()).unwrap()
    };
    let defect = |dt: f64| {
        let frame0 = build_frame(&embedding(0.0)).unwrap();
        let frame1 = build_frame(&embedding(dt)).unwrap();
        let total = e_at(dt, dt).sub(&e_at(0.0, 0.0)).unwrap().scale(1.0 / dt);
        let frame_part = apply_e(&frame1, &h, &f).unwrap().sub(&apply_e(&frame0, &h, &f).unwrap()).unwrap().scale(1.0 / dt);
        let data_part = apply_e(&frame0, &dh, &df).unwrap();
        spec.value(&total.sub(&frame_part.add(&data_part).unwrap()).unwrap(), 2).unwrap()
    };
    let (d1, d2) = (defect(0.02), defect(0.01));
    assert!(d1 < 1.0 && d2 < d1, "{d1} {d2}");
    let ratio = d2 / d1;
    assert!((0.4..0.6).contains(&ratio), "{ratio}");
}

#[test]
fn perturbation_grows_with_linearly_growing_metric_change() {
    let g = make_grid(1, 201, SupportRadii::new(0.75, 0.95)).unwrap();
    let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
    let family = MetricFamily::uniform_scale(charts::parabola(), 0.05, 1, 0.03, 5).unwrap();
    let sol = solve_family(&f0, &family, &FamilyConfig::default()).unwrap();
    let norms: Vec<f64> = sol.samples.iter().map(|s| s.u_norm).collect();
    assert!(norms.windows(2).all(|w| w[1] >= w[0]), "{norms:?}");
    // Leading order v ≈ -E(0, ĝ/2): the growth is close to linear in t.
    let ratio = norms[4] / norms[2];
    assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
    assert!(sol.max_stability_ratio() <= 1.1);
}
