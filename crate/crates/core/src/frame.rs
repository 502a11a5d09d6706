//! Freeness test and the pointwise right inverse of the derivative-row matrix.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ensure_same, sym_len, sym_pair, Differentiate, Grid, MultiIndex, SymTensorField, VecField};
use crate::holder::HolderSpec;
use crate::random::SmoothFieldSampler;

/// Relative freeness threshold, scaled by the median row norm of `A`.
pub const FREE_RELATIVE: f64 = 1e-6;
/// Gram-matrix condition number above which a warning is logged.
pub const CONDITION_WARNING: f64 = 1e8;

/// Number of first plus second derivative rows, `n(n+3)/2`.
pub fn frame_rows(dim: usize) -> usize {
    dim * (dim + 3) / 2
}

/// Per-node derivative matrices with rows `∂_i F` then `∂_i∂_j F` (lexicographic).
fn derivative_rows(f0: &VecField) -> Result<Vec<DMatrix<f64>>> {
    let grid = f0.grid();
    let dim = grid.dim();
    let rows = frame_rows(dim);
    if f0.ncomp() < rows {
        return Err(Error::Dimension(format!(
            "ambient dimension {} is below n(n+3)/2 = {rows}",
            f0.ncomp()
        )));
    }
    let mut indices: Vec<MultiIndex> = (0..dim).map(|i| MultiIndex::axis(i, 1)).collect();
    for k in 0..sym_len(dim) {
        let (i, j) = sym_pair(dim, k);
        let mut s = [0usize; 2];
        s[i] += 1;
        s[j] += 1;
        indices.push(MultiIndex::new(&s));
    }
    let derivs: Vec<VecField> = indices.iter().map(|&s| f0.derivative(s)).collect::<Result<_>>()?;
    let q = f0.ncomp();
    Ok((0..grid.len())
        .map(|p| DMatrix::from_fn(rows, q, |r, c| derivs[r].component(c)[p]))
        .collect())
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FreenessReport {
    /// Smallest singular value of `A` over all nodes.
    pub margin: f64,
    pub worst_node: usize,
    /// Acceptance threshold `ε_free`.
    pub threshold: f64,
}

impl FreenessReport {
    pub fn is_free(&self) -> bool {
        self.margin > self.threshold
    }
}

fn freeness_of(a: &[DMatrix<f64>]) -> FreenessReport {
    let sv: Vec<f64> = a
        .par_iter()
        .map(|m| m.singular_values().iter().cloned().fold(f64::INFINITY, f64::min))
        .collect();
    let (worst_node, margin) = sv
        .iter()
        .cloned()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (k, s)| if s < best.1 { (k, s) } else { best });
    let norms: Vec<f64> = a.iter().flat_map(|m| m.row_iter().map(|r| r.norm()).collect::<Vec<_>>()).collect();
    FreenessReport { margin, worst_node, threshold: FREE_RELATIVE * median(norms) }
}

/// Smallest singular value of `A[F0]` over all nodes, with the acceptance threshold.
pub fn freeness(f0: &VecField) -> Result<FreenessReport> {
    Ok(freeness_of(&derivative_rows(f0)?))
}

/// Smallest singular value of `A[F0]` over all nodes.
pub fn freeness_margin(f0: &VecField) -> Result<f64> {
    Ok(freeness(f0)?.margin)
}

/// `A[F0]` and `Θ[F0] = Aᵀ(AAᵀ)⁻¹` at every node.
#[derive(Debug, Clone)]
pub struct ImmersionFrame {
    grid: Arc<Grid>,
    q: usize,
    a: Vec<DMatrix<f64>>,
    theta: Vec<DMatrix<f64>>,
    pub freeness: FreenessReport,
    /// Largest `|AΘ - I|` entry over all nodes.
    pub identity_residual: f64,
    /// Largest condition number of `AAᵀ` over all nodes.
    pub gram_condition: f64,
}

impl ImmersionFrame {
    /// Frame from explicit per-node matrices, for synthetic operators.
    pub fn from_parts(grid: Arc<Grid>, a: Vec<DMatrix<f64>>, theta: Vec<DMatrix<f64>>) -> Result<Self> {
        let rows = frame_rows(grid.dim());
        if a.len() != grid.len() || theta.len() != grid.len() {
            return Err(Error::Dimension("one matrix per node required".into()));
        }
        let q = a.first().map_or(0, |m| m.ncols());
        for (m, t) in a.iter().zip(&theta) {
            if m.nrows() != rows || m.ncols() != q || t.nrows() != q || t.ncols() != rows {
                return Err(Error::Dimension(format!("expected A {rows}×{q} and Θ {q}×{rows}")));
            }
        }
        let identity_residual = identity_error(&a, &theta);
        let freeness = freeness_of(&a);
        Ok(Self { grid, q, a, theta, freeness, identity_residual, gram_condition: f64::NAN })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }

    pub fn ambient_dim(&self) -> usize {
        self.q
    }

    pub fn rows(&self) -> usize {
        frame_rows(self.grid.dim())
    }

    pub fn a(&self, node: usize) -> &DMatrix<f64> {
        &self.a[node]
    }

    pub fn theta(&self, node: usize) -> &DMatrix<f64> {
        &self.theta[node]
    }

    pub fn freeness_margin(&self) -> f64 {
        self.freeness.margin
    }
}

fn identity_error(a: &[DMatrix<f64>], theta: &[DMatrix<f64>]) -> f64 {
    a.par_iter()
        .zip(theta)
        .map(|(m, t)| {
            let prod = m * t;
            let n = prod.nrows();
            (prod - DMatrix::<f64>::identity(n, n)).abs().max()
        })
        .reduce(|| 0.0, f64::max)
}

/// Builds `Θ` by a Cholesky solve of the Gram system at every node.
pub fn build_frame(f0: &VecField) -> Result<ImmersionFrame> {
    let a = derivative_rows(f0)?;
    let freeness = freeness_of(&a);
    if !freeness.is_free() {
        return Err(Error::NotFree {
            node: freeness.worst_node,
            margin: freeness.margin,
            threshold: freeness.threshold,
        });
    }
    let solved: Vec<(DMatrix<f64>, f64)> = a
        .par_iter()
        .map(|m| {
            let gram = m * m.transpose();
            let eig = gram.clone().symmetric_eigenvalues();
            let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
            let cond = hi / lo;
            let chol = gram.cholesky().ok_or_else(|| Error::Solver {
                reason: "Gram matrix is not positive definite".into(),
                condition: cond,
            })?;
            // Θ = Aᵀ G⁻¹, i.e. Θᵀ = G⁻¹ A.
            let theta = chol.solve(m).transpose();
            Ok((theta, cond))
        })
        .collect::<Result<_>>()?;
    let gram_condition = solved.iter().map(|s| s.1).fold(0.0, f64::max);
    if gram_condition > CONDITION_WARNING {
        log::warn!("frame Gram matrix condition number {gram_condition:.3e} exceeds {CONDITION_WARNING:.0e}");
    }
    let theta: Vec<DMatrix<f64>> = solved.into_iter().map(|s| s.0).collect();
    let identity_residual = identity_error(&a, &theta);
    Ok(ImmersionFrame {
        grid: f0.grid().clone(),
        q: f0.ncomp(),
        a,
        theta,
        freeness,
        identity_residual,
        gram_condition,
    })
}

/// `E[F0](h, f) = Θ · (h, f)` at every node.
pub fn apply_e(frame: &ImmersionFrame, h: &VecField, f: &SymTensorField) -> Result<VecField> {
    ensure_same(frame.grid(), h.grid())?;
    ensure_same(frame.grid(), f.grid())?;
    let dim = frame.grid.dim();
    if h.ncomp() != dim {
        return Err(Error::Dimension(format!("h needs {dim} components, got {}", h.ncomp())));
    }
    let rows = frame.rows();
    let q = frame.q;
    let per_node: Vec<DVector<f64>> = (0..frame.grid.len())
        .into_par_iter()
        .map(|p| {
            let rhs = DVector::from_fn(rows, |r, _| {
                if r < dim {
                    h.component(r)[p]
                } else {
                    f.components()[r - dim][p]
                }
            });
            &frame.theta[p] * rhs
        })
        .collect();
    let comps = (0..q).map(|c| per_node.iter().map(|v| v[c]).collect()).collect();
    Ok(VecField::from_comps(frame.grid.clone(), comps))
}

/// `E[F0](0, f)`.
pub fn apply_e_metric(frame: &ImmersionFrame, f: &SymTensorField) -> Result<VecField> {
    let h = VecField::zeros(frame.grid(), frame.grid.dim());
    apply_e(frame, &h, f)
}

/// Probe lower bound for the operator norm of `E` on `C^{2,α}`.
pub fn estimate_e_norm(frame: &ImmersionFrame, spec: &HolderSpec, probes: usize) -> Result<f64> {
    estimate_e_norm_seeded(frame, spec, probes, 0xE0)
}

pub fn estimate_e_norm_seeded(frame: &ImmersionFrame, spec: &HolderSpec, probes: usize, seed: u64) -> Result<f64> {
    if probes < 10 {
        return Err(Error::config("probes", format!("must be at least 10, got {probes}")));
    }
    let mut sampler = SmoothFieldSampler::new(seed);
    let grid = frame.grid.clone();
    let mut best = 0.0f64;
    for _ in 0..probes {
        let h = sampler.vector(&grid, grid.dim());
        let f = sampler.sym_tensor(&grid);
        let e = apply_e(frame, &h, &f)?;
        let ratio = spec.value(&e, 2)? / (spec.value(&h, 2)? + spec.value(&f, 2)?);
        best = best.max(ratio);
    }
    Ok(best)
}

/// Smallest `C` with `|E(h,f)|_{3,α} <= n_e (|h|_{3,α} + |f|_{3,α}) + C (|h|_{2,α} + |f|_{2,α})`
/// over random probes, where `n_e` is the `C^{2,α}` norm estimate.
pub fn higher_norm_witness(frame: &ImmersionFrame, spec: &HolderSpec, probes: usize, seed: u64) -> Result<f64> {
    let n_e = estimate_e_norm_seeded(frame, spec, probes, seed)?;
    let mut sampler = SmoothFieldSampler::new(seed ^ 0x3);
    let grid = frame.grid.clone();
    let mut best = 0.0f64;
    for _ in 0..probes {
        let h = sampler.vector(&grid, grid.dim());
        let f = sampler.sym_tensor(&grid);
        let e = apply_e(frame, &h, &f)?;
        let excess = spec.value(&e, 3)? - n_e * (spec.value(&h, 3)? + spec.value(&f, 3)?);
        best = best.max(excess.max(0.0) / (spec.value(&h, 2)? + spec.value(&f, 2)?));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, SupportRadii};

    fn line(n: usize) -> Arc<Grid> {
        make_grid(1, n, SupportRadii::new(0.5, 0.75)).unwrap()
    }

    #[test]
    fn parabola_is_free_with_closed_form_margin() {
        let g = line(101);
        let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
        let r = freeness(&f0).unwrap();
        // A = [[1, 2x], [0, 2]]; σ_min² = (s - sqrt(s² - 16)) / 2 with s = 5 + 4x².
        let closed = |x: f64| {
            let s = 5.0 + 4.0 * x * x;
            ((s - (s * s - 16.0).sqrt()) / 2.0).sqrt()
        };
        let expect = (0..g.len()).map(|p| closed(g.point(p)[0])).fold(f64::INFINITY, f64::min);
        assert!((r.margin - expect).abs() < 1e-10, "{} vs {expect}", r.margin);
        assert!(r.is_free());
    }

    #[test]
    fn flat_line_is_rejected() {
        let g = line(65);
        let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], 0.0]);
        assert_eq!(freeness_margin(&f0).unwrap(), 0.0);
        assert!(matches!(build_frame(&f0), Err(Error::NotFree { .. })));
    }

    #[test]
    fn too_few_components_is_dimension_error() {
        let g = make_grid(2, 33, SupportRadii::new(0.5, 0.75)).unwrap();
        let f0 = VecField::from_fn(&g, 4, |x| vec![x[0], x[1], x[0] * x[0], x[1] * x[1]]);
        assert!(matches!(freeness(&f0), Err(Error::Dimension(_))));
        assert_eq!(frame_rows(2), 5);
    }

    #[test]
    fn square_frame_is_the_inverse() {
        let g = line(101);
        let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
        let frame = build_frame(&f0).unwrap();
        assert!(frame.identity_residual < 1e-10);
        for p in [0, 17, 50, 100] {
            let inv = frame.a(p).clone().try_inverse().unwrap();
            assert!((inv - frame.theta(p)).abs().max() < 1e-12);
        }
    }

    #[test]
    fn apply_e_reproduces_inner_products() {
        let g = line(201);
        let f0 = VecField::from_fn(&g, 3, |x| vec![x[0], x[0] * x[0], (x[0]).sin()]);
        let frame = build_frame(&f0).unwrap();
        let mut s = SmoothFieldSampler::new(1);
        let h = s.vector(&g, 1);
        let f = s.sym_tensor(&g);
        let e = apply_e(&frame, &h, &f).unwrap();
        for p in 0..g.len() {
            let ev = DVector::from_vec(e.at(p));
            let out = frame.a(p) * ev;
            assert!((out[0] - h.component(0)[p]).abs() < 1e-9);
            assert!((out[1] - f.components()[0][p]).abs() < 1e-9);
        }
        let zero = apply_e(&frame, &VecField::zeros(&g, 1), &SymTensorField::zeros(&g)).unwrap();
        assert_eq!(zero.max_abs(), 0.0);
    }

    #[test]
    fn circle_chart_frame() {
        let g = line(129);
        let half = 0.75 * std::f64::consts::PI;
        let f0 = VecField::from_fn(&g, 2, |x| vec![(half * x[0]).cos() / half, (half * x[0]).sin() / half]);
        let frame = build_frame(&f0).unwrap();
        assert!(frame.identity_residual < 1e-10);
        assert!(frame.freeness_margin() > 0.5);
    }

    #[test]
    fn synthetic_identity_frame_has_unit_norm() {
        let g = line(65);
        let eye = vec![DMatrix::<f64>::identity(2, 2); g.len()];
        let frame = ImmersionFrame::from_parts(g.clone(), eye.clone(), eye).unwrap();
        let est = estimate_e_norm(&frame, &HolderSpec::default(), 10).unwrap();
        assert!((est - 1.0).abs() < 1e-12, "{est}");
    }

    #[test]
    fn scaling_halves_estimate_and_probes_are_monotone() {
        let g = line(101);
        let f0 = VecField::from_fn(&g, 2, |x| vec![x[0], x[0] * x[0]]);
        let spec = HolderSpec::default();
        let e1 = estimate_e_norm(&build_frame(&f0).unwrap(), &spec, 12).unwrap();
        let e2 = estimate_e_norm(&build_frame(&f0.scale(2.0)).unwrap(), &spec, 12).unwrap();
        assert!((e1 / e2 - 2.0).abs() < 1e-9, "{e1} {e2}");
        let e_more = estimate_e_norm(&build_frame(&f0).unwrap(), &spec, 20).unwrap();
        assert!(e_more >= e1);
    }
}
