//! Dirichlet problem `Δu = f` in the unit ball with `u = 0` on the boundary.

use std::sync::Arc;

use faer::linalg::solvers::Solve;
use faer::sparse::{SparseColMat, Triplet};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Arm, Grid, MultiIndex, ScalarField, VecField};
use crate::holder::HolderSpec;

#[derive(Debug, Clone)]
pub struct DirichletSolution {
    pub u: ScalarField,
    /// Largest `|Δu - f|` over interior nodes, with the solver's own operator.
    pub residual_sup: f64,
    /// Largest `|u|` over boundary nodes.
    pub boundary_sup: f64,
}

impl DirichletSolution {
    /// Ratio `|u|_{C^{m+2,α}} / |f|_{C^{m,α}}` for this solve.
    pub fn schauder_ratio(&self, f: &ScalarField, m: usize, spec: &HolderSpec) -> Result<f64> {
        let num = spec.value(&self.u, m + 2)?;
        let den = spec.value(f, m)?;
        Ok(if den > 0.0 { num / den } else { 0.0 })
    }
}

/// Cached factorization of the unequal-arm five-point matrix on a disk grid.
pub struct Factorization {
    unknown: Vec<usize>,
    nodes: Vec<usize>,
    rows: Vec<Vec<(usize, f64)>>,
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("unknowns", &self.nodes.len()).finish()
    }
}

/// Shortley-Weller row at an interior node, in grid-node indices.
fn sw_row(grid: &Grid, p: usize) -> Vec<(usize, f64)> {
    let h2 = grid.spacing() * grid.spacing();
    let arms = grid.arms(p);
    let mut row = Vec::with_capacity(5);
    let mut diag = 0.0;
    for axis in 0..grid.dim() {
        let (plus, minus) = (arms[2 * axis], arms[2 * axis + 1]);
        let theta = |a: Arm| match a {
            Arm::Node(_) => 1.0,
            Arm::Boundary(t) => t,
        };
        let (tp, tm) = (theta(plus), theta(minus));
        diag -= 2.0 / (h2 * tp * tm);
        if let Arm::Node(q) = plus {
            row.push((q, 2.0 / (h2 * tp * (tp + tm))));
        }
        if let Arm::Node(q) = minus {
            row.push((q, 2.0 / (h2 * tm * (tp + tm))));
        }
    }
    row.push((p, diag));
    row
}

fn factorize(grid: &Grid) -> Result<Arc<Factorization>> {
    let mut unknown = vec![usize::MAX; grid.len()];
    let mut nodes = Vec::new();
    for p in 0..grid.len() {
        if grid.is_interior(p) {
            unknown[p] = nodes.len();
            nodes.push(p);
        }
    }
    let rows: Vec<Vec<(usize, f64)>> = nodes.iter().map(|&p| sw_row(grid, p)).collect();
    let mut triplets = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        for &(q, w) in row {
            triplets.push(Triplet::new(r, unknown[q], w));
        }
    }
    let n = nodes.len();
    let diag_ratio = {
        let d: Vec<f64> = rows.iter().map(|r| r.last().map_or(0.0, |x| x.1.abs())).collect();
        let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        hi / lo
    };
    let mat = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &triplets)
        .map_err(|e| Error::Solver { reason: format!("assembly failed: {e:?}"), condition: diag_ratio })?;
    let lu = mat
        .sp_lu()
        .map_err(|e| Error::Solver { reason: format!("factorization failed: {e:?}"), condition: diag_ratio })?;
    Ok(Arc::new(Factorization { unknown, nodes, rows, lu }))
}

fn factorization(grid: &Grid) -> Result<Arc<Factorization>> {
    grid.dirichlet.get_or_init(|| factorize(grid)).clone()
}

/// Exact inverse of the three-point second difference with zero end values.
fn solve_line(grid: &Grid, f: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let h2 = grid.spacing() * grid.spacing();
    // u_j = j d0 + h² Σ_{i<j} Σ_{k=1..i} f_k; d0 chosen so u_{n-1} = 0.
    let mut partial = vec![0.0; n];
    let mut inner = 0.0;
    let mut outer = 0.0;
    for j in 1..n {
        if j >= 2 {
            inner += f[j - 1];
            outer += inner;
        }
        partial[j] = h2 * outer;
    }
    let d0 = -partial[n - 1] / (n - 1) as f64;
    let mut u: Vec<f64> = (0..n).map(|j| j as f64 * d0 + partial[j]).collect();
    u[0] = 0.0;
    u[n - 1] = 0.0;
    u
}

/// Applies the operator whose inverse [`solve_dirichlet`] computes.
fn apply_operator(grid: &Grid, u: &[f64]) -> Result<Vec<f64>> {
    if grid.dim() == 1 {
        return Ok(grid.second_derivative(0, u));
    }
    let fac = factorization(grid)?;
    let mut out = vec![0.0; grid.len()];
    for (row, &p) in fac.rows.iter().zip(&fac.nodes) {
        out[p] = row.iter().map(|&(q, w)| w * u[q]).sum();
    }
    Ok(out)
}

/// Solves `Δu = f` with zero Dirichlet data; `f` is read at interior nodes only.
pub fn solve_dirichlet(f: &ScalarField) -> Result<DirichletSolution> {
    let grid = f.grid().clone();
    let rhs = f.values();
    if (0..grid.len()).any(|p| grid.is_interior(p) && !rhs[p].is_finite()) {
        return Err(Error::Precondition("right-hand side is not finite".into()));
    }
    let u = if grid.dim() == 1 {
        solve_line(&grid, rhs)
    } else {
        let fac = factorization(&grid)?;
        let n = fac.nodes.len();
        let b = faer::Mat::<f64>::from_fn(n, 1, |r, _| rhs[fac.nodes[r]]);
        let x = fac.lu.solve(&b);
        let mut u = vec![0.0; grid.len()];
        for (r, &p) in fac.nodes.iter().enumerate() {
            u[p] = x[(r, 0)];
        }
        debug_assert!(fac.unknown.len() == grid.len());
        u
    };
    let lap = apply_operator(&grid, &u)?;
    let mut residual_sup = 0.0f64;
    let mut boundary_sup = 0.0f64;
    for p in 0..grid.len() {
        if grid.is_interior(p) {
            residual_sup = residual_sup.max((lap[p] - rhs[p]).abs());
        } else {
            boundary_sup = boundary_sup.max(u[p].abs());
        }
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver { reason: "non-finite solution".into(), condition: f64::INFINITY });
    }
    Ok(DirichletSolution { u: ScalarField::from_vec(grid, u), residual_sup, boundary_sup })
}

/// Solves componentwise for every component of a vector field.
pub fn solve_dirichlet_vec(f: &VecField) -> Result<Vec<DirichletSolution>> {
    (0..f.ncomp()).into_par_iter().map(|k| solve_dirichlet(&f.scalar(k))).collect()
}

/// Fields that have a componentwise discrete Laplacian.
pub trait Laplacian: Sized {
    fn laplacian(&self) -> Self;
}

fn laplacian_values(grid: &Grid, values: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for axis in 0..grid.dim() {
        let d = grid.apply_multi_index(MultiIndex::axis(axis, 2), values);
        for (o, x) in out.iter_mut().zip(d) {
            *o += x;
        }
    }
    out
}

impl Laplacian for ScalarField {
    fn laplacian(&self) -> Self {
        ScalarField::from_vec(self.grid().clone(), laplacian_values(self.grid(), self.values()))
    }
}

impl Laplacian for VecField {
    fn laplacian(&self) -> Self {
        let grid = self.grid().clone();
        self.map_components(|c| laplacian_values(&grid, c))
    }
}

/// Sum of the second-difference stencils along each axis.
pub fn laplacian<F: Laplacian>(field: &F) -> F {
    field.laplacian()
}

/// Empirical constants of the elliptic estimate hierarchy over a corpus of right-hand sides.
#[derive(Debug, Clone, Serialize)]
pub struct EllipticWitness {
    pub m: usize,
    pub samples: usize,
    /// Largest `|Δ⁻¹f|_{C^{m+2,α}} / |f|_{C^{m,α}}`.
    pub max_ratio: f64,
}

pub fn elliptic_witness(corpus: &[ScalarField], m: usize, spec: &HolderSpec) -> Result<EllipticWitness> {
    let ratios = corpus
        .iter()
        .map(|f| solve_dirichlet(f)?.schauder_ratio(f, m, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(EllipticWitness {
        m,
        samples: corpus.len(),
        max_ratio: ratios.into_iter().fold(0.0, f64::max),
    })
}

/// Leading constants of the estimate for right-hand sides supported in a
/// smaller ball, measured as `|Δ⁻¹f|_{C^{m+2,α}} / |f|_{C^{m,α}}` for `m = 1, 2`.
#[derive(Debug, Clone, Serialize)]
pub struct SupportWitness {
    pub radius: f64,
    pub constants: Vec<(usize, f64)>,
    /// Largest over smallest constant.
    pub spread: f64,
}

pub fn support_witness(corpus: &[ScalarField], radius: f64, spec: &HolderSpec) -> Result<SupportWitness> {
    for f in corpus {
        let grid = f.grid();
        if (0..grid.len()).any(|p| grid.radius(p) >= radius && f.values()[p] != 0.0) {
            return Err(Error::Precondition(format!("right-hand side not supported in B_{radius}")));
        }
    }
    let constants: Vec<(usize, f64)> = [1usize, 2]
        .into_iter()
        .map(|m| Ok((m, elliptic_witness(corpus, m, spec)?.max_ratio)))
        .collect::<Result<_>>()?;
    let hi = constants.iter().map(|c| c.1).fold(0.0, f64::max);
    let lo = constants.iter().map(|c| c.1).fold(f64::INFINITY, f64::min);
    Ok(SupportWitness { radius, constants, spread: hi / lo })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, SupportRadii};
    use std::f64::consts::PI;

    fn radii() -> SupportRadii {
        SupportRadii::new(0.5, 0.75)
    }

    #[test]
    fn sine_eigenfunction_line() {
        let g = make_grid(1, 201, radii()).unwrap();
        let f = ScalarField::from_fn(&g, |x| -PI * PI * (PI * x[0]).sin());
        let sol = solve_dirichlet(&f).unwrap();
        let err = (0..g.len())
            .map(|p| (sol.u.values()[p] - (PI * g.point(p)[0]).sin()).abs())
            .fold(0.0, f64::max);
        let h = g.spacing();
        assert!(err < 2.0 * h * h, "err {err}");
        assert!(sol.residual_sup < 1e-9, "{}", sol.residual_sup);
        assert_eq!(sol.boundary_sup, 0.0);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        for dim in [1, 2] {
            let g = make_grid(dim, 33, radii()).unwrap();
            let sol = solve_dirichlet(&ScalarField::zeros(&g)).unwrap();
            assert_eq!(sol.u.max_abs(), 0.0);
        }
    }

    #[test]
    fn disk_manufactured_solution() {
        let err = |n| {
            let g = make_grid(2, n, radii()).unwrap();
            let exact = |x: &[f64]| (1.0 - x[0] * x[0] - x[1] * x[1]) * (x[0] * x[0] - x[1] * x[1]);
            let f = ScalarField::from_fn(&g, |x| -12.0 * (x[0] * x[0] - x[1] * x[1]));
            let sol = solve_dirichlet(&f).unwrap();
            assert!(sol.residual_sup < 1e-10, "{}", sol.residual_sup);
            assert!(sol.boundary_sup <= 1e-12);
            (0..g.len()).map(|p| (sol.u.values()[p] - exact(g.point(p))).abs()).fold(0.0, f64::max)
        };
        // The quartic has u_xxxx + u_yyyy = 0, so only the boundary arms contribute
        // and the observed order exceeds two.
        let ratio = err(33) / err(65);
        assert!(ratio > 3.6, "ratio {ratio}");
    }

    #[test]
    fn laplacian_of_quadratic_is_exact() {
        let g = make_grid(2, 33, radii()).unwrap();
        let u = ScalarField::from_fn(&g, |x| x[0] * x[0] + x[1] * x[1]);
        let l = laplacian(&u);
        for p in 0..g.len() {
            if g.is_interior(p) {
                assert!((l.values()[p] - 4.0).abs() < 1e-9);
            }
        }
        assert!(laplacian(&ScalarField::constant(&g, 2.5)).max_abs() < 1e-9);
    }

    #[test]
    fn laplacian_inverts_line_solve() {
        let g = make_grid(1, 101, radii()).unwrap();
        let f = ScalarField::from_fn(&g, |x| (2.0 * x[0]).cos() + x[0]);
        let sol = solve_dirichlet(&f).unwrap();
        let l = laplacian(&sol.u);
        for p in 1..g.len() - 1 {
            assert!((l.values()[p] - f.values()[p]).abs() < 1e-9);
        }
    }
}
