//! Quadratic operators `N`, `u1`, `u2`, `Q`, `M`, `P` built from a cutoff and a field `v`.

use rayon::prelude::*;

use crate::error::Result;
use crate::holder::HolderSpec;
use crate::grid::{ensure_same, sym_index, sym_len, MultiIndex, Differentiate, ScalarField, SymTensorField, VecField};
use crate::poisson::{laplacian, solve_dirichlet};
use crate::profile::Cutoff;

fn d_axis(field: &ScalarField, axis: usize) -> ScalarField {
    field.derivative(MultiIndex::axis(axis, 1)).expect("first derivative")
}

fn pointwise(grid: &std::sync::Arc<crate::grid::Grid>, len: usize, f: impl Fn(usize) -> f64) -> ScalarField {
    ScalarField::from_vec(grid.clone(), (0..len).map(f).collect())
}

/// All intermediate quantities of the operator chain at one `v`.
#[derive(Debug, Clone)]
pub struct OperatorEval {
    /// `N_i`, one per axis.
    pub n: Vec<ScalarField>,
    /// `Δ⁻¹ N_i`, one per axis.
    pub w: Vec<ScalarField>,
    /// Largest Poisson residual over the `n` solves.
    pub poisson_residual: f64,
    pub u1: SymTensorField,
    pub u2: SymTensorField,
    /// `Q = u2 - u1`.
    pub q: SymTensorField,
    /// `P_i = a Δ⁻¹ N_i`.
    pub p: VecField,
}

impl OperatorEval {
    pub fn new(cutoff: &Cutoff, v: &VecField) -> Result<Self> {
        let a = &cutoff.a;
        ensure_same(a.grid(), v.grid())?;
        let grid = v.grid().clone();
        let dim = grid.dim();
        let len = grid.len();
        let av = a.values();
        let da = &cutoff.grad;
        let dv: Vec<VecField> = (0..dim)
            .map(|i| v.derivative(MultiIndex::axis(i, 1)))
            .collect::<Result<_>>()?;
        let lap_v = laplacian(v);
        let lap_dot_v = lap_v.dot(v)?;
        let vv = v.dot(v)?;

        let n: Vec<ScalarField> = (0..dim)
            .map(|i| {
                let lap_dot_dv = lap_v.dot(&dv[i])?;
                Ok(pointwise(&grid, len, |p| {
                    2.0 * da[i].values()[p] * lap_dot_v.values()[p] + av[p] * lap_dot_dv.values()[p]
                }))
            })
            .collect::<Result<_>>()?;

        let sols = n.par_iter().map(solve_dirichlet).collect::<Result<Vec<_>>>()?;
        let poisson_residual = sols.iter().map(|s| s.residual_sup).fold(0.0, f64::max);
        let w: Vec<ScalarField> = sols.into_iter().map(|s| s.u).collect();
        let dw: Vec<Vec<ScalarField>> = (0..dim).map(|i| w.iter().map(|wj| d_axis(wj, i)).collect()).collect();

        let ns = sym_len(dim);
        let mut u1 = vec![Vec::new(); ns];
        let mut u2 = vec![Vec::new(); ns];
        for i in 0..dim {
            for j in i..dim {
                let k = sym_index(dim, i, j);
                let (dai, daj) = (da[i].values(), da[j].values());
                u1[k] = (0..len)
                    .map(|p| {
                        av[p] * dw[i][j].values()[p]
                            + av[p] * dw[j][i].values()[p]
                            + 3.0 * dai[p] * w[j].values()[p]
                            + 3.0 * daj[p] * w[i].values()[p]
                    })
                    .collect();
                let dvj_v = dv[j].dot(v)?;
                let dvi_v = dv[i].dot(v)?;
                let dvi_dvj = dv[i].dot(&dv[j])?;
                u2[k] = (0..len)
                    .map(|p| {
                        4.0 * dai[p] * daj[p] * vv.values()[p]
                            + 2.0 * av[p] * dai[p] * dvj_v.values()[p]
                            + 2.0 * av[p] * daj[p] * dvi_v.values()[p]
                            + av[p] * av[p] * dvi_dvj.values()[p]
                    })
                    .collect();
            }
        }
        let u1 = SymTensorField::from_comps(grid.clone(), u1);
        let u2 = SymTensorField::from_comps(grid.clone(), u2);
        let q = u2.sub(&u1)?;
        let p = VecField::from_comps(
            grid.clone(),
            w.iter().map(|wi| wi.values().iter().zip(av).map(|(x, s)| x * s).collect()).collect(),
        );
        Ok(Self { n, w, poisson_residual, u1, u2, q, p })
    }

    /// `M_ij = Δ Q_ij` for every `i <= j`.
    pub fn m(&self) -> SymTensorField {
        let grid = self.q.grid().clone();
        let comps = self
            .q
            .components()
            .iter()
            .map(|c| laplacian(&ScalarField::from_vec(grid.clone(), c.clone())).into_values())
            .collect();
        SymTensorField::from_comps(grid, comps)
    }
}

/// `N_i = 2 ∂_i a (Δv·v) + a (Δv·∂_i v)`.
pub fn op_n(cutoff: &Cutoff, v: &VecField, i: usize) -> Result<ScalarField> {
    ensure_same(cutoff.a.grid(), v.grid())?;
    let grid = v.grid().clone();
    let da = &cutoff.grad[i];
    let lap_v = laplacian(v);
    let a_term = lap_v.dot(&v.derivative(MultiIndex::axis(i, 1))?)?;
    let b_term = lap_v.dot(v)?;
    let av = cutoff.a.values();
    Ok(pointwise(&grid, grid.len(), |p| 2.0 * da.values()[p] * b_term.values()[p] + av[p] * a_term.values()[p]))
}

pub fn op_u1(cutoff: &Cutoff, v: &VecField, i: usize, j: usize) -> Result<ScalarField> {
    let eval = OperatorEval::new(cutoff, v)?;
    Ok(component(&eval.u1, i, j))
}

pub fn op_u2(cutoff: &Cutoff, v: &VecField, i: usize, j: usize) -> Result<ScalarField> {
    let eval = OperatorEval::new(cutoff, v)?;
    Ok(component(&eval.u2, i, j))
}

/// `Q_ij = u2_ij - u1_ij`, which solves `ΔQ_ij = M_ij` with zero boundary values.
pub fn op_q(cutoff: &Cutoff, v: &VecField) -> Result<SymTensorField> {
    Ok(OperatorEval::new(cutoff, v)?.q)
}

pub fn op_m(cutoff: &Cutoff, v: &VecField, i: usize, j: usize) -> Result<ScalarField> {
    let q = op_q(cutoff, v)?;
    Ok(laplacian(&component(&q, i, j)))
}

/// `P_i = a Δ⁻¹ N_i`, one component per axis.
pub fn op_p(cutoff: &Cutoff, v: &VecField) -> Result<VecField> {
    Ok(OperatorEval::new(cutoff, v)?.p)
}

/// Worst ratios of the quadratic continuity estimates over a set of field pairs.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ContinuityWitness {
    pub pairs: usize,
    /// Largest `|N(v1) - N(v2)|_{0,α} / ((|v1| + |v2|) |v1 - v2|)`, norms of `v` in `C^{2,α}`.
    pub n: f64,
    /// Same for `M = ΔQ`.
    pub m: f64,
    /// Same for `|P(v1) - P(v2)|_{2,α} + |Q(v1) - Q(v2)|_{2,α}`.
    pub pq: f64,
}

pub fn continuity_witness(cutoff: &Cutoff, pairs: &[(VecField, VecField)], spec: &HolderSpec) -> Result<ContinuityWitness> {
    let mut out = ContinuityWitness { pairs: pairs.len(), n: 0.0, m: 0.0, pq: 0.0 };
    for (v1, v2) in pairs {
        let e1 = OperatorEval::new(cutoff, v1)?;
        let e2 = OperatorEval::new(cutoff, v2)?;
        let scale = (spec.value(v1, 2)? + spec.value(v2, 2)?) * spec.value(&v1.sub(v2)?, 2)?;
        if scale == 0.0 {
            continue;
        }
        let dn = e1
            .n
            .iter()
            .zip(&e2.n)
            .map(|(a, b)| spec.value(&a.sub(b)?, 0))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        let dm = spec.value(&e1.m().sub(&e2.m())?, 0)?;
        let dpq = spec.value(&e1.p.sub(&e2.p)?, 2)? + spec.value(&e1.q.sub(&e2.q)?, 2)?;
        out.n = out.n.max(dn / scale);
        out.m = out.m.max(dm / scale);
        out.pq = out.pq.max(dpq / scale);
    }
    Ok(out)
}

pub(crate) fn component(t: &SymTensorField, i: usize, j: usize) -> ScalarField {
    ScalarField::from_vec(t.grid().clone(), t.get(i, j).to_vec())
}
