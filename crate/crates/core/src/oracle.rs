//! Fourth-order finite differences, kept separate from the solver stencils so
//! residuals computed here do not share truncation error with the solver.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{ensure_same, sym_len, sym_pair, Grid, SymTensorField, VecField};

/// Five-point first-derivative weights, indexed by the node's offset from the
/// start of its stencil window.
const WINDOW: [[f64; 5]; 3] = [
    [-25.0, 48.0, -36.0, 16.0, -3.0],
    [-3.0, -10.0, 18.0, -6.0, 1.0],
    [1.0, -8.0, 0.0, 8.0, -1.0],
];

fn lattice_step(grid: &Grid, p: usize, axis: usize, k: i64) -> Option<usize> {
    let [i, j] = grid.lattice_index(p);
    let (mut i, mut j) = (i as i64, j as i64);
    if axis == 0 {
        i += k;
    } else {
        j += k;
    }
    if i < 0 || j < 0 {
        return None;
    }
    grid.node_at(i as usize, j as usize)
}

fn run(grid: &Grid, p: usize, axis: usize, sign: i64) -> i64 {
    let mut k = 0;
    while k < 4 && lattice_step(grid, p, axis, sign * (k + 1)).is_some() {
        k += 1;
    }
    k
}

/// Fourth-order `∂_axis` at node `p`, or `None` when the lattice line is too short.
pub fn d1_fourth(grid: &Grid, values: &[f64], p: usize, axis: usize) -> Option<f64> {
    let h = grid.spacing();
    let fwd = run(grid, p, axis, 1);
    let bwd = run(grid, p, axis, -1);
    let at = |k: i64| values[lattice_step(grid, p, axis, k).expect("stencil node")];
    let (weights, start, sign) = if fwd >= 2 && bwd >= 2 {
        (&WINDOW[2], -2, 1.0)
    } else if bwd == 1 && fwd >= 3 {
        (&WINDOW[1], -1, 1.0)
    } else if bwd == 0 && fwd >= 4 {
        (&WINDOW[0], 0, 1.0)
    } else if fwd == 1 && bwd >= 3 {
        (&WINDOW[1], -1, -1.0)
    } else if fwd == 0 && bwd >= 4 {
        (&WINDOW[0], 0, -1.0)
    } else {
        return None;
    };
    if sign > 0.0 {
        Some(weights.iter().enumerate().map(|(k, w)| w * at(start + k as i64)).sum::<f64>() / (12.0 * h))
    } else {
        // Mirrored window: offsets run backwards from the node.
        Some(-weights.iter().enumerate().map(|(k, w)| w * at(-(start + k as i64))).sum::<f64>() / (12.0 * h))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsometryResidual {
    /// `max |∂_i F·∂_j F - ∂_i F0·∂_j F0 - f_ij|` over nodes and `i <= j`.
    pub sup: f64,
    pub worst_node: usize,
    /// Nodes where no fourth-order stencil fits.
    pub skipped_nodes: usize,
}

/// Isometry defect of `F = F0 + u` against the prescribed change `f`.
pub fn isometry_residual(f0: &VecField, u: &VecField, f: &SymTensorField) -> Result<IsometryResidual> {
    ensure_same(f0.grid(), u.grid())?;
    ensure_same(f0.grid(), f.grid())?;
    if f0.ncomp() != u.ncomp() {
        return Err(Error::Dimension("F0 and u differ in ambient dimension".into()));
    }
    defect(&f0.add(u)?, Some(f0), f)
}

/// `max |∂_iF·∂_jF - g_ij|`: how far `F` is from realizing `g`.
pub fn pullback_defect(f: &VecField, g: &SymTensorField) -> Result<IsometryResidual> {
    ensure_same(f.grid(), g.grid())?;
    defect(f, None, g)
}

fn defect(full: &VecField, base: Option<&VecField>, target: &SymTensorField) -> Result<IsometryResidual> {
    let grid = full.grid();
    let dim = grid.dim();
    let q = full.ncomp();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let jet = |field: &VecField, p: usize| -> Option<Vec<Vec<f64>>> {
        (0..dim)
            .map(|axis| (0..q).map(|c| d1_fourth(grid, field.component(c), p, axis)).collect())
            .collect()
    };
    let mut sup = 0.0f64;
    let mut worst_node = 0;
    let mut skipped_nodes = 0;
    for p in 0..grid.len() {
        let Some(df) = jet(full, p) else {
            skipped_nodes += 1;
            continue;
        };
        let df0 = match base {
            Some(b) => match jet(b, p) {
                Some(d) => Some(d),
                None => {
                    skipped_nodes += 1;
                    continue;
                }
            },
            None => None,
        };
        for k in 0..sym_len(dim) {
            let (i, j) = sym_pair(dim, k);
            let reference = df0.as_ref().map_or(0.0, |d| dot(&d[i], &d[j]));
            let r = (dot(&df[i], &df[j]) - reference - target.components()[k][p]).abs();
            if r > sup {
                sup = r;
                worst_node = p;
            }
        }
    }
    Ok(IsometryResidual { sup, worst_node, skipped_nodes })
}

/// Fourth-order periodic first derivative on a uniform closed-curve mesh.
pub fn periodic_d1(values: &[f64], h: f64) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|k| {
            let at = |d: isize| values[((k as isize + d).rem_euclid(n as isize)) as usize];
            (at(-2) - 8.0 * at(-1) + 8.0 * at(1) - at(2)) / (12.0 * h)
        })
        .collect()
}
