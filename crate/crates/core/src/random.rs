//! Seeded random smooth fields for property checks and operator-norm probes.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::grid::{Grid, ScalarField, SymTensorField, VecField};
use crate::profile::plateau;

/// Draws random low-order polynomial plus trigonometric fields.
pub struct SmoothFieldSampler {
    rng: ChaCha8Rng,
}

impl SmoothFieldSampler {
    pub fn new(seed: u64) -> Self {
        Self { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn coeff(&mut self) -> f64 {
        self.rng.random_range(-1.0..1.0)
    }

    pub fn scalar(&mut self, grid: &Arc<Grid>) -> ScalarField {
        let poly: [f64; 6] = std::array::from_fn(|_| self.coeff());
        let waves: Vec<([f64; 2], f64, f64)> = (0..3)
            .map(|_| {
                let w = [3.0 * self.coeff(), 3.0 * self.coeff()];
                (w, std::f64::consts::PI * self.coeff(), 0.5 * self.coeff())
            })
            .collect();
        ScalarField::from_fn(grid, |x| {
            let (x0, y0) = (x[0], x.get(1).copied().unwrap_or(0.0));
            let mut s = poly[0] + poly[1] * x0 + poly[2] * y0
                + 0.5 * (poly[3] * x0 * x0 + poly[4] * x0 * y0 + poly[5] * y0 * y0);
            for (w, phase, amp) in &waves {
                s += amp * (w[0] * x0 + w[1] * y0 + phase).sin();
            }
            s
        })
    }

    /// Random affine function; products of two stay within stencil exactness.
    pub fn affine(&mut self, grid: &Arc<Grid>) -> ScalarField {
        let c: [f64; 3] = std::array::from_fn(|_| self.coeff());
        ScalarField::from_fn(grid, |x| c[0] + c[1] * x[0] + c[2] * x.get(1).copied().unwrap_or(0.0))
    }

    /// Random smooth field vanishing outside `|x| >= radius`.
    pub fn compact(&mut self, grid: &Arc<Grid>, radius: f64) -> ScalarField {
        let base = self.scalar(grid);
        let values = base
            .values()
            .iter()
            .enumerate()
            .map(|(p, v)| v * plateau(grid.radius(p), 0.5 * radius, radius))
            .collect();
        ScalarField::from_vec(grid.clone(), values)
    }

    pub fn vector(&mut self, grid: &Arc<Grid>, ncomp: usize) -> VecField {
        let comps: Vec<ScalarField> = (0..ncomp).map(|_| self.scalar(grid)).collect();
        VecField::from_scalars(&comps).expect("components share a grid")
    }

    pub fn compact_vector(&mut self, grid: &Arc<Grid>, ncomp: usize, radius: f64) -> VecField {
        let comps: Vec<ScalarField> = (0..ncomp).map(|_| self.compact(grid, radius)).collect();
        VecField::from_scalars(&comps).expect("components share a grid")
    }

    pub fn sym_tensor(&mut self, grid: &Arc<Grid>) -> SymTensorField {
        let n = crate::grid::sym_len(grid.dim());
        let comps = (0..n).map(|_| self.scalar(grid).into_values()).collect();
        SymTensorField::from_comps(grid.clone(), comps)
    }

    pub fn compact_sym_tensor(&mut self, grid: &Arc<Grid>, radius: f64) -> SymTensorField {
        let n = crate::grid::sym_len(grid.dim());
        let comps = (0..n).map(|_| self.compact(grid, radius).into_values()).collect();
        SymTensorField::from_comps(grid.clone(), comps)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }
}
