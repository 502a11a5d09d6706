//! Discrete Hölder norms and numerical checks of the product/embedding inequalities.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{Grid, MultiIndex, ScalarField, SymTensorField, VecField};

/// Default Hölder exponent.
pub const DEFAULT_ALPHA: f64 = 0.5;
/// Default seed for sampled pair sets on large grids.
pub const DEFAULT_PAIR_SEED: u64 = 0x5eed_0f_u64;
/// Number of sampled pairs used when the full pair set is too large.
pub const SAMPLED_PAIRS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderNorm {
    pub m: usize,
    pub alpha: f64,
    pub value: f64,
    /// Node pairs examined per Hölder quotient.
    pub seminorm_pairs_used: usize,
}

/// Hölder exponent plus the seed for deterministic pair subsampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HolderSpec {
    pub alpha: f64,
    pub pair_seed: u64,
}

impl Default for HolderSpec {
    fn default() -> Self {
        Self { alpha: DEFAULT_ALPHA, pair_seed: DEFAULT_PAIR_SEED }
    }
}

impl HolderSpec {
    pub fn new(alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self { alpha, ..Self::default() })
    }

    pub fn norm<F: Components>(&self, field: &F, m: usize) -> Result<HolderNorm> {
        holder_norm_seeded(field, m, self.alpha, self.pair_seed)
    }

    /// Shorthand for the value of [`HolderSpec::norm`].
    pub fn value<F: Components>(&self, field: &F, m: usize) -> Result<f64> {
        Ok(self.norm(field, m)?.value)
    }
}

/// Fields whose norm is the sum of per-component scalar norms.
pub trait Components {
    fn grid(&self) -> &Arc<Grid>;
    fn slices(&self) -> Vec<&[f64]>;
}

impl Components for ScalarField {
    fn grid(&self) -> &Arc<Grid> {
        ScalarField::grid(self)
    }
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.values()]
    }
}

impl Components for VecField {
    fn grid(&self) -> &Arc<Grid> {
        VecField::grid(self)
    }
    fn slices(&self) -> Vec<&[f64]> {
        self.components().iter().map(|c| c.as_slice()).collect()
    }
}

impl Components for SymTensorField {
    fn grid(&self) -> &Arc<Grid> {
        SymTensorField::grid(self)
    }
    fn slices(&self) -> Vec<&[f64]> {
        self.components().iter().map(|c| c.as_slice()).collect()
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::config("alpha", format!("must lie in (0, 1), got {alpha}")))
    }
}

enum PairSet {
    All,
    Sampled(Arc<Vec<(u32, u32)>>),
}

impl PairSet {
    fn for_grid(grid: &Grid, seed: u64) -> PairSet {
        let m = grid.len();
        let total = m * (m - 1) / 2;
        let exact = match grid.dim() {
            1 => grid.resolution() <= 401,
            _ => grid.resolution() <= 65,
        };
        if exact || total <= SAMPLED_PAIRS {
            PairSet::All
        } else {
            PairSet::Sampled(grid.sampled_pairs(seed, SAMPLED_PAIRS))
        }
    }

    fn count(&self, grid: &Grid) -> usize {
        match self {
            PairSet::All => grid.len() * (grid.len() - 1) / 2,
            PairSet::Sampled(p) => p.len(),
        }
    }
}

/// Table of `|x - y|^{-alpha}` indexed by lattice offsets.
struct InverseDistance {
    n: usize,
    table: Vec<f64>,
}

impl InverseDistance {
    fn new(grid: &Grid, alpha: f64) -> Self {
        let n = grid.resolution();
        let h = grid.spacing();
        let rows = if grid.dim() == 1 { 1 } else { n };
        let mut table = vec![0.0; n * rows];
        for dj in 0..rows {
            for di in 0..n {
                let d = h * ((di * di + dj * dj) as f64).sqrt();
                table[dj * n + di] = if d > 0.0 { d.powf(-alpha) } else { 0.0 };
            }
        }
        Self { n, table }
    }

    #[inline]
    fn weight(&self, a: [usize; 2], b: [usize; 2]) -> f64 {
        self.table[a[1].abs_diff(b[1]) * self.n + a[0].abs_diff(b[0])]
    }
}

fn quotient_max(grid: &Grid, values: &[f64], pairs: &PairSet, w: &InverseDistance) -> f64 {
    match pairs {
        PairSet::All => (0..values.len())
            .into_par_iter()
            .map(|p| {
                let lp = grid.lattice_index(p);
                let vp = values[p];
                let mut best = 0.0f64;
                for q in p + 1..values.len() {
                    let d = (vp - values[q]).abs() * w.weight(lp, grid.lattice_index(q));
                    best = best.max(d);
                }
                best
            })
            .reduce(|| 0.0, f64::max),
        PairSet::Sampled(list) => list
            .par_chunks(4096)
            .map(|chunk| {
                chunk.iter().fold(0.0f64, |best, &(p, q)| {
                    let (p, q) = (p as usize, q as usize);
                    let d = (values[p] - values[q]).abs()
                        * w.weight(grid.lattice_index(p), grid.lattice_index(q));
                    best.max(d)
                })
            })
            .reduce(|| 0.0, f64::max),
    }
}

fn c0_alpha(grid: &Grid, values: &[f64], pairs: &PairSet, w: &InverseDistance) -> f64 {
    let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    sup + quotient_max(grid, values, pairs, w)
}

/// `|u|_{C^{m,alpha}}` with the default pair seed.
pub fn holder_norm<F: Components>(field: &F, m: usize, alpha: f64) -> Result<HolderNorm> {
    holder_norm_seeded(field, m, alpha, DEFAULT_PAIR_SEED)
}

/// `|u|_{C^{0,alpha}} + sum_{|s| = m} |d^s u|_{C^{0,alpha}}`, summed over components.
pub fn holder_norm_seeded<F: Components>(
    field: &F,
    m: usize,
    alpha: f64,
    seed: u64,
) -> Result<HolderNorm> {
    check_alpha(alpha)?;
    if m > 4 {
        return Err(Error::UnsupportedOrder { order: m });
    }
    let grid = field.grid().clone();
    let pairs = PairSet::for_grid(&grid, seed);
    let w = InverseDistance::new(&grid, alpha);
    let indices = if m == 0 { Vec::new() } else { MultiIndex::all_of_order(grid.dim(), m) };
    let mut value = 0.0;
    for comp in field.slices() {
        value += c0_alpha(&grid, comp, &pairs, &w);
        for &s in &indices {
            let d = grid.apply_multi_index(s, comp);
            value += c0_alpha(&grid, &d, &pairs, &w);
        }
    }
    Ok(HolderNorm { m, alpha, value, seminorm_pairs_used: pairs.count(&grid) })
}

/// True iff every entry is at most `a0 + 2C` (plus `1e-12`).
pub fn monitor_recurrence(a0: f64, c: f64, sequence: &[f64]) -> bool {
    let bound = a0 + 2.0 * c + 1e-12;
    sequence.iter().all(|&a| a <= bound)
}

/// Worst-case ratios from [`check_inequalities`].
#[derive(Debug, Clone, Serialize)]
pub struct InequalityReport {
    pub samples: usize,
    pub alpha: f64,
    /// Largest `|uv|_{0,a} / (|u|_{0,a} |v|_{0,a})`.
    pub product_ratio_max: f64,
    pub product_violations: usize,
    /// Largest Leibniz rule deviation on polynomial fields.
    pub leibniz_error_max: f64,
    /// Witness constants `C(m, alpha)` for the product bound at `m = 1, 2`.
    pub product_witness: Vec<(usize, f64)>,
    /// Witness constants for the cutoff-times-vector bound at `m = 1, 2`.
    pub scaled_witness: Vec<(usize, f64)>,
    /// Witness constants for the dot-product bound at `m = 1, 2`.
    pub dot_witness: Vec<(usize, f64)>,
    /// Witness constants for `|u|_{k,b} <= C |u|_{m,a}`, as `(k, m, C)`.
    pub embedding_witness: Vec<(usize, usize, f64)>,
}

impl InequalityReport {
    pub fn passed(&self) -> bool {
        self.product_violations == 0
            && self.leibniz_error_max <= 1e-10
            && self
                .product_witness
                .iter()
                .chain(&self.scaled_witness)
                .chain(&self.dot_witness)
                .all(|(_, c)| c.is_finite())
            && self.embedding_witness.iter().all(|(_, _, c)| c.is_finite())
    }
}

/// Samples random smooth field pairs on a 1-D grid and measures the product,
/// Leibniz, embedding and dot-product inequalities.
pub fn check_inequalities(samples: usize) -> Result<InequalityReport> {
    check_inequalities_with(samples, DEFAULT_ALPHA, 0x1ee7)
}

pub fn check_inequalities_with(samples: usize, alpha: f64, seed: u64) -> Result<InequalityReport> {
    use crate::random::SmoothFieldSampler;
    check_alpha(alpha)?;
    if samples == 0 {
        return Err(Error::config("samples", "must be at least 1"));
    }
    let grid = crate::grid::make_grid(1, 129, crate::grid::SupportRadii::default())?;
    let mut sampler = SmoothFieldSampler::new(seed);
    let spec = HolderSpec { alpha, pair_seed: DEFAULT_PAIR_SEED };

    let mut product_ratio_max = 0.0f64;
    let mut product_violations = 0;
    let mut product_witness = [0.0f64; 2];
    let mut scaled_witness = [0.0f64; 2];
    let mut dot_witness = [0.0f64; 2];
    let mut embed = [(0usize, 1usize, 0.0f64), (1, 2, 0.0), (2, 3, 0.0)];

    for _ in 0..samples {
        let u = sampler.scalar(&grid);
        let v = sampler.scalar(&grid);
        let uv = u.mul(&v)?;
        let lhs = spec.value(&uv, 0)?;
        let rhs = spec.value(&u, 0)? * spec.value(&v, 0)?;
        let ratio = lhs / rhs;
        product_ratio_max = product_ratio_max.max(ratio);
        if lhs > rhs * (1.0 + 1e-12) {
            product_violations += 1;
        }
        for (slot, m) in [1usize, 2].into_iter().enumerate() {
            let c = spec.value(&uv, m)? / (spec.value(&u, m)? * spec.value(&v, m)?);
            product_witness[slot] = product_witness[slot].max(c);
        }

        let a = sampler.scalar(&grid);
        let w = sampler.vector(&grid, 2);
        let aw = w.scale_by(&a)?;
        for (slot, m) in [1usize, 2].into_iter().enumerate() {
            let excess = spec.value(&aw, m)?
                - spec.value(&a, 0)? * spec.value(&w, m)?
                - spec.value(&a, m)? * spec.value(&w, 0)?;
            let c = excess.max(0.0) / (spec.value(&a, m - 1)? * spec.value(&w, m - 1)?);
            scaled_witness[slot] = scaled_witness[slot].max(c);
        }

        let z = sampler.vector(&grid, 2);
        let wz = w.dot(&z)?;
        for (slot, m) in [1usize, 2].into_iter().enumerate() {
            let c = spec.value(&wz, m)? / (spec.value(&w, m)? * spec.value(&z, m)?);
            dot_witness[slot] = dot_witness[slot].max(c);
        }

        for e in embed.iter_mut() {
            let lower = holder_norm(&u, e.0, alpha * 0.5)?.value;
            let upper = spec.value(&u, e.1)?;
            e.2 = e.2.max(lower / upper);
        }
    }

    let leibniz_error_max = leibniz_check(&mut sampler, samples.min(20))?;

    Ok(InequalityReport {
        samples,
        alpha,
        product_ratio_max,
        product_violations,
        leibniz_error_max,
        product_witness: vec![(1, product_witness[0]), (2, product_witness[1])],
        scaled_witness: vec![(1, scaled_witness[0]), (2, scaled_witness[1])],
        dot_witness: vec![(1, dot_witness[0]), (2, dot_witness[1])],
        embedding_witness: embed.to_vec(),
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Largest deviation between `d^s(uv)` and its binomial expansion, over
/// multi-indices `|s| <= 2` on 1-D and 2-D grids. Fields are affine so the
/// product is quadratic and every stencil reproduces it exactly.
pub fn leibniz_check(sampler: &mut crate::random::SmoothFieldSampler, samples: usize) -> Result<f64> {
    let radii = crate::grid::SupportRadii::default();
    let grids = [crate::grid::make_grid(1, 65, radii)?, crate::grid::make_grid(2, 33, radii)?];
    let mut worst = 0.0f64;
    for grid in &grids {
        for _ in 0..samples.max(1) {
            let u = sampler.affine(grid);
            let v = sampler.affine(grid);
            let uv = u.mul(&v)?;
            for order in 0..=2 {
                for s in MultiIndex::all_of_order(grid.dim(), order) {
                    let direct = grid.apply_multi_index(s, uv.values());
                    let mut expanded = vec![0.0; grid.len()];
                    for g0 in 0..=s.get(0) {
                        for g1 in 0..=s.get(1) {
                            let gamma = MultiIndex::new(&[g0, g1]);
                            let rest = s.sub(&gamma);
                            let c = binomial(s.get(0), g0) * binomial(s.get(1), g1);
                            let du = grid.apply_multi_index(gamma, u.values());
                            let dv = grid.apply_multi_index(rest, v.values());
                            for k in 0..grid.len() {
                                expanded[k] += c * du[k] * dv[k];
                            }
                        }
                    }
                    for k in 0..grid.len() {
                        worst = worst.max((direct[k] - expanded[k]).abs());
                    }
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{make_grid, SupportRadii};

    fn line(n: usize) -> Arc<Grid> {
        make_grid(1, n, SupportRadii::new(0.5, 0.75)).unwrap()
    }

    #[test]
    fn constant_field_norm_is_its_magnitude() {
        let g = line(65);
        let c = ScalarField::constant(&g, -3.0);
        for m in 0..=3 {
            let n = holder_norm(&c, m, 0.5).unwrap();
            assert!((n.value - 3.0).abs() < 1e-12, "m={m} {}", n.value);
        }
        assert_eq!(holder_norm(&ScalarField::zeros(&g), 2, 0.5).unwrap().value, 0.0);
    }

    #[test]
    fn identity_field_brute_force() {
        let g = line(201);
        let u = ScalarField::from_fn(&g, |x| x[0]);
        let n = holder_norm(&u, 0, 0.5).unwrap();
        // sup 1 plus |1 - (-1)| / 2^0.5
        assert!((n.value - (1.0 + 2f64.sqrt())).abs() < 1e-12, "{}", n.value);
        assert_eq!(n.seminorm_pairs_used, 201 * 200 / 2);
    }

    #[test]
    fn alpha_out_of_range_is_config_error() {
        let g = line(33);
        let u = ScalarField::zeros(&g);
        assert!(matches!(holder_norm(&u, 0, 1.0), Err(Error::Config { field: "alpha", .. })));
        assert!(matches!(holder_norm(&u, 0, 0.0), Err(Error::Config { field: "alpha", .. })));
    }

    #[test]
    fn product_inequality_for_identity_is_strict() {
        let g = line(101);
        let u = ScalarField::from_fn(&g, |x| x[0]);
        let uu = u.mul(&u).unwrap();
        let lhs = holder_norm(&uu, 0, 0.5).unwrap().value;
        let rhs = holder_norm(&u, 0, 0.5).unwrap().value.powi(2);
        assert!(lhs < rhs);
    }

    #[test]
    fn recurrence_monitor() {
        assert!(monitor_recurrence(0.0, 1.0, &[0.0, 0.9, 1.4, 1.7]));
        assert!(!monitor_recurrence(0.0, 1.0, &[0.0, 2.5]));
        assert!(monitor_recurrence(0.0, 1.0, &[2.0]));
    }

    #[test]
    fn sampled_pairs_are_deterministic() {
        let g = make_grid(2, 97, SupportRadii::new(0.5, 0.75)).unwrap();
        let u = ScalarField::from_fn(&g, |x| (3.0 * x[0]).sin() * x[1]);
        let a = holder_norm(&u, 1, 0.5).unwrap();
        let b = holder_norm(&u, 1, 0.5).unwrap();
        assert_eq!(a.value, b.value);
        assert!(a.seminorm_pairs_used >= SAMPLED_PAIRS);
    }

    #[test]
    fn small_inequality_run_passes() {
        let r = check_inequalities(5).unwrap();
        assert_eq!(r.product_violations, 0);
        assert!(r.leibniz_error_max <= 1e-10, "{}", r.leibniz_error_max);
        assert!(r.passed());
    }
}
