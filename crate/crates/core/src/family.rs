//! Time-dependent metric families and per-sample local solves with an
//! adaptive horizon.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fixed_point::{solve_fixed_point, FixedPointConfig, IterationTrace};
use crate::frame::{apply_e_metric, build_frame, ImmersionFrame};
use crate::grid::{ensure_same, sym_len, Differentiate, Grid, MultiIndex, ScalarField, SymTensorField, VecField};
use crate::holder::HolderSpec;
use crate::oracle::{isometry_residual, pullback_defect, IsometryResidual};
use crate::profile::{plateau, Cutoff};

/// Closed-form metric `(x, t) -> g_ij` in packed upper-triangle order.
pub type MetricFn = dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync;

/// Metric on a uniform 1-D table of `x` nodes and `t` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricTable {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    /// `values[ti][xi]` is `g_11(x[xi], t[ti])`.
    pub values: Vec<Vec<f64>>,
}

impl MetricTable {
    pub fn new(x: Vec<f64>, t: Vec<f64>, values: Vec<Vec<f64>>) -> Result<Self> {
        if x.len() < 4 {
            return Err(Error::config("table", "need at least 4 x nodes"));
        }
        if t.is_empty() || values.len() != t.len() || values.iter().any(|row| row.len() != x.len()) {
            return Err(Error::config("table", "one row of x values per time sample required"));
        }
        let uniform = |v: &[f64]| {
            if v.len() < 2 {
                return true;
            }
            let h = v[1] - v[0];
            h > 0.0 && v.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-9 * h.abs().max(1.0))
        };
        if !uniform(&x) || !uniform(&t) {
            return Err(Error::config("table", "x and t nodes must be increasing and uniformly spaced"));
        }
        Ok(Self { x, t, values })
    }

    /// Catmull-Rom in `x`, linear in `t`, clamped to the table range.
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let spatial = |row: &[f64]| {
            let n = self.x.len();
            let h = self.x[1] - self.x[0];
            let s = ((x - self.x[0]) / h).clamp(0.0, (n - 1) as f64);
            let i = (s.floor() as usize).min(n - 2);
            let u = s - i as f64;
            // Ghost nodes past either end come from quadratic extrapolation,
            // so quadratics are reproduced up to the boundary.
            let at = |k: isize| {
                let j = i as isize + k;
                if j < 0 {
                    3.0 * row[0] - 3.0 * row[1] + row[2]
                } else if j >= n as isize {
                    3.0 * row[n - 1] - 3.0 * row[n - 2] + row[n - 3]
                } else {
                    row[j as usize]
                }
            };
            let (p0, p1, p2, p3) = (at(-1), at(0), at(1), at(2));
            0.5 * (2.0 * p1 + (p2 - p0) * u + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * u * u
                + (3.0 * p1 - p0 - 3.0 * p2 + p3) * u * u * u)
        };
        if self.t.len() == 1 {
            return spatial(&self.values[0]);
        }
        let m = self.t.len();
        let dt = self.t[1] - self.t[0];
        let s = ((t - self.t[0]) / dt).clamp(0.0, (m - 1) as f64);
        let k = (s.floor() as usize).min(m - 2);
        let w = s - k as f64;
        (1.0 - w) * spatial(&self.values[k]) + w * spatial(&self.values[k + 1])
    }
}

#[derive(Clone)]
enum Evaluator {
    Closed(Arc<MetricFn>),
    Table(Arc<MetricTable>),
}

/// Smooth family `g(·, t)`, `t ∈ [0, horizon]`, sampled at `samples` equally
/// spaced times including both ends.
#[derive(Clone)]
pub struct MetricFamily {
    pub name: String,
    dim: usize,
    pub horizon: f64,
    pub samples: usize,
    eval: Evaluator,
}

impl fmt::Debug for MetricFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MetricFamily")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("horizon", &self.horizon)
            .field("samples", &self.samples)
            .finish()
    }
}

impl MetricFamily {
    pub fn closed(
        name: impl Into<String>,
        dim: usize,
        horizon: f64,
        samples: usize,
        eval: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Result<Self> {
        Self::build(name.into(), dim, horizon, samples, Evaluator::Closed(Arc::new(eval)))
    }

    pub fn table(name: impl Into<String>, table: MetricTable, samples: usize) -> Result<Self> {
        let horizon = *table.t.last().expect("validated table");
        Self::build(name.into(), 1, horizon, samples, Evaluator::Table(Arc::new(table)))
    }

    fn build(name: String, dim: usize, horizon: f64, samples: usize, eval: Evaluator) -> Result<Self> {
        if !(dim == 1 || dim == 2) {
            return Err(Error::config("dim", format!("must be 1 or 2, got {dim}")));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config("horizon", format!("must be positive, got {horizon}")));
        }
        if samples < 2 {
            return Err(Error::config("samples", "need at least 2 time samples"));
        }
        Ok(Self { name, dim, horizon, samples, eval })
    }

    /// `g(·, t) = g0`.
    pub fn constant(g0: Arc<MetricFn>, dim: usize, horizon: f64, samples: usize) -> Result<Self> {
        Self::closed("constant", dim, horizon, samples, move |x, _| g0(x, 0.0))
    }

    /// `g(·, t) = (1 + rate·t) g0`.
    pub fn uniform_scale(g0: Arc<MetricFn>, rate: f64, dim: usize, horizon: f64, samples: usize) -> Result<Self> {
        Self::closed("uniform-scale", dim, horizon, samples, move |x, t| {
            g0(x, 0.0).into_iter().map(|g| (1.0 + rate * t) * g).collect()
        })
    }

    /// `g(·, t) = (1 + amplitude·t·b(x)) g0` with a smooth bump `b` of the given radius.
    pub fn bump_breathing(
        g0: Arc<MetricFn>,
        amplitude: f64,
        radius: f64,
        dim: usize,
        horizon: f64,
        samples: usize,
    ) -> Result<Self> {
        if !(radius > 0.0) {
            return Err(Error::config("radius", "must be positive"));
        }
        Self::closed("bump-breathing", dim, horizon, samples, move |x, t| {
            let r = x.iter().map(|c| c * c).sum::<f64>().sqrt();
            let b = plateau(r, 0.0, radius);
            g0(x, 0.0).into_iter().map(|g| (1.0 + amplitude * t * b) * g).collect()
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        match &self.eval {
            Evaluator::Closed(f) => f(x, t),
            Evaluator::Table(table) => vec![table.eval(x[0], t)],
        }
    }

    /// Sample times over `[0, horizon]`.
    pub fn t_grid(&self, horizon: f64) -> Vec<f64> {
        let last = (self.samples - 1) as f64;
        (0..self.samples).map(|k| if k + 1 == self.samples { horizon } else { horizon * k as f64 / last }).collect()
    }

    pub fn on_grid(&self, grid: &Arc<Grid>, t: f64) -> Result<SymTensorField> {
        if grid.dim() != self.dim {
            return Err(Error::Dimension(format!("family is {}-D, grid is {}-D", self.dim, grid.dim())));
        }
        let ns = sym_len(self.dim);
        let mut comps = vec![Vec::with_capacity(grid.len()); ns];
        for p in 0..grid.len() {
            let g = self.eval(grid.point(p), t);
            if g.len() != ns {
                return Err(Error::Dimension(format!("metric has {} components, expected {ns}", g.len())));
            }
            for (c, v) in comps.iter_mut().zip(g) {
                c.push(v);
            }
        }
        SymTensorField::new(grid.clone(), comps)
    }

    /// Smallest eigenvalue of `g` over the grid nodes and the sample times.
    pub fn positivity_margin(&self, grid: &Arc<Grid>) -> Result<f64> {
        let mut margin = f64::INFINITY;
        for t in self.t_grid(self.horizon) {
            let g = self.on_grid(grid, t)?;
            for p in 0..grid.len() {
                margin = margin.min(min_eigenvalue(self.dim, |k| g.components()[k][p]));
            }
        }
        Ok(margin)
    }
}

pub(crate) fn min_eigenvalue(dim: usize, g: impl Fn(usize) -> f64) -> f64 {
    if dim == 1 {
        return g(0);
    }
    let (a, b, c) = (g(0), g(1), g(2));
    let mean = 0.5 * (a + c);
    mean - (0.25 * (a - c) * (a - c) + b * b).sqrt()
}

/// `ĝ(·, t) = ψ (g(·, t) - g(·, 0))`.
pub fn build_ghat(psi: &ScalarField, family: &MetricFamily, t: f64) -> Result<SymTensorField> {
    let grid = psi.grid();
    check_psi(psi)?;
    let now = family.on_grid(grid, t)?;
    let start = family.on_grid(grid, 0.0)?;
    now.sub(&start)?.scale_by(psi)
}

fn check_psi(psi: &ScalarField) -> Result<()> {
    let grid = psi.grid();
    for p in 0..grid.len() {
        let r = grid.radius(p);
        let v = psi.values()[p];
        if r <= 0.5 && v != 1.0 {
            return Err(Error::Precondition(format!("ψ = {v} at |x| = {r:.4} inside the unit plateau of radius 1/2")));
        }
        if r >= 0.75 && v != 0.0 {
            return Err(Error::Precondition(format!("ψ = {v} at |x| = {r:.4}, outside the allowed support of radius 3/4")));
        }
    }
    Ok(())
}

/// Chart settings for [`solve_family`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FamilyConfig {
    pub fixed_point: FixedPointConfig,
    /// Plateau and support radius of the time cutoff `ψ`.
    pub psi_radii: (f64, f64),
    /// The run fails once the horizon would drop below this.
    pub dt_min: f64,
    /// Largest allowed `|g(·,0) - F0*δ|` relative to `max |g(·,0)|`.
    pub consistency_tol: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self { fixed_point: FixedPointConfig::default(), psi_radii: (0.5, 0.75), dt_min: 1e-3, consistency_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySample {
    pub t: f64,
    #[serde(skip)]
    pub u: VecField,
    #[serde(skip)]
    pub v: VecField,
    pub trace: IterationTrace,
    pub residual: IsometryResidual,
    /// `|u|_{C^{2,α}}`.
    pub u_norm: f64,
    /// `|v|_{C^{2,α}}`.
    pub v_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct FamilySolution {
    pub samples: Vec<FamilySample>,
    pub horizon_requested: f64,
    pub horizon_used: f64,
    pub halvings: usize,
    /// `|v(t_{k+1}) - v(t_k)| / |E(0, ĝ(t_{k+1}) - ĝ(t_k))|` for consecutive samples.
    pub stability_ratios: Vec<f64>,
    pub freeness_margin: f64,
}

impl FamilySolution {
    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }

    pub fn max_residual(&self) -> f64 {
        self.samples.iter().map(|s| s.residual.sup).fold(0.0, f64::max)
    }

    pub fn bound_held(&self) -> bool {
        self.samples.iter().all(|s| s.trace.bound_held)
    }

    pub fn max_stability_ratio(&self) -> f64 {
        self.stability_ratios.iter().copied().fold(0.0, f64::max)
    }
}

/// Checks that `g(·, 0)` is the pullback of `F0`.
pub fn consistency_defect(f0: &VecField, family: &MetricFamily) -> Result<f64> {
    let g0 = family.on_grid(f0.grid(), 0.0)?;
    let scale = g0.max_abs().max(f64::MIN_POSITIVE);
    Ok(pullback_defect(f0, &g0)?.sup / scale)
}

/// Solves the local problem at every sample time, halving the horizon on a
/// smallness violation.
pub fn solve_family(f0: &VecField, family: &MetricFamily, cfg: &FamilyConfig) -> Result<FamilySolution> {
    let grid = f0.grid().clone();
    if !(cfg.dt_min > 0.0) {
        return Err(Error::config("dt_min", "must be positive"));
    }
    let (psi_flat, psi_support) = cfg.psi_radii;
    let cutoff = Cutoff::for_grid(&grid)?;
    if psi_support > cutoff.flat_radius {
        return Err(Error::Precondition(format!(
            "ψ support {psi_support} reaches past the plateau {} of the solve cutoff",
            cutoff.flat_radius
        )));
    }
    let psi = Cutoff::new(&grid, psi_flat, psi_support)?.a;
    check_psi(&psi)?;
    let defect = consistency_defect(f0, family)?;
    if defect > cfg.consistency_tol {
        return Err(Error::Precondition(format!(
            "g(·,0) differs from the pullback of F0 by {defect:.3e} (relative), tolerance {:.1e}",
            cfg.consistency_tol
        )));
    }
    let margin = family.positivity_margin(&grid)?;
    if !(margin > 0.0) {
        return Err(Error::Precondition(format!("metric family is not positive definite (margin {margin:.3e})")));
    }
    let frame = build_frame(f0)?;
    let a2 = cutoff.a.mul(&cutoff.a)?;

    let mut horizon = family.horizon;
    let mut halvings = 0;
    loop {
        let times = family.t_grid(horizon);
        let attempt: Result<Vec<(VecField, IterationTrace, SymTensorField)>> = times
            .par_iter()
            .map(|&t| {
                let ghat = build_ghat(&psi, family, t)?;
                let (v, trace) = solve_fixed_point(&frame, &cutoff, &ghat, &cfg.fixed_point)?;
                Ok((v, trace, ghat))
            })
            .collect();
        match attempt {
            Ok(solved) => {
                return assemble(f0, &frame, &a2, &cfg.fixed_point.holder, times, solved, family.horizon, horizon, halvings)
            }
            Err(Error::SmallnessViolation { step, reason }) => {
                let next = 0.5 * horizon;
                log::info!("smallness violated at step {step} ({reason}); halving horizon to {next:.4e}");
                if next < cfg.dt_min {
                    return Err(Error::HorizonCollapse { horizon: next, dt_min: cfg.dt_min });
                }
                horizon = next;
                halvings += 1;
            }
            Err(e) => return Err(e),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    f0: &VecField,
    frame: &ImmersionFrame,
    a2: &ScalarField,
    spec: &HolderSpec,
    times: Vec<f64>,
    solved: Vec<(VecField, IterationTrace, SymTensorField)>,
    horizon_requested: f64,
    horizon_used: f64,
    halvings: usize,
) -> Result<FamilySolution> {
    let mut stability_ratios = Vec::with_capacity(solved.len().saturating_sub(1));
    for pair in solved.windows(2) {
        let gap = spec.value(&pair[1].0.sub(&pair[0].0)?, 2)?;
        let e_gap = spec.value(&apply_e_metric(frame, &pair[1].2.sub(&pair[0].2)?)?, 2)?;
        stability_ratios.push(ratio_or_zero(gap, e_gap));
    }
    let samples = times
        .into_par_iter()
        .zip(solved)
        .map(|(t, (v, trace, ghat))| {
            let u = v.scale_by(a2)?;
            Ok(FamilySample {
                t,
                residual: isometry_residual(f0, &u, &ghat)?,
                u_norm: spec.value(&u, 2)?,
                v_norm: spec.value(&v, 2)?,
                u,
                v,
                trace,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FamilySolution {
        samples,
        horizon_requested,
        horizon_used,
        halvings,
        stability_ratios,
        freeness_margin: frame.freeness_margin(),
    })
}

fn ratio_or_zero(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else if num == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// `|v1 - v2|_{C^{2,α}}`.
    pub gap: f64,
    /// `|E(0, f1 - f2)|_{C^{2,α}}`.
    pub e_gap: f64,
    pub ratio: f64,
    pub traces: [IterationTrace; 2],
}

/// Solves the fixed point for both perturbations and compares the distance of
/// the solutions with the distance of the data under `E(0, ·)`.
pub fn stability_gap(
    f0: &VecField,
    cutoff: &Cutoff,
    f1: &SymTensorField,
    f2: &SymTensorField,
    cfg: &FixedPointConfig,
) -> Result<StabilityReport> {
    ensure_same(f0.grid(), cutoff.grid())?;
    ensure_same(f1.grid(), f2.grid())?;
    let frame = build_frame(f0)?;
    let (v1, t1) = solve_fixed_point(&frame, cutoff, f1, cfg)?;
    let (v2, t2) = solve_fixed_point(&frame, cutoff, f2, cfg)?;
    let gap = cfg.holder.value(&v1.sub(&v2)?, 2)?;
    let e_gap = cfg.holder.value(&apply_e_metric(&frame, &f1.sub(f2)?)?, 2)?;
    Ok(StabilityReport { gap, e_gap, ratio: ratio_or_zero(gap, e_gap), traces: [t1, t2] })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProbeEntry {
    /// Order of the time difference.
    pub r: usize,
    /// Spatial multi-index, as exponents per axis.
    pub beta: Vec<usize>,
    /// Sup of the divided difference with step `Δt`.
    pub fine: f64,
    /// Same with step `2Δt`.
    pub coarse: f64,
    pub ratio: f64,
    /// Level below which both values are treated as rounding noise.
    pub noise_floor: f64,
    pub bounded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RegularityReport {
    pub dt: f64,
    pub entries: Vec<ProbeEntry>,
}

impl RegularityReport {
    pub fn bounded(&self) -> bool {
        self.entries.iter().all(|e| e.bounded)
    }

    pub fn max_ratio(&self) -> f64 {
        self.entries.iter().filter(|e| e.coarse > e.noise_floor || e.fine > e.noise_floor).map(|e| e.ratio).fold(0.0, f64::max)
    }
}

/// Relative size of the fixed-point tolerance in sup-norm units.
const PROBE_NOISE: f64 = 1e-8;

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Sup over nodes and valid start indices of the `r`-th forward divided
/// difference of `series` with index stride `stride`.
fn divided_sup(series: &[&[Vec<f64>]], r: usize, stride: usize, dt: f64) -> f64 {
    let span = r * stride;
    if series.len() <= span {
        return 0.0;
    }
    let mut sup = 0.0f64;
    for start in 0..series.len() - span {
        for c in 0..series[0].len() {
            for p in 0..series[0][c].len() {
                let mut acc = 0.0;
                for k in 0..=r {
                    let sign = if (r - k) % 2 == 0 { 1.0 } else { -1.0 };
                    acc += sign * binomial(r, k) * series[start + k * stride][c][p];
                }
                sup = sup.max(acc.abs());
            }
        }
    }
    sup / (stride as f64 * dt).powi(r as i32)
}

/// Divided differences in `t` of `u` and `∂^β u`, `|β| <= 2`, at steps `Δt`
/// and `2Δt`.
pub fn time_regularity_probe(solution: &FamilySolution, r_max: usize) -> Result<RegularityReport> {
    if r_max > 2 {
        return Err(Error::config("r_max", format!("at most 2, got {r_max}")));
    }
    let n = solution.samples.len();
    if n < 2 * r_max + 1 {
        return Err(Error::config("samples", format!("need at least {} time samples, have {n}", 2 * r_max + 1)));
    }
    let dt = if n > 1 { solution.samples[1].t - solution.samples[0].t } else { 0.0 };
    let Some(first) = solution.samples.first() else {
        return Ok(RegularityReport { dt, entries: Vec::new() });
    };
    let dim = first.u.grid().dim();
    let mut entries = Vec::new();
    for m in 0..=2 {
        for beta in MultiIndex::all_of_order(dim, m) {
            let fields: Vec<VecField> = solution
                .samples
                .iter()
                .map(|s| s.u.derivative(beta))
                .collect::<Result<_>>()?;
            let series: Vec<&[Vec<f64>]> = fields.iter().map(|f| f.components()).collect();
            let scale = fields.iter().map(|f| f.max_abs()).fold(0.0, f64::max);
            for r in 0..=r_max {
                let fine = divided_sup(&series, r, 1, dt);
                let coarse = divided_sup(&series, r, 2, dt);
                let noise_floor = 2f64.powi(r as i32) * PROBE_NOISE * (1.0 + scale) / dt.powi(r as i32);
                let ratio = ratio_or_zero(fine, coarse);
                let bounded = fine <= 2.0 * coarse || fine <= noise_floor;
                entries.push(ProbeEntry {
                    r,
                    beta: (0..dim).map(|a| beta.get(a)).collect(),
                    fine,
                    coarse,
                    ratio,
                    noise_floor,
                    bounded,
                });
            }
        }
    }
    Ok(RegularityReport { dt, entries })
}

/// Packed metric `∂F·∂F` of a few closed-form charts, used by demos and tests.
pub mod charts {
    use std::sync::Arc;

    use super::MetricFn;

    /// Pullback of `F0(x) = (x, x²)`.
    pub fn parabola() -> Arc<MetricFn> {
        Arc::new(|x: &[f64], _| vec![1.0 + 4.0 * x[0] * x[0]])
    }

    /// Pullback of `F0(x, y) = (x, y, x²/2, xy, y²/2)`.
    pub fn quadric_surface() -> Arc<MetricFn> {
        Arc::new(|x: &[f64], _| {
            let s = 1.0 + x[0] * x[0] + x[1] * x[1];
            vec![s, x[0] * x[1], s]
        })
    }
}
