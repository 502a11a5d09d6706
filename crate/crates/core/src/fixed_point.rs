//! Fixed-point iteration `v_k = Φ(v_{k-1})` and the local perturbation solve.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::frame::{apply_e, apply_e_metric, build_frame, ImmersionFrame};
use crate::grid::{ensure_same, sym_pair, Grid, SymTensorField, VecField};
use crate::holder::{monitor_recurrence, HolderSpec};
use crate::ops::OperatorEval;
use crate::oracle::{isometry_residual, IsometryResidual};
use crate::profile::Cutoff;

/// Slack on the a-priori bound `|v_k| <= |E(0, f)|`.
pub const BOUND_SLACK: f64 = 1e-6;
/// Increments below this multiple of `|E(0, f)|` are rounding noise: a ratio
/// above `rho_max` there means stagnation, not a smallness violation.
pub const NOISE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Ratio above which a step counts toward a smallness violation.
    pub rho_max: f64,
    /// Consecutive steps above `rho_max` before giving up.
    pub patience: usize,
    pub holder: HolderSpec,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 60, rho_max: 0.9, patience: 3, holder: HolderSpec::default() }
    }
}

impl FixedPointConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::config("tol", format!("must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::config("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Converged,
    Stalled,
    Diverged,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Step {
    pub k: usize,
    /// `|v_k|_{C^{2,α}}`.
    pub norm: f64,
    /// `|v_k - v_{k-1}|_{C^{2,α}}`.
    pub increment: f64,
    /// `increment_k / increment_{k-1}`, zero at the first step.
    pub ratio: f64,
    /// `|v_k|_{C^{3,α}}`.
    pub norm_c3: f64,
    pub poisson_residual: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub steps: Vec<Step>,
    pub status: Status,
    /// `|E(0, f)|_{C^{2,α}}`.
    pub e0_norm: f64,
    /// Whether `|v_k| <= |E(0, f)| (1 + 1e-6)` held at every iterate.
    pub bound_held: bool,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.steps.len()
    }

    pub fn norms(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.norm).collect()
    }

    /// Mean increment ratio over the last steps before the increments reach
    /// the rounding floor.
    pub fn asymptotic_ratio(&self) -> f64 {
        let floor = NOISE_FLOOR * self.e0_norm;
        let ratios: Vec<f64> = self
            .steps
            .iter()
            .skip(1)
            .filter(|s| s.increment > floor)
            .map(|s| s.ratio)
            .collect();
        let tail = &ratios[ratios.len().saturating_sub(3)..];
        if tail.is_empty() {
            0.0
        } else {
            tail.iter().sum::<f64>() / tail.len() as f64
        }
    }

    pub fn max_ratio(&self) -> f64 {
        self.steps.iter().map(|s| s.ratio).fold(0.0, f64::max)
    }

    /// Largest `|v_k|_{C^{3,α}}` along the run.
    pub fn sup_norm_c3(&self) -> f64 {
        self.steps.iter().map(|s| s.norm_c3).fold(0.0, f64::max)
    }

    /// Recurrence check with `a0 = 0` and `C = |E(0, f)| / 2`.
    pub fn passes_recurrence_monitor(&self) -> bool {
        monitor_recurrence(0.0, 0.5 * self.e0_norm, &self.norms())
    }
}

fn check_support(cutoff: &Cutoff, f: &SymTensorField) -> Result<()> {
    ensure_same(cutoff.grid(), f.grid())?;
    let a = cutoff.a.values();
    let scale = f.max_abs().max(f64::MIN_POSITIVE);
    for comp in f.components() {
        for (p, &x) in comp.iter().enumerate() {
            if (x - a[p] * a[p] * x).abs() > 1e-12 * scale {
                return Err(Error::Precondition(format!(
                    "f is not supported where the cutoff equals 1 (node {p}, |x| = {:.4})",
                    cutoff.grid().radius(p)
                )));
            }
        }
    }
    Ok(())
}

struct PhiEval {
    next: VecField,
    poisson_residual: f64,
}

fn phi(frame: &ImmersionFrame, cutoff: &Cutoff, f: &SymTensorField, v: &VecField) -> Result<PhiEval> {
    let eval = OperatorEval::new(cutoff, v)?;
    let target = f.sub(&eval.q)?.scale(0.5);
    let e = apply_e(frame, &eval.p, &target)?;
    Ok(PhiEval { next: e.scale(-1.0), poisson_residual: eval.poisson_residual })
}

/// `Φ(v) = -E(P(v), f/2 - Q(v)/2)`.
pub fn apply_phi(frame: &ImmersionFrame, cutoff: &Cutoff, f: &SymTensorField, v: &VecField) -> Result<VecField> {
    check_support(cutoff, f)?;
    ensure_same(frame.grid(), v.grid())?;
    Ok(phi(frame, cutoff, f, v)?.next)
}

/// Iterates from `v_0 = 0` until the `C^{2,α}` increment drops below `tol`.
pub fn solve_fixed_point(
    frame: &ImmersionFrame,
    cutoff: &Cutoff,
    f: &SymTensorField,
    cfg: &FixedPointConfig,
) -> Result<(VecField, IterationTrace)> {
    cfg.validate()?;
    check_support(cutoff, f)?;
    let spec = &cfg.holder;
    let e0_norm = spec.value(&apply_e_metric(frame, f)?, 2)?;
    let bound = e0_norm * (1.0 + BOUND_SLACK);
    let mut v = VecField::zeros(frame.grid(), frame.ambient_dim());
    let mut steps: Vec<Step> = Vec::new();
    let mut over = 0;
    let mut bound_held = true;
    let mut status = Status::Stalled;
    for k in 1..=cfg.max_iter {
        let PhiEval { next, poisson_residual } = phi(frame, cutoff, f, &v)?;
        let norm = spec.value(&next, 2)?;
        let increment = spec.value(&next.sub(&v)?, 2)?;
        if !norm.is_finite() || !increment.is_finite() {
            status = Status::Diverged;
            break;
        }
        let ratio = match steps.last() {
            Some(prev) if prev.increment > 0.0 => increment / prev.increment,
            _ => 0.0,
        };
        let norm_c3 = spec.value(&next, 3)?;
        steps.push(Step { k, norm, increment, ratio, norm_c3, poisson_residual });
        if norm > bound {
            bound_held = false;
        }
        v = next;
        if increment <= cfg.tol {
            status = Status::Converged;
            break;
        }
        let noisy = increment <= NOISE_FLOOR * e0_norm;
        over = if ratio > cfg.rho_max { over + 1 } else { 0 };
        if over >= cfg.patience && noisy {
            break;
        }
        if over >= cfg.patience {
            return Err(Error::SmallnessViolation {
                step: k,
                reason: format!("increment ratio above {} for {} consecutive steps", cfg.rho_max, cfg.patience),
            });
        }
        if !bound_held {
            return Err(Error::SmallnessViolation {
                step: k,
                reason: format!("|v_k| = {norm:.6e} exceeds the a-priori bound {bound:.6e}"),
            });
        }
    }
    Ok((v, IterationTrace { steps, status, e0_norm, bound_held }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LocalConfig {
    pub fixed_point: FixedPointConfig,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self { fixed_point: FixedPointConfig::default() }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalReport {
    pub trace: IterationTrace,
    pub isometry: IsometryResidual,
    /// Largest `|u|` at nodes with `|x| >= R2`.
    pub outside_support_sup: f64,
    /// `|u|_{C^{2,α}}`.
    pub u_norm: f64,
    /// `|u|_{C^{2,α}} / |E(0, f)|_{C^{2,α}}`.
    pub bound_ratio: f64,
    pub freeness_margin: f64,
}

/// Solves for `u = a²v` supported in `B_{R2}` with
/// `∂_i(F0+u)·∂_j(F0+u) = ∂_iF0·∂_jF0 + f_ij`.
pub fn local_perturb(f0: &VecField, f: &SymTensorField, cfg: &LocalConfig) -> Result<(VecField, LocalReport)> {
    ensure_same(f0.grid(), f.grid())?;
    let grid = f0.grid().clone();
    let cutoff = Cutoff::for_grid(&grid)?;
    let frame = build_frame(f0)?;
    let (v, trace) = solve_fixed_point(&frame, &cutoff, f, &cfg.fixed_point)?;
    let u = v.scale_by(&cutoff.a.mul(&cutoff.a)?)?;
    let report = local_report(f0, &u, f, trace, &cfg.fixed_point.holder, &grid, frame.freeness_margin())?;
    Ok((u, report))
}

fn local_report(
    f0: &VecField,
    u: &VecField,
    f: &SymTensorField,
    trace: IterationTrace,
    spec: &HolderSpec,
    grid: &Arc<Grid>,
    freeness_margin: f64,
) -> Result<LocalReport> {
    let outer = grid.radii().outer;
    let outside_support_sup = (0..grid.len())
        .filter(|&p| grid.radius(p) >= outer)
        .map(|p| u.at(p).iter().fold(0.0f64, |m, x| m.max(x.abs())))
        .fold(0.0, f64::max);
    let u_norm = spec.value(u, 2)?;
    let bound_ratio = if trace.e0_norm > 0.0 { u_norm / trace.e0_norm } else { 0.0 };
    Ok(LocalReport {
        isometry: isometry_residual(f0, u, f)?,
        trace,
        outside_support_sup,
        u_norm,
        bound_ratio,
        freeness_margin,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IdentityReport {
    /// `max |∂_iF0·v + a Δ⁻¹N_i(v)|`.
    pub first_order: f64,
    /// `max |∂_i∂_jF0·v + f_ij/2 - Q_ij(v)/2|`.
    pub second_order: f64,
    /// Isometry defect of `F0 + a²v` against `a²f`, from the fourth-order oracle.
    pub isometry: f64,
}

/// Evaluates both constraint systems and the resulting isometry defect at `v`.
pub fn verify_identity(
    frame: &ImmersionFrame,
    f0: &VecField,
    cutoff: &Cutoff,
    v: &VecField,
    f: &SymTensorField,
) -> Result<IdentityReport> {
    ensure_same(frame.grid(), v.grid())?;
    let eval = OperatorEval::new(cutoff, v)?;
    let grid = frame.grid();
    let dim = grid.dim();
    let mut first_order = 0.0f64;
    let mut second_order = 0.0f64;
    for p in 0..grid.len() {
        let av = frame.a(p) * nalgebra::DVector::from_vec(v.at(p));
        for i in 0..dim {
            first_order = first_order.max((av[i] + eval.p.component(i)[p]).abs());
        }
        for k in 0..crate::grid::sym_len(dim) {
            let (i, j) = sym_pair(dim, k);
            let r = av[dim + k] + 0.5 * f.components()[k][p] - 0.5 * eval.q.get(i, j)[p];
            second_order = second_order.max(r.abs());
        }
    }
    let a2 = cutoff.a.mul(&cutoff.a)?;
    let u = v.scale_by(&a2)?;
    let target = f.scale_by(&a2)?;
    let isometry = isometry_residual(f0, &u, &target)?.sup;
    Ok(IdentityReport { first_order, second_order, isometry })
}
