//! Chart atlases on the circle and the flat torus, and the chart-by-chart
//! gluing of local time-dependent perturbations into a global embedding.

use std::f64::consts::{PI, TAU};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::family::{min_eigenvalue, MetricFamily};
use crate::fixed_point::{solve_fixed_point, FixedPointConfig, IterationTrace};
use crate::frame::{build_frame, freeness, ImmersionFrame};
use crate::grid::{make_grid, sym_len, Grid, SupportRadii, SymTensorField, VecField};
use crate::oracle::{isometry_residual, periodic_d1};
use crate::profile::{plateau, Cutoff};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Manifold {
    Circle,
    FlatTorus,
}

impl Manifold {
    pub fn dim(self) -> usize {
        match self {
            Manifold::Circle => 1,
            Manifold::FlatTorus => 2,
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "circle" => Ok(Manifold::Circle),
            "flat-torus" | "torus" => Ok(Manifold::FlatTorus),
            other => Err(Error::config("manifold", format!("unknown manifold {other:?}"))),
        }
    }
}

/// Uniform periodic mesh with `per_axis` points per angle, row-major in the
/// first angle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GlobalMesh {
    pub dim: usize,
    pub per_axis: usize,
}

impl GlobalMesh {
    pub fn len(&self) -> usize {
        self.per_axis.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.per_axis == 0
    }

    pub fn spacing(&self) -> f64 {
        TAU / self.per_axis as f64
    }

    pub fn point(&self, k: usize) -> Vec<f64> {
        let h = self.spacing();
        if self.dim == 1 {
            vec![k as f64 * h]
        } else {
            vec![(k / self.per_axis) as f64 * h, (k % self.per_axis) as f64 * h]
        }
    }
}

/// Angle chart `x = wrap(θ - center) / half_width` with its grid on the unit ball.
#[derive(Debug, Clone)]
pub struct Chart {
    pub center: Vec<f64>,
    pub half_width: f64,
    pub grid: Arc<Grid>,
    pub cutoff: Cutoff,
}

fn wrap(d: f64) -> f64 {
    (d + PI).rem_euclid(TAU) - PI
}

impl Chart {
    /// Chart coordinates of `theta`, or `None` outside the open chart ball.
    pub fn to_chart(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let x: Vec<f64> = theta.iter().zip(&self.center).map(|(t, c)| wrap(t - c) / self.half_width).collect();
        (x.iter().map(|c| c * c).sum::<f64>() < 1.0).then_some(x)
    }

    pub fn from_chart(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.center).map(|(x, c)| (c + self.half_width * x).rem_euclid(TAU)).collect()
    }

    /// Chart-coordinate metric components from angle components.
    fn metric_scale(&self) -> f64 {
        self.half_width * self.half_width
    }
}

/// Tunable geometry of [`build_atlas_with`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtlasConfig {
    pub mesh: usize,
    /// Chart grid resolution; by default chosen so chart nodes fall on mesh points.
    pub chart_resolution: Option<usize>,
    /// Plateau and support radius of the partition bumps, in chart units.
    pub partition_radii: (f64, f64),
    /// Plateau and support radius of the solve cutoff on each chart.
    pub cutoff_radii: (f64, f64),
}

impl AtlasConfig {
    pub fn for_manifold(manifold: Manifold) -> Self {
        match manifold {
            Manifold::Circle => {
                Self { mesh: 2048, chart_resolution: None, partition_radii: (0.7, 0.8), cutoff_radii: (0.8, 0.98) }
            }
            Manifold::FlatTorus => {
                Self { mesh: 40, chart_resolution: None, partition_radii: (0.76, 0.8), cutoff_radii: (0.8, 0.98) }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Atlas {
    pub manifold: Manifold,
    pub charts: Vec<Chart>,
    pub mesh: GlobalMesh,
    pub config: AtlasConfig,
}

pub fn build_atlas(manifold: Manifold, charts: usize) -> Result<Atlas> {
    build_atlas_with(manifold, charts, &AtlasConfig::for_manifold(manifold))
}

pub fn build_atlas_with(manifold: Manifold, count: usize, cfg: &AtlasConfig) -> Result<Atlas> {
    let (flat, support) = cfg.partition_radii;
    let (a_flat, a_support) = cfg.cutoff_radii;
    if !(0.0 < flat && flat < support && support <= a_flat && a_flat < a_support && a_support < 1.0) {
        return Err(Error::config(
            "partition_radii",
            "need 0 < partition plateau < partition support <= cutoff plateau < cutoff support < 1",
        ));
    }
    if cfg.mesh < 16 {
        return Err(Error::config("mesh", format!("need at least 16 points per angle, got {}", cfg.mesh)));
    }
    let (centers, half_width, spacing) = match manifold {
        Manifold::Circle => {
            if count < 2 {
                return Err(Error::config("charts", format!("the circle needs at least 2 charts, got {count}")));
            }
            let step = TAU / count as f64;
            ((0..count).map(|i| vec![i as f64 * step]).collect::<Vec<_>>(), 0.75 * step, step)
        }
        Manifold::FlatTorus => {
            let side = (count as f64).sqrt().round() as usize;
            if count < 4 || side * side != count {
                return Err(Error::config(
                    "charts",
                    format!("the flat torus needs a square number of at least 4 charts, got {count}"),
                ));
            }
            let step = TAU / side as f64;
            let centers = (0..count).map(|k| vec![(k / side) as f64 * step, (k % side) as f64 * step]).collect();
            // Disk charts stay injective below radius π; each square cell's
            // corner sits at distance step/√2 from its nearest center.
            (centers, 0.95 * PI.min(step), step)
        }
    };
    let reach = match manifold {
        Manifold::Circle => 0.5 * spacing,
        Manifold::FlatTorus => spacing / 2f64.sqrt(),
    };
    if flat * half_width < reach {
        return Err(Error::config(
            "charts",
            format!(
                "partition plateaus of radius {:.4} leave points at distance {reach:.4} uncovered",
                flat * half_width
            ),
        ));
    }
    let h_mesh = TAU / cfg.mesh as f64;
    let resolution = match cfg.chart_resolution {
        Some(n) => n,
        None => {
            let steps = (2.0 * half_width / h_mesh).round() as usize;
            steps + 1
        }
    };
    let charts = centers
        .into_iter()
        .map(|center| {
            let grid = make_grid(manifold.dim(), resolution, SupportRadii::new(a_flat, a_support))?;
            let cutoff = Cutoff::for_grid(&grid)?;
            Ok(Chart { center, half_width, grid, cutoff })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Atlas { manifold, charts, mesh: GlobalMesh { dim: manifold.dim(), per_axis: cfg.mesh }, config: *cfg })
}

impl Atlas {
    fn bump(&self, i: usize, theta: &[f64]) -> f64 {
        let (flat, support) = self.config.partition_radii;
        match self.charts[i].to_chart(theta) {
            Some(x) => plateau(x.iter().map(|c| c * c).sum::<f64>().sqrt(), flat, support),
            None => 0.0,
        }
    }

    /// Partition of unity `ψ_i(θ)`.
    pub fn psi(&self, i: usize, theta: &[f64]) -> f64 {
        let total: f64 = (0..self.charts.len()).map(|j| self.bump(j, theta)).sum();
        self.bump(i, theta) / total
    }

    pub fn pu_sum(&self, theta: &[f64]) -> f64 {
        (0..self.charts.len()).map(|i| self.psi(i, theta)).sum()
    }

    /// Largest `|Σψ_i - 1|` over the given points.
    pub fn pu_defect(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| (self.pu_sum(p) - 1.0).abs()).fold(0.0, f64::max)
    }

    fn mesh_points(&self) -> Vec<Vec<f64>> {
        (0..self.mesh.len()).map(|k| self.mesh.point(k)).collect()
    }
}

/// Closed-form free embedding of the manifold, as a map of the angles.
#[derive(Clone)]
pub struct GlobalEmbedding {
    pub name: String,
    pub ambient_dim: usize,
    map: Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>,
}

impl fmt::Debug for GlobalEmbedding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GlobalEmbedding").field("name", &self.name).field("ambient_dim", &self.ambient_dim).finish()
    }
}

impl GlobalEmbedding {
    pub fn new(
        name: impl Into<String>,
        ambient_dim: usize,
        map: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), ambient_dim, map: Arc::new(map) }
    }

    /// Unit circle in the plane, isometric for `dθ²`.
    pub fn unit_circle() -> Self {
        Self::new("unit-circle", 2, |t| vec![t[0].cos(), t[0].sin()])
    }

    /// Flat torus in `R⁸` through four planar circles in `θ`, `φ`, `θ+φ` and `θ-φ`.
    /// The mixed second derivative is nonzero, which the plain product of two
    /// circles lacks.
    pub fn flat_torus() -> Self {
        Self::new("flat-torus-r8", 8, |t| {
            let s = 1.0 / 3f64.sqrt();
            let (a, b) = (t[0], t[1]);
            [a, b, a + b, a - b].iter().flat_map(|&w| [s * w.cos(), s * w.sin()]).collect()
        })
    }

    pub fn eval(&self, theta: &[f64]) -> Vec<f64> {
        (self.map)(theta)
    }

    fn on_mesh(&self, mesh: &GlobalMesh) -> MeshField {
        let mut comps = vec![Vec::with_capacity(mesh.len()); self.ambient_dim];
        for k in 0..mesh.len() {
            for (c, v) in comps.iter_mut().zip(self.eval(&mesh.point(k))) {
                c.push(v);
            }
        }
        MeshField { mesh: *mesh, comps }
    }
}

/// Vector field sampled on the global mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshField {
    pub mesh: GlobalMesh,
    pub comps: Vec<Vec<f64>>,
}

impl MeshField {
    pub fn max_abs_diff(&self, other: &MeshField) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// Packed metric on the manifold in angle coordinates.
fn metric_at(family: &MetricFamily, theta: &[f64], t: f64) -> Vec<f64> {
    family.eval(theta, t)
}

/// Per-chart perturbation `ĝ⁽ⁱ⁾ = ψ_i (g(·,t) - g(·,0))` in chart coordinates.
pub fn decompose_metric(atlas: &Atlas, family: &MetricFamily) -> Result<Vec<MetricFamily>> {
    if family.dim() != atlas.manifold.dim() {
        return Err(Error::Dimension(format!(
            "family is {}-D, manifold is {}-D",
            family.dim(),
            atlas.manifold.dim()
        )));
    }
    let shared = Arc::new(atlas.clone());
    (0..atlas.charts.len())
        .map(|i| {
            let atlas = shared.clone();
            let fam = family.clone();
            MetricFamily::closed(format!("{}-chart{i}", family.name), family.dim(), family.horizon, family.samples, move |x, t| {
                let chart = &atlas.charts[i];
                let theta = chart.from_chart(x);
                let psi = atlas.psi(i, &theta);
                let scale = chart.metric_scale() * psi;
                metric_at(&fam, &theta, t)
                    .iter()
                    .zip(metric_at(&fam, &theta, 0.0))
                    .map(|(now, start)| if psi == 0.0 { 0.0 } else { scale * (now - start) })
                    .collect()
            })
        })
        .collect()
}

/// Largest `|Σ_i ĝ⁽ⁱ⁾ - (g(·,t) - g(·,0))|` over the given `(θ, t)` samples,
/// with the chart pieces mapped back to angle coordinates.
pub fn reconstruction_defect(atlas: &Atlas, family: &MetricFamily, pieces: &[MetricFamily], samples: &[(Vec<f64>, f64)]) -> f64 {
    let ns = sym_len(family.dim());
    let mut worst = 0.0f64;
    for (theta, t) in samples {
        let mut sum = vec![0.0; ns];
        for (chart, piece) in atlas.charts.iter().zip(pieces) {
            if let Some(x) = chart.to_chart(theta) {
                for (s, v) in sum.iter_mut().zip(piece.eval(&x, *t)) {
                    *s += v / chart.metric_scale();
                }
            }
        }
        let now = metric_at(family, theta, *t);
        let start = metric_at(family, theta, 0.0);
        for k in 0..ns {
            worst = worst.max((sum[k] - (now[k] - start[k])).abs());
        }
    }
    worst
}

/// `max |∂_iF·∂_jF - g_ij(·,t)|` over the mesh, with periodic fourth-order
/// differences in the angles.
pub fn pullback_residual(f: &MeshField, family: &MetricFamily, t: f64) -> f64 {
    let target = |k: usize| metric_at(family, &f.mesh.point(k), t);
    pullback_against(f, target)
}

fn pullback_against(f: &MeshField, target: impl Fn(usize) -> Vec<f64> + Sync) -> f64 {
    let mesh = f.mesh;
    let h = mesh.spacing();
    let m = mesh.per_axis;
    let derivs: Vec<Vec<Vec<f64>>> = (0..mesh.dim)
        .map(|axis| f.comps.iter().map(|c| periodic_axis_d1(c, m, mesh.dim, axis, h)).collect())
        .collect();
    (0..mesh.len())
        .into_par_iter()
        .map(|k| {
            let g = target(k);
            let mut worst = 0.0f64;
            let mut idx = 0;
            for i in 0..mesh.dim {
                for j in i..mesh.dim {
                    let dot: f64 = (0..f.comps.len()).map(|c| derivs[i][c][k] * derivs[j][c][k]).sum();
                    worst = worst.max((dot - g[idx]).abs());
                    idx += 1;
                }
            }
            worst
        })
        .reduce(|| 0.0, f64::max)
}

fn periodic_axis_d1(values: &[f64], m: usize, dim: usize, axis: usize, h: f64) -> Vec<f64> {
    if dim == 1 {
        return periodic_d1(values, h);
    }
    let mut out = vec![0.0; values.len()];
    for line in 0..m {
        let idx = |s: usize| if axis == 0 { s * m + line } else { line * m + s };
        let series: Vec<f64> = (0..m).map(|s| values[idx(s)]).collect();
        for (s, d) in periodic_d1(&series, h).into_iter().enumerate() {
            out[idx(s)] = d;
        }
    }
    out
}

/// Four-point Lagrange interpolation of a chart field at chart point `x`;
/// lattice nodes outside the chart ball count as zero.
fn interpolate(grid: &Grid, field: &VecField, x: &[f64]) -> Vec<f64> {
    let n = grid.resolution();
    let h = grid.spacing();
    let weights = |s: f64| -> (i64, [f64; 4], Option<usize>) {
        let base = s.floor();
        let u = s - base;
        if u < 1e-9 {
            return (base as i64, [0.0; 4], Some(0));
        }
        if u > 1.0 - 1e-9 {
            return (base as i64 + 1, [0.0; 4], Some(0));
        }
        let w = [
            -u * (u - 1.0) * (u - 2.0) / 6.0,
            (u + 1.0) * (u - 1.0) * (u - 2.0) / 2.0,
            -(u + 1.0) * u * (u - 2.0) / 2.0,
            (u + 1.0) * u * (u - 1.0) / 6.0,
        ];
        (base as i64 - 1, w, None)
    };
    let at = |i: i64, j: i64| -> Option<usize> {
        if i < 0 || j < 0 || i as usize >= n || j as usize >= n {
            return None;
        }
        grid.node_at(i as usize, j as usize)
    };
    let q = field.ncomp();
    let mut out = vec![0.0; q];
    let stencils: Vec<(i64, Vec<f64>)> = x
        .iter()
        .map(|&c| {
            let (start, w, exact) = weights((c + 1.0) / h);
            match exact {
                Some(_) => (start, vec![1.0]),
                None => (start, w.to_vec()),
            }
        })
        .collect();
    let (si, wi) = &stencils[0];
    let (sj, wj) = if x.len() > 1 { (stencils[1].0, stencils[1].1.clone()) } else { (0, vec![1.0]) };
    for (a, wa) in wi.iter().enumerate() {
        for (b, wb) in wj.iter().enumerate() {
            if let Some(p) = at(si + a as i64, sj + b as i64) {
                for (c, o) in out.iter_mut().enumerate() {
                    *o += wa * wb * field.component(c)[p];
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GlueConfig {
    pub fixed_point: FixedPointConfig,
    pub dt_min: f64,
}

impl Default for GlueConfig {
    fn default() -> Self {
        Self { fixed_point: FixedPointConfig::default(), dt_min: 1e-3 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSample {
    pub t: f64,
    pub trace: IterationTrace,
    /// Chart-local isometry defect of the stage solve.
    pub local_residual: f64,
    /// Global pullback defect of `F_i(·,t)` against `g(·,0) + Σ_{j<=i} ĝ⁽ʲ⁾`.
    pub partial_residual: f64,
    /// Freeness margin of the embedding the stage perturbs, on this chart.
    pub freeness_margin: f64,
    pub freeness_threshold: f64,
    /// Largest mesh displacement outside the chart between consecutive stages.
    pub outside_displacement: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageReport {
    pub chart: usize,
    pub samples: Vec<StageSample>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalSolution {
    pub manifold: Manifold,
    pub times: Vec<f64>,
    pub horizon_requested: f64,
    pub horizon_used: f64,
    pub halvings: usize,
    pub stages: Vec<StageReport>,
    /// Pullback defect of the final embedding against `g(·,t)`, per time.
    pub final_residuals: Vec<f64>,
    /// Smallest freeness margin over threshold of the final embedding over all charts, per time.
    pub final_freeness: Vec<f64>,
    /// `embeddings[i][k]` is `F_i(·, t_k)` on the mesh; stage 0 is `F0`.
    #[serde(skip)]
    pub embeddings: Vec<Vec<MeshField>>,
}

impl GlobalSolution {
    pub fn final_embedding(&self, k: usize) -> &MeshField {
        &self.embeddings.last().expect("at least the initial stage")[k]
    }

    pub fn max_final_residual(&self) -> f64 {
        self.final_residuals.iter().copied().fold(0.0, f64::max)
    }

    /// Largest `|F(·,0) - F0|` over the mesh.
    pub fn initial_drift(&self) -> f64 {
        self.final_embedding(0).max_abs_diff(&self.embeddings[0][0])
    }

    pub fn min_freeness_ratio(&self) -> f64 {
        self.stages
            .iter()
            .flat_map(|s| &s.samples)
            .map(|s| s.freeness_margin / s.freeness_threshold)
            .fold(f64::INFINITY, f64::min)
    }

    /// Rows `stage, t, mesh parameters..., F components...`.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        let dim = self.manifold.dim();
        let q = self.embeddings[0][0].comps.len();
        let mut header: Vec<String> = vec!["stage".into(), "t".into()];
        header.extend((0..dim).map(|a| format!("mesh_param_{a}")));
        header.extend((0..q).map(|c| format!("F{c}")));
        writeln!(out, "{}", header.join(","))?;
        for (stage, per_t) in self.embeddings.iter().enumerate() {
            for (field, t) in per_t.iter().zip(&self.times) {
                for k in 0..field.mesh.len() {
                    let mut row = vec![stage.to_string(), format!("{t:.17e}")];
                    row.extend(field.mesh.point(k).iter().map(|p| format!("{p:.17e}")));
                    row.extend(field.comps.iter().map(|c| format!("{:.17e}", c[k])));
                    writeln!(out, "{}", row.join(","))?;
                }
            }
        }
        Ok(())
    }
}

struct StageOutput {
    u: Vec<VecField>,
    samples: Vec<(IterationTrace, f64, f64, f64)>,
}

/// Previous-stage embedding on chart `i`: `F0` plus the earlier
/// perturbations transported through the transition maps.
fn chart_embedding(atlas: &Atlas, f0: &GlobalEmbedding, i: usize, earlier: &[&VecField]) -> VecField {
    let chart = &atlas.charts[i];
    let grid = &chart.grid;
    VecField::from_fn(grid, f0.ambient_dim, |x| {
        let theta = chart.from_chart(x);
        let mut value = f0.eval(&theta);
        for (j, u) in earlier.iter().enumerate() {
            let other = &atlas.charts[j];
            if let Some(y) = other.to_chart(&theta) {
                for (v, d) in value.iter_mut().zip(interpolate(&other.grid, u, &y)) {
                    *v += d;
                }
            }
        }
        value
    })
}

fn chart_target(atlas: &Atlas, piece: &MetricFamily, i: usize, t: f64) -> Result<SymTensorField> {
    piece.on_grid(&atlas.charts[i].grid, t)
}

fn stage_failure(stage: usize, e: Error) -> Error {
    match e {
        Error::SmallnessViolation { .. } | Error::HorizonCollapse { .. } => e,
        other => Error::StageFailure { stage, source: Box::new(other) },
    }
}

/// Sequential chart-by-chart correction of `F0` realizing `g(·,t)` at every sample.
pub fn glue_solve(f0: &GlobalEmbedding, family: &MetricFamily, atlas: &Atlas, cfg: &GlueConfig) -> Result<GlobalSolution> {
    if !(cfg.dt_min > 0.0) {
        return Err(Error::config("dt_min", "must be positive"));
    }
    let dim = atlas.manifold.dim();
    if family.dim() != dim {
        return Err(Error::Dimension(format!("family is {}-D, manifold is {dim}-D", family.dim())));
    }
    let mesh_points = atlas.mesh_points();
    let mut margin = f64::INFINITY;
    for t in family.t_grid(family.horizon) {
        for p in &mesh_points {
            let g = metric_at(family, p, t);
            margin = margin.min(min_eigenvalue(dim, |k| g[k]));
        }
    }
    if !(margin > 0.0) {
        return Err(Error::Precondition(format!("metric family is not positive definite (margin {margin:.3e})")));
    }
    let start_frames: Vec<ImmersionFrame> = (0..atlas.charts.len())
        .map(|i| build_frame(&chart_embedding(atlas, f0, i, &[])).map_err(|e| Error::Precondition(format!("F0 on chart {i}: {e}"))))
        .collect::<Result<_>>()?;
    let pieces = decompose_metric(atlas, family)?;

    let mut horizon = family.horizon;
    let mut halvings = 0;
    loop {
        let times = family.t_grid(horizon);
        match run_stages(f0, atlas, &pieces, &start_frames[0], &times, &cfg.fixed_point) {
            Ok(stages) => return assemble(f0, family, atlas, times, stages, horizon, halvings),
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

fn run_stages(
    f0: &GlobalEmbedding,
    atlas: &Atlas,
    pieces: &[MetricFamily],
    first_frame: &ImmersionFrame,
    times: &[f64],
    cfg: &FixedPointConfig,
) -> Result<Vec<StageOutput>> {
    let mut stages: Vec<StageOutput> = Vec::with_capacity(atlas.charts.len());
    for i in 0..atlas.charts.len() {
        let stage = i + 1;
        let chart = &atlas.charts[i];
        let solved = times
            .par_iter()
            .enumerate()
            .map(|(k, &t)| {
                let earlier: Vec<&VecField> = stages.iter().map(|s| &s.u[k]).collect();
                let base = chart_embedding(atlas, f0, i, &earlier);
                let rebuilt;
                let frame = if i == 0 {
                    first_frame
                } else {
                    rebuilt = build_frame(&base).map_err(|e| stage_failure(stage, e))?;
                    &rebuilt
                };
                let target = chart_target(atlas, &pieces[i], i, t)?;
                let (v, trace) = solve_fixed_point(frame, &chart.cutoff, &target, cfg).map_err(|e| stage_failure(stage, e))?;
                let a2 = chart.cutoff.a.mul(&chart.cutoff.a)?;
                let u = v.scale_by(&a2)?;
                let local = isometry_residual(&base, &u, &target)?.sup;
                Ok((u, (trace, local, frame.freeness.margin, frame.freeness.threshold)))
            })
            .collect::<Result<Vec<_>>>()?;
        let (u, samples) = solved.into_iter().unzip();
        stages.push(StageOutput { u, samples });
    }
    Ok(stages)
}

fn assemble(
    f0: &GlobalEmbedding,
    family: &MetricFamily,
    atlas: &Atlas,
    times: Vec<f64>,
    stages: Vec<StageOutput>,
    horizon_used: f64,
    halvings: usize,
) -> Result<GlobalSolution> {
    let mesh = atlas.mesh;
    let points: Vec<Vec<f64>> = (0..mesh.len()).map(|k| mesh.point(k)).collect();
    let start = f0.on_mesh(&mesh);
    let mut embeddings = vec![vec![start; times.len()]];
    let mut reports = Vec::with_capacity(stages.len());
    for (i, stage) in stages.iter().enumerate() {
        let chart = &atlas.charts[i];
        let prev = embeddings.last().expect("initial stage").clone();
        let next: Vec<MeshField> = prev
            .par_iter()
            .zip(&stage.u)
            .map(|(field, u)| {
                let mut field = field.clone();
                for (k, p) in points.iter().enumerate() {
                    if let Some(x) = chart.to_chart(p) {
                        for (c, d) in interpolate(&chart.grid, u, &x).into_iter().enumerate() {
                            field.comps[c][k] += d;
                        }
                    }
                }
                field
            })
            .collect();
        let samples = times
            .par_iter()
            .enumerate()
            .map(|(k, &t)| {
                let partial = pullback_against(&next[k], |m| {
                    let p = &points[m];
                    let now = metric_at(family, p, t);
                    let g0 = metric_at(family, p, 0.0);
                    let weight: f64 = (0..=i).map(|j| atlas.psi(j, p)).sum();
                    g0.iter().zip(&now).map(|(a, b)| a + weight * (b - a)).collect()
                });
                let outside = points
                    .iter()
                    .enumerate()
                    .filter(|(_, p)| chart.to_chart(p).is_none())
                    .flat_map(|(m, _)| next[k].comps.iter().zip(&prev[k].comps).map(move |(a, b)| (a[m] - b[m]).abs()))
                    .fold(0.0, f64::max);
                let (trace, local, margin, threshold) = stage.samples[k].clone();
                StageSample {
                    t,
                    trace,
                    local_residual: local,
                    partial_residual: partial,
                    freeness_margin: margin,
                    freeness_threshold: threshold,
                    outside_displacement: outside,
                }
            })
            .collect();
        reports.push(StageReport { chart: i, samples });
        embeddings.push(next);
    }
    let last = embeddings.last().expect("stages");
    let final_residuals: Vec<f64> =
        times.par_iter().zip(last).map(|(&t, field)| pullback_residual(field, family, t)).collect();
    let final_freeness = (0..times.len())
        .into_par_iter()
        .map(|k| {
            let mut worst = f64::INFINITY;
            for i in 0..atlas.charts.len() {
                let us: Vec<&VecField> = stages.iter().map(|s| &s.u[k]).collect();
                let on_chart = chart_embedding(atlas, f0, i, &us);
                let report = freeness(&on_chart)?;
                worst = worst.min(report.margin / report.threshold);
            }
            Ok(worst)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GlobalSolution {
        manifold: atlas.manifold,
        times,
        horizon_requested: family.horizon,
        horizon_used,
        halvings,
        stages: reports,
        final_residuals,
        final_freeness,
        embeddings,
    })
}

/// `g(θ, t) = (1 + rate·t (1 + cos θ_0)/2) δ`, breathing on one side of the manifold.
pub fn breathing_family(manifold: Manifold, rate: f64, horizon: f64, samples: usize) -> Result<MetricFamily> {
    let dim = manifold.dim();
    MetricFamily::closed("circle-breathing", dim, horizon, samples, move |theta, t| {
        let s = 1.0 + rate * t * 0.5 * (1.0 + theta[0].cos());
        if dim == 1 {
            vec![s]
        } else {
            vec![s, 0.0, s]
        }
    })
}

/// The round metric `δ` for all times.
pub fn constant_family(manifold: Manifold, horizon: f64, samples: usize) -> Result<MetricFamily> {
    breathing_family(manifold, 0.0, horizon, samples)
}
