//! Command execution. Everything is computed in memory; writing happens only
//! after a run finishes.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::Serialize;
use serde_json::{json, Value};

use isoembed::atlas::{
    breathing_family, build_atlas_with, constant_family, decompose_metric, glue_solve, reconstruction_defect,
    AtlasConfig, GlobalEmbedding, GlueConfig, Manifold,
};
use isoembed::family::{
    charts, solve_family, time_regularity_probe, FamilyConfig, MetricFamily, MetricFn, MetricTable,
};
use isoembed::fixed_point::{local_perturb, FixedPointConfig, IterationTrace, LocalConfig, Status};
use isoembed::frame::{build_frame, freeness};
use isoembed::grid::{make_grid, Grid, ScalarField, SupportRadii, SymTensorField, VecField};
use isoembed::holder::{check_inequalities_with, HolderSpec, DEFAULT_PAIR_SEED};
use isoembed::profile::plateau;

use crate::config::{Command, EmbeddingKind, FamilyName, Loaded, PerturbationKind, Scenario};

/// One asserted tolerance.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Criterion {
    pub name: String,
    pub value: f64,
    pub relation: &'static str,
    pub limit: f64,
    pub pass: bool,
}

impl Criterion {
    fn at_most(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: "<=", limit, pass: value <= limit }
    }

    fn above(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: ">", limit, pass: value > limit }
    }

    fn holds(name: &str, ok: bool) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(ok)), relation: "==", limit: 1.0, pass: ok }
    }
}

#[derive(Debug, Default)]
pub struct RunOutput {
    pub results: Value,
    pub criteria: Vec<Criterion>,
    /// File name under `traces/` and its CSV text.
    pub traces: Vec<(String, String)>,
    /// File name under `embeddings/` and its CSV text.
    pub embeddings: Vec<(String, String)>,
}

/// How a run can fail before producing a verdict.
#[derive(Debug)]
pub enum RunError {
    /// Rejected input, exit code 2.
    Config(String),
    /// Numerical failure, exit code 1; `criterion` names what broke.
    Solve { criterion: String, message: String },
}

impl From<isoembed::Error> for RunError {
    fn from(e: isoembed::Error) -> Self {
        match e {
            isoembed::Error::Config { .. } => RunError::Config(e.to_string()),
            isoembed::Error::NotFree { .. } => RunError::Solve { criterion: "freeness".into(), message: e.to_string() },
            isoembed::Error::SmallnessViolation { .. } | isoembed::Error::HorizonCollapse { .. } => {
                RunError::Solve { criterion: "smallness".into(), message: e.to_string() }
            }
            other => RunError::Solve { criterion: "solve".into(), message: other.to_string() },
        }
    }
}

pub fn seed(s: &Scenario) -> u64 {
    s.seed.unwrap_or(DEFAULT_PAIR_SEED)
}

pub fn execute(command: Command, loaded: &Loaded) -> Result<RunOutput, RunError> {
    match command {
        Command::CheckFree => check_free(loaded),
        Command::SolveLocal => solve_local(loaded),
        Command::SolveFamily => solve_chart_family(loaded),
        Command::SolveGlobal => solve_global(loaded),
        Command::VerifyAppendix => verify_appendix(loaded),
    }
}

fn fixed_point_config(s: &Scenario) -> Result<FixedPointConfig, RunError> {
    let holder = HolderSpec { pair_seed: seed(s), ..HolderSpec::new(s.alpha)? };
    Ok(FixedPointConfig { tol: s.solver.tol, max_iter: s.solver.max_iter, holder, ..FixedPointConfig::default() })
}

fn chart_grid(s: &Scenario, command: Command) -> Result<Arc<Grid>, RunError> {
    let [r1, r2] = s.chart.cutoff_radii(command);
    Ok(make_grid(s.chart.embedding.dim(), s.chart.resolution, SupportRadii::new(r1, r2))?)
}

fn initial_embedding(s: &Scenario, grid: &Arc<Grid>) -> VecField {
    let l = s.chart.arc_half_width;
    match s.chart.embedding {
        EmbeddingKind::Parabola => VecField::from_fn(grid, 2, |x| vec![x[0], x[0] * x[0]]),
        EmbeddingKind::Quadric => VecField::from_fn(grid, 5, |x| {
            vec![x[0], x[1], 0.5 * x[0] * x[0], x[0] * x[1], 0.5 * x[1] * x[1]]
        }),
        EmbeddingKind::CircleArc => VecField::from_fn(grid, 2, move |x| vec![(l * x[0]).cos(), (l * x[0]).sin()]),
        EmbeddingKind::Line => VecField::from_fn(grid, 2, |x| vec![x[0], 0.0]),
    }
}

/// Pullback of the Euclidean metric through [`initial_embedding`].
fn initial_metric(s: &Scenario) -> Arc<MetricFn> {
    let l = s.chart.arc_half_width;
    match s.chart.embedding {
        EmbeddingKind::Parabola => charts::parabola(),
        EmbeddingKind::Quadric => charts::quadric_surface(),
        EmbeddingKind::CircleArc => Arc::new(move |_: &[f64], _| vec![l * l]),
        EmbeddingKind::Line => Arc::new(|_: &[f64], _| vec![1.0]),
    }
}

fn values(v: Vec<f64>) -> Value {
    json!(v)
}

fn check_free(loaded: &Loaded) -> Result<RunOutput, RunError> {
    let s = &loaded.scenario;
    let grid = chart_grid(s, Command::CheckFree)?;
    let f0 = initial_embedding(s, &grid);
    let report = freeness(&f0)?;
    let mut criteria = vec![Criterion::above("freeness", report.margin / report.threshold, 1.0)];
    let mut identity = None;
    if report.is_free() {
        let frame = build_frame(&f0)?;
        criteria.push(Criterion::at_most("frame_identity", frame.identity_residual, s.tolerances.identity));
        identity = Some((frame.identity_residual, frame.gram_condition));
    }
    let results = json!({
        "embedding": s.chart.embedding,
        "resolution": s.chart.resolution,
        "margin": report.margin,
        "threshold": report.threshold,
        "worst_node": report.worst_node,
        "worst_point": grid.point(report.worst_node),
        "identity_residual": identity.map(|p| p.0),
        "gram_condition": identity.map(|p| p.1),
    });
    let mut csv = String::from("node,");
    csv.push_str(&(0..grid.dim()).map(|a| format!("x{a}")).collect::<Vec<_>>().join(","));
    csv.push_str(",margin,threshold\n");
    let _ = writeln!(
        csv,
        "{},{},{:.17e},{:.17e}",
        report.worst_node,
        grid.point(report.worst_node).iter().map(|p| format!("{p:.17e}")).collect::<Vec<_>>().join(","),
        report.margin,
        report.threshold
    );
    Ok(RunOutput { results, criteria, traces: vec![("freeness.csv".into(), csv)], embeddings: Vec::new() })
}

fn trace_csv(trace: &IterationTrace) -> String {
    let mut out = String::from("k,norm,increment,ratio,norm_c3,poisson_residual\n");
    for s in &trace.steps {
        let _ = writeln!(
            out,
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            s.k, s.norm, s.increment, s.ratio, s.norm_c3, s.poisson_residual
        );
    }
    out
}

/// Chart embeddings in the global embedding CSV layout, with chart
/// coordinates in the parameter columns.
fn chart_embedding_csv(rows: &[(usize, f64, &VecField)]) -> String {
    let first = rows[0].2;
    let grid = first.grid();
    let mut header: Vec<String> = vec!["stage".into(), "t".into()];
    header.extend((0..grid.dim()).map(|a| format!("mesh_param_{a}")));
    header.extend((0..first.ncomp()).map(|c| format!("F{c}")));
    let mut out = header.join(",");
    out.push('\n');
    for (stage, t, field) in rows {
        for p in 0..grid.len() {
            let mut row = vec![stage.to_string(), format!("{t:.17e}")];
            row.extend(grid.point(p).iter().map(|x| format!("{x:.17e}")));
            row.extend(field.at(p).iter().map(|x| format!("{x:.17e}")));
            out.push_str(&row.join(","));
            out.push('\n');
        }
    }
    out
}

fn trace_summary(trace: &IterationTrace) -> Value {
    json!({
        "status": trace.status,
        "iterations": trace.iterations(),
        "asymptotic_ratio": trace.asymptotic_ratio(),
        "max_ratio": trace.max_ratio(),
        "e0_norm": trace.e0_norm,
        "bound_held": trace.bound_held,
        "recurrence_monitor": trace.passes_recurrence_monitor(),
    })
}

fn monitor_criterion<'a>(traces: impl IntoIterator<Item = &'a IterationTrace>) -> Criterion {
    let ok = traces.into_iter().filter(|t| t.status != Status::Diverged).all(|t| t.passes_recurrence_monitor());
    Criterion::holds("recurrence_monitor", ok)
}

fn solve_local(loaded: &Loaded) -> Result<RunOutput, RunError> {
    let s = &loaded.scenario;
    let tol = &s.tolerances;
    let grid = chart_grid(s, Command::SolveLocal)?;
    let f0 = initial_embedding(s, &grid);
    let p = &s.perturbation;
    let center = if p.center.is_empty() { vec![0.0; grid.dim()] } else { p.center.clone() };
    let bump = ScalarField::from_fn(&grid, |x| {
        let r = x.iter().zip(&center).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt();
        match p.kind {
            PerturbationKind::Zero => 0.0,
            PerturbationKind::Bump => p.amplitude * plateau(r, 0.0, p.width),
        }
    });
    let comps = if grid.dim() == 1 {
        vec![bump.into_values()]
    } else {
        let b = bump.into_values();
        vec![b.clone(), vec![0.0; b.len()], b]
    };
    let f = SymTensorField::new(grid.clone(), comps)?;
    let (u, report) = local_perturb(&f0, &f, &LocalConfig { fixed_point: fixed_point_config(s)? })?;
    let trace = &report.trace;
    let criteria = vec![
        Criterion::at_most("isometry_residual", report.isometry.sup, tol.residual),
        Criterion::at_most("contraction", trace.asymptotic_ratio(), tol.contraction),
        Criterion::at_most("iterations", trace.iterations() as f64, tol.iterations as f64),
        Criterion::holds("iterate_bound", trace.bound_held),
        Criterion::at_most("outside_support", report.outside_support_sup, 0.0),
        monitor_criterion([trace]),
    ];
    let results = json!({
        "embedding": s.chart.embedding,
        "resolution": s.chart.resolution,
        "isometry_residual": report.isometry.sup,
        "residual_worst_point": grid.point(report.isometry.worst_node),
        "outside_support_sup": report.outside_support_sup,
        "u_norm": report.u_norm,
        "bound_ratio": report.bound_ratio,
        "freeness_margin": report.freeness_margin,
        "trace": trace_summary(trace),
    });
    let full = f0.add(&u)?;
    Ok(RunOutput {
        results,
        criteria,
        traces: vec![("fixed_point.csv".into(), trace_csv(trace))],
        embeddings: vec![("local.csv".into(), chart_embedding_csv(&[(0, 0.0, &f0), (1, 0.0, &full)]))],
    })
}

fn chart_family(loaded: &Loaded) -> Result<MetricFamily, RunError> {
    let s = &loaded.scenario;
    let f = &s.family;
    let dim = s.chart.embedding.dim();
    let g0 = initial_metric(s);
    Ok(match f.name {
        FamilyName::Constant => MetricFamily::constant(g0, dim, f.horizon, f.samples)?,
        FamilyName::UniformScale => MetricFamily::uniform_scale(g0, f.rate, dim, f.horizon, f.samples)?,
        FamilyName::BumpBreathing => MetricFamily::bump_breathing(g0, f.amplitude, f.radius, dim, f.horizon, f.samples)?,
        FamilyName::Table => {
            let t = loaded.table.as_ref().ok_or_else(|| RunError::Config("family.table: no table loaded".into()))?;
            MetricFamily::table("table", MetricTable::new(t.x.clone(), t.t.clone(), t.values.clone())?, f.samples)?
        }
        FamilyName::CircleBreathing => return Err(RunError::Config("family.name: circle-breathing needs solve-global".into())),
    })
}

fn solve_chart_family(loaded: &Loaded) -> Result<RunOutput, RunError> {
    let s = &loaded.scenario;
    let tol = &s.tolerances;
    let grid = chart_grid(s, Command::SolveFamily)?;
    let f0 = initial_embedding(s, &grid);
    let family = chart_family(loaded)?;
    let cfg = FamilyConfig { fixed_point: fixed_point_config(s)?, dt_min: s.solver.dt_min, ..FamilyConfig::default() };
    let sol = solve_family(&f0, &family, &cfg)?;
    let r_max = ((sol.samples.len() - 1) / 2).min(2);
    let probe = if r_max > 0 { Some(time_regularity_probe(&sol, r_max)?) } else { None };

    let initial_zero = sol.samples[0].u.max_abs() == 0.0;
    let mut criteria = vec![
        Criterion::holds("initial_perturbation_zero", initial_zero),
        Criterion::at_most("isometry_residual", sol.max_residual(), tol.residual),
        Criterion::holds("iterate_bound", sol.bound_held()),
        Criterion::at_most("stability", sol.max_stability_ratio(), tol.stability),
    ];
    if let Some(p) = &probe {
        let worst = p
            .entries
            .iter()
            .filter(|e| e.fine > e.noise_floor)
            .map(|e| e.ratio)
            .fold(0.0, f64::max);
        criteria.push(Criterion::at_most("time_regularity", worst, tol.probe_ratio));
    }
    criteria.push(monitor_criterion(sol.samples.iter().map(|x| &x.trace)));

    let mut samples_csv = String::from("k,t,u_norm,v_norm,isometry_residual,iterations,asymptotic_ratio,e0_norm\n");
    for (k, x) in sol.samples.iter().enumerate() {
        let _ = writeln!(
            samples_csv,
            "{k},{:.17e},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e}",
            x.t,
            x.u_norm,
            x.v_norm,
            x.residual.sup,
            x.trace.iterations(),
            x.trace.asymptotic_ratio(),
            x.trace.e0_norm
        );
    }
    let mut traces = vec![("samples.csv".to_string(), samples_csv)];
    for (k, x) in sol.samples.iter().enumerate() {
        traces.push((format!("fixed_point_t{k:03}.csv"), trace_csv(&x.trace)));
    }
    if let Some(p) = &probe {
        let mut csv = String::from("r,beta,fine,coarse,ratio,noise_floor,bounded\n");
        for e in &p.entries {
            let beta: Vec<String> = e.beta.iter().map(|b| b.to_string()).collect();
            let _ = writeln!(
                csv,
                "{},{},{:.17e},{:.17e},{:.17e},{:.17e},{}",
                e.r,
                beta.join(":"),
                e.fine,
                e.coarse,
                e.ratio,
                e.noise_floor,
                e.bounded
            );
        }
        traces.push(("time_regularity.csv".into(), csv));
    }
    let fulls: Vec<VecField> = sol.samples.iter().map(|x| f0.add(&x.u)).collect::<isoembed::Result<_>>()?;
    let mut rows: Vec<(usize, f64, &VecField)> = sol.samples.iter().map(|x| (0, x.t, &f0)).collect();
    rows.extend(sol.samples.iter().zip(&fulls).map(|(x, f)| (1, x.t, f)));

    let results = json!({
        "embedding": s.chart.embedding,
        "resolution": s.chart.resolution,
        "family": family.name,
        "horizon_requested": sol.horizon_requested,
        "horizon_used": sol.horizon_used,
        "halvings": sol.halvings,
        "times": values(sol.times()),
        "max_residual": sol.max_residual(),
        "residuals": values(sol.samples.iter().map(|x| x.residual.sup).collect()),
        "u_norms": values(sol.samples.iter().map(|x| x.u_norm).collect()),
        "stability_ratios": values(sol.stability_ratios.clone()),
        "freeness_margin": sol.freeness_margin,
        "time_regularity_dt": probe.as_ref().map(|p| p.dt),
        "traces": sol.samples.iter().map(|x| trace_summary(&x.trace)).collect::<Vec<_>>(),
    });
    Ok(RunOutput { results, criteria, traces, embeddings: vec![("family.csv".into(), chart_embedding_csv(&rows))] })
}

fn atlas_config(manifold: Manifold, mesh: Option<usize>) -> AtlasConfig {
    let base = AtlasConfig::for_manifold(manifold);
    AtlasConfig { mesh: mesh.unwrap_or(base.mesh), ..base }
}

fn solve_global(loaded: &Loaded) -> Result<RunOutput, RunError> {
    let s = &loaded.scenario;
    let tol = &s.tolerances;
    let manifold = Manifold::parse(&s.atlas.manifold)?;
    let atlas = build_atlas_with(manifold, s.atlas.charts, &atlas_config(manifold, s.atlas.mesh))?;
    let f = &s.family;
    let dim = manifold.dim();
    let family = match f.name {
        FamilyName::Constant => constant_family(manifold, f.horizon, f.samples)?,
        FamilyName::CircleBreathing => breathing_family(manifold, f.rate, f.horizon, f.samples)?,
        FamilyName::UniformScale => {
            let rate = f.rate;
            MetricFamily::closed("uniform-scale", dim, f.horizon, f.samples, move |_, t| {
                let c = 1.0 + rate * t;
                if dim == 1 {
                    vec![c]
                } else {
                    vec![c, 0.0, c]
                }
            })?
        }
        FamilyName::BumpBreathing | FamilyName::Table => {
            return Err(RunError::Config("family.name: not a global family".into()));
        }
    };
    let f0 = match manifold {
        Manifold::Circle => GlobalEmbedding::unit_circle(),
        Manifold::FlatTorus => GlobalEmbedding::flat_torus(),
    };
    let cfg = GlueConfig { fixed_point: fixed_point_config(s)?, dt_min: s.solver.dt_min };
    let sol = glue_solve(&f0, &family, &atlas, &cfg)?;

    let mesh_points: Vec<Vec<f64>> = (0..atlas.mesh.len()).map(|k| atlas.mesh.point(k)).collect();
    let pieces = decompose_metric(&atlas, &family)?;
    let samples: Vec<(Vec<f64>, f64)> =
        sol.times.iter().flat_map(|&t| mesh_points.iter().map(move |p| (p.clone(), t))).collect();
    let reconstruction = reconstruction_defect(&atlas, &family, &pieces, &samples).max(atlas.pu_defect(&mesh_points));
    let final_free = sol.final_freeness.iter().copied().fold(f64::INFINITY, f64::min);
    let traces_iter = sol.stages.iter().flat_map(|st| st.samples.iter().map(|x| &x.trace));
    let criteria = vec![
        Criterion::at_most("partition_reconstruction", reconstruction, tol.reconstruction),
        Criterion::at_most("pullback_residual", sol.max_final_residual(), tol.global_residual),
        Criterion::at_most("initial_drift", sol.initial_drift(), 0.0),
        Criterion::above("stage_freeness", sol.min_freeness_ratio(), 1.0),
        Criterion::above("final_freeness", final_free, 1.0),
        monitor_criterion(traces_iter),
    ];

    let mut stages_csv = String::from(
        "stage,chart,t,iterations,asymptotic_ratio,local_residual,partial_residual,freeness_margin,freeness_threshold,outside_displacement\n",
    );
    for (i, st) in sol.stages.iter().enumerate() {
        for x in &st.samples {
            let _ = writeln!(
                stages_csv,
                "{},{},{:.17e},{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                i + 1,
                st.chart,
                x.t,
                x.trace.iterations(),
                x.trace.asymptotic_ratio(),
                x.local_residual,
                x.partial_residual,
                x.freeness_margin,
                x.freeness_threshold,
                x.outside_displacement
            );
        }
    }
    let mut final_csv = String::from("t,pullback_residual,freeness_ratio\n");
    for ((t, r), q) in sol.times.iter().zip(&sol.final_residuals).zip(&sol.final_freeness) {
        let _ = writeln!(final_csv, "{t:.17e},{r:.17e},{q:.17e}");
    }
    let mut embedding = Vec::new();
    sol.write_csv(&mut embedding).map_err(|e| RunError::Solve { criterion: "export".into(), message: e.to_string() })?;

    let results = json!({
        "manifold": s.atlas.manifold,
        "charts": atlas.charts.len(),
        "mesh": atlas.mesh.per_axis,
        "family": family.name,
        "horizon_requested": sol.horizon_requested,
        "horizon_used": sol.horizon_used,
        "halvings": sol.halvings,
        "times": values(sol.times.clone()),
        "final_residuals": values(sol.final_residuals.clone()),
        "final_freeness": values(sol.final_freeness.clone()),
        "initial_drift": sol.initial_drift(),
        "reconstruction_defect": reconstruction,
        "min_stage_freeness_ratio": sol.min_freeness_ratio(),
        "stages": sol.stages.iter().map(|st| json!({
            "chart": st.chart,
            "max_local_residual": st.samples.iter().map(|x| x.local_residual).fold(0.0, f64::max),
            "max_outside_displacement": st.samples.iter().map(|x| x.outside_displacement).fold(0.0, f64::max),
            "traces": st.samples.iter().map(|x| trace_summary(&x.trace)).collect::<Vec<_>>(),
        })).collect::<Vec<_>>(),
    });
    Ok(RunOutput {
        results,
        criteria,
        traces: vec![("stages.csv".into(), stages_csv), ("final.csv".into(), final_csv)],
        embeddings: vec![(
            "global.csv".into(),
            String::from_utf8(embedding).expect("CSV output is ASCII"),
        )],
    })
}

fn verify_appendix(loaded: &Loaded) -> Result<RunOutput, RunError> {
    let s = &loaded.scenario;
    let report = check_inequalities_with(s.appendix.samples, s.alpha, seed(s))?;
    let finite = report
        .product_witness
        .iter()
        .chain(&report.scaled_witness)
        .chain(&report.dot_witness)
        .all(|(_, c)| c.is_finite())
        && report.embedding_witness.iter().all(|(_, _, c)| c.is_finite());
    let criteria = vec![
        Criterion::at_most("product_violations", report.product_violations as f64, 0.0),
        Criterion::at_most("leibniz", report.leibniz_error_max, s.tolerances.leibniz),
        Criterion::holds("finite_witnesses", finite),
    ];
    let mut csv = String::from("family,m,k,constant\n");
    for (name, list) in [("product", &report.product_witness), ("scaled", &report.scaled_witness), ("dot", &report.dot_witness)] {
        for (m, c) in list {
            let _ = writeln!(csv, "{name},{m},,{c:.17e}");
        }
    }
    for (m, k, c) in &report.embedding_witness {
        let _ = writeln!(csv, "embedding,{m},{k},{c:.17e}");
    }
    let results = serde_json::to_value(&report).expect("report serializes");
    Ok(RunOutput { results, criteria, traces: vec![("witnesses.csv".into(), csv)], embeddings: Vec::new() })
}
