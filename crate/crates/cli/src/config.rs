//! Scenario files: one TOML document per run.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// A configuration problem, reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}, field `{}`: {}", self.field, self.message),
            None => write!(f, "field `{}`: {}", self.field, self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub chart: ChartSpec,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub family: FamilySpec,
    #[serde(default)]
    pub atlas: AtlasSpec,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub appendix: AppendixSpec,
}

fn default_alpha() -> f64 {
    0.5
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingKind {
    /// `(x, x²)` on the interval.
    Parabola,
    /// `(x, y, x²/2, xy, y²/2)` on the disk.
    Quadric,
    /// `(cos Lx, sin Lx)` with `L = arc_half_width`.
    CircleArc,
    /// `(x, 0)`: not free.
    Line,
}

impl EmbeddingKind {
    pub fn dim(self) -> usize {
        match self {
            EmbeddingKind::Quadric => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChartSpec {
    pub embedding: EmbeddingKind,
    pub resolution: usize,
    /// Plateau and support radius of the solve cutoff; see [`ChartSpec::cutoff_radii`].
    pub radii: Option<[f64; 2]>,
    pub arc_half_width: f64,
}

impl Default for ChartSpec {
    fn default() -> Self {
        Self { embedding: EmbeddingKind::Parabola, resolution: 401, radii: None, arc_half_width: 0.75 * std::f64::consts::PI }
    }
}

impl ChartSpec {
    /// Families need room for the time cutoff, which is 1 on `|x| <= 0.5`
    /// and 0 from `|x| = 0.75` on.
    pub fn cutoff_radii(&self, command: Command) -> [f64; 2] {
        self.radii.unwrap_or(if command == Command::SolveFamily { [0.75, 0.95] } else { [0.5, 0.9] })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    Zero,
    Bump,
}

/// Metric change `f = amplitude·b(|x - center|)·δ` for `solve-local`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationSpec {
    pub kind: PerturbationKind,
    pub amplitude: f64,
    pub width: f64,
    pub center: Vec<f64>,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        Self { kind: PerturbationKind::Bump, amplitude: 0.01, width: 0.475, center: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    Constant,
    UniformScale,
    BumpBreathing,
    CircleBreathing,
    Table,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FamilySpec {
    pub name: FamilyName,
    pub rate: f64,
    pub amplitude: f64,
    pub radius: f64,
    pub horizon: f64,
    pub samples: usize,
    /// Sample table, relative to the config file.
    pub table: Option<PathBuf>,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self { name: FamilyName::UniformScale, rate: 0.05, amplitude: 0.05, radius: 0.5, horizon: 1.0, samples: 8, table: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AtlasSpec {
    pub manifold: String,
    pub charts: usize,
    /// Mesh points per angle; 2048 on the circle and 40 on the torus when unset.
    pub mesh: Option<usize>,
}

impl Default for AtlasSpec {
    fn default() -> Self {
        Self { manifold: "circle".into(), charts: 2, mesh: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSpec {
    pub tol: f64,
    pub max_iter: usize,
    pub dt_min: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: 60, dt_min: 1e-3 }
    }
}

/// Thresholds asserted by each command; a violated one gives exit code 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Isometry residual on a chart.
    pub residual: f64,
    /// Pullback residual of the glued embedding.
    pub global_residual: f64,
    pub contraction: f64,
    pub iterations: usize,
    pub stability: f64,
    pub probe_ratio: f64,
    pub identity: f64,
    pub reconstruction: f64,
    pub leibniz: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            residual: 1e-6,
            global_residual: 1e-5,
            contraction: 0.6,
            iterations: 40,
            stability: 1.1,
            probe_ratio: 2.0,
            identity: 1e-10,
            reconstruction: 1e-10,
            leibniz: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppendixSpec {
    pub samples: usize,
}

impl Default for AppendixSpec {
    fn default() -> Self {
        Self { samples: 100 }
    }
}

/// Metric samples read from a table file: first row `t,x_0,...,x_n`, then
/// one row `t_k,g(x_0,t_k),...` per time.
#[derive(Debug, Clone, PartialEq)]
pub struct TableData {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub digest: String,
}

/// A parsed, validated scenario together with everything it references.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub scenario: Scenario,
    pub table: Option<TableData>,
    pub hash: String,
}

/// Command-line overrides applied after parsing.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    CheckFree,
    SolveLocal,
    SolveFamily,
    SolveGlobal,
    VerifyAppendix,
}

impl Command {
    pub fn tag(self) -> &'static str {
        match self {
            Command::CheckFree => "check-free",
            Command::SolveLocal => "solve-local",
            Command::SolveFamily => "solve-family",
            Command::SolveGlobal => "solve-global",
            Command::VerifyAppendix => "verify-appendix",
        }
    }
}

pub fn load(path: &Path, command: Command, overrides: Overrides) -> Result<Loaded, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { field: "--config".into(), line: None, message: format!("{}: {e}", path.display()) })?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base, command, overrides)
}

pub fn parse(text: &str, base: &Path, command: Command, overrides: Overrides) -> Result<Loaded, ConfigError> {
    let mut scenario: Scenario = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| line_of(text, s.start));
        ConfigError { field: field_from_message(e.message()), line, message: e.message().trim().to_string() }
    })?;
    if let Some(seed) = overrides.seed {
        scenario.seed = Some(seed);
    }
    if let Some(n) = overrides.resolution {
        match command {
            Command::SolveGlobal => scenario.atlas.mesh = Some(n),
            _ => scenario.chart.resolution = n,
        }
    }
    let fail = |field: &str, message: String| {
        let line = locate(text, field);
        ConfigError { field: field.to_string(), line, message }
    };
    validate(&scenario, command).map_err(|(field, msg)| fail(field, msg))?;
    let table = match (&scenario.family.table, scenario.family.name, command) {
        (Some(p), FamilyName::Table, Command::SolveFamily) => Some(read_table(&base.join(p))?),
        (None, FamilyName::Table, Command::SolveFamily) => {
            return Err(fail("family.table", "the table family needs a `table` path".into()));
        }
        _ => None,
    };
    let hash = config_hash(&scenario, table.as_ref());
    Ok(Loaded { scenario, table, hash })
}

/// SHA-256 of the canonical JSON form plus any referenced table.
pub fn config_hash(scenario: &Scenario, table: Option<&TableData>) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(scenario).expect("scenario serializes"));
    if let Some(t) = table {
        h.update(t.digest.as_bytes());
    }
    hex::encode(h.finalize())
}

fn validate(s: &Scenario, command: Command) -> Result<(), (&'static str, String)> {
    let positive = |field: &'static str, v: f64| {
        if v > 0.0 && v.is_finite() {
            Ok(())
        } else {
            Err((field, format!("must be a positive number, got {v}")))
        }
    };
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return Err(("name", "must be non-empty and contain no path separators".into()));
    }
    if !(s.alpha > 0.0 && s.alpha < 1.0) {
        return Err(("alpha", format!("must lie in (0, 1), got {}", s.alpha)));
    }
    positive("solver.tol", s.solver.tol)?;
    positive("solver.dt_min", s.solver.dt_min)?;
    if s.solver.max_iter == 0 {
        return Err(("solver.max_iter", "must be at least 1".into()));
    }
    let chart = matches!(command, Command::CheckFree | Command::SolveLocal | Command::SolveFamily);
    if chart {
        let c = &s.chart;
        if !(17..=4097).contains(&c.resolution) {
            return Err(("chart.resolution", format!("must lie in 17..=4097, got {}", c.resolution)));
        }
        if c.embedding.dim() == 2 && c.resolution > 257 {
            return Err(("chart.resolution", format!("2-D charts allow at most 257 nodes per axis, got {}", c.resolution)));
        }
        let [r1, r2] = c.cutoff_radii(command);
        if !(0.0 < r1 && r1 < r2 && r2 < 1.0) {
            return Err(("chart.radii", format!("need 0 < R1 < R2 < 1, got [{r1}, {r2}]")));
        }
        if command == Command::SolveFamily && r1 < 0.75 {
            return Err(("chart.radii", format!("solve-family needs R1 >= 0.75 to contain the time cutoff, got {r1}")));
        }
        positive("chart.arc_half_width", c.arc_half_width)?;
    }
    if command == Command::SolveLocal {
        let p = &s.perturbation;
        if !p.amplitude.is_finite() {
            return Err(("perturbation.amplitude", "must be finite".into()));
        }
        positive("perturbation.width", p.width)?;
        if !(p.center.is_empty() || p.center.len() == s.chart.embedding.dim()) {
            return Err(("perturbation.center", format!("needs {} coordinates", s.chart.embedding.dim())));
        }
    }
    if matches!(command, Command::SolveFamily | Command::SolveGlobal) {
        let f = &s.family;
        positive("family.horizon", f.horizon)?;
        if !(2..=1025).contains(&f.samples) {
            return Err(("family.samples", format!("must lie in 2..=1025, got {}", f.samples)));
        }
        if !f.rate.is_finite() || !f.amplitude.is_finite() {
            return Err(("family.rate", "rate and amplitude must be finite".into()));
        }
        positive("family.radius", f.radius)?;
        match (command, f.name) {
            (Command::SolveFamily, FamilyName::CircleBreathing) => {
                return Err(("family.name", "circle-breathing is a global family; use solve-global".into()));
            }
            (Command::SolveFamily, FamilyName::Table) if s.chart.embedding.dim() != 1 => {
                return Err(("family.name", "sample tables are supported on 1-D charts only".into()));
            }
            (Command::SolveGlobal, FamilyName::BumpBreathing | FamilyName::Table) => {
                return Err(("family.name", "solve-global supports constant, uniform-scale and circle-breathing".into()));
            }
            _ => {}
        }
    }
    if command == Command::SolveGlobal {
        let a = &s.atlas;
        if !matches!(a.manifold.as_str(), "circle" | "flat-torus" | "torus") {
            return Err(("atlas.manifold", format!("expected circle or flat-torus, got {:?}", a.manifold)));
        }
        if !(2..=64).contains(&a.charts) {
            return Err(("atlas.charts", format!("must lie in 2..=64, got {}", a.charts)));
        }
        let torus = a.manifold != "circle";
        match a.mesh {
            Some(m) if torus && !(8..=256).contains(&m) => {
                return Err(("atlas.mesh", format!("torus meshes must lie in 8..=256 per angle, got {m}")));
            }
            Some(m) if !torus && !(16..=16384).contains(&m) => {
                return Err(("atlas.mesh", format!("must lie in 16..=16384, got {m}")));
            }
            _ => {}
        }
    }
    if command == Command::VerifyAppendix && !(1..=100_000).contains(&s.appendix.samples) {
        return Err(("appendix.samples", format!("must lie in 1..=100000, got {}", s.appendix.samples)));
    }
    let t = &s.tolerances;
    for (field, v) in [
        ("tolerances.residual", t.residual),
        ("tolerances.global_residual", t.global_residual),
        ("tolerances.contraction", t.contraction),
        ("tolerances.stability", t.stability),
        ("tolerances.probe_ratio", t.probe_ratio),
        ("tolerances.identity", t.identity),
        ("tolerances.reconstruction", t.reconstruction),
        ("tolerances.leibniz", t.leibniz),
    ] {
        positive(field, v)?;
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<TableData, ConfigError> {
    let err = |line: Option<usize>, message: String| ConfigError {
        field: format!("family.table ({})", path.display()),
        line,
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| err(None, e.to_string()))?;
    let parse_row = |line: usize, row: &str| -> Result<Vec<f64>, ConfigError> {
        row.split(',').map(|c| c.trim().parse::<f64>().map_err(|_| err(Some(line), format!("not a number: {:?}", c.trim())))).collect()
    };
    let mut rows = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hl, header) = rows.next().ok_or_else(|| err(None, "empty table".into()))?;
    let cells: Vec<&str> = header.split(',').map(str::trim).collect();
    if cells.first() != Some(&"t") {
        return Err(err(Some(hl + 1), "header must start with `t`".into()));
    }
    let x = parse_row(hl + 1, &cells[1..].join(","))?;
    let (mut t, mut values) = (Vec::new(), Vec::new());
    for (i, row) in rows {
        let parsed = parse_row(i + 1, row)?;
        if parsed.len() != x.len() + 1 {
            return Err(err(Some(i + 1), format!("expected {} columns, got {}", x.len() + 1, parsed.len())));
        }
        t.push(parsed[0]);
        values.push(parsed[1..].to_vec());
    }
    isoembed::family::MetricTable::new(x.clone(), t.clone(), values.clone()).map_err(|e| err(None, e.to_string()))?;
    if t[0] != 0.0 {
        return Err(err(None, "the first time sample must be 0".into()));
    }
    let digest = hex::encode(Sha256::digest(text.as_bytes()));
    Ok(TableData { x, t, values, digest })
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line of `key = ...` inside `[section]` for a dotted field path.
fn locate(text: &str, field: &str) -> Option<usize> {
    let (section, key) = match field.rsplit_once('.') {
        Some((s, k)) => (Some(s), k),
        None => (None, field),
    };
    let mut current: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = Some(name.trim().to_string());
            continue;
        }
        let in_section = current.as_deref() == section;
        if in_section && line.split('=').next().map(str::trim) == Some(key) {
            return Some(i + 1);
        }
    }
    None
}

fn field_from_message(message: &str) -> String {
    // serde messages quote the offending key in backticks.
    message
        .split('`')
        .nth(1)
        .filter(|s| !s.is_empty() && !s.contains(' '))
        .map(str::to_string)
        .unwrap_or_else(|| "<document>".into())
}
