//! Run directories and the merged report.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::run::{Criterion, RunOutput};

pub const SCHEMA_VERSION: u32 = 1;
pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize)]
pub struct Summary<'a> {
    pub schema_version: u32,
    pub command: &'a str,
    pub name: &'a str,
    pub config_hash: &'a str,
    pub seed: u64,
    pub pass: bool,
    pub failed_criteria: Vec<&'a str>,
    pub error: Option<String>,
    pub criteria: &'a [Criterion],
    pub results: &'a Value,
    /// Files written next to the summary, relative to the run directory.
    pub artifacts: Vec<String>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// Writes one run directory, replacing the artifacts of an earlier run there.
pub fn write_run(out: &Path, summary: &mut Summary<'_>, output: &RunOutput) -> io::Result<()> {
    fs::create_dir_all(out)?;
    for sub in ["traces", "embeddings"] {
        let dir = out.join(sub);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
    }
    let mut written = Vec::new();
    for (sub, files) in [("traces", &output.traces), ("embeddings", &output.embeddings)] {
        if files.is_empty() {
            continue;
        }
        fs::create_dir_all(out.join(sub))?;
        for (name, text) in files {
            let rel = format!("{sub}/{name}");
            fs::write(out.join(&rel), text)?;
            written.push(rel);
        }
    }
    summary.artifacts = written;
    fs::write(out.join(SUMMARY), to_json(summary))
}

/// Why a report could not be produced.
#[derive(Debug)]
pub enum ReportError {
    Missing(String),
    Io(io::Error),
}

impl From<io::Error> for ReportError {
    fn from(e: io::Error) -> Self {
        ReportError::Io(e)
    }
}

pub struct ReportOutcome {
    pub runs: usize,
    pub failing: Vec<String>,
    pub json_path: PathBuf,
}

/// Run directories below `root`: `root` itself if it holds a summary, and
/// every immediate subdirectory that does, ordered by name.
fn find_runs(root: &Path) -> Result<Vec<(String, PathBuf)>, ReportError> {
    if !root.is_dir() {
        return Err(ReportError::Missing(format!("{} is not a directory", root.display())));
    }
    let mut runs = Vec::new();
    if root.join(SUMMARY).is_file() {
        runs.push((".".to_string(), root.to_path_buf()));
    }
    let mut subdirs: Vec<(String, PathBuf)> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(SUMMARY).is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    subdirs.sort();
    runs.extend(subdirs);
    if runs.is_empty() {
        return Err(ReportError::Missing(format!("no {SUMMARY} found in {} or its subdirectories", root.display())));
    }
    Ok(runs)
}

/// Merges every run below `root` into `report.json` and `report.csv`, and
/// copies embedding CSVs to `report/embeddings/<run>__<file>`.
pub fn emit_report(root: &Path) -> Result<ReportOutcome, ReportError> {
    let runs = find_runs(root)?;
    let mut entries = Vec::new();
    let mut copies = Vec::new();
    for (label, dir) in &runs {
        let path = dir.join(SUMMARY);
        let text = fs::read_to_string(&path)?;
        let summary: Value = serde_json::from_str(&text)
            .map_err(|e| ReportError::Missing(format!("{}: unreadable summary: {e}", path.display())))?;
        if summary.get("schema_version").and_then(Value::as_u64) != Some(u64::from(SCHEMA_VERSION)) {
            return Err(ReportError::Missing(format!("{}: unsupported schema_version", path.display())));
        }
        let artifacts: Vec<String> = summary
            .get("artifacts")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect())
            .unwrap_or_default();
        for rel in &artifacts {
            let file = dir.join(rel);
            if !file.is_file() {
                return Err(ReportError::Missing(format!("{}: listed artifact {rel} is missing", dir.display())));
            }
            if let Some(name) = rel.strip_prefix("embeddings/") {
                let run = if label == "." { "root" } else { label.as_str() };
                copies.push((file, format!("{run}__{name}")));
            }
        }
        entries.push(serde_json::json!({ "run": label, "summary": summary }));
    }

    let target = root.join("report").join("embeddings");
    if target.exists() {
        fs::remove_dir_all(&target)?;
    }
    if !copies.is_empty() {
        fs::create_dir_all(&target)?;
        for (from, name) in &copies {
            fs::copy(from, target.join(name))?;
        }
    }

    let mut csv = String::from("run,command,name,config_hash,pass,failed_criteria\n");
    let mut failing = Vec::new();
    for e in &entries {
        let s = &e["summary"];
        let field = |k: &str| s.get(k).and_then(Value::as_str).unwrap_or("").to_string();
        let pass = s.get("pass").and_then(Value::as_bool).unwrap_or(false);
        let failed: Vec<&str> = s
            .get("failed_criteria")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(Value::as_str).collect())
            .unwrap_or_default();
        let run = e["run"].as_str().unwrap_or("");
        if !pass {
            failing.push(run.to_string());
        }
        csv.push_str(&format!(
            "{run},{},{},{},{pass},{}\n",
            field("command"),
            field("name"),
            field("config_hash"),
            failed.join(";")
        ));
    }
    let report = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "run_count": entries.len(),
        "runs": entries,
    });
    let json_path = root.join("report.json");
    fs::write(&json_path, to_json(&report))?;
    fs::write(root.join("report.csv"), csv)?;
    Ok(ReportOutcome { runs: runs.len(), failing, json_path })
}
