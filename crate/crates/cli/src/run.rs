//! `simulate`: run scenarios and write replicate CSVs, the summary CSV and
//! the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use swcrt_core::mc::{run_scenario, write_replicates_csv, write_summary_csv};
use swcrt_core::{ScenarioConfig, ScenarioSummary};

use crate::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const SUMMARY: &str = "summary.csv";
pub const REPLICATE_DIR: &str = "replicates";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the run directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioTiming {
    pub scenario_id: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub config_path: Option<String>,
    pub output_dir: String,
    pub workers: usize,
    pub scenarios: Vec<ScenarioConfig>,
    pub files: Vec<FileEntry>,
    pub total_seconds: f64,
    pub timings: Vec<ScenarioTiming>,
}

pub fn replicate_file(scenario_id: &str) -> String {
    format!("{REPLICATE_DIR}/{scenario_id}.csv")
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_tracked(
    dir: &Path,
    rel: &str,
    bytes: &[u8],
    files: &mut Vec<FileEntry>,
) -> Result<(), CliError> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| io_err(&path, e))?;
    files.push(FileEntry {
        path: rel.to_string(),
        sha256: Sha256::digest(bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect(),
        bytes: bytes.len() as u64,
    });
    Ok(())
}

pub fn simulate(
    scenarios: Vec<ScenarioConfig>,
    config_path: Option<&Path>,
    out: &Path,
    workers: usize,
    quiet: bool,
) -> Result<RunManifest, CliError> {
    let rep_dir = out.join(REPLICATE_DIR);
    fs::create_dir_all(&rep_dir).map_err(|e| io_err(&rep_dir, e))?;

    let start = Instant::now();
    let mut files = Vec::new();
    let mut summaries: Vec<ScenarioSummary> = Vec::new();
    let mut timings = Vec::new();
    for (n, cfg) in scenarios.iter().enumerate() {
        let t0 = Instant::now();
        let run = run_scenario(cfg, workers).map_err(|e| CliError::Config(e.to_string()))?;
        let id = cfg.scenario_id();
        let mut buf = Vec::new();
        write_replicates_csv(&id, &run.records, &mut buf)
            .map_err(|e| CliError::Io(e.to_string()))?;
        write_tracked(out, &replicate_file(&id), &buf, &mut files)?;
        let seconds = t0.elapsed().as_secs_f64();
        if !quiet {
            eprintln!("[{}/{}] {id}: {seconds:.1}s", n + 1, scenarios.len());
        }
        timings.push(ScenarioTiming {
            scenario_id: id,
            seconds,
        });
        summaries.push(run.summary);
    }
    let mut buf = Vec::new();
    write_summary_csv(&summaries, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
    write_tracked(out, SUMMARY, &buf, &mut files)?;

    let manifest = RunManifest {
        tool: "swcrt".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_path: config_path.map(|p| p.display().to_string()),
        output_dir: out.display().to_string(),
        workers,
        scenarios,
        files,
        total_seconds: start.elapsed().as_secs_f64(),
        timings,
    };
    let path = out.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(run: &Path) -> Result<RunManifest, CliError> {
    let path = run.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

pub fn run_path(run: &Path, rel: &str) -> PathBuf {
    run.join(rel)
}
