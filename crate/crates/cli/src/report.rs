//! `summarize` and `plotdata`: tables and plot series re-aggregated from the
//! persisted replicate records of a run.

use std::fs::File;
use std::path::Path;

use clap::ValueEnum;
use swcrt_core::mc::{
    aggregate, binomial_band, read_replicates_csv, write_summary_csv, ReplicateRecord, SummaryRow,
};
use swcrt_core::{ModelSpec, ScenarioConfig, ScenarioSummary};

use crate::run::{read_manifest, replicate_file, run_path};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Layout {
    /// Bias by model.
    S1,
    /// Percentage SE error by estimator and model.
    S2,
    /// Rejection rate by estimator and model.
    S4,
    /// Every summary field, one row per scenario, model and estimator.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Text,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Figure {
    EstimatesBox,
    SeErrorLines,
    Type1Lines,
    PowerLines,
}

pub struct LoadedScenario {
    pub config: ScenarioConfig,
    /// `None` when the replicate file is missing or unreadable.
    pub records: Option<Vec<ReplicateRecord>>,
    pub summary: Option<ScenarioSummary>,
}

pub fn load_run(run: &Path) -> Result<Vec<LoadedScenario>, CliError> {
    let manifest = read_manifest(run)?;
    let mut out = Vec::new();
    for cfg in manifest.scenarios {
        let id = cfg.scenario_id();
        let path = run_path(run, &replicate_file(&id));
        let records = match File::open(&path) {
            Ok(f) => match read_replicates_csv(f) {
                Ok((_, recs)) => Some(recs),
                Err(e) => {
                    eprintln!("warning: {}: {e}", path.display());
                    None
                }
            },
            Err(_) => {
                eprintln!("warning: missing replicate file {}", path.display());
                None
            }
        };
        let summary = records.as_ref().map(|r| aggregate(&cfg, r));
        out.push(LoadedScenario {
            config: cfg,
            records,
            summary,
        });
    }
    Ok(out)
}

const MISSING: &str = "missing";
const NA: &str = "NA";

fn cell(x: Option<f64>, format: Format, decimals: usize) -> String {
    match (x, format) {
        (None, _) => NA.into(),
        (Some(v), Format::Csv) => format!("{v}"),
        (Some(v), Format::Text) => format!("{v:.decimals$}"),
    }
}

fn key_cells(c: &ScenarioConfig) -> Vec<String> {
    vec![
        c.cohort.label().into(),
        c.effect.label().into(),
        c.n_clusters.to_string(),
        c.n_steps.to_string(),
        c.cluster_size.to_string(),
        format!("{}", c.theta),
    ]
}

const KEY_HEADER: [&str; 6] = ["cohort", "effect", "I", "J", "K", "theta"];

/// Header and rows for a layout.
pub fn table(
    scenarios: &[LoadedScenario],
    layout: Layout,
    format: Format,
) -> (Vec<String>, Vec<Vec<String>>) {
    let mut header: Vec<String> = KEY_HEADER.iter().map(|s| s.to_string()).collect();
    let mut rows = Vec::new();
    let model_cols =
        |h: &mut Vec<String>| h.extend(ModelSpec::ALL.iter().map(|m| m.label().to_string()));
    match layout {
        Layout::S1 => {
            model_cols(&mut header);
            for s in scenarios {
                let mut row = key_cells(&s.config);
                for m in ModelSpec::ALL {
                    row.push(match &s.summary {
                        None => MISSING.into(),
                        Some(sum) => {
                            let r = sum.rows.iter().find(|r| r.model == m);
                            cell(r.and_then(|r| r.bias), format, 3)
                        }
                    });
                }
                rows.push(row);
            }
        }
        Layout::S2 | Layout::S4 => {
            header.push("estimator".into());
            model_cols(&mut header);
            let (metric, decimals): (fn(&SummaryRow) -> Option<f64>, usize) =
                if layout == Layout::S2 {
                    (|r| r.pct_se_error, 1)
                } else {
                    (|r| r.rejection_rate, 3)
                };
            for s in scenarios {
                for &e in &s.config.estimators {
                    let mut row = key_cells(&s.config);
                    row.push(e.display_name().into());
                    for m in ModelSpec::ALL {
                        row.push(match &s.summary {
                            None => MISSING.into(),
                            Some(sum) => cell(sum.row(m, e).and_then(metric), format, decimals),
                        });
                    }
                    rows.push(row);
                }
            }
        }
        Layout::Grid => unreachable!("grid layout is written directly"),
    }
    (header, rows)
}

pub fn render_text(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = line(header) + "\n";
    for r in rows {
        out += &line(r);
        out.push('\n');
    }
    out
}

fn render_csv(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .map_err(|e| CliError::Io(e.to_string()))?;
    for r in rows {
        w.write_record(r).map_err(|e| CliError::Io(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

pub fn summarize(run: &Path, layout: Layout, format: Format) -> Result<Vec<u8>, CliError> {
    let scenarios = load_run(run)?;
    if layout == Layout::Grid {
        let summaries: Vec<ScenarioSummary> =
            scenarios.into_iter().filter_map(|s| s.summary).collect();
        let mut buf = Vec::new();
        write_summary_csv(&summaries, &mut buf).map_err(|e| CliError::Io(e.to_string()))?;
        if format == Format::Csv {
            return Ok(buf);
        }
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        let header: Vec<String> = rdr
            .headers()
            .expect("own csv")
            .iter()
            .map(String::from)
            .collect();
        let rows: Vec<Vec<String>> = rdr
            .records()
            .map(|r| r.expect("own csv").iter().map(String::from).collect())
            .collect();
        return Ok(render_text(&header, &rows).into_bytes());
    }
    let (header, rows) = table(&scenarios, layout, format);
    match format {
        Format::Text => Ok(render_text(&header, &rows).into_bytes()),
        Format::Csv => render_csv(&header, &rows),
    }
}

pub fn plotdata(run: &Path, figure: Figure) -> Result<Vec<u8>, CliError> {
    let scenarios = load_run(run)?;
    let mut header: Vec<String> = [
        "scenario_id",
        "cohort",
        "effect",
        "I",
        "J",
        "K",
        "theta",
        "model",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    let facets = |c: &ScenarioConfig, m: ModelSpec| {
        let mut v = vec![c.scenario_id()];
        v.extend(key_cells(c).into_iter().take(5));
        v.push(format!("{}", c.theta));
        v.push(m.label().into());
        v
    };
    match figure {
        Figure::EstimatesBox => {
            header.extend(["replicate", "theta_hat", "converged"].map(String::from));
            for s in &scenarios {
                let Some(records) = &s.records else { continue };
                let first = s.config.estimators[0];
                for r in records.iter().filter(|r| r.estimator == first) {
                    let mut row = facets(&s.config, r.model);
                    row.push((r.replicate + 1).to_string());
                    row.push(cell(r.theta_hat, Format::Csv, 0));
                    row.push(r.converged.to_string());
                    rows.push(row);
                }
            }
        }
        Figure::SeErrorLines | Figure::Type1Lines | Figure::PowerLines => {
            header.extend(["series", "x", "y"].map(String::from));
            if figure == Figure::Type1Lines {
                header.extend(["band_low", "band_high"].map(String::from));
            }
            for s in &scenarios {
                let c = &s.config;
                let keep = match figure {
                    Figure::Type1Lines => c.theta == 0.0,
                    Figure::PowerLines => c.theta != 0.0,
                    _ => true,
                };
                let Some(sum) = &s.summary else { continue };
                if !keep {
                    continue;
                }
                for r in &sum.rows {
                    let mut row = facets(c, r.model);
                    row.push(r.estimator.label().into());
                    row.push(c.n_clusters.to_string());
                    let y = if figure == Figure::SeErrorLines {
                        r.pct_se_error
                    } else {
                        r.rejection_rate
                    };
                    row.push(cell(y, Format::Csv, 0));
                    if figure == Figure::Type1Lines {
                        let (lo, hi) = binomial_band((r.n_used - r.n_failed).max(1), c.alpha);
                        row.push(format!("{lo}"));
                        row.push(format!("{hi}"));
                    }
                    rows.push(row);
                }
            }
        }
    }
    render_csv(&header, &rows)
}
