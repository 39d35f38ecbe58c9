//! Run directory writers.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use fcil_core::orchestrator::SuiteCell;
use fcil_core::{ExperimentConfig, MetricsReport};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Output(format!("{}: {e}", path.display()))
}

/// Seconds since the epoch, or `SOURCE_DATE_EPOCH` when it is set.
pub fn now_unix() -> u64 {
    if let Some(v) = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse().ok())
    {
        return v;
    }
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation; zero for a single value.
fn std_dev(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Seed-averaged metrics of one row.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RowSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    /// Mean accuracy after each task.
    pub accuracies: Vec<f64>,
    pub final_accuracy: f64,
    pub final_accuracy_std: f64,
    pub average_accuracy: f64,
    pub degradation: f64,
    pub comm_cost_total_bytes: f64,
}

impl RowSummary {
    fn from_runs(label: &str, runs: &[&MetricsReport]) -> Self {
        let tasks = runs.iter().map(|r| r.accuracies.len()).min().unwrap_or(0);
        let col = |f: &dyn Fn(&MetricsReport) -> f64| runs.iter().map(|r| f(r)).collect::<Vec<_>>();
        let finals = col(&|r| r.final_accuracy);
        Self {
            label: label.to_string(),
            seeds: runs.iter().map(|r| r.seed).collect(),
            accuracies: (0..tasks)
                .map(|t| mean(&col(&|r| r.accuracies[t])))
                .collect(),
            final_accuracy: mean(&finals),
            final_accuracy_std: std_dev(&finals),
            average_accuracy: mean(&col(&|r| r.average_accuracy)),
            degradation: mean(&col(&|r| r.degradation)),
            comm_cost_total_bytes: mean(&col(&|r| r.comm_cost_total_bytes as f64)),
        }
    }
}

/// Groups suite cells by row label, in row order.
pub fn summarize(rows: &[(String, ExperimentConfig)], cells: &[SuiteCell]) -> Vec<RowSummary> {
    rows.iter()
        .map(|(label, _)| {
            let runs: Vec<&MetricsReport> = cells
                .iter()
                .filter(|c| &c.label == label)
                .map(|c| &c.output.report)
                .collect();
            RowSummary::from_runs(label, &runs)
        })
        .collect()
}

/// Layout of `table.csv`.
#[derive(Clone, Debug)]
pub enum TableKind {
    /// One row per method: seed means, then the same columns for every seed.
    Methods,
    /// As `Methods`, preceded by the seven flag columns.
    Ablation,
    /// `method@alpha` rows pivoted into one column per alpha plus a delta.
    Sweep(Vec<f64>),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config_path: Option<PathBuf>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub files: Vec<String>,
}

pub struct RunDir {
    dir: PathBuf,
}

impl RunDir {
    pub fn create(dir: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
        })
    }

    fn write(&self, name: &str, body: &str) -> Result<(), CliError> {
        let path = self.dir.join(name);
        fs::write(&path, body).map_err(|e| io_err(&path, e))
    }

    pub fn write_report(
        &self,
        command: &str,
        cfg: &ExperimentConfig,
        rows: &[(String, ExperimentConfig)],
        cells: &[SuiteCell],
    ) -> Result<(), CliError> {
        let summaries = summarize(rows, cells);
        let rows_json: Vec<_> = rows
            .iter()
            .zip(&summaries)
            .map(|((label, row_cfg), summary)| {
                let runs: Vec<&MetricsReport> = cells
                    .iter()
                    .filter(|c| &c.label == label)
                    .map(|c| &c.output.report)
                    .collect();
                json!({
                    "label": label,
                    "methods": row_cfg.methods,
                    "dirichlet_alpha": row_cfg.dirichlet_alpha,
                    "tasks": row_cfg.tasks,
                    "rounds": row_cfg.rounds,
                    "summary": summary,
                    "runs": runs,
                })
            })
            .collect();
        let report = json!({
            "command": command,
            "config_hash": cfg.hash(),
            "seeds": cfg.seeds,
            "rows": rows_json,
        });
        let text = serde_json::to_string_pretty(&report).map_err(|e| io_err(&self.dir, e))?;
        self.write("report.json", &(text + "\n"))
    }

    pub fn write_table(
        &self,
        kind: TableKind,
        cfg: &ExperimentConfig,
        rows: &[(String, ExperimentConfig)],
        cells: &[SuiteCell],
    ) -> Result<(), CliError> {
        let summaries = summarize(rows, cells);
        let mut out = String::new();
        match kind {
            TableKind::Methods | TableKind::Ablation => {
                let ablation = matches!(kind, TableKind::Ablation);
                let mut header = vec!["label".to_string()];
                if ablation {
                    header.extend(["cw", "kd", "mr", "ca", "ab", "dc", "gp"].map(String::from));
                }
                header.extend((1..=cfg.tasks).map(|t| format!("A_{t}")));
                header.extend(["A_T", "A_bar", "PD", "A_T_std"].map(String::from));
                for s in &cfg.seeds {
                    header.extend((1..=cfg.tasks).map(|t| format!("seed{s}_A_{t}")));
                    header.extend(["A_T", "A_bar", "PD"].map(|m| format!("seed{s}_{m}")));
                }
                out.push_str(&header.join(","));
                out.push('\n');
                for ((_, row_cfg), s) in rows.iter().zip(&summaries) {
                    let mut line = vec![csv_field(&s.label)];
                    if ablation {
                        let m = row_cfg.methods;
                        line.extend(
                            [m.cw, m.kd, m.mr, m.ca, m.ab, m.dc, m.gp]
                                .map(|b| u8::from(b).to_string()),
                        );
                    }
                    line.extend(
                        (0..cfg.tasks)
                            .map(|t| s.accuracies.get(t).map_or(String::new(), |a| a.to_string())),
                    );
                    line.extend(
                        [
                            s.final_accuracy,
                            s.average_accuracy,
                            s.degradation,
                            s.final_accuracy_std,
                        ]
                        .map(|v| v.to_string()),
                    );
                    for seed in &cfg.seeds {
                        let report = cells
                            .iter()
                            .find(|c| c.label == s.label && c.seed == *seed)
                            .map(|c| &c.output.report);
                        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
                        line.extend(
                            (0..cfg.tasks)
                                .map(|t| opt(report.and_then(|r| r.accuracies.get(t).copied()))),
                        );
                        line.extend(
                            [
                                report.map(|r| r.final_accuracy),
                                report.map(|r| r.average_accuracy),
                                report.map(|r| r.degradation),
                            ]
                            .map(opt),
                        );
                    }
                    out.push_str(&line.join(","));
                    out.push('\n');
                }
            }
            TableKind::Sweep(alphas) => {
                let mut header = vec!["method".to_string()];
                header.extend(alphas.iter().map(|a| format!("alpha_{a}")));
                header.push(format!(
                    "delta_{}_minus_{}",
                    alphas.last().unwrap_or(&0.0),
                    alphas.first().unwrap_or(&0.0)
                ));
                out.push_str(&header.join(","));
                out.push('\n');
                let mut methods: Vec<&str> = Vec::new();
                for s in &summaries {
                    let name = s.label.split('@').next().unwrap_or(&s.label);
                    if !methods.contains(&name) {
                        methods.push(name);
                    }
                }
                for name in methods {
                    let values: Vec<Option<f64>> = alphas
                        .iter()
                        .map(|a| {
                            summaries
                                .iter()
                                .find(|s| s.label == format!("{name}@{a}"))
                                .map(|s| s.final_accuracy)
                        })
                        .collect();
                    let mut line = vec![csv_field(name)];
                    line.extend(
                        values
                            .iter()
                            .map(|v| v.map_or(String::new(), |v| v.to_string())),
                    );
                    let delta = match (values.first(), values.last()) {
                        (Some(Some(lo)), Some(Some(hi))) => (hi - lo).to_string(),
                        _ => String::new(),
                    };
                    line.push(delta);
                    out.push_str(&line.join(","));
                    out.push('\n');
                }
            }
        }
        self.write("table.csv", &out)
    }

    /// One JSON object per line: every client trace, then every aggregation
    /// record, tagged with the row label and seed.
    pub fn write_traces(&self, cells: &[SuiteCell]) -> Result<(), CliError> {
        let path = self.dir.join("traces.jsonl");
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        for cell in cells {
            for trace in &cell.output.client_traces {
                let line = json!({"kind": "client", "label": cell.label, "seed": cell.seed, "trace": trace});
                writeln!(w, "{line}").map_err(|e| io_err(&path, e))?;
            }
            for record in &cell.output.aggregation {
                let line = json!({"kind": "aggregation", "label": cell.label, "seed": cell.seed, "record": record});
                writeln!(w, "{line}").map_err(|e| io_err(&path, e))?;
            }
        }
        w.flush().map_err(|e| io_err(&path, e))
    }

    pub fn write_manifest(
        &self,
        command: &str,
        cfg: &ExperimentConfig,
        config_path: Option<&Path>,
        started: u64,
    ) -> Result<(), CliError> {
        let manifest = RunManifest {
            version: version(),
            command: command.to_string(),
            config_hash: cfg.hash(),
            config_path: config_path.map(Path::to_path_buf),
            config: cfg.clone(),
            seeds: cfg.seeds.clone(),
            started_unix: started,
            finished_unix: now_unix(),
            files: ["report.json", "table.csv", "traces.jsonl", "manifest.json"]
                .map(String::from)
                .to_vec(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&self.dir, e))?;
        self.write("manifest.json", &(text + "\n"))
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// `git describe` of the working tree when available, else the crate version.
fn version() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| format!("{} ({})", env!("CARGO_PKG_VERSION"), s.trim()))
        .unwrap_or_else(|| env!("CARGO_PKG_VERSION").to_string())
}
