//! Result tables. CSV is canonical: a block of `#` lines carrying the
//! command and the full config, then a header and one row per
//! method × condition × seed. Wall-clock times live in a sidecar file so
//! the CSV bytes depend only on the config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{parse_with_overrides, ExperimentConfig};
use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ResultRow {
    pub method: String,
    pub condition: String,
    pub subset: String,
    pub adapt_phi: bool,
    pub corruption: String,
    pub seed: u64,
    pub examples: usize,
    pub acc_before: f64,
    pub acc_after: f64,
    pub delta: f64,
    /// Mean objective at each adaptation step, averaged over examples.
    pub mean_loss_trajectory: Vec<f64>,
    pub wall_clock: Duration,
}

/// The serialised shape of a row.
#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    method: String,
    condition: String,
    subset: String,
    adapt_phi: bool,
    corruption: String,
    seed: u64,
    examples: usize,
    acc_before: f64,
    acc_after: f64,
    delta: f64,
    mean_loss_trajectory: String,
}

#[derive(Debug, Serialize)]
struct TimingRow<'a> {
    method: &'a str,
    condition: &'a str,
    seed: u64,
    wall_clock_s: f64,
}

impl ResultRow {
    /// Builds a row; `delta` is always `acc_after - acc_before`.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        method: &str,
        condition: &str,
        subset: &str,
        adapt_phi: bool,
        corruption: &str,
        seed: u64,
        examples: usize,
        acc_before: f64,
        acc_after: f64,
        mean_loss_trajectory: Vec<f64>,
        wall_clock: Duration,
    ) -> Self {
        ResultRow {
            method: method.into(),
            condition: condition.into(),
            subset: subset.into(),
            adapt_phi,
            corruption: corruption.into(),
            seed,
            examples,
            acc_before,
            acc_after,
            delta: acc_after - acc_before,
            mean_loss_trajectory,
            wall_clock,
        }
    }

    fn to_csv(&self) -> CsvRow {
        CsvRow {
            method: self.method.clone(),
            condition: self.condition.clone(),
            subset: self.subset.clone(),
            adapt_phi: self.adapt_phi,
            corruption: self.corruption.clone(),
            seed: self.seed,
            examples: self.examples,
            acc_before: self.acc_before,
            acc_after: self.acc_after,
            delta: self.delta,
            mean_loss_trajectory: self
                .mean_loss_trajectory
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
        }
    }

    fn from_csv(r: CsvRow) -> std::result::Result<Self, String> {
        let traj = if r.mean_loss_trajectory.is_empty() {
            Vec::new()
        } else {
            r.mean_loss_trajectory
                .split(';')
                .map(|v| v.parse::<f64>().map_err(|e| format!("trajectory value {v:?}: {e}")))
                .collect::<std::result::Result<_, _>>()?
        };
        Ok(ResultRow {
            method: r.method,
            condition: r.condition,
            subset: r.subset,
            adapt_phi: r.adapt_phi,
            corruption: r.corruption,
            seed: r.seed,
            examples: r.examples,
            acc_before: r.acc_before,
            acc_after: r.acc_after,
            delta: r.delta,
            mean_loss_trajectory: traj,
            wall_clock: Duration::ZERO,
        })
    }
}

/// Header block shared by every file the harness writes.
pub fn preamble(command: &str, cfg: &ExperimentConfig) -> String {
    let mut out = format!("# dtta {command}\n");
    for line in cfg.to_toml().lines() {
        if line.is_empty() {
            out.push_str("#\n");
        } else {
            out.push_str(&format!("# {line}\n"));
        }
    }
    out
}

/// Command and config recovered from a file's `#` block.
pub fn read_preamble(path: &Path) -> Result<(String, ExperimentConfig)> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let bad = |reason: &str| HarnessError::Results {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    let mut lines = text.lines().take_while(|l| l.starts_with('#'));
    let command = lines
        .next()
        .and_then(|l| l.strip_prefix("# dtta "))
        .ok_or_else(|| bad("missing command line"))?
        .to_string();
    let body: Vec<&str> = lines
        .map(|l| l.strip_prefix("# ").unwrap_or(l.trim_start_matches('#')))
        .collect();
    let cfg = parse_with_overrides(&body.join("\n"), &[])?;
    Ok((command, cfg))
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = fs::File::create(&tmp).map_err(|e| HarnessError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| HarnessError::io(&tmp, e))?;
    f.sync_all().map_err(|e| HarnessError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| HarnessError::io(path, e))
}

pub fn csv_bytes(command: &str, cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(preamble(command, cfg).into_bytes());
    for r in rows {
        w.serialize(r.to_csv()).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Sidecar paths for a result CSV.
pub fn sidecars(csv: &Path) -> (PathBuf, PathBuf) {
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("results");
    (
        csv.with_file_name(format!("{stem}.json")),
        csv.with_file_name(format!("{stem}.timings.csv")),
    )
}

/// Writes the canonical CSV plus its JSON summary and timing sidecar.
pub fn write_results(csv: &Path, command: &str, cfg: &ExperimentConfig, rows: &[ResultRow]) -> Result<()> {
    let (json, timings) = sidecars(csv);
    write_atomic(csv, &csv_bytes(command, cfg, rows))?;

    let mut w = csv::Writer::from_writer(preamble(command, cfg).into_bytes());
    for r in rows {
        w.serialize(TimingRow {
            method: &r.method,
            condition: &r.condition,
            seed: r.seed,
            wall_clock_s: r.wall_clock.as_secs_f64(),
        })
        .expect("in-memory write");
    }
    write_atomic(&timings, &w.into_inner().expect("in-memory flush"))?;

    let summary = serde_json::json!({
        "command": command,
        "config": cfg,
        "rows": rows.iter().map(|r| {
            let mut v = serde_json::to_value(r.to_csv()).expect("row serialises");
            v["mean_loss_trajectory"] = serde_json::json!(r.mean_loss_trajectory);
            v["wall_clock_s"] = serde_json::json!(r.wall_clock.as_secs_f64());
            v
        }).collect::<Vec<_>>(),
        "groups": aggregate(rows),
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_atomic(&json, text.as_bytes())
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let bad = |reason: String| HarnessError::Results {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| bad(e.to_string()))?;
    r.deserialize::<CsvRow>()
        .map(|row| ResultRow::from_csv(row.map_err(|e| bad(e.to_string()))?).map_err(bad))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; zero for a single seed.
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Stat {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

/// Rows sharing everything but the seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Group {
    pub method: String,
    pub condition: String,
    pub subset: String,
    pub adapt_phi: bool,
    pub corruption: String,
    pub seeds: usize,
    pub acc_before: Stat,
    pub acc_after: Stat,
    pub delta: Stat,
    /// Per-step mean over seeds; empty unless every row has the same length.
    pub mean_loss_trajectory: Vec<f64>,
}

/// Groups in order of first appearance.
pub fn aggregate(rows: &[ResultRow]) -> Vec<Group> {
    let key = |r: &ResultRow| {
        (
            r.method.clone(),
            r.condition.clone(),
            r.subset.clone(),
            r.adapt_phi,
            r.corruption.clone(),
        )
    };
    let mut keys = Vec::new();
    for r in rows {
        if !keys.contains(&key(r)) {
            keys.push(key(r));
        }
    }
    keys.into_iter()
        .map(|k| {
            let members: Vec<&ResultRow> = rows.iter().filter(|r| key(r) == k).collect();
            let col = |f: fn(&ResultRow) -> f64| Stat::of(&members.iter().map(|r| f(r)).collect::<Vec<_>>());
            let len = members[0].mean_loss_trajectory.len();
            let traj = if members.iter().all(|r| r.mean_loss_trajectory.len() == len) {
                (0..len)
                    .map(|s| members.iter().map(|r| r.mean_loss_trajectory[s]).sum::<f64>() / members.len() as f64)
                    .collect()
            } else {
                Vec::new()
            };
            Group {
                method: k.0,
                condition: k.1,
                subset: k.2,
                adapt_phi: k.3,
                corruption: k.4,
                seeds: members.len(),
                acc_before: col(|r| r.acc_before),
                acc_after: col(|r| r.acc_after),
                delta: col(|r| r.delta),
                mean_loss_trajectory: traj,
            }
        })
        .collect()
}
