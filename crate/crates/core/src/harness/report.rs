//! CSV artifacts. Floats are written in Rust's shortest round-trip form so
//! values re-read from disk match the in-memory ones exactly.

use crate::error::{Error, Result};
use crate::eval::{compute_metrics, InferenceMode, StageMetrics};
use crate::trainer::RunRecord;

pub const METRICS_HEADER: &[&str] = &[
    "run_id",
    "seed",
    "stage",
    "n_seen_classes",
    "acc_all_seen",
    "acc_new_task",
    "acc_old_classes",
    "A_t",
    "F_k",
    "F_k_clamped",
    "ECE",
    "wall_seconds",
];

pub const FEATURES_HEADER: &[&str] = &["feature_x", "feature_y", "label", "stage"];

pub const CORRUPTION_HEADER: &[&str] = &["run_id", "seed", "corruption", "severity", "accuracy"];

pub const ABLATION_HEADER: &[&str] = &[
    "row",
    "seed",
    "last_accuracy",
    "average_accuracy",
    "forgetting",
    "forgetting_clamped",
];

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub seed: u64,
    pub metrics: StageMetrics,
    pub wall_seconds: f64,
}

/// One row per stage of `record`, evaluated in `mode`.
pub fn metrics_rows(run_id: &str, record: &RunRecord, mode: InferenceMode) -> Result<Vec<MetricsRow>> {
    let evals = record.evals(mode).ok_or_else(|| {
        Error::Config(format!("run {run_id:?} has no {} evaluations", mode.name()))
    })?;
    Ok(compute_metrics(evals, &record.classes_per_stage())
        .into_iter()
        .zip(&record.stages)
        .map(|(metrics, stage)| MetricsRow {
            run_id: run_id.to_string(),
            seed: record.seed,
            metrics,
            wall_seconds: stage.wall_seconds,
        })
        .collect())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn header(cols: &[&str]) -> String {
    let mut s = cols.join(",");
    s.push('\n');
    s
}

/// Rows are grouped by run id in first-appearance order, then sorted by
/// stage and seed.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut order: Vec<&str> = Vec::new();
    for r in rows {
        if !order.contains(&r.run_id.as_str()) {
            order.push(&r.run_id);
        }
    }
    let mut sorted: Vec<&MetricsRow> = rows.iter().collect();
    sorted.sort_by_key(|r| {
        (
            order.iter().position(|&o| o == r.run_id).unwrap_or(usize::MAX),
            r.metrics.stage,
            r.seed,
        )
    });
    let mut out = header(METRICS_HEADER);
    for r in sorted {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.seed,
            m.stage,
            m.n_seen_classes,
            m.acc_all_seen,
            m.acc_new_task,
            opt(m.acc_old_classes),
            m.average_accuracy,
            opt(m.forgetting),
            opt(m.forgetting_clamped),
            m.ece,
            r.wall_seconds,
        ));
    }
    out
}

/// Drops the wall-clock column so runs can be compared byte for byte.
pub fn strip_wall_clock(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

fn reader<'a>(text: &'a str, expected: &[&str], what: &str) -> Result<csv::Reader<&'a [u8]>> {
    let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let found: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{what}: {e}")))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(Error::Format(format!(
            "{what}: expected columns {expected:?}, found {found:?}"
        )));
    }
    Ok(rdr)
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Format(format!("line {line}: bad {name} value {:?}", rec.get(i))))
}

fn opt_field(rec: &csv::StringRecord, i: usize, name: &str, line: u64) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, name, line).map(Some),
    }
}

fn records(rdr: csv::Reader<&[u8]>, what: &str) -> Result<Vec<(u64, csv::StringRecord)>> {
    rdr.into_records()
        .enumerate()
        .map(|(i, r)| {
            r.map(|r| (i as u64 + 2, r))
                .map_err(|e| Error::Format(format!("{what}: {e}")))
        })
        .collect()
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let rdr = reader(text, METRICS_HEADER, "metrics csv")?;
    records(rdr, "metrics csv")?
        .into_iter()
        .map(|(line, r)| {
            Ok(MetricsRow {
                run_id: r[0].to_string(),
                seed: field(&r, 1, "seed", line)?,
                metrics: StageMetrics {
                    stage: field(&r, 2, "stage", line)?,
                    n_seen_classes: field(&r, 3, "n_seen_classes", line)?,
                    acc_all_seen: field(&r, 4, "acc_all_seen", line)?,
                    acc_new_task: field(&r, 5, "acc_new_task", line)?,
                    acc_old_classes: opt_field(&r, 6, "acc_old_classes", line)?,
                    average_accuracy: field(&r, 7, "A_t", line)?,
                    forgetting: opt_field(&r, 8, "F_k", line)?,
                    forgetting_clamped: opt_field(&r, 9, "F_k_clamped", line)?,
                    ece: field(&r, 10, "ECE", line)?,
                },
                wall_seconds: field(&r, 11, "wall_seconds", line)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePoint {
    pub x: f64,
    pub y: f64,
    pub label: usize,
    pub stage: usize,
}

pub fn features_csv_header() -> String {
    header(FEATURES_HEADER)
}

pub fn parse_features_csv(text: &str) -> Result<Vec<FeaturePoint>> {
    let rdr = reader(text, FEATURES_HEADER, "feature csv")?;
    records(rdr, "feature csv")?
        .into_iter()
        .map(|(line, r)| {
            Ok(FeaturePoint {
                x: field(&r, 0, "feature_x", line)?,
                y: field(&r, 1, "feature_y", line)?,
                label: field(&r, 2, "label", line)?,
                stage: field(&r, 3, "stage", line)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionRow {
    pub run_id: String,
    pub seed: u64,
    pub corruption: String,
    pub severity: usize,
    pub accuracy: f64,
}

pub fn corruption_csv(rows: &[CorruptionRow]) -> String {
    let mut out = header(CORRUPTION_HEADER);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.run_id, r.seed, r.corruption, r.severity, r.accuracy
        ));
    }
    out
}

pub fn parse_corruption_csv(text: &str) -> Result<Vec<CorruptionRow>> {
    let rdr = reader(text, CORRUPTION_HEADER, "corruption csv")?;
    records(rdr, "corruption csv")?
        .into_iter()
        .map(|(line, r)| {
            Ok(CorruptionRow {
                run_id: r[0].to_string(),
                seed: field(&r, 1, "seed", line)?,
                corruption: r[2].to_string(),
                severity: field(&r, 3, "severity", line)?,
                accuracy: field(&r, 4, "accuracy", line)?,
            })
        })
        .collect()
}

/// Summary of one ladder row for one seed (or the seed mean).
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub row: String,
    /// `None` for the across-seed mean
    pub seed: Option<u64>,
    pub last_accuracy: f64,
    pub average_accuracy: f64,
    pub forgetting: Option<f64>,
    pub forgetting_clamped: Option<f64>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = header(ABLATION_HEADER);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.row,
            r.seed.map_or("mean".to_string(), |s| s.to_string()),
            r.last_accuracy,
            r.average_accuracy,
            opt(r.forgetting),
            opt(r.forgetting_clamped),
        ));
    }
    out
}
