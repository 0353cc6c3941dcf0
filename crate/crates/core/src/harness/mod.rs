//! Experiment orchestration: configuration, seed sweeps, the ablation
//! ladder and artifact emission (CSV, SVG, checkpoints, manifest).

pub mod config;
pub mod manifest;
pub mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

pub use config::{DatasetSpec, EvalOptions, ExperimentConfig, ModelSpec};
pub use manifest::{verify, RunManifest, VerifyReport};
pub use report::{AblationRow, CorruptionRow, MetricsRow};

use crate::data::{make_task_stream, LabeledDataset, TaskStream};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate_under_corruption, export_features_2d, InferenceMode};
use crate::model::Architecture;
use crate::trainer::{run_sequence_with, RunRecord, TrainConfig};

/// Worker threads for seed sweeps: `CILF_THREADS` if set, otherwise the
/// available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("CILF_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Applies `f` to every item on up to `threads` workers. Results come back
/// in input order whatever the scheduling.
pub fn parallel_map<T, R, F>(items: Vec<T>, threads: usize, f: F) -> Result<Vec<R>>
where
    T: Send,
    R: Send,
    F: Fn(T) -> Result<R> + Sync,
{
    let n = items.len();
    let queue = Mutex::new(items.into_iter().enumerate().collect::<Vec<_>>());
    let results: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop();
                let Some((i, item)) = job else { break };
                let r = f(item);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Dataset, stream and architecture for one seed.
pub struct Prepared {
    pub stream: TaskStream,
    pub arch: Architecture,
}

pub fn prepare(cfg: &ExperimentConfig, base_dir: &Path, seed: u64) -> Result<Prepared> {
    let ds = cfg.dataset.load(base_dir)?;
    let stream = make_task_stream(&ds, cfg.stream, cfg.test_fraction, seed)
        .map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("stream: {m}")),
            other => other,
        })?;
    let arch = cfg.model.architecture(ds.channels(), ds.size());
    arch.validate()?;
    Ok(Prepared { stream, arch })
}

/// The evaluation mode reported for a run under `cfg`.
pub fn report_mode(train: &TrainConfig, eval: &EvalOptions) -> InferenceMode {
    if train.sst && eval.ensemble {
        InferenceMode::Ensemble
    } else {
        InferenceMode::Plain
    }
}

fn seen_tests(stream: &TaskStream, stages: usize) -> Result<LabeledDataset> {
    let parts: Vec<&LabeledDataset> = stream.tasks[..stages].iter().map(|t| &t.test).collect();
    LabeledDataset::concat(&parts)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One trained run and the files it produced.
pub struct SeedRun {
    pub run_id: String,
    pub seed: u64,
    pub record: RunRecord,
    pub stream: TaskStream,
    pub corruption: Vec<CorruptionRow>,
    pub artifacts: Vec<PathBuf>,
}

/// Trains one seed. With `out_dir`, checkpoints and per-stage feature
/// exports go to `out_dir/<run_id>/seed_<seed>/`.
pub fn run_seed(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    run_id: &str,
    base_dir: &Path,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<SeedRun> {
    let Prepared { stream, arch } = prepare(cfg, base_dir, seed)?;
    let dir = out_dir.map(|o| o.join(run_id).join(format!("seed_{seed}")));
    let ckpt_dir = dir.as_deref().filter(|_| cfg.eval.checkpoints);
    let mut artifacts = Vec::new();
    let record = run_sequence_with(arch, train.clone(), &stream, seed, ckpt_dir, |learner| {
        if let (true, Some(dir)) = (cfg.eval.export_features, dir.as_deref()) {
            let t = learner.stage;
            let seen = seen_tests(&stream, t)?;
            let mut csv = report::features_csv_header();
            csv.push_str(&export_features_2d(&learner.model, &seen, t)?);
            let path = dir.join(format!("features_stage_{t}.csv"));
            write(&path, &csv)?;
            let svg_path = path.with_extension("svg");
            write(&svg_path, &svg::scatter2d(&report::parse_features_csv(&csv)?)?)?;
            artifacts.push(path);
            artifacts.push(svg_path);
        }
        Ok(())
    })?;
    artifacts.extend(record.checkpoints.iter().cloned());

    let corruptions = cfg.eval.corruption_list()?;
    let mut corruption = Vec::new();
    if !corruptions.is_empty() {
        let test = seen_tests(&stream, stream.tasks.len())?;
        let mode = report_mode(train, &cfg.eval);
        for (name, acc) in evaluate_under_corruption(&record.learner.model, &test, &corruptions, mode, seed)? {
            corruption.push(CorruptionRow {
                run_id: run_id.to_string(),
                seed,
                corruption: name,
                severity: cfg.eval.severity,
                accuracy: acc,
            });
        }
    }
    Ok(SeedRun {
        run_id: run_id.to_string(),
        seed,
        record,
        stream,
        corruption,
        artifacts,
    })
}

/// Everything a multi-seed experiment produced.
pub struct ExperimentOutput {
    pub runs: Vec<SeedRun>,
    pub metrics: Vec<MetricsRow>,
    pub manifest: Option<PathBuf>,
}

fn finish(
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    runs: &[SeedRun],
    metrics: &[MetricsRow],
    extra: &[(&str, String)],
) -> Result<Option<PathBuf>> {
    let Some(out) = out_dir else { return Ok(None) };
    let metrics_path = out.join("metrics.csv");
    write(&metrics_path, &report::metrics_csv(metrics))?;
    let config_path = out.join("config.toml");
    write(&config_path, &cfg.to_toml()?)?;
    let curve_path = out.join("accuracy_curve.svg");
    write(&curve_path, &svg::curve(metrics)?)?;

    let mut manifest = RunManifest::new(cfg.hash()?, cfg.seeds.clone(), "metrics.csv");
    for p in [&metrics_path, &config_path, &curve_path] {
        manifest.record(out, p)?;
    }
    let corruption: Vec<CorruptionRow> = runs.iter().flat_map(|r| r.corruption.clone()).collect();
    if !corruption.is_empty() {
        let p = out.join("corruption.csv");
        write(&p, &report::corruption_csv(&corruption))?;
        manifest.record(out, &p)?;
        let bars = out.join("corruption_bars.svg");
        write(&bars, &svg::corruption_bars(&corruption)?)?;
        manifest.record(out, &bars)?;
    }
    for (name, text) in extra {
        let p = out.join(name);
        write(&p, text)?;
        manifest.record(out, &p)?;
    }
    for r in runs {
        manifest.add_run(out, &r.run_id, r.seed, &r.record.checkpoints);
        for a in &r.artifacts {
            manifest.record(out, a)?;
        }
    }
    Ok(Some(manifest.write(out)?))
}

/// Runs every seed of `cfg`, in parallel up to [`worker_threads`].
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, out_dir: Option<&Path>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mode = report_mode(&cfg.train, &cfg.eval);
    let runs = parallel_map(cfg.seeds.clone(), worker_threads(), |seed| {
        run_seed(cfg, &cfg.train, &cfg.name, base_dir, seed, out_dir)
    })?;
    let mut metrics = Vec::new();
    for r in &runs {
        metrics.extend(report::metrics_rows(&r.run_id, &r.record, mode)?);
    }
    let manifest = finish(cfg, out_dir, &runs, &metrics, &[])?;
    Ok(ExperimentOutput {
        runs,
        metrics,
        manifest,
    })
}

/// Rows of the component ladder, cumulative from top to bottom.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LadderRow {
    /// feature distillation only
    Baseline,
    ProtoAug,
    Sst,
    Hardness,
    /// the `Hardness` model evaluated with the multi-view ensemble
    Ensemble,
}

impl LadderRow {
    pub const ALL: [LadderRow; 5] = [
        LadderRow::Baseline,
        LadderRow::ProtoAug,
        LadderRow::Sst,
        LadderRow::Hardness,
        LadderRow::Ensemble,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LadderRow::Baseline => "Baseline",
            LadderRow::ProtoAug => "+protoAug",
            LadderRow::Sst => "+SST",
            LadderRow::Hardness => "+Hardness",
            LadderRow::Ensemble => "+Ensemble",
        }
    }

    /// Training configuration of this row derived from `base`.
    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let (sst, protoaug, hardness) = match self {
            LadderRow::Baseline => (false, false, false),
            LadderRow::ProtoAug => (false, true, false),
            LadderRow::Sst => (true, true, false),
            LadderRow::Hardness | LadderRow::Ensemble => (true, true, true),
        };
        TrainConfig {
            sst,
            protoaug,
            hardness,
            kd: true,
            ..base.clone()
        }
    }

    pub fn mode(self) -> InferenceMode {
        match self {
            LadderRow::Ensemble => InferenceMode::Ensemble,
            _ => InferenceMode::Plain,
        }
    }

    /// Rows that need their own training run; `Ensemble` reuses `Hardness`.
    fn trained(self) -> LadderRow {
        match self {
            LadderRow::Ensemble => LadderRow::Hardness,
            r => r,
        }
    }
}

/// Mean last accuracy of every ladder row plus the ordering checks.
#[derive(Clone, Debug, PartialEq)]
pub struct LadderSummary {
    /// `(row, mean last accuracy)` in ladder order
    pub means: Vec<(LadderRow, f64)>,
}

impl LadderSummary {
    pub fn mean(&self, row: LadderRow) -> f64 {
        self.means.iter().find(|(r, _)| *r == row).map_or(f64::NAN, |m| m.1)
    }

    /// Named ordering checks with their outcome.
    pub fn checks(&self) -> Vec<(String, bool)> {
        use LadderRow::*;
        vec![
            ("Baseline < +protoAug".into(), self.mean(Baseline) < self.mean(ProtoAug)),
            ("+protoAug < +SST".into(), self.mean(ProtoAug) < self.mean(Sst)),
            ("+Ensemble >= +Hardness".into(), self.mean(Ensemble) >= self.mean(Hardness)),
            (
                "Baseline < 0.5 x +protoAug".into(),
                self.mean(Baseline) < 0.5 * self.mean(ProtoAug),
            ),
        ]
    }
}

pub struct AblationOutput {
    pub rows: Vec<AblationRow>,
    pub metrics: Vec<MetricsRow>,
    pub summary: LadderSummary,
    pub runs: Vec<SeedRun>,
    pub manifest: Option<PathBuf>,
}

/// The five-row ladder over every seed of `cfg`. Four configurations are
/// trained; the ensemble row re-evaluates the hardness model.
pub fn run_ablation(cfg: &ExperimentConfig, base_dir: &Path, out_dir: Option<&Path>) -> Result<AblationOutput> {
    cfg.validate()?;
    let trained: Vec<LadderRow> = LadderRow::ALL.iter().copied().filter(|r| r.trained() == *r).collect();
    let jobs: Vec<(LadderRow, u64)> = trained
        .iter()
        .flat_map(|&r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let runs = parallel_map(jobs.clone(), worker_threads(), |(row, seed)| {
        run_seed(cfg, &row.train_config(&cfg.train), row.name(), base_dir, seed, out_dir)
    })?;

    let mut rows = Vec::new();
    let mut metrics = Vec::new();
    let mut means = Vec::new();
    for row in LadderRow::ALL {
        let mut per_seed = Vec::new();
        for ((r, _), run) in jobs.iter().zip(&runs) {
            if *r != row.trained() {
                continue;
            }
            let evals = run.record.evals(row.mode()).expect("hardness runs have views");
            let m = compute_metrics(evals, &run.record.classes_per_stage());
            let last = m.last().expect("at least one stage");
            per_seed.push(AblationRow {
                row: row.name().to_string(),
                seed: Some(run.seed),
                last_accuracy: last.acc_all_seen,
                average_accuracy: last.average_accuracy,
                forgetting: last.forgetting,
                forgetting_clamped: last.forgetting_clamped,
            });
            metrics.extend(report::metrics_rows(row.name(), &run.record, row.mode())?);
        }
        let n = per_seed.len() as f64;
        let avg = |f: &dyn Fn(&AblationRow) -> Option<f64>| {
            let v: Vec<f64> = per_seed.iter().filter_map(f).collect();
            (v.len() == per_seed.len()).then(|| v.iter().sum::<f64>() / n)
        };
        let mean = AblationRow {
            row: row.name().to_string(),
            seed: None,
            last_accuracy: avg(&|r| Some(r.last_accuracy)).unwrap_or(f64::NAN),
            average_accuracy: avg(&|r| Some(r.average_accuracy)).unwrap_or(f64::NAN),
            forgetting: avg(&|r| r.forgetting),
            forgetting_clamped: avg(&|r| r.forgetting_clamped),
        };
        means.push((row, mean.last_accuracy));
        rows.extend(per_seed);
        rows.push(mean);
    }
    let summary = LadderSummary { means };
    let mut report_text = String::new();
    for (name, ok) in summary.checks() {
        report_text.push_str(&format!("{} {name}\n", if ok { "PASS" } else { "FAIL" }));
    }
    let manifest = finish(
        cfg,
        out_dir,
        &runs,
        &metrics,
        &[
            ("ablation.csv", report::ablation_csv(&rows)),
            ("ordering.txt", report_text),
        ],
    )?;
    Ok(AblationOutput {
        rows,
        metrics,
        summary,
        runs,
        manifest,
    })
}
