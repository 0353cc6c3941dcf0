use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cilf_core::checkpoint;
use cilf_core::eval::{evaluate_seen, evaluate_under_corruption, InferenceMode};
use cilf_core::harness::{self, report, svg, ExperimentConfig};
use cilf_core::prototype::CovarianceMode;
use cilf_core::trainer::ProtoAugMode;
use cilf_core::Error;

#[derive(Parser)]
#[command(name = "cilf", version, about = "Non-exemplar class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a configuration and write metrics, checkpoints and a manifest.
    Train(RunArgs),
    /// Run the component ladder (Baseline, +protoAug, +SST, +Hardness, +Ensemble).
    Ablate(RunArgs),
    /// Evaluate a checkpoint on the test splits of the tasks it has seen.
    Eval(EvalArgs),
    /// Render a CSV artifact as SVG.
    Plot(PlotArgs),
    /// Re-hash every artifact listed in a manifest.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Curve,
    Scatter2d,
    #[value(name = "corruption_bars")]
    CorruptionBars,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// run this single seed instead of the configured list
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    ensemble: Option<OnOff>,
    #[arg(long)]
    protoaug: Option<ProtoAugMode>,
    #[arg(long)]
    covariance: Option<CovarianceMode>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// experiment configuration that produced the checkpoint (dataset and stream)
    #[arg(long)]
    config: PathBuf,
    /// seed of the task stream; defaults to the checkpoint's own seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "off")]
    ensemble: OnOff,
    /// corruption kinds evaluated at preset severity 1
    #[arg(long, value_delimiter = ',')]
    corruption: Vec<String>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: PlotKind,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Io { .. } | Error::Format(_) | Error::Argument(_)) => 2,
        Some(Error::Aborted { .. }) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_config(args: &RunArgs) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    if let Some(seed) = args.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    if let Some(e) = args.ensemble {
        cfg.eval.ensemble = matches!(e, OnOff::On);
    }
    if let Some(m) = args.protoaug {
        cfg.train.protoaug_mode = m;
    }
    if let Some(c) = args.covariance {
        cfg.train.covariance = c;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Train(args) => {
            let cfg = load_config(&args)?;
            let out = harness::run_experiment(&cfg, &base_dir(&args.config), Some(&cfg.out_dir))?;
            print!("{}", report::metrics_csv(&out.metrics));
            if let Some(m) = out.manifest {
                eprintln!("manifest: {}", m.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate(args) => {
            let cfg = load_config(&args)?;
            let out = harness::run_ablation(&cfg, &base_dir(&args.config), Some(&cfg.out_dir))?;
            print!("{}", report::ablation_csv(&out.rows));
            let mut all = true;
            for (name, ok) in out.summary.checks() {
                all &= ok;
                eprintln!("{} {name}", if ok { "PASS" } else { "FAIL" });
            }
            if let Some(m) = out.manifest {
                eprintln!("manifest: {}", m.display());
            }
            if !all {
                eprintln!("ordering checks failed; see ordering.txt");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval(args) => eval(args),
        Command::Plot(args) => {
            let text = std::fs::read_to_string(&args.input).map_err(|e| Error::Io {
                path: args.input.clone(),
                source: e,
            })?;
            let out = match args.kind {
                PlotKind::Curve => svg::curve(&report::parse_metrics_csv(&text)?)?,
                PlotKind::Scatter2d => svg::scatter2d(&report::parse_features_csv(&text)?)?,
                PlotKind::CorruptionBars => svg::corruption_bars(&report::parse_corruption_csv(&text)?)?,
            };
            std::fs::write(&args.out, out).map_err(|e| Error::Io {
                path: args.out.clone(),
                source: e,
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { manifest } => {
            let r = harness::verify(&manifest)?;
            for p in &r.mismatched {
                println!("MISMATCH {p}");
            }
            for p in &r.missing {
                println!("MISSING {p}");
            }
            for p in &r.unlisted {
                println!("UNLISTED {p}");
            }
            println!("checked {} artifacts", r.checked);
            Ok(if r.ok() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn eval(args: EvalArgs) -> anyhow::Result<ExitCode> {
    let learner = checkpoint::load(&args.checkpoint)?;
    let cfg = ExperimentConfig::from_file(&args.config)?;
    let seed = args.seed.unwrap_or(learner.seed);
    let prepared = harness::prepare(&cfg, &base_dir(&args.config), seed)?;
    let stages = learner.stage;
    if stages == 0 || stages > prepared.stream.tasks.len() {
        return Err(Error::Config(format!(
            "checkpoint has {stages} completed stages, stream has {}",
            prepared.stream.tasks.len()
        ))
        .into());
    }
    let mode = match args.ensemble {
        OnOff::On => InferenceMode::Ensemble,
        OnOff::Off => InferenceMode::Plain,
    };
    let tests: Vec<_> = prepared.stream.tasks[..stages].iter().map(|t| &t.test).collect();
    let e = evaluate_seen(&learner.model, &tests, mode)?;
    println!("stage,{stages}");
    println!("mode,{}", mode.name());
    for (i, acc) in e.task_accuracies().iter().enumerate() {
        println!("task_{},{acc}", i + 1);
    }
    println!("acc_all_seen,{}", e.all_seen());
    println!("acc_new_task,{}", e.new_task());
    if let Some(old) = e.old_classes() {
        println!("acc_old_classes,{old}");
    }
    println!("ECE,{}", e.ece);
    if !args.corruption.is_empty() {
        let kinds = args
            .corruption
            .iter()
            .map(|k| cilf_core::data::Corruption::preset(k, 1))
            .collect::<Result<Vec<_>, _>>()?;
        let pooled = cilf_core::data::LabeledDataset::concat(&tests)?;
        for (name, acc) in evaluate_under_corruption(&learner.model, &pooled, &kinds, mode, seed)? {
            println!("corruption_{name},{acc}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
