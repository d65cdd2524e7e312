//! `fading`: simulate benchmark data, train and evaluate fading-memory
//! networks, run Monte Carlo studies and inspect block relevance.
//!
//! Exit codes: 0 on success, 2 on usage or config errors, 1 on runtime
//! failures (including a Monte Carlo study where more than 20% of runs fail).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fading::benchmarks::{self, SystemId, TimeSeriesDataset, DEFAULT_BURN_IN};
use fading::harness::{self, Checkpoint, ExperimentConfig, Predictor};
use fading::parallel::Execution;
use fading::Error;

/// Largest tolerated fraction of failed Monte Carlo runs.
const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Parser)]
#[command(
    name = "fading",
    version,
    about = "Fading-memory block networks for one-step-ahead prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark system and write `t,u,y` CSV plus a JSON sidecar.
    Simulate(SimulateArgs),
    /// Train one model from a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print its report as JSON.
    Evaluate(EvaluateArgs),
    /// Run a Monte Carlo study and write results and summary tables.
    Montecarlo(MonteCarloArgs),
    /// Per-block importance and truncated-predictor residuals of a checkpoint.
    Relevance(RelevanceArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
    system: u8,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_BURN_IN)]
    burn_in: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory; defaults to `<output root>/train_<hash>_seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test trajectory; regenerated from the checkpoint's seed when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Training trajectory; regenerated from the checkpoint's seed when omitted.
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MonteCarloArgs {
    #[arg(long)]
    config: PathBuf,
    /// Master seed; run `i` uses `seed + i`. Overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run the study on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct RelevanceArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// A run's `relevance.csv`, whose per-epoch rows are emitted first.
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Montecarlo(a) => montecarlo(a),
        Command::Relevance(a) => relevance(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn report_json(v: &fading::metrics::EvalReport) -> CliResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| Failure::Runtime(e.to_string()))
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => write_text(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Failure::Usage(e.to_string()),
        other => other.into(),
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate(a: SimulateArgs) -> CliResult {
    let id = SystemId::try_from(a.system)?;
    if a.n == 0 {
        return Err(Failure::Usage("--n must be positive".into()));
    }
    let data = benchmarks::simulate(id, a.n, a.seed, a.burn_in)?;
    data.save(&a.out)?;
    eprintln!(
        "wrote {} samples of system {id} to {}",
        data.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CliResult {
    let cfg = load_config(&a.config, a.seed)?;
    let dir = a.out.unwrap_or_else(|| {
        harness::output_root(cfg.output_dir.as_deref()).join(format!(
            "train_{}_seed{}",
            &cfg.hash()[..12],
            cfg.seed
        ))
    });
    let record = harness::run_single(&cfg, 0, cfg.seed)?;
    record.write_to(&dir)?;
    let r = &record.report;
    println!(
        "{} seed {}: train eta_hat {:.4}, test eta_hat {:.4}, gap {:.4} (eta_true {}), {:.1}s -> {}",
        cfg.model.label(),
        record.seed,
        r.eta_hat_train,
        r.eta_hat_test,
        r.gap,
        r.eta_true,
        record.wall_clock_s,
        dir.display()
    );
    Ok(())
}

fn datasets_for(
    ck: &Checkpoint,
    train: Option<&Path>,
    test: Option<&Path>,
) -> CliResult<(TimeSeriesDataset, TimeSeriesDataset)> {
    let needs_regen = train.is_none() || test.is_none();
    let regen = if needs_regen {
        Some(harness::run_datasets(&ck.config, ck.seed)?)
    } else {
        None
    };
    let pick = |path: Option<&Path>,
                fallback: Option<&TimeSeriesDataset>|
     -> CliResult<TimeSeriesDataset> {
        match path {
            Some(p) => Ok(TimeSeriesDataset::load(p)?),
            None => Ok(fallback.expect("regenerated").clone()),
        }
    };
    let tr = pick(train, regen.as_ref().map(|r| &r.0))?;
    let te = pick(test, regen.as_ref().map(|r| &r.1))?;
    Ok((tr, te))
}

fn evaluate(a: EvaluateArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (train, test) = datasets_for(&ck, a.train_data.as_deref(), a.data.as_deref())?;
    let report = ck.model.evaluate(&train, &test)?;
    emit(a.out.as_deref(), &(report_json(&report)? + "\n"))
}

fn montecarlo(a: MonteCarloArgs) -> CliResult {
    let mut cfg = load_config(&a.config, a.seed)?;
    if let Some(r) = a.runs {
        if r == 0 {
            return Err(Failure::Usage("--runs must be at least 1".into()));
        }
        cfg.runs = r;
    }
    let exec = if a.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    let dir = a.out.unwrap_or_else(|| {
        harness::output_root(cfg.output_dir.as_deref()).join(format!(
            "montecarlo_{}_seed{}",
            &cfg.hash()[..12],
            cfg.seed
        ))
    });
    let result = harness::run_montecarlo(&cfg, exec)?;
    harness::write_montecarlo(&dir, &result)?;
    for f in &result.failed {
        eprintln!("run {} (seed {}) failed: {}", f.run, f.seed, f.error);
    }
    println!(
        "{}: {} runs, {} failed, median train eta_hat {:.4}, median test eta_hat {:.4} -> {}",
        result.label,
        result.total_runs(),
        result.failed.len(),
        result.median_train(),
        result.median_test(),
        dir.display()
    );
    if result.failure_fraction() > MAX_FAILURE_FRACTION {
        return Err(Failure::Runtime(format!(
            "{} of {} runs failed",
            result.failed.len(),
            result.total_runs()
        )));
    }
    Ok(())
}

fn relevance(a: RelevanceArgs) -> CliResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = match &ck.model {
        Predictor::Fading(m) => m,
        Predictor::Plain(_) => {
            return Err(Failure::Runtime(
                "relevance needs a fading checkpoint, got a plain network".into(),
            ))
        }
    };
    let data = TimeSeriesDataset::load(&a.data)?;
    if data.len() <= model.horizon() {
        return Err(Error::Contract(format!(
            "checkpoint has p={}, n_B={} (horizon {}) but the dataset has only {} samples",
            model.p,
            model.n_b,
            model.horizon(),
            data.len()
        ))
        .into());
    }
    let r = ck.model.regressors(&data)?;
    let rel = ck.model.relevance(&r)?.expect("fading model");

    let mut text = String::from("epoch,block,importance,truncated_std\n");
    let final_epoch = ck.config.epochs;
    if let Some(h) = &a.history {
        let hist =
            fs::read_to_string(h).map_err(|e| Failure::Runtime(format!("{}: {e}", h.display())))?;
        for line in hist.lines().skip(1) {
            let epoch = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
            if epoch.is_some_and(|e| e < final_epoch) {
                text.push_str(line);
                text.push('\n');
            }
        }
    }
    for (i, (imp, tr)) in rel.importance.iter().zip(&rel.truncated_std).enumerate() {
        text.push_str(&format!("{final_epoch},{i},{imp},{tr}\n"));
    }
    emit(a.out.as_deref(), &text)
}
