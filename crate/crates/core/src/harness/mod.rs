//! Experiment configs, single runs, Monte Carlo studies and their files.

mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use config::{ExperimentConfig, ModelSpec};

use crate::benchmarks::{self, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, EvalReport};
use crate::model::{sub_seed, FadingModel, PlainDnn, RegressorMatrix};
use crate::optim::{self, Trainable, TrainingLog};
use crate::parallel::{self, Execution};

/// Overrides every output directory when set.
pub const OUTPUT_ROOT_ENV: &str = "FADING_OUTPUT_ROOT";

const SALT_TRAIN_DATA: u64 = 101;
const SALT_TEST_DATA: u64 = 202;
const SALT_INIT: u64 = 303;
const SALT_SAMPLER: u64 = 404;

/// Where outputs go: the environment override, then the config, then `runs`.
pub fn output_root(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => configured.map_or_else(|| PathBuf::from("runs"), Path::to_path_buf),
    }
}

/// Train and test trajectories of one run. Both depend only on the run
/// seed, so models compared under the same seed see the same data.
pub fn run_datasets(
    cfg: &ExperimentConfig,
    run_seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    let train = benchmarks::simulate(
        cfg.system,
        cfg.n_train,
        sub_seed(run_seed, SALT_TRAIN_DATA),
        cfg.burn_in,
    )?;
    let test = benchmarks::simulate(
        cfg.system,
        cfg.test_len(),
        sub_seed(run_seed, SALT_TEST_DATA),
        cfg.burn_in,
    )?;
    Ok((train, test))
}

/// A trained network of either kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Predictor {
    Fading(FadingModel),
    Plain(PlainDnn),
}

impl Predictor {
    pub fn init(cfg: &ExperimentConfig, seed: u64) -> Result<Self> {
        let shape = cfg.block_shape();
        Ok(match cfg.model {
            ModelSpec::Fading { n_b, p } => {
                Predictor::Fading(FadingModel::new(p, n_b, &shape, seed)?)
            }
            ModelSpec::Plain { horizon } => Predictor::Plain(PlainDnn::new(horizon, &shape, seed)?),
        })
    }

    pub fn horizon(&self) -> usize {
        match self {
            Predictor::Fading(m) => m.horizon(),
            Predictor::Plain(m) => m.horizon,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Predictor::Fading(m) => m.parameter_count(),
            Predictor::Plain(m) => m.parameter_count(),
        }
    }

    pub fn regressors(&self, data: &TimeSeriesDataset) -> Result<RegressorMatrix> {
        match self {
            Predictor::Fading(m) => RegressorMatrix::build(data, m.p, m.n_b),
            Predictor::Plain(m) => m.regressors(data),
        }
    }

    pub fn predict(&self, r: &RegressorMatrix) -> Result<Vec<f64>> {
        match self {
            Predictor::Fading(m) => m.predict(r),
            Predictor::Plain(m) => m.predict(r),
        }
    }

    pub fn train(
        &mut self,
        train_rows: &RegressorMatrix,
        validation: Option<&RegressorMatrix>,
        cfg: &optim::TrainConfig,
    ) -> Result<TrainingLog> {
        match self {
            Predictor::Fading(m) => optim::train(m, train_rows, validation, cfg),
            Predictor::Plain(m) => optim::train(m, train_rows, validation, cfg),
        }
    }

    /// η̂ on both sets, plus block relevance on the test set.
    pub fn evaluate(
        &self,
        train: &TimeSeriesDataset,
        test: &TimeSeriesDataset,
    ) -> Result<EvalReport> {
        if train.system != test.system {
            return Err(Error::Data(format!(
                "train data is from system {} but test data from system {}",
                train.system, test.system
            )));
        }
        let rtr = self.regressors(train)?;
        let rte = self.regressors(test)?;
        let tr = metrics::eta_hat(rtr.targets(), &self.predict(&rtr)?)?;
        let te = metrics::eta_hat(rte.targets(), &self.predict(&rte)?)?;
        let mut report = EvalReport::new(tr, te, benchmarks::eta_true(train.system));
        if let Some(rel) = self.relevance(&rte)? {
            report.relevance = rel.importance;
            report.truncated_std = rel.truncated_std;
        }
        Ok(report)
    }

    pub fn relevance(&self, r: &RegressorMatrix) -> Result<Option<metrics::BlockRelevance>> {
        match self {
            Predictor::Fading(m) => m.relevance(r),
            Predictor::Plain(_) => Ok(None),
        }
    }
}

/// Everything needed to reproduce predictions of a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub model: Predictor,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Data(format!(
                "checkpoint {} does not match its stored config hash",
                path.display()
            )));
        }
        Ok(ck)
    }
}

/// One trained model and how it did.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub parameter_count: usize,
    pub report: EvalReport,
    pub log: TrainingLog,
    pub checkpoint: Checkpoint,
    pub wall_clock_s: f64,
}

/// Simulates, trains and evaluates one run of `cfg` under `run_seed`.
pub fn run_single(cfg: &ExperimentConfig, run: usize, run_seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let (train, test) = run_datasets(cfg, run_seed)?;
    let mut model = Predictor::init(cfg, sub_seed(run_seed, SALT_INIT))?;
    let rtr = model.regressors(&train)?;
    let rte = model.regressors(&test)?;
    let log = model.train(
        &rtr,
        Some(&rte),
        &cfg.train_config(sub_seed(run_seed, SALT_SAMPLER)),
    )?;
    let report = model.evaluate(&train, &test)?;
    Ok(RunRecord {
        run,
        seed: run_seed,
        parameter_count: model.parameter_count(),
        report,
        log,
        checkpoint: Checkpoint {
            config_hash: cfg.hash(),
            config: cfg.clone(),
            seed: run_seed,
            model,
        },
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

impl RunRecord {
    /// Writes the training log, relevance trace, report and checkpoint.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.log.write_csv(&dir.join("training_log.csv"))?;
        if !self.log.relevance.is_empty() {
            let p = dir.join("relevance.csv");
            fs::write(&p, self.log.relevance_csv()).map_err(|e| Error::io(&p, e))?;
        }
        let p = dir.join("report.json");
        fs::write(&p, serde_json::to_string_pretty(&self.report)?).map_err(|e| Error::io(&p, e))?;
        self.checkpoint.save(&dir.join("checkpoint.json"))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FailedRun {
    pub run: usize,
    pub seed: u64,
    pub error: String,
}

/// All runs of one config. Failed runs are kept, not dropped.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MonteCarloResult {
    pub label: String,
    pub eta_true: f64,
    pub runs: Vec<RunRecord>,
    pub failed: Vec<FailedRun>,
}

/// Runs `cfg.runs` independent trainings, run `i` seeded with `cfg.seed + i`.
pub fn run_montecarlo(cfg: &ExperimentConfig, exec: Execution) -> Result<MonteCarloResult> {
    cfg.validate()?;
    let jobs: Vec<usize> = (0..cfg.runs).collect();
    let outcomes = parallel::map_ordered(exec, jobs, |i| {
        let seed = cfg.seed.wrapping_add(i as u64);
        run_single(cfg, i, seed).map_err(|e| FailedRun {
            run: i,
            seed,
            error: e.to_string(),
        })
    });
    let mut result = MonteCarloResult {
        label: cfg.model.label(),
        eta_true: benchmarks::eta_true(cfg.system),
        runs: Vec::new(),
        failed: Vec::new(),
    };
    for o in outcomes {
        match o {
            Ok(r) => result.runs.push(r),
            Err(f) => result.failed.push(f),
        }
    }
    Ok(result)
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl MonteCarloResult {
    pub fn total_runs(&self) -> usize {
        self.runs.len() + self.failed.len()
    }

    pub fn failure_fraction(&self) -> f64 {
        match self.total_runs() {
            0 => 0.0,
            n => self.failed.len() as f64 / n as f64,
        }
    }

    pub fn test_eta_hats(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.eta_hat_test).collect()
    }

    pub fn train_eta_hats(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.report.eta_hat_train).collect()
    }

    pub fn median_test(&self) -> f64 {
        median(&self.test_eta_hats())
    }

    pub fn median_train(&self) -> f64 {
        median(&self.train_eta_hats())
    }

    /// Long format `run,split,metric,value`, ordered by run index.
    pub fn results_csv(&self) -> String {
        let mut rows: Vec<(usize, String)> = Vec::new();
        for r in &self.runs {
            let rep = &r.report;
            let mut s = String::new();
            let _ = writeln!(s, "{},train,eta_hat,{}", r.run, rep.eta_hat_train);
            let _ = writeln!(s, "{},test,eta_hat,{}", r.run, rep.eta_hat_test);
            let _ = writeln!(s, "{},test,gap,{}", r.run, rep.gap);
            let _ = writeln!(s, "{},test,eta_true,{}", r.run, rep.eta_true);
            rows.push((r.run, s));
        }
        for f in &self.failed {
            rows.push((f.run, format!("{},all,failed,1\n", f.run)));
        }
        rows.sort_by_key(|(run, _)| *run);
        let mut out = String::from("run,split,metric,value\n");
        rows.into_iter().for_each(|(_, s)| out.push_str(&s));
        out
    }
}

/// One row per study: medians across runs, plus the failure count.
pub fn summary_csv(results: &[&MonteCarloResult]) -> String {
    let mut out = String::from(
        "model,runs,failed,median_train_eta_hat,median_test_eta_hat,median_gap,eta_true\n",
    );
    for r in results {
        let gaps: Vec<f64> = r.runs.iter().map(|x| x.report.gap).collect();
        let _ = writeln!(
            out,
            "\"{}\",{},{},{},{},{},{}",
            r.label,
            r.total_runs(),
            r.failed.len(),
            r.median_train(),
            r.median_test(),
            median(&gaps),
            r.eta_true
        );
    }
    out
}

/// Writes `results.csv`, `summary.csv` and each run's files under `dir`.
pub fn write_montecarlo(dir: &Path, result: &MonteCarloResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("results.csv");
    fs::write(&p, result.results_csv()).map_err(|e| Error::io(&p, e))?;
    let p = dir.join("summary.csv");
    fs::write(&p, summary_csv(&[result])).map_err(|e| Error::io(&p, e))?;
    for r in &result.runs {
        r.write_to(&dir.join(format!("run_{:03}", r.run)))?;
    }
    Ok(())
}
