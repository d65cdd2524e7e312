//! Runs, checkpoints and Monte Carlo studies end to end on tiny configs.

use fading::benchmarks::SystemId;
use fading::harness::{
    self, median, run_montecarlo, run_single, Checkpoint, ExperimentConfig, ModelSpec, Predictor,
};
use fading::optim::OptimizerConfig;
use fading::parallel::Execution;
use fading::Tensor;
use proptest::prelude::*;

fn tiny(model: ModelSpec) -> ExperimentConfig {
    let mut c = ExperimentConfig::desk(SystemId::S4, model);
    c.n_train = 200;
    c.hidden = vec![6];
    c.epochs = 3;
    c.batch_size = 32;
    c.eval_every = 1;
    c.runs = 3;
    c.seed = 40;
    c
}

fn fading_cfg() -> ExperimentConfig {
    tiny(ModelSpec::Fading { n_b: 3, p: 2 })
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let mut cfg = fading_cfg();
    cfg.epochs = 0;
    let rec = run_single(&cfg, 0, 9).unwrap();
    let init = Predictor::init(&cfg, fading::model::sub_seed(9, 303)).unwrap();
    assert_eq!(rec.checkpoint.model, init);
    assert_eq!(rec.log.epochs.len(), 1);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    for cfg in [fading_cfg(), tiny(ModelSpec::Plain { horizon: 5 })] {
        let rec = run_single(&cfg, 0, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        rec.write_to(dir.path()).unwrap();
        let back = Checkpoint::load(&dir.path().join("checkpoint.json")).unwrap();
        assert_eq!(back, rec.checkpoint);
        let (train, test) = harness::run_datasets(&cfg, 3).unwrap();
        let report = back.model.evaluate(&train, &test).unwrap();
        assert_eq!(report, rec.report);
    }
}

#[test]
fn checkpoint_json_layout() {
    let rec = run_single(&fading_cfg(), 0, 3).unwrap();
    let v: serde_json::Value = serde_json::to_value(&rec.checkpoint).unwrap();
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    let m = &v["model"];
    assert_eq!(m["kind"], "fading");
    let w = &m["blocks"][0]["layers"][0]["weight"];
    assert_eq!(w["shape"], serde_json::json!([6, 4]));
    assert_eq!(w["values"].as_array().unwrap().len(), 6);
    assert_eq!(w["values"][0].as_array().unwrap().len(), 4);
    assert_eq!(m["norm"]["running_var"].as_array().unwrap().len(), 4);
    for key in ["raw_lambda", "raw_kappa", "raw_log_eta2"] {
        assert!(m[key]["values"].is_number(), "{key}");
    }
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let rec = run_single(&fading_cfg(), 0, 3).unwrap();
    let mut ck = rec.checkpoint.clone();
    ck.config.epochs += 1;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    assert!(matches!(
        Checkpoint::load(&path),
        Err(fading::Error::Data(_))
    ));
}

#[test]
fn montecarlo_is_bit_reproducible_and_schedule_independent() {
    let cfg = fading_cfg();
    let a = run_montecarlo(&cfg, Execution::Parallel).unwrap();
    let b = run_montecarlo(&cfg, Execution::Parallel).unwrap();
    let c = run_montecarlo(&cfg, Execution::Sequential).unwrap();
    assert_eq!(a.results_csv(), b.results_csv());
    assert_eq!(a.results_csv(), c.results_csv());
    assert!(a.failed.is_empty());
    let seeds: Vec<u64> = a.runs.iter().map(|r| r.seed).collect();
    assert_eq!(seeds, vec![40, 41, 42]);
}

#[test]
fn single_run_study_equals_train() {
    let mut cfg = fading_cfg();
    cfg.runs = 1;
    let mc = run_montecarlo(&cfg, Execution::default()).unwrap();
    let single = run_single(&cfg, 0, cfg.seed).unwrap();
    assert_eq!(mc.runs[0].report, single.report);
    assert_eq!(mc.runs[0].checkpoint, single.checkpoint);
}

#[test]
fn results_and_summary_tables() {
    let cfg = fading_cfg();
    let mc = run_montecarlo(&cfg, Execution::default()).unwrap();
    let csv = mc.results_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("run,split,metric,value"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 12);
    let test_eta: Vec<f64> = rows
        .iter()
        .filter(|r| r[1] == "test" && r[2] == "eta_hat")
        .map(|r| r[3].parse().unwrap())
        .collect();
    assert_eq!(test_eta, mc.test_eta_hats());

    let summary = harness::summary_csv(&[&mc]);
    let line = summary.lines().nth(1).unwrap();
    assert!(line.contains(&mc.median_test().to_string()), "{line}");

    let dir = tempfile::tempdir().unwrap();
    harness::write_montecarlo(dir.path(), &mc).unwrap();
    for f in [
        "results.csv",
        "summary.csv",
        "run_000/training_log.csv",
        "run_002/checkpoint.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn diverging_runs_are_recorded_not_dropped() {
    let mut cfg = fading_cfg();
    cfg.optimizer = OptimizerConfig::Sgd {
        lr: 1e12,
        momentum: 0.0,
    };
    let mc = run_montecarlo(&cfg, Execution::default()).unwrap();
    assert_eq!(mc.total_runs(), 3);
    assert_eq!(
        mc.failed.len(),
        3,
        "{:?}",
        mc.runs.iter().map(|r| &r.report).collect::<Vec<_>>()
    );
    assert_eq!(mc.failure_fraction(), 1.0);
    assert!(mc.results_csv().contains("0,all,failed,1"));
    assert!(!mc.failed[0].error.is_empty());
}

#[test]
fn training_log_has_every_term() {
    let rec = run_single(&fading_cfg(), 0, 5).unwrap();
    let csv = rec.log.to_csv();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "epoch,fit,theta_prior,logdet_term,so_term,total,lambda,kappa,eta,train_eta_hat,val_eta_hat"
    );
    assert_eq!(csv.lines().count(), 1 + 4);
    let last: Vec<&str> = csv.lines().last().unwrap().split(',').collect();
    assert!(last.iter().all(|f| !f.is_empty()));
    let rel = rec.log.relevance_csv();
    assert_eq!(
        rel.lines().next(),
        Some("epoch,block,importance,truncated_std")
    );
    assert_eq!(rel.lines().count(), 1 + 4 * 4);
}

#[test]
fn relevance_tail_equals_reported_test_eta() {
    let rec = run_single(&fading_cfg(), 0, 6).unwrap();
    let r = &rec.report;
    assert_eq!(r.truncated_std.len(), 4);
    assert_eq!(*r.truncated_std.last().unwrap(), r.eta_hat_test);
    assert_eq!(r.gap, r.eta_hat_test - r.eta_hat_train);
}

#[test]
fn zero_theta_has_zero_importance() {
    let rec = run_single(&fading_cfg(), 0, 6).unwrap();
    let Predictor::Fading(mut m) = rec.checkpoint.model else {
        panic!("fading expected")
    };
    m.theta = Tensor::zeros(&[4]);
    let (_, test) = harness::run_datasets(&fading_cfg(), 6).unwrap();
    let r = fading::model::RegressorMatrix::build(&test, 2, 3).unwrap();
    let rel = fading::metrics::block_relevance(&m, &r).unwrap();
    assert!(rel.importance.iter().all(|&v| v == 0.0));
    let rms = (r.targets().iter().map(|y| y * y).sum::<f64>() / r.rows() as f64).sqrt();
    assert!(rel.truncated_std.iter().all(|&v| v == rms));
}

#[test]
fn paired_models_see_the_same_data() {
    let a = fading_cfg();
    let mut b = tiny(ModelSpec::Plain { horizon: 5 });
    b.hidden = vec![20, 20];
    assert_eq!(
        harness::run_datasets(&a, 7).unwrap(),
        harness::run_datasets(&b, 7).unwrap()
    );
}

#[test]
fn output_root_precedence() {
    // the only test touching this variable
    std::env::remove_var(harness::OUTPUT_ROOT_ENV);
    assert_eq!(harness::output_root(None), std::path::PathBuf::from("runs"));
    assert_eq!(
        harness::output_root(Some("cfg".as_ref())),
        std::path::PathBuf::from("cfg")
    );
    std::env::set_var(harness::OUTPUT_ROOT_ENV, "/tmp/elsewhere");
    assert_eq!(
        harness::output_root(Some("cfg".as_ref())),
        std::path::PathBuf::from("/tmp/elsewhere")
    );
    std::env::remove_var(harness::OUTPUT_ROOT_ENV);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn median_ignores_order(mut v in prop::collection::vec(-1e3f64..1e3, 1..30), seed in any::<u64>()) {
        let m = median(&v);
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        v.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(median(&v), m);
        let below = v.iter().filter(|&&x| x < m).count();
        let above = v.iter().filter(|&&x| x > m).count();
        prop_assert!(below <= v.len() / 2 && above <= v.len() / 2);
    }
}
