use robustbf::channel::Seed;
use robustbf::config::ExperimentConfig;
use robustbf::experiments::{
    mean_robust, run_layer_sweep, sweep_csv, EvalMode, Method, ScheduleStore, SolverKind, TestSet,
};
use robustbf::fp::FpSettings;
use robustbf::training::{final_objective, train, TrainConfig, TrainingBatch};
use robustbf::unfolding::{forward, StepSizeSchedule};

fn small() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().fast();
    cfg.test_batches = 2;
    cfg.samples = 100;
    cfg
}

#[test]
fn layer_sweep_csv_is_deterministic() {
    let mut cfg = small();
    cfg.max_layers = 3;
    cfg.steps = vec![4];
    cfg.solvers = vec![SolverKind::Dufp, SolverKind::Fp, SolverKind::Wmmse];
    let dir = tempfile::tempdir().unwrap();
    let store = ScheduleStore::new(dir.path());
    for m in 1..=3 {
        store.save(&StepSizeSchedule::filled(m, 4, 0.25), cfg.sigma_h2).unwrap();
    }
    let a = sweep_csv(&run_layer_sweep(&cfg, &store).unwrap());
    let b = sweep_csv(&run_layer_sweep(&cfg, &store).unwrap());
    assert_eq!(a, b);
}

#[test]
fn fp_robust_rate_grows_with_budget() {
    let cfg = small();
    let system = cfg.system(cfg.sigma_h2);
    let methods: Vec<Method> = (1..=6).map(|n| Method::Fp(FpSettings::with_budget(n))).collect();
    let r = mean_robust(&methods, &TestSet::from_config(&cfg), cfg.gamma, &[EvalMode::Shannon], &system).unwrap();
    let means: Vec<f64> = r.iter().map(|m| m[0]).collect();
    assert!(means.windows(2).all(|w| w[1] >= w[0] - 1e-9), "{means:?}");
}

#[test]
fn trained_schedule_beats_initial_schedule() {
    let cfg = ExperimentConfig::default();
    let system = cfg.system(0.05);
    let (trained, history) = train(&TrainConfig::fast(), &system, 4, 4).unwrap();
    assert!(history.loss.iter().all(|l| l.is_finite()));
    let ones = StepSizeSchedule::ones(4, 4);
    let (mut with_trained, mut with_ones, mut count) = (0.0, 0.0, 0);
    for b in 0..8 {
        let batch = TrainingBatch::draw_test(Seed(99), b, 64, 0, &system).unwrap();
        for h in &batch.channels {
            with_trained += final_objective(&forward(h, &trained, &system).unwrap(), h, &system);
            with_ones += final_objective(&forward(h, &ones, &system).unwrap(), h, &system);
            count += 1;
        }
    }
    assert!(count >= 500);
    assert!(with_trained > with_ones, "{} vs {}", with_trained / count as f64, with_ones / count as f64);
}
