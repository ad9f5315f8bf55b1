//! Acceptance criteria P1-P10, run in sequence with one `PASS`/`FAIL` line
//! each. Set `RB_FULL_SCALE=1` to add the full-scale training check.

use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use rand::Rng;
use robustbf::baselines::{run_wmmse, rzf_beamformer, WmmseSettings};
use robustbf::channel::{complex_normal, draw_channel, Seed, Stream};
use robustbf::config::ExperimentConfig;
use robustbf::experiments::{
    mean_robust, run_timing_sweep, timing_means, EvalMode, Method, PowerUnit, SolverKind, TestSet,
};
use robustbf::fp::{find_nu, run_fp, solve_v_given_nu, update_g, update_u, FpSettings};
use robustbf::model::{
    project_power, qt_objective, wsr, AuxiliaryState, BeamformingMatrix, CMatrix, ChannelMatrix, ObjectiveMode,
    SystemConfig,
};
use robustbf::training::{grad_schedule, quantile_select, train, GradMode, LossMode, LossSpec, TrainingBatch};
use robustbf::unfolding::{grad_v_objective, StepSizeSchedule};

type Outcome = (bool, String);

fn random_beamformer<R: Rng>(rng: &mut R, l: usize, k: usize, p_max: f64) -> BeamformingMatrix {
    let v = CMatrix::from_fn(l, k, |_, _| complex_normal(rng, 1.0));
    project_power(&BeamformingMatrix::new(&v * Complex64::new(2.0, 0.0)), p_max)
}

fn aux_at(h: &ChannelMatrix, v: &BeamformingMatrix, cfg: &SystemConfig) -> AuxiliaryState {
    let g = update_g(h, v, cfg).unwrap();
    let u = update_u(h, v, &g, cfg).unwrap();
    AuxiliaryState { g, u }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn p01_ldt_tightness() -> Outcome {
    let start = Instant::now();
    let cfg = SystemConfig::new(4, 4, 10.0);
    let mut rng = Seed(101).rng(Stream::Channels, 0);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let h = draw_channel(&mut rng, 4, 4);
        let v = random_beamformer(&mut rng, 4, 4, cfg.p_max);
        let aux = aux_at(&h, &v, &cfg);
        let rate = wsr(&h, &v, &cfg).unwrap();
        let obj = qt_objective(&h, &v, &aux, &cfg).unwrap();
        worst = worst.max((obj - rate).abs() / rate);
    }
    let secs = start.elapsed().as_secs_f64();
    (worst < 1e-9 && secs < 10.0, format!("LDT tightness: max rel err {worst:.2e} (< 1e-9), {secs:.2} s (< 10 s)"))
}

fn p02_fp_monotone_ascent() -> Outcome {
    let start = Instant::now();
    let cfg = SystemConfig::new(4, 4, 10.0);
    let mut worst_drop = 0.0f64;
    let mut infeasible = 0;
    for (i, h) in robustbf::sample_channels(Seed(102), 4, 4, 100).iter().enumerate() {
        let (v, _, trace) = run_fp(h, &cfg, &FpSettings::default()).unwrap();
        for w in trace.objective.windows(2) {
            worst_drop = worst_drop.min(w[1] - w[0]);
        }
        if !v.is_feasible(cfg.p_max) {
            infeasible += 1;
            eprintln!("instance {i} infeasible: power {}", v.power());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (worst_drop >= -1e-8 && infeasible == 0 && secs < 60.0,
        format!("FP monotone ascent: largest drop {worst_drop:.2e} (>= -1e-8), {infeasible} infeasible, {secs:.2} s (< 60 s)"),
    )
}

fn p03_single_user_optimum() -> Outcome {
    let cfg = SystemConfig::new(4, 1, 10.0);
    let mut worst = 0.0f64;
    for h in robustbf::sample_channels(Seed(103), 4, 1, 50) {
        let optimum = (1.0 + cfg.p_max * h.matrix().norm_squared() / cfg.sigma2).log2();
        let (v_fp, _, _) = run_fp(&h, &cfg, &FpSettings::default()).unwrap();
        let (v_wm, _) = run_wmmse(&h, &cfg, &WmmseSettings::default()).unwrap();
        for v in [v_fp, v_wm] {
            worst = worst.max((wsr(&h, &v, &cfg).unwrap() - optimum).abs());
        }
    }
    (worst < 1e-6, format!("single-user optimum: max |wsr - log2(1 + P|h|^2)| = {worst:.2e} (< 1e-6)"))
}

fn p04_cross_solver_agreement() -> Outcome {
    let cfg = SystemConfig::new(4, 4, 10.0);
    let mut gaps = Vec::new();
    let mut above_rzf = 0;
    let n = 50;
    for h in robustbf::sample_channels(Seed(104), 4, 4, n) {
        let fp = wsr(&h, &run_fp(&h, &cfg, &FpSettings::default()).unwrap().0, &cfg).unwrap();
        let wm = wsr(&h, &run_wmmse(&h, &cfg, &WmmseSettings::default()).unwrap().0, &cfg).unwrap();
        let rzf = wsr(&h, &rzf_beamformer(&h, 1.0, &cfg).unwrap(), &cfg).unwrap();
        gaps.push((fp - wm).abs() / fp);
        if fp >= rzf && wm >= rzf {
            above_rzf += 1;
        }
    }
    let med = median(gaps);
    let share = above_rzf as f64 / n as f64;
    (
        med <= 0.05 && share >= 0.95,
        format!(
            "cross-solver agreement: median |FP - WMMSE|/FP = {med:.3e} (<= 5%), both >= RZF on {:.0}% (>= 95%)",
            share * 100.0
        ),
    )
}

fn p05_gradient_fidelity() -> Outcome {
    let cfg = SystemConfig::new(4, 4, 10.0).with_objective_mode(ObjectiveMode::QuadraticOnly);
    let mut rng = Seed(105).rng(Stream::Channels, 0);
    let step = 1e-6;
    let mut worst_v = 0.0f64;
    for _ in 0..20 {
        let h = draw_channel(&mut rng, 4, 4);
        let v = random_beamformer(&mut rng, 4, 4, cfg.p_max);
        let v_aux = random_beamformer(&mut rng, 4, 4, cfg.p_max);
        let aux = aux_at(&h, &v_aux, &cfg);
        let grad = grad_v_objective(&h, &v, &aux, &cfg).unwrap();
        let f = |m: &CMatrix| qt_objective(&h, &BeamformingMatrix::new(m.clone()), &aux, &cfg).unwrap();
        let mut fd = CMatrix::zeros(4, 4);
        for idx in 0..16 {
            for unit in [Complex64::new(1.0, 0.0), Complex64::new(0.0, 1.0)] {
                let mut plus = v.matrix().clone();
                let mut minus = v.matrix().clone();
                plus[idx] += unit * step;
                minus[idx] -= unit * step;
                fd[idx] += unit * ((f(&plus) - f(&minus)) / (2.0 * step));
            }
        }
        let expected = grad * Complex64::new(2.0, 0.0);
        worst_v = worst_v.max((&fd - &expected).norm() / expected.norm());
    }

    let sys = SystemConfig::new(4, 4, 10.0).with_sigma_h2(0.05);
    let spec = LossSpec { mode: LossMode::RobustQuantile, gamma: 0.05, final_layer_only: false };
    let mut worst_mu = 0.0f64;
    for b in 0..20u64 {
        let batch = TrainingBatch::draw(Seed(1050 + b), 0, 2, 40, &sys).unwrap();
        let mut schedule = StepSizeSchedule::filled(2, 4, 0.0);
        for (i, mu) in schedule.as_mut_slice().iter_mut().enumerate() {
            *mu = 0.1 + 0.3 * ((i * 7 + b as usize) % 5) as f64 / 4.0;
        }
        let (_, ga) = grad_schedule(&schedule, &batch, &sys, &spec, GradMode::Analytic).unwrap();
        let (_, gf) = grad_schedule(&schedule, &batch, &sys, &spec, GradMode::FiniteDifference).unwrap();
        let scale = gf.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (a, f) in ga.iter().zip(&gf) {
            if f.abs() > 1e-8 {
                worst_mu = worst_mu.max((a - f).abs() / scale);
            }
        }
    }
    (
        worst_v < 1e-5 && worst_mu < 1e-4,
        format!("gradient fidelity: beamformer {worst_v:.2e} (< 1e-5), schedule {worst_mu:.2e} (< 1e-4)"),
    )
}

fn p06_projection_and_quantile_oracles() -> Outcome {
    let mut rng = Seed(106).rng(Stream::Channels, 0);
    let mut projection_ok = true;
    for _ in 0..1000 {
        let p = rng.random_range(0.1..20.0);
        let scale = rng.random_range(0.01..10.0);
        let v = BeamformingMatrix::new(CMatrix::from_fn(4, 4, |_, _| complex_normal(&mut rng, scale)));
        let once = project_power(&v, p);
        let twice = project_power(&once, p);
        projection_ok &= once == twice && once.power() <= p * (1.0 + 1e-12);
        if v.power() <= p {
            projection_ok &= once == v;
        }
    }
    let mut quantile_ok = true;
    for _ in 0..1000 {
        let n = rng.random_range(1..200);
        let values: Vec<f64> = (0..n).map(|_| (rng.random_range(0..20) as f64) * 0.5).collect();
        let gamma = rng.random_range(0.001..0.999);
        let mut pairs: Vec<(f64, usize)> = values.iter().copied().zip(0..).collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let k = ((gamma * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        quantile_ok &= quantile_select(&values, gamma).unwrap() == pairs[k - 1];
    }
    (projection_ok && quantile_ok,
        format!("projection idempotent and feasible: {projection_ok}; quantile matches full sort on 1000 lists: {quantile_ok}"),
    )
}

fn p07_bisection_contract() -> Outcome {
    let cfg = SystemConfig::new(4, 4, 10.0);
    let settings = FpSettings::default();
    let mut rng = Seed(107).rng(Stream::Channels, 0);
    let (mut checked, mut bad_power, mut bad_monotone) = (0, 0, 0);
    while checked < 100 {
        let h = draw_channel(&mut rng, 4, 4);
        let v = random_beamformer(&mut rng, 4, 4, cfg.p_max);
        let aux = aux_at(&h, &v, &cfg);
        let nu = find_nu(&h, &aux, &cfg, &settings).unwrap();
        if nu == 0.0 {
            continue;
        }
        checked += 1;
        let power = solve_v_given_nu(&h, &aux, nu, &cfg).unwrap().power();
        if !(power >= cfg.p_max * (1.0 - 1e-6) && power <= cfg.p_max) {
            bad_power += 1;
        }
        let grid: Vec<f64> =
            [0.5 * nu, nu, 2.0 * nu].iter().map(|&x| solve_v_given_nu(&h, &aux, x, &cfg).unwrap().power()).collect();
        if !(grid[0] >= grid[1] && grid[1] >= grid[2]) {
            bad_monotone += 1;
        }
    }
    (
        bad_power == 0 && bad_monotone == 0,
        format!("bisection: {bad_power}/100 outside [P(1-1e-6), P], {bad_monotone}/100 non-monotone power grids"),
    )
}

fn desk_config() -> ExperimentConfig {
    ExperimentConfig::default().fast()
}

fn p08_training_benefit() -> Outcome {
    let start = Instant::now();
    let cfg = desk_config();
    let system = cfg.system(0.05);
    let (trained, _) = train(&cfg.train_config(), &system, 4, 4).unwrap();
    let test = TestSet::from_config(&cfg);
    let methods =
        [Method::Dufp(StepSizeSchedule::ones(4, 4)), Method::Dufp(trained), Method::Fp(FpSettings::with_budget(4))];
    let modes = [EvalMode::Surrogate, EvalMode::Shannon];
    let r = mean_robust(&methods, &test, cfg.gamma, &modes, &system).unwrap();
    let (ones, dufp, fp) = (&r[0], &r[1], &r[2]);
    let improves = (0..2).all(|m| dufp[m] - ones[m] >= 0.01 * ones[m].abs());
    let beats_fp = dufp[0] >= fp[0];
    let secs = start.elapsed().as_secs_f64();
    (improves && beats_fp && secs < 1800.0,
        format!(
            "training benefit: surrogate ones {:.3} -> trained {:.3} vs FP(4) {:.3}; shannon ones {:.3} -> trained {:.3} vs FP(4) {:.3}; {secs:.1} s",
            ones[0], dufp[0], fp[0], ones[1], dufp[1], fp[1]
        ),
    )
}

/// Mean robust rate per `(solver, sigma_h2)` for UI-DUFP(4PGD) trained per
/// variance, converged FP and WMMSE, and RZF.
fn error_sweep(cfg: &ExperimentConfig, sigmas: &[f64]) -> Vec<[[f64; 2]; 4]> {
    let test = TestSet::from_config(cfg);
    let modes = [EvalMode::Shannon, EvalMode::Surrogate];
    sigmas
        .iter()
        .map(|&s| {
            let system = cfg.system(s);
            let (schedule, _) = train(&cfg.train_config(), &system, cfg.layers, 4).unwrap();
            let methods = [
                Method::Dufp(schedule),
                Method::Fp(FpSettings::default()),
                Method::Wmmse(WmmseSettings::default()),
                Method::Rzf(cfg.rzf_alpha),
            ];
            let r = mean_robust(&methods, &test, cfg.gamma, &modes, &system).unwrap();
            [[r[0][0], r[0][1]], [r[1][0], r[1][1]], [r[2][0], r[2][1]], [r[3][0], r[3][1]]]
        })
        .collect()
}

fn p09_degradation_ordering() -> Outcome {
    let sigmas = [0.01, 0.09, 0.17];
    let names = [SolverKind::Dufp, SolverKind::Fp, SolverKind::Wmmse, SolverKind::Rzf];
    let mut fits = Vec::new();
    let mut headline = None;
    for unit in [PowerUnit::Watt, PowerUnit::Milliwatt] {
        let mut cfg = desk_config();
        cfg.power_unit = unit;
        let res = error_sweep(&cfg, &sigmas);
        for (mode_idx, mode) in [EvalMode::Shannon, EvalMode::Surrogate].iter().enumerate() {
            let anchors = [(0, 0, 8.7), (1, 0, 8.7), (2, 0, 8.7), (0, 2, 6.0), (1, 2, 5.74), (2, 2, 5.74)];
            let errs: Vec<f64> = anchors.iter().map(|&(s, x, e)| (res[x][s][mode_idx] - e).abs() / e).collect();
            let within = errs.iter().filter(|e| **e <= 0.15).count();
            let mean = errs.iter().sum::<f64>() / errs.len() as f64;
            println!("  anchors ({mode}, {unit}): {within}/6 within 15%, mean rel err {mean:.3}");
            fits.push((mean, *mode, unit));
        }
        if unit == cfg.power_unit && unit == ExperimentConfig::default().power_unit {
            headline = Some(res);
        }
    }
    fits.sort_by(|a, b| a.0.total_cmp(&b.0));
    println!(
        "  closest anchor fit: eval_mode = {}, power_unit = {} (mean rel err {:.3})",
        fits[0].1, fits[0].2, fits[0].0
    );

    let res = headline.unwrap();
    let mut monotone = true;
    for (s, name) in names.iter().enumerate() {
        let series: Vec<f64> = res.iter().map(|r| r[s][0]).collect();
        println!("  {name}: {series:.3?}");
        monotone &= series.windows(2).all(|w| w[1] <= w[0]);
    }
    let gap_low = res[0][0][0] - res[0][1][0];
    let gap_high = res[2][0][0] - res[2][1][0];
    (monotone && gap_high > gap_low,
        format!("degradation: all solvers non-increasing = {monotone}; UI-DUFP - FP gap {gap_low:.3} at 0.01 -> {gap_high:.3} at 0.17"),
    )
}

fn p10_timing_ordering() -> Outcome {
    let mut cfg = ExperimentConfig::default();
    cfg.sizes = vec![4, 8, 16];
    cfg.steps = vec![4, 8];
    cfg.reps = 6;
    cfg.solvers = vec![SolverKind::Dufp, SolverKind::Fp];
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let rows = pool.install(|| run_timing_sweep(&cfg)).unwrap();
    let means = timing_means(&rows);
    let get =
        |solver: &str, size: usize| means.iter().find(|(s, n, _)| s == solver && *n == size).map(|m| m.2).unwrap();
    let mut ok = true;
    let mut detail = Vec::new();
    for &size in &cfg.sizes {
        let (t4, t8, fp) = (get("ui-dufp-4pgd", size), get("ui-dufp-8pgd", size), get("fp", size));
        ok &= t8 > t4;
        if size == 16 {
            ok &= fp > t8 && fp > t4;
        }
        detail.push(format!("L=K={size}: 4pgd {t4:.2e} s, 8pgd {t8:.2e} s, fp {fp:.2e} s"));
    }
    (ok, format!("timing ordering: {}", detail.join("; ")))
}

/// Full-scale version of P8 (8000 x 64 training channels, B = 1000). Takes
/// about 20 minutes on one core; run with `--ignored`.
fn p08_full_scale_training() -> Outcome {
    let cfg = ExperimentConfig::default();
    let system = cfg.system(0.05);
    let mut tc = cfg.train_config();
    tc.eval_every = 0;
    let (trained, _) = train(&tc, &system, 4, 4).unwrap();
    let test = TestSet::from_config(&desk_config());
    let methods =
        [Method::Dufp(StepSizeSchedule::ones(4, 4)), Method::Dufp(trained), Method::Fp(FpSettings::with_budget(4))];
    let r = mean_robust(&methods, &test, cfg.gamma, &[EvalMode::Surrogate], &system).unwrap();
    let (ones, dufp, fp) = (r[0][0], r[1][0], r[2][0]);
    (
        dufp - ones >= 0.01 * ones.abs() && dufp >= fp,
        format!("full-scale training: surrogate ones {ones:.3} -> trained {dufp:.3} vs FP(4) {fp:.3}"),
    )
}

fn main() -> ExitCode {
    let mut checks: Vec<(&str, fn() -> Outcome)> = vec![
        ("P1", p01_ldt_tightness),
        ("P2", p02_fp_monotone_ascent),
        ("P3", p03_single_user_optimum),
        ("P4", p04_cross_solver_agreement),
        ("P5", p05_gradient_fidelity),
        ("P6", p06_projection_and_quantile_oracles),
        ("P7", p07_bisection_contract),
        ("P8", p08_training_benefit),
        ("P9", p09_degradation_ordering),
        ("P10", p10_timing_ordering),
    ];
    if std::env::var_os("RB_FULL_SCALE").is_some() {
        checks.push(("P8-full", p08_full_scale_training));
    }
    let mut failed = Vec::new();
    for (id, check) in checks {
        let (pass, detail) = match std::panic::catch_unwind(check) {
            Ok(outcome) => outcome,
            Err(_) => (false, "panicked".to_string()),
        };
        println!("{id} {} {detail}", if pass { "PASS" } else { "FAIL" });
        if !pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
