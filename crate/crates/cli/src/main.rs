use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use robustbf::baselines::WmmseSettings;
use robustbf::channel::{load_channels, Seed};
use robustbf::config::ExperimentConfig;
use robustbf::experiments::{
    anchor_checks, eval_modes, mean_robust, rank_anchor_fits, run_error_sweep, run_layer_sweep, run_timing_sweep,
    sample_metrics, solve, sweep_csv, timing_csv, timing_means, write_text, EvalMode, Method, PowerUnit, ScheduleStore,
    SolverKind, SweepRow, TestSet,
};
use robustbf::fp::FpSettings;
use robustbf::model::{wsr, ChannelMatrix};
use robustbf::training::{quantile_select, train, TrainingBatch};
use robustbf::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "robustbf", version, about = "Robust multi-user beamforming with uncertainty-injected deep unfolding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment configuration (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, env = "RB_OUT_DIR", default_value = "results")]
    out: PathBuf,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Desk-scale profile: small training and test sets, B = 200.
    #[arg(long)]
    fast: bool,
    /// Worker threads for data-parallel evaluation (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Directory with trained schedules (default: the output directory).
    #[arg(long)]
    schedules: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train step-size schedules.
    Train {
        #[command(flatten)]
        common: Common,
        /// Train every schedule a sweep needs instead of the single `M` of the config.
        #[arg(long, value_enum)]
        sweep: Option<SweepKind>,
    },
    /// Robust rate of trained schedules and baselines on the held-out set.
    Eval {
        #[command(flatten)]
        common: Common,
    },
    /// Robust rate against depth or iteration budget.
    SweepLayers {
        #[command(flatten)]
        common: Common,
    },
    /// Robust rate against the channel error variance.
    SweepError {
        #[command(flatten)]
        common: Common,
        /// Also run the baselines under the other power convention and rank the anchor fits.
        #[arg(long)]
        compare_units: bool,
    },
    /// Inference time against system size.
    SweepTiming {
        #[command(flatten)]
        common: Common,
    },
    /// Beamformers of one solver on the held-out channels or a channel dump.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_solver)]
        solver: SolverKind,
        /// Channel dump to solve instead of the held-out set.
        #[arg(long)]
        channels: Option<PathBuf>,
        /// PGD steps per layer of the schedule to load when `--solver dufp`.
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum SweepKind {
    Layers,
    Error,
}

impl SweepKind {
    fn name(self) -> &'static str {
        match self {
            SweepKind::Layers => "layers",
            SweepKind::Error => "error",
        }
    }
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

struct Run {
    cfg: ExperimentConfig,
    out: PathBuf,
    store: ScheduleStore,
}

impl Run {
    fn new(common: &Common, default_threads: Option<usize>) -> Result<Self> {
        let mut cfg = ExperimentConfig::load(&common.config)?;
        if common.fast {
            cfg = cfg.fast();
        }
        if let Some(seed) = common.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        if let Some(n) = common.threads.or(default_threads) {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
        std::fs::create_dir_all(&common.out)?;
        let store = ScheduleStore::new(common.schedules.clone().unwrap_or_else(|| common.out.clone()));
        Ok(Run { cfg, out: common.out.clone(), store })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str, extra: &str) -> Result<()> {
        let mut text = String::new();
        let _ = writeln!(text, "# robustbf run manifest");
        let _ = writeln!(text, "# version = {}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(text, "# command = {command}");
        let _ = writeln!(text, "# args = {}", std::env::args().skip(1).collect::<Vec<_>>().join(" "));
        let _ = writeln!(text, "# seed = {}", self.cfg.seed);
        for line in extra.lines() {
            let _ = writeln!(text, "# {line}");
        }
        text.push_str(&self.cfg.to_text());
        write_text(&self.path(&format!("manifest_{command}.cfg")), &text)
    }
}

fn cmd_train(common: &Common, sweep: Option<SweepKind>) -> Result<()> {
    let run = Run::new(common, None)?;
    let cfg = &run.cfg;
    let jobs: Vec<(usize, usize, f64)> = match sweep {
        Some(kind) => ScheduleStore::required(cfg, kind.name()),
        None => cfg.steps.iter().map(|&n| (cfg.layers, n, cfg.sigma_h2)).collect(),
    };
    let tc = cfg.train_config();
    for (m, n, sigma_h2) in jobs {
        let (schedule, history) = train(&tc, &cfg.system(sigma_h2), m, n)?;
        let path = run.store.save(&schedule, sigma_h2)?;
        write_text(&run.path(&format!("history_M{m}_N{n}_sh{sigma_h2}.csv")), &history.to_csv())?;
        for (batch, checkpoint) in &history.checkpoints {
            checkpoint.save(&run.path(&format!("checkpoint_M{m}_N{n}_sh{sigma_h2}_b{batch}.txt")))?;
        }
        let last = history.loss.last().copied().unwrap_or(f64::NAN);
        println!("trained M={m} N={n} sigma_h2={sigma_h2}: final loss {last:.4} -> {}", path.display());
    }
    run.manifest("train", &format!("sweep = {}", sweep.map_or("none", SweepKind::name)))
}

fn baseline_methods(cfg: &ExperimentConfig) -> Vec<Method> {
    let (fp, wmmse) = if cfg.fp_iters == 0 {
        (FpSettings::default(), WmmseSettings::default())
    } else {
        (FpSettings::with_budget(cfg.fp_iters), WmmseSettings::with_budget(cfg.fp_iters))
    };
    cfg.solvers
        .iter()
        .filter_map(|kind| match kind {
            SolverKind::Dufp => None,
            SolverKind::Fp => Some(Method::Fp(fp)),
            SolverKind::Wmmse => Some(Method::Wmmse(wmmse)),
            SolverKind::Rzf => Some(Method::Rzf(cfg.rzf_alpha)),
        })
        .collect()
}

fn cmd_eval(common: &Common) -> Result<()> {
    let run = Run::new(common, None)?;
    let cfg = &run.cfg;
    let mut methods = Vec::new();
    if cfg.solvers.contains(&SolverKind::Dufp) {
        for &n in &cfg.steps {
            methods.push(Method::Dufp(run.store.load(cfg.layers, n, cfg.sigma_h2, "layers")?));
        }
    }
    methods.extend(baseline_methods(cfg));
    let modes = eval_modes(cfg.eval_mode);
    let means = mean_robust(&methods, &TestSet::from_config(cfg), cfg.gamma, &modes, &cfg.system(cfg.sigma_h2))?;
    let mut csv = String::from("solver,robust_wsr,eval_mode,seed\n");
    for (mode_idx, mode) in modes.iter().enumerate() {
        for (method, values) in methods.iter().zip(&means) {
            let _ = writeln!(csv, "{},{},{},{}", method.label(), values[mode_idx], mode, cfg.seed);
            if mode_idx == 0 {
                println!("{:>14}  {:.4}", method.label(), values[0]);
            }
        }
    }
    write_text(&run.path("eval.csv"), &csv)?;
    run.manifest("eval", "")
}

fn cmd_sweep_layers(common: &Common) -> Result<()> {
    let run = Run::new(common, None)?;
    let rows = run_layer_sweep(&run.cfg, &run.store)?;
    write_text(&run.path("sweep_layers.csv"), &sweep_csv(&rows))?;
    print_rows(&rows, run.cfg.eval_mode);
    run.manifest("sweep-layers", "")
}

fn print_rows(rows: &[SweepRow], mode: EvalMode) {
    for r in rows.iter().filter(|r| r.eval_mode == mode) {
        println!("{:>14}  x={:<6} {:.4}", r.solver, r.x, r.robust_wsr);
    }
}

fn cmd_sweep_error(common: &Common, compare_units: bool) -> Result<()> {
    let run = Run::new(common, None)?;
    let cfg = &run.cfg;
    let rows = run_error_sweep(cfg, &run.store)?;
    write_text(&run.path("sweep_error.csv"), &sweep_csv(&rows))?;
    print_rows(&rows, cfg.eval_mode);

    let mut candidates: Vec<(EvalMode, PowerUnit, Vec<SweepRow>)> =
        [EvalMode::Shannon, EvalMode::Surrogate].iter().map(|m| (*m, cfg.power_unit, rows.clone())).collect();
    if compare_units {
        let mut other = cfg.clone();
        other.power_unit = match cfg.power_unit {
            PowerUnit::Watt => PowerUnit::Milliwatt,
            PowerUnit::Milliwatt => PowerUnit::Watt,
        };
        other.solvers.retain(|s| *s != SolverKind::Dufp);
        let other_rows = run_error_sweep(&other, &run.store)?;
        write_text(&run.path(&format!("sweep_error_{}.csv", other.power_unit)), &sweep_csv(&other_rows))?;
        for m in [EvalMode::Shannon, EvalMode::Surrogate] {
            candidates.push((m, other.power_unit, other_rows.clone()));
        }
    }
    let mut extra = String::new();
    for check in anchor_checks(&rows, cfg.eval_mode) {
        let line = format!(
            "anchor {} at sigma_h2 = {}: measured {:.3}, reference {}, rel err {:.3} ({})",
            check.solver,
            check.sigma_h2,
            check.measured,
            check.expected,
            check.relative_error(),
            if check.within(0.15) { "within 15%" } else { "outside 15%" }
        );
        println!("{line}");
        let _ = writeln!(extra, "{line}");
    }
    let fits = rank_anchor_fits(&candidates);
    for (mode, unit, err) in &fits {
        let _ = writeln!(extra, "anchor fit eval_mode = {mode}, power_unit = {unit}: mean rel err {err:.4}");
    }
    if let Some((mode, unit, err)) = fits.first() {
        let line = format!("closest anchor fit: eval_mode = {mode}, power_unit = {unit} (mean rel err {err:.4})");
        println!("{line}");
        let _ = writeln!(extra, "{line}");
    }
    run.manifest("sweep-error", &extra)
}

fn cmd_sweep_timing(common: &Common) -> Result<()> {
    let run = Run::new(common, Some(1))?;
    let rows = run_timing_sweep(&run.cfg)?;
    write_text(&run.path("sweep_timing.csv"), &timing_csv(&rows))?;
    for (solver, size, seconds) in timing_means(&rows) {
        println!("{solver:>14}  L=K={size:<3} {seconds:.3e} s");
    }
    run.manifest("sweep-timing", "")
}

fn cmd_solve(common: &Common, solver: SolverKind, channels: Option<&Path>, steps: Option<usize>) -> Result<()> {
    let run = Run::new(common, None)?;
    let cfg = &run.cfg;
    let system = cfg.system(cfg.sigma_h2);
    let method = match solver {
        SolverKind::Dufp => {
            let n = steps.unwrap_or(cfg.steps[0]);
            Method::Dufp(run.store.load(cfg.layers, n, cfg.sigma_h2, "layers")?)
        }
        _ => {
            let mut one = cfg.clone();
            one.solvers = vec![solver];
            baseline_methods(&one).remove(0)
        }
    };
    let test = TestSet::from_config(cfg);
    let (hs, batches): (Vec<ChannelMatrix>, Vec<_>) = match channels {
        Some(path) => {
            let hs = load_channels(path)?;
            let batches = hs
                .iter()
                .enumerate()
                .map(|(i, h)| {
                    robustbf::channel::UncertaintyBatch::draw(
                        h,
                        cfg.sigma_h2,
                        cfg.samples,
                        &mut Seed(cfg.seed).rng(robustbf::channel::Stream::Errors, i as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            (hs, batches)
        }
        None => {
            let mut hs = Vec::new();
            let mut us = Vec::new();
            for b in 0..test.batches {
                let batch = TrainingBatch::draw_test(test.seed, b, test.batch_size, test.samples, &system)?;
                hs.extend(batch.channels);
                us.extend(batch.uncertainty);
            }
            (hs, us)
        }
    };
    let mut beams = String::from("channel,antenna,user,re,im\n");
    let mut rates = String::from("channel,wsr,robust_wsr_shannon,robust_wsr_surrogate\n");
    for (i, (h, ub)) in hs.iter().zip(&batches).enumerate() {
        h.check_dims(&system)?;
        let sol = solve(&method, h, &system)?;
        let v = sol.beamformer.matrix();
        for k in 0..v.ncols() {
            for l in 0..v.nrows() {
                let _ = writeln!(beams, "{i},{l},{k},{},{}", v[(l, k)].re, v[(l, k)].im);
            }
        }
        let shannon = quantile_select(&sample_metrics(&sol, ub, EvalMode::Shannon, &system), cfg.gamma)?.0;
        let surrogate = quantile_select(&sample_metrics(&sol, ub, EvalMode::Surrogate, &system), cfg.gamma)?.0;
        let _ = writeln!(rates, "{i},{},{shannon},{surrogate}", wsr(h, &sol.beamformer, &system)?);
    }
    let label = method.label();
    write_text(&run.path(&format!("beamformers_{label}.csv")), &beams)?;
    write_text(&run.path(&format!("wsr_{label}.csv")), &rates)?;
    println!("solved {} channels with {label}", hs.len());
    run.manifest("solve", &format!("solver = {label}"))
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common, sweep } => cmd_train(&common, sweep),
        Command::Eval { common } => cmd_eval(&common),
        Command::SweepLayers { common } => cmd_sweep_layers(&common),
        Command::SweepError { common, compare_units } => cmd_sweep_error(&common, compare_units),
        Command::SweepTiming { common } => cmd_sweep_timing(&common),
        Command::Solve { common, solver, channels, steps } => cmd_solve(&common, solver, channels.as_deref(), steps),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_solver_failure() { 2 } else { 1 })
        }
    }
}
