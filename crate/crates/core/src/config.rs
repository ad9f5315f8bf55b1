//! Line-oriented `key = value` experiment configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. Recognised keys:
//!
//! | key | meaning | default |
//! |---|---|---|
//! | `L`, `K` | antennas, users | 4, 4 |
//! | `sigma2` | noise variance | 1 |
//! | `p_max_dbm` | power budget in dBm | 40 |
//! | `power_unit` | `watt` (dBm -> W) or `milliwatt` (dBm -> mW) | watt |
//! | `gamma` | quantile level | 0.05 |
//! | `sigma_h2` | error variance for training, layer sweep, solve, eval | 0.05 |
//! | `sigma_h2_list` | error variances of the error sweep | 0.01, 0.05, 0.09, 0.13, 0.17 |
//! | `B` | uncertainty samples per channel | 1000 |
//! | `M` | unfolded layers | 4 |
//! | `max_layers` | largest `M` / iteration budget of the layer sweep | 6 |
//! | `N` | PGD steps per layer (list) | 4, 8 |
//! | `seed` | master seed | 0 |
//! | `eval_mode` | headline metric, `shannon` or `surrogate` | shannon |
//! | `objective` | `full` or `quadratic` form of the surrogate | full |
//! | `solvers` | subset of `dufp`, `fp`, `wmmse`, `rzf` | all |
//! | `fp_iters` | FP / WMMSE iteration cap in the error sweep, 0 = until converged | 0 |
//! | `rzf_alpha` | RZF regularization | 1 |
//! | `test_batches`, `test_batch_size` | held-out set | 50, 64 |
//! | `train_batches`, `train_batch_size` | training set | 8000, 64 |
//! | `learning_rate` | Adam step | 0.001 |
//! | `sizes` | `L = K` values of the timing sweep | 4, 8, 16, 32 |
//! | `reps` | timing repetitions | 6 |
//! | `timing_channels` | channels timed per repetition | 20 |

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::channel::Seed;
use crate::error::{Error, Result};
use crate::experiments::{EvalMode, PowerUnit, SolverKind};
use crate::model::{ObjectiveMode, SystemConfig};
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub antennas: usize,
    pub users: usize,
    pub sigma2: f64,
    pub p_max_dbm: f64,
    pub power_unit: PowerUnit,
    pub gamma: f64,
    pub sigma_h2: f64,
    pub sigma_h2_list: Vec<f64>,
    pub samples: usize,
    pub layers: usize,
    pub max_layers: usize,
    pub steps: Vec<usize>,
    pub seed: u64,
    pub eval_mode: EvalMode,
    pub objective: ObjectiveMode,
    pub solvers: Vec<SolverKind>,
    pub fp_iters: usize,
    pub rzf_alpha: f64,
    pub test_batches: usize,
    pub test_batch_size: usize,
    pub train_batches: usize,
    pub train_batch_size: usize,
    pub learning_rate: f64,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub timing_channels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            antennas: 4,
            users: 4,
            sigma2: 1.0,
            p_max_dbm: 40.0,
            power_unit: PowerUnit::Watt,
            gamma: 0.05,
            sigma_h2: 0.05,
            sigma_h2_list: vec![0.01, 0.05, 0.09, 0.13, 0.17],
            samples: 1000,
            layers: 4,
            max_layers: 6,
            steps: vec![4, 8],
            seed: 0,
            eval_mode: EvalMode::Shannon,
            objective: ObjectiveMode::FullLdt,
            solvers: vec![SolverKind::Dufp, SolverKind::Fp, SolverKind::Wmmse, SolverKind::Rzf],
            fp_iters: 0,
            rzf_alpha: 1.0,
            test_batches: 50,
            test_batch_size: 64,
            train_batches: 8000,
            train_batch_size: 64,
            learning_rate: 1e-3,
            sizes: vec![4, 8, 16, 32],
            reps: 6,
            timing_channels: 20,
        }
    }
}

fn parse_value<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| Error::Parse { line, msg: format!("bad value `{value}` for `{key}`: {e}") })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| parse_value(line, key, s)).collect()
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Desk-scale profile: 5 x 16 held-out channels, `B = 200`, 200 x 16 training channels.
    pub fn fast(mut self) -> Self {
        self.test_batches = 5;
        self.test_batch_size = 16;
        self.samples = 200;
        self.train_batches = 200;
        self.train_batch_size = 16;
        self
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.trim();
            if content.is_empty() || content.starts_with('#') {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or(Error::Parse { line, msg: format!("expected `key = value`, got `{content}`") })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "L" => cfg.antennas = parse_value(line, key, value)?,
                "K" => cfg.users = parse_value(line, key, value)?,
                "sigma2" => cfg.sigma2 = parse_value(line, key, value)?,
                "p_max_dbm" => cfg.p_max_dbm = parse_value(line, key, value)?,
                "power_unit" => cfg.power_unit = parse_value(line, key, value)?,
                "gamma" => cfg.gamma = parse_value(line, key, value)?,
                "sigma_h2" => cfg.sigma_h2 = parse_value(line, key, value)?,
                "sigma_h2_list" => cfg.sigma_h2_list = parse_list(line, key, value)?,
                "B" => cfg.samples = parse_value(line, key, value)?,
                "M" => cfg.layers = parse_value(line, key, value)?,
                "max_layers" => cfg.max_layers = parse_value(line, key, value)?,
                "N" => cfg.steps = parse_list(line, key, value)?,
                "seed" => cfg.seed = parse_value(line, key, value)?,
                "eval_mode" => cfg.eval_mode = parse_value(line, key, value)?,
                "objective" => cfg.objective = parse_value(line, key, value)?,
                "solvers" => cfg.solvers = parse_list(line, key, value)?,
                "fp_iters" => cfg.fp_iters = parse_value(line, key, value)?,
                "rzf_alpha" => cfg.rzf_alpha = parse_value(line, key, value)?,
                "test_batches" => cfg.test_batches = parse_value(line, key, value)?,
                "test_batch_size" => cfg.test_batch_size = parse_value(line, key, value)?,
                "train_batches" => cfg.train_batches = parse_value(line, key, value)?,
                "train_batch_size" => cfg.train_batch_size = parse_value(line, key, value)?,
                "learning_rate" => cfg.learning_rate = parse_value(line, key, value)?,
                "sizes" => cfg.sizes = parse_list(line, key, value)?,
                "reps" => cfg.reps = parse_value(line, key, value)?,
                "timing_channels" => cfg.timing_channels = parse_value(line, key, value)?,
                _ => return Err(Error::Parse { line, msg: format!("unknown key `{key}`") }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.sigma_h2_list.is_empty() || self.steps.is_empty() || self.solvers.is_empty() || self.sizes.is_empty() {
            return bad("sweep lists must be non-empty");
        }
        if self.layers == 0 || self.max_layers == 0 || self.reps == 0 || self.timing_channels == 0 {
            return bad("M, max_layers, reps and timing_channels must be positive");
        }
        if self.test_batches == 0 || self.test_batch_size == 0 || self.train_batch_size == 0 {
            return bad("test and training batches must be non-empty");
        }
        if !(self.rzf_alpha >= 0.0) {
            return bad("rzf_alpha must be >= 0");
        }
        self.system(self.sigma_h2).validate()?;
        for s in &self.sigma_h2_list {
            self.system(*s).validate()?;
        }
        self.train_config().validate()
    }

    pub fn p_max(&self) -> f64 {
        self.power_unit.linear(self.p_max_dbm)
    }

    pub fn system(&self, sigma_h2: f64) -> SystemConfig {
        SystemConfig {
            sigma2: self.sigma2,
            gamma: self.gamma,
            sigma_h2,
            objective_mode: self.objective,
            ..SystemConfig::new(self.antennas, self.users, self.p_max())
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batches: self.train_batches,
            batch_size: self.train_batch_size,
            samples: self.samples,
            gamma: self.gamma,
            seed: Seed(self.seed),
            test_batches: self.test_batches,
            test_batch_size: self.test_batch_size,
            ..TrainConfig::default()
        }
    }

    /// Canonical text form; parsing it gives back the same configuration.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("L", self.antennas.to_string());
        kv("K", self.users.to_string());
        kv("sigma2", self.sigma2.to_string());
        kv("p_max_dbm", self.p_max_dbm.to_string());
        kv("power_unit", self.power_unit.to_string());
        kv("gamma", self.gamma.to_string());
        kv("sigma_h2", self.sigma_h2.to_string());
        kv("sigma_h2_list", join(&self.sigma_h2_list));
        kv("B", self.samples.to_string());
        kv("M", self.layers.to_string());
        kv("max_layers", self.max_layers.to_string());
        kv("N", join(&self.steps));
        kv("seed", self.seed.to_string());
        kv("eval_mode", self.eval_mode.to_string());
        kv(
            "objective",
            match self.objective {
                ObjectiveMode::FullLdt => "full".into(),
                ObjectiveMode::QuadraticOnly => "quadratic".into(),
            },
        );
        kv("solvers", join(&self.solvers));
        kv("fp_iters", self.fp_iters.to_string());
        kv("rzf_alpha", self.rzf_alpha.to_string());
        kv("test_batches", self.test_batches.to_string());
        kv("test_batch_size", self.test_batch_size.to_string());
        kv("train_batches", self.train_batches.to_string());
        kv("train_batch_size", self.train_batch_size.to_string());
        kv("learning_rate", self.learning_rate.to_string());
        kv("sizes", join(&self.sizes));
        kv("reps", self.reps.to_string());
        kv("timing_channels", self.timing_channels.to_string());
        s
    }
}
