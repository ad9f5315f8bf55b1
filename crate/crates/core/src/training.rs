//! Training of the step-size schedule under injected channel uncertainty.
//!
//! The loss of one channel is `-sum_m R_Q(V_m, g_m, u_m)`, where in robust
//! mode each layer term is replaced by the empirical `gamma`-quantile of
//! `R_Q` over the perturbed channels. Gradients are exact reverse-mode
//! derivatives through the unfolded graph; the quantile passes its gradient
//! through the selected order statistic only.

use std::f64::consts::LN_2;

use rayon::prelude::*;

use crate::channel::{draw_channel, Seed, Stream, UncertaintyBatch};
use crate::error::{Error, Result};
use crate::model::{
    objective_from_stats, AuxiliaryState, CMatrix, ChannelMatrix, LinkStats, ObjectiveMode, SystemConfig,
};
use crate::unfolding::{backward, forward_impl, LayerSeed, StepSizeSchedule, UnfoldTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    /// Negative objective on the nominal channel, summed over layers.
    Standard,
    /// Negative `gamma`-quantile over the injected samples, summed over layers.
    RobustQuantile,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    Analytic,
    FiniteDifference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batches: usize,
    pub batch_size: usize,
    /// Uncertainty samples per channel.
    pub samples: usize,
    pub gamma: f64,
    pub loss_mode: LossMode,
    pub grad_mode: GradMode,
    pub seed: Seed,
    /// Keep only the last layer's term in the loss.
    pub final_layer_only: bool,
    /// Held-out evaluation period in batches (0 disables it).
    pub eval_every: usize,
    pub test_batches: usize,
    pub test_batch_size: usize,
    /// Checkpoint period in batches (0 disables it).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batches: 8000,
            batch_size: 64,
            samples: 1000,
            gamma: 0.05,
            loss_mode: LossMode::RobustQuantile,
            grad_mode: GradMode::Analytic,
            seed: Seed(0),
            final_layer_only: false,
            eval_every: 50,
            test_batches: 50,
            test_batch_size: 64,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    /// Desk-scale profile: 200 batches of 16 channels, 200 samples, a
    /// held-out set of 5 x 16 channels.
    pub fn fast() -> Self {
        TrainConfig {
            batches: 200,
            batch_size: 16,
            samples: 200,
            test_batches: 5,
            test_batch_size: 16,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if self.batch_size == 0 || self.samples == 0 {
            return Err(Error::Config("batch size and sample count must be positive".into()));
        }
        check_rank(self.samples, self.gamma)
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec { mode: self.loss_mode, gamma: self.gamma, final_layer_only: self.final_layer_only }
    }
}

fn check_rank(samples: usize, gamma: f64) -> Result<()> {
    if (samples as f64) * gamma < 1.0 - 1e-9 {
        return Err(Error::Config(format!("B * gamma = {} < 1 leaves no order statistic", samples as f64 * gamma)));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub mode: LossMode,
    pub gamma: f64,
    pub final_layer_only: bool,
}

/// 1-based rank `ceil(gamma * n)`, clamped to `[1, n]`. The small offset
/// absorbs rounding in products such as `0.07 * 100`.
pub fn quantile_rank(n: usize, gamma: f64) -> usize {
    let raw = (gamma * n as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(n)
}

/// The element of 1-based rank `ceil(gamma * n)` in ascending order and its
/// original index; ties go to the lowest index.
pub fn quantile_select(values: &[f64], gamma: f64) -> Result<(f64, usize)> {
    if values.is_empty() {
        return Err(Error::Config("quantile of an empty list".into()));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let idx = order[quantile_rank(values.len(), gamma) - 1];
    Ok((values[idx], idx))
}

/// `R_Q` of fixed `(V, g, u)` on another channel realization.
pub(crate) fn objective_on(hb: &CMatrix, v: &CMatrix, aux: &AuxiliaryState, config: &SystemConfig) -> f64 {
    let stats = LinkStats::compute(hb, v, config.sigma2);
    objective_from_stats(&stats, aux, &config.weights, config.objective_mode)
}

/// `-sum_m R_Q(V_m, g_m, u_m)` on the nominal channel.
pub fn standard_loss(trace: &UnfoldTrace, h: &ChannelMatrix, config: &SystemConfig) -> f64 {
    -trace
        .layers
        .iter()
        .map(|layer| objective_on(h.matrix(), layer.beamformer.matrix(), &layer.aux, config))
        .sum::<f64>()
}

/// Per-layer quantile selection: `(value, sample index)`.
fn select_samples(
    trace: &UnfoldTrace,
    batch: &UncertaintyBatch,
    gamma: f64,
    config: &SystemConfig,
) -> Result<Vec<(f64, usize)>> {
    trace
        .layers
        .iter()
        .map(|layer| {
            let values: Vec<f64> = batch
                .samples
                .iter()
                .map(|hb| objective_on(hb.matrix(), layer.beamformer.matrix(), &layer.aux, config))
                .collect();
            quantile_select(&values, gamma)
        })
        .collect()
}

/// Batch mean of `-sum_m quantile_gamma(R_Q(V_m, g_m, u_m; H_b))`, with
/// `(V_m, g_m, u_m)` computed on the nominal channel.
pub fn robust_loss(
    traces: &[UnfoldTrace],
    batches: &[UncertaintyBatch],
    gamma: f64,
    config: &SystemConfig,
) -> Result<f64> {
    if traces.len() != batches.len() || traces.is_empty() {
        return Err(Error::Config(format!("{} traces for {} uncertainty batches", traces.len(), batches.len())));
    }
    let mut total = 0.0;
    for (trace, batch) in traces.iter().zip(batches) {
        check_rank(batch.len(), gamma)?;
        total -= select_samples(trace, batch, gamma, config)?.iter().map(|(v, _)| v).sum::<f64>();
    }
    Ok(total / traces.len() as f64)
}

/// Channels of one training step and, for the robust loss, their perturbed copies.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub channels: Vec<ChannelMatrix>,
    pub uncertainty: Vec<UncertaintyBatch>,
}

impl TrainingBatch {
    /// Deterministic batch `index` of the training stream.
    pub fn draw(seed: Seed, index: usize, size: usize, samples: usize, config: &SystemConfig) -> Result<Self> {
        Self::draw_from(seed, Stream::TrainChannels, Stream::TrainErrors, index, size, samples, config)
    }

    /// Deterministic batch `index` of the held-out stream.
    pub fn draw_test(seed: Seed, index: usize, size: usize, samples: usize, config: &SystemConfig) -> Result<Self> {
        Self::draw_from(seed, Stream::TestChannels, Stream::TestErrors, index, size, samples, config)
    }

    fn draw_from(
        seed: Seed,
        channels: Stream,
        errors: Stream,
        index: usize,
        size: usize,
        samples: usize,
        config: &SystemConfig,
    ) -> Result<Self> {
        let mut out = TrainingBatch { channels: Vec::with_capacity(size), uncertainty: Vec::with_capacity(size) };
        for i in 0..size {
            let id = (index * size + i) as u64;
            let h = draw_channel(&mut seed.rng(channels, id), config.antennas, config.users);
            if samples > 0 {
                let batch = UncertaintyBatch::draw(&h, config.sigma_h2, samples, &mut seed.rng(errors, id))?;
                out.uncertainty.push(batch);
            }
            out.channels.push(h);
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

fn included(layer: usize, layers: usize, spec: &LossSpec) -> bool {
    !spec.final_layer_only || layer + 1 == layers
}

fn check_batch(batch: &TrainingBatch, spec: &LossSpec) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty training batch".into()));
    }
    if spec.mode == LossMode::RobustQuantile {
        if batch.uncertainty.len() != batch.channels.len() {
            return Err(Error::Config("robust loss needs one uncertainty batch per channel".into()));
        }
        for u in &batch.uncertainty {
            check_rank(u.len(), spec.gamma)?;
        }
    }
    Ok(())
}

/// Mean loss over the batch for a given schedule.
pub fn batch_loss(
    schedule: &StepSizeSchedule,
    batch: &TrainingBatch,
    config: &SystemConfig,
    spec: &LossSpec,
) -> Result<f64> {
    check_batch(batch, spec)?;
    let losses: Vec<f64> = (0..batch.len())
        .into_par_iter()
        .map(|i| channel_loss(schedule, batch, i, config, spec))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / batch.len() as f64)
}

fn channel_loss(
    schedule: &StepSizeSchedule,
    batch: &TrainingBatch,
    i: usize,
    config: &SystemConfig,
    spec: &LossSpec,
) -> Result<f64> {
    let h = &batch.channels[i];
    let trace = forward_impl(h.matrix(), schedule, config, None);
    let layers = trace.layers.len();
    let mut loss = 0.0;
    match spec.mode {
        LossMode::Standard => {
            for (m, layer) in trace.layers.iter().enumerate() {
                if included(m, layers, spec) {
                    loss -= objective_on(h.matrix(), layer.beamformer.matrix(), &layer.aux, config);
                }
            }
        }
        LossMode::RobustQuantile => {
            let picks = select_samples(&trace, &batch.uncertainty[i], spec.gamma, config)?;
            for (m, (value, _)) in picks.iter().enumerate() {
                if included(m, layers, spec) {
                    loss -= value;
                }
            }
        }
    }
    Ok(loss)
}

/// Adjoints of `omega * R_Q(V, g, u; hb)` with respect to `(V, g, u)`.
fn objective_adjoint(hb: &CMatrix, v: &CMatrix, aux: &AuxiliaryState, config: &SystemConfig, omega: f64) -> LayerSeed {
    let k = hb.ncols();
    let z = hb.ad_mul(v);
    let stats = LinkStats::from_gram(&z, config.sigma2);
    let full = config.objective_mode == ObjectiveMode::FullLdt;
    let scale = omega * if full { 1.0 / LN_2 } else { 1.0 };
    let mut seed = LayerSeed { v: CMatrix::zeros(v.nrows(), k), g: vec![0.0; k], u: vec![0.0; k] };
    let mut z_bar = CMatrix::zeros(k, k);
    for j in 0..k {
        let (w, g, u) = (config.weights[j], aux.g[j], aux.u[j]);
        let c = (w * (1.0 + g)).sqrt();
        let zjj = z[(j, j)];
        let s = zjj.norm();
        let total = stats.total[j];
        seed.u[j] = scale * (2.0 * c * s - 2.0 * u * total);
        let log_part = if full { w / (1.0 + g) - w } else { 0.0 };
        seed.g[j] = scale * (log_part + u * s * w / c);
        if s > 0.0 {
            z_bar[(j, j)] += zjj * (scale * 2.0 * u * c / s);
        }
        let t_bar = -scale * u * u;
        for t in 0..k {
            z_bar[(j, t)] += z[(j, t)] * (2.0 * t_bar);
        }
    }
    seed.v = hb * z_bar;
    seed
}

fn channel_gradient(
    schedule: &StepSizeSchedule,
    batch: &TrainingBatch,
    i: usize,
    config: &SystemConfig,
    spec: &LossSpec,
) -> Result<(f64, Vec<f64>)> {
    let h = batch.channels[i].matrix();
    let mut tape = Vec::with_capacity(schedule.layers());
    let trace = forward_impl(h, schedule, config, Some(&mut tape));
    let layers = trace.layers.len();
    let picks = match spec.mode {
        LossMode::Standard => None,
        LossMode::RobustQuantile => Some(select_samples(&trace, &batch.uncertainty[i], spec.gamma, config)?),
    };
    let mut loss = 0.0;
    let mut seeds = Vec::with_capacity(layers);
    for (m, layer) in trace.layers.iter().enumerate() {
        let v = layer.beamformer.matrix();
        if !included(m, layers, spec) {
            let (l, k) = v.shape();
            seeds.push(LayerSeed { v: CMatrix::zeros(l, k), g: vec![0.0; k], u: vec![0.0; k] });
            continue;
        }
        let eval_channel = match &picks {
            None => h,
            Some(p) => batch.uncertainty[i].samples[p[m].1].matrix(),
        };
        loss -= objective_on(eval_channel, v, &layer.aux, config);
        seeds.push(objective_adjoint(eval_channel, v, &layer.aux, config, -1.0));
    }
    Ok((loss, backward(h, &tape, schedule, config, seeds)))
}

/// Mean batch loss and its gradient with respect to every step size.
pub fn grad_schedule(
    schedule: &StepSizeSchedule,
    batch: &TrainingBatch,
    config: &SystemConfig,
    spec: &LossSpec,
    mode: GradMode,
) -> Result<(f64, Vec<f64>)> {
    check_batch(batch, spec)?;
    let n = batch.len() as f64;
    match mode {
        GradMode::Analytic => {
            let parts: Vec<(f64, Vec<f64>)> = (0..batch.len())
                .into_par_iter()
                .map(|i| channel_gradient(schedule, batch, i, config, spec))
                .collect::<Result<_>>()?;
            let mut loss = 0.0;
            let mut grad = vec![0.0; schedule.as_slice().len()];
            for (l, g) in parts {
                loss += l;
                for (acc, x) in grad.iter_mut().zip(g) {
                    *acc += x;
                }
            }
            grad.iter_mut().for_each(|x| *x /= n);
            Ok((loss / n, grad))
        }
        GradMode::FiniteDifference => {
            let loss = batch_loss(schedule, batch, config, spec)?;
            let grad = (0..schedule.as_slice().len())
                .into_par_iter()
                .map(|idx| {
                    let mu = schedule.as_slice()[idx];
                    let step = 1e-5 * mu.abs().max(1.0);
                    let mut plus = schedule.clone();
                    plus.as_mut_slice()[idx] = mu + step;
                    let mut minus = schedule.clone();
                    minus.as_mut_slice()[idx] = mu - step;
                    Ok((batch_loss(&plus, batch, config, spec)? - batch_loss(&minus, batch, config, spec)?)
                        / (2.0 * step))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((loss, grad))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { first: vec![0.0; len], second: vec![0.0; len], step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Bias-corrected Adam update, descending on the loss.
pub fn adam_step(schedule: &mut StepSizeSchedule, grad: &[f64], state: &mut AdamState, learning_rate: f64) {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    for (i, mu) in schedule.as_mut_slice().iter_mut().enumerate() {
        let g = grad[i];
        state.first[i] = b1 * state.first[i] + (1.0 - b1) * g;
        state.second[i] = b2 * state.second[i] + (1.0 - b2) * g * g;
        let m_hat = state.first[i] / corr1;
        let v_hat = state.second[i] / corr2;
        *mu -= learning_rate * m_hat / (v_hat.sqrt() + state.epsilon);
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainHistory {
    pub loss: Vec<f64>,
    /// `(batch, mean robust objective)` on the held-out set.
    pub heldout: Vec<(usize, f64)>,
    pub checkpoints: Vec<(usize, StepSizeSchedule)>,
}

impl TrainHistory {
    /// CSV with columns `batch,loss,heldout_robust_wsr`; the last column is
    /// empty where no held-out evaluation ran.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,loss,heldout_robust_wsr\n");
        for (i, loss) in self.loss.iter().enumerate() {
            let batch = i + 1;
            let held = self.heldout.iter().find(|(b, _)| *b == batch).map(|(_, v)| format!("{v}")).unwrap_or_default();
            out.push_str(&format!("{batch},{loss},{held}\n"));
        }
        out
    }
}

/// Mean over the held-out channels of the robust objective of the final layer.
pub fn heldout_robust_objective(
    schedule: &StepSizeSchedule,
    config: &SystemConfig,
    train: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in 0..train.test_batches {
        let batch = TrainingBatch::draw_test(train.seed, b, train.test_batch_size, train.samples, config)?;
        let values: Vec<f64> = (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let trace = forward_impl(batch.channels[i].matrix(), schedule, config, None);
                let last = trace.layers.last().expect("at least one layer");
                let vals: Vec<f64> = batch.uncertainty[i]
                    .samples
                    .iter()
                    .map(|hb| objective_on(hb.matrix(), last.beamformer.matrix(), &last.aux, config))
                    .collect();
                quantile_select(&vals, train.gamma).map(|(v, _)| v)
            })
            .collect::<Result<_>>()?;
        total += values.iter().sum::<f64>();
        count += values.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Trains a `layers x steps` schedule starting from all ones.
pub fn train(
    train: &TrainConfig,
    config: &SystemConfig,
    layers: usize,
    steps: usize,
) -> Result<(StepSizeSchedule, TrainHistory)> {
    train_from(train, config, StepSizeSchedule::ones(layers, steps))
}

pub fn train_from(
    train: &TrainConfig,
    config: &SystemConfig,
    mut schedule: StepSizeSchedule,
) -> Result<(StepSizeSchedule, TrainHistory)> {
    train.validate()?;
    config.validate()?;
    if schedule.layers() == 0 {
        return Err(Error::Config("schedule needs at least one layer".into()));
    }
    let spec = train.loss_spec();
    let samples = match train.loss_mode {
        LossMode::Standard => 0,
        LossMode::RobustQuantile => train.samples,
    };
    let mut adam = AdamState::new(schedule.as_slice().len());
    let mut history = TrainHistory::default();
    for b in 0..train.batches {
        let batch = TrainingBatch::draw(train.seed, b, train.batch_size, samples, config)?;
        let (loss, grad) = grad_schedule(&schedule, &batch, config, &spec, train.grad_mode)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { what: format!("loss or gradient at batch {b}"), seed: train.seed.0 });
        }
        adam_step(&mut schedule, &grad, &mut adam, train.learning_rate);
        history.loss.push(loss);
        let done = b + 1;
        if train.eval_every > 0 && train.test_batches > 0 && done % train.eval_every == 0 {
            history.heldout.push((done, heldout_robust_objective(&schedule, config, train)?));
        }
        if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 {
            history.checkpoints.push((done, schedule.clone()));
        }
    }
    Ok((schedule, history))
}

/// Convenience for evaluation code: the final-layer objective of a forward run.
pub fn final_objective(trace: &UnfoldTrace, h: &ChannelMatrix, config: &SystemConfig) -> f64 {
    let last = trace.layers.last().expect("at least one layer");
    objective_on(h.matrix(), last.beamformer.matrix(), &last.aux, config)
}
