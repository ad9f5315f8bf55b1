//! System configuration and the per-user link quantities.
//!
//! Everything here is a pure function of its inputs. `Z = H^H V` is the
//! central intermediate: `Z[(k, j)] = h_k^H v_j`, so the signal power of user
//! `k` is `|Z[(k, k)]|^2` and its interference is the rest of row `k`.

use std::f64::consts::LN_2;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type CMatrix = DMatrix<Complex64>;

/// Which form of the transformed objective `R_Q` to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ObjectiveMode {
    /// The quadratic-transform terms only. At the optimal auxiliaries this
    /// evaluates to `sum_k w_k SINR_k`.
    QuadraticOnly,
    /// Quadratic terms plus the Lagrangian-dual log terms, reported in bits.
    /// At the optimal auxiliaries this equals the weighted sum rate.
    #[default]
    FullLdt,
}

impl std::str::FromStr for ObjectiveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "quadratic" | "quadraticonly" | "quadratic_only" => Ok(ObjectiveMode::QuadraticOnly),
            "full" | "fullldt" | "full_ldt" | "ldt" => Ok(ObjectiveMode::FullLdt),
            _ => Err(Error::Config(format!("unknown objective mode `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// Transmit antennas `L`.
    pub antennas: usize,
    /// Single-antenna users `K`.
    pub users: usize,
    /// Noise variance (linear).
    pub sigma2: f64,
    /// Total transmit power budget (linear, same unit as `sigma2`).
    pub p_max: f64,
    pub weights: Vec<f64>,
    /// Quantile level of the robust rate.
    pub gamma: f64,
    /// Variance of the channel estimation error.
    pub sigma_h2: f64,
    pub objective_mode: ObjectiveMode,
}

impl SystemConfig {
    /// Unit noise, unit weights, `gamma = 0.05`, `sigma_h2 = 0.05`.
    pub fn new(antennas: usize, users: usize, p_max: f64) -> Self {
        SystemConfig {
            antennas,
            users,
            sigma2: 1.0,
            p_max,
            weights: vec![1.0; users],
            gamma: 0.05,
            sigma_h2: 0.05,
            objective_mode: ObjectiveMode::FullLdt,
        }
    }

    pub fn with_sigma_h2(mut self, sigma_h2: f64) -> Self {
        self.sigma_h2 = sigma_h2;
        self
    }

    pub fn with_objective_mode(mut self, mode: ObjectiveMode) -> Self {
        self.objective_mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.antennas == 0 || self.users == 0 {
            return bad(format!("L and K must be positive (L={}, K={})", self.antennas, self.users));
        }
        if !(self.sigma2 > 0.0) || !self.sigma2.is_finite() {
            return bad(format!("sigma2 must be > 0, got {}", self.sigma2));
        }
        if !(self.p_max > 0.0) || !self.p_max.is_finite() {
            return bad(format!("p_max must be > 0, got {}", self.p_max));
        }
        if self.weights.len() != self.users {
            return bad(format!("{} weights for {} users", self.weights.len(), self.users));
        }
        if let Some(w) = self.weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return bad(format!("weights must be > 0, got {w}"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad(format!("gamma must lie in (0, 1), got {}", self.gamma));
        }
        if !(self.sigma_h2 >= 0.0) || !self.sigma_h2.is_finite() {
            return bad(format!("sigma_h2 must be >= 0, got {}", self.sigma_h2));
        }
        Ok(())
    }
}

/// Channel vectors `h_k` stacked as the columns of an `L x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix(CMatrix);

impl ChannelMatrix {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Config("channel matrix has non-finite entries".into()));
        }
        Ok(ChannelMatrix(entries))
    }

    pub fn from_columns(columns: &[Vec<Complex64>]) -> Result<Self> {
        let k = columns.len();
        let l = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != l) {
            return Err(Error::Config("channel columns differ in length".into()));
        }
        Self::new(CMatrix::from_fn(l, k, |r, c| columns[c][r]))
    }

    pub fn antennas(&self) -> usize {
        self.0.nrows()
    }

    pub fn users(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    pub fn check_dims(&self, config: &SystemConfig) -> Result<()> {
        if self.antennas() != config.antennas || self.users() != config.users {
            return Err(Error::dims(
                "channel vs configuration",
                (config.antennas, config.users),
                (self.antennas(), self.users()),
            ));
        }
        Ok(())
    }
}

/// Beamformers `v_k` stacked as the columns of an `L x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingMatrix(CMatrix);

impl BeamformingMatrix {
    pub fn new(entries: CMatrix) -> Self {
        BeamformingMatrix(entries)
    }

    pub fn zeros(antennas: usize, users: usize) -> Self {
        BeamformingMatrix(CMatrix::zeros(antennas, users))
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_inner(self) -> CMatrix {
        self.0
    }

    /// `Tr(V V^H)`, the total radiated power.
    pub fn power(&self) -> f64 {
        self.0.norm_squared()
    }

    pub fn is_feasible(&self, p_max: f64) -> bool {
        self.power() <= p_max * (1.0 + 1e-9)
    }
}

/// Per-user auxiliaries of the transformed objective.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxiliaryState {
    /// Lagrangian-dual auxiliaries (SINR estimates).
    pub g: Vec<f64>,
    /// Quadratic-transform auxiliaries.
    pub u: Vec<f64>,
}

impl AuxiliaryState {
    pub fn zeros(users: usize) -> Self {
        AuxiliaryState { g: vec![0.0; users], u: vec![0.0; users] }
    }
}

/// Signal power `S_k` and total received power `T_k = S_k + I_k` for every user.
#[derive(Debug, Clone)]
pub struct LinkStats {
    pub signal: Vec<f64>,
    pub total: Vec<f64>,
}

impl LinkStats {
    pub fn compute(h: &CMatrix, v: &CMatrix, sigma2: f64) -> Self {
        let z = h.ad_mul(v);
        Self::from_gram(&z, sigma2)
    }

    /// From a precomputed `Z = H^H V`.
    pub fn from_gram(z: &CMatrix, sigma2: f64) -> Self {
        let k = z.nrows();
        let mut signal = Vec::with_capacity(k);
        let mut total = Vec::with_capacity(k);
        for row in 0..k {
            signal.push(z[(row, row)].norm_sqr());
            let received: f64 = (0..z.ncols()).map(|j| z[(row, j)].norm_sqr()).sum();
            total.push(received + sigma2);
        }
        LinkStats { signal, total }
    }

    pub fn interference(&self, k: usize) -> f64 {
        (self.total[k] - self.signal[k]).max(0.0)
    }

    pub fn sinr(&self, k: usize) -> f64 {
        self.signal[k] / self.interference(k)
    }
}

fn check_pair(h: &ChannelMatrix, v: &BeamformingMatrix) -> Result<()> {
    let (hv, vv) = (h.matrix().shape(), v.matrix().shape());
    if hv != vv {
        return Err(Error::dims("beamformer vs channel", hv, vv));
    }
    Ok(())
}

fn check_user(h: &ChannelMatrix, k: usize) -> Result<()> {
    if k >= h.users() {
        return Err(Error::Config(format!("user index {k} out of range for K={}", h.users())));
    }
    Ok(())
}

/// `|h_k^H v_k|^2` (users are 0-based).
pub fn signal_power(h: &ChannelMatrix, v: &BeamformingMatrix, k: usize) -> Result<f64> {
    check_pair(h, v)?;
    check_user(h, k)?;
    Ok(h.matrix().column(k).dotc(&v.matrix().column(k)).norm_sqr())
}

/// `sum_{j != k} |h_k^H v_j|^2 + sigma2`.
pub fn interference_plus_noise(h: &ChannelMatrix, v: &BeamformingMatrix, sigma2: f64, k: usize) -> Result<f64> {
    check_pair(h, v)?;
    check_user(h, k)?;
    let hk = h.matrix().column(k);
    let interference: f64 =
        (0..v.matrix().ncols()).filter(|&j| j != k).map(|j| hk.dotc(&v.matrix().column(j)).norm_sqr()).sum();
    Ok(interference + sigma2)
}

pub fn sinr(h: &ChannelMatrix, v: &BeamformingMatrix, sigma2: f64, k: usize) -> Result<f64> {
    Ok(signal_power(h, v, k)? / interference_plus_noise(h, v, sigma2, k)?)
}

/// Weighted sum rate in bits.
pub fn wsr(h: &ChannelMatrix, v: &BeamformingMatrix, config: &SystemConfig) -> Result<f64> {
    check_pair(h, v)?;
    h.check_dims(config)?;
    Ok(wsr_unchecked(h.matrix(), v.matrix(), config.sigma2, &config.weights))
}

pub(crate) fn wsr_unchecked(h: &CMatrix, v: &CMatrix, sigma2: f64, weights: &[f64]) -> f64 {
    let stats = LinkStats::compute(h, v, sigma2);
    weights.iter().enumerate().map(|(k, w)| w * (1.0 + stats.sinr(k)).log2()).sum()
}

/// The transformed objective `R_Q(V, g, u)` on channel `H`.
///
/// `QuadraticOnly` returns `sum_k 2 u_k sqrt(w_k (1+g_k) S_k) - u_k^2 (S_k + I_k)`.
/// `FullLdt` adds `sum_k w_k ln(1+g_k) - w_k g_k` and converts the total from
/// nats to bits.
pub fn qt_objective(
    h: &ChannelMatrix,
    v: &BeamformingMatrix,
    aux: &AuxiliaryState,
    config: &SystemConfig,
) -> Result<f64> {
    check_pair(h, v)?;
    h.check_dims(config)?;
    if aux.g.len() != config.users || aux.u.len() != config.users {
        return Err(Error::dims("auxiliaries", (config.users, config.users), (aux.g.len(), aux.u.len())));
    }
    if let Some(g) = aux.g.iter().find(|g| **g < -1.0) {
        return Err(Error::Config(format!("auxiliary g_k = {g} < -1 makes the objective undefined")));
    }
    let stats = LinkStats::compute(h.matrix(), v.matrix(), config.sigma2);
    Ok(objective_from_stats(&stats, aux, &config.weights, config.objective_mode))
}

pub(crate) fn objective_from_stats(
    stats: &LinkStats,
    aux: &AuxiliaryState,
    weights: &[f64],
    mode: ObjectiveMode,
) -> f64 {
    let mut quad = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        let (g, u) = (aux.g[k], aux.u[k]);
        let c = (w * (1.0 + g)).max(0.0).sqrt();
        quad += 2.0 * u * c * stats.signal[k].sqrt() - u * u * stats.total[k];
    }
    match mode {
        ObjectiveMode::QuadraticOnly => quad,
        ObjectiveMode::FullLdt => (ldt_offset(aux, weights) + quad) / LN_2,
    }
}

/// `sum_k w_k ln(1+g_k) - w_k g_k`, the part of the full objective that does
/// not depend on the beamformers.
pub(crate) fn ldt_offset(aux: &AuxiliaryState, weights: &[f64]) -> f64 {
    weights.iter().zip(&aux.g).map(|(w, g)| w * (g.ln_1p() - g)).sum()
}

/// Points within this relative margin of the budget count as feasible, which
/// makes the projection exactly idempotent under rounding.
pub(crate) const PROJECTION_SLACK: f64 = 1.0 + 1e-12;

/// Scale `V` back onto the power ball when `Tr(V V^H) > p_max`.
pub fn project_power(v: &BeamformingMatrix, p_max: f64) -> BeamformingMatrix {
    BeamformingMatrix(project_matrix(v.matrix().clone(), p_max))
}

pub(crate) fn project_matrix(v: CMatrix, p_max: f64) -> CMatrix {
    let power = v.norm_squared();
    if power <= p_max * PROJECTION_SLACK {
        v
    } else {
        let scale = (p_max / power).sqrt();
        v * Complex64::new(scale, 0.0)
    }
}
