//! Reference solvers that are not unfolded: WMMSE and regularized zero-forcing.

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fp::{matched_filter, weighted_outer, well_conditioned, FpSettings, MultiplierProblem, SolveTrace};
use crate::model::{wsr_unchecked, BeamformingMatrix, CMatrix, ChannelMatrix, SystemConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmmseSettings {
    pub max_iters: usize,
    /// Stop once the relative WSR change drops below this.
    pub rel_tol: f64,
    pub bisect_tol: f64,
    pub bisect_max_steps: usize,
}

impl Default for WmmseSettings {
    fn default() -> Self {
        let fp = FpSettings::default();
        WmmseSettings {
            max_iters: fp.max_iters,
            rel_tol: fp.rel_tol,
            bisect_tol: fp.bisect_tol,
            bisect_max_steps: fp.bisect_max_steps,
        }
    }
}

impl WmmseSettings {
    pub fn with_budget(iters: usize) -> Self {
        WmmseSettings { max_iters: iters, rel_tol: 0.0, ..Self::default() }
    }
}

const MIN_MSE: f64 = 1e-12;

/// Sum-rate WMMSE: MMSE receive scalars, MSE weights, then the weighted
/// MMSE transmit filter with the power multiplier found by bisection.
pub fn run_wmmse(
    h: &ChannelMatrix,
    config: &SystemConfig,
    settings: &WmmseSettings,
) -> Result<(BeamformingMatrix, SolveTrace)> {
    config.validate()?;
    h.check_dims(config)?;
    if settings.max_iters == 0 || !(settings.bisect_tol > 0.0) {
        return Err(Error::Config(format!("invalid WMMSE settings {settings:?}")));
    }
    let hm = h.matrix();
    let users = config.users;
    let mut v = matched_filter(h, config.p_max).into_inner();
    let mut trace = SolveTrace::default();
    let mut previous: Option<f64> = None;

    for _ in 0..settings.max_iters {
        let z = hm.ad_mul(&v);
        let mut receive = Vec::with_capacity(users);
        let mut mse_weight = Vec::with_capacity(users);
        for k in 0..users {
            let total: f64 = z.row(k).iter().map(|x| x.norm_sqr()).sum::<f64>() + config.sigma2;
            let a = z[(k, k)] / total;
            let mut e = 1.0 - (a.conj() * z[(k, k)]).re;
            if e <= MIN_MSE {
                e = MIN_MSE;
                trace.clamped = true;
            }
            receive.push(a);
            mse_weight.push(config.weights[k] / e);
        }
        let scale: Vec<f64> = (0..users).map(|k| mse_weight[k] * receive[k].norm_sqr()).collect();
        let coeffs: Vec<Complex64> = (0..users).map(|k| receive[k] * mse_weight[k]).collect();
        let sub = MultiplierProblem::new(hm, weighted_outer(hm, &scale), &coeffs);
        let nu = sub.find_nu(config.p_max, settings.bisect_tol, settings.bisect_max_steps)?;
        v = sub.beamformer(nu);

        let rate = wsr_unchecked(hm, &v, config.sigma2, &config.weights);
        trace.wsr.push(rate);
        trace.iterations += 1;
        if let Some(prev) = previous {
            if (rate - prev).abs() <= settings.rel_tol * prev.abs() {
                trace.converged = true;
                break;
            }
        }
        previous = Some(rate);
    }
    Ok((BeamformingMatrix::new(v), trace))
}

/// Directions `(H H^H + alpha I)^{-1} h_k`, each scaled to `p_max / K`
/// (users with a zero direction get nothing and the rest share the budget).
pub fn rzf_beamformer(h: &ChannelMatrix, alpha_reg: f64, config: &SystemConfig) -> Result<BeamformingMatrix> {
    h.check_dims(config)?;
    if !(alpha_reg >= 0.0) {
        return Err(Error::Config(format!("regularization must be >= 0, got {alpha_reg}")));
    }
    let hm = h.matrix();
    let mut gram = hm * hm.adjoint();
    if alpha_reg == 0.0 && !well_conditioned(&gram) {
        return Err(Error::Singular("H H^H is rank deficient; use alpha > 0".into()));
    }
    for i in 0..gram.nrows() {
        gram[(i, i)] += Complex64::new(alpha_reg, 0.0);
    }
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Singular(format!("regularized Gram matrix singular at alpha = {alpha_reg}")))?;
    let mut directions: CMatrix = chol.solve(hm);
    let norms: Vec<f64> = directions.column_iter().map(|c| c.norm()).collect();
    let active = norms.iter().filter(|n| **n > 0.0).count();
    if active == 0 {
        return Ok(BeamformingMatrix::zeros(hm.nrows(), hm.ncols()));
    }
    let per_user = (config.p_max / active as f64).sqrt();
    for (k, n) in norms.iter().enumerate() {
        let s = if *n > 0.0 { per_user / n } else { 0.0 };
        directions.column_mut(k).scale_mut(s);
    }
    Ok(BeamformingMatrix::new(directions))
}
