//! Classical fractional-programming solver.
//!
//! Each round refreshes the SINR auxiliaries `g`, then the quadratic-transform
//! auxiliaries `u`, then solves the beamformer subproblem in closed form with
//! the power multiplier `nu` found by bisection.

use nalgebra::linalg::SymmetricEigen;
use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::model::{
    objective_from_stats, AuxiliaryState, BeamformingMatrix, CMatrix, ChannelMatrix, LinkStats, ObjectiveMode,
    SystemConfig,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FpSettings {
    pub max_iters: usize,
    /// Stop once the relative change of the objective drops below this.
    pub rel_tol: f64,
    /// Relative power gap accepted by the multiplier bisection.
    pub bisect_tol: f64,
    pub bisect_max_steps: usize,
}

impl Default for FpSettings {
    fn default() -> Self {
        FpSettings { max_iters: 100, rel_tol: 1e-6, bisect_tol: 1e-8, bisect_max_steps: 200 }
    }
}

impl FpSettings {
    /// Exactly `iters` rounds, no early stop.
    pub fn with_budget(iters: usize) -> Self {
        FpSettings { max_iters: iters, rel_tol: 0.0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.bisect_max_steps == 0 || !(self.bisect_tol > 0.0) || !(self.rel_tol >= 0.0) {
            return Err(Error::Config(format!("invalid solver settings {self:?}")));
        }
        Ok(())
    }
}

/// Per-iteration record of an iterative solve.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SolveTrace {
    /// Full Lagrangian-dual objective after each round, in bits. Empty for WMMSE.
    pub objective: Vec<f64>,
    pub wsr: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a numerical guard had to clamp an intermediate quantity.
    pub clamped: bool,
}

/// `g_k = S_k / I_k`.
pub fn update_g(h: &ChannelMatrix, v: &BeamformingMatrix, config: &SystemConfig) -> Result<Vec<f64>> {
    h.check_dims(config)?;
    check_beamformer(h, v)?;
    let stats = LinkStats::compute(h.matrix(), v.matrix(), config.sigma2);
    Ok(g_from_stats(&stats))
}

/// `u_k = sqrt(w_k (1 + g_k) S_k) / (S_k + I_k)`.
pub fn update_u(h: &ChannelMatrix, v: &BeamformingMatrix, g: &[f64], config: &SystemConfig) -> Result<Vec<f64>> {
    h.check_dims(config)?;
    check_beamformer(h, v)?;
    if g.len() != config.users {
        return Err(Error::dims("g", (config.users, 1), (g.len(), 1)));
    }
    let stats = LinkStats::compute(h.matrix(), v.matrix(), config.sigma2);
    Ok(u_from_stats(&stats, g, &config.weights))
}

pub(crate) fn g_from_stats(stats: &LinkStats) -> Vec<f64> {
    (0..stats.signal.len()).map(|k| stats.sinr(k)).collect()
}

pub(crate) fn u_from_stats(stats: &LinkStats, g: &[f64], weights: &[f64]) -> Vec<f64> {
    (0..stats.signal.len()).map(|k| (weights[k] * (1.0 + g[k]) * stats.signal[k]).sqrt() / stats.total[k]).collect()
}

fn check_beamformer(h: &ChannelMatrix, v: &BeamformingMatrix) -> Result<()> {
    if h.matrix().shape() != v.matrix().shape() {
        return Err(Error::dims("beamformer vs channel", h.matrix().shape(), v.matrix().shape()));
    }
    Ok(())
}

/// `sqrt(w_k (1 + g_k)) u_k`, the per-user coefficient of the closed-form beamformer.
fn fp_coefficients(aux: &AuxiliaryState, weights: &[f64]) -> Vec<Complex64> {
    weights.iter().enumerate().map(|(k, w)| Complex64::new((w * (1.0 + aux.g[k])).sqrt() * aux.u[k], 0.0)).collect()
}

/// `sum_j scale_j h_j h_j^H`.
pub(crate) fn weighted_outer(h: &CMatrix, scale: &[f64]) -> CMatrix {
    let mut hs = h.clone();
    for (k, s) in scale.iter().enumerate() {
        hs.column_mut(k).scale_mut(s.sqrt());
    }
    &hs * hs.adjoint()
}

/// `H diag(coeffs)`.
fn scale_columns(h: &CMatrix, coeffs: &[Complex64]) -> CMatrix {
    let mut out = h.clone();
    for (k, c) in coeffs.iter().enumerate() {
        for z in out.column_mut(k).iter_mut() {
            *z *= c;
        }
    }
    out
}

/// The beamformer subproblem `v_k(nu) = b_k (A + nu I)^{-1} h_k` for a
/// Hermitian PSD `A`, diagonalised once so that the power curve can be
/// evaluated cheaply during bisection.
pub(crate) struct MultiplierProblem {
    eigvals: DVector<f64>,
    eigvecs: CMatrix,
    /// `U^H H diag(b)`.
    rotated: CMatrix,
    /// Squared magnitudes of `rotated`, summed over users, per eigen-direction.
    energy: Vec<f64>,
    floor: f64,
}

impl MultiplierProblem {
    pub(crate) fn new(h: &CMatrix, a: CMatrix, coeffs: &[Complex64]) -> Self {
        let eig = SymmetricEigen::new(a);
        let eigvals = eig.eigenvalues.map(|x| x.max(0.0));
        let eigvecs = eig.eigenvectors;
        let rotated = eigvecs.ad_mul(&scale_columns(h, coeffs));
        let energy = (0..rotated.nrows()).map(|l| rotated.row(l).iter().map(|z| z.norm_sqr()).sum()).collect();
        let lambda_max = eigvals.iter().cloned().fold(0.0, f64::max);
        MultiplierProblem { eigvals, eigvecs, rotated, energy, floor: 1e-12 * lambda_max }
    }

    fn is_null(&self, l: usize) -> bool {
        self.eigvals[l] <= self.floor
    }

    /// `sum_k ||v_k(nu)||^2`; at `nu = 0` this is the `nu -> 0+` limit.
    pub(crate) fn power(&self, nu: f64) -> f64 {
        let total_energy: f64 = self.energy.iter().sum();
        let mut power = 0.0;
        for (l, e) in self.energy.iter().enumerate() {
            if nu == 0.0 && self.is_null(l) {
                if *e > 1e-18 * total_energy {
                    return f64::INFINITY;
                }
                continue;
            }
            power += e / (self.eigvals[l] + nu).powi(2);
        }
        power
    }

    pub(crate) fn beamformer(&self, nu: f64) -> CMatrix {
        let mut scaled = self.rotated.clone();
        for l in 0..scaled.nrows() {
            let d = if nu == 0.0 && self.is_null(l) { 0.0 } else { 1.0 / (self.eigvals[l] + nu) };
            scaled.row_mut(l).scale_mut(d);
        }
        &self.eigvecs * scaled
    }

    /// Smallest `nu >= 0` whose beamformer fits the budget. Bisection keeps
    /// the feasible endpoint.
    pub(crate) fn find_nu(&self, p_max: f64, tol: f64, max_steps: usize) -> Result<f64> {
        if self.power(0.0) <= p_max {
            return Ok(0.0);
        }
        let mut steps = 0;
        let (mut lo, mut hi) = (0.0, 1.0);
        while self.power(hi) > p_max {
            lo = hi;
            hi *= 2.0;
            steps += 1;
            if steps >= max_steps {
                return Err(self.bisection_error(steps, lo, hi, p_max));
            }
        }
        while self.power(hi) < p_max * (1.0 - tol) {
            if steps >= max_steps {
                return Err(self.bisection_error(steps, lo, hi, p_max));
            }
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.power(mid) > p_max {
                lo = mid;
            } else {
                hi = mid;
            }
            steps += 1;
        }
        Ok(hi)
    }

    fn bisection_error(&self, steps: usize, lo: f64, hi: f64, budget: f64) -> Error {
        Error::Bisection { steps, lo, hi, power: self.power(hi), budget }
    }
}

/// Smallest eigenvalue above `1e-12` times the largest.
pub(crate) fn well_conditioned(hermitian: &CMatrix) -> bool {
    let eig = SymmetricEigen::new(hermitian.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    min > 1e-12 * max
}

/// Closed-form beamformer for a fixed multiplier, via a direct solve of
/// `(sum_j u_j^2 h_j h_j^H + nu I) X = H diag(sqrt(w (1 + g)) u)`.
pub fn solve_v_given_nu(
    h: &ChannelMatrix,
    aux: &AuxiliaryState,
    nu: f64,
    config: &SystemConfig,
) -> Result<BeamformingMatrix> {
    h.check_dims(config)?;
    if !(nu >= 0.0) {
        return Err(Error::Config(format!("nu must be >= 0, got {nu}")));
    }
    let u2: Vec<f64> = aux.u.iter().map(|u| u * u).collect();
    let mut system = weighted_outer(h.matrix(), &u2);
    if nu == 0.0 && !well_conditioned(&system) {
        return Err(Error::Singular("rank-deficient system at nu = 0; use nu > 0".into()));
    }
    for i in 0..system.nrows() {
        system[(i, i)] += nu;
    }
    let rhs = scale_columns(h.matrix(), &fp_coefficients(aux, &config.weights));
    let chol =
        system.cholesky().ok_or_else(|| Error::Singular(format!("system not positive definite at nu = {nu}")))?;
    Ok(BeamformingMatrix::new(chol.solve(&rhs)))
}

/// Smallest `nu >= 0` such that the closed-form beamformer meets the power budget.
pub fn find_nu(h: &ChannelMatrix, aux: &AuxiliaryState, config: &SystemConfig, settings: &FpSettings) -> Result<f64> {
    h.check_dims(config)?;
    fp_subproblem(h.matrix(), aux, &config.weights).find_nu(
        config.p_max,
        settings.bisect_tol,
        settings.bisect_max_steps,
    )
}

fn fp_subproblem(h: &CMatrix, aux: &AuxiliaryState, weights: &[f64]) -> MultiplierProblem {
    let u2: Vec<f64> = aux.u.iter().map(|u| u * u).collect();
    MultiplierProblem::new(h, weighted_outer(h, &u2), &fp_coefficients(aux, weights))
}

/// `alpha H` with `alpha = sqrt(p_max / Tr(H H^H))`; zero when `H = 0`.
pub fn matched_filter(h: &ChannelMatrix, p_max: f64) -> BeamformingMatrix {
    let energy = h.matrix().norm_squared();
    if energy == 0.0 {
        return BeamformingMatrix::zeros(h.antennas(), h.users());
    }
    let alpha = (p_max / energy).sqrt();
    BeamformingMatrix::new(h.matrix() * Complex64::new(alpha, 0.0))
}

/// Runs the solver from the matched-filter start.
pub fn run_fp(
    h: &ChannelMatrix,
    config: &SystemConfig,
    settings: &FpSettings,
) -> Result<(BeamformingMatrix, AuxiliaryState, SolveTrace)> {
    run_fp_from(h, matched_filter(h, config.p_max), config, settings)
}

/// Runs the solver from an arbitrary start. A start that carries no signal to
/// any user is a fixed point of the updates and is replaced by the matched filter.
pub fn run_fp_from(
    h: &ChannelMatrix,
    start: BeamformingMatrix,
    config: &SystemConfig,
    settings: &FpSettings,
) -> Result<(BeamformingMatrix, AuxiliaryState, SolveTrace)> {
    config.validate()?;
    settings.validate()?;
    h.check_dims(config)?;
    check_beamformer(h, &start)?;
    let hm = h.matrix();
    let mut v = start.into_inner();
    let mut aux = AuxiliaryState::zeros(config.users);
    let mut trace = SolveTrace::default();
    let mut previous: Option<f64> = None;

    for _ in 0..settings.max_iters {
        let mut stats = LinkStats::compute(hm, &v, config.sigma2);
        if stats.signal.iter().all(|s| *s == 0.0) {
            v = matched_filter(h, config.p_max).into_inner();
            stats = LinkStats::compute(hm, &v, config.sigma2);
        }
        let g = g_from_stats(&stats);
        let u = u_from_stats(&stats, &g, &config.weights);
        aux = AuxiliaryState { g, u };

        let sub = fp_subproblem(hm, &aux, &config.weights);
        let nu = sub.find_nu(config.p_max, settings.bisect_tol, settings.bisect_max_steps)?;
        v = sub.beamformer(nu);

        let stats = LinkStats::compute(hm, &v, config.sigma2);
        let objective = objective_from_stats(&stats, &aux, &config.weights, ObjectiveMode::FullLdt);
        let rate: f64 = (0..config.users).map(|k| config.weights[k] * (1.0 + stats.sinr(k)).log2()).sum();
        trace.objective.push(objective);
        trace.wsr.push(rate);
        trace.iterations += 1;

        if let Some(prev) = previous {
            if (objective - prev).abs() <= settings.rel_tol * prev.abs() {
                trace.converged = true;
                break;
            }
        }
        previous = Some(objective);
    }
    Ok((BeamformingMatrix::new(v), aux, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{sample_channels, Seed};
    use crate::model::{qt_objective, wsr};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn update_u_fixtures() {
        // K = 1, S = 3, sigma2 = 1, g = 3: u = sqrt(12) / 4
        let h = ChannelMatrix::new(CMatrix::from_element(1, 1, c(1.0, 0.0))).unwrap();
        let v = BeamformingMatrix::new(CMatrix::from_element(1, 1, c(3f64.sqrt(), 0.0)));
        let cfg = SystemConfig::new(1, 1, 10.0);
        let u = update_u(&h, &v, &[3.0], &cfg).unwrap();
        assert!((u[0] - 12f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((u[0] - 0.8660254037844386).abs() < 1e-12);

        let zero = BeamformingMatrix::zeros(1, 1);
        assert_eq!(update_u(&h, &zero, &[0.0], &cfg).unwrap(), vec![0.0]);
        assert!(update_u(&h, &v, &[0.0, 1.0], &cfg).is_err());
    }

    #[test]
    fn update_g_fixtures() {
        let h = ChannelMatrix::new(CMatrix::from_column_slice(2, 1, &[c(1.0, 0.0), c(0.0, 0.0)])).unwrap();
        let v = BeamformingMatrix::new(CMatrix::from_column_slice(2, 1, &[c(2.0, 0.0), c(0.0, 0.0)]));
        let cfg = SystemConfig::new(2, 1, 10.0);
        assert_eq!(update_g(&h, &v, &cfg).unwrap(), vec![4.0]);
        assert_eq!(update_g(&h, &BeamformingMatrix::zeros(2, 1), &cfg).unwrap(), vec![0.0]);

        let h = sample_channels(Seed(2), 4, 4, 1).remove(0);
        let v = BeamformingMatrix::new(sample_channels(Seed(3), 4, 4, 1).remove(0).into_inner());
        let cfg = SystemConfig::new(4, 4, 10.0);
        let g = update_g(&h, &v, &cfg).unwrap();
        for (k, gk) in g.iter().enumerate() {
            assert!((gk - crate::model::sinr(&h, &v, 1.0, k).unwrap()).abs() < 1e-12 * gk.max(1.0));
        }
    }

    #[test]
    fn closed_form_fixtures() {
        let cfg = SystemConfig::new(3, 1, 10.0);
        let h = ChannelMatrix::new(CMatrix::from_column_slice(3, 1, &[c(1.0, 0.0), c(0.0, 0.0), c(0.0, 0.0)])).unwrap();
        let aux = AuxiliaryState { g: vec![2.0], u: vec![1.0] };
        let v = solve_v_given_nu(&h, &aux, 1.0, &cfg).unwrap();
        let expected = 3f64.sqrt() / 2.0;
        assert!((v.matrix()[(0, 0)] - c(expected, 0.0)).norm() < 1e-14);
        assert!(v.matrix()[(1, 0)].norm() < 1e-15 && v.matrix()[(2, 0)].norm() < 1e-15);

        let zero_u = AuxiliaryState { g: vec![2.0], u: vec![0.0] };
        assert_eq!(solve_v_given_nu(&h, &zero_u, 1.0, &cfg).unwrap().power(), 0.0);
        assert!(matches!(solve_v_given_nu(&h, &aux, 0.0, &cfg), Err(Error::Singular(_))));
        assert_eq!(find_nu(&h, &zero_u, &cfg, &FpSettings::default()).unwrap(), 0.0);
    }

    #[test]
    fn eigen_route_matches_direct_solve() {
        let cfg = SystemConfig::new(4, 4, 10.0);
        let h = sample_channels(Seed(12), 4, 4, 1).remove(0);
        let aux = AuxiliaryState { g: vec![0.5, 1.0, 2.0, 0.1], u: vec![0.3, 0.2, 0.5, 0.9] };
        let sub = fp_subproblem(h.matrix(), &aux, &cfg.weights);
        for nu in [0.01, 0.3, 2.0] {
            let direct = solve_v_given_nu(&h, &aux, nu, &cfg).unwrap();
            let eig = sub.beamformer(nu);
            assert!((direct.matrix() - &eig).norm() < 1e-10 * direct.matrix().norm());
            assert!((sub.power(nu) - direct.power()).abs() < 1e-10 * direct.power());
        }
    }

    #[test]
    fn stationarity_of_closed_form() {
        // Central differences of f(V) - nu ||V||^2 over every real coordinate.
        let cfg = SystemConfig::new(4, 4, 10.0);
        let h = sample_channels(Seed(13), 4, 4, 1).remove(0);
        let aux = AuxiliaryState { g: vec![0.5, 1.0, 2.0, 0.1], u: vec![0.3, 0.2, 0.5, 0.9] };
        let nu = 0.4;
        let v = solve_v_given_nu(&h, &aux, nu, &cfg).unwrap().into_inner();
        let lagrangian = |m: &CMatrix| {
            let obj = qt_objective(&h, &BeamformingMatrix::new(m.clone()), &aux, &cfg).unwrap();
            obj - nu * m.norm_squared() / std::f64::consts::LN_2
        };
        let step = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..v.len() {
            for dir in [c(1.0, 0.0), c(0.0, 1.0)] {
                let (mut plus, mut minus) = (v.clone(), v.clone());
                plus[idx] += dir * step;
                minus[idx] -= dir * step;
                worst = worst.max(((lagrangian(&plus) - lagrangian(&minus)) / (2.0 * step)).abs());
            }
        }
        assert!(worst < 1e-6, "gradient magnitude {worst}");
    }

    #[test]
    fn power_curve_is_monotone_and_bisection_lands_on_budget() {
        let cfg = SystemConfig::new(4, 4, 10.0);
        let settings = FpSettings::default();
        for seed in 0..20 {
            let h = sample_channels(Seed(100 + seed), 4, 4, 1).remove(0);
            let v0 = matched_filter(&h, cfg.p_max);
            let g = update_g(&h, &v0, &cfg).unwrap();
            let u = update_u(&h, &v0, &g, &cfg).unwrap();
            let aux = AuxiliaryState { g, u };
            let sub = fp_subproblem(h.matrix(), &aux, &cfg.weights);
            let (p1, p2, p3) = (sub.power(0.1), sub.power(1.0), sub.power(10.0));
            assert!(p1 > p2 && p2 > p3);
            let nu = find_nu(&h, &aux, &cfg, &settings).unwrap();
            if nu > 0.0 {
                let p = solve_v_given_nu(&h, &aux, nu, &cfg).unwrap().power();
                assert!(p <= cfg.p_max * (1.0 + 1e-12) && p >= cfg.p_max * (1.0 - 1e-6), "power {p}");
            }
        }
    }

    #[test]
    fn inactive_constraint_returns_zero_multiplier() {
        // Tiny u makes the unregularised solution huge; large u makes it tiny.
        let cfg = SystemConfig::new(2, 2, 1e6);
        let h = ChannelMatrix::new(CMatrix::identity(2, 2)).unwrap();
        let aux = AuxiliaryState { g: vec![1.0, 1.0], u: vec![1.0, 1.0] };
        assert_eq!(find_nu(&h, &aux, &cfg, &FpSettings::default()).unwrap(), 0.0);
    }

    #[test]
    fn single_user_reaches_mrt() {
        for seed in 0..10 {
            let h = sample_channels(Seed(seed), 4, 1, 1).remove(0);
            let cfg = SystemConfig::new(4, 1, 10.0);
            let (v, _, trace) = run_fp(&h, &cfg, &FpSettings::default()).unwrap();
            let norm2 = h.matrix().norm_squared();
            let optimum = (1.0 + cfg.p_max * norm2 / cfg.sigma2).log2();
            assert!((wsr(&h, &v, &cfg).unwrap() - optimum).abs() < 1e-6);
            assert!(trace.iterations >= 1);
        }
    }

    #[test]
    fn objective_is_monotone_and_iterates_feasible() {
        let cfg = SystemConfig::new(4, 4, 10.0);
        for h in sample_channels(Seed(77), 4, 4, 20) {
            let (v, _, trace) = run_fp(&h, &cfg, &FpSettings::default()).unwrap();
            for w in trace.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-8 * w[0].abs(), "{} -> {}", w[0], w[1]);
            }
            assert!(v.is_feasible(cfg.p_max));
        }
    }

    #[test]
    fn zero_start_falls_back_to_matched_filter() {
        let cfg = SystemConfig::new(4, 4, 10.0);
        let h = sample_channels(Seed(5), 4, 4, 1).remove(0);
        let (v, _, _) = run_fp_from(&h, BeamformingMatrix::zeros(4, 4), &cfg, &FpSettings::with_budget(3)).unwrap();
        assert!(wsr(&h, &v, &cfg).unwrap() > 0.0);
    }

    #[test]
    fn weight_scaling_leaves_solution_unchanged() {
        let h = sample_channels(Seed(31), 4, 4, 1).remove(0);
        let mut cfg = SystemConfig::new(4, 4, 10.0);
        let settings = FpSettings { max_iters: 500, rel_tol: 1e-12, ..FpSettings::default() };
        let (v1, _, _) = run_fp(&h, &cfg, &settings).unwrap();
        cfg.weights = vec![3.0; 4];
        let (v3, _, _) = run_fp(&h, &cfg, &settings).unwrap();
        let rel = (v3.matrix() - v1.matrix()).norm() / v1.matrix().norm();
        assert!(rel < 1e-4, "relative change {rel}");
    }
}
