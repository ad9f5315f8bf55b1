//! The unfolded network: `M` layers, each refreshing the auxiliaries in
//! closed form and then taking `N` projected gradient-ascent steps on the
//! beamformers with trainable step sizes.

use std::fmt::Write as _;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::fp::{g_from_stats, matched_filter, u_from_stats, weighted_outer};
use crate::model::{
    project_matrix, AuxiliaryState, BeamformingMatrix, CMatrix, ChannelMatrix, LinkStats, SystemConfig,
    PROJECTION_SLACK,
};

/// Step sizes `mu[m][n]` for layer `m`, step `n`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSizeSchedule {
    layers: usize,
    steps: usize,
    mu: Vec<f64>,
}

impl StepSizeSchedule {
    pub fn filled(layers: usize, steps: usize, value: f64) -> Self {
        StepSizeSchedule { layers, steps, mu: vec![value; layers * steps] }
    }

    /// The untrained schedule, all step sizes equal to one.
    pub fn ones(layers: usize, steps: usize) -> Self {
        Self::filled(layers, steps, 1.0)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let steps = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != steps) {
            return Err(Error::Config("schedule rows differ in length".into()));
        }
        let mu: Vec<f64> = rows.concat();
        if mu.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("schedule has non-finite entries".into()));
        }
        Ok(StepSizeSchedule { layers: rows.len(), steps, mu })
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn get(&self, layer: usize, step: usize) -> f64 {
        self.mu[layer * self.steps + step]
    }

    pub fn set(&mut self, layer: usize, step: usize, value: f64) {
        self.mu[layer * self.steps + step] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.mu
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.mu
    }

    /// Text form: a `# UI-DUFP schedule M=<M> N=<N>` header, then one line
    /// per layer with `N` whitespace-separated step sizes.
    pub fn to_text(&self) -> String {
        let mut out = format!("# UI-DUFP schedule M={} N={}\n", self.layers, self.steps);
        for m in 0..self.layers {
            let row: Vec<String> = (0..self.steps).map(|n| format!("{}", self.get(m, n))).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty schedule".into() })?;
        let dims = header
            .strip_prefix("# UI-DUFP schedule ")
            .ok_or(Error::Parse { line: 1, msg: format!("bad header `{header}`") })?;
        let mut layers = None;
        let mut steps = None;
        for part in dims.split_whitespace() {
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|e| Error::Parse { line: 1, msg: format!("bad dimension `{v}`: {e}") })
            };
            if let Some(v) = part.strip_prefix("M=") {
                layers = Some(parse(v)?);
            } else if let Some(v) = part.strip_prefix("N=") {
                steps = Some(parse(v)?);
            }
        }
        let (layers, steps) = match (layers, steps) {
            (Some(m), Some(n)) => (m, n),
            _ => return Err(Error::Parse { line: 1, msg: "header lacks M= or N=".into() }),
        };
        let mut rows = Vec::with_capacity(layers);
        for (idx, line) in lines {
            if rows.len() == layers && line.trim().is_empty() {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
            if row.len() != steps {
                return Err(Error::Parse { line: idx + 1, msg: format!("expected {steps} values, got {}", row.len()) });
            }
            rows.push(row);
        }
        if rows.len() != layers {
            return Err(Error::Parse {
                line: rows.len() + 2,
                msg: format!("expected {layers} layers, got {}", rows.len()),
            });
        }
        let mut schedule = Self::from_rows(&rows)?;
        schedule.steps = steps;
        Ok(schedule)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Auxiliaries and output of one unfolded layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub aux: AuxiliaryState,
    pub beamformer: BeamformingMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldTrace {
    pub layers: Vec<LayerOutput>,
    pub output: BeamformingMatrix,
}

pub fn init_beamformer(h: &ChannelMatrix, p_max: f64) -> BeamformingMatrix {
    matched_filter(h, p_max)
}

/// `h_k^H v_k / |h_k^H v_k|`, taken as 1 where the signal vanishes.
fn signal_phases(z: &CMatrix) -> Vec<Complex64> {
    (0..z.nrows())
        .map(|k| {
            let d = z[(k, k)];
            let r = d.norm();
            if r > 0.0 {
                d / r
            } else {
                Complex64::new(1.0, 0.0)
            }
        })
        .collect()
}

/// Conjugate (Wirtinger) gradient of the quadratic objective with respect to
/// `V`: column `k` is `sqrt(w_k (1+g_k)) u_k phi_k h_k - (sum_j u_j^2 h_j h_j^H) v_k`
/// where `phi_k` is the phase of `h_k^H v_k` (one when it vanishes).
pub fn grad_v_objective(
    h: &ChannelMatrix,
    v: &BeamformingMatrix,
    aux: &AuxiliaryState,
    config: &SystemConfig,
) -> Result<CMatrix> {
    h.check_dims(config)?;
    if h.matrix().shape() != v.matrix().shape() {
        return Err(Error::dims("beamformer vs channel", h.matrix().shape(), v.matrix().shape()));
    }
    let coeff = linear_coefficients(aux, &config.weights);
    let u2: Vec<f64> = aux.u.iter().map(|u| u * u).collect();
    let a = weighted_outer(h.matrix(), &u2);
    let z = h.matrix().ad_mul(v.matrix());
    Ok(gradient(h.matrix(), v.matrix(), &z, &a, &coeff).0)
}

/// `sqrt(w_k (1 + g_k)) u_k`.
pub(crate) fn linear_coefficients(aux: &AuxiliaryState, weights: &[f64]) -> Vec<f64> {
    weights.iter().enumerate().map(|(k, w)| (w * (1.0 + aux.g[k])).sqrt() * aux.u[k]).collect()
}

fn gradient(h: &CMatrix, v: &CMatrix, z: &CMatrix, a: &CMatrix, coeff: &[f64]) -> (CMatrix, Vec<Complex64>) {
    let phases = signal_phases(z);
    let mut g = -(a * v);
    for k in 0..g.ncols() {
        let d = phases[k] * coeff[k];
        for l in 0..g.nrows() {
            g[(l, k)] += h[(l, k)] * d;
        }
    }
    (g, phases)
}

/// One projected ascent step `Omega(V + mu * grad)`.
pub fn pgd_step(
    h: &ChannelMatrix,
    v: &BeamformingMatrix,
    aux: &AuxiliaryState,
    mu: f64,
    config: &SystemConfig,
) -> Result<BeamformingMatrix> {
    let g = grad_v_objective(h, v, aux, config)?;
    let stepped = v.matrix() + g * Complex64::new(mu, 0.0);
    Ok(BeamformingMatrix::new(project_matrix(stepped, config.p_max)))
}

/// Everything the reverse pass needs from one PGD step.
pub(crate) struct StepTape {
    pub z: CMatrix,
    pub phases: Vec<Complex64>,
    pub grad: CMatrix,
    pub stepped: CMatrix,
    pub projected: bool,
}

pub(crate) struct LayerTape {
    pub z_in: CMatrix,
    pub stats: LinkStats,
    pub aux: AuxiliaryState,
    pub coeff: Vec<f64>,
    pub a: CMatrix,
    pub steps: Vec<StepTape>,
}

/// Runs the network, optionally recording the intermediates for backpropagation.
pub(crate) fn forward_impl(
    h: &CMatrix,
    schedule: &StepSizeSchedule,
    config: &SystemConfig,
    mut tape: Option<&mut Vec<LayerTape>>,
) -> UnfoldTrace {
    let channel = ChannelMatrix::new(h.clone()).expect("validated channel");
    let mut v = init_beamformer(&channel, config.p_max).into_inner();
    let mut layers = Vec::with_capacity(schedule.layers());
    for m in 0..schedule.layers() {
        let z_in = h.ad_mul(&v);
        let stats = LinkStats::from_gram(&z_in, config.sigma2);
        let g = g_from_stats(&stats);
        let u = u_from_stats(&stats, &g, &config.weights);
        let aux = AuxiliaryState { g, u };
        let coeff = linear_coefficients(&aux, &config.weights);
        let u2: Vec<f64> = aux.u.iter().map(|u| u * u).collect();
        let a = weighted_outer(h, &u2);
        let mut steps = Vec::new();
        for n in 0..schedule.steps() {
            let z = h.ad_mul(&v);
            let (grad, phases) = gradient(h, &v, &z, &a, &coeff);
            let stepped = &v + &grad * Complex64::new(schedule.get(m, n), 0.0);
            let projected = stepped.norm_squared() > config.p_max * PROJECTION_SLACK;
            let next = project_matrix(stepped.clone(), config.p_max);
            if tape.is_some() {
                steps.push(StepTape { z, phases, grad, stepped, projected });
            }
            v = next;
        }
        if let Some(t) = tape.as_deref_mut() {
            t.push(LayerTape { z_in, stats, aux: aux.clone(), coeff, a, steps });
        }
        layers.push(LayerOutput { aux, beamformer: BeamformingMatrix::new(v.clone()) });
    }
    UnfoldTrace { layers, output: BeamformingMatrix::new(v) }
}

pub fn forward(h: &ChannelMatrix, schedule: &StepSizeSchedule, config: &SystemConfig) -> Result<UnfoldTrace> {
    config.validate()?;
    h.check_dims(config)?;
    if schedule.layers() == 0 {
        return Err(Error::Config("schedule needs at least one layer".into()));
    }
    Ok(forward_impl(h.matrix(), schedule, config, None))
}

/// `Re <a, b> = sum Re(conj(a_i) b_i)`, the real inner product on `C^{L x K}`.
pub(crate) fn real_inner(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

/// Adjoint seeds for one layer output: `(dV, dg, du)`. Complex adjoints use
/// the convention `dl = Re <adjoint, dz>`, i.e. `d/dRe + i d/dIm`.
pub(crate) struct LayerSeed {
    pub v: CMatrix,
    pub g: Vec<f64>,
    pub u: Vec<f64>,
}

/// Reverse pass through a recorded forward run. Returns `d loss / d mu` in
/// the schedule's row-major layout.
pub(crate) fn backward(
    h: &CMatrix,
    tape: &[LayerTape],
    schedule: &StepSizeSchedule,
    config: &SystemConfig,
    seeds: Vec<LayerSeed>,
) -> Vec<f64> {
    let (l, k) = h.shape();
    let weights = &config.weights;
    let mut grad = vec![0.0; schedule.layers() * schedule.steps()];
    let mut v_bar = CMatrix::zeros(l, k);
    for (m, (layer, seed)) in tape.iter().zip(seeds).enumerate().rev() {
        v_bar += seed.v;
        let (mut g_bar, mut u_bar) = (seed.g, seed.u);
        let (g, u) = (&layer.aux.g, &layer.aux.u);
        let c: Vec<f64> = (0..k).map(|j| (weights[j] * (1.0 + g[j])).sqrt()).collect();

        for (n, st) in layer.steps.iter().enumerate().rev() {
            // projection
            let w_bar = if st.projected {
                let norm2 = st.stepped.norm_squared();
                let scale = (config.p_max / norm2).sqrt();
                let radial = real_inner(&v_bar, &st.stepped) / norm2;
                (&v_bar - &st.stepped * Complex64::new(radial, 0.0)) * Complex64::new(scale, 0.0)
            } else {
                v_bar.clone()
            };
            let mu = schedule.get(m, n);
            grad[m * schedule.steps() + n] = real_inner(&w_bar, &st.grad);

            // stepped = v_prev + mu * G(v_prev)
            let g_mat_bar = &w_bar * Complex64::new(mu, 0.0);
            let mut prev_bar = &w_bar - &layer.a * &g_mat_bar;
            let q = h.ad_mul(&g_mat_bar);
            for j in 0..k {
                let cross: f64 = (0..k).map(|t| (q[(j, t)] * st.z[(j, t)].conj()).re).sum();
                u_bar[j] -= 2.0 * u[j] * cross;
            }
            for j in 0..k {
                let d_bar = q[(j, j)];
                let phase = st.phases[j];
                let r_bar = (d_bar.conj() * phase).re;
                u_bar[j] += r_bar * c[j];
                g_bar[j] += r_bar * u[j] * weights[j] / (2.0 * c[j]);
                let zjj = st.z[(j, j)];
                let mag = zjj.norm();
                if mag > 0.0 {
                    let phase_bar = d_bar * layer.coeff[j];
                    let z_bar = phase_bar / mag - zjj * ((phase_bar.conj() * zjj).re / (mag * mag * mag));
                    for row in 0..l {
                        prev_bar[(row, j)] += h[(row, j)] * z_bar;
                    }
                }
            }
            v_bar = prev_bar;
        }

        // closed-form auxiliaries computed from the layer input
        let z = &layer.z_in;
        let mut z_bar = CMatrix::zeros(k, k);
        for j in 0..k {
            let (signal, total) = (layer.stats.signal[j], layer.stats.total[j]);
            let interference = layer.stats.interference(j);
            let zjj = z[(j, j)];
            let s = zjj.norm();
            let c_bar = u_bar[j] * s / total;
            let s_bar = u_bar[j] * c[j] / total;
            let mut t_bar = -u_bar[j] * c[j] * s / (total * total);
            let g_total = g_bar[j] + c_bar * weights[j] / (2.0 * c[j]);
            let signal_bar = g_total * total / (interference * interference);
            t_bar -= g_total * signal / (interference * interference);
            if s > 0.0 {
                z_bar[(j, j)] += zjj * (s_bar / s);
            }
            z_bar[(j, j)] += zjj * (2.0 * signal_bar);
            for t in 0..k {
                z_bar[(j, t)] += z[(j, t)] * (2.0 * t_bar);
            }
        }
        v_bar += h * z_bar;
    }
    grad
}
