//! The LLG residual, its linearization, the coil observation operator and
//! the physical scaling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{ddt, grad_slice_closed, laplacian_slice_closed, BoundaryClosure, Field3, Grid};
use crate::vec3::{self, Vec3};

/// Damping/precession parameters of the scaled LLG equation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPair {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl AlphaPair {
    pub fn new(alpha1: f64, alpha2: f64) -> Self {
        AlphaPair { alpha1, alpha2 }
    }

    /// `(α̂₁, α̂₂)` from gyromagnetic ratio and Gilbert damping.
    pub fn from_physical(gamma: f64, alpha_d: f64) -> Result<Self> {
        if !(gamma > 0.0) {
            return Err(Error::InvalidParameter(format!("gamma must be positive, got {gamma}")));
        }
        let denom = 1.0 + alpha_d * alpha_d;
        let t1 = gamma * alpha_d / denom;
        let t2 = gamma / denom;
        let s = t1 * t1 + t2 * t2;
        Ok(AlphaPair::new(t1 / s, t2 / s))
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.alpha1, self.alpha2]
    }

    pub fn is_finite(&self) -> bool {
        self.alpha1.is_finite() && self.alpha2.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelCoefficients {
    /// Exchange coefficient multiplying the Laplacian and `|∇m|²` terms.
    pub lambda: f64,
}

impl Default for ModelCoefficients {
    fn default() -> Self {
        ModelCoefficients { lambda: 1.0 }
    }
}

/// Fixed data of an LLG problem: initial state, applied field, coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LlgProblem {
    pub m0: Vec<Vec3>,
    pub h: Field3,
    pub coeff: ModelCoefficients,
    pub closure: BoundaryClosure,
}

impl LlgProblem {
    pub fn new(m0: Vec<Vec3>, h: Field3, coeff: ModelCoefficients) -> Result<Self> {
        if m0.len() != h.grid().nx {
            return Err(Error::ShapeMismatch(format!(
                "initial state has {} nodes, grid has {}",
                m0.len(),
                h.grid().nx
            )));
        }
        if coeff.lambda < 0.0 || !coeff.lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be nonnegative, got {}",
                coeff.lambda
            )));
        }
        h.check_finite("applied field")?;
        Ok(LlgProblem {
            m0,
            h,
            coeff,
            closure: BoundaryClosure::default(),
        })
    }

    pub fn with_closure(mut self, closure: BoundaryClosure) -> Result<Self> {
        if closure == BoundaryClosure::OneSided && self.grid().nx < 4 {
            return Err(Error::InvalidGrid("one-sided stencils need nx >= 4".into()));
        }
        self.closure = closure;
        Ok(self)
    }

    pub(crate) fn laplacian(&self, f: &Field3) -> Field3 {
        let g = *f.grid();
        let mut out = Field3::zeros(g);
        for n in 0..g.nt {
            let l = laplacian_slice_closed(f.slice(n), g.dx(), self.closure);
            out.slice_mut(n).copy_from_slice(&l);
        }
        out
    }

    pub(crate) fn gradient(&self, slice: &[Vec3]) -> Vec<Vec3> {
        grad_slice_closed(slice, self.grid().dx(), self.closure)
    }

    pub fn grid(&self) -> &Grid {
        self.h.grid()
    }

    /// `m = m₀ + m̂`
    pub fn total_state(&self, m_hat: &Field3) -> Field3 {
        let g = *m_hat.grid();
        let mut m = m_hat.clone();
        for n in 0..g.nt {
            for (v, &a) in m.slice_mut(n).iter_mut().zip(&self.m0) {
                *v = vec3::add(*v, a);
            }
        }
        m
    }

    fn check(&self, f: &Field3) -> Result<()> {
        f.ensure_same_grid(&self.h)
    }
}

/// LLG residual
/// `α̂₁ m_t − λΔm − α̂₂ m × m_t − λ|∇m|² m − h + (m·h) m` with `m = m₀ + m̂`.
pub fn eval_f0(m_hat: &Field3, problem: &LlgProblem, alpha: AlphaPair) -> Result<Field3> {
    problem.check(m_hat)?;
    let g = *m_hat.grid();
    let lambda = problem.coeff.lambda;
    let m = problem.total_state(m_hat);
    let mt = ddt(m_hat);
    let lap = problem.laplacian(&m);
    let mut out = Field3::zeros(g);
    for n in 0..g.nt {
        let gm = problem.gradient(m.slice(n));
        for i in 0..g.nx {
            let (mi, mti, hi) = (m.at(n, i), mt.at(n, i), problem.h.at(n, i));
            let mut w = vec3::scale(alpha.alpha1, mti);
            w = vec3::sub(w, vec3::scale(lambda, lap.at(n, i)));
            w = vec3::sub(w, vec3::scale(alpha.alpha2, vec3::cross(mi, mti)));
            w = vec3::sub(w, vec3::scale(lambda * vec3::dot(gm[i], gm[i]), mi));
            w = vec3::sub(w, hi);
            w = vec3::add(w, vec3::scale(vec3::dot(mi, hi), mi));
            out.set(n, i, w);
        }
    }
    Ok(out)
}

/// Derivative of [`eval_f0`] in `m̂` applied to `u`.
pub fn apply_f0_state_derivative(
    u: &Field3,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
) -> Result<Field3> {
    problem.check(m_hat)?;
    problem.check(u)?;
    let g = *m_hat.grid();
    let lambda = problem.coeff.lambda;
    let m = problem.total_state(m_hat);
    let mt = ddt(m_hat);
    let ut = ddt(u);
    let lap = problem.laplacian(u);
    let mut out = Field3::zeros(g);
    for n in 0..g.nt {
        let gm = problem.gradient(m.slice(n));
        let gu = problem.gradient(u.slice(n));
        for i in 0..g.nx {
            let (mi, mti, hi) = (m.at(n, i), mt.at(n, i), problem.h.at(n, i));
            let (ui, uti) = (u.at(n, i), ut.at(n, i));
            let mut w = vec3::scale(alpha.alpha1, uti);
            w = vec3::sub(w, vec3::scale(lambda, lap.at(n, i)));
            let prec = vec3::add(vec3::cross(ui, mti), vec3::cross(mi, uti));
            w = vec3::sub(w, vec3::scale(alpha.alpha2, prec));
            w = vec3::sub(w, vec3::scale(2.0 * lambda * vec3::dot(gm[i], gu[i]), mi));
            w = vec3::sub(w, vec3::scale(lambda * vec3::dot(gm[i], gm[i]), ui));
            w = vec3::add(w, vec3::scale(vec3::dot(ui, hi), mi));
            w = vec3::add(w, vec3::scale(vec3::dot(mi, hi), ui));
            out.set(n, i, w);
        }
    }
    Ok(out)
}

/// Partial derivatives of [`eval_f0`] in `α̂₁` and `α̂₂`: `(m̂_t, −m × m̂_t)`.
pub fn f0_alpha_derivatives(m_hat: &Field3, problem: &LlgProblem) -> Result<(Field3, Field3)> {
    problem.check(m_hat)?;
    let m = problem.total_state(m_hat);
    let mt = ddt(m_hat);
    let d2 = m.zip_map(&mt, |a, b| vec3::scale(-1.0, vec3::cross(a, b)));
    Ok((mt, d2))
}

// ---------------------------------------------------------------------------
// Observation

/// Coil model: kernels `K_kl(t, τ, x) = −μ₀ ã_l(t − τ) c_k(x) p_l(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSetup {
    pub mu0: f64,
    /// Transfer functions sampled on the time grid, one per coil `l`.
    pub transfer: Vec<Vec<f64>>,
    /// Particle concentrations sampled on the space grid, one per `k`.
    pub concentrations: Vec<Vec<f64>>,
    /// Coil sensitivities on the space grid, one per coil `l`.
    pub sensitivities: Vec<Vec<Vec3>>,
}

impl ObservationSetup {
    /// `μ₀ = 1`, `ã ≡ 1`, `c ≡ 1`, `p ≡ (1, 1, 1)`: a single channel.
    pub fn uniform(grid: &Grid) -> Self {
        ObservationSetup {
            mu0: 1.0,
            transfer: vec![vec![1.0; grid.nt]],
            concentrations: vec![vec![1.0; grid.nx]],
            sensitivities: vec![vec![[1.0; 3]; grid.nx]],
        }
    }

    pub fn n_concentrations(&self) -> usize {
        self.concentrations.len()
    }

    pub fn n_coils(&self) -> usize {
        self.transfer.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_concentrations() * self.n_coils()
    }

    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if self.n_concentrations() == 0 || self.n_coils() == 0 {
            return Err(Error::InvalidParameter("observation needs K >= 1 and L >= 1".into()));
        }
        if self.sensitivities.len() != self.n_coils() {
            return Err(Error::ShapeMismatch(format!(
                "{} transfer functions but {} sensitivities",
                self.n_coils(),
                self.sensitivities.len()
            )));
        }
        let bad_t = self.transfer.iter().any(|a| a.len() != grid.nt);
        let bad_c = self.concentrations.iter().any(|c| c.len() != grid.nx);
        let bad_p = self.sensitivities.iter().any(|p| p.len() != grid.nx);
        if bad_t || bad_c || bad_p {
            return Err(Error::ShapeMismatch("observation samples do not match the grid".into()));
        }
        if !self.mu0.is_finite() {
            return Err(Error::NonFinite("mu0"));
        }
        Ok(())
    }

    /// `ã_l` at time-index offset `k` on the periodic extension.
    fn transfer_at(&self, l: usize, k: isize) -> f64 {
        let period = (self.transfer[l].len() - 1) as isize;
        self.transfer[l][k.rem_euclid(period) as usize]
    }

    /// Central-difference derivative of `ã_l` on the periodic extension.
    fn transfer_rate_at(&self, l: usize, k: isize, dt: f64) -> f64 {
        (self.transfer_at(l, k + 1) - self.transfer_at(l, k - 1)) / (2.0 * dt)
    }

    /// Spatial profile `−μ₀ c_k p_l` of channel `(k, l)`.
    fn profile(&self, k: usize, l: usize) -> Vec<Vec3> {
        self.concentrations[k]
            .iter()
            .zip(&self.sensitivities[l])
            .map(|(&c, &p)| vec3::scale(-self.mu0 * c, p))
            .collect()
    }
}

/// Voltage traces `y_kl(t)`, channel index `k·L + l`, with noise levels.
#[derive(Debug, Clone, PartialEq)]
pub struct VoltageSeries {
    pub grid: Grid,
    pub channels: Vec<Vec<f64>>,
    pub delta: Vec<f64>,
}

impl VoltageSeries {
    pub fn zeros(grid: Grid, n_channels: usize) -> Self {
        VoltageSeries {
            grid,
            channels: vec![vec![0.0; grid.nt]; n_channels],
            delta: vec![0.0; n_channels],
        }
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn check_channels(&self, expected: usize) -> Result<()> {
        if self.channels.len() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                got: self.channels.len(),
            });
        }
        if self.channels.iter().any(|c| c.len() != self.grid.nt) {
            return Err(Error::ShapeMismatch("voltage trace length differs from nt".into()));
        }
        Ok(())
    }

    /// `self − other`, keeping the noise levels of `self`.
    pub fn minus(&self, other: &VoltageSeries) -> VoltageSeries {
        let channels = self
            .channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
            .collect();
        VoltageSeries {
            grid: self.grid,
            channels,
            delta: self.delta.clone(),
        }
    }

    /// Trapezoid L²(0,T) inner product summed over channels.
    pub fn dot(&self, other: &VoltageSeries) -> f64 {
        let w = self.grid.time_weights();
        self.channels
            .iter()
            .zip(&other.channels)
            .map(|(a, b)| a.iter().zip(b).zip(&w).map(|((x, y), w)| w * x * y).sum::<f64>())
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn channel_norm(&self, c: usize) -> f64 {
        let w = self.grid.time_weights();
        self.channels[c]
            .iter()
            .zip(&w)
            .map(|(x, w)| w * x * x)
            .sum::<f64>()
            .sqrt()
    }
}

/// `y_kl(t) = ∫∫ K_kl(t, τ, x) · m_t(τ, x) dx dτ` with trapezoid quadrature.
pub fn eval_observation(m_t: &Field3, obs: &ObservationSetup) -> Result<VoltageSeries> {
    let g = *m_t.grid();
    obs.validate(&g)?;
    let wt = g.time_weights();
    let wx = g.space_weights();
    let n_coils = obs.n_coils();
    let mut out = VoltageSeries::zeros(g, obs.n_channels());
    for k in 0..obs.n_concentrations() {
        for l in 0..n_coils {
            let prof = obs.profile(k, l);
            // spatial projection at each τ_j, weighted in time
            let proj: Vec<f64> = (0..g.nt)
                .map(|j| {
                    let s: f64 = m_t
                        .slice(j)
                        .iter()
                        .zip(&prof)
                        .zip(&wx)
                        .map(|((&v, &p), &w)| w * vec3::dot(p, v))
                        .sum();
                    wt[j] * s
                })
                .collect();
            let y = &mut out.channels[k * n_coils + l];
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = proj
                    .iter()
                    .enumerate()
                    .map(|(j, &q)| obs.transfer_at(l, i as isize - j as isize) * q)
                    .sum();
            }
        }
    }
    Ok(out)
}

fn kernel_time_transpose(
    r: &VoltageSeries,
    obs: &ObservationSetup,
    kernel: impl Fn(usize, isize) -> f64,
) -> Result<Field3> {
    let g = r.grid;
    obs.validate(&g)?;
    r.check_channels(obs.n_channels())?;
    let wt = g.time_weights();
    let n_coils = obs.n_coils();
    let mut out = Field3::zeros(g);
    for k in 0..obs.n_concentrations() {
        for l in 0..n_coils {
            let prof = obs.profile(k, l);
            let rc = &r.channels[k * n_coils + l];
            for j in 0..g.nt {
                let a: f64 = (0..g.nt)
                    .map(|i| wt[i] * kernel(l, i as isize - j as isize) * rc[i])
                    .sum();
                if a == 0.0 {
                    continue;
                }
                for (v, p) in out.slice_mut(j).iter_mut().zip(&prof) {
                    *v = vec3::add(*v, vec3::scale(a, *p));
                }
            }
        }
    }
    Ok(out)
}

/// `(K* r)(τ, x) = ∫ Σ_kl K_kl(t, τ, x) r_kl(t) dt`, the L² transpose of the
/// observation map with respect to `m_t`.
pub fn observation_transpose(r: &VoltageSeries, obs: &ObservationSetup) -> Result<Field3> {
    kernel_time_transpose(r, obs, |l, k| obs.transfer_at(l, k))
}

/// `K̃ r (x, t) = Σ −μ₀ c_k p_l ∫ ∂_τ ã_l(τ − t) r_kl(τ) dτ`.
pub fn apply_ktilde(r: &VoltageSeries, obs: &ObservationSetup) -> Result<Field3> {
    let dt = r.grid.dt();
    kernel_time_transpose(r, obs, |l, k| obs.transfer_rate_at(l, k, dt))
}

/// `K̃_T r (x) = Σ −μ₀ c_k p_l ∫ ã_l(τ) r_kl(τ) dτ`.
pub fn apply_ktilde_final(r: &VoltageSeries, obs: &ObservationSetup) -> Result<Vec<Vec3>> {
    let full = observation_transpose(r, obs)?;
    Ok(full.last_slice().to_vec())
}

// ---------------------------------------------------------------------------
// Physical scaling

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParameters {
    pub mu0: f64,
    pub m_s: f64,
    pub gamma: f64,
    pub alpha_d: f64,
    pub exchange: f64,
}

impl PhysicalParameters {
    pub fn standard() -> Self {
        PhysicalParameters {
            mu0: 4.0 * std::f64::consts::PI * 1e-7,
            m_s: 474_000.0,
            gamma: 1.75e11,
            alpha_d: 0.1,
            exchange: 0.0,
        }
    }
}

/// Scaled parameters, exchange coefficient `λ = 2 A m_S` and field
/// `h = μ₀ m_S H_ext`.
pub fn scale_physical(
    params: &PhysicalParameters,
    h_ext: &Field3,
) -> Result<(AlphaPair, ModelCoefficients, Field3)> {
    if !(params.m_s > 0.0) {
        return Err(Error::InvalidParameter(format!("m_S must be positive, got {}", params.m_s)));
    }
    if params.exchange < 0.0 {
        return Err(Error::InvalidParameter("exchange stiffness must be nonnegative".into()));
    }
    let alpha = AlphaPair::from_physical(params.gamma, params.alpha_d)?;
    let coeff = ModelCoefficients {
        lambda: 2.0 * params.exchange * params.m_s,
    };
    let h = (params.mu0 * params.m_s) * h_ext;
    Ok((alpha, coeff, h))
}
