//! Reduced setting: the state is eliminated through the LLG solver and only
//! `(α̂₁, α̂₂)` is unknown.
//!
//! The linearized LLG equation is marched semi-implicitly (implicit Euler;
//! diffusion and the pointwise 3×3 coupling implicit, the gradient coupling
//! lagged). The reduced adjoint is the exact transpose of that march, so the
//! parameter gradient pairs with the linearized observation to round-off.

use serde::{Deserialize, Serialize};

use crate::aao::{observe_state, run_llg_solver, LlgSolverOptions, ResidualNorm, Truth};
use crate::error::{Error, Result};
use crate::field::{ddt, grad_slice, grad_slice_transpose, norm_w, Field3};
use crate::model::{eval_f0, observation_transpose, AlphaPair, LlgProblem, ObservationSetup, VoltageSeries};
use crate::regularization::StepPolicy;
use crate::vec3::{self, Mat3, Vec3};

/// Block-tridiagonal system with 3×3 diagonal blocks and scalar
/// off-diagonals (multiples of the identity), factorized once.
struct BlockTridiag {
    lower: Vec<f64>,
    upper_scaled: Vec<Mat3>,
    pivot_inv: Vec<Mat3>,
}

impl BlockTridiag {
    fn new(diag: &[Mat3], lower: &[f64], upper: &[f64]) -> Result<Self> {
        let nx = diag.len();
        let mut pivot_inv = Vec::with_capacity(nx);
        let mut upper_scaled = Vec::with_capacity(nx);
        let mut prev: Mat3 = [[0.0; 3]; 3];
        for i in 0..nx {
            let pivot = if i == 0 {
                diag[0]
            } else {
                vec3::mat_add(&diag[i], &vec3::mat_scale(-lower[i], &prev))
            };
            let inv = vec3::inverse(&pivot)
                .ok_or_else(|| Error::InvalidParameter("singular linearized LLG step".into()))?;
            prev = vec3::mat_scale(upper[i], &inv);
            pivot_inv.push(inv);
            upper_scaled.push(prev);
        }
        Ok(BlockTridiag {
            lower: lower.to_vec(),
            upper_scaled,
            pivot_inv,
        })
    }

    fn solve(&self, rhs: &mut [Vec3]) {
        let nx = rhs.len();
        let mut prev = [0.0; 3];
        for i in 0..nx {
            let b = vec3::sub(rhs[i], vec3::scale(self.lower[i], prev));
            rhs[i] = vec3::mat_vec(&self.pivot_inv[i], b);
            prev = rhs[i];
        }
        for i in (0..nx - 1).rev() {
            rhs[i] = vec3::sub(rhs[i], vec3::mat_vec(&self.upper_scaled[i], rhs[i + 1]));
        }
    }
}

/// Coefficients of one implicit step `B_n u_n = (M_n/dt + E_n) u_{n−1} + R_n`.
struct StepOperator {
    forward: BlockTridiag,
    transposed: BlockTridiag,
    mass: Vec<Mat3>,
    m: Vec<Vec3>,
    gm: Vec<Vec3>,
}

/// The semi-implicit linearized LLG march around a fixed state.
pub struct LinearizedMarch {
    steps: Vec<StepOperator>,
    m: Field3,
    mt: Field3,
    lambda: f64,
    dx: f64,
}

impl LinearizedMarch {
    pub fn new(m_hat: &Field3, problem: &LlgProblem, alpha: AlphaPair) -> Result<Self> {
        m_hat.ensure_same_grid(&problem.h)?;
        let g = *m_hat.grid();
        let (nx, dt, dx) = (g.nx, g.dt(), g.dx());
        let lambda = problem.coeff.lambda;
        let m = problem.total_state(m_hat);
        let mt = ddt(m_hat);

        let q = lambda / (dx * dx);
        let mut lower = vec![-q; nx];
        let mut upper = vec![-q; nx];
        lower[0] = 0.0;
        upper[0] = -2.0 * q;
        lower[nx - 1] = -2.0 * q;
        upper[nx - 1] = 0.0;
        // transpose swaps the off-diagonal couplings
        let mut lower_t = vec![0.0; nx];
        let mut upper_t = vec![0.0; nx];
        for i in 0..nx {
            if i > 0 {
                lower_t[i] = upper[i - 1];
            }
            if i + 1 < nx {
                upper_t[i] = lower[i + 1];
            }
        }

        let mut steps = Vec::with_capacity(g.nt - 1);
        for n in 1..g.nt {
            let ms = m.slice(n).to_vec();
            let gm = grad_slice(&ms, dx);
            let mut mass = Vec::with_capacity(nx);
            let mut diag = Vec::with_capacity(nx);
            for i in 0..nx {
                let (mi, mti, hi) = (ms[i], mt.at(n, i), problem.h.at(n, i));
                let mm = vec3::mat_scale(
                    1.0 / dt,
                    &vec3::mat_add(&vec3::identity(alpha.alpha1), &vec3::mat_scale(-alpha.alpha2, &vec3::skew(mi))),
                );
                let coupling = vec3::mat_add(
                    &vec3::mat_add(
                        &vec3::mat_scale(alpha.alpha2, &vec3::skew(mti)),
                        &vec3::identity(-lambda * vec3::dot(gm[i], gm[i]) + vec3::dot(mi, hi)),
                    ),
                    &vec3::outer(mi, hi),
                );
                let d = vec3::mat_add(&vec3::mat_add(&mm, &coupling), &vec3::identity(2.0 * q));
                mass.push(mm);
                diag.push(d);
            }
            let diag_t: Vec<Mat3> = diag.iter().map(vec3::transpose).collect();
            steps.push(StepOperator {
                forward: BlockTridiag::new(&diag, &lower, &upper)?,
                transposed: BlockTridiag::new(&diag_t, &lower_t, &upper_t)?,
                mass,
                m: ms,
                gm,
            });
        }
        Ok(LinearizedMarch {
            steps,
            m,
            mt,
            lambda,
            dx,
        })
    }

    /// `(M_n/dt + E_n) u` for the step ending at `n`.
    fn propagate(&self, n: usize, u: &[Vec3]) -> Vec<Vec3> {
        let s = &self.steps[n - 1];
        let gu = grad_slice(u, self.dx);
        (0..u.len())
            .map(|i| {
                let lagged = vec3::scale(2.0 * self.lambda * vec3::dot(s.gm[i], gu[i]), s.m[i]);
                vec3::add(vec3::mat_vec(&s.mass[i], u[i]), lagged)
            })
            .collect()
    }

    /// Transpose of [`propagate`](Self::propagate).
    fn propagate_transpose(&self, n: usize, z: &[Vec3]) -> Vec<Vec3> {
        let s = &self.steps[n - 1];
        let weighted: Vec<Vec3> = (0..z.len())
            .map(|i| vec3::scale(2.0 * self.lambda * vec3::dot(s.m[i], z[i]), s.gm[i]))
            .collect();
        let lagged = grad_slice_transpose(&weighted, self.dx);
        (0..z.len())
            .map(|i| vec3::add(vec3::mat_vec(&vec3::transpose(&s.mass[i]), z[i]), lagged[i]))
            .collect()
    }

    fn source(&self, n: usize, beta: (f64, f64)) -> Vec<Vec3> {
        self.m
            .slice(n)
            .iter()
            .zip(self.mt.slice(n))
            .map(|(&m, &mt)| vec3::add(vec3::scale(-beta.0, mt), vec3::scale(beta.1, vec3::cross(m, mt))))
            .collect()
    }

    /// Solves the linearized equation with right side `−β₁ m_t + β₂ m × m_t`.
    pub fn apply(&self, beta: (f64, f64)) -> Field3 {
        let g = *self.m.grid();
        let mut u = Field3::zeros(g);
        for n in 1..g.nt {
            let mut rhs = self.propagate(n, u.slice(n - 1));
            for (r, s) in rhs.iter_mut().zip(self.source(n, beta)) {
                *r = vec3::add(*r, s);
            }
            self.steps[n - 1].forward.solve(&mut rhs);
            u.slice_mut(n).copy_from_slice(&rhs);
        }
        u
    }

    /// Adjoint state for the functional `u ↦ Σ_n c_n · u_n` (plain sums).
    fn adjoint_multipliers(&self, c: &Field3) -> Field3 {
        let g = *self.m.grid();
        let mut lam = Field3::zeros(g);
        let last = g.nt - 1;
        for n in (1..=last).rev() {
            let mut rhs = c.slice(n).to_vec();
            if n < last {
                let back = self.propagate_transpose(n + 1, lam.slice(n + 1));
                for (r, b) in rhs.iter_mut().zip(back) {
                    *r = vec3::add(*r, b);
                }
            }
            self.steps[n - 1].transposed.solve(&mut rhs);
            lam.slice_mut(n).copy_from_slice(&rhs);
        }
        lam
    }
}

/// `u = S'(α̂) β`: the linearized LLG equation with `u(0) = 0`.
pub fn linearized_llg_apply(
    beta: (f64, f64),
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
) -> Result<Field3> {
    Ok(LinearizedMarch::new(m_hat, problem, alpha)?.apply(beta))
}

/// Adjoint state `p` of the reduced problem for the voltage residual `r`.
pub fn solve_reduced_adjoint(
    r: &VoltageSeries,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
    obs: &ObservationSetup,
) -> Result<Field3> {
    if alpha.alpha1 == 0.0 {
        return Err(Error::SingularFinalCondition);
    }
    let march = LinearizedMarch::new(m_hat, problem, alpha)?;
    adjoint_with(&march, r, obs)
}

fn adjoint_with(march: &LinearizedMarch, r: &VoltageSeries, obs: &ObservationSetup) -> Result<Field3> {
    let g = *march.m.grid();
    let q = observation_transpose(r, obs)?;
    let dq = ddt(&q);
    let wt = g.time_weights();
    let wx = g.space_weights();
    let last = g.nt - 1;
    // coefficients of u ↦ <K D u, r>: −Ω_n wx D q, plus wx q(T) at the end
    let mut c = Field3::zeros(g);
    for n in 1..g.nt {
        for i in 0..g.nx {
            let mut v = vec3::scale(-wt[n] * wx[i], dq.at(n, i));
            if n == last {
                v = vec3::add(v, vec3::scale(wx[i], q.at(n, i)));
            }
            c.set(n, i, v);
        }
    }
    let lam = march.adjoint_multipliers(&c);
    let dt = g.dt();
    let mut p = Field3::zeros(g);
    for n in 1..g.nt {
        for i in 0..g.nx {
            p.set(n, i, vec3::scale(1.0 / (dt * wx[i]), lam.at(n, i)));
        }
    }
    Ok(p)
}

/// `(∫∫ −m_t·p, ∫∫ (m × m_t)·p)`, right-endpoint rule in time and
/// trapezoid in space, matching the implicit march.
pub fn gradient_alpha_reduced(p: &Field3, m_hat: &Field3, problem: &LlgProblem) -> Result<(f64, f64)> {
    p.ensure_same_grid(m_hat)?;
    let g = *p.grid();
    let m = problem.total_state(m_hat);
    let mt = ddt(m_hat);
    let weights: Vec<f64> = g.space_weights().iter().map(|w| w * g.dt()).collect();
    let (mut g1, mut g2) = (0.0, 0.0);
    for n in 1..g.nt {
        for i in 0..g.nx {
            let w = weights[i];
            let (pi, mti) = (p.at(n, i), mt.at(n, i));
            g1 -= w * vec3::dot(mti, pi);
            g2 += w * vec3::dot(vec3::cross(m.at(n, i), mti), pi);
        }
    }
    Ok((g1, g2))
}

/// `F'(α̂)* r` in one call: adjoint march and gradient share the linearization.
pub fn reduced_gradient(
    r: &VoltageSeries,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
    obs: &ObservationSetup,
) -> Result<(f64, f64)> {
    let p = solve_reduced_adjoint(r, m_hat, problem, alpha, obs)?;
    gradient_alpha_reduced(&p, m_hat, problem)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerSolverOptions {
    pub step: StepPolicy,
    pub max_iterations: usize,
    /// Target `‖𝔽₀‖_W` relative to its value at `m̂ = 0`.
    pub rel_tol: f64,
}

impl Default for InnerSolverOptions {
    fn default() -> Self {
        InnerSolverOptions {
            step: StepPolicy::adaptive(75.0),
            max_iterations: 5000,
            rel_tol: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StateSolution {
    pub m_hat: Field3,
    pub inner_loops: usize,
    pub res_llg: f64,
}

/// `S(α̂)` by the LLG solver, warm-started from a previous state.
pub fn parameter_to_state(
    alpha: AlphaPair,
    problem: &LlgProblem,
    warm_start: &Field3,
    opts: &InnerSolverOptions,
) -> Result<StateSolution> {
    let zero = Field3::zeros(*problem.grid());
    let reference = norm_w(&eval_f0(&zero, problem, alpha)?)?;
    let tolerance = opts.rel_tol * reference;
    let out = run_llg_solver(
        problem,
        alpha,
        warm_start,
        &LlgSolverOptions {
            step: opts.step,
            max_iterations: opts.max_iterations,
            norm: ResidualNorm::W,
            tolerance: Some(tolerance),
        },
        Truth::default(),
    )?;
    Ok(StateSolution {
        m_hat: out.m_hat,
        inner_loops: out.iterations,
        res_llg: out.res_llg,
    })
}

/// Model voltages for a state.
pub fn reduced_forward(m_hat: &Field3, obs: &ObservationSetup) -> Result<VoltageSeries> {
    observe_state(m_hat, obs)
}
