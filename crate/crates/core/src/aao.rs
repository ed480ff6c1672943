//! All-at-once Landweber iteration: state and parameters are updated
//! jointly against the LLG residual and the coil data. With the parameters
//! frozen and no data the same loop is a solver for the LLG equation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{self, ddt, grad_slice_closed_adjoint, laplacian_slice_closed_adjoint, Field3};
use crate::model::{
    eval_f0, eval_observation, observation_transpose, AlphaPair, LlgProblem, ObservationSetup,
    VoltageSeries,
};
use crate::pde::{riesz_u, solve_helmholtz_slice};
use crate::regularization::{
    discrepancy_flag, DivergenceGuard, IterationLog, IterationRecord, StepPolicy, StoppingRule,
};
use crate::vec3::{self, Vec3};

/// L² representer of the `W` inner product: `inner_w(a, w) = <a, riesz_y(w)>`.
pub fn riesz_y(w: &Field3) -> Result<Field3> {
    Ok(field::i1_adjoint(&field::i1(&solve_helmholtz_slice(w)?)))
}

/// Source and final value of the backward heat problem whose Riesz map
/// gives the adjoint of the LLG residual's state derivative applied to `y`.
pub fn assemble_adjoint_rhs(
    y: &Field3,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
) -> Result<(Field3, Vec<Vec3>)> {
    y.ensure_same_grid(m_hat)?;
    y.ensure_same_grid(&problem.h)?;
    let g = *y.grid();
    let lambda = problem.coeff.lambda;
    let m = problem.total_state(m_hat);
    let mt = ddt(m_hat);
    let q = m.zip_map(y, |mi, yi| {
        vec3::add(vec3::scale(alpha.alpha1, yi), vec3::scale(alpha.alpha2, vec3::cross(mi, yi)))
    });
    let dq = ddt(&q);
    let mut f = Field3::zeros(g);
    for n in 0..g.nt {
        let gm = problem.gradient(m.slice(n));
        let lap_y = laplacian_slice_closed_adjoint(y.slice(n), g.dx(), problem.closure);
        let weighted: Vec<Vec3> = (0..g.nx)
            .map(|i| vec3::scale(vec3::dot(m.at(n, i), y.at(n, i)), gm[i]))
            .collect();
        let grad_term = grad_slice_closed_adjoint(&weighted, g.dx(), problem.closure);
        for i in 0..g.nx {
            let (mi, yi, hi) = (m.at(n, i), y.at(n, i), problem.h.at(n, i));
            let mut v = vec3::scale(-1.0, dq.at(n, i));
            v = vec3::sub(v, vec3::scale(alpha.alpha2, vec3::cross(mt.at(n, i), yi)));
            v = vec3::sub(v, vec3::scale(lambda, lap_y[i]));
            v = vec3::sub(v, vec3::scale(2.0 * lambda, grad_term[i]));
            v = vec3::sub(v, vec3::scale(lambda * vec3::dot(gm[i], gm[i]), yi));
            v = vec3::add(v, vec3::scale(vec3::dot(mi, yi), hi));
            v = vec3::add(v, vec3::scale(vec3::dot(mi, hi), yi));
            f.set(n, i, v);
        }
    }
    Ok((f, q.last_slice().to_vec()))
}

fn adjoint_from_representer(
    y: &Field3,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
) -> Result<Field3> {
    let (f, g) = assemble_adjoint_rhs(y, m_hat, problem, alpha)?;
    riesz_u(&f, &g)
}

/// `U`-adjoint of the residual's state derivative applied to `w ∈ W`.
pub fn adjoint_f0_state(
    w: &Field3,
    m_hat: &Field3,
    problem: &LlgProblem,
    alpha: AlphaPair,
) -> Result<Field3> {
    adjoint_from_representer(&riesz_y(w)?, m_hat, problem, alpha)
}

/// Coil voltages produced by the state `m₀ + m̂`.
pub fn observe_state(m_hat: &Field3, obs: &ObservationSetup) -> Result<VoltageSeries> {
    eval_observation(&ddt(m_hat), obs)
}

/// `U`-adjoint of [`observe_state`] applied to a voltage residual.
pub fn adjoint_obs_state(r: &VoltageSeries, obs: &ObservationSetup) -> Result<Field3> {
    let kr = observation_transpose(r, obs)?;
    let f = -1.0 * &ddt(&kr);
    riesz_u(&f, kr.last_slice())
}

/// Parameter gradient of the residual paired with the representer `y`:
/// `(∫∫ m̂_t·y, −∫∫ (m × m̂_t)·y)`.
pub fn grad_alpha(y: &Field3, m_hat: &Field3, problem: &LlgProblem) -> Result<(f64, f64)> {
    let (d1, d2) = crate::model::f0_alpha_derivatives(m_hat, problem)?;
    Ok((d1.dot_l2(y), d2.dot_l2(y)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualNorm {
    #[default]
    W,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    MaxIterations,
    StepTooSmall,
    Discrepancy,
    Tolerance,
}

struct Evaluation {
    y: Field3,
    r: Option<VoltageSeries>,
    res_llg: f64,
    res_obs: f64,
    monitored: f64,
}

fn evaluate(
    m_hat: &Field3,
    alpha: AlphaPair,
    problem: &LlgProblem,
    data: Option<(&ObservationSetup, &VoltageSeries)>,
    norm: ResidualNorm,
) -> Result<Evaluation> {
    let w = eval_f0(m_hat, problem, alpha)?;
    let y = riesz_y(&w)?;
    let res_llg = w.dot_l2(&y).max(0.0).sqrt();
    let r = match data {
        Some((obs, d)) => Some(observe_state(m_hat, obs)?.minus(d)),
        None => None,
    };
    let res_obs = r.as_ref().map_or(0.0, |r| r.norm());
    let llg_part = match norm {
        ResidualNorm::W => res_llg,
        ResidualNorm::L2 => w.norm_l2(),
    };
    let monitored = (llg_part * llg_part + res_obs * res_obs).sqrt();
    Ok(Evaluation {
        y,
        r,
        res_llg,
        res_obs,
        monitored,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlgSolverOptions {
    pub step: StepPolicy,
    pub max_iterations: usize,
    pub norm: ResidualNorm,
    /// Stop once the monitored residual drops to this value.
    pub tolerance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub m_hat: Field3,
    pub alpha: AlphaPair,
    pub log: IterationLog,
    pub iterations: usize,
    pub initial_residual: f64,
    pub residual: f64,
    pub res_llg: f64,
    pub res_obs: f64,
    pub stop: StopReason,
}

/// Optional ground truth used only for logging errors.
#[derive(Debug, Clone, Copy, Default)]
pub struct Truth<'a> {
    pub m: Option<&'a Field3>,
}

impl Truth<'_> {
    fn rel_err(&self, problem: &LlgProblem, m_hat: &Field3) -> Option<f64> {
        self.m.map(|exact| problem.total_state(m_hat).relative_error(exact))
    }
}

/// Landweber iteration on `m̂` alone with `α̂` frozen.
pub fn run_llg_solver(
    problem: &LlgProblem,
    alpha: AlphaPair,
    init: &Field3,
    opts: &LlgSolverOptions,
    truth: Truth<'_>,
) -> Result<SolveOutcome> {
    opts.step.validate()?;
    iterate(
        problem,
        init,
        alpha,
        None,
        false,
        &LoopControl {
            step: opts.step,
            max_iterations: opts.max_iterations,
            norm: opts.norm,
            tolerance: opts.tolerance,
            discrepancy: None,
        },
        truth,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AaoOptions {
    pub step: StepPolicy,
    pub stopping: StoppingRule,
}

/// Joint Landweber iteration on `(m̂, α̂)` with discrepancy stopping.
pub fn run_aao(
    problem: &LlgProblem,
    obs: &ObservationSetup,
    data: &VoltageSeries,
    init_m_hat: &Field3,
    init_alpha: AlphaPair,
    opts: &AaoOptions,
    truth: Truth<'_>,
) -> Result<SolveOutcome> {
    opts.step.validate()?;
    opts.stopping.validate()?;
    obs.validate(problem.grid())?;
    data.check_channels(obs.n_channels())?;
    let delta = data.delta.iter().map(|d| d * d).sum::<f64>().sqrt();
    iterate(
        problem,
        init_m_hat,
        init_alpha,
        Some((obs, data)),
        true,
        &LoopControl {
            step: opts.step,
            max_iterations: opts.stopping.max_iterations,
            norm: ResidualNorm::W,
            tolerance: None,
            discrepancy: Some((delta, opts.stopping.tau)),
        },
        truth,
    )
}

struct LoopControl {
    step: StepPolicy,
    max_iterations: usize,
    norm: ResidualNorm,
    tolerance: Option<f64>,
    discrepancy: Option<(f64, f64)>,
}

fn iterate(
    problem: &LlgProblem,
    init: &Field3,
    alpha0: AlphaPair,
    data: Option<(&ObservationSetup, &VoltageSeries)>,
    update_alpha: bool,
    ctl: &LoopControl,
    truth: Truth<'_>,
) -> Result<SolveOutcome> {
    init.ensure_same_grid(&problem.h)?;
    init.check_finite("initial state")?;
    let mut m_hat = init.clone();
    let mut alpha = alpha0;
    let mut mu = ctl.step.mu;
    let mu_min = ctl.step.mu_min();
    let mut eval = evaluate(&m_hat, alpha, problem, data, ctl.norm)?;
    let initial = eval.monitored;
    let mut guard = DivergenceGuard::new(initial);
    let mut log = IterationLog::new();
    let record = |iter: usize, mu: f64, e: &Evaluation, a: AlphaPair, m: &Field3| IterationRecord {
        iter,
        mu,
        res_obs: e.res_obs,
        res_llg: e.res_llg,
        alpha1: a.alpha1,
        alpha2: a.alpha2,
        rel_err_m: truth.rel_err(problem, m),
        inner_loops: None,
    };
    log.push(record(0, mu, &eval, alpha, &m_hat));

    // overflow inside a solve after the start means the iteration blew up
    let blown = |iteration: usize| {
        move |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence {
                iteration,
                residual: f64::INFINITY,
                initial,
            },
            other => other,
        }
    };
    let mut iterations = 0;
    let stop = loop {
        if let Some((delta, tau)) = ctl.discrepancy {
            if !discrepancy_flag(eval.monitored, delta, tau) {
                break StopReason::Discrepancy;
            }
        }
        if ctl.tolerance.is_some_and(|tol| eval.monitored <= tol) {
            break StopReason::Tolerance;
        }
        if iterations >= ctl.max_iterations {
            break StopReason::MaxIterations;
        }

        let mut direction =
            adjoint_from_representer(&eval.y, &m_hat, problem, alpha).map_err(blown(iterations))?;
        if let (Some((obs, _)), Some(r)) = (data, eval.r.as_ref()) {
            direction.axpy(1.0, &adjoint_obs_state(r, obs)?);
        }
        let beta = if update_alpha {
            grad_alpha(&eval.y, &m_hat, problem)?
        } else {
            (0.0, 0.0)
        };

        let accepted = loop {
            let mut trial = m_hat.clone();
            trial.axpy(-mu, &direction);
            let trial_alpha = if update_alpha {
                AlphaPair::new(alpha.alpha1 - mu * beta.0, alpha.alpha2 - mu * beta.1)
            } else {
                alpha
            };
            let trial_eval =
                evaluate(&trial, trial_alpha, problem, data, ctl.norm).map_err(blown(iterations + 1))?;
            if !ctl.step.adaptive || trial_eval.monitored < eval.monitored {
                break Some((trial, trial_alpha, trial_eval));
            }
            mu *= 0.5;
            if mu < mu_min {
                break None;
            }
        };
        let Some((next, next_alpha, next_eval)) = accepted else {
            break StopReason::StepTooSmall;
        };
        if ctl.step.adaptive {
            debug_assert!(next_eval.monitored < eval.monitored);
        }
        m_hat = next;
        alpha = next_alpha;
        eval = next_eval;
        iterations += 1;
        guard.observe(iterations, eval.monitored)?;
        log.push(record(iterations, mu, &eval, alpha, &m_hat));
    };

    Ok(SolveOutcome {
        m_hat,
        alpha,
        log,
        iterations,
        initial_residual: initial,
        residual: eval.monitored,
        res_llg: eval.res_llg,
        res_obs: eval.res_obs,
        stop,
    })
}
