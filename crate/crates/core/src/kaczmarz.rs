//! Reduced Landweber and its cyclic Kaczmarz variants over time segments or
//! data channels.

use serde::{Deserialize, Serialize};

use crate::aao::{StopReason, Truth};
use crate::error::{Error, Result};
use crate::field::{trapezoid_weights, Field3};
use crate::model::{AlphaPair, LlgProblem, ObservationSetup, VoltageSeries};
use crate::reduced::{parameter_to_state, reduced_forward, reduced_gradient, InnerSolverOptions, StateSolution};
use crate::regularization::{
    cycle_stop, discrepancy_flag, DivergenceGuard, IterationLog, IterationRecord, StoppingRule,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReducedOptions {
    pub mu: f64,
    pub stopping: StoppingRule,
    pub inner: InnerSolverOptions,
}

impl ReducedOptions {
    fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::InvalidParameter(format!("step size must be positive, got {}", self.mu)));
        }
        self.stopping.validate()?;
        self.inner.step.validate()
    }
}

#[derive(Debug, Clone)]
pub struct ReducedOutcome {
    pub alpha: AlphaPair,
    pub m_hat: Field3,
    pub log: IterationLog,
    pub iterations: usize,
    pub stop: StopReason,
    /// Residual of each sub-problem at the iterate where it was last visited.
    pub sub_residuals: Vec<f64>,
    pub sub_deltas: Vec<f64>,
}

/// One Kaczmarz sub-problem: per-channel, per-node weights relative to the
/// full trapezoid rule, and its noise level.
#[derive(Debug, Clone)]
struct SubProblem {
    weights: Option<Vec<Vec<f64>>>,
    delta: f64,
}

impl SubProblem {
    fn whole(data: &VoltageSeries) -> Self {
        SubProblem {
            weights: None,
            delta: data.delta.iter().map(|d| d * d).sum::<f64>().sqrt(),
        }
    }

    fn restrict(&self, r: &VoltageSeries) -> VoltageSeries {
        match &self.weights {
            None => r.clone(),
            Some(w) => VoltageSeries {
                grid: r.grid,
                channels: r
                    .channels
                    .iter()
                    .zip(w)
                    .map(|(c, w)| c.iter().zip(w).map(|(a, b)| a * b).collect())
                    .collect(),
                delta: r.delta.clone(),
            },
        }
    }

    fn residual(&self, r: &VoltageSeries) -> f64 {
        match &self.weights {
            None => r.norm(),
            Some(_) => self.restrict(r).dot(r).max(0.0).sqrt(),
        }
    }
}

/// Node indices splitting the time grid into `n` contiguous segments.
pub fn segment_bounds(nt: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n > nt - 1 {
        return Err(Error::InvalidParameter(format!(
            "number of time segments must be in 1..={}, got {n}",
            nt - 1
        )));
    }
    Ok((0..=n).map(|j| (j * (nt - 1) + n / 2) / n).collect())
}

fn segment_ratios(nt: usize, dt: f64, lo: usize, hi: usize) -> Vec<f64> {
    let full = trapezoid_weights(nt, dt);
    let local = trapezoid_weights(hi - lo + 1, dt);
    (0..nt)
        .map(|i| if i < lo || i > hi { 0.0 } else { local[i - lo] / full[i] })
        .collect()
}

fn time_subproblems(data: &VoltageSeries, n: usize, noise: Option<&[Vec<f64>]>) -> Result<Vec<SubProblem>> {
    if n == 1 {
        return Ok(vec![SubProblem::whole(data)]);
    }
    let g = data.grid;
    let bounds = segment_bounds(g.nt, n)?;
    if noise.is_none() && data.delta.iter().any(|&d| d != 0.0) {
        return Err(Error::InvalidParameter(
            "time-segment sweeps on noisy data need the perturbation trace".into(),
        ));
    }
    if let Some(e) = noise {
        if e.len() != data.n_channels() || e.iter().any(|c| c.len() != g.nt) {
            return Err(Error::ChannelMismatch {
                expected: data.n_channels(),
                got: e.len(),
            });
        }
    }
    let full = g.time_weights();
    let mut subs = Vec::with_capacity(n);
    for j in 0..n {
        let ratio = segment_ratios(g.nt, g.dt(), bounds[j], bounds[j + 1]);
        let delta = noise.map_or(0.0, |e| {
            e.iter()
                .map(|c| c.iter().zip(&ratio).zip(&full).map(|((v, r), w)| r * w * v * v).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        });
        subs.push(SubProblem {
            weights: Some(vec![ratio; data.n_channels()]),
            delta,
        });
    }
    Ok(subs)
}

fn channel_subproblems(data: &VoltageSeries, order: &[usize]) -> Result<Vec<SubProblem>> {
    let kl = data.n_channels();
    if kl == 1 {
        return Ok(vec![SubProblem::whole(data)]);
    }
    let mut seen = vec![false; kl];
    for &c in order {
        if c >= kl || seen[c] {
            return Err(Error::InvalidParameter(format!("channel order must be a permutation of 0..{kl}")));
        }
        seen[c] = true;
    }
    if order.len() != kl {
        return Err(Error::InvalidParameter(format!("channel order must be a permutation of 0..{kl}")));
    }
    let nt = data.grid.nt;
    Ok(order
        .iter()
        .map(|&c| SubProblem {
            weights: Some((0..kl).map(|k| vec![if k == c { 1.0 } else { 0.0 }; nt]).collect()),
            delta: data.delta[c],
        })
        .collect())
}

struct Context<'a> {
    problem: &'a LlgProblem,
    obs: &'a ObservationSetup,
    data: &'a VoltageSeries,
    opts: &'a ReducedOptions,
    truth: Truth<'a>,
}

fn sweep(ctx: &Context<'_>, subs: &[SubProblem], init_alpha: AlphaPair, warm: &Field3) -> Result<ReducedOutcome> {
    ctx.opts.validate()?;
    ctx.obs.validate(ctx.problem.grid())?;
    ctx.data.check_channels(ctx.obs.n_channels())?;
    warm.ensure_same_grid(&ctx.problem.h)?;
    if !init_alpha.is_finite() {
        return Err(Error::NonFinite("initial damping parameters"));
    }
    let n = subs.len();
    let mut alpha = init_alpha;
    let mut state: StateSolution = parameter_to_state(alpha, ctx.problem, warm, &ctx.opts.inner)?;
    let mut loops = state.inner_loops;
    let mut model = reduced_forward(&state.m_hat, ctx.obs)?;
    let mut flags = Vec::new();
    let mut sub_residuals = vec![f64::NAN; n];
    let mut log = IterationLog::new();
    let mut guard: Option<DivergenceGuard> = None;
    let mut stop = StopReason::MaxIterations;
    let mut iterations = 0;
    let make_record = |iter: usize, alpha: AlphaPair, state: &StateSolution, res_obs: f64, loops: usize| IterationRecord {
        iter,
        mu: ctx.opts.mu,
        res_obs,
        res_llg: state.res_llg,
        alpha1: alpha.alpha1,
        alpha2: alpha.alpha2,
        rel_err_m: ctx
            .truth
            .m
            .map(|exact| ctx.problem.total_state(&state.m_hat).relative_error(exact)),
        inner_loops: Some(loops),
    };

    for k in 0..ctx.opts.stopping.max_iterations {
        let j = k % n;
        let r = model.minus(ctx.data);
        let res_full = r.norm();
        let res_j = subs[j].residual(&r);
        sub_residuals[j] = res_j;
        guard.get_or_insert_with(|| DivergenceGuard::new(res_full)).observe(k, res_full)?;
        let active = discrepancy_flag(res_j, subs[j].delta, ctx.opts.stopping.tau);
        log.push(make_record(k, alpha, &state, res_full, loops));
        flags.push(active);
        iterations = k + 1;
        if cycle_stop(&flags, n) == Some(k) {
            stop = StopReason::Discrepancy;
            break;
        }
        if !active {
            loops = 0;
            continue;
        }
        let g = reduced_gradient(&subs[j].restrict(&r), &state.m_hat, ctx.problem, alpha, ctx.obs)?;
        if g == (0.0, 0.0) {
            // the state only depends on α̂
            loops = 0;
            continue;
        }
        alpha = AlphaPair::new(alpha.alpha1 - ctx.opts.mu * g.0, alpha.alpha2 - ctx.opts.mu * g.1);
        if !alpha.is_finite() || alpha.alpha1 <= 0.0 {
            return Err(Error::Divergence {
                iteration: k,
                residual: res_full,
                initial: log.records()[0].res_obs,
            });
        }
        state = parameter_to_state(alpha, ctx.problem, &state.m_hat, &ctx.opts.inner)?;
        loops = state.inner_loops;
        model = reduced_forward(&state.m_hat, ctx.obs)?;
    }
    // close the log on the returned iterate
    if let Some(last) = log.last() {
        if (last.alpha1, last.alpha2) != (alpha.alpha1, alpha.alpha2) {
            let res = model.minus(ctx.data).norm();
            log.push(make_record(iterations, alpha, &state, res, loops));
        }
    }

    Ok(ReducedOutcome {
        alpha,
        m_hat: state.m_hat,
        log,
        iterations,
        stop,
        sub_residuals,
        sub_deltas: subs.iter().map(|s| s.delta).collect(),
    })
}

/// Landweber iteration on `α̂` with the state recomputed by the LLG solver.
pub fn run_reduced(
    problem: &LlgProblem,
    obs: &ObservationSetup,
    data: &VoltageSeries,
    init_alpha: AlphaPair,
    warm: &Field3,
    opts: &ReducedOptions,
    truth: Truth<'_>,
) -> Result<ReducedOutcome> {
    let ctx = Context {
        problem,
        obs,
        data,
        opts,
        truth,
    };
    sweep(&ctx, &[SubProblem::whole(data)], init_alpha, warm)
}

/// Cyclic sweep over `segments` contiguous pieces of the observation window.
/// `noise` is the perturbation added to the data, used for the per-segment
/// noise levels; it may be omitted for exact data.
#[allow(clippy::too_many_arguments)]
pub fn run_kaczmarz_time(
    problem: &LlgProblem,
    obs: &ObservationSetup,
    data: &VoltageSeries,
    noise: Option<&[Vec<f64>]>,
    segments: usize,
    init_alpha: AlphaPair,
    warm: &Field3,
    opts: &ReducedOptions,
    truth: Truth<'_>,
) -> Result<ReducedOutcome> {
    let subs = time_subproblems(data, segments, noise)?;
    let ctx = Context {
        problem,
        obs,
        data,
        opts,
        truth,
    };
    sweep(&ctx, &subs, init_alpha, warm)
}

/// Cyclic sweep over the channels in `order` (all channels in index order
/// when `None`).
#[allow(clippy::too_many_arguments)]
pub fn run_kaczmarz_data(
    problem: &LlgProblem,
    obs: &ObservationSetup,
    data: &VoltageSeries,
    order: Option<&[usize]>,
    init_alpha: AlphaPair,
    warm: &Field3,
    opts: &ReducedOptions,
    truth: Truth<'_>,
) -> Result<ReducedOutcome> {
    let default: Vec<usize> = (0..data.n_channels()).collect();
    let subs = channel_subproblems(data, order.unwrap_or(&default))?;
    let ctx = Context {
        problem,
        obs,
        data,
        opts,
        truth,
    };
    sweep(&ctx, &subs, init_alpha, warm)
}

/// Sub-problem residuals of `r` over `segments` time pieces.
pub fn segment_residuals(r: &VoltageSeries, segments: usize) -> Result<Vec<f64>> {
    let zero = VoltageSeries::zeros(r.grid, r.n_channels());
    Ok(time_subproblems(&zero, segments, None)?
        .iter()
        .map(|s| s.residual(r))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aao::observe_state;
    use crate::field::Grid;
    use crate::model::ModelCoefficients;
    use crate::regularization::{noise_inject, NoiseDistribution, StepPolicy};

    struct Case {
        problem: LlgProblem,
        obs: ObservationSetup,
        exact: AlphaPair,
    }

    fn case(obs_of: impl Fn(&Grid) -> ObservationSetup) -> Case {
        let g = Grid::new(11, 16, 0.2, 0.0, 2.0 * std::f64::consts::PI).unwrap();
        let m0: Vec<[f64; 3]> = (0..g.nx).map(|i| [g.x(i).sin(), g.x(i).cos(), 1.0]).collect();
        let h = Field3::from_fn(g, |_, x| [0.5 * x.cos(), 0.0, 1.0]);
        Case {
            problem: LlgProblem::new(m0, h, ModelCoefficients::default()).unwrap(),
            obs: obs_of(&g),
            exact: AlphaPair::new(1.0, 0.2),
        }
    }

    fn opts(max_iterations: usize) -> ReducedOptions {
        ReducedOptions {
            mu: 1.0,
            stopping: StoppingRule { tau: 2.5, max_iterations },
            inner: InnerSolverOptions {
                step: StepPolicy::adaptive(300.0),
                max_iterations: 3000,
                rel_tol: 2e-3,
            },
        }
    }

    fn data(c: &Case) -> VoltageSeries {
        let zero = Field3::zeros(*c.problem.grid());
        let s = parameter_to_state(c.exact, &c.problem, &zero, &opts(1).inner).unwrap();
        observe_state(&s.m_hat, &c.obs).unwrap()
    }

    fn two_coils(g: &Grid) -> ObservationSetup {
        let mut obs = ObservationSetup::uniform(g);
        obs.transfer.push((0..g.nt).map(|n| (std::f64::consts::TAU * g.t(n) / 0.2).cos()).collect());
        obs.sensitivities.push(vec![[0.0, 1.0, -1.0]; g.nx]);
        obs
    }

    fn same_trajectory(a: &ReducedOutcome, b: &ReducedOutcome) {
        assert_eq!(a.log.records(), b.log.records());
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.stop, b.stop);
    }

    #[test]
    fn single_segment_is_reduced_landweber() {
        let c = case(two_coils);
        let y = data(&c);
        let warm = Field3::zeros(*c.problem.grid());
        let init = AlphaPair::new(1.3, 0.0);
        let a = run_reduced(&c.problem, &c.obs, &y, init, &warm, &opts(6), Truth::default()).unwrap();
        let b = run_kaczmarz_time(&c.problem, &c.obs, &y, None, 1, init, &warm, &opts(6), Truth::default()).unwrap();
        same_trajectory(&a, &b);
        assert_eq!(a.iterations, 6);
    }

    #[test]
    fn single_channel_is_reduced_landweber() {
        let c = case(ObservationSetup::uniform);
        let y = data(&c);
        let warm = Field3::zeros(*c.problem.grid());
        let init = AlphaPair::new(1.3, 0.0);
        let a = run_reduced(&c.problem, &c.obs, &y, init, &warm, &opts(4), Truth::default()).unwrap();
        let b = run_kaczmarz_data(&c.problem, &c.obs, &y, None, init, &warm, &opts(4), Truth::default()).unwrap();
        same_trajectory(&a, &b);
    }

    #[test]
    fn segment_residuals_are_additive() {
        let g = Grid::new(21, 4, 0.2, 0.0, 1.0).unwrap();
        let mut r = VoltageSeries::zeros(g, 2);
        r.channels[0] = (0..g.nt).map(|n| (n as f64 * 0.7).sin()).collect();
        r.channels[1] = (0..g.nt).map(|n| 1.0 + n as f64 / 7.0).collect();
        for n in [1, 2, 3, 4, 7, 20] {
            let parts = segment_residuals(&r, n).unwrap();
            assert_eq!(parts.len(), n);
            let total: f64 = parts.iter().map(|p| p * p).sum();
            assert!((total - r.norm().powi(2)).abs() < 1e-12 * total, "n={n}");
        }
        assert!(segment_residuals(&r, 21).is_err());
        assert!(segment_residuals(&r, 0).is_err());
    }

    #[test]
    fn segment_bounds_cover_grid() {
        for (nt, n) in [(51, 4), (51, 50), (11, 3), (2, 1)] {
            let b = segment_bounds(nt, n).unwrap();
            assert_eq!((b[0], b[n]), (0, nt - 1));
            assert!(b.windows(2).all(|w| w[1] > w[0]));
        }
    }

    #[test]
    fn duplicated_channel_first_step_matches_single_channel() {
        let single = case(ObservationSetup::uniform);
        let dup = case(|g| {
            let mut obs = ObservationSetup::uniform(g);
            obs.concentrations.push(obs.concentrations[0].clone());
            obs
        });
        let warm = Field3::zeros(*single.problem.grid());
        let init = AlphaPair::new(1.3, 0.0);
        let a = run_reduced(&single.problem, &single.obs, &data(&single), init, &warm, &opts(2), Truth::default()).unwrap();
        let b = run_kaczmarz_data(&dup.problem, &dup.obs, &data(&dup), None, init, &warm, &opts(2), Truth::default()).unwrap();
        let (ra, rb) = (&a.log.records()[1], &b.log.records()[1]);
        assert!((ra.alpha1 - rb.alpha1).abs() < 1e-12);
        assert!((ra.alpha2 - rb.alpha2).abs() < 1e-12);
        // the full gradient over both copies is twice the single-channel one
        let y = data(&dup);
        let s = parameter_to_state(init, &dup.problem, &warm, &opts(1).inner).unwrap();
        let r = observe_state(&s.m_hat, &dup.obs).unwrap().minus(&y);
        let g_full = reduced_gradient(&r, &s.m_hat, &dup.problem, init, &dup.obs).unwrap();
        let step = (init.alpha1 - rb.alpha1, init.alpha2 - rb.alpha2);
        assert!((g_full.0 - 2.0 * step.0).abs() < 1e-9 * g_full.0.abs());
        assert!((g_full.1 - 2.0 * step.1).abs() < 1e-9 * g_full.1.abs().max(1e-12));
    }

    #[test]
    fn channel_order_changes_path_not_rule() {
        let c = case(two_coils);
        let y = data(&c);
        let noisy = noise_inject(&y, 0.05, 3, NoiseDistribution::Gaussian).unwrap().data;
        let warm = Field3::zeros(*c.problem.grid());
        let init = AlphaPair::new(1.3, 0.0);
        let a = run_kaczmarz_data(&c.problem, &c.obs, &noisy, Some(&[0, 1]), init, &warm, &opts(40), Truth::default()).unwrap();
        let b = run_kaczmarz_data(&c.problem, &c.obs, &noisy, Some(&[1, 0]), init, &warm, &opts(40), Truth::default()).unwrap();
        assert_ne!(a.log.records()[1].alpha1, b.log.records()[1].alpha1);
        assert_eq!(a.sub_deltas, vec![noisy.delta[0], noisy.delta[1]]);
        assert_eq!(b.sub_deltas, vec![noisy.delta[1], noisy.delta[0]]);
        for out in [&a, &b] {
            if out.stop == StopReason::Discrepancy {
                for (r, d) in out.sub_residuals.iter().zip(&out.sub_deltas) {
                    assert!(*r < 2.5 * d);
                }
            }
        }
        assert!(run_kaczmarz_data(&c.problem, &c.obs, &noisy, Some(&[0, 0]), init, &warm, &opts(3), Truth::default()).is_err());
    }

    #[test]
    fn time_sweep_stops_on_full_cycle() {
        let c = case(ObservationSetup::uniform);
        let y = data(&c);
        let noisy = noise_inject(&y, 0.05, 11, NoiseDistribution::Gaussian).unwrap();
        let warm = Field3::zeros(*c.problem.grid());
        let init = AlphaPair::new(1.3, 0.0);
        let out = run_kaczmarz_time(
            &c.problem,
            &c.obs,
            &noisy.data,
            Some(&noisy.perturbation),
            4,
            init,
            &warm,
            &opts(400),
            Truth::default(),
        )
        .unwrap();
        assert_eq!(out.stop, StopReason::Discrepancy);
        for (r, d) in out.sub_residuals.iter().zip(&out.sub_deltas) {
            assert!(*r < 2.5 * d);
        }
        // noisy data without its trace has no per-segment noise levels
        assert!(run_kaczmarz_time(&c.problem, &c.obs, &noisy.data, None, 4, init, &warm, &opts(3), Truth::default()).is_err());
    }

    #[test]
    fn exact_start_never_moves() {
        let c = case(ObservationSetup::uniform);
        let y = data(&c);
        let warm = Field3::zeros(*c.problem.grid());
        let out = run_reduced(&c.problem, &c.obs, &y, c.exact, &warm, &opts(5), Truth::default()).unwrap();
        assert_eq!(out.alpha, c.exact);
        assert!(out.log.records().iter().all(|r| r.res_obs == 0.0));
    }

    #[test]
    fn reduced_landweber_recovers_both_parameters_with_two_coils() {
        let c = case(two_coils);
        let y = data(&c);
        let warm = Field3::zeros(*c.problem.grid());
        let mut o = opts(400);
        o.mu = 20.0;
        let out = run_reduced(&c.problem, &c.obs, &y, AlphaPair::new(1.3, 0.0), &warm, &o, Truth::default()).unwrap();
        let res = out.log.records().iter().map(|r| r.res_obs).collect::<Vec<_>>();
        assert!(res.last().unwrap() < &(0.01 * res[0]));
        let last = out.log.last().unwrap();
        assert_eq!((last.alpha1, last.alpha2), (out.alpha.alpha1, out.alpha.alpha2));
        assert!((out.alpha.alpha1 - c.exact.alpha1).abs() < 1e-2, "{:?}", out.alpha);
        assert!((out.alpha.alpha2 - c.exact.alpha2).abs() < 1e-2, "{:?}", out.alpha);
    }
}
