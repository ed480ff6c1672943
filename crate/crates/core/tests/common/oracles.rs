//! Dense oracles for the adjoints: for a linear map `A` between spaces with
//! Gram matrices `G_in`, `G_out`, the adjoint is `G_in⁻¹ Aᵀ G_out`. Gram
//! matrices are assembled entry by entry from the library's inner products.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use llg_inverse::aao::{adjoint_f0_state, adjoint_obs_state, grad_alpha, observe_state, riesz_y};
use llg_inverse::field::{
    grad_slice_closed, grad_slice_closed_adjoint, i1, i1_adjoint, inner_u, inner_w,
    laplacian_slice_closed, laplacian_slice_closed_adjoint, BoundaryClosure,
};
use llg_inverse::model::{apply_f0_state_derivative, eval_observation, f0_alpha_derivatives, observation_transpose};
use llg_inverse::pde::riesz_u;
use llg_inverse::reduced::{linearized_llg_apply, reduced_forward, reduced_gradient};
use llg_inverse::{AlphaPair, Field3, Grid, LlgProblem, ModelCoefficients, ObservationSetup, VoltageSeries};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-6;

pub struct Case {
    grid: Grid,
    problem: LlgProblem,
    alpha: AlphaPair,
    m_hat: Field3,
    obs: ObservationSetup,
    rng: ChaCha8Rng,
}

pub fn case(nt: usize, nx: usize, one_sided: bool, seed: u64) -> Case {
    let grid = Grid::new(nt, nx, 0.3, 0.0, 1.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v3 = |rng: &mut ChaCha8Rng, s: f64| [s * rng.random_range(-1.0..1.0), s * rng.random_range(-1.0..1.0), s * rng.random_range(-1.0..1.0)];
    let m0 = (0..nx).map(|_| v3(&mut rng, 1.0)).collect();
    let h = Field3::from_data(grid, (0..grid.len()).map(|_| v3(&mut rng, 1.0)).collect()).unwrap();
    let coeff = ModelCoefficients {
        lambda: rng.random_range(0.2..1.5),
    };
    let closure = if one_sided { BoundaryClosure::OneSided } else { BoundaryClosure::Neumann };
    let problem = LlgProblem::new(m0, h, coeff).unwrap().with_closure(closure).unwrap();
    let alpha = AlphaPair::new(rng.random_range(0.5..2.0), rng.random_range(-1.0..1.0));
    let mut m_hat = Field3::from_data(grid, (0..grid.len()).map(|_| v3(&mut rng, 0.3)).collect()).unwrap();
    m_hat.slice_mut(0).fill([0.0; 3]);
    let n_coils = rng.random_range(1..=2);
    let n_conc = rng.random_range(1..=2);
    let obs = ObservationSetup {
        mu0: rng.random_range(0.5..1.5),
        transfer: (0..n_coils).map(|_| (0..nt).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        concentrations: (0..n_conc).map(|_| (0..nx).map(|_| rng.random_range(0.0..1.0)).collect()).collect(),
        sensitivities: (0..n_coils).map(|_| (0..nx).map(|_| v3(&mut rng, 1.0)).collect()).collect(),
    };
    Case {
        grid,
        problem,
        alpha,
        m_hat,
        obs,
        rng,
    }
}

// ---- flattening -----------------------------------------------------------

fn flat(f: &Field3) -> DVector<f64> {
    DVector::from_iterator(3 * f.grid().len(), f.data().iter().flatten().copied())
}

fn unflat(g: Grid, v: &DVector<f64>) -> Field3 {
    Field3::from_data(g, v.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()).unwrap()
}

/// Coordinates of U: all slices but the first.
fn flat_u(f: &Field3) -> DVector<f64> {
    let skip = 3 * f.grid().nx;
    DVector::from_iterator(3 * f.grid().len() - skip, f.data().iter().flatten().copied().skip(skip))
}

fn unflat_u(g: Grid, v: &DVector<f64>) -> Field3 {
    let mut full = DVector::zeros(3 * g.len());
    full.rows_mut(3 * g.nx, v.len()).copy_from(v);
    unflat(g, &full)
}

fn flat_y(y: &VoltageSeries) -> DVector<f64> {
    DVector::from_iterator(y.channels.len() * y.grid.nt, y.channels.iter().flatten().copied())
}

fn unflat_y(g: Grid, v: &DVector<f64>) -> VoltageSeries {
    let channels: Vec<Vec<f64>> = v.as_slice().chunks_exact(g.nt).map(|c| c.to_vec()).collect();
    VoltageSeries {
        grid: g,
        delta: vec![0.0; channels.len()],
        channels,
    }
}

fn random(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn matrix_of(n_in: usize, mut apply: impl FnMut(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let cols: Vec<DVector<f64>> = (0..n_in).map(|j| apply(&DVector::from_fn(n_in, |i, _| (i == j) as u8 as f64))).collect();
    DMatrix::from_columns(&cols)
}

fn gram(n: usize, ip: impl Fn(&DVector<f64>, &DVector<f64>) -> f64) -> DMatrix<f64> {
    let e = |j: usize| DVector::from_fn(n, |i, _| (i == j) as u8 as f64);
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = ip(&e(i), &e(j));
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    g
}

/// Gram matrices of U and W, cached per grid shape.
fn grams(g: Grid) -> (DMatrix<f64>, DMatrix<f64>) {
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), (DMatrix<f64>, DMatrix<f64>)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(hit) = cache.lock().unwrap().get(&(g.nt, g.nx)) {
        return hit.clone();
    }
    let nu = 3 * (g.len() - g.nx);
    let gu = gram(nu, |a, b| inner_u(&unflat_u(g, a), &unflat_u(g, b)).unwrap());
    let gw = gram(3 * g.len(), |a, b| inner_w(&unflat(g, a), &unflat(g, b)).unwrap());
    cache.lock().unwrap().insert((g.nt, g.nx), (gu.clone(), gw.clone()));
    (gu, gw)
}

fn l2_weights(g: Grid) -> DMatrix<f64> {
    let (wt, wx) = (g.time_weights(), g.space_weights());
    DMatrix::from_diagonal(&DVector::from_fn(3 * g.len(), |k, _| {
        let node = k / 3;
        wt[node / g.nx] * wx[node % g.nx]
    }))
}

fn y_weights(g: Grid, channels: usize) -> DMatrix<f64> {
    let wt = g.time_weights();
    DMatrix::from_diagonal(&DVector::from_fn(channels * g.nt, |k, _| wt[k % g.nt]))
}

fn solve(g: &DMatrix<f64>, rhs: &DVector<f64>) -> DVector<f64> {
    g.clone().lu().solve(rhs).expect("Gram matrix is invertible")
}

fn rel_err(got: &DVector<f64>, want: &DVector<f64>) -> f64 {
    (got - want).norm() / want.norm().max(1e-12)
}

pub fn residual_state(c: Case) -> f64 {
    let Case { grid: g, problem, alpha, m_hat, mut rng, .. } = c;
    let (gu, gw) = grams(g);
    let a = matrix_of(gu.nrows(), |u| flat(&apply_f0_state_derivative(&unflat_u(g, u), &m_hat, &problem, alpha).unwrap()));
    let w = random(&mut rng, gw.nrows());
    let want = solve(&gu, &(a.transpose() * &gw * &w));
    let got = adjoint_f0_state(&unflat(g, &w), &m_hat, &problem, alpha).unwrap();
    let leak = got.slice(0).iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    rel_err(&flat_u(&got), &want).max(leak)
}

pub fn observation_state(c: Case) -> f64 {
    let Case { grid: g, obs, mut rng, .. } = c;
    let (gu, _) = grams(g);
    let a = matrix_of(gu.nrows(), |u| flat_y(&observe_state(&unflat_u(g, u), &obs).unwrap()));
    let r = random(&mut rng, a.nrows());
    let want = solve(&gu, &(a.transpose() * y_weights(g, obs.n_channels()) * &r));
    let got = adjoint_obs_state(&unflat_y(g, &r), &obs).unwrap();
    rel_err(&flat_u(&got), &want)
}

pub fn parameter(c: Case) -> f64 {
    let Case { grid: g, problem, m_hat, mut rng, .. } = c;
    let (_, gw) = grams(g);
    let (d1, d2) = f0_alpha_derivatives(&m_hat, &problem).unwrap();
    let a = DMatrix::from_columns(&[flat(&d1), flat(&d2)]);
    let w = random(&mut rng, gw.nrows());
    let want = a.transpose() * &gw * &w;
    let got = grad_alpha(&riesz_y(&unflat(g, &w)).unwrap(), &m_hat, &problem).unwrap();
    rel_err(&DVector::from_vec(vec![got.0, got.1]), &want)
}

pub fn reduced(c: Case) -> f64 {
    let Case { grid: g, problem, alpha, m_hat, obs, mut rng } = c;
    let col = |b: (f64, f64)| flat_y(&reduced_forward(&linearized_llg_apply(b, &m_hat, &problem, alpha).unwrap(), &obs).unwrap());
    let a = DMatrix::from_columns(&[col((1.0, 0.0)), col((0.0, 1.0))]);
    let r = random(&mut rng, a.nrows());
    let want = a.transpose() * y_weights(g, obs.n_channels()) * &r;
    let got = reduced_gradient(&unflat_y(g, &r), &m_hat, &problem, alpha, &obs).unwrap();
    rel_err(&DVector::from_vec(vec![got.0, got.1]), &want)
}

pub fn riesz(c: Case) -> f64 {
    let Case { grid: g, mut rng, .. } = c;
    let nx = g.nx;
    let (gu, gw) = grams(g);
    let m = l2_weights(g);
    // W: <a, riesz_y(w)>_L² = <a, w>_W
    let w = random(&mut rng, gw.nrows());
    let e_w = rel_err(&flat(&riesz_y(&unflat(g, &w)).unwrap()), &solve(&m, &(&gw * &w)));
    // U: inner_u(u, riesz_u(f, b)) = <u, f>_L² + <u(T), b>_L²(Ω)
    let f = random(&mut rng, 3 * g.len());
    let b = random(&mut rng, 3 * nx);
    let mut functional = &m * &f;
    let wx = g.space_weights();
    let base = 3 * (g.len() - nx);
    for k in 0..3 * nx {
        functional[base + k] += wx[k / 3] * b[k];
    }
    let want = solve(&gu, &functional.rows(3 * nx, gu.nrows()).into_owned());
    let slice: Vec<[f64; 3]> = b.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    let got = riesz_u(&unflat(g, &f), &slice).unwrap();
    e_w.max(rel_err(&flat_u(&got), &want))
}

/// `I₁`, the closed Laplacian and gradient, and the observation kernel,
/// all under trapezoid-weighted L².
pub fn weighted_l2(c: Case) -> f64 {
    let Case { grid: g, problem, obs, mut rng, .. } = c;
    let nx = g.nx;
    let m = l2_weights(g);
    let n = 3 * g.len();
    let v = random(&mut rng, n);
    let a = matrix_of(n, |u| flat(&i1(&unflat(g, u))));
    let mut worst = rel_err(&flat(&i1_adjoint(&unflat(g, &v))), &solve(&m, &(a.transpose() * &m * &v)));

    let mx = DMatrix::from_diagonal(&DVector::from_fn(3 * nx, |k, _| g.space_weights()[k / 3]));
    let z = random(&mut rng, 3 * nx);
    let to_slice = |v: &DVector<f64>| -> Vec<[f64; 3]> { v.as_slice().chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect() };
    let from_slice = |s: Vec<[f64; 3]>| DVector::from_iterator(3 * s.len(), s.into_iter().flatten());
    let closure = problem.closure;
    let lap = matrix_of(3 * nx, |u| from_slice(laplacian_slice_closed(&to_slice(u), g.dx(), closure)));
    worst = worst.max(rel_err(
        &from_slice(laplacian_slice_closed_adjoint(&to_slice(&z), g.dx(), closure)),
        &solve(&mx, &(lap.transpose() * &mx * &z)),
    ));
    let grad = matrix_of(3 * nx, |u| from_slice(grad_slice_closed(&to_slice(u), g.dx(), closure)));
    worst = worst.max(rel_err(
        &from_slice(grad_slice_closed_adjoint(&to_slice(&z), g.dx(), closure)),
        &solve(&mx, &(grad.transpose() * &mx * &z)),
    ));

    let k = matrix_of(n, |u| flat_y(&eval_observation(&unflat(g, u), &obs).unwrap()));
    let r = random(&mut rng, k.nrows());
    let want = solve(&m, &(k.transpose() * y_weights(g, obs.n_channels()) * &r));
    worst.max(rel_err(&flat(&observation_transpose(&unflat_y(g, &r), &obs).unwrap()), &want))
}

pub type Check = fn(Case) -> f64;

pub const CHECKS: [(&str, Check); 6] = [
    ("residual state derivative (U, W)", residual_state),
    ("observation (U, L2)", observation_state),
    ("parameter derivative (R2, W)", parameter),
    ("reduced derivative (R2, L2)", reduced),
    ("Riesz maps (U, W)", riesz),
    ("weighted L2 operators", weighted_l2),
];
