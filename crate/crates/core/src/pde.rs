//! Linear solves on the grid: Helmholtz per time slice, forward/backward
//! heat marches with Neumann boundary, and the pointwise final-time system.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{laplacian_slice, Field3, Grid};
use crate::model::AlphaPair;
use crate::vec3::{self, Vec3};

/// Factorized `s·I − r·Δ_N` on one space slice (Thomas sweep).
#[derive(Debug, Clone)]
pub struct NeumannSystem {
    lower: Vec<f64>,
    upper_mod: Vec<f64>,
    pivot_inv: Vec<f64>,
}

impl NeumannSystem {
    pub fn new(nx: usize, dx: f64, s: f64, r: f64) -> Self {
        let q = r / (dx * dx);
        let mut lower = vec![-q; nx];
        let mut upper = vec![-q; nx];
        let diag = vec![s + 2.0 * q; nx];
        lower[0] = 0.0;
        upper[0] = -2.0 * q;
        lower[nx - 1] = -2.0 * q;
        upper[nx - 1] = 0.0;

        let mut upper_mod = vec![0.0; nx];
        let mut pivot_inv = vec![0.0; nx];
        let mut prev = 0.0;
        for i in 0..nx {
            let pivot = diag[i] - lower[i] * prev;
            pivot_inv[i] = 1.0 / pivot;
            prev = upper[i] * pivot_inv[i];
            upper_mod[i] = prev;
        }
        NeumannSystem {
            lower,
            upper_mod,
            pivot_inv,
        }
    }

    /// Solves in place for all three components at once.
    pub fn solve_in_place(&self, rhs: &mut [Vec3]) {
        let nx = rhs.len();
        let mut prev = [0.0; 3];
        for i in 0..nx {
            for c in 0..3 {
                rhs[i][c] = (rhs[i][c] - self.lower[i] * prev[c]) * self.pivot_inv[i];
            }
            prev = rhs[i];
        }
        for i in (0..nx - 1).rev() {
            for c in 0..3 {
                rhs[i][c] -= self.upper_mod[i] * rhs[i + 1][c];
            }
        }
    }
}

/// `(−Δ_N + id) u` on one slice.
pub fn helmholtz_apply_slice(u: &[Vec3], dx: f64) -> Vec<Vec3> {
    laplacian_slice(u, dx)
        .iter()
        .zip(u)
        .map(|(&l, &v)| vec3::sub(v, l))
        .collect()
}

/// Solves `−Δ_N u + u = w` independently on every time slice.
pub fn solve_helmholtz_slice(w: &Field3) -> Result<Field3> {
    w.check_finite("helmholtz input")?;
    let g = *w.grid();
    let sys = NeumannSystem::new(g.nx, g.dx(), 1.0, 1.0);
    let mut out = w.clone();
    for n in 0..g.nt {
        sys.solve_in_place(out.slice_mut(n));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeatScheme {
    #[default]
    ImplicitEuler,
    CrankNicolson,
}

fn march(grid: &Grid, start: &[Vec3], source: &Field3, scheme: HeatScheme) -> Field3 {
    let (nt, dt, dx) = (grid.nt, grid.dt(), grid.dx());
    let mut z = Field3::zeros(*grid);
    z.slice_mut(0).copy_from_slice(start);
    match scheme {
        HeatScheme::ImplicitEuler => {
            let sys = NeumannSystem::new(grid.nx, dx, 1.0, dt);
            for n in 1..nt {
                let mut rhs: Vec<Vec3> = z
                    .slice(n - 1)
                    .iter()
                    .zip(source.slice(n - 1))
                    .map(|(&a, &v)| vec3::add(a, vec3::scale(dt, v)))
                    .collect();
                sys.solve_in_place(&mut rhs);
                z.slice_mut(n).copy_from_slice(&rhs);
            }
        }
        HeatScheme::CrankNicolson => {
            let sys = NeumannSystem::new(grid.nx, dx, 1.0, 0.5 * dt);
            for n in 1..nt {
                let prev = z.slice(n - 1);
                let lap = laplacian_slice(prev, dx);
                let mut rhs: Vec<Vec3> = (0..grid.nx)
                    .map(|i| {
                        let src = vec3::add(source.at(n - 1, i), source.at(n, i));
                        vec3::add(
                            vec3::add(prev[i], vec3::scale(0.5 * dt, lap[i])),
                            vec3::scale(0.5 * dt, src),
                        )
                    })
                    .collect();
                sys.solve_in_place(&mut rhs);
                z.slice_mut(n).copy_from_slice(&rhs);
            }
        }
    }
    z
}

fn reflect_time(f: &Field3) -> Field3 {
    let g = *f.grid();
    let mut out = Field3::zeros(g);
    for n in 0..g.nt {
        out.slice_mut(n).copy_from_slice(f.slice(g.nt - 1 - n));
    }
    out
}

/// `z_t − Δ_N z = v`, `z(0) = 0`, implicit Euler.
pub fn solve_heat_forward(v: &Field3) -> Result<Field3> {
    solve_heat_forward_with(v, HeatScheme::ImplicitEuler)
}

pub fn solve_heat_forward_with(v: &Field3, scheme: HeatScheme) -> Result<Field3> {
    v.check_finite("heat source")?;
    let g = *v.grid();
    let zero = vec![[0.0; 3]; g.nx];
    Ok(march(&g, &zero, v, scheme))
}

/// `−v_t − Δ_N v = f`, `v(T) = g`, via time reflection of the forward march.
pub fn solve_heat_backward(f: &Field3, g: &[Vec3]) -> Result<Field3> {
    solve_heat_backward_with(f, g, HeatScheme::ImplicitEuler)
}

pub fn solve_heat_backward_with(f: &Field3, g: &[Vec3], scheme: HeatScheme) -> Result<Field3> {
    f.check_finite("heat source")?;
    let grid = *f.grid();
    if g.len() != grid.nx {
        return Err(Error::ShapeMismatch(format!(
            "final slice has {} nodes, grid has {}",
            g.len(),
            grid.nx
        )));
    }
    if g.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("heat final value"));
    }
    Ok(reflect_time(&march(&grid, g, &reflect_time(f), scheme)))
}

/// Riesz representer in `U` of `u ↦ Σ_n Ω_n <f_n, u_n> + <g, u(T)>`
/// (all pairings trapezoid-weighted): a backward then a forward heat solve.
pub fn riesz_u(f: &Field3, g: &[Vec3]) -> Result<Field3> {
    let grid = *f.grid();
    let wt = grid.time_weights();
    let dt = grid.dt();
    let mut scaled = f.clone();
    for n in 0..grid.nt {
        let s = wt[n] / dt;
        for v in scaled.slice_mut(n) {
            *v = vec3::scale(s, *v);
        }
    }
    let v = solve_heat_backward(&scaled, g)?;
    solve_heat_forward(&v)
}

/// Pointwise solve of `α̂₁ p + α̂₂ m × p = b`.
pub fn solve_final_condition(m_t: &[Vec3], b: &[Vec3], alpha: AlphaPair) -> Result<Vec<Vec3>> {
    if m_t.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "state slice has {} nodes, data slice {}",
            m_t.len(),
            b.len()
        )));
    }
    let (a, c) = (alpha.alpha1, alpha.alpha2);
    if a == 0.0 || !a.is_finite() || !c.is_finite() {
        return Err(Error::SingularFinalCondition);
    }
    Ok(m_t
        .iter()
        .zip(b)
        .map(|(&m, &b)| {
            let det = a * (a * a + c * c * vec3::dot(m, m));
            let num = vec3::add(
                vec3::sub(vec3::scale(a * a, b), vec3::scale(a * c, vec3::cross(m, b))),
                vec3::scale(c * c * vec3::dot(m, b), m),
            );
            vec3::scale(1.0 / det, num)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn helmholtz_constant_and_cosine() {
        let g = Grid::standard();
        let c = Field3::from_fn(g, |_, _| [1.5, -2.0, 0.25]);
        let u = solve_helmholtz_slice(&c).unwrap();
        assert!((&u - &c).max_abs() < 1e-13);

        let w = Field3::from_fn(g, |_, x| [2.0 * x.cos(), 0.0, 0.0]);
        let u = solve_helmholtz_slice(&w).unwrap();
        let exact = Field3::from_fn(g, |_, x| [x.cos(), 0.0, 0.0]);
        let dx = g.dx();
        assert!((&u - &exact).max_abs() < 10.0 * dx * dx);
    }

    #[test]
    fn helmholtz_inverts_discrete_operator() {
        let g = Grid::new(4, 37, 1.0, 0.0, 3.0).unwrap();
        let w = Field3::from_fn(g, |t, x| [(5.0 * x).sin() + t, x * x, (x * t).exp()]);
        let u = solve_helmholtz_slice(&w).unwrap();
        for n in 0..g.nt {
            let back = helmholtz_apply_slice(u.slice(n), g.dx());
            for (a, b) in back.iter().zip(w.slice(n)) {
                for c in 0..3 {
                    assert!((a[c] - b[c]).abs() <= 1e-12 * b[c].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn helmholtz_rejects_nan() {
        let g = Grid::new(3, 5, 1.0, 0.0, 1.0).unwrap();
        let mut w = Field3::zeros(g);
        w.set(1, 2, [f64::NAN, 0.0, 0.0]);
        assert!(matches!(solve_helmholtz_slice(&w), Err(Error::NonFinite(_))));
    }

    #[test]
    fn heat_forward_constant_source() {
        let g = Grid::standard();
        assert_eq!(solve_heat_forward(&Field3::zeros(g)).unwrap().max_abs(), 0.0);
        let v = Field3::from_fn(g, |_, _| [1.0, 1.0, 1.0]);
        let z = solve_heat_forward(&v).unwrap();
        for n in 0..g.nt {
            assert!((z.at(n, 10)[1] - g.t(n)).abs() < 1e-13);
        }
    }

    fn manufactured_forward_error(nt: usize, nx: usize, scheme: HeatScheme) -> f64 {
        let g = Grid::new(nt, nx, 0.5, 0.0, 2.0 * PI).unwrap();
        // z = t cos x: z_t − z_xx = (1 + t) cos x
        let v = Field3::from_fn(g, |t, x| [(1.0 + t) * x.cos(), 0.0, 0.0]);
        let z = solve_heat_forward_with(&v, scheme).unwrap();
        let exact = Field3::from_fn(g, |t, x| [t * x.cos(), 0.0, 0.0]);
        (&z - &exact).max_abs()
    }

    #[test]
    fn heat_forward_manufactured() {
        let e1 = manufactured_forward_error(51, 101, HeatScheme::ImplicitEuler);
        let e2 = manufactured_forward_error(101, 201, HeatScheme::ImplicitEuler);
        let dt = 0.5 / 50.0;
        assert!(e1 < 2.0 * dt, "{e1}");
        assert!(e2 < 0.6 * e1, "first order expected: {e1} -> {e2}");
        let c1 = manufactured_forward_error(51, 101, HeatScheme::CrankNicolson);
        let c2 = manufactured_forward_error(101, 201, HeatScheme::CrankNicolson);
        assert!(c2 < 0.35 * c1, "second order expected: {c1} -> {c2}");
    }

    #[test]
    fn heat_backward_manufactured() {
        let t_end = 0.5;
        let err = |nt: usize, nx: usize| {
            let g = Grid::new(nt, nx, t_end, 0.0, 2.0 * PI).unwrap();
            // v = (T − t) cos x: −v_t − v_xx = (1 + T − t) cos x
            let f = Field3::from_fn(g, |t, x| [0.0, (1.0 + t_end - t) * x.cos(), 0.0]);
            let exact = Field3::from_fn(g, |t, x| [0.0, (t_end - t) * x.cos(), 0.0]);
            let v = solve_heat_backward(&f, exact.last_slice()).unwrap();
            assert_eq!(v.last_slice(), exact.last_slice());
            (&v - &exact).max_abs()
        };
        let e1 = err(51, 101);
        let e2 = err(101, 201);
        assert!(e1 < 2.0 * t_end / 50.0 && e2 < 0.6 * e1, "{e1} {e2}");
    }

    #[test]
    fn heat_backward_is_reflected_forward() {
        let g = Grid::new(9, 13, 0.4, 0.0, 2.0).unwrap();
        let f = Field3::from_fn(g, |t, x| [(7.0 * t).sin() * x, x.cos(), t * t - x]);
        let zero = vec![[0.0; 3]; g.nx];
        let back = solve_heat_backward(&f, &zero).unwrap();
        let fwd = reflect_time(&solve_heat_forward(&reflect_time(&f)).unwrap());
        assert_eq!(back, fwd);
    }

    #[test]
    fn heat_maximum_principle() {
        let g = Grid::new(21, 31, 1.0, 0.0, 1.0).unwrap();
        let v = Field3::from_fn(g, |t, x| [(10.0 * x).sin().max(0.0) * t, (x - 0.5).max(0.0), 0.0]);
        let z = solve_heat_forward(&v).unwrap();
        assert!(z.data().iter().flatten().all(|&c| c >= 0.0));
        let gslice: Vec<Vec3> = (0..g.nx).map(|i| [g.x(i), 0.0, 1.0]).collect();
        let b = solve_heat_backward(&v, &gslice).unwrap();
        assert!(b.data().iter().flatten().all(|&c| c >= 0.0));
    }

    #[test]
    fn final_condition_examples() {
        let alpha = AlphaPair::new(1.0, 1.0);
        let p = solve_final_condition(&[[0.0, 0.0, 1.0]], &[[1.0, 0.0, 0.0]], alpha).unwrap();
        assert!((p[0][0] - 0.5).abs() < 1e-15 && (p[0][1] + 0.5).abs() < 1e-15 && p[0][2] == 0.0);

        let p = solve_final_condition(&[[0.3, 0.1, 2.0]], &[[4.0, -2.0, 1.0]], AlphaPair::new(2.0, 0.0)).unwrap();
        assert_eq!(p[0], [2.0, -1.0, 0.5]);

        assert!(matches!(
            solve_final_condition(&[[0.0; 3]], &[[1.0; 3]], AlphaPair::new(0.0, 1.0)),
            Err(Error::SingularFinalCondition)
        ));
    }

    #[test]
    fn final_condition_residual() {
        let alpha = AlphaPair::new(0.7, -1.9);
        let ms: Vec<Vec3> = (0..50).map(|k| {
            let s = k as f64;
            [(1.3 * s).sin(), (0.7 * s).cos() * 2.0, 0.1 * s - 2.0]
        }).collect();
        let bs: Vec<Vec3> = (0..50).map(|k| {
            let s = k as f64;
            [(0.3 * s).cos(), s.sqrt(), -(s * 0.11).sin()]
        }).collect();
        let p = solve_final_condition(&ms, &bs, alpha).unwrap();
        for ((m, b), p) in ms.iter().zip(&bs).zip(&p) {
            let lhs = vec3::add(vec3::scale(alpha.alpha1, *p), vec3::scale(alpha.alpha2, vec3::cross(*m, *p)));
            assert!(vec3::norm(vec3::sub(lhs, *b)) <= 1e-12 * vec3::norm(*b).max(1.0));
        }
    }
}
