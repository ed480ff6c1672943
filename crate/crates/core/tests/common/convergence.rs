//! Manufactured-solution refinement studies on `[0, 1] × [0, 1]`.

use std::f64::consts::PI;

use llg_inverse::pde::{solve_heat_backward, solve_heat_forward_with, solve_helmholtz_slice, HeatScheme};
use llg_inverse::{Field3, Grid};

#[derive(Debug, Clone)]
pub struct Study {
    pub errors: Vec<f64>,
    /// `log₂` of successive error ratios; each level halves the step.
    pub orders: Vec<f64>,
}

impl Study {
    fn new(errors: Vec<f64>) -> Self {
        let orders = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
        Study { errors, orders }
    }

    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn max_err(f: &Field3, exact: impl Fn(f64, f64) -> f64) -> f64 {
    let g = *f.grid();
    let mut e = 0.0f64;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let want = exact(g.t(n), g.x(i));
            for c in f.at(n, i) {
                e = e.max((c - want).abs());
            }
        }
    }
    e
}

fn uniform(g: Grid, f: impl Fn(f64, f64) -> f64) -> Field3 {
    Field3::from_fn(g, |t, x| [f(t, x); 3])
}

/// `z = t³ cos(πx)` for `z_t − Δz = v`, `z(0) = 0`, refining in time.
pub fn forward_in_time(scheme: HeatScheme) -> Study {
    let errors = [21, 41, 81]
        .iter()
        .map(|&nt| {
            let g = Grid::new(nt, 2001, 1.0, 0.0, 1.0).unwrap();
            let v = uniform(g, |t, x| (3.0 * t * t + PI * PI * t.powi(3)) * (PI * x).cos());
            let z = solve_heat_forward_with(&v, scheme).unwrap();
            max_err(&z, |t, x| t.powi(3) * (PI * x).cos())
        })
        .collect();
    Study::new(errors)
}

/// `z = t cos(πx)`, refining in space with a fine time step.
pub fn forward_in_space() -> Study {
    let errors = [6, 11, 21]
        .iter()
        .map(|&nx| {
            let g = Grid::new(20001, nx, 1.0, 0.0, 1.0).unwrap();
            let v = uniform(g, |t, x| (1.0 + PI * PI * t) * (PI * x).cos());
            let z = solve_heat_forward_with(&v, HeatScheme::ImplicitEuler).unwrap();
            max_err(&z, |t, x| t * (PI * x).cos())
        })
        .collect();
    Study::new(errors)
}

/// `v = (1 + (1 − t)²) cos(πx)` for `−v_t − Δv = f`, `v(1) = cos(πx)`.
pub fn backward_in_time() -> Study {
    let errors = [21, 41, 81]
        .iter()
        .map(|&nt| {
            let g = Grid::new(nt, 2001, 1.0, 0.0, 1.0).unwrap();
            let f = uniform(g, |t, x| (2.0 * (1.0 - t) + PI * PI * (1.0 + (1.0 - t).powi(2))) * (PI * x).cos());
            let end: Vec<[f64; 3]> = (0..g.nx).map(|i| [(PI * g.x(i)).cos(); 3]).collect();
            let v = solve_heat_backward(&f, &end).unwrap();
            max_err(&v, |t, x| (1.0 + (1.0 - t).powi(2)) * (PI * x).cos())
        })
        .collect();
    Study::new(errors)
}

/// `(−Δ + 1) u = (1 + π²) cos(πx)`, refining in space.
pub fn helmholtz_in_space() -> Study {
    let errors = [11, 21, 41]
        .iter()
        .map(|&nx| {
            let g = Grid::new(3, nx, 1.0, 0.0, 1.0).unwrap();
            let w = uniform(g, |_, x| (1.0 + PI * PI) * (PI * x).cos());
            max_err(&solve_helmholtz_slice(&w).unwrap(), |_, x| (PI * x).cos())
        })
        .collect();
    Study::new(errors)
}
