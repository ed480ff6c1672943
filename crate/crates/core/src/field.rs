//! Space-time grids, 3-component fields and the discrete operators the
//! solvers are assembled from.
//!
//! Time derivatives use a summation-by-parts stencil (central in the
//! interior, one-sided at `t = 0` and `t = T`) that is exactly skew with
//! respect to trapezoid weights:
//!
//! ```text
//! <D u, q>_Ω = -<u, D q>_Ω + u(T) q(T) - u(0) q(0)
//! ```
//!
//! so every adjoint built on top of it is an exact discrete transpose.
//! The Neumann Laplacian uses mirror ghost points and is self-adjoint with
//! respect to the trapezoid weights in space.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::{Add, Mul, Sub};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde;
use crate::vec3::{self, Vec3};

/// Uniform discretization of `[0, T] × [x_min, x_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nt: usize,
    pub nx: usize,
    pub t_end: f64,
    pub x_min: f64,
    pub x_max: f64,
}

impl Grid {
    pub fn new(nt: usize, nx: usize, t_end: f64, x_min: f64, x_max: f64) -> Result<Self> {
        if nt < 3 || nx < 3 {
            return Err(Error::InvalidGrid(format!(
                "need nt >= 3 and nx >= 3, got nt={nt}, nx={nx}"
            )));
        }
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::InvalidGrid(format!("t_end must be positive, got {t_end}")));
        }
        if !(x_min.is_finite() && x_max.is_finite() && x_max > x_min) {
            return Err(Error::InvalidGrid(format!(
                "need x_max > x_min, got [{x_min}, {x_max}]"
            )));
        }
        Ok(Grid {
            nt,
            nx,
            t_end,
            x_min,
            x_max,
        })
    }

    /// 51 time samples on `[0, 0.2]`, 101 space samples on `[0, 2π]`.
    pub fn standard() -> Self {
        Grid {
            nt: 51,
            nx: 101,
            t_end: 0.2,
            x_min: 0.0,
            x_max: 2.0 * std::f64::consts::PI,
        }
    }

    pub fn dt(&self) -> f64 {
        self.t_end / (self.nt - 1) as f64
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        n as f64 * self.dt()
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    /// Trapezoid weights in time.
    pub fn time_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nt, self.dt())
    }

    /// Trapezoid weights in space.
    pub fn space_weights(&self) -> Vec<f64> {
        trapezoid_weights(self.nx, self.dx())
    }

    pub fn len(&self) -> usize {
        self.nt * self.nx
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn trapezoid_weights(n: usize, h: f64) -> Vec<f64> {
    let mut w = vec![h; n];
    w[0] = 0.5 * h;
    w[n - 1] = 0.5 * h;
    w
}

/// A 3-vector field sampled on every node of a [`Grid`], stored time-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3 {
    grid: Grid,
    data: Vec<Vec3>,
}

impl Field3 {
    pub fn zeros(grid: Grid) -> Self {
        Field3 {
            grid,
            data: vec![[0.0; 3]; grid.len()],
        }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> Vec3) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for n in 0..grid.nt {
            let t = grid.t(n);
            for i in 0..grid.nx {
                data.push(f(t, grid.x(i)));
            }
        }
        Field3 { grid, data }
    }

    pub fn from_data(grid: Grid, data: Vec<Vec3>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples, got {}",
                grid.len(),
                data.len()
            )));
        }
        Ok(Field3 { grid, data })
    }

    /// Repeats a single space slice at every time sample.
    pub fn broadcast(grid: Grid, slice: &[Vec3]) -> Result<Self> {
        if slice.len() != grid.nx {
            return Err(Error::ShapeMismatch(format!(
                "slice has {} nodes, grid has {}",
                slice.len(),
                grid.nx
            )));
        }
        let mut data = Vec::with_capacity(grid.len());
        for _ in 0..grid.nt {
            data.extend_from_slice(slice);
        }
        Ok(Field3 { grid, data })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn data(&self) -> &[Vec3] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Vec3] {
        &mut self.data
    }

    pub fn at(&self, n: usize, i: usize) -> Vec3 {
        self.data[n * self.grid.nx + i]
    }

    pub fn set(&mut self, n: usize, i: usize, v: Vec3) {
        let nx = self.grid.nx;
        self.data[n * nx + i] = v;
    }

    pub fn slice(&self, n: usize) -> &[Vec3] {
        let nx = self.grid.nx;
        &self.data[n * nx..(n + 1) * nx]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [Vec3] {
        let nx = self.grid.nx;
        &mut self.data[n * nx..(n + 1) * nx]
    }

    pub fn last_slice(&self) -> &[Vec3] {
        self.slice(self.grid.nt - 1)
    }

    pub fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.data.iter().flatten().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn ensure_same_grid(&self, other: &Field3) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::ShapeMismatch(format!(
                "grids differ: {:?} vs {:?}",
                self.grid, other.grid
            )));
        }
        Ok(())
    }

    /// Pointwise map over samples.
    pub fn map(&self, f: impl Fn(Vec3) -> Vec3) -> Field3 {
        Field3 {
            grid: self.grid,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two fields on the same grid.
    pub fn zip_map(&self, other: &Field3, f: impl Fn(Vec3, Vec3) -> Vec3) -> Field3 {
        assert_eq!(self.grid, other.grid, "zip_map on mismatched grids");
        Field3 {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += a * other`
    pub fn axpy(&mut self, a: f64, other: &Field3) {
        assert_eq!(self.grid, other.grid, "axpy on mismatched grids");
        for (s, o) in self.data.iter_mut().zip(&other.data) {
            for c in 0..3 {
                s[c] += a * o[c];
            }
        }
    }

    /// Discrete L²(0,T; L²(Ω)) inner product with trapezoid weights.
    pub fn dot_l2(&self, other: &Field3) -> f64 {
        assert_eq!(self.grid, other.grid, "dot_l2 on mismatched grids");
        let wt = self.grid.time_weights();
        let wx = self.grid.space_weights();
        let nx = self.grid.nx;
        let mut acc = 0.0;
        for (n, &wn) in wt.iter().enumerate() {
            let mut s = 0.0;
            for (i, &wi) in wx.iter().enumerate() {
                s += wi * vec3::dot(self.data[n * nx + i], other.data[n * nx + i]);
            }
            acc += wn * s;
        }
        acc
    }

    pub fn norm_l2(&self) -> f64 {
        self.dot_l2(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    /// Relative L² distance `‖self − reference‖ / ‖reference‖`.
    pub fn relative_error(&self, reference: &Field3) -> f64 {
        (self - reference).norm_l2() / reference.norm_l2()
    }
}

impl Add for &Field3 {
    type Output = Field3;
    fn add(self, rhs: &Field3) -> Field3 {
        self.zip_map(rhs, vec3::add)
    }
}

impl Sub for &Field3 {
    type Output = Field3;
    fn sub(self, rhs: &Field3) -> Field3 {
        self.zip_map(rhs, vec3::sub)
    }
}

impl Mul<&Field3> for f64 {
    type Output = Field3;
    fn mul(self, rhs: &Field3) -> Field3 {
        rhs.map(|v| vec3::scale(self, v))
    }
}

/// A real trace sampled on the time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSeries {
    pub grid: Grid,
    pub values: Vec<f64>,
}

impl ScalarSeries {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.nt {
            return Err(Error::ShapeMismatch(format!(
                "series has {} samples, grid has nt={}",
                values.len(),
                grid.nt
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scalar series"));
        }
        Ok(ScalarSeries { grid, values })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(f64) -> f64) -> Self {
        ScalarSeries {
            grid,
            values: (0..grid.nt).map(|n| f(grid.t(n))).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Quadrature

pub fn integrate_time(s: &ScalarSeries) -> f64 {
    trapezoid(&s.values, s.grid.dt())
}

pub fn integrate_space(values: &[f64], grid: &Grid) -> f64 {
    trapezoid(values, grid.dx())
}

pub fn trapezoid(values: &[f64], h: f64) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..n - 1].iter().sum();
    h * (inner + 0.5 * (values[0] + values[n - 1]))
}

// ---------------------------------------------------------------------------
// Time derivative

/// Time derivative: central differences in the interior, one-sided first
/// differences at both endpoints.
pub fn ddt(f: &Field3) -> Field3 {
    let g = *f.grid();
    let (nt, nx) = (g.nt, g.nx);
    let inv_dt = 1.0 / g.dt();
    let mut out = Field3::zeros(g);
    for n in 0..nt {
        let (lo, hi, s) = if n == 0 {
            (0, 1, inv_dt)
        } else if n == nt - 1 {
            (nt - 2, nt - 1, inv_dt)
        } else {
            (n - 1, n + 1, 0.5 * inv_dt)
        };
        for i in 0..nx {
            let d = vec3::sub(f.at(hi, i), f.at(lo, i));
            out.set(n, i, vec3::scale(s, d));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Space operators

/// Neumann Laplacian of one space slice with mirror ghost points.
pub fn laplacian_slice(u: &[Vec3], dx: f64) -> Vec<Vec3> {
    let nx = u.len();
    let s = 1.0 / (dx * dx);
    let mut out = vec![[0.0; 3]; nx];
    for i in 0..nx {
        let left = if i == 0 { u[1] } else { u[i - 1] };
        let right = if i == nx - 1 { u[nx - 2] } else { u[i + 1] };
        for c in 0..3 {
            out[i][c] = s * (left[c] - 2.0 * u[i][c] + right[c]);
        }
    }
    out
}

pub fn laplacian_neumann(f: &Field3) -> Field3 {
    let g = *f.grid();
    let dx = g.dx();
    let mut out = Field3::zeros(g);
    for n in 0..g.nt {
        let l = laplacian_slice(f.slice(n), dx);
        out.slice_mut(n).copy_from_slice(&l);
    }
    out
}

/// Central-difference x-derivative; zero at both ends (Neumann data).
pub fn grad_slice(u: &[Vec3], dx: f64) -> Vec<Vec3> {
    let nx = u.len();
    let s = 0.5 / dx;
    let mut out = vec![[0.0; 3]; nx];
    for i in 1..nx - 1 {
        out[i] = vec3::scale(s, vec3::sub(u[i + 1], u[i - 1]));
    }
    out
}

/// Plain (unweighted) transpose of [`grad_slice`].
pub fn grad_slice_transpose(z: &[Vec3], dx: f64) -> Vec<Vec3> {
    let nx = z.len();
    let s = 0.5 / dx;
    let mut out = vec![[0.0; 3]; nx];
    for i in 1..nx - 1 {
        for c in 0..3 {
            out[i + 1][c] += s * z[i][c];
            out[i - 1][c] -= s * z[i][c];
        }
    }
    out
}

/// Adjoint of [`grad_slice`] with respect to trapezoid weights in space.
pub fn grad_slice_adjoint(z: &[Vec3], dx: f64) -> Vec<Vec3> {
    let nx = z.len();
    let w = trapezoid_weights(nx, dx);
    let weighted: Vec<Vec3> = z.iter().zip(&w).map(|(&v, &wi)| vec3::scale(wi, v)).collect();
    let mut out = grad_slice_transpose(&weighted, dx);
    for (o, &wi) in out.iter_mut().zip(&w) {
        *o = vec3::scale(1.0 / wi, *o);
    }
    out
}

pub fn grad_x(f: &Field3) -> Field3 {
    let g = *f.grid();
    let dx = g.dx();
    let mut out = Field3::zeros(g);
    for n in 0..g.nt {
        let d = grad_slice(f.slice(n), dx);
        out.slice_mut(n).copy_from_slice(&d);
    }
    out
}

/// How the residual's space stencils close at the two ends of the domain.
///
/// `Neumann` uses mirror ghost points for the Laplacian and a zero gradient
/// at the ends. `OneSided` uses second-order one-sided stencils for both and
/// imposes no boundary condition on the residual; the Riesz maps still carry
/// the Neumann condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryClosure {
    #[default]
    Neumann,
    OneSided,
}

#[derive(Clone, Copy)]
enum SpaceOp {
    Laplacian,
    Gradient,
}

fn for_each_entry(nx: usize, dx: f64, op: SpaceOp, closure: BoundaryClosure, mut f: impl FnMut(usize, usize, f64)) {
    let last = nx - 1;
    match op {
        SpaceOp::Laplacian => {
            let s = 1.0 / (dx * dx);
            for i in 1..last {
                f(i, i - 1, s);
                f(i, i, -2.0 * s);
                f(i, i + 1, s);
            }
            match closure {
                BoundaryClosure::Neumann => {
                    f(0, 0, -2.0 * s);
                    f(0, 1, 2.0 * s);
                    f(last, last, -2.0 * s);
                    f(last, last - 1, 2.0 * s);
                }
                BoundaryClosure::OneSided => {
                    for (k, c) in [2.0, -5.0, 4.0, -1.0].into_iter().enumerate() {
                        f(0, k, c * s);
                        f(last, last - k, c * s);
                    }
                }
            }
        }
        SpaceOp::Gradient => {
            let s = 0.5 / dx;
            for i in 1..last {
                f(i, i - 1, -s);
                f(i, i + 1, s);
            }
            if closure == BoundaryClosure::OneSided {
                for (k, c) in [-3.0, 4.0, -1.0].into_iter().enumerate() {
                    f(0, k, c * s);
                    f(last, last - k, -c * s);
                }
            }
        }
    }
}

fn apply_space_op(u: &[Vec3], dx: f64, op: SpaceOp, closure: BoundaryClosure) -> Vec<Vec3> {
    let mut out = vec![[0.0; 3]; u.len()];
    for_each_entry(u.len(), dx, op, closure, |r, c, a| {
        for k in 0..3 {
            out[r][k] += a * u[c][k];
        }
    });
    out
}

/// Adjoint with respect to trapezoid weights in space.
fn adjoint_space_op(z: &[Vec3], dx: f64, op: SpaceOp, closure: BoundaryClosure) -> Vec<Vec3> {
    let w = trapezoid_weights(z.len(), dx);
    let mut out = vec![[0.0; 3]; z.len()];
    for_each_entry(z.len(), dx, op, closure, |r, c, a| {
        let s = a * w[r] / w[c];
        for k in 0..3 {
            out[c][k] += s * z[r][k];
        }
    });
    out
}

pub fn laplacian_slice_closed(u: &[Vec3], dx: f64, closure: BoundaryClosure) -> Vec<Vec3> {
    match closure {
        BoundaryClosure::Neumann => laplacian_slice(u, dx),
        BoundaryClosure::OneSided => apply_space_op(u, dx, SpaceOp::Laplacian, closure),
    }
}

pub fn laplacian_slice_closed_adjoint(z: &[Vec3], dx: f64, closure: BoundaryClosure) -> Vec<Vec3> {
    match closure {
        BoundaryClosure::Neumann => laplacian_slice(z, dx),
        BoundaryClosure::OneSided => adjoint_space_op(z, dx, SpaceOp::Laplacian, closure),
    }
}

pub fn grad_slice_closed(u: &[Vec3], dx: f64, closure: BoundaryClosure) -> Vec<Vec3> {
    match closure {
        BoundaryClosure::Neumann => grad_slice(u, dx),
        BoundaryClosure::OneSided => apply_space_op(u, dx, SpaceOp::Gradient, closure),
    }
}

pub fn grad_slice_closed_adjoint(z: &[Vec3], dx: f64, closure: BoundaryClosure) -> Vec<Vec3> {
    match closure {
        BoundaryClosure::Neumann => grad_slice_adjoint(z, dx),
        BoundaryClosure::OneSided => adjoint_space_op(z, dx, SpaceOp::Gradient, closure),
    }
}

// ---------------------------------------------------------------------------
// Time integral operators

/// Matrix of `I₁` acting on time samples (trapezoid quadrature).
pub fn i1_matrix(grid: &Grid) -> Vec<Vec<f64>> {
    let nt = grid.nt;
    let dt = grid.dt();
    let t_end = grid.t_end;
    let wt = grid.time_weights();
    let mut p = vec![vec![0.0; nt]; nt];
    for (i, row) in p.iter_mut().enumerate() {
        // ∫_0^{t_i} w ds
        if i > 0 {
            for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                *r += if j == 0 || j == i { 0.5 * dt } else { dt };
            }
        }
        // − (1/T) ∫_0^T (T − s) w ds
        for (j, r) in row.iter_mut().enumerate() {
            *r -= wt[j] * (t_end - grid.t(j)) / t_end;
        }
    }
    p
}

/// Matrix of `I₂` acting on time samples (trapezoid quadrature).
pub fn i2_matrix(grid: &Grid) -> Vec<Vec<f64>> {
    let nt = grid.nt;
    let dt = grid.dt();
    let t_end = grid.t_end;
    let wt = grid.time_weights();
    let mut k = vec![vec![0.0; nt]; nt];
    for (i, row) in k.iter_mut().enumerate() {
        let ti = grid.t(i);
        if i > 0 {
            for (j, r) in row.iter_mut().enumerate().take(i + 1) {
                let q = if j == 0 || j == i { 0.5 * dt } else { dt };
                *r -= q * (ti - grid.t(j));
            }
        }
        for (j, r) in row.iter_mut().enumerate() {
            *r += ti / t_end * wt[j] * (t_end - grid.t(j));
        }
    }
    k
}

fn apply_time_matrix(m: &[Vec<f64>], f: &Field3) -> Field3 {
    let g = *f.grid();
    let nx = g.nx;
    let mut out = Field3::zeros(g);
    for (n, row) in m.iter().enumerate() {
        let dst = &mut out.data[n * nx..(n + 1) * nx];
        for (j, &a) in row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let src = &f.data[j * nx..(j + 1) * nx];
            for (d, s) in dst.iter_mut().zip(src) {
                d[0] += a * s[0];
                d[1] += a * s[1];
                d[2] += a * s[2];
            }
        }
    }
    out
}

/// `I₁[w](t) = ∫₀ᵗ w ds − (1/T) ∫₀ᵀ (T − s) w ds`
pub fn i1(w: &Field3) -> Field3 {
    let g = *w.grid();
    let (nt, nx, dt) = (g.nt, g.nx, g.dt());
    let wt = g.time_weights();
    let mut mean = vec![[0.0; 3]; nx];
    for (n, &wn) in wt.iter().enumerate() {
        let s = wn * (g.t_end - g.t(n)) / g.t_end;
        for (m, v) in mean.iter_mut().zip(w.slice(n)) {
            *m = vec3::add(*m, vec3::scale(s, *v));
        }
    }
    let mut out = Field3::zeros(g);
    let mut acc = vec![[0.0; 3]; nx];
    for n in 0..nt {
        if n > 0 {
            for i in 0..nx {
                let step = vec3::add(w.at(n - 1, i), w.at(n, i));
                acc[i] = vec3::add(acc[i], vec3::scale(0.5 * dt, step));
            }
        }
        for i in 0..nx {
            out.set(n, i, vec3::sub(acc[i], mean[i]));
        }
    }
    out
}

/// `I₂[w](t) = −∫₀ᵗ (t − s) w ds + (t/T) ∫₀ᵀ (T − s) w ds`
pub fn i2(w: &Field3) -> Field3 {
    apply_time_matrix(&i2_matrix(w.grid()), w)
}

/// Adjoint of [`i1`] with respect to trapezoid weights in time.
pub fn i1_adjoint(w: &Field3) -> Field3 {
    let g = *w.grid();
    let (nt, nx, dt) = (g.nt, g.nx, g.dt());
    let wt = g.time_weights();
    // weighted samples Ω_i w_i, their total and suffix sums
    let mut total = vec![[0.0; 3]; nx];
    for n in 0..nt {
        for (i, t) in total.iter_mut().enumerate() {
            *t = vec3::add(*t, vec3::scale(wt[n], w.at(n, i)));
        }
    }
    let mut out = Field3::zeros(g);
    let mut suffix = vec![[0.0; 3]; nx];
    for j in (0..nt).rev() {
        let v = wt[j] * (g.t_end - g.t(j)) / g.t_end;
        for i in 0..nx {
            let own = vec3::scale(wt[j], w.at(j, i));
            let cum = if j == 0 {
                vec3::scale(0.5 * dt, suffix[i])
            } else {
                vec3::add(vec3::scale(0.5 * dt, own), vec3::scale(dt, suffix[i]))
            };
            let col = vec3::sub(cum, vec3::scale(v, total[i]));
            out.set(j, i, vec3::scale(1.0 / wt[j], col));
            suffix[i] = vec3::add(suffix[i], own);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Inner products

/// Implicit-Euler heat operator `(A u)_k = (u_{k+1} − u_k)/dt − Δ_N u_{k+1}`,
/// `k = 0..nt−2`, returned as slices.
pub fn heat_operator(u: &Field3) -> Vec<Vec<Vec3>> {
    let g = u.grid();
    let (dt, dx) = (g.dt(), g.dx());
    (0..g.nt - 1)
        .map(|k| {
            let lap = laplacian_slice(u.slice(k + 1), dx);
            u.slice(k + 1)
                .iter()
                .zip(u.slice(k))
                .zip(&lap)
                .map(|((&a, &b), &l)| vec3::sub(vec3::scale(1.0 / dt, vec3::sub(a, b)), l))
                .collect()
        })
        .collect()
}

fn check_in_u(u: &Field3) -> Result<()> {
    let scale = u.max_abs().max(1.0);
    let u0 = u.slice(0).iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
    if u0 > 1e-12 * scale {
        return Err(Error::NotInU(u0));
    }
    Ok(())
}

/// Inner product of `U = {u : u(0) = 0}`.
///
/// Defined as `dt Σ_k <(A u₁)_k, (A u₂)_k>` with the implicit-Euler heat
/// operator `A`; this equals `∫∫ Δu₁·Δu₂ + u₁ₜ·u₂ₜ + ∫ ∇u₁(T):∇u₂(T)` in the
/// continuum limit and makes the heat-solver pair its exact Riesz inverse.
pub fn inner_u(u1: &Field3, u2: &Field3) -> Result<f64> {
    u1.ensure_same_grid(u2)?;
    check_in_u(u1)?;
    check_in_u(u2)?;
    let g = u1.grid();
    let wx = g.space_weights();
    let a1 = heat_operator(u1);
    let a2 = heat_operator(u2);
    let mut acc = 0.0;
    for (s1, s2) in a1.iter().zip(&a2) {
        for ((v1, v2), w) in s1.iter().zip(s2).zip(&wx) {
            acc += w * vec3::dot(*v1, *v2);
        }
    }
    Ok(g.dt() * acc)
}

pub fn norm_u(u: &Field3) -> Result<f64> {
    Ok(inner_u(u, u)?.max(0.0).sqrt())
}

/// Discrete H¹(Ω) inner product `Σ wx a·b + Σ_edges (Δa·Δb)/dx`.
pub fn inner_h1_slice(a: &[Vec3], b: &[Vec3], dx: f64) -> f64 {
    let nx = a.len();
    let w = trapezoid_weights(nx, dx);
    let mut acc = 0.0;
    for i in 0..nx {
        acc += w[i] * vec3::dot(a[i], b[i]);
    }
    for i in 0..nx - 1 {
        acc += vec3::dot(vec3::sub(a[i + 1], a[i]), vec3::sub(b[i + 1], b[i])) / dx;
    }
    acc
}

/// Inner product of `W = H¹(0,T; H¹(Ω))*`:
/// `∫₀ᵀ (I₁[(−Δ_N + id)⁻¹ w₁], I₁[(−Δ_N + id)⁻¹ w₂])_{H¹} dt`.
pub fn inner_w(w1: &Field3, w2: &Field3) -> Result<f64> {
    w1.ensure_same_grid(w2)?;
    let g = *w1.grid();
    let a = i1(&pde::solve_helmholtz_slice(w1)?);
    let b = i1(&pde::solve_helmholtz_slice(w2)?);
    let wt = g.time_weights();
    let dx = g.dx();
    Ok((0..g.nt)
        .map(|n| wt[n] * inner_h1_slice(a.slice(n), b.slice(n), dx))
        .sum())
}

pub fn norm_w(w: &Field3) -> Result<f64> {
    Ok(inner_w(w, w)?.max(0.0).sqrt())
}

// ---------------------------------------------------------------------------
// Snapshot files

const MAGIC: &[u8; 4] = b"LLGF";

/// Writes the binary snapshot: `"LLGF"`, u32 nt, u32 nx, u32 components, then
/// little-endian f64 values in (time, space, component) order.
pub fn write_snapshot(path: &Path, f: &Field3) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(f.grid.nt as u32).to_le_bytes())?;
    w.write_all(&(f.grid.nx as u32).to_le_bytes())?;
    w.write_all(&3u32.to_le_bytes())?;
    for v in f.data.iter().flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a snapshot written by [`write_snapshot`] onto `grid`.
pub fn read_snapshot(path: &Path, grid: Grid) -> Result<Field3> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[0..4] != MAGIC {
        return Err(Error::ShapeMismatch("bad snapshot magic".into()));
    }
    let word = |k: usize| u32::from_le_bytes(header[k..k + 4].try_into().unwrap()) as usize;
    let (nt, nx, nc) = (word(4), word(8), word(12));
    if nt != grid.nt || nx != grid.nx || nc != 3 {
        return Err(Error::ShapeMismatch(format!(
            "snapshot is {nt}x{nx}x{nc}, grid is {}x{}x3",
            grid.nt, grid.nx
        )));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != nt * nx * 3 * 8 {
        return Err(Error::ShapeMismatch("truncated snapshot".into()));
    }
    let data = bytes
        .chunks_exact(24)
        .map(|c| {
            let v = |k: usize| f64::from_le_bytes(c[8 * k..8 * k + 8].try_into().unwrap());
            [v(0), v(1), v(2)]
        })
        .collect();
    Field3::from_data(grid, data)
}

/// CSV export with columns `t, x, m1, m2, m3`.
pub fn write_field_csv(path: &Path, f: &Field3) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "x", "m1", "m2", "m3"])?;
    let g = f.grid;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let v = f.at(n, i);
            w.write_record(&[
                g.t(n).to_string(),
                g.x(i).to_string(),
                v[0].to_string(),
                v[1].to_string(),
                v[2].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
