//! Simulation with physical material parameters.
//!
//! Time is rescaled by the run duration `D` and the field by its strength
//! `H = μ₀ m_S |H_ext|`, so the solver sees `α̂/(D H)`, `λ/H` and a field of
//! order one on `s ∈ [0, 1]`.

use serde::{Deserialize, Serialize};

use crate::aao::{run_llg_solver, LlgSolverOptions, SolveOutcome, Truth};
use crate::error::{Error, Result};
use crate::field::Field3;
use crate::model::{scale_physical, AlphaPair, LlgProblem, ModelCoefficients, PhysicalParameters};
use crate::vec3::{self, Vec3};

#[derive(Debug, Clone)]
pub struct PhysicalSetup {
    pub params: PhysicalParameters,
    /// Run duration in seconds.
    pub duration: f64,
    /// Applied field magnitude `|H_ext|`.
    pub field_strength: f64,
    /// Applied field direction and relative size on the rescaled grid.
    pub field_shape: Field3,
    pub m_init: Vec<Vec3>,
    pub solver: LlgSolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalScaling {
    pub alpha_physical: AlphaPair,
    pub alpha_scaled: AlphaPair,
    pub lambda_scaled: f64,
    pub h_strength: f64,
}

#[derive(Debug, Clone)]
pub struct PhysicalOutcome {
    pub scaling: PhysicalScaling,
    /// Total magnetization on the rescaled grid.
    pub m: Field3,
    pub h: Field3,
    pub solve: SolveOutcome,
    /// Largest angle between `m` and `h` over space, per time node, degrees.
    pub angle: Vec<f64>,
    pub max_length_deviation: f64,
}

/// Nondimensional coefficients for a run of `duration` seconds.
pub fn physical_scaling(params: &PhysicalParameters, duration: f64, field_strength: f64) -> Result<PhysicalScaling> {
    if !(duration > 0.0 && field_strength > 0.0) {
        return Err(Error::InvalidParameter(
            "duration and field strength must be positive".into(),
        ));
    }
    let g = crate::field::Grid::new(3, 3, 1.0, 0.0, 1.0)?;
    let probe = Field3::from_fn(g, |_, _| [0.0, 0.0, field_strength]);
    let (alpha, coeff, h) = scale_physical(params, &probe)?;
    let strength = h.at(0, 0)[2];
    let k = duration * strength;
    Ok(PhysicalScaling {
        alpha_physical: alpha,
        alpha_scaled: AlphaPair::new(alpha.alpha1 / k, alpha.alpha2 / k),
        lambda_scaled: coeff.lambda / strength,
        h_strength: strength,
    })
}

fn angle_deg(a: Vec3, b: Vec3) -> f64 {
    let (na, nb) = (vec3::norm(a), vec3::norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (vec3::dot(a, b) / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}

pub fn simulate_physical(setup: &PhysicalSetup) -> Result<PhysicalOutcome> {
    let scaling = physical_scaling(&setup.params, setup.duration, setup.field_strength)?;
    let g = *setup.field_shape.grid();
    if (g.t_end - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidGrid("physical runs use the rescaled time interval [0, 1]".into()));
    }
    let problem = LlgProblem::new(
        setup.m_init.clone(),
        setup.field_shape.clone(),
        ModelCoefficients {
            lambda: scaling.lambda_scaled,
        },
    )?;
    let solve = run_llg_solver(
        &problem,
        scaling.alpha_scaled,
        &Field3::zeros(g),
        &setup.solver,
        Truth::default(),
    )?;
    let m = problem.total_state(&solve.m_hat);
    let angle = (0..g.nt)
        .map(|n| {
            (0..g.nx)
                .map(|i| angle_deg(m.at(n, i), setup.field_shape.at(n, i)))
                .fold(0.0, f64::max)
        })
        .collect();
    let max_length_deviation = m
        .data()
        .iter()
        .map(|v| (vec3::norm(*v) - 1.0).abs())
        .fold(0.0, f64::max);
    Ok(PhysicalOutcome {
        scaling,
        m,
        h: setup.field_shape.clone(),
        solve,
        angle,
        max_length_deviation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scaling_magnitudes() {
        let s = physical_scaling(&PhysicalParameters::standard(), 0.03e-3, 1e-4).unwrap();
        assert!((s.h_strength - 4e-11 * std::f64::consts::PI * 474_000.0).abs() < 1e-15);
        let a = s.alpha_physical;
        assert!((a.alpha2 / a.alpha1 - 10.0).abs() < 1e-12);
        assert!((a.alpha1 - 5.714e-13).abs() < 1e-15);
        assert_eq!(s.lambda_scaled, 0.0);
        assert!((s.alpha_scaled.alpha1 / 3.198e-4 - 1.0).abs() < 1e-3);
        assert!(physical_scaling(&PhysicalParameters::standard(), 0.0, 1e-4).is_err());
    }
}
