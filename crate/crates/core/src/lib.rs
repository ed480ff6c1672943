//! Landau-Lifshitz-Gilbert forward solves and damping-parameter
//! identification by Landweber-type iterations.

pub mod aao;
pub mod config;
pub mod error;
pub mod experiment;
pub mod expr;
pub mod field;
pub mod kaczmarz;
pub mod model;
pub mod pde;
pub mod physical;
pub mod reduced;
pub mod regularization;
pub mod vec3;

pub use error::{Error, Result};
pub use field::{Field3, Grid, ScalarSeries};
pub use model::{AlphaPair, LlgProblem, ModelCoefficients, ObservationSetup, VoltageSeries};
