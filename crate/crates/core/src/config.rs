//! Experiment configuration: a TOML file, optionally layered on a preset.
//!
//! ```toml
//! mode = "identify-reduced"
//! preset = "test3"
//! seed = 7
//!
//! [noise]
//! level = 0.03
//! ```
//!
//! Vector fields are given as three expression strings in `t` and `x`,
//! e.g. `m0 = ["sin(x)", "cos(x)", "1"]`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aao::ResidualNorm;
use crate::error::{Error, Result};
use crate::field::{BoundaryClosure, Grid};
use crate::model::PhysicalParameters;
use crate::regularization::{NoiseDistribution, StepPolicy, StoppingRule};
use crate::reduced::InnerSolverOptions;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SolveLlg,
    IdentifyAao,
    IdentifyReduced,
    IdentifyKaczmarzTime,
    IdentifyKaczmarzData,
    SimulatePhysical,
    MakeData,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SolveLlg => "solve-llg",
            Mode::IdentifyAao => "identify-aao",
            Mode::IdentifyReduced => "identify-reduced",
            Mode::IdentifyKaczmarzTime => "identify-kaczmarz-time",
            Mode::IdentifyKaczmarzData => "identify-kaczmarz-data",
            Mode::SimulatePhysical => "simulate-physical",
            Mode::MakeData => "make-data",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Test1,
    Test2,
    Test3,
    Physical,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test1" => Ok(Preset::Test1),
            "test2" => Ok(Preset::Test2),
            "test3" => Ok(Preset::Test3),
            "physical" => Ok(Preset::Physical),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

/// The forward problem: exact parameters, field, initial state and
/// optionally the exact solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub alpha: [f64; 2],
    pub h: [String; 3],
    pub m0: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m_exact: Option<[String; 3]>,
    /// Exchange coefficient.
    #[serde(default = "unit_lambda")]
    pub lambda: f64,
    #[serde(default)]
    pub closure: BoundaryClosure,
}

/// LLG-solver mode settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    pub step: StepPolicy,
    pub max_iterations: usize,
    /// Initial guess for `m̂`.
    pub init: [String; 3],
    #[serde(default)]
    pub norm: ResidualNorm,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            step: StepPolicy::adaptive(75.0),
            max_iterations: 5000,
            init: zero_exprs(),
            norm: ResidualNorm::W,
            tolerance: None,
        }
    }
}

/// Initial guesses for identification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    /// Initial `m̂` of the all-at-once iteration.
    pub m_hat: [String; 3],
    /// Defaults to the exact parameters shifted by `(0.05, 0.05)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<[f64; 2]>,
}

impl Default for InitSpec {
    fn default() -> Self {
        InitSpec {
            m_hat: zero_exprs(),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSpec {
    pub mu0: f64,
    /// `ã_l(t)`, one per coil.
    pub transfer: Vec<String>,
    /// `c_k(x)`.
    pub concentrations: Vec<String>,
    /// `p_l(x)`, one per coil.
    pub sensitivities: Vec<[String; 3]>,
}

impl Default for ObservationSpec {
    fn default() -> Self {
        ObservationSpec {
            mu0: 1.0,
            transfer: vec!["1".into()],
            concentrations: vec!["1".into()],
            sensitivities: vec![["1".into(), "1".into(), "1".into()]],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AaoSpec {
    pub step: StepPolicy,
}

impl Default for AaoSpec {
    fn default() -> Self {
        AaoSpec {
            step: StepPolicy::adaptive(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReducedSpec {
    pub mu: f64,
}

impl Default for ReducedSpec {
    fn default() -> Self {
        ReducedSpec { mu: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Relative level per channel.
    #[serde(default)]
    pub level: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    /// Directory written by `make-data`; data are synthesized when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KaczmarzSpec {
    pub segments: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<usize>>,
}

impl Default for KaczmarzSpec {
    fn default() -> Self {
        KaczmarzSpec {
            segments: 4,
            order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalSpec {
    pub params: PhysicalParameters,
    /// Seconds.
    pub duration: f64,
    /// `|H_ext|`.
    pub field_strength: f64,
    /// Field direction on the rescaled interval `t ∈ [0, 1]`.
    pub field: [String; 3],
    pub m_init: [String; 3],
    pub nt: usize,
    pub nx: usize,
    pub x_min: f64,
    pub x_max: f64,
    pub step: StepPolicy,
    pub max_iterations: usize,
}

impl Default for PhysicalSpec {
    fn default() -> Self {
        PhysicalSpec {
            params: PhysicalParameters::standard(),
            duration: 0.03e-3,
            field_strength: 1e-4,
            field: field_scenario("static").expect("known scenario"),
            m_init: exprs(["1", "0", "0"]),
            nt: 51,
            nx: 11,
            x_min: -0.006,
            x_max: 0.006,
            step: StepPolicy::adaptive(100.0),
            max_iterations: 5000,
        }
    }
}

/// Applied-field waveforms on the rescaled interval: `static` (e₃),
/// `rotating` (one turn in the x₁x₃ plane) and `switching` (e₃ turning to
/// e₂ at mid-run).
pub fn field_scenario(name: &str) -> Result<[String; 3]> {
    match name {
        "static" => Ok(exprs(["0", "0", "1"])),
        "rotating" => Ok(exprs(["sin(2*pi*t)", "0", "cos(2*pi*t)"])),
        "switching" => Ok(exprs([
            "0",
            "0.5*(1+tanh(20*(t-0.5)))",
            "0.5*(1-tanh(20*(t-0.5)))",
        ])),
        _ => Err(Error::Config(format!("unknown field scenario {name:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Input-only: resolved into the other sections on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "Grid::standard")]
    pub grid: Grid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub solver: SolverSpec,
    #[serde(default)]
    pub init: InitSpec,
    #[serde(default)]
    pub observation: ObservationSpec,
    #[serde(default)]
    pub aao: AaoSpec,
    #[serde(default)]
    pub reduced: ReducedSpec,
    #[serde(default)]
    pub inner: InnerSolverOptions,
    #[serde(default)]
    pub stopping: StoppingRule,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub kaczmarz: KaczmarzSpec,
    #[serde(default)]
    pub physical: PhysicalSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: None,
            preset: None,
            seed: 0,
            grid: Grid::standard(),
            problem: None,
            solver: SolverSpec::default(),
            init: InitSpec::default(),
            observation: ObservationSpec::default(),
            aao: AaoSpec::default(),
            reduced: ReducedSpec::default(),
            inner: InnerSolverOptions::default(),
            stopping: StoppingRule::default(),
            noise: NoiseSpec::default(),
            kaczmarz: KaczmarzSpec::default(),
            physical: PhysicalSpec::default(),
        }
    }
}

fn exprs(v: [&str; 3]) -> [String; 3] {
    v.map(String::from)
}

fn unit_lambda() -> f64 {
    1.0
}

fn zero_exprs() -> [String; 3] {
    exprs(["0", "0", "0"])
}

fn offset_init(alpha: [f64; 2]) -> Option<[f64; 2]> {
    Some([alpha[0] + 0.05, alpha[1] + 0.05])
}

/// Test cases 1–3: exact data, LLG-solver settings and identification
/// defaults.
pub fn preset_test(id: u32) -> Result<ExperimentConfig> {
    let (problem, solver_init, mu, iters) = match id {
        1 => (
            ProblemSpec {
                alpha: [1.0, -1.0],
                h: exprs(["0", "1.2", "1.6"]),
                m0: exprs(["0", "0.6", "0.8"]),
                m_exact: Some(exprs(["0", "0.6", "0.8"])),
                lambda: 1.0,
                closure: BoundaryClosure::Neumann,
            },
            exprs(["-5*t", "-5*t", "-5*t"]),
            150.0,
            5000,
        ),
        2 => (
            ProblemSpec {
                alpha: [2.0, 0.0],
                h: exprs(["-cos(x)", "-cos(x)", "0"]),
                m0: exprs(["cos(x)", "cos(x)", "1"]),
                m_exact: Some(exprs(["cos(x)", "cos(x)", "exp(t)"])),
                lambda: 1.0,
                closure: BoundaryClosure::Neumann,
            },
            exprs(["-5*t*cos(x)", "-5*t*cos(x)", "-5*t*cos(x)"]),
            75.0,
            8000,
        ),
        3 => (
            ProblemSpec {
                alpha: [1.0, 0.0],
                h: zero_exprs(),
                m0: exprs(["sin(x)", "cos(x)", "1"]),
                m_exact: Some(exprs(["sin(x)", "cos(x)", "exp(t)"])),
                lambda: 1.0,
                closure: BoundaryClosure::OneSided,
            },
            exprs(["-sin(30*t)/5", "-sin(30*t)/5", "-sin(30*t)/5"]),
            300.0,
            3000,
        ),
        _ => return Err(Error::Config(format!("unknown test case {id}"))),
    };
    let init = InitSpec {
        m_hat: if id == 3 {
            exprs(["-0.1*sin(20*t)", "-0.1*sin(20*t)", "-0.1*sin(20*t)"])
        } else {
            zero_exprs()
        },
        alpha: offset_init(problem.alpha),
    };
    Ok(ExperimentConfig {
        problem: Some(problem),
        solver: SolverSpec {
            step: StepPolicy::adaptive(mu),
            max_iterations: iters,
            init: solver_init,
            norm: ResidualNorm::W,
            tolerance: None,
        },
        init,
        inner: InnerSolverOptions {
            step: StepPolicy::adaptive(mu),
            max_iterations: 5000,
            rel_tol: 1e-3,
        },
        ..ExperimentConfig::default()
    })
}

pub fn preset_physical() -> ExperimentConfig {
    ExperimentConfig {
        physical: PhysicalSpec::default(),
        ..ExperimentConfig::default()
    }
}

pub fn preset(p: Preset) -> ExperimentConfig {
    match p {
        Preset::Test1 => preset_test(1),
        Preset::Test2 => preset_test(2),
        Preset::Test3 => preset_test(3),
        Preset::Physical => Ok(preset_physical()),
    }
    .expect("built-in preset")
}

/// Recursively overlays `top` on `base`; tables merge, everything else
/// replaces.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl ExperimentConfig {
    /// Parses a config; a `preset` key (or `preset_override`) supplies
    /// defaults for every key the file leaves out.
    pub fn from_toml_str(src: &str, preset_override: Option<Preset>) -> Result<Self> {
        let mut user: toml::Table = src.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let named = match user.remove("preset") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| Error::Config("preset must be a string".into()))?
                    .parse::<Preset>()?,
            ),
            None => None,
        };
        let chosen = preset_override.or(named);
        let mut merged = match chosen {
            Some(p) => {
                if user.contains_key("problem") {
                    return Err(Error::Config(
                        "a preset and an explicit [problem] section are mutually exclusive".into(),
                    ));
                }
                toml::Value::try_from(preset(p)).map_err(|e| Error::Config(e.to_string()))?
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        merge(&mut merged, toml::Value::Table(user));
        merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path, preset_override: Option<Preset>) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&src, preset_override)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
