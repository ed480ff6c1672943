//! Running a configured experiment and writing its artifacts.
//!
//! Everything is computed before the output directory is touched, so a run
//! that fails leaves no partial files behind.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aao::{observe_state, run_aao, run_llg_solver, AaoOptions, LlgSolverOptions, Truth};
use crate::config::{ExperimentConfig, Mode, ObservationSpec};
use crate::error::{Error, Result};
use crate::expr::{sample_field, sample_slice, sample_space, sample_time};
use crate::field::{write_field_csv, write_snapshot, Field3, Grid};
use crate::kaczmarz::{run_kaczmarz_data, run_kaczmarz_time, run_reduced, ReducedOptions};
use crate::model::{AlphaPair, LlgProblem, ModelCoefficients, ObservationSetup, VoltageSeries};
use crate::physical::{simulate_physical, PhysicalScaling, PhysicalSetup};
use crate::regularization::{apply_perturbation, noise_inject, IterationLog, NoiseDistribution};

fn as_config<T>(r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    })
}

/// A fully sampled forward problem.
#[derive(Debug, Clone)]
pub struct Setup {
    pub problem: LlgProblem,
    pub alpha_exact: AlphaPair,
    pub m_exact: Option<Field3>,
    pub obs: ObservationSetup,
}

pub fn build_observation(spec: &ObservationSpec, grid: Grid) -> Result<ObservationSetup> {
    let obs = ObservationSetup {
        mu0: spec.mu0,
        transfer: spec.transfer.iter().map(|s| sample_time(grid, s)).collect::<Result<_>>()?,
        concentrations: spec
            .concentrations
            .iter()
            .map(|s| sample_space(grid, s))
            .collect::<Result<_>>()?,
        sensitivities: spec
            .sensitivities
            .iter()
            .map(|s| sample_slice(grid, s))
            .collect::<Result<_>>()?,
    };
    as_config(obs.validate(&grid))?;
    Ok(obs)
}

pub fn build_setup(cfg: &ExperimentConfig) -> Result<Setup> {
    let spec = cfg
        .problem
        .as_ref()
        .ok_or_else(|| Error::Config("no [problem] section and no preset".into()))?;
    let g = cfg.grid;
    let grid = as_config(Grid::new(g.nt, g.nx, g.t_end, g.x_min, g.x_max))?;
    let h = sample_field(grid, &spec.h)?;
    let m0 = sample_slice(grid, &spec.m0)?;
    let problem = as_config(
        LlgProblem::new(m0, h, ModelCoefficients { lambda: spec.lambda })
            .and_then(|p| p.with_closure(spec.closure)),
    )?;
    let m_exact = spec.m_exact.as_ref().map(|s| sample_field(grid, s)).transpose()?;
    Ok(Setup {
        problem,
        alpha_exact: AlphaPair::new(spec.alpha[0], spec.alpha[1]),
        m_exact,
        obs: build_observation(&cfg.observation, grid)?,
    })
}

/// Measured voltages together with the perturbation added to them.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSet {
    pub data: VoltageSeries,
    pub perturbation: Vec<Vec<f64>>,
    pub level: f64,
    pub seed: u64,
    pub distribution: NoiseDistribution,
}

/// Exact observation of `m_exact` with seeded noise.
pub fn synthesize_data(cfg: &ExperimentConfig, setup: &Setup) -> Result<DataSet> {
    let exact = setup
        .m_exact
        .as_ref()
        .ok_or_else(|| Error::Config("synthetic data need problem.m_exact".into()))?;
    let m_hat = exact.zip_map(&setup.problem.total_state(&Field3::zeros(*exact.grid())), |a, b| {
        crate::vec3::sub(a, b)
    });
    let y = observe_state(&m_hat, &setup.obs)?;
    let noisy = as_config(noise_inject(&y, cfg.noise.level, cfg.seed, cfg.noise.distribution))?;
    Ok(DataSet {
        data: noisy.data,
        perturbation: noisy.perturbation,
        level: cfg.noise.level,
        seed: cfg.seed,
        distribution: cfg.noise.distribution,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ChannelEntry {
    index: usize,
    k: usize,
    l: usize,
    file: String,
    delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    level: f64,
    seed: u64,
    distribution: NoiseDistribution,
    grid: Grid,
    channels: Vec<ChannelEntry>,
}

/// Writes `channel_<c>.csv` (columns `t, y, e`) and `manifest.json`.
pub fn write_data(dir: &Path, set: &DataSet, n_coils: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let g = set.data.grid;
    let mut channels = Vec::new();
    for (c, (y, e)) in set.data.channels.iter().zip(&set.perturbation).enumerate() {
        let file = format!("channel_{c}.csv");
        let mut w = csv::Writer::from_path(dir.join(&file))?;
        w.write_record(["t", "y", "e"])?;
        for n in 0..g.nt {
            w.write_record(&[g.t(n).to_string(), y[n].to_string(), e[n].to_string()])?;
        }
        w.flush()?;
        channels.push(ChannelEntry {
            index: c,
            k: c / n_coils,
            l: c % n_coils,
            file,
            delta: set.data.delta[c],
        });
    }
    let manifest = Manifest {
        level: set.level,
        seed: set.seed,
        distribution: set.distribution,
        grid: g,
        channels,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Reads a directory written by [`write_data`].
pub fn read_data(dir: &Path, grid: Grid) -> Result<DataSet> {
    let src = fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::Config(format!("cannot read data manifest in {}: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_str(&src).map_err(|e| Error::Config(e.to_string()))?;
    if m.grid != grid {
        return Err(Error::Config("data grid differs from the configured grid".into()));
    }
    let mut channels = Vec::new();
    let mut perturbation = Vec::new();
    for ch in &m.channels {
        let mut r = csv::Reader::from_path(dir.join(&ch.file))?;
        let (mut y, mut e) = (Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Config(format!("bad number in {}", ch.file)))
            };
            y.push(num(1)?);
            e.push(num(2)?);
        }
        if y.len() != grid.nt {
            return Err(Error::Config(format!("{} has {} rows, expected {}", ch.file, y.len(), grid.nt)));
        }
        channels.push(y);
        perturbation.push(e);
    }
    Ok(DataSet {
        data: VoltageSeries {
            grid,
            channels,
            delta: m.channels.iter().map(|c| c.delta).collect(),
        },
        perturbation,
        level: m.level,
        seed: m.seed,
        distribution: m.distribution,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalSummary {
    pub scaling: PhysicalScaling,
    pub angle_start_deg: f64,
    pub angle_end_deg: f64,
    pub max_length_deviation: f64,
    pub angle_deg: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mode: Mode,
    pub seed: u64,
    pub grid: Grid,
    pub iterations: Option<usize>,
    pub stop: Option<String>,
    pub res_llg: Option<f64>,
    pub res_obs: Option<f64>,
    pub rel_err_m: Option<f64>,
    pub alpha: Option<[f64; 2]>,
    pub alpha_exact: Option<[f64; 2]>,
    pub e_alpha: Option<[f64; 2]>,
    pub inner_loops: Option<usize>,
    pub noise_level: Option<f64>,
    pub delta: Option<Vec<f64>>,
    pub tau: Option<f64>,
    pub physical: Option<PhysicalSummary>,
    pub wall_time_s: f64,
}

impl Summary {
    fn new(mode: Mode, seed: u64, grid: Grid) -> Self {
        Summary {
            mode,
            seed,
            grid,
            iterations: None,
            stop: None,
            res_llg: None,
            res_obs: None,
            rel_err_m: None,
            alpha: None,
            alpha_exact: None,
            e_alpha: None,
            inner_loops: None,
            noise_level: None,
            delta: None,
            tau: None,
            physical: None,
            wall_time_s: 0.0,
        }
    }

    /// Fills the residual and parameter fields from the log's last row.
    fn from_log(&mut self, log: &IterationLog, exact: Option<AlphaPair>) {
        if let Some(r) = log.last() {
            self.res_llg = Some(r.res_llg);
            self.res_obs = Some(r.res_obs);
            self.rel_err_m = r.rel_err_m;
            if let Some(a) = exact {
                self.alpha = Some([r.alpha1, r.alpha2]);
                self.alpha_exact = Some(a.as_array());
                self.e_alpha = Some([(r.alpha1 - a.alpha1).abs(), (r.alpha2 - a.alpha2).abs()]);
            }
        }
        if log.records().iter().any(|r| r.inner_loops.is_some()) {
            self.inner_loops = Some(log.total_inner_loops());
        }
    }
}

/// Everything a run produces, held in memory until it is written.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: Summary,
    pub log: Option<IterationLog>,
    /// Total magnetization.
    pub state: Option<Field3>,
    pub data: Option<(DataSet, usize)>,
}

fn stop_name(s: crate::aao::StopReason) -> String {
    serde_json::to_value(s)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

fn load_data(cfg: &ExperimentConfig, setup: &Setup) -> Result<DataSet> {
    let set = match &cfg.noise.data {
        Some(dir) => read_data(dir, *setup.problem.grid())?,
        None => synthesize_data(cfg, setup)?,
    };
    as_config(set.data.check_channels(setup.obs.n_channels()))?;
    Ok(set)
}

fn run_physical(cfg: &ExperimentConfig, mode: Mode) -> Result<RunOutput> {
    let p = &cfg.physical;
    let grid = as_config(Grid::new(p.nt, p.nx, 1.0, p.x_min, p.x_max))?;
    as_config(p.step.validate())?;
    let setup = PhysicalSetup {
        params: p.params,
        duration: p.duration,
        field_strength: p.field_strength,
        field_shape: sample_field(grid, &p.field)?,
        m_init: sample_slice(grid, &p.m_init)?,
        solver: LlgSolverOptions {
            step: p.step,
            max_iterations: p.max_iterations,
            norm: Default::default(),
            tolerance: None,
        },
    };
    as_config(crate::physical::physical_scaling(&p.params, p.duration, p.field_strength))?;
    let out = simulate_physical(&setup)?;
    let mut summary = Summary::new(mode, cfg.seed, grid);
    summary.iterations = Some(out.solve.iterations);
    summary.stop = Some(stop_name(out.solve.stop));
    summary.from_log(&out.solve.log, None);
    summary.physical = Some(PhysicalSummary {
        scaling: out.scaling,
        angle_start_deg: out.angle[0],
        angle_end_deg: *out.angle.last().expect("nt >= 3"),
        max_length_deviation: out.max_length_deviation,
        angle_deg: out.angle.clone(),
    });
    Ok(RunOutput {
        summary,
        log: Some(out.solve.log),
        state: Some(out.m),
        data: None,
    })
}

/// Runs `mode` on `cfg` without writing anything.
pub fn run(cfg: &ExperimentConfig, mode: Mode) -> Result<RunOutput> {
    let start = Instant::now();
    if mode == Mode::SimulatePhysical {
        let mut out = run_physical(cfg, mode)?;
        out.summary.wall_time_s = start.elapsed().as_secs_f64();
        return Ok(out);
    }
    let setup = build_setup(cfg)?;
    let grid = *setup.problem.grid();
    let truth = Truth {
        m: setup.m_exact.as_ref(),
    };
    let mut summary = Summary::new(mode, cfg.seed, grid);
    let init_alpha = cfg
        .init
        .alpha
        .map(|a| AlphaPair::new(a[0], a[1]))
        .unwrap_or(AlphaPair::new(setup.alpha_exact.alpha1 + 0.05, setup.alpha_exact.alpha2 + 0.05));

    let mut out = match mode {
        Mode::SolveLlg => {
            as_config(cfg.solver.step.validate())?;
            let init = sample_field(grid, &cfg.solver.init)?;
            let opts = LlgSolverOptions {
                step: cfg.solver.step,
                max_iterations: cfg.solver.max_iterations,
                norm: cfg.solver.norm,
                tolerance: cfg.solver.tolerance,
            };
            let s = run_llg_solver(&setup.problem, setup.alpha_exact, &init, &opts, truth)?;
            summary.iterations = Some(s.iterations);
            summary.stop = Some(stop_name(s.stop));
            summary.from_log(&s.log, None);
            RunOutput {
                summary,
                state: Some(setup.problem.total_state(&s.m_hat)),
                log: Some(s.log),
                data: None,
            }
        }
        Mode::MakeData => {
            let set = synthesize_data(cfg, &setup)?;
            summary.noise_level = Some(set.level);
            summary.delta = Some(set.data.delta.clone());
            RunOutput {
                summary,
                log: None,
                state: None,
                data: Some((set, setup.obs.n_coils())),
            }
        }
        Mode::IdentifyAao
        | Mode::IdentifyReduced
        | Mode::IdentifyKaczmarzTime
        | Mode::IdentifyKaczmarzData => {
            as_config(cfg.stopping.validate())?;
            let set = load_data(cfg, &setup)?;
            let init_m = sample_field(grid, &cfg.init.m_hat)?;
            summary.noise_level = Some(set.level);
            summary.delta = Some(set.data.delta.clone());
            summary.tau = Some(cfg.stopping.tau);
            let (log, m_hat, iterations, stop) = if mode == Mode::IdentifyAao {
                as_config(cfg.aao.step.validate())?;
                let opts = AaoOptions {
                    step: cfg.aao.step,
                    stopping: cfg.stopping,
                };
                let s = run_aao(&setup.problem, &setup.obs, &set.data, &init_m, init_alpha, &opts, truth)?;
                (s.log, s.m_hat, s.iterations, s.stop)
            } else {
                let opts = ReducedOptions {
                    mu: cfg.reduced.mu,
                    stopping: cfg.stopping,
                    inner: cfg.inner,
                };
                let (p, obs, d) = (&setup.problem, &setup.obs, &set.data);
                // the state solver always starts from m_init = m0
                let init_m = Field3::zeros(grid);
                let r = match mode {
                    Mode::IdentifyReduced => run_reduced(p, obs, d, init_alpha, &init_m, &opts, truth),
                    Mode::IdentifyKaczmarzTime => run_kaczmarz_time(
                        p,
                        obs,
                        d,
                        Some(&set.perturbation),
                        cfg.kaczmarz.segments,
                        init_alpha,
                        &init_m,
                        &opts,
                        truth,
                    ),
                    _ => run_kaczmarz_data(p, obs, d, cfg.kaczmarz.order.as_deref(), init_alpha, &init_m, &opts, truth),
                }
                .map_err(|e| match e {
                    Error::InvalidParameter(_) | Error::InvalidGrid(_) => Error::Config(e.to_string()),
                    other => other,
                })?;
                (r.log, r.m_hat, r.iterations, r.stop)
            };
            summary.iterations = Some(iterations);
            summary.stop = Some(stop_name(stop));
            summary.from_log(&log, Some(setup.alpha_exact));
            RunOutput {
                summary,
                state: Some(setup.problem.total_state(&m_hat)),
                log: Some(log),
                data: None,
            }
        }
        Mode::SimulatePhysical => unreachable!("handled above"),
    };
    out.summary.wall_time_s = start.elapsed().as_secs_f64();
    Ok(out)
}

/// Writes `summary.json` and, when present, `iteration_log.csv`,
/// `state.llgf`, `state.csv` and the data files.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    if let Some(log) = &out.log {
        let p = dir.join("iteration_log.csv");
        log.write_csv(&p)?;
        written.push(p);
    }
    if let Some(m) = &out.state {
        let p = dir.join("state.llgf");
        write_snapshot(&p, m)?;
        written.push(p);
        let p = dir.join("state.csv");
        write_field_csv(&p, m)?;
        written.push(p);
    }
    if let Some((set, n_coils)) = &out.data {
        write_data(dir, set, *n_coils)?;
        written.push(dir.join("manifest.json"));
    }
    let p = dir.join("summary.json");
    let json = serde_json::to_string_pretty(&out.summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&p, json)?;
    written.push(p);
    Ok(written)
}

/// Runs and then writes the artifacts into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, mode: Mode, dir: &Path) -> Result<Summary> {
    let out = run(cfg, mode)?;
    write_outputs(dir, &out)?;
    Ok(out.summary)
}

/// Removes the recorded perturbation from a data set.
pub fn exact_part(set: &DataSet) -> VoltageSeries {
    let neg: Vec<Vec<f64>> = set.perturbation.iter().map(|e| e.iter().map(|v| -v).collect()).collect();
    let mut y = apply_perturbation(&set.data, &neg);
    y.delta = vec![0.0; y.channels.len()];
    y
}
