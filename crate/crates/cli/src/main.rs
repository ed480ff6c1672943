use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use llg_inverse::config::{ExperimentConfig, Mode, Preset};
use llg_inverse::experiment::run_experiment;
use llg_inverse::Error;

#[derive(Parser)]
#[command(name = "llgid", version, about = "LLG solver and damping-parameter identification")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured RNG seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (default: out/<mode>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// test1, test2, test3 or physical.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Landweber LLG solver with the parameters held fixed.
    SolveLlg,
    /// Joint identification of state and parameters.
    IdentifyAao,
    /// Parameter identification through the parameter-to-state map.
    IdentifyReduced,
    /// Kaczmarz sweeps over time segments.
    IdentifyKaczmarzTime,
    /// Kaczmarz sweeps over measurement channels.
    IdentifyKaczmarzData,
    /// Relaxation run with physical material parameters.
    SimulatePhysical,
    /// Writes synthetic voltage data.
    MakeData,
}

impl Command {
    fn mode(self) -> Mode {
        match self {
            Command::SolveLlg => Mode::SolveLlg,
            Command::IdentifyAao => Mode::IdentifyAao,
            Command::IdentifyReduced => Mode::IdentifyReduced,
            Command::IdentifyKaczmarzTime => Mode::IdentifyKaczmarzTime,
            Command::IdentifyKaczmarzData => Mode::IdentifyKaczmarzData,
            Command::SimulatePhysical => Mode::SimulatePhysical,
            Command::MakeData => Mode::MakeData,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) => "config",
        Error::Divergence { .. } => "divergence",
        Error::Io(_) | Error::Csv(_) => "io",
        _ => "numerical",
    }
}

fn load(cli: &Cli, mode: Mode) -> Result<ExperimentConfig, Error> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p, preset)?,
        None => ExperimentConfig::from_toml_str("", preset)?,
    };
    if let Some(m) = cfg.mode {
        if m != mode {
            return Err(Error::Config(format!(
                "config mode {} conflicts with subcommand {}",
                m.name(),
                mode.name()
            )));
        }
    }
    cfg.mode = Some(mode);
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = cli.command.mode();
    let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("out").join(mode.name()));
    let result = load(&cli, mode).and_then(|cfg| run_experiment(&cfg, mode, &out));
    match result {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = exit_code(&e);
            let record = serde_json::json!({
                "error": kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{record}");
            ExitCode::from(code)
        }
    }
}
