//! `vader` command-line tool.
//!
//! Exit codes: 0 success, 1 domain error (bad input data, infeasible request), 2 usage error
//! (unknown flag, bad configuration).

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::{env_overrides, parse_override, Config, Overrides};

#[derive(Debug, Parser)]
#[command(name = "vader", version, about = "Dual-arm pepper harvesting: pose fitting, planning, simulation and teleoperation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set exec.planner.lambda_fk=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Line-delimited JSON logs on stderr.
    #[arg(long, global = true)]
    pub log_json: bool,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a superellipsoid to a fruit cloud and build the fine pose.
    Fit(FitArgs),
    /// Generate grasp (or cut) candidates around a fitted fruit and pick one.
    PlanGrasp(PlanGraspArgs),
    /// Joint-space RRT* between two configurations of one arm.
    Plan(PlanArgs),
    /// Run one simulated harvest.
    Harvest(HarvestArgs),
    /// Run the seeded batch reachability study.
    Batch(BatchArgs),
    /// Start the teleoperation server.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Fruit points, CSV `x,y,z`.
    #[arg(long)]
    pub fruit: PathBuf,
    /// Peduncle points, CSV `x,y,z`.
    #[arg(long)]
    pub peduncle: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmArg {
    Gripper,
    Cutter,
}

impl From<ArmArg> for vader_harvest::ArmId {
    fn from(a: ArmArg) -> Self {
        match a {
            ArmArg::Gripper => vader_harvest::ArmId::Gripper,
            ArmArg::Cutter => vader_harvest::ArmId::Cutter,
        }
    }
}

#[derive(Debug, Args)]
pub struct PlanGraspArgs {
    /// Output of `vader fit`.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum, default_value = "gripper")]
    pub arm: ArmArg,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value = "gripper")]
    pub arm: ArmArg,
    /// Comma-separated joint angles; the arm's home configuration when absent.
    #[arg(long, allow_hyphen_values = true)]
    pub start: Option<String>,
    /// Comma-separated joint angles.
    #[arg(long, allow_hyphen_values = true)]
    pub goal: String,
    /// Place the division wall at this x (m).
    #[arg(long, allow_hyphen_values = true)]
    pub wall: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Policy {
    Parallel,
    Sequential,
}

#[derive(Debug, Args)]
pub struct HarvestArgs {
    /// Scene JSON (overrides the `scene` config key).
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum)]
    pub policy: Option<Policy>,
    /// Harvest log JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Planned motions of both arms as JSON.
    #[arg(long)]
    pub trajectory: Option<PathBuf>,
    /// Arm states at the control rate as line-delimited `state` messages.
    #[arg(long)]
    pub events: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    #[arg(long)]
    pub scene: Option<PathBuf>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report JSON; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Success-vs-position histogram CSV.
    #[arg(long)]
    pub hist: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Control loop rate (Hz).
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Drive the arms with an autonomous harvest of this trial seed.
    #[arg(long)]
    pub harvest_seed: Option<u64>,
    /// Directory of console assets served at `/`.
    #[arg(long = "static")]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    pub fn domain(e: impl std::fmt::Display) -> Self {
        CliError::Domain(e.to_string())
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

/// Provenance record written with every run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'static str,
    pub seed: Option<u64>,
    pub config_hash: String,
}

impl RunManifest {
    pub fn new(command: &'static str, seed: Option<u64>, cfg: &Config) -> Self {
        Self {
            tool: "vader",
            version: env!("CARGO_PKG_VERSION"),
            command,
            seed,
            config_hash: cfg.hash(),
        }
    }
}

/// Flag-layer overrides implied by subcommand options.
fn flag_overrides(cli: &Cli) -> Result<Overrides, CliError> {
    let mut out = Overrides::new();
    for s in &cli.set {
        out.push(parse_override(s)?);
    }
    let mut scene = None;
    match &cli.command {
        Command::Harvest(a) => {
            scene = a.scene.as_ref();
            if let Some(p) = a.policy {
                out.push(("exec.parallel".into(), (p == Policy::Parallel).to_string()));
            }
        }
        Command::Batch(a) => {
            scene = a.scene.as_ref();
            if let Some(n) = a.trials {
                out.push(("batch.trials".into(), n.to_string()));
            }
            if let Some(s) = a.seed {
                out.push(("batch.base_seed".into(), s.to_string()));
            }
        }
        Command::Serve(a) => {
            scene = a.scene.as_ref();
            if let Some(r) = a.rate {
                out.push(("control.rate_hz".into(), format!("{r:?}")));
            }
        }
        _ => {}
    }
    if let Some(p) = scene {
        out.push(("scene".into(), format!("{:?}", p.display().to_string())));
    }
    Ok(out)
}

fn init_logging(cli: &Cli) {
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let mut b = env_logger::Builder::new();
    b.filter_level(level).parse_env("VADER_LOG_FILTER");
    if cli.log_json {
        b.format(|buf, rec| {
            let line = serde_json::json!({
                "level": rec.level().as_str(),
                "target": rec.target(),
                "msg": rec.args().to_string(),
            });
            writeln!(buf, "{line}")
        });
    }
    let _ = b.try_init();
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(&cli);
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    let flags = flag_overrides(cli)?;
    let env = env_overrides(std::env::vars().filter(|(k, _)| k != "VADER_LOG_FILTER"));
    let cfg = Config::load(cli.config.as_deref(), &env, &flags)?;
    match &cli.command {
        Command::Fit(a) => commands::fit(&cfg, a),
        Command::PlanGrasp(a) => commands::plan_grasp(&cfg, a),
        Command::Plan(a) => commands::plan(&cfg, a),
        Command::Harvest(a) => commands::harvest(&cfg, a),
        Command::Batch(a) => commands::batch(&cfg, a),
        Command::Serve(a) => commands::serve(&cfg, a),
    }
}
