//! `virtlab`: headless front end of the virtual ODMR lab.

mod commands;

use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser, Debug)]
#[command(name = "virtlab", version, about = "Deterministic virtual ODMR laboratory")]
pub struct Cli {
    /// Lab configuration file (TOML)
    #[arg(long, global = true, env = "VIRTLAB_CONFIG", hide_env_values = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override the configuration seed
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Directory for run records
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Confocal optics calculations
    #[command(subcommand)]
    Optics(OpticsCmd),
    /// Compile, render or validate a pulse sequence
    #[command(subcommand)]
    Seq(SeqCmd),
    /// Run a protocol and save its record
    Run {
        /// confocal_map, cw_odmr, rabi, pi_calibration, t1, ramsey or hahn_echo
        protocol: String,
        /// Protocol parameter as key=value (repeatable)
        #[arg(long = "param", value_name = "K=V")]
        params: Vec<String>,
    },
    /// Re-run a record and compare its derived values
    Replay {
        /// Record directory
        record: PathBuf,
    },
    /// Start the control service
    Serve {
        /// Listen address, overrides service.endpoint
        #[arg(long, value_name = "ADDR")]
        endpoint: Option<String>,
        /// Directory of operator UI assets, overrides service.static_dir
        #[arg(long, value_name = "DIR")]
        static_dir: Option<PathBuf>,
    },
    /// Fit a model to a trace file or record
    Fit {
        /// trace.csv or a record directory
        trace: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        /// x column (default: first)
        #[arg(long, value_name = "NAME")]
        x: Option<String>,
        /// y column (default: last)
        #[arg(long, value_name = "NAME")]
        y: Option<String>,
        /// Initial parameters, comma separated
        #[arg(long, value_name = "P1,P2,..", value_delimiter = ',')]
        init: Option<Vec<f64>>,
    },
}

#[derive(Subcommand, Debug)]
pub enum OpticsCmd {
    /// Collection bound, resolution and pinhole matching for the configured optics
    Report {
        /// Print key=value lines (lengths in nm)
        #[arg(long)]
        kv: bool,
    },
}

#[derive(Subcommand, Debug)]
pub enum SeqCmd {
    /// Compile and print a summary
    Compile(SeqArgs),
    /// Compile and print the edge timing listing
    Render(SeqArgs),
    /// Compile and check against the pulser constraints
    Validate(SeqArgs),
}

#[derive(Args, Debug)]
pub struct SeqArgs {
    /// t1, t1_alternating, rabi, ramsey, hahn_echo, pi_calibration or xy8
    pub kind: String,
    /// First swept value (s)
    #[arg(long, default_value_t = 0.0)]
    pub start: f64,
    /// Last swept value (s)
    #[arg(long, default_value_t = 1e-6)]
    pub stop: f64,
    /// Number of sweep points
    #[arg(long, default_value_t = 11)]
    pub points: usize,
    /// Pi pulse duration (s)
    #[arg(long, default_value_t = 100e-9)]
    pub pi: f64,
    /// Repetitions
    #[arg(long, default_value_t = 1)]
    pub repeats: u32,
    #[arg(long, value_enum, default_value_t = SyncArg::Method2)]
    pub sync: SyncArg,
    #[arg(long, value_enum, default_value_t = AvgArg::Pn)]
    pub averaging: AvgArg,
    /// Equal laser-to-laser period for every block
    #[arg(long)]
    pub constant_period: bool,
    /// Alternate a final 3pi/2 pulse
    #[arg(long)]
    pub alternate: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum SyncArg {
    Method1,
    Method2,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
pub enum AvgArg {
    Np,
    Pn,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
#[value(rename_all = "snake_case")]
pub enum ModelArg {
    LorentzianMulti,
    ExpDecay,
    DampedCosine,
}

/// Failure reported as `error: <code>: <message>`.
pub struct Failure {
    pub code: String,
    pub message: String,
    pub exit: u8,
}

impl Failure {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self { code: code.into(), message: message.into(), exit: 1 }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::from(if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand { 2 } else { 0 });
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ").trim();
            eprintln!("error: usage: {first}");
            return ExitCode::from(2);
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}: {}", f.code, f.message.replace('\n', " "));
            ExitCode::from(f.exit)
        }
    }
}
