mod commands;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smoothflow::dynamics::Axis;
use smoothflow::{ControllerKind, Integrator};

/// Mixed-traffic platoon simulator with a tunable smoothing controller.
#[derive(Debug, Parser)]
#[command(name = "smoothflow", version, args_conflicts_with_subcommands = false)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    /// Print the effective configuration (after overrides) and exit.
    #[arg(long)]
    pub dump_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file, or a bundled preset name (scenario1, scenario2).
    #[arg(long, global = true, value_name = "PATH", default_value = "scenario1")]
    pub scenario: String,

    /// Output directory (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,

    /// Dotted override such as `controller.beta=0.05`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[arg(long, global = true, value_name = "ts-ops|ts-trc|none")]
    pub controller: Option<ControllerKind>,

    /// Time step in seconds.
    #[arg(long, global = true)]
    pub dt: Option<f64>,

    #[arg(long, global = true, value_name = "rk4|euler")]
    pub integrator: Option<Integrator>,

    /// Tune the controller parameters before running.
    #[arg(long, global = true)]
    pub tune_first: bool,

    /// Exit with status 3 if any spacing drops below the safe minimum.
    #[arg(long, global = true)]
    pub strict_safety: bool,

    /// Also write gnuplot scripts next to the CSV files.
    #[arg(long, global = true)]
    pub gnuplot: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate once; writes trajectory.csv, metrics.csv and safety.csv.
    Run,
    /// Select the controller parameters; writes trace.csv and theta_opt.csv.
    Tune,
    /// Metrics over a list of AV penetration rates; writes sweep.csv.
    Sweep {
        /// Comma-separated penetration rates.
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")]
        mprs: Vec<f64>,
    },
    /// Metrics over a beta x gamma grid; writes grid.csv.
    Grid {
        /// `lo:hi:n`; defaults to `0:beta_max:11`.
        #[arg(long, value_parser = parse_axis)]
        beta_range: Option<Axis>,
        #[arg(long, value_parser = parse_axis, default_value = "0.5:1.5:11")]
        gamma_range: Axis,
    },
}

fn parse_axis(text: &str) -> Result<Axis, String> {
    let parts: Vec<&str> = text.split(':').collect();
    let [lo, hi, n] = parts.as_slice() else {
        return Err(format!("expected lo:hi:n, got `{text}`"));
    };
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad lower bound `{lo}`: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad upper bound `{hi}`: {e}"))?;
    let n: usize = n.trim().parse().map_err(|e| format!("bad count `{n}`: {e}"))?;
    if n == 0 {
        return Err("count must be at least 1".into());
    }
    Ok(Axis::new(lo, hi, n))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { commands::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {failure:#}");
            ExitCode::from(failure.exit_code())
        }
    }
}
