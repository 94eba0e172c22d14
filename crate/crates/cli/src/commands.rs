use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{anyhow, Context};
use smoothflow::config::{preset_text, Config, PRESETS};
use smoothflow::dynamics::Axis;
use smoothflow::metrics::FuelCoefficients;
use smoothflow::optimizer::optimize;
use smoothflow::simulator::SafetyViolation;
use smoothflow::study::{self, RunOutcome};
use smoothflow::{ControllerKind, ControllerParams, Error, Scenario, TuneResult};

use crate::{plots, Cli, Command, Common};

pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_SAFETY: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        self.code
    }

    fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }

    fn safety(count: usize, first: &SafetyViolation) -> Self {
        Self {
            code: EXIT_SAFETY,
            error: anyhow!(
                "{count} samples below the safe spacing; first: vehicle {} at t={:.1}s with spacing {:.3}m",
                first.vehicle,
                first.time,
                first.spacing
            ),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NumericalBlowup { .. } | Error::SaturatedFuelRate { .. } => EXIT_NUMERICAL,
            _ => EXIT_CONFIG,
        };
        Self { code, error: e.into() }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(common: &Common) -> Result<Config, Failure> {
    let mut overrides = common.overrides.clone();
    if let Some(kind) = common.controller {
        overrides.push(format!("controller.kind=\"{}\"", kind.name()));
    }
    if let Some(dt) = common.dt {
        overrides.push(format!("scenario.dt={dt:?}"));
    }
    if let Some(integrator) = common.integrator {
        let name = match integrator {
            smoothflow::Integrator::Rk4 => "rk4",
            smoothflow::Integrator::Euler => "euler",
        };
        overrides.push(format!("scenario.integrator=\"{name}\""));
    }
    let path = Path::new(&common.scenario);
    let cfg = if !path.exists() && PRESETS.contains(&common.scenario.as_str()) {
        Config::parse_with_overrides(preset_text(&common.scenario)?, &overrides)?
    } else {
        Config::load_with_overrides(path, &overrides)?
    };
    Ok(cfg)
}

fn write_output(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> CmdResult {
    let path = dir.join(name);
    let run = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()
    };
    run()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(Failure::config)
}

pub fn dispatch(cli: &Cli) -> CmdResult {
    let cfg = load_config(&cli.common)?;
    if cli.dump_config {
        print!("{}", cfg.to_toml());
        if cli.command.is_none() {
            return Ok(());
        }
    }
    let Some(command) = &cli.command else {
        return Err(Failure::config(anyhow!(
            "no command given (expected run, tune, sweep or grid)"
        )));
    };
    let out = &cli.common.out;
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))
        .map_err(Failure::config)?;
    let coeffs = cfg.fuel_coefficients()?;
    match command {
        Command::Run => cmd_run(&cfg, &cli.common, &coeffs),
        Command::Tune => cmd_tune(&cfg, &cli.common, &coeffs),
        Command::Sweep { mprs } => cmd_sweep(&cfg, &cli.common, mprs, &coeffs),
        Command::Grid { beta_range, gamma_range } => {
            cmd_grid(&cfg, &cli.common, *beta_range, *gamma_range, &coeffs)
        }
    }
}

fn can_tune(s: &Scenario) -> bool {
    s.controller.kind == ControllerKind::TsOps && !s.av_indices().is_empty()
}

fn tune(cfg: &Config, common: &Common) -> Result<TuneResult, Failure> {
    let scenario = &cfg.scenario;
    let out = &common.out;
    match optimize(scenario, &cfg.optimizer_config()?) {
        Ok(result) => {
            write_output(out, "trace.csv", |w| result.trace.write_csv(w))?;
            let avs = scenario.av_indices();
            write_output(out, "theta_opt.csv", |w| write_theta(w, &avs, &result.per_av))?;
            if common.gnuplot {
                write_output(out, "trace.gp", |w| w.write_all(plots::TRACE.as_bytes()))?;
            }
            Ok(result)
        }
        Err(e) => {
            write_output(out, "trace.csv", |w| e.trace.write_csv(w))?;
            let iters = e.trace.len();
            let mut failure = Failure::from(e.source);
            failure.error = failure.error.context(format!("tuning stopped after {iters} iterations"));
            Err(failure)
        }
    }
}

fn write_theta(w: &mut impl Write, avs: &[usize], params: &[ControllerParams]) -> std::io::Result<()> {
    writeln!(w, "vehicle,beta,gamma")?;
    for (i, p) in avs.iter().zip(params) {
        writeln!(w, "{i},{:.9},{:.9}", p.beta, p.gamma)?;
    }
    Ok(())
}

fn write_safety(w: &mut impl Write, violations: &[SafetyViolation]) -> std::io::Result<()> {
    writeln!(w, "vehicle,t,spacing")?;
    for v in violations {
        writeln!(w, "{},{:.6},{:.6}", v.vehicle, v.time, v.spacing)?;
    }
    Ok(())
}

fn cmd_run(cfg: &Config, common: &Common, coeffs: &FuelCoefficients) -> CmdResult {
    let scenario = &cfg.scenario;
    let tuned = if common.tune_first && can_tune(scenario) {
        Some(tune(cfg, common)?)
    } else {
        None
    };
    let RunOutcome {
        trajectory,
        metrics,
        violations,
    } = study::evaluate(scenario, tuned.as_ref().map(|t| t.per_av.as_slice()), coeffs)?;
    let out = &common.out;
    write_output(out, "trajectory.csv", |w| trajectory.write_csv(w))?;
    write_output(out, "metrics.csv", |w| metrics.write_csv(w))?;
    write_output(out, "safety.csv", |w| write_safety(w, &violations))?;
    if common.gnuplot {
        write_output(out, "trajectory.gp", |w| w.write_all(plots::TRAJECTORY.as_bytes()))?;
    }
    if let Some(t) = &tuned {
        println!("theta: beta={:.6} gamma={:.6}", t.theta.beta, t.theta.gamma);
    }
    println!(
        "platoon ASV {:.6} m/s, fuel {:.3} ml over [{}, {}] s; {} safety violations",
        metrics.platoon_asv,
        metrics.platoon_fuel,
        metrics.window.0,
        metrics.window.1,
        violations.len()
    );
    if trajectory.speed_floor_hits > 0 {
        eprintln!("warning: speed floor engaged {} times", trajectory.speed_floor_hits);
    }
    if !metrics.saturated.is_empty() {
        eprintln!("warning: fuel rate clamped for vehicles {:?}", metrics.saturated);
    }
    if common.strict_safety && !violations.is_empty() {
        return Err(Failure::safety(violations.len(), &violations[0]));
    }
    Ok(())
}

fn cmd_tune(cfg: &Config, common: &Common, coeffs: &FuelCoefficients) -> CmdResult {
    let scenario = &cfg.scenario;
    if scenario.av_indices().is_empty() {
        return Err(Failure::config(anyhow!("no AV to tune (mpr = {})", scenario.mpr)));
    }
    if scenario.controller.kind != ControllerKind::TsOps {
        return Err(Failure::config(anyhow!(
            "only the ts-ops controller can be tuned, got {}",
            scenario.controller.kind.name()
        )));
    }
    let result = tune(cfg, common)?;
    let termination = result.trace.termination.map_or("unknown".to_string(), |t| t.to_string());
    println!(
        "beta={:.6} gamma={:.6} J={:.6} iterations={} ({termination})",
        result.theta.beta,
        result.theta.gamma,
        result.best_j,
        result.trace.len()
    );
    if common.strict_safety {
        let outcome = study::evaluate(scenario, Some(&result.per_av), coeffs)?;
        if let Some(first) = outcome.violations.first() {
            return Err(Failure::safety(outcome.violations.len(), first));
        }
    }
    Ok(())
}

fn cmd_sweep(cfg: &Config, common: &Common, mprs: &[f64], coeffs: &FuelCoefficients) -> CmdResult {
    let tune_cfg = if common.tune_first {
        Some(cfg.optimizer_config()?)
    } else {
        None
    };
    let result = study::sweep(&cfg.scenario, mprs, tune_cfg.as_ref(), coeffs)?;
    write_output(&common.out, "sweep.csv", |w| result.write_csv(w))?;
    if common.gnuplot {
        write_output(&common.out, "sweep.gp", |w| w.write_all(plots::SWEEP.as_bytes()))?;
    }
    println!("mpr    asv      fc         asv_impr%  fc_impr%");
    for r in &result.rows {
        println!(
            "{:<6.2} {:<8.4} {:<10.3} {:<10.2} {:.2}",
            r.mpr, r.asv, r.fc, r.asv_impr_pct, r.fc_impr_pct
        );
    }
    for f in &result.failures {
        eprintln!("mpr {}: {}", f.mpr, f.error);
    }
    if let Some(f) = result.failures.first() {
        let mut failure = Failure::from(f.error.clone());
        failure.error = failure
            .error
            .context(format!("{} of {} sweep points failed", result.failures.len(), mprs.len()));
        return Err(failure);
    }
    let unsafe_rows: Vec<_> = result.rows.iter().filter(|r| r.violations > 0).collect();
    if common.strict_safety && !unsafe_rows.is_empty() {
        let mprs: Vec<String> = unsafe_rows.iter().map(|r| format!("{}", r.mpr)).collect();
        return Err(Failure {
            code: EXIT_SAFETY,
            error: anyhow!("safety violations at mpr {}", mprs.join(", ")),
        });
    }
    Ok(())
}

fn cmd_grid(
    cfg: &Config,
    common: &Common,
    beta: Option<Axis>,
    gamma: Axis,
    coeffs: &FuelCoefficients,
) -> CmdResult {
    let beta = match beta {
        Some(b) => b,
        None => Axis::new(0.0, cfg.scenario.beta_max()?, 11),
    };
    let points = study::grid(&cfg.scenario, beta, gamma, coeffs)?;
    write_output(&common.out, "grid.csv", |w| study::write_grid_csv(&points, w))?;
    if common.gnuplot {
        write_output(&common.out, "grid.gp", |w| w.write_all(plots::GRID.as_bytes()))?;
    }
    if let Some(best) = points.iter().min_by(|a, b| a.asv.total_cmp(&b.asv)) {
        println!(
            "{} points; lowest ASV {:.6} at beta={:.6} gamma={:.6} (fuel {:.3} ml)",
            points.len(),
            best.asv,
            best.beta,
            best.gamma,
            best.fc
        );
    }
    Ok(())
}
