//! Multi-run workflows: single evaluations, MPR sweeps and parameter grids.
//! Sweep and grid points are independent and run on the rayon pool.

use rayon::prelude::*;

use crate::controller::ControllerParams;
use crate::dynamics::Axis;
use crate::error::{Error, Result};
use crate::metrics::{summarize, FuelCoefficients, MetricsReport};
use crate::optimizer::{optimize, OptimizerConfig};
use crate::simulator::{check_safety, ControllerKind, SafetyViolation, Scenario, Simulator, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub metrics: MetricsReport,
    pub violations: Vec<SafetyViolation>,
}

/// Simulates once, optionally with per-AV parameters, then scores and audits.
pub fn evaluate(
    scenario: &Scenario,
    per_av: Option<&[ControllerParams]>,
    coeffs: &FuelCoefficients,
) -> Result<RunOutcome> {
    let mut sim = Simulator::new(scenario)?;
    if let Some(params) = per_av {
        sim = sim.with_av_params(params)?;
    }
    let trajectory = sim.run()?.trajectory;
    let metrics = summarize(&trajectory, scenario, coeffs)?;
    let violations = check_safety(&trajectory, scenario.min_safe_spacing);
    Ok(RunOutcome {
        trajectory,
        metrics,
        violations,
    })
}

/// Percentage reduction of `value` relative to `base`.
pub fn improvement_pct(base: f64, value: f64) -> f64 {
    if base == 0.0 {
        0.0
    } else {
        100.0 * (base - value) / base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mpr: f64,
    pub asv: f64,
    pub fc: f64,
    pub asv_impr_pct: f64,
    pub fc_impr_pct: f64,
    /// Parameters used at this MPR when tuned first.
    pub theta: Option<ControllerParams>,
    pub violations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepFailure {
    pub mpr: f64,
    pub error: Error,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub baseline: MetricsReport,
    pub rows: Vec<SweepRow>,
    pub failures: Vec<SweepFailure>,
}

impl SweepResult {
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "mpr,asv,fc,asv_impr_pct,fc_impr_pct")?;
        for r in &self.rows {
            writeln!(
                out,
                "{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.mpr, r.asv, r.fc, r.asv_impr_pct, r.fc_impr_pct
            )?;
        }
        Ok(())
    }

    pub fn row(&self, mpr: f64) -> Option<&SweepRow> {
        self.rows.iter().find(|r| (r.mpr - mpr).abs() < 1e-9)
    }
}

/// Runs every MPR (tuning the smoothing controller first if `tune` is
/// given) and reports improvements over the all-human platoon. Failures at
/// individual MPRs are collected rather than aborting the sweep; a failed
/// baseline is an error.
pub fn sweep(
    scenario: &Scenario,
    mprs: &[f64],
    tune: Option<&OptimizerConfig>,
    coeffs: &FuelCoefficients,
) -> Result<SweepResult> {
    if let Some(bad) = mprs.iter().find(|m| !(0.0..=1.0).contains(*m)) {
        return Err(Error::Domain(format!("mpr {bad} outside [0, 1]")));
    }
    let baseline = evaluate(&scenario.with_mpr(0.0), None, coeffs)?.metrics;
    let results: Vec<_> = mprs
        .par_iter()
        .map(|&mpr| sweep_point(scenario, mpr, tune, coeffs, &baseline).map_err(|error| SweepFailure { mpr, error }))
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(f) => failures.push(f),
        }
    }
    Ok(SweepResult {
        baseline,
        rows,
        failures,
    })
}

fn sweep_point(
    scenario: &Scenario,
    mpr: f64,
    tune: Option<&OptimizerConfig>,
    coeffs: &FuelCoefficients,
    baseline: &MetricsReport,
) -> Result<SweepRow> {
    let s = scenario.with_mpr(mpr);
    let has_av = !s.av_indices().is_empty();
    let tuned = match tune {
        Some(cfg) if has_av && s.controller.kind == ControllerKind::TsOps => {
            Some(optimize(&s, cfg).map_err(|e| e.source)?)
        }
        _ => None,
    };
    let outcome = match &tuned {
        Some(t) => evaluate(&s, Some(&t.per_av), coeffs)?,
        None => evaluate(&s, None, coeffs)?,
    };
    let m = &outcome.metrics;
    Ok(SweepRow {
        mpr,
        asv: m.platoon_asv,
        fc: m.platoon_fuel,
        asv_impr_pct: improvement_pct(baseline.platoon_asv, m.platoon_asv),
        fc_impr_pct: improvement_pct(baseline.platoon_fuel, m.platoon_fuel),
        theta: tuned.map(|t| t.theta),
        violations: outcome.violations.len(),
    })
}

/// Relative slack on the grid's upper `beta` before it counts as infeasible.
pub const BETA_ROUNDING: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub beta: f64,
    pub gamma: f64,
    pub asv: f64,
    pub fc: f64,
}

pub fn write_grid_csv<W: std::io::Write>(points: &[GridPoint], mut out: W) -> std::io::Result<()> {
    writeln!(out, "beta,gamma,asv,fc")?;
    for p in points {
        writeln!(out, "{:.6},{:.6},{:.6},{:.6}", p.beta, p.gamma, p.asv, p.fc)?;
    }
    Ok(())
}

/// Platoon metrics over a `beta x gamma` grid, beta-major.
pub fn grid(scenario: &Scenario, beta: Axis, gamma: Axis, coeffs: &FuelCoefficients) -> Result<Vec<GridPoint>> {
    if scenario.av_indices().is_empty() {
        return Err(Error::Domain("grid needs at least one AV".into()));
    }
    let beta_max = scenario.beta_max()?;
    for (name, axis) in [("beta", &beta), ("gamma", &gamma)] {
        if !(axis.lo.is_finite() && axis.hi.is_finite() && axis.lo >= 0.0 && axis.lo <= axis.hi && axis.n >= 1) {
            return Err(Error::Domain(format!(
                "{name} range {}:{}:{} must satisfy 0 <= lo <= hi, n >= 1",
                axis.lo, axis.hi, axis.n
            )));
        }
    }
    // A rounded ceiling (e.g. four significant digits) is accepted and clamped.
    if beta.hi > beta_max * (1.0 + BETA_ROUNDING) {
        return Err(Error::Domain(format!(
            "beta range upper end {} exceeds the safe ceiling {beta_max:.6}",
            beta.hi
        )));
    }
    let mut s = scenario.clone();
    s.controller.kind = ControllerKind::TsOps;
    let pairs: Vec<(f64, f64)> = beta
        .points()
        .map(|b| b.min(beta_max))
        .flat_map(|b| gamma.points().map(move |g| (b, g)))
        .collect();
    pairs
        .par_iter()
        .map(|&(b, g)| {
            let m = evaluate(&s.with_params(ControllerParams::new(b, g)), None, coeffs)?.metrics;
            Ok(GridPoint {
                beta: b,
                gamma: g,
                asv: m.platoon_asv,
                fc: m.platoon_fuel,
            })
        })
        .collect()
}
