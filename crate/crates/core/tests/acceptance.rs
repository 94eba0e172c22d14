//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

mod common;

use std::process::ExitCode;

use common::{preset, rel_err, short_instance, ReplayedObjective};
use smoothflow::controller::{validate_controller_conditions, ControllerBox};
use smoothflow::dynamics::{rdc_check, SampleGrid};
use smoothflow::metrics::FuelCoefficients;
use smoothflow::optimizer::{evaluate, optimize, SensitivityKind, Termination};
use smoothflow::simulator::simulate;
use smoothflow::study::{self, SweepResult};
use smoothflow::{
    ControllerKind, ControllerParams, IdmParams, LeadProfile, ModelKind, OptimizerConfig, OvrvParams, Scenario,
    SmoothingLaw, TuneResult,
};

const MPRS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

struct Report {
    failures: usize,
}

impl Report {
    fn check(&mut self, id: usize, name: &str, passed: bool, detail: String) {
        let tag = if passed { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2}. {name}: {detail}");
        if !passed {
            self.failures += 1;
        }
    }
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol
}

fn tune(name: &str) -> (Scenario, TuneResult) {
    let s = preset(name, 0.1);
    let cfg = OptimizerConfig::new(ControllerParams::new(0.0, 1.0), s.beta_max().unwrap());
    let r = optimize(&s, &cfg).unwrap();
    (s, r)
}

fn sweep_with(s: &Scenario, kind: ControllerKind, theta: ControllerParams) -> SweepResult {
    let s = s.with_controller(kind).with_params(theta);
    let r = study::sweep(&s, &MPRS, None, &FuelCoefficients::default()).unwrap();
    assert!(r.failures.is_empty(), "sweep failures: {:?}", r.failures);
    r
}

fn criterion_optimum(report: &mut Report, id: usize, name: &str, r: &TuneResult, gamma_target: f64) {
    let ok = within(r.theta.beta, 0.0642, 5e-4)
        && within(r.theta.gamma, gamma_target, 0.02)
        && r.trace.termination == Some(Termination::Converged);
    report.check(
        id,
        &format!("optimal parameters, {name}, 10% MPR"),
        ok,
        format!(
            "beta={:.6} (0.0642 +/- 0.0005), gamma={:.6} ({gamma_target} +/- 0.02), {} iterations, {:?}",
            r.theta.beta,
            r.theta.gamma,
            r.trace.len(),
            r.trace.termination
        ),
    );
}

fn criterion_sweep(report: &mut Report, id: usize, name: &str, r: &SweepResult, asv: (f64, f64), fc: (f64, f64)) {
    let full = r.row(1.0).unwrap();
    let ok = within(full.asv_impr_pct, asv.0, asv.1) && within(full.fc_impr_pct, fc.0, fc.1);
    report.check(
        id,
        &format!("{name} TS-OPS sweep at 100% MPR"),
        ok,
        format!(
            "ASV improvement {:.2}% ({} +/- {}), fuel {:.3} -> {:.3} ml = {:.2}% ({} +/- {})",
            full.asv_impr_pct, asv.0, asv.1, r.baseline.platoon_fuel, full.fc, full.fc_impr_pct, fc.0, fc.1
        ),
    );
}

fn trace_ok(r: &TuneResult, phi: f64) -> (bool, String) {
    let j = r.trace.objective();
    let monotone = j.windows(2).skip(4).all(|w| w[1] <= w[0]);
    let last_step = if j.len() >= 2 { (j[j.len() - 1] - j[j.len() - 2]).abs() } else { f64::INFINITY };
    let ok = monotone && last_step < phi && j.len() < 300;
    (ok, format!("{} iterations, non-increasing after 5: {monotone}, final |dJ|={last_step:.2e}", j.len()))
}

fn max_equilibrium_drift(hv: IdmParams, mpr: f64) -> f64 {
    let mut s = preset("scenario1", mpr);
    s.hv_model = hv;
    s.lead = LeadProfile::constant(21.0);
    let traj = simulate(&s).unwrap();
    traj.vehicles
        .iter()
        .flat_map(|v| v.v.iter())
        .map(|v| (v - 21.0).abs())
        .fold(0.0, f64::max)
}

fn main() -> ExitCode {
    let mut report = Report { failures: 0 };

    let (s1, t1) = tune("scenario1");
    let (s2, t2) = tune("scenario2");
    criterion_optimum(&mut report, 1, "scenario I", &t1, 1.0011);
    criterion_optimum(&mut report, 2, "scenario II", &t2, 1.0017);

    let ops1 = sweep_with(&s1, ControllerKind::TsOps, t1.theta);
    let ops2 = sweep_with(&s2, ControllerKind::TsOps, t2.theta);
    let trc1 = sweep_with(&s1, ControllerKind::TsTrc, t1.theta);
    let trc2 = sweep_with(&s2, ControllerKind::TsTrc, t2.theta);
    criterion_sweep(&mut report, 3, "scenario I", &ops1, (18.0, 3.0), (0.78, 0.4));
    criterion_sweep(&mut report, 4, "scenario II", &ops2, (46.78, 5.0), (2.74, 1.0));

    let mut ordered = true;
    for (ops, trc) in [(&ops1, &trc1), (&ops2, &trc2)] {
        for m in &MPRS[1..] {
            ordered &= trc.row(*m).unwrap().asv_impr_pct >= ops.row(*m).unwrap().asv_impr_pct;
        }
    }
    let gap = |ops: &SweepResult, trc: &SweepResult| {
        let (o, t) = (ops.row(1.0).unwrap(), trc.row(1.0).unwrap());
        (t.asv_impr_pct - o.asv_impr_pct, t.fc_impr_pct - o.fc_impr_pct)
    };
    let (g1a, g1f) = gap(&ops1, &trc1);
    let (g2a, g2f) = gap(&ops2, &trc2);
    let gaps_ok = within(g1a, 4.0, 2.0) && within(g1f, 0.61, 2.0) && within(g2a, 0.91, 2.0) && within(g2f, 0.63, 2.0);
    report.check(
        5,
        "TS-TRC baseline ordering",
        ordered && gaps_ok,
        format!(
            "TS-TRC >= TS-OPS at every MPR > 0: {ordered}; gaps I {g1a:.2}/{g1f:.2} pp (4/0.61), II {g2a:.2}/{g2f:.2} pp (0.91/0.63), tol 2 pp"
        ),
    );

    let coeffs = FuelCoefficients::default();
    let mut unsafe_runs = Vec::new();
    for (name, s, theta) in [("I", &s1, t1.theta), ("II", &s2, t2.theta)] {
        let cfg = OptimizerConfig::new(ControllerParams::new(0.0, 1.0), s.beta_max().unwrap());
        let tuned = study::sweep(s, &MPRS, Some(&cfg), &coeffs).unwrap();
        assert!(tuned.failures.is_empty());
        for m in MPRS {
            let shared = study::evaluate(&s.with_mpr(m).with_params(theta), None, &coeffs).unwrap();
            if !shared.violations.is_empty() || tuned.row(m).unwrap().violations > 0 {
                unsafe_runs.push(format!("{name}@{m}"));
            }
        }
    }
    report.check(
        6,
        "safety under tuned parameters",
        unsafe_runs.is_empty(),
        format!("44 runs (shared and per-MPR tuned theta), unsafe: {unsafe_runs:?}"),
    );

    let mut worst: f64 = 0.0;
    for theta in [(0.03, 0.5), (0.01, 1.5), (0.05, 0.2), (0.0642, 1.0)] {
        let theta = ControllerParams::new(theta.0, theta.1);
        let s = short_instance(theta);
        let lambda = evaluate(&s, &[theta], SensitivityKind::Reduced).unwrap().lambda_total();
        let fd = ReplayedObjective::new(&s, 2).gradient(theta, 1e-4);
        worst = worst.max(rel_err(lambda[0], fd[0])).max(rel_err(lambda[1], fd[1]));
    }
    report.check(7, "gradient vs replayed-spacing finite differences", worst < 0.02, format!("worst relative error {worst:.2e} (< 2%)"));

    let (ok1, d1) = trace_ok(&t1, 1e-6);
    let (ok2, d2) = trace_ok(&t2, 1e-6);
    report.check(8, "convergence monotonicity", ok1 && ok2, format!("I: {d1}; II: {d2}"));

    let region = ControllerBox::standard();
    let law = SmoothingLaw::arctan(ControllerParams::new(0.0642, 1.0011));
    let good = validate_controller_conditions(|s, dv| law.input(s, dv), &region, law.alpha()).all_passed();
    let beta = 0.0642;
    let r_i = validate_controller_conditions(|s, dv| -beta * (s * dv).atan(), &region, 1.0);
    let r_ii = validate_controller_conditions(|_, _| 0.05, &region, 1.0);
    let cusp = |s: f64, dv: f64| {
        let r = (s * dv).abs().sqrt();
        if dv == 0.0 { 0.0 } else { beta * dv.signum() * r / (1.0 + r) }
    };
    let r_iii = validate_controller_conditions(cusp, &region, beta);
    let r_iv = validate_controller_conditions(|s, dv| beta * (s * dv).atan(), &region, beta);
    let broken_ok = !r_i.monotone.passed && !r_ii.sign.passed && !r_iii.smooth.passed && !r_iv.bounded.passed;
    report.check(
        9,
        "controller-condition suite",
        good && broken_ok,
        format!("arctan passes all four: {good}; broken controllers fail (i)/(ii)/(iii)/(iv): {broken_ok}"),
    );

    let drift = [
        max_equilibrium_drift(IdmParams::SCENARIO_I, 0.0),
        max_equilibrium_drift(IdmParams::SCENARIO_II, 0.0),
        max_equilibrium_drift(IdmParams::SCENARIO_I, 1.0),
        max_equilibrium_drift(IdmParams::SCENARIO_II, 0.5),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let grid = SampleGrid::standard();
    let rdc = [
        ModelKind::Idm(IdmParams::SCENARIO_I),
        ModelKind::Idm(IdmParams::SCENARIO_II),
        ModelKind::Ovrv(OvrvParams::DEFAULT),
    ]
    .iter()
    .all(|m| rdc_check(m, &grid).passed());
    report.check(
        10,
        "dynamics fixed points and RDC",
        drift < 1e-6 && rdc,
        format!("max drift over 500 s {drift:.2e} m/s (< 1e-6); RDC grids pass: {rdc}"),
    );

    println!("acceptance: {} of 10 criteria passed", 10 - report.failures);
    if report.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
