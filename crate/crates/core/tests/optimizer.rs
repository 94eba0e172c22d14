mod common;

use common::{preset, rel_err, short_instance, ReplayedObjective};
use proptest::prelude::*;
use smoothflow::optimizer::{evaluate, objective_j, optimize, SensitivityKind, Termination};
use smoothflow::simulator::simulate;
use smoothflow::{ControllerParams, LeadProfile, OptimizerConfig};

#[test]
fn replayed_gradient_matches_reduced_sensitivity() {
    let theta = ControllerParams::new(0.03, 0.5);
    let s = short_instance(theta);
    let lambda = evaluate(&s, &[theta], SensitivityKind::Reduced).unwrap().lambda_total();
    let fd = ReplayedObjective::new(&s, 2).gradient(theta, 1e-4);
    assert!(rel_err(lambda[0], fd[0]) < 0.02, "{lambda:?} vs {fd:?}");
    assert!(rel_err(lambda[1], fd[1]) < 0.02, "{lambda:?} vs {fd:?}");
}

#[test]
fn coupled_sensitivity_matches_full_objective() {
    let theta = ControllerParams::new(0.03, 0.5);
    let s = short_instance(theta);
    let avs = s.av_indices();
    let lambda = evaluate(&s, &[theta], SensitivityKind::Coupled).unwrap().lambda_total();
    let j = |b: f64, g: f64| objective_j(&simulate(&s.with_params(ControllerParams::new(b, g))).unwrap(), &avs).unwrap();
    let (hb, hg) = (3e-6, 5e-5);
    let fd = [
        (j(0.03 + hb, 0.5) - j(0.03 - hb, 0.5)) / (2.0 * hb),
        (j(0.03, 0.5 + hg) - j(0.03, 0.5 - hg)) / (2.0 * hg),
    ];
    assert!(rel_err(lambda[0], fd[0]) < 0.01, "{lambda:?} vs {fd:?}");
    assert!(rel_err(lambda[1], fd[1]) < 0.01, "{lambda:?} vs {fd:?}");
}

#[test]
fn objective_lower_at_tuned_parameters() {
    let s = preset("scenario1", 0.1);
    let avs = s.av_indices();
    let j0 = objective_j(&simulate(&s.with_params(ControllerParams::new(0.0, 1.0))).unwrap(), &avs).unwrap();
    let j1 = objective_j(&simulate(&s.with_params(ControllerParams::new(0.0642, 1.0011))).unwrap(), &avs).unwrap();
    assert!(j1 < j0, "{j1} vs {j0}");
}

#[test]
fn flat_lead_is_stationary() {
    let mut s = preset("scenario1", 0.1);
    s.lead = LeadProfile::constant(21.0);
    let theta0 = ControllerParams::new(0.01, 0.7);
    let r = optimize(&s, &OptimizerConfig::new(theta0, s.beta_max().unwrap())).unwrap();
    assert_eq!(r.trace.len(), 1);
    let l = r.trace.records[0].lambda[0];
    assert!(l[0].abs() < 1e-15 && l[1].abs() < 1e-15, "{l:?}");
    assert_eq!(r.trace.termination, Some(Termination::Stationary));
    assert_eq!(r.theta, theta0);
}

#[test]
fn no_av_is_an_error() {
    let s = preset("scenario1", 0.0);
    let err = optimize(&s, &OptimizerConfig::new(ControllerParams::new(0.0, 1.0), 0.0642)).unwrap_err();
    assert!(err.to_string().contains("no AV to tune"));
}

#[test]
fn trace_stays_feasible_and_bound_is_active() {
    let s = preset("scenario1", 0.3);
    let cfg = OptimizerConfig::new(ControllerParams::new(0.0, 1.0), s.beta_max().unwrap());
    let r = optimize(&s, &cfg).unwrap();
    for rec in &r.trace.records {
        for th in &rec.theta {
            assert!(th.beta >= 0.0 && th.beta <= cfg.beta_max && th.gamma >= 0.0);
        }
    }
    assert_eq!(r.theta.beta, cfg.beta_max);
    let last = r.trace.records.last().unwrap();
    // -lambda_beta points out of the feasible set through the upper bound.
    assert!(-last.lambda[0][0] > 0.0);
    assert!(r.best_j <= r.trace.records[0].j);
}

#[test]
fn per_av_mode_tunes_each_vehicle() {
    let s = preset("scenario1", 0.2);
    let mut cfg = OptimizerConfig::new(ControllerParams::new(0.0, 1.0), s.beta_max().unwrap());
    cfg.per_av = true;
    cfg.n_max = 20;
    let r = optimize(&s, &cfg).unwrap();
    assert_eq!(r.per_av.len(), 2);
    assert_eq!(r.trace.records[0].theta.len(), 2);
    let mut buf = Vec::new();
    r.trace.write_csv(&mut buf).unwrap();
    assert!(String::from_utf8(buf).unwrap().starts_with("iter,av,beta,gamma,J,lambda_beta,lambda_gamma\n"));
}

#[test]
fn trace_csv_layout() {
    let s = short_instance(ControllerParams::new(0.0, 1.0));
    let mut cfg = OptimizerConfig::new(ControllerParams::new(0.0, 1.0), s.beta_max().unwrap());
    cfg.n_max = 3;
    cfg.phi = 1e-300;
    let r = optimize(&s, &cfg).unwrap();
    assert_eq!(r.trace.termination, Some(Termination::MaxIterations));
    let mut buf = Vec::new();
    r.trace.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iter,beta,gamma,J,lambda_beta,lambda_gamma");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("1,0.000000000,1.000000000,"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn reduced_gradient_matches_replay(beta in 0.005f64..0.06, gamma in 0.2f64..2.0) {
        let theta = ControllerParams::new(beta, gamma);
        let s = short_instance(theta);
        let lambda = evaluate(&s, &[theta], SensitivityKind::Reduced).unwrap().lambda_total();
        let fd = ReplayedObjective::new(&s, 2).gradient(theta, 1e-4);
        prop_assert!(rel_err(lambda[0], fd[0]) < 0.02, "{:?} vs {:?}", lambda, fd);
        prop_assert!(rel_err(lambda[1], fd[1]) < 0.02, "{:?} vs {:?}", lambda, fd);
    }
}
