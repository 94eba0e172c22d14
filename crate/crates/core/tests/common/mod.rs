#![allow(dead_code)]

use smoothflow::config::Config;
use smoothflow::simulator::simulate;
use smoothflow::{ControllerParams, LeadProfile, OvrvParams, Scenario};

pub fn preset(name: &str, mpr: f64) -> Scenario {
    Config::preset(name).unwrap().scenario.with_mpr(mpr)
}

/// 50 s platoon of three followers with one AV behind a human driver, fed
/// by a short dip of the lead speed.
pub fn short_instance(theta: ControllerParams) -> Scenario {
    let mut s = preset("scenario1", 1.0 / 3.0).with_params(theta);
    s.n_followers = 3;
    s.t_f = 50.0;
    s.metric_window = (0.0, 50.0);
    s.lead = LeadProfile::new(vec![[0.0, 21.0], [5.0, 21.0], [15.0, 18.0], [20.0, 18.0], [35.0, 21.0]]).unwrap();
    assert_eq!(s.av_indices(), vec![2]);
    s
}

/// Objective of the AV at `av` with its spacing and predecessor speed frozen
/// to the nominal run at `nominal`; only the AV speed ODE is re-solved
/// (classic RK4, linear interpolation of the frozen signals).
pub struct ReplayedObjective {
    times: Vec<f64>,
    spacing: Vec<f64>,
    v_prev: Vec<f64>,
    v0: f64,
    model: OvrvParams,
}

impl ReplayedObjective {
    pub fn new(nominal: &Scenario, av: usize) -> Self {
        let traj = simulate(nominal).unwrap();
        Self {
            times: traj.times.clone(),
            spacing: traj.vehicles[av].s.clone(),
            v_prev: traj.vehicles[av - 1].v.clone(),
            v0: traj.vehicles[av].v[0],
            model: nominal.av_model,
        }
    }

    fn frozen(&self, t: f64) -> (f64, f64) {
        let k = self.times.partition_point(|x| *x <= t).clamp(1, self.times.len() - 1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let w = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
        let lerp = |y: &[f64]| y[k - 1] + w * (y[k] - y[k - 1]);
        (lerp(&self.spacing), lerp(&self.v_prev))
    }

    fn accel(&self, t: f64, v: f64, theta: ControllerParams) -> f64 {
        let (s, vp) = self.frozen(t);
        let dv = vp - v;
        let m = &self.model;
        m.k1 * (s - m.eta - m.tau * v) + m.k2 * dv + theta.beta * (theta.gamma * s * dv).atan()
    }

    pub fn value(&self, theta: ControllerParams) -> f64 {
        let mut v = self.v0;
        let mut j = 0.0;
        let mut prev_sq = 0.0;
        for k in 0..self.times.len() {
            let t = self.times[k];
            if k > 0 {
                let h = t - self.times[k - 1];
                let t0 = self.times[k - 1];
                let k1 = self.accel(t0, v, theta);
                let k2 = self.accel(t0 + h / 2.0, v + h / 2.0 * k1, theta);
                let k3 = self.accel(t0 + h / 2.0, v + h / 2.0 * k2, theta);
                let k4 = self.accel(t, v + h * k3, theta);
                v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            }
            let sq = (v - self.v_prev[k]).powi(2);
            if k > 0 {
                j += 0.5 * (self.times[k] - self.times[k - 1]) * (sq + prev_sq) / 2.0;
            }
            prev_sq = sq;
        }
        j
    }

    /// Central differences in `beta` and `gamma` with relative step `rel`.
    pub fn gradient(&self, theta: ControllerParams, rel: f64) -> [f64; 2] {
        let hb = rel * theta.beta.max(1e-3);
        let hg = rel * theta.gamma.max(1e-3);
        let db = (self.value(ControllerParams::new(theta.beta + hb, theta.gamma))
            - self.value(ControllerParams::new(theta.beta - hb, theta.gamma)))
            / (2.0 * hb);
        let dg = (self.value(ControllerParams::new(theta.beta, theta.gamma + hg))
            - self.value(ControllerParams::new(theta.beta, theta.gamma - hg)))
            / (2.0 * hg);
        [db, dg]
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-12)
}
