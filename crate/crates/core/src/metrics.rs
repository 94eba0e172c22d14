//! Average speed variation and VT-Micro fuel consumption.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::simulator::{Scenario, Trajectory};

const DEFAULT_TABLE: &str = include_str!("../data/vt_micro_fuel.txt");

/// Largest admissible natural-log fuel rate (in the table's rate unit).
const MAX_LOG_RATE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpeedUnit {
    /// Speed in m/s, acceleration in m/s².
    MetersPerSecond,
    /// Speed in km/h, acceleration in km/h/s.
    KilometersPerHour,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RateUnit {
    LitersPerSecond,
    MillilitersPerSecond,
}

/// VT-Micro coefficient table: `ln(rate) = sum K[i][j] v^i a^j`, with one
/// matrix for `a >= 0` and one for `a < 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct FuelCoefficients {
    pub accel: [[f64; 4]; 4],
    pub decel: [[f64; 4]; 4],
    pub speed_unit: SpeedUnit,
    pub rate_unit: RateUnit,
}

impl Default for FuelCoefficients {
    fn default() -> Self {
        DEFAULT_TABLE
            .parse()
            .expect("bundled VT-Micro table is well formed")
    }
}

impl FromStr for FuelCoefficients {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .enumerate()
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Config("coefficient file is empty".into()))?;
        let mut words = header.split_whitespace();
        if words.next() != Some("vt-micro") {
            return Err(Error::Config(format!(
                "coefficient header must start with 'vt-micro', got '{header}'"
            )));
        }
        let (mut regimes, mut speed, mut rate) = (None, None, None);
        for word in words {
            let (key, value) = word
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed header field '{word}'")))?;
            match key {
                "regimes" => regimes = Some(value.to_string()),
                "speed" => {
                    speed = Some(match value {
                        "km/h" => SpeedUnit::KilometersPerHour,
                        "m/s" => SpeedUnit::MetersPerSecond,
                        other => return Err(Error::Config(format!("unknown speed unit '{other}'"))),
                    })
                }
                "rate" => {
                    rate = Some(match value {
                        "l/s" => RateUnit::LitersPerSecond,
                        "ml/s" => RateUnit::MillilitersPerSecond,
                        other => return Err(Error::Config(format!("unknown rate unit '{other}'"))),
                    })
                }
                other => return Err(Error::Config(format!("unknown header field '{other}'"))),
            }
        }
        let flip = match regimes.as_deref() {
            Some("accel,decel") => false,
            Some("decel,accel") => true,
            other => {
                return Err(Error::Config(format!(
                    "header must declare regimes=accel,decel or decel,accel, got {other:?}"
                )))
            }
        };
        let speed_unit = speed.ok_or_else(|| Error::Config("header lacks speed=".into()))?;
        let rate_unit = rate.ok_or_else(|| Error::Config("header lacks rate=".into()))?;

        let mut blocks = [[[0.0; 4]; 4]; 2];
        for block in blocks.iter_mut() {
            for row in block.iter_mut() {
                let (lineno, line) = lines.next().ok_or_else(|| {
                    Error::Config("coefficient file needs two 4x4 blocks".into())
                })?;
                let values: Vec<f64> = line
                    .split_whitespace()
                    .map(|w| w.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
                if values.len() != 4 || values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!(
                        "line {}: expected 4 finite coefficients",
                        lineno + 1
                    )));
                }
                row.copy_from_slice(&values);
            }
        }
        if let Some((lineno, _)) = lines.next() {
            return Err(Error::Config(format!("line {}: unexpected trailing data", lineno + 1)));
        }
        let [first, second] = blocks;
        let (accel, decel) = if flip { (second, first) } else { (first, second) };
        Ok(Self {
            accel,
            decel,
            speed_unit,
            rate_unit,
        })
    }
}

impl fmt::Display for FuelCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let speed = match self.speed_unit {
            SpeedUnit::KilometersPerHour => "km/h",
            SpeedUnit::MetersPerSecond => "m/s",
        };
        let rate = match self.rate_unit {
            RateUnit::LitersPerSecond => "l/s",
            RateUnit::MillilitersPerSecond => "ml/s",
        };
        writeln!(f, "vt-micro regimes=accel,decel speed={speed} rate={rate}")?;
        for (k, block) in [&self.accel, &self.decel].into_iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            for row in block {
                writeln!(f, "{:e} {:e} {:e} {:e}", row[0], row[1], row[2], row[3])?;
            }
        }
        Ok(())
    }
}

impl FuelCoefficients {
    /// Natural log of the rate in the table's own unit.
    pub fn log_rate(&self, speed: f64, accel: f64) -> f64 {
        let (v, a) = match self.speed_unit {
            SpeedUnit::MetersPerSecond => (speed, accel),
            SpeedUnit::KilometersPerHour => (speed * 3.6, accel * 3.6),
        };
        let k = if accel >= 0.0 { &self.accel } else { &self.decel };
        let mut sum = 0.0;
        let mut vp = 1.0;
        for row in k {
            let mut ap = 1.0;
            for coeff in row {
                sum += coeff * vp * ap;
                ap *= a;
            }
            vp *= v;
        }
        sum
    }

    fn to_ml(&self, rate: f64) -> f64 {
        match self.rate_unit {
            RateUnit::LitersPerSecond => rate * 1000.0,
            RateUnit::MillilitersPerSecond => rate,
        }
    }

    /// Rate in ml/s, clamped at the saturation limit; the flag reports clamping.
    pub fn rate_clamped(&self, speed: f64, accel: f64) -> (f64, bool) {
        let log_rate = self.log_rate(speed, accel);
        if log_rate.is_finite() && log_rate <= MAX_LOG_RATE {
            (self.to_ml(log_rate.exp()), false)
        } else {
            (self.to_ml(MAX_LOG_RATE.exp()), true)
        }
    }
}

/// Instantaneous fuel rate in ml/s.
pub fn fuel_rate(speed: f64, accel: f64, coeffs: &FuelCoefficients) -> Result<f64> {
    if !(speed >= 0.0) || !accel.is_finite() || !speed.is_finite() {
        return Err(Error::Domain(format!(
            "fuel rate needs finite v >= 0 and finite a, got v={speed}, a={accel}"
        )));
    }
    let log_rate = coeffs.log_rate(speed, accel);
    if !(log_rate.is_finite() && log_rate <= MAX_LOG_RATE) {
        return Err(Error::SaturatedFuelRate {
            log_rate,
            speed,
            accel,
        });
    }
    Ok(coeffs.to_ml(log_rate.exp()))
}

fn check_window(traj: &Trajectory, vehicle: usize, window: (f64, f64)) -> Result<()> {
    if vehicle >= traj.n_vehicles() {
        return Err(Error::Domain(format!("no vehicle {vehicle}")));
    }
    let (t1, t2) = window;
    let start = *traj.times.first().unwrap_or(&f64::NAN);
    let end = *traj.times.last().unwrap_or(&f64::NAN);
    if !(t1 <= t2 && t1 >= start - 1e-9 && t2 <= end + 1e-9) {
        return Err(Error::Domain(format!(
            "window ({t1}, {t2}) outside trajectory span ({start}, {end})"
        )));
    }
    Ok(())
}

/// Trapezoidal integral of sampled values over `[t1, t2]`, interpolating
/// linearly at window edges that fall between samples.
pub fn window_integral(times: &[f64], values: &[f64], t1: f64, t2: f64) -> f64 {
    debug_assert_eq!(times.len(), values.len());
    if t2 <= t1 || times.len() < 2 {
        return 0.0;
    }
    let interp = |k: usize, t: f64| {
        let (ta, tb) = (times[k], times[k + 1]);
        values[k] + (values[k + 1] - values[k]) * (t - ta) / (tb - ta)
    };
    let mut total = 0.0;
    for k in 0..times.len() - 1 {
        let (ta, tb) = (times[k], times[k + 1]);
        let lo = ta.max(t1);
        let hi = tb.min(t2);
        if hi <= lo {
            continue;
        }
        let (fa, fb) = if lo == ta && hi == tb {
            (values[k], values[k + 1])
        } else {
            (interp(k, lo), interp(k, hi))
        };
        total += 0.5 * (fa + fb) * (hi - lo);
    }
    total
}

/// `(1 / (t2 - t1)) * integral |v - v*| dt` over the window.
pub fn asv(traj: &Trajectory, vehicle: usize, v_star: f64, window: (f64, f64)) -> Result<f64> {
    check_window(traj, vehicle, window)?;
    let (t1, t2) = window;
    if t2 <= t1 {
        return Err(Error::Domain("ASV window must have positive length".into()));
    }
    let dev: Vec<f64> = traj.vehicles[vehicle]
        .v
        .iter()
        .map(|v| (v - v_star).abs())
        .collect();
    Ok(window_integral(&traj.times, &dev, t1, t2) / (t2 - t1))
}

fn fuel_series(traj: &Trajectory, vehicle: usize, coeffs: &FuelCoefficients) -> (Vec<f64>, bool) {
    let series = &traj.vehicles[vehicle];
    let mut saturated = false;
    let rates = series
        .v
        .iter()
        .zip(&series.a)
        .map(|(v, a)| {
            let (r, sat) = coeffs.rate_clamped(v.max(0.0), *a);
            saturated |= sat;
            r
        })
        .collect();
    (rates, saturated)
}

/// Fuel burnt over the window, ml.
pub fn total_fuel(traj: &Trajectory, vehicle: usize, window: (f64, f64), coeffs: &FuelCoefficients) -> Result<f64> {
    check_window(traj, vehicle, window)?;
    let series = &traj.vehicles[vehicle];
    for (v, a) in series.v.iter().zip(&series.a) {
        fuel_rate(v.max(0.0), *a, coeffs)?;
    }
    let (rates, _) = fuel_series(traj, vehicle, coeffs);
    Ok(window_integral(&traj.times, &rates, window.0, window.1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Indexed by follower; entry 0 (the leader) is unused and left at 0.
    pub asv: Vec<f64>,
    pub fuel: Vec<f64>,
    pub platoon_asv: f64,
    pub platoon_fuel: f64,
    pub window: (f64, f64),
    pub v_star: f64,
    /// Followers whose fuel rate hit the saturation clamp somewhere.
    pub saturated: Vec<usize>,
}

impl MetricsReport {
    /// `vehicle,asv,fc` per follower plus a `platoon` aggregate row.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "vehicle,asv,fc")?;
        for i in 1..self.asv.len() {
            writeln!(out, "{i},{:.6},{:.6}", self.asv[i], self.fuel[i])?;
        }
        writeln!(out, "platoon,{:.6},{:.6}", self.platoon_asv, self.platoon_fuel)
    }
}

/// ASV and fuel for every follower over the scenario's metric window; the
/// leader is excluded from the platoon averages.
pub fn summarize(traj: &Trajectory, scenario: &Scenario, coeffs: &FuelCoefficients) -> Result<MetricsReport> {
    let window = scenario.metric_window;
    let v_star = scenario.v_star();
    let n = traj.n_vehicles();
    if n < 2 {
        return Err(Error::Domain("trajectory has no followers".into()));
    }
    let mut report = MetricsReport {
        asv: vec![0.0; n],
        fuel: vec![0.0; n],
        platoon_asv: 0.0,
        platoon_fuel: 0.0,
        window,
        v_star,
        saturated: Vec::new(),
    };
    for i in 1..n {
        report.asv[i] = asv(traj, i, v_star, window)?;
        check_window(traj, i, window)?;
        let (rates, saturated) = fuel_series(traj, i, coeffs);
        if saturated {
            report.saturated.push(i);
        }
        report.fuel[i] = window_integral(&traj.times, &rates, window.0, window.1);
    }
    let followers = (n - 1) as f64;
    report.platoon_asv = report.asv[1..].iter().sum::<f64>() / followers;
    report.platoon_fuel = report.fuel[1..].iter().sum::<f64>() / followers;
    Ok(report)
}
