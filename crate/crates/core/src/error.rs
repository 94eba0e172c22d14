use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("no equilibrium spacing: speed {speed} m/s is not below the free speed {free_speed} m/s")]
    NoEquilibrium { speed: f64, free_speed: f64 },

    #[error("numerical blow-up at vehicle {vehicle}, t = {time:.3} s: {reason}")]
    NumericalBlowup {
        vehicle: usize,
        time: f64,
        reason: String,
    },

    #[error("fuel rate saturated: log-rate {log_rate} at v = {speed} m/s, a = {accel} m/s^2")]
    SaturatedFuelRate { log_rate: f64, speed: f64, accel: f64 },

    #[error("config error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(name: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} must be finite, got {value}")))
    }
}
