//! Shared fixtures for the benchmarks.

use smoothflow::config::Config;
use smoothflow::Scenario;

/// A bundled preset at the given AV penetration rate.
pub fn preset(name: &str, mpr: f64) -> Scenario {
    Config::preset(name).expect("bundled preset parses").scenario.with_mpr(mpr)
}
