//! Sectioned TOML configuration: `scenario`, `hv_model`, `av_model`,
//! `controller`, `optimizer` and `metrics`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::ControllerParams;
use crate::dynamics::{IdmParams, OvrvParams};
use crate::error::{Error, Result};
use crate::integrate::Integrator;
use crate::metrics::FuelCoefficients;
use crate::optimizer::{OptimizerConfig, SensitivityKind};
use crate::simulator::{ControllerConfig, LeadProfile, Scenario};

const SCENARIO1: &str = include_str!("../presets/scenario1.toml");
const SCENARIO2: &str = include_str!("../presets/scenario2.toml");

/// Names accepted by [`Config::preset`].
pub const PRESETS: [&str; 2] = ["scenario1", "scenario2"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    n_followers: usize,
    mpr: f64,
    t_f: f64,
    dt: f64,
    #[serde(default)]
    integrator: Integrator,
    min_safe_spacing: f64,
    lead: LeadProfile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_spacing: Option<Vec<f64>>,
}

/// Optimizer settings as written in the file; `beta_max` comes from the scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSettings {
    pub beta0: f64,
    pub gamma0: f64,
    pub epsilon: f64,
    pub phi: f64,
    pub n_max: usize,
    pub per_av: bool,
    pub sensitivity: SensitivityKind,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            beta0: 0.0,
            gamma0: 1.0,
            epsilon: 1e-5,
            phi: 1e-6,
            n_max: 300,
            per_av: false,
            sensitivity: SensitivityKind::Reduced,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSettings {
    pub window: [f64; 2],
    /// Alternative VT-Micro coefficient file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fuel_table: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    scenario: ScenarioSection,
    hv_model: IdmParams,
    av_model: OvrvParams,
    #[serde(default)]
    controller: ControllerConfig,
    #[serde(default)]
    optimizer: OptimizerSettings,
    metrics: MetricsSettings,
}

/// A fully parsed and validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub scenario: Scenario,
    pub optimizer: OptimizerSettings,
    pub fuel_table: Option<PathBuf>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides::<&str>(text, &[])
    }

    /// Parses `text` after applying dotted `section.key=value` overrides.
    pub fn parse_with_overrides<S: AsRef<str>>(text: &str, overrides: &[S]) -> Result<Self> {
        let to_config = |e: toml::de::Error| Error::Config(e.to_string().trim_end().to_string());
        // Without overrides, deserialize the text directly so errors keep line numbers.
        if overrides.is_empty() {
            return Self::from_raw(toml::from_str(text).map_err(to_config)?);
        }
        let mut doc: toml::Table = text.parse().map_err(to_config)?;
        for o in overrides {
            apply_override(&mut doc, o.as_ref())?;
        }
        Self::from_raw(toml::Value::Table(doc).try_into().map_err(to_config)?)
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::parse(preset_text(name)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides::<&str>(path, &[])
    }

    pub fn load_with_overrides<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse_with_overrides(&text, overrides)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config_prefix(e))))
    }

    fn from_raw(raw: RawConfig) -> Result<Self> {
        let s = raw.scenario;
        let scenario = Scenario {
            n_followers: s.n_followers,
            mpr: s.mpr,
            hv_model: raw.hv_model,
            av_model: raw.av_model,
            controller: raw.controller,
            lead: s.lead,
            t_f: s.t_f,
            dt: s.dt,
            integrator: s.integrator,
            metric_window: (raw.metrics.window[0], raw.metrics.window[1]),
            min_safe_spacing: s.min_safe_spacing,
            initial_spacing: s.initial_spacing,
        };
        scenario.validate().map_err(|e| Error::Config(strip_config_prefix(e)))?;
        Ok(Self {
            scenario,
            optimizer: raw.optimizer,
            fuel_table: raw.metrics.fuel_table,
        })
    }

    fn to_raw(&self) -> RawConfig {
        let s = &self.scenario;
        RawConfig {
            scenario: ScenarioSection {
                n_followers: s.n_followers,
                mpr: s.mpr,
                t_f: s.t_f,
                dt: s.dt,
                integrator: s.integrator,
                min_safe_spacing: s.min_safe_spacing,
                lead: s.lead.clone(),
                initial_spacing: s.initial_spacing.clone(),
            },
            hv_model: s.hv_model,
            av_model: s.av_model,
            controller: s.controller.clone(),
            optimizer: self.optimizer.clone(),
            metrics: MetricsSettings {
                window: [s.metric_window.0, s.metric_window.1],
                fuel_table: self.fuel_table.clone(),
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_raw()).expect("config is always representable as TOML")
    }

    /// Optimizer settings with the scenario's `beta` ceiling filled in.
    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let o = &self.optimizer;
        let cfg = OptimizerConfig {
            theta0: ControllerParams::new(o.beta0, o.gamma0),
            epsilon: o.epsilon,
            phi: o.phi,
            n_max: o.n_max,
            beta_max: self.scenario.beta_max()?,
            per_av: o.per_av,
            sensitivity: o.sensitivity,
        };
        cfg.validate().map_err(|e| Error::Config(strip_config_prefix(e)))?;
        Ok(cfg)
    }

    pub fn fuel_coefficients(&self) -> Result<FuelCoefficients> {
        match &self.fuel_table {
            None => Ok(FuelCoefficients::default()),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
                text.parse()
                    .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip_config_prefix(e))))
            }
        }
    }
}

pub fn preset_text(name: &str) -> Result<&'static str> {
    match name {
        "scenario1" => Ok(SCENARIO1),
        "scenario2" => Ok(SCENARIO2),
        other => Err(Error::Config(format!(
            "unknown preset `{other}` (expected one of {})",
            PRESETS.join(", ")
        ))),
    }
}

fn strip_config_prefix(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string so `controller.kind=none` works without quotes.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw_value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key segment")));
    }
    let raw_value = raw_value.trim();
    let value = match format!("v = {raw_value}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw_value.to_string()),
    };
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{assignment}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
