//! Fixed-step explicit integrators over a flat state vector.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Integrator {
    #[default]
    Rk4,
    Euler,
}

impl std::str::FromStr for Integrator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rk4" => Ok(Integrator::Rk4),
            "euler" => Ok(Integrator::Euler),
            other => Err(format!("unknown integrator '{other}' (expected rk4 or euler)")),
        }
    }
}

/// Scratch buffers reused across steps.
#[derive(Debug, Default)]
pub struct Workspace {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Workspace {
    pub fn new(dim: usize) -> Self {
        Self {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }
}

/// Advances `y` from `t` to `t + h` in place. `f(t, y, dy)` writes the derivative.
pub fn step<F, E>(method: Integrator, f: &mut F, t: f64, y: &mut [f64], h: f64, ws: &mut Workspace) -> Result<(), E>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
{
    let n = y.len();
    if ws.k1.len() != n {
        *ws = Workspace::new(n);
    }
    match method {
        Integrator::Euler => {
            f(t, y, &mut ws.k1)?;
            for (yi, ki) in y.iter_mut().zip(&ws.k1) {
                *yi += h * ki;
            }
        }
        Integrator::Rk4 => {
            let Workspace { k1, k2, k3, k4, tmp } = ws;
            f(t, y, k1)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k1[i];
            }
            f(t + 0.5 * h, tmp, k2)?;
            for i in 0..n {
                tmp[i] = y[i] + 0.5 * h * k2[i];
            }
            f(t + 0.5 * h, tmp, k3)?;
            for i in 0..n {
                tmp[i] = y[i] + h * k3[i];
            }
            f(t + h, tmp, k4)?;
            for i in 0..n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
    }
    Ok(())
}
