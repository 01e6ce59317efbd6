use serde::{Deserialize, Serialize};

use super::RtError;

/// Toy plant: `dz/dt = gamma*z + b*u`, `dn/dt = (g*q - n)/tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantParams {
    /// Vertical growth rate, 1/s.
    pub gamma: f64,
    pub b: f64,
    /// Density time constant, s.
    pub tau: f64,
    pub g: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            gamma: 20.0,
            b: 1.0,
            tau: 0.05,
            g: 1.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), RtError> {
        let all = [self.gamma, self.b, self.tau, self.g];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RtError::InvalidConfig("plant parameters must be finite".into()));
        }
        if self.gamma <= 0.0 {
            return Err(RtError::InvalidConfig(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.tau <= 0.0 {
            return Err(RtError::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantState {
    pub z: f64,
    pub n: f64,
}

impl Default for PlantState {
    fn default() -> Self {
        PlantState { z: 0.001, n: 0.0 }
    }
}

/// Advances the plant by `dt_s` holding `u_coil` and `q_gas` constant.
///
/// Exact zero-order-hold solution of both linear ODEs; `q_gas` is clamped to
/// `[0, 1]` first.
pub fn step_plant(
    state: PlantState,
    u_coil: f64,
    q_gas: f64,
    params: &PlantParams,
    dt_s: f64,
) -> Result<PlantState, RtError> {
    if !(state.z.is_finite() && state.n.is_finite()) {
        return Err(RtError::NonFinite("plant state"));
    }
    if !(u_coil.is_finite() && q_gas.is_finite()) {
        return Err(RtError::NonFinite("actuator command"));
    }
    if !(dt_s.is_finite() && dt_s > 0.0) {
        return Err(RtError::NonFinite("dt"));
    }
    let q = q_gas.clamp(0.0, 1.0);
    let gdt = params.gamma * dt_s;
    // expm1 keeps the (e^x - 1) factors accurate for small steps.
    let z = gdt.exp() * state.z + (params.b / params.gamma) * gdt.exp_m1() * u_coil;
    let decay = -dt_s / params.tau;
    let n = state.n * decay.exp() - params.g * q * decay.exp_m1();
    if !(z.is_finite() && n.is_finite()) {
        return Err(RtError::NonFinite("plant state"));
    }
    Ok(PlantState { z, n })
}
