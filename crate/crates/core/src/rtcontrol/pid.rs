use serde::{Deserialize, Serialize};

use super::RtError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    pub u_min: f64,
    pub u_max: f64,
}

impl PidGains {
    /// Position loop defaults.
    pub fn default_z() -> Self {
        PidGains {
            kp: 40.0,
            ki: 100.0,
            kd: 0.5,
            u_min: -10.0,
            u_max: 10.0,
        }
    }

    /// Density loop defaults.
    pub fn default_n() -> Self {
        PidGains {
            kp: 2.0,
            ki: 20.0,
            kd: 0.0,
            u_min: 0.0,
            u_max: 1.0,
        }
    }

    /// All gains zero; the command is always 0 if the clamp allows it.
    pub fn open_loop(u_min: f64, u_max: f64) -> Self {
        PidGains {
            kp: 0.0,
            ki: 0.0,
            kd: 0.0,
            u_min,
            u_max,
        }
    }

    pub fn validate(&self) -> Result<(), RtError> {
        let all = [self.kp, self.ki, self.kd, self.u_min, self.u_max];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(RtError::InvalidConfig("gains must be finite".into()));
        }
        if self.u_min >= self.u_max {
            return Err(RtError::InvalidConfig(format!(
                "u_min {} must be below u_max {}",
                self.u_min, self.u_max
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PidState {
    pub integral: f64,
    pub prev_error: Option<f64>,
}

impl PidState {
    /// One controller update. The integral only accumulates while the
    /// unclamped output stays inside the actuator range.
    pub fn step(&mut self, error: f64, dt_s: f64, gains: &PidGains) -> Result<f64, RtError> {
        if !error.is_finite() {
            return Err(RtError::NonFinite("controller error"));
        }
        if !(dt_s.is_finite() && dt_s > 0.0) {
            return Err(RtError::NonFinite("dt"));
        }
        let derivative = match self.prev_error {
            Some(prev) => (error - prev) / dt_s,
            None => 0.0,
        };
        let tentative = self.integral + error * dt_s;
        let raw = gains.kp * error + gains.ki * tentative + gains.kd * derivative;
        let out = if raw < gains.u_min || raw > gains.u_max {
            gains.kp * error + gains.ki * self.integral + gains.kd * derivative
        } else {
            self.integral = tentative;
            raw
        };
        self.prev_error = Some(error);
        if !out.is_finite() {
            return Err(RtError::NonFinite("controller output"));
        }
        Ok(out.clamp(gains.u_min, gains.u_max))
    }
}
