//! Real-time control analog: a fixed 1 ms loop closing two PID controllers
//! around a toy plant with an unstable vertical mode and a lagging density.
//!
//! During a pulse [`ControlLoop::cycle`] is called once per millisecond by
//! the simulation driver; records stay in memory until [`deposit`] writes
//! them into the shot tree afterwards.

mod pid;
mod plant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use pid::{PidGains, PidState};
pub use plant::{step_plant, PlantParams, PlantState};

use crate::shottree::{ModelBuilder, ShotTree, Signal, TreeError};

pub const CYCLE_US: u64 = 1000;

pub const Z_PATH: &str = "\\TOP.RTCTRL.Z";
pub const N_PATH: &str = "\\TOP.RTCTRL.N";
pub const COIL_PATH: &str = "\\TOP.RTCTRL.COIL:CMD";
pub const GAS_PATH: &str = "\\TOP.RTCTRL.GAS:CMD";

#[derive(Debug, thiserror::Error)]
pub enum RtError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid controller config: {0}")]
    InvalidConfig(String),
    #[error("no cycle records to deposit")]
    NoRecords,
    #[error(transparent)]
    Tree(#[from] TreeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub dt_us: u64,
    pub z_ref: f64,
    pub n_ref: f64,
    pub z_gains: PidGains,
    pub n_gains: PidGains,
    /// Sensor channels read per cycle; the first two are z and n.
    pub n_inputs: usize,
    /// Standard deviation of noise on the synthetic channels.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            dt_us: CYCLE_US,
            z_ref: 0.0,
            n_ref: 0.5,
            z_gains: PidGains::default_z(),
            n_gains: PidGains::default_n(),
            n_inputs: 200,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), RtError> {
        if self.dt_us != CYCLE_US {
            return Err(RtError::InvalidConfig(format!("dt_us must be {CYCLE_US}, got {}", self.dt_us)));
        }
        if self.n_inputs < 2 {
            return Err(RtError::InvalidConfig("n_inputs must be at least 2".into()));
        }
        if !(self.z_ref.is_finite() && self.n_ref.is_finite()) {
            return Err(RtError::InvalidConfig("references must be finite".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(RtError::InvalidConfig("noise_std must be finite and >= 0".into()));
        }
        self.z_gains.validate()?;
        self.n_gains.validate()
    }

    fn dt_s(&self) -> f64 {
        self.dt_us as f64 * 1e-6
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    /// Time since T0.
    pub t_us: u64,
    pub inputs: Vec<f64>,
    pub u_coil: f64,
    pub q_gas: f64,
}

impl CycleRecord {
    pub fn z(&self) -> f64 {
        self.inputs[0]
    }

    pub fn n(&self) -> f64 {
        self.inputs[1]
    }
}

/// Plant state seen by diagnostics at an arbitrary instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantSnapshot {
    pub t_us: u64,
    pub z: f64,
    pub n: f64,
    pub u_coil: f64,
    pub q_gas: f64,
}

/// Controller plus plant, advanced one cycle at a time.
#[derive(Debug)]
pub struct ControlLoop {
    config: ControllerConfig,
    params: PlantParams,
    state: PlantState,
    /// Time of `state`, relative to T0. `held` applies from then on.
    state_t_us: u64,
    held: (f64, f64),
    z_pid: PidState,
    n_pid: PidState,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    records: Vec<CycleRecord>,
}

impl ControlLoop {
    pub fn new(config: ControllerConfig, params: PlantParams, initial: PlantState) -> Result<Self, RtError> {
        config.validate()?;
        params.validate()?;
        if !(initial.z.is_finite() && initial.n.is_finite()) {
            return Err(RtError::NonFinite("initial state"));
        }
        let noise = if config.noise_std > 0.0 {
            Some(Normal::new(0.0, config.noise_std).map_err(|e| RtError::InvalidConfig(e.to_string()))?)
        } else {
            None
        };
        Ok(ControlLoop {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            params,
            state: initial,
            state_t_us: 0,
            held: (0.0, 0.0),
            z_pid: PidState::default(),
            n_pid: PidState::default(),
            noise,
            records: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn records(&self) -> &[CycleRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<CycleRecord> {
        self.records
    }

    fn plant_at(&self, t_us: u64) -> Result<PlantState, RtError> {
        if t_us <= self.state_t_us {
            return Ok(self.state);
        }
        let dt = (t_us - self.state_t_us) as f64 * 1e-6;
        step_plant(self.state, self.held.0, self.held.1, &self.params, dt)
    }

    /// Plant state at `t_us`, integrated exactly from the last cycle with
    /// the held commands. Earlier times return the last cycle's state.
    pub fn snapshot(&self, t_us: u64) -> PlantSnapshot {
        let s = self.plant_at(t_us).unwrap_or(self.state);
        PlantSnapshot {
            t_us,
            z: s.z,
            n: s.n,
            u_coil: self.held.0,
            q_gas: self.held.1,
        }
    }

    /// Runs the cycle due at `t_us` (relative to T0). `density` overrides the
    /// plant's own n as the density measurement, e.g. from a feedback
    /// diagnostic.
    pub fn cycle(&mut self, t_us: u64, density: Option<f64>) -> Result<&CycleRecord, RtError> {
        let now = self.plant_at(t_us)?;
        let z = now.z;
        let n = density.unwrap_or(now.n);
        let dt_s = self.config.dt_s();

        let mut inputs = Vec::with_capacity(self.config.n_inputs);
        inputs.push(z);
        inputs.push(n);
        for j in 3..=self.config.n_inputs {
            let mut v = z * (1.0 + j as f64 / 1000.0);
            if let Some(dist) = &self.noise {
                v += dist.sample(&mut self.rng);
            }
            inputs.push(v);
        }

        let u = self.z_pid.step(self.config.z_ref - z, dt_s, &self.config.z_gains)?;
        let q = self.n_pid.step(self.config.n_ref - n, dt_s, &self.config.n_gains)?;

        self.state = now;
        self.state_t_us = t_us;
        self.held = (u, q.clamp(0.0, 1.0));
        self.records.push(CycleRecord {
            t_us,
            inputs,
            u_coil: u,
            q_gas: q,
        });
        Ok(self.records.last().expect("just pushed"))
    }
}

pub fn cycle_count(pulse_len_us: u64) -> u64 {
    pulse_len_us / CYCLE_US
}

/// Runs a whole pulse standalone, without diagnostics.
pub fn run_pulse(
    config: &ControllerConfig,
    params: &PlantParams,
    initial: PlantState,
    pulse_len_us: u64,
) -> Result<Vec<CycleRecord>, RtError> {
    let mut lp = ControlLoop::new(config.clone(), *params, initial)?;
    for k in 0..cycle_count(pulse_len_us) {
        lp.cycle(k * config.dt_us, None)?;
    }
    Ok(lp.into_records())
}

/// Declares the deposited control nodes.
pub fn declare_nodes(b: ModelBuilder) -> ModelBuilder {
    b.signal(Z_PATH).signal(N_PATH).signal(COIL_PATH).signal(GAS_PATH)
}

/// Writes the four control waveforms as uniform signals from t=0, dt=1 ms.
pub fn deposit(records: &[CycleRecord], tree: &mut ShotTree) -> Result<(), RtError> {
    if records.is_empty() {
        return Err(RtError::NoRecords);
    }
    let col = |f: fn(&CycleRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let signals = [
        (Z_PATH, col(CycleRecord::z), "m"),
        (N_PATH, col(CycleRecord::n), "a.u."),
        (COIL_PATH, col(|r| r.u_coil), "a.u."),
        (GAS_PATH, col(|r| r.q_gas), "a.u."),
    ];
    for (path, samples, units) in signals {
        tree.put_signal(path, Signal::uniform(0, CYCLE_US, samples, units)?)?;
    }
    Ok(())
}
