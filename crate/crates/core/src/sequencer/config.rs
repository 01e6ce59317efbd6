use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::SeqError;
use crate::clock::{ClockProgram, PULSE_END, T0};
use crate::daq::{self, DiagnosticDoc, DiagnosticSpec};
use crate::rtcontrol::{self, ControllerConfig, PlantParams, PlantState};
use crate::shottree::{ModelBuilder, ModelTree, NodePath, Usage};

pub const PULSE_LEN_PATH: &str = "\\TOP.SEQ:PULSE_LEN";
pub const OUTCOME_PATH: &str = "\\TOP.SEQ:OUTCOME";
pub const NEVENTS_PATH: &str = "\\TOP.SEQ:NEVENTS";
pub const DAQ_TIMEOUTS_PATH: &str = "\\TOP.SEQ:DAQ_TIMEOUTS";
pub const T0_PATH: &str = "\\TOP.SEQ:T0_US";

pub const DEFAULT_PULSE_LEN_US: u64 = 500_000;
pub const DEFAULT_COOLDOWN_US: u64 = 2_000_000;
pub const DEFAULT_DEPOSIT_TIMEOUT_US: u64 = 1_000_000;

/// Everything needed to run one shot.
#[derive(Debug, Clone)]
pub struct ShotConfig {
    pub pulse_len_us: u64,
    pub cooldown_us: u64,
    pub deposit_timeout_us: u64,
    pub clock_program: ClockProgram,
    pub control: ControllerConfig,
    pub plant: PlantParams,
    pub initial: PlantState,
    pub diagnostics: Vec<DiagnosticSpec>,
    /// Extra nodes; the nodes the shot itself writes are always added.
    pub model: ModelTree,
}

impl Default for ShotConfig {
    fn default() -> Self {
        ShotConfig {
            pulse_len_us: DEFAULT_PULSE_LEN_US,
            cooldown_us: DEFAULT_COOLDOWN_US,
            deposit_timeout_us: DEFAULT_DEPOSIT_TIMEOUT_US,
            clock_program: ClockProgram::standard(DEFAULT_PULSE_LEN_US),
            control: ControllerConfig::default(),
            plant: PlantParams::default(),
            initial: PlantState::default(),
            diagnostics: vec![
                daq::builtin(daq::MAGNETICS).expect("built-in"),
                daq::builtin(daq::INTERF).expect("built-in"),
            ],
            model: ModelTree::builder().build().expect("root-only model"),
        }
    }
}

impl ShotConfig {
    /// Default config with a different pulse length and matching program.
    pub fn with_pulse_len(pulse_len_us: u64) -> Self {
        ShotConfig {
            pulse_len_us,
            clock_program: ClockProgram::standard(pulse_len_us),
            ..ShotConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        if self.pulse_len_us < 1000 {
            return Err(SeqError::InvalidConfig(format!(
                "pulse_len_us must be >= 1000, got {}",
                self.pulse_len_us
            )));
        }
        match self.clock_program.find(T0) {
            Some(e) if e.offset_us == 0 => {}
            Some(e) => return Err(SeqError::InvalidConfig(format!("T0 at offset {}", e.offset_us))),
            None => return Err(SeqError::InvalidConfig("clock program lacks T0".into())),
        }
        match self.clock_program.find(PULSE_END) {
            Some(e) if e.offset_us == self.pulse_len_us as i64 => {}
            Some(e) => {
                return Err(SeqError::InvalidConfig(format!(
                    "PULSE_END at {} but pulse_len_us is {}",
                    e.offset_us, self.pulse_len_us
                )))
            }
            None => return Err(SeqError::InvalidConfig("clock program lacks PULSE_END".into())),
        }
        self.control.validate().map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
        self.plant.validate().map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
        if !(self.initial.z.is_finite() && self.initial.n.is_finite()) {
            return Err(SeqError::InvalidConfig("initial plant state must be finite".into()));
        }
        let mut names = HashSet::new();
        for d in &self.diagnostics {
            d.validate().map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
            if !names.insert(d.name.as_str()) || d.name == "SEQ" || d.name == "RTCTRL" {
                return Err(SeqError::InvalidConfig(format!("diagnostic name {} clashes", d.name)));
            }
        }
        self.shot_model().map(|_| ())
    }

    /// The configured model plus every node the shot writes.
    pub fn shot_model(&self) -> Result<ModelTree, SeqError> {
        let mut required = ModelTree::builder()
            .parameter(PULSE_LEN_PATH)
            .parameter(OUTCOME_PATH)
            .parameter(NEVENTS_PATH)
            .parameter(DAQ_TIMEOUTS_PATH)
            .parameter(T0_PATH);
        required = rtcontrol::declare_nodes(required);
        for d in &self.diagnostics {
            for c in &d.channels {
                let p = d.channel_path(c).map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
                required = required.signal(p.as_str());
            }
        }
        let required = required.build().map_err(|e| SeqError::InvalidConfig(e.to_string()))?;

        let mut b = ModelBuilder::default();
        for decl in self.model.nodes() {
            b = b.node(decl.path.as_str(), decl.usage);
        }
        for decl in required.nodes() {
            if let Some(u) = self.model.usage_of(&decl.path) {
                if u != decl.usage {
                    return Err(SeqError::InvalidConfig(format!(
                        "model declares {} as {u:?}, shot needs {:?}",
                        decl.path, decl.usage
                    )));
                }
            }
            b = b.node(decl.path.as_str(), decl.usage);
        }
        b.build().map_err(|e| SeqError::InvalidConfig(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, SeqError> {
        let doc: ShotConfigDoc =
            serde_json::from_str(text).map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
        doc.resolve()
    }
}

/// JSON form of [`ShotConfig`]. Every field is optional; diagnostics are
/// built-ins referenced by name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShotConfigDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse_len_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cooldown_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deposit_timeout_us: Option<u64>,
    /// Defaults to the standard program for the pulse length.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock_program: Option<ClockProgram>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<ControllerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<PlantState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Vec<DiagnosticDoc>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<Vec<ModelNodeDoc>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelNodeDoc {
    pub path: String,
    pub usage: Usage,
}

impl ShotConfigDoc {
    pub fn resolve(&self) -> Result<ShotConfig, SeqError> {
        let d = ShotConfig::default();
        let pulse_len_us = self.pulse_len_us.unwrap_or(d.pulse_len_us);
        let diagnostics = match &self.diagnostics {
            Some(docs) => docs
                .iter()
                .map(|doc| doc.resolve().map_err(|e| SeqError::InvalidConfig(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?,
            None => d.diagnostics,
        };
        let model = match &self.model {
            Some(nodes) => {
                let mut b = ModelBuilder::default();
                for n in nodes {
                    NodePath::parse(&n.path).map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
                    b = b.node(&n.path, n.usage);
                }
                b.build().map_err(|e| SeqError::InvalidConfig(e.to_string()))?
            }
            None => d.model,
        };
        let cfg = ShotConfig {
            pulse_len_us,
            cooldown_us: self.cooldown_us.unwrap_or(d.cooldown_us),
            deposit_timeout_us: self.deposit_timeout_us.unwrap_or(d.deposit_timeout_us),
            clock_program: self
                .clock_program
                .clone()
                .unwrap_or_else(|| ClockProgram::standard(pulse_len_us)),
            control: self.control.clone().unwrap_or(d.control),
            plant: self.plant.unwrap_or(d.plant),
            initial: self.initial.unwrap_or(d.initial),
            diagnostics,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::TimingEvent;

    #[test]
    fn default_is_valid() {
        let cfg = ShotConfig::default();
        cfg.validate().unwrap();
        let model = cfg.shot_model().unwrap();
        for p in [PULSE_LEN_PATH, rtcontrol::COIL_PATH, "\\TOP.MAGNETICS:B4", "\\TOP.INTERF:NE"] {
            assert!(model.usage_of(&NodePath::parse(p).unwrap()).is_some(), "{p}");
        }
    }

    #[test]
    fn program_must_have_t0_and_matching_end() {
        let mut cfg = ShotConfig::default();
        cfg.clock_program = ClockProgram::new(vec![TimingEvent::new(3, PULSE_END, 500_000)]).unwrap();
        assert!(matches!(cfg.validate(), Err(SeqError::InvalidConfig(m)) if m.contains("T0")));
        cfg.clock_program = ClockProgram::standard(400_000);
        assert!(cfg.validate().is_err());
        assert!(ShotConfig::with_pulse_len(999).validate().is_err());
        assert!(ShotConfig::with_pulse_len(1000).validate().is_ok());
    }

    #[test]
    fn model_conflicts_rejected() {
        let cfg = ShotConfig {
            model: ModelTree::builder().parameter(rtcontrol::COIL_PATH).build().unwrap(),
            ..ShotConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_doc() {
        let cfg = ShotConfig::from_json("{}").unwrap();
        assert_eq!(cfg.pulse_len_us, 500_000);
        assert_eq!(cfg.diagnostics.len(), 2);
        let cfg = ShotConfig::from_json(
            r#"{"pulse_len_us": 100000, "cooldown_us": 0,
                "diagnostics": [{"name": "INTERF"}],
                "control": {"n_inputs": 4},
                "model": [{"path": "\\TOP.USER:NOTE", "usage": "PARAMETER"}]}"#,
        )
        .unwrap();
        assert_eq!(cfg.clock_program.find(PULSE_END).unwrap().offset_us, 100_000);
        assert_eq!(cfg.control.n_inputs, 4);
        assert_eq!(cfg.control.z_gains, ControllerConfig::default().z_gains);
        assert!(cfg.shot_model().unwrap().usage_of(&NodePath::parse("\\TOP.USER:NOTE").unwrap()).is_some());
        assert!(ShotConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(ShotConfig::from_json(r#"{"clock_program": [{"code":3,"name":"PULSE_END","offset_us":500000}]}"#).is_err());
    }
}
