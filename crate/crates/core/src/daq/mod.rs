//! Simulated diagnostics.
//!
//! A diagnostic is a pure generator sampled at a fixed period during the
//! pulse into a local [`RingBuffer`], then deposited into the shot tree as
//! one uniform signal per channel at `\TOP.<NAME>:<CHANNEL>`. FEEDBACK
//! diagnostics also expose their newest sample to the control loop.

mod ring;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use ring::RingBuffer;

use crate::rtcontrol::PlantSnapshot;
use crate::shottree::{ModelBuilder, NodePath, ShotTree, Signal};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DaqError {
    #[error("diagnostic {0} already registered")]
    DuplicateName(String),
    #[error("diagnostic {0} has no channels")]
    EmptyChannels(String),
    #[error("invalid diagnostic: {0}")]
    BadSpec(String),
    #[error("no diagnostic named {0}")]
    UnknownDiagnostic(String),
    #[error("{0} has no channel {1}")]
    UnknownChannel(String, String),
    #[error("{0} is not a feedback diagnostic")]
    NotFeedback(String),
    #[error("{0} has not sampled yet")]
    NoSampleYet(String),
    #[error("no built-in diagnostic named {0}")]
    UnknownBuiltin(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DiagKind {
    Passive,
    Feedback,
}

/// `(t_us since T0, plant snapshot, seed) -> one value per channel`.
pub type Generator = Arc<dyn Fn(u64, &PlantSnapshot, u64) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
pub struct DiagnosticSpec {
    pub name: String,
    pub channels: Vec<String>,
    pub sample_dt_us: u64,
    pub kind: DiagKind,
    pub units: String,
    pub seed: u64,
    /// Buffer size; `None` sizes it to the expected sample count.
    pub capacity: Option<usize>,
    /// Simulated time the post-pulse transfer takes.
    pub deposit_latency_us: u64,
    pub generator: Generator,
}

impl fmt::Debug for DiagnosticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DiagnosticSpec")
            .field("name", &self.name)
            .field("channels", &self.channels)
            .field("sample_dt_us", &self.sample_dt_us)
            .field("kind", &self.kind)
            .field("capacity", &self.capacity)
            .field("deposit_latency_us", &self.deposit_latency_us)
            .finish_non_exhaustive()
    }
}

impl DiagnosticSpec {
    pub fn new(
        name: &str,
        channels: &[&str],
        sample_dt_us: u64,
        kind: DiagKind,
        generator: impl Fn(u64, &PlantSnapshot, u64) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        DiagnosticSpec {
            name: name.to_ascii_uppercase(),
            channels: channels.iter().map(|c| c.to_ascii_uppercase()).collect(),
            sample_dt_us,
            kind,
            units: "a.u.".into(),
            seed: 0,
            capacity: None,
            deposit_latency_us: 0,
            generator: Arc::new(generator),
        }
    }

    pub fn with_capacity(mut self, capacity: usize) -> Self {
        self.capacity = Some(capacity);
        self
    }

    pub fn with_latency(mut self, latency_us: u64) -> Self {
        self.deposit_latency_us = latency_us;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_units(mut self, units: &str) -> Self {
        self.units = units.into();
        self
    }

    pub fn node(&self) -> Result<NodePath, DaqError> {
        NodePath::root()
            .child(&self.name)
            .map_err(|_| DaqError::BadSpec(format!("name {:?} is not a node segment", self.name)))
    }

    pub fn channel_path(&self, channel: &str) -> Result<NodePath, DaqError> {
        self.node()?
            .member(channel)
            .map_err(|_| DaqError::BadSpec(format!("channel {channel:?} is not a node segment")))
    }

    pub fn validate(&self) -> Result<(), DaqError> {
        if self.channels.is_empty() {
            return Err(DaqError::EmptyChannels(self.name.clone()));
        }
        if self.sample_dt_us == 0 {
            return Err(DaqError::BadSpec(format!("{}: sample_dt_us must be >= 1", self.name)));
        }
        for c in &self.channels {
            self.channel_path(c)?;
        }
        let mut sorted = self.channels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.channels.len() {
            return Err(DaqError::BadSpec(format!("{}: duplicate channel", self.name)));
        }
        Ok(())
    }

    /// Samples taken over a pulse of `pulse_len_us`.
    pub fn expected_samples(&self, pulse_len_us: u64) -> u64 {
        pulse_len_us / self.sample_dt_us
    }
}

pub const MAGNETICS: &str = "MAGNETICS";
pub const INTERF: &str = "INTERF";

const MAGNETICS_SCALE: [f64; 4] = [1.0, 0.8, 0.6, 0.4];

/// Built-in diagnostics by name: `MAGNETICS` (passive, four pickup coils
/// reading scaled z every 100 us) and `INTERF` (feedback, line density
/// every 1 ms).
pub fn builtin(name: &str) -> Result<DiagnosticSpec, DaqError> {
    match name.to_ascii_uppercase().as_str() {
        MAGNETICS => Ok(DiagnosticSpec::new(
            MAGNETICS,
            &["B1", "B2", "B3", "B4"],
            100,
            DiagKind::Passive,
            |_, snap, _| MAGNETICS_SCALE.iter().map(|k| k * snap.z).collect(),
        )
        .with_units("T")),
        INTERF => Ok(DiagnosticSpec::new(INTERF, &["NE"], 1000, DiagKind::Feedback, |_, snap, _| {
            vec![snap.n]
        })),
        other => Err(DaqError::UnknownBuiltin(other.to_string())),
    }
}

/// JSON form of a diagnostic: a built-in referenced by name with optional
/// overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiagnosticDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_dt_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deposit_latency_us: Option<u64>,
}

impl DiagnosticDoc {
    pub fn named(name: &str) -> Self {
        DiagnosticDoc {
            name: name.to_string(),
            sample_dt_us: None,
            capacity: None,
            seed: None,
            deposit_latency_us: None,
        }
    }

    pub fn resolve(&self) -> Result<DiagnosticSpec, DaqError> {
        let mut spec = builtin(&self.name)?;
        if let Some(dt) = self.sample_dt_us {
            spec.sample_dt_us = dt;
        }
        spec.capacity = self.capacity.or(spec.capacity);
        spec.seed = self.seed.unwrap_or(spec.seed);
        spec.deposit_latency_us = self.deposit_latency_us.unwrap_or(spec.deposit_latency_us);
        spec.validate()?;
        Ok(spec)
    }
}

/// One scheduled sample: diagnostic index and time since T0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleSlot {
    pub t_us: u64,
    pub diag: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiagReport {
    pub name: String,
    pub samples: usize,
    pub signals: usize,
    pub evicted: u64,
    pub timed_out: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DepositReport {
    pub diagnostics: Vec<DiagReport>,
}

impl DepositReport {
    pub fn timed_out(&self) -> Vec<&str> {
        self.diagnostics.iter().filter(|d| d.timed_out).map(|d| d.name.as_str()).collect()
    }

    pub fn failures(&self) -> Vec<&DiagReport> {
        self.diagnostics.iter().filter(|d| d.error.is_some()).collect()
    }

    pub fn signals(&self) -> usize {
        self.diagnostics.iter().map(|d| d.signals).sum()
    }
}

struct Slot {
    spec: DiagnosticSpec,
    buffer: RingBuffer,
    error: Option<String>,
}

/// Registry and buffers of every diagnostic taking part in shots.
#[derive(Default)]
pub struct Daq {
    slots: Vec<Slot>,
}

impl fmt::Debug for Daq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.slots.iter().map(|s| &s.spec.name)).finish()
    }
}

impl Daq {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: DiagnosticSpec) -> Result<(), DaqError> {
        if self.slots.iter().any(|s| s.spec.name == spec.name) {
            return Err(DaqError::DuplicateName(spec.name));
        }
        spec.validate()?;
        self.slots.push(Slot {
            spec,
            buffer: RingBuffer::new(0),
            error: None,
        });
        Ok(())
    }

    pub fn inventory(&self) -> Vec<&str> {
        self.slots.iter().map(|s| s.spec.name.as_str()).collect()
    }

    pub fn specs(&self) -> impl Iterator<Item = &DiagnosticSpec> {
        self.slots.iter().map(|s| &s.spec)
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn buffer(&self, name: &str) -> Option<&RingBuffer> {
        self.slots.iter().find(|s| s.spec.name == name).map(|s| &s.buffer)
    }

    /// Declares every channel node.
    pub fn declare_nodes(&self, mut b: ModelBuilder) -> ModelBuilder {
        for s in &self.slots {
            for c in &s.spec.channels {
                if let Ok(p) = s.spec.channel_path(c) {
                    b = b.signal(p.as_str());
                }
            }
        }
        b
    }

    /// Clears and sizes buffers for a pulse and returns every sample slot in
    /// firing order.
    pub fn arm_all(&mut self, pulse_len_us: u64) -> Vec<SampleSlot> {
        let mut slots = Vec::new();
        for (i, s) in self.slots.iter_mut().enumerate() {
            let n = s.spec.expected_samples(pulse_len_us);
            s.buffer.reset(s.spec.capacity.unwrap_or(n as usize));
            s.error = None;
            slots.extend((0..n).map(|k| SampleSlot {
                t_us: k * s.spec.sample_dt_us,
                diag: i,
            }));
        }
        slots.sort();
        slots
    }

    /// Takes one sample. A generator returning the wrong number of values
    /// marks the diagnostic failed for the rest of the shot.
    pub fn sample(&mut self, diag: usize, t_us: u64, snap: &PlantSnapshot) {
        let Some(s) = self.slots.get_mut(diag) else {
            return;
        };
        if s.error.is_some() {
            return;
        }
        let row = (s.spec.generator)(t_us, snap, s.spec.seed);
        if row.len() != s.spec.channels.len() {
            s.error = Some(format!(
                "generator returned {} values for {} channels",
                row.len(),
                s.spec.channels.len()
            ));
            return;
        }
        s.buffer.push(t_us, row);
    }

    pub fn latest(&self, name: &str, channel: &str) -> Result<(u64, f64), DaqError> {
        let name = name.to_ascii_uppercase();
        let s = self
            .slots
            .iter()
            .find(|s| s.spec.name == name)
            .ok_or_else(|| DaqError::UnknownDiagnostic(name.clone()))?;
        if s.spec.kind != DiagKind::Feedback {
            return Err(DaqError::NotFeedback(name));
        }
        let channel = channel.to_ascii_uppercase();
        let idx = s
            .spec
            .channels
            .iter()
            .position(|c| *c == channel)
            .ok_or_else(|| DaqError::UnknownChannel(name.clone(), channel))?;
        let (t, row) = s.buffer.latest().ok_or(DaqError::NoSampleYet(name))?;
        Ok((*t, row[idx]))
    }

    /// Newest value of the first channel of the first feedback diagnostic.
    pub fn feedback_value(&self) -> Option<f64> {
        let s = self.slots.iter().find(|s| s.spec.kind == DiagKind::Feedback)?;
        s.buffer.latest().map(|(_, row)| row[0])
    }

    /// Largest latency among diagnostics that meet `timeout_us`.
    pub fn deposit_duration_us(&self, timeout_us: u64) -> u64 {
        let mut d = 0;
        for s in &self.slots {
            if s.spec.deposit_latency_us > timeout_us {
                d = d.max(timeout_us);
            } else {
                d = d.max(s.spec.deposit_latency_us);
            }
        }
        d
    }

    /// Writes every buffered channel into the tree. Diagnostics slower than
    /// `timeout_us` are skipped; failures are reported, never returned.
    pub fn deposit_all(&self, tree: &mut ShotTree, timeout_us: u64) -> DepositReport {
        let mut report = DepositReport::default();
        for s in &self.slots {
            let mut r = DiagReport {
                name: s.spec.name.clone(),
                samples: s.buffer.len(),
                signals: 0,
                evicted: s.buffer.evicted(),
                timed_out: false,
                error: s.error.clone(),
            };
            if s.spec.deposit_latency_us > timeout_us {
                r.timed_out = true;
                report.diagnostics.push(r);
                continue;
            }
            if r.error.is_none() && !s.buffer.is_empty() {
                if let Err(e) = deposit_one(s, tree, &mut r.signals) {
                    r.error = Some(e);
                }
            }
            report.diagnostics.push(r);
        }
        report
    }
}

fn deposit_one(s: &Slot, tree: &mut ShotTree, written: &mut usize) -> Result<(), String> {
    let t0 = s.buffer.iter().next().map(|(t, _)| *t as i64).unwrap_or(0);
    for (ci, channel) in s.spec.channels.iter().enumerate() {
        let samples: Vec<f64> = s.buffer.iter().map(|(_, row)| row[ci]).collect();
        let path = s.spec.channel_path(channel).map_err(|e| e.to_string())?;
        let signal = Signal::uniform(t0, s.spec.sample_dt_us, samples, &s.spec.units).map_err(|e| e.to_string())?;
        tree.put_signal(&path, signal).map_err(|e| e.to_string())?;
        *written += 1;
    }
    Ok(())
}
