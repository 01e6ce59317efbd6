//! Facility master clock on a simulated microsecond timeline.
//!
//! A [`ClockProgram`] holds up to fifteen coded [`TimingEvent`]s with signed
//! offsets from T0. Once started, the [`CentralClock`] fires each event at
//! `t0 + offset` as the simulation advances, broadcasting it as a `CLOCK`
//! bus event whose payload is the encoded code byte followed by the absolute
//! time as a little-endian `u64`.
//!
//! All arithmetic is integral; no time value is ever rounded.

mod scheduler;

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use scheduler::SimScheduler;

use crate::eventbus::{self, names, EventName, EventSink};

pub const MAX_EVENTS: usize = 15;

pub const ARM: &str = "ARM";
pub const T0: &str = "T0";
pub const PULSE_END: &str = "PULSE_END";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClockError {
    #[error("program has {0} events; at most {MAX_EVENTS} allowed")]
    TooManyEvents(usize),
    #[error("event code {0} outside 1..=15")]
    BadCode(u8),
    #[error("byte {0:#04x} fails the complement check")]
    BadCheck(u8),
    #[error("event code {0} used twice")]
    DuplicateCode(u8),
    #[error("event name {0} used twice")]
    DuplicateName(String),
    #[error("invalid event name {0:?}")]
    BadName(String),
    #[error("clock is running")]
    ClockRunning,
    #[error("no program loaded")]
    NoProgram,
    #[error("time {at_us} us is before now ({now_us} us)")]
    TimeInPast { at_us: i128, now_us: u64 },
    #[error("cannot move time back from {now_us} us to {to_us} us")]
    TimeReversal { to_us: u64, now_us: u64 },
}

/// Encodes a timing code as one byte: low nibble the code, high nibble its
/// complement to 15.
pub fn encode_event(code: u8) -> Result<u8, ClockError> {
    if !(1..=15).contains(&code) {
        return Err(ClockError::BadCode(code));
    }
    Ok(((15 - code) << 4) | code)
}

pub fn decode_event(byte: u8) -> Result<u8, ClockError> {
    let code = byte & 0x0F;
    let check = byte >> 4;
    if check + code != 15 {
        return Err(ClockError::BadCheck(byte));
    }
    if code == 0 {
        // 0xF0 passes the check but 0 means "no event".
        return Err(ClockError::BadCode(0));
    }
    Ok(code)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimingEvent {
    pub code: u8,
    pub name: String,
    pub offset_us: i64,
}

impl TimingEvent {
    pub fn new(code: u8, name: &str, offset_us: i64) -> Self {
        TimingEvent {
            code,
            name: name.to_string(),
            offset_us,
        }
    }
}

/// Validated, sorted list of timing events.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TimingEvent>", into = "Vec<TimingEvent>")]
pub struct ClockProgram {
    events: Vec<TimingEvent>,
}

impl ClockProgram {
    pub fn new(mut events: Vec<TimingEvent>) -> Result<Self, ClockError> {
        if events.len() > MAX_EVENTS {
            return Err(ClockError::TooManyEvents(events.len()));
        }
        let mut codes = HashSet::new();
        let mut names = HashSet::new();
        for ev in &mut events {
            if !(1..=15).contains(&ev.code) {
                return Err(ClockError::BadCode(ev.code));
            }
            let name = EventName::new(&ev.name).map_err(|_| ClockError::BadName(ev.name.clone()))?;
            ev.name = name.as_str().to_string();
            if !codes.insert(ev.code) {
                return Err(ClockError::DuplicateCode(ev.code));
            }
            if !names.insert(ev.name.clone()) {
                return Err(ClockError::DuplicateName(ev.name.clone()));
            }
        }
        events.sort_by_key(|e| (e.offset_us, e.code));
        Ok(ClockProgram { events })
    }

    /// `ARM` one second before T0, `T0`, and `PULSE_END` after the pulse.
    pub fn standard(pulse_len_us: u64) -> Self {
        ClockProgram::new(vec![
            TimingEvent::new(1, ARM, -1_000_000),
            TimingEvent::new(2, T0, 0),
            TimingEvent::new(3, PULSE_END, pulse_len_us as i64),
        ])
        .expect("standard program is valid")
    }

    pub fn events(&self) -> &[TimingEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<&TimingEvent> {
        let upper = name.to_ascii_uppercase();
        self.events.iter().find(|e| e.name == upper)
    }

    pub fn min_offset_us(&self) -> Option<i64> {
        self.events.first().map(|e| e.offset_us)
    }
}

impl TryFrom<Vec<TimingEvent>> for ClockProgram {
    type Error = ClockError;
    fn try_from(v: Vec<TimingEvent>) -> Result<Self, Self::Error> {
        ClockProgram::new(v)
    }
}

impl From<ClockProgram> for Vec<TimingEvent> {
    fn from(p: ClockProgram) -> Self {
        p.events
    }
}

/// One fired timing event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClockBroadcast {
    pub code: u8,
    pub name: String,
    pub offset_us: i64,
    pub abs_us: u64,
}

impl ClockBroadcast {
    /// Encoded code byte followed by the absolute time, little-endian.
    pub fn payload(&self) -> [u8; 9] {
        let mut out = [0u8; 9];
        out[0] = encode_event(self.code).expect("program codes are valid");
        out[1..].copy_from_slice(&self.abs_us.to_le_bytes());
        out
    }

    /// Parses a `CLOCK` payload into `(code, absolute time)`.
    pub fn parse_payload(payload: &[u8]) -> Result<(u8, u64), ClockError> {
        let [byte, rest @ ..] = payload else {
            return Err(ClockError::BadCheck(0));
        };
        let code = decode_event(*byte)?;
        let abs: [u8; 8] = rest.try_into().map_err(|_| ClockError::BadCheck(*byte))?;
        Ok((code, u64::from_le_bytes(abs)))
    }
}

type Callback = Box<dyn FnMut(&ClockBroadcast) + Send>;

/// The master clock. Driven by a single owner through [`CentralClock::advance_to`];
/// callbacks run inline and must not call back into the clock.
pub struct CentralClock {
    sched: SimScheduler<usize>,
    program: Option<ClockProgram>,
    t0_us: Option<u64>,
    sink: Option<Arc<dyn EventSink>>,
    callbacks: Vec<Callback>,
}

impl fmt::Debug for CentralClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CentralClock")
            .field("now_us", &self.sched.now_us())
            .field("t0_us", &self.t0_us)
            .field("pending", &self.sched.len())
            .finish()
    }
}

impl Default for CentralClock {
    fn default() -> Self {
        Self::new()
    }
}

impl CentralClock {
    pub fn new() -> Self {
        Self::starting_at(0)
    }

    pub fn starting_at(now_us: u64) -> Self {
        CentralClock {
            sched: SimScheduler::starting_at(now_us),
            program: None,
            t0_us: None,
            sink: None,
            callbacks: Vec::new(),
        }
    }

    pub fn with_events(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn set_events(&mut self, sink: Option<Arc<dyn EventSink>>) {
        self.sink = sink;
    }

    pub fn on_event(&mut self, cb: impl FnMut(&ClockBroadcast) + Send + 'static) {
        self.callbacks.push(Box::new(cb));
    }

    pub fn now_us(&self) -> u64 {
        self.sched.now_us()
    }

    /// Running means events are still pending.
    pub fn is_running(&self) -> bool {
        !self.sched.is_empty()
    }

    pub fn program(&self) -> Option<&ClockProgram> {
        self.program.as_ref()
    }

    /// T0 of the most recent start.
    pub fn t0_us(&self) -> Option<u64> {
        self.t0_us
    }

    pub fn next_due(&self) -> Option<u64> {
        self.sched.next_due()
    }

    pub fn load_program(&mut self, program: ClockProgram) -> Result<(), ClockError> {
        if self.is_running() {
            return Err(ClockError::ClockRunning);
        }
        self.program = Some(program);
        Ok(())
    }

    /// Schedules every program event relative to `t0_at_us`.
    pub fn start(&mut self, t0_at_us: u64) -> Result<(), ClockError> {
        if self.is_running() {
            return Err(ClockError::ClockRunning);
        }
        let program = self.program.as_ref().ok_or(ClockError::NoProgram)?;
        let now = self.sched.now_us();
        let mut times = Vec::with_capacity(program.len());
        for ev in program.events() {
            let abs = t0_at_us as i128 + ev.offset_us as i128;
            if abs < now as i128 || abs > u64::MAX as i128 {
                return Err(ClockError::TimeInPast { at_us: abs, now_us: now });
            }
            times.push(abs as u64);
        }
        // Program order is (offset, code), so equal times fire by ascending code.
        for (idx, abs) in times.into_iter().enumerate() {
            self.sched.schedule_at(abs, idx)?;
        }
        self.t0_us = Some(t0_at_us);
        Ok(())
    }

    /// Drops all pending events.
    pub fn halt(&mut self) {
        self.sched.clear();
    }

    /// Fires every event due up to `t_us` and returns them in order.
    pub fn advance_to(&mut self, t_us: u64) -> Result<Vec<ClockBroadcast>, ClockError> {
        let mut due = Vec::new();
        self.sched.advance_to(t_us, |abs, idx| due.push((abs, idx)))?;
        let program = match &self.program {
            Some(p) => p,
            None => return Ok(Vec::new()),
        };
        let fired: Vec<ClockBroadcast> = due
            .into_iter()
            .map(|(abs_us, idx)| {
                let ev = &program.events()[idx];
                ClockBroadcast {
                    code: ev.code,
                    name: ev.name.clone(),
                    offset_us: ev.offset_us,
                    abs_us,
                }
            })
            .collect();
        for b in &fired {
            eventbus::notify(self.sink.as_deref(), names::CLOCK, &b.payload());
            for cb in &mut self.callbacks {
                cb(b);
            }
        }
        Ok(fired)
    }
}

/// Sleeps so that simulated time tracks wall time at `speed` times real
/// time. Best effort only; nothing depends on it for correctness.
#[derive(Debug)]
pub struct Pacer {
    speed: f64,
    origin: Option<(Instant, u64)>,
}

impl Pacer {
    pub fn new(speed: f64) -> Self {
        Pacer {
            speed: if speed > 0.0 { speed } else { 1.0 },
            origin: None,
        }
    }

    pub fn reset(&mut self) {
        self.origin = None;
    }

    /// Wall-clock instant at which `sim_us` should happen. The first call
    /// after a reset anchors the mapping.
    pub fn deadline(&mut self, sim_us: u64) -> Instant {
        let (wall0, sim0) = *self.origin.get_or_insert((Instant::now(), sim_us));
        let elapsed_sim = sim_us.saturating_sub(sim0) as f64 / self.speed;
        wall0 + Duration::from_micros(elapsed_sim as u64)
    }

    pub fn pace(&mut self, sim_us: u64) {
        let target = self.deadline(sim_us);
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }
}
