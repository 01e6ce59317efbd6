//! Shot-cycle state machine.
//!
//! ```text
//! IDLE -> CONFIGURED -> ARMED -> PULSING -> ACQUIRING -> ARCHIVING -> COOLDOWN -> IDLE
//!          (ARMED | PULSING) --abort--> COOLDOWN
//!          any shot phase --internal error--> FAULT --reset--> IDLE
//! ```
//!
//! [`Sequencer`] is the simulation driver: it owns the central clock, a
//! scheduler for control cycles and diagnostic samples, and the open shot
//! tree. It is single-threaded; [`SequencerService`] runs one on a thread and
//! takes operator commands from others.

mod config;
mod service;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use config::{
    ModelNodeDoc, ShotConfig, ShotConfigDoc, DAQ_TIMEOUTS_PATH, DEFAULT_COOLDOWN_US, DEFAULT_DEPOSIT_TIMEOUT_US,
    DEFAULT_PULSE_LEN_US, NEVENTS_PATH, OUTCOME_PATH, PULSE_LEN_PATH, T0_PATH,
};
pub use service::{SeqStatus, SequencerService};

use crate::clock::{CentralClock, ClockError, SimScheduler, PULSE_END, T0};
use crate::daq::{Daq, DepositReport};
use crate::eventbus::{self, names, EventSink};
use crate::rtcontrol::{self, ControlLoop, CYCLE_US};
use crate::shottree::{Parameter, ShotStore, ShotTree, TreeError, WriteHook};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SeqState {
    Idle,
    Configured,
    Armed,
    Pulsing,
    Acquiring,
    Archiving,
    Cooldown,
    Fault,
}

impl SeqState {
    pub const ALL: [SeqState; 8] = [
        SeqState::Idle,
        SeqState::Configured,
        SeqState::Armed,
        SeqState::Pulsing,
        SeqState::Acquiring,
        SeqState::Archiving,
        SeqState::Cooldown,
        SeqState::Fault,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeqState::Idle => "IDLE",
            SeqState::Configured => "CONFIGURED",
            SeqState::Armed => "ARMED",
            SeqState::Pulsing => "PULSING",
            SeqState::Acquiring => "ACQUIRING",
            SeqState::Archiving => "ARCHIVING",
            SeqState::Cooldown => "COOLDOWN",
            SeqState::Fault => "FAULT",
        }
    }

    /// Whether `self -> to` is an edge of the machine.
    pub fn can_go(self, to: SeqState) -> bool {
        use SeqState::*;
        matches!(
            (self, to),
            (Idle, Configured)
                | (Configured, Configured)
                | (Configured, Armed)
                | (Armed, Pulsing)
                | (Armed, Cooldown)
                | (Pulsing, Acquiring)
                | (Pulsing, Cooldown)
                | (Acquiring, Archiving)
                | (Archiving, Cooldown)
                | (Cooldown, Idle)
                | (Fault, Idle)
        ) || (to == Fault && matches!(self, Armed | Pulsing | Acquiring | Archiving | Cooldown))
    }

    /// Operator commands accepted in this state.
    pub fn allowed_ops(self) -> &'static [&'static str] {
        match self {
            SeqState::Idle => &["configure"],
            SeqState::Configured => &["configure", "arm"],
            SeqState::Armed => &["trigger", "abort"],
            SeqState::Pulsing => &["abort"],
            SeqState::Cooldown => &["configure"],
            SeqState::Fault => &["reset"],
            SeqState::Acquiring | SeqState::Archiving => &[],
        }
    }
}

impl fmt::Display for SeqState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SeqState {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SeqState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown state {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Outcome {
    Completed,
    Aborted,
    Faulted,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Completed => "COMPLETED",
            Outcome::Aborted => "ABORTED",
            Outcome::Faulted => "FAULTED",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ShotRecord {
    pub shot: u32,
    /// Every state occupied, with the simulated time it was entered.
    pub trace: Vec<(SeqState, u64)>,
    pub outcome: Outcome,
}

impl ShotRecord {
    pub fn states(&self) -> Vec<SeqState> {
        self.trace.iter().map(|(s, _)| *s).collect()
    }

    /// Simulated time spent in `state` (first visit).
    pub fn time_in(&self, state: SeqState) -> Option<u64> {
        let i = self.trace.iter().position(|(s, _)| *s == state)?;
        let next = self.trace.get(i + 1)?;
        Some(next.1 - self.trace[i].1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transition {
    pub from: SeqState,
    pub to: SeqState,
    pub shot: Option<u32>,
    pub t_us: u64,
}

impl Transition {
    /// `SEQ_STATE` payload.
    pub fn payload(&self) -> String {
        state_payload(self.to, self.shot)
    }
}

pub fn state_payload(state: SeqState, shot: Option<u32>) -> String {
    match shot {
        Some(n) => format!("{state}:{n}"),
        None => format!("{state}:-"),
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SeqError {
    #[error("{op} not allowed in state {state}")]
    WrongState { op: &'static str, state: SeqState },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("storage error: {0}")]
    Storage(#[from] TreeError),
    #[error("clock error: {0}")]
    Clock(#[from] ClockError),
    #[error("sequencer service stopped")]
    Stopped,
}

impl SeqError {
    /// Stable machine-readable kind.
    pub fn kind(&self) -> &'static str {
        match self {
            SeqError::WrongState { .. } => "WrongState",
            SeqError::InvalidConfig(_) => "InvalidConfig",
            SeqError::Storage(_) => "StorageError",
            SeqError::Clock(_) => "ClockError",
            SeqError::Stopped => "Stopped",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Sample { diag: usize, rel_us: u64 },
    Cycle { rel_us: u64 },
    FinishAcquire,
    CooldownDone,
}

struct ActiveShot {
    shot: u32,
    config: ShotConfig,
    tree: ShotTree,
    daq: Daq,
    control: Option<ControlLoop>,
    t0_us: Option<u64>,
    report: Option<DepositReport>,
}

type TransitionCb = Box<dyn FnMut(&Transition) + Send>;

pub struct Sequencer {
    store: ShotStore,
    sink: Option<Arc<dyn EventSink>>,
    state: SeqState,
    config: Option<ShotConfig>,
    staged: Option<ShotConfig>,
    clock: CentralClock,
    sched: SimScheduler<Action>,
    active: Option<ActiveShot>,
    /// Shot whose number is reported until the next IDLE.
    shot: Option<u32>,
    last_shot: Option<u32>,
    trace: Vec<(SeqState, u64)>,
    /// Outcome of the shot in cooldown; its record is published at IDLE.
    pending: Option<(u32, Outcome)>,
    records: Vec<ShotRecord>,
    fault: Option<String>,
    on_transition: Vec<TransitionCb>,
    write_hooks: Vec<WriteHook>,
}

impl fmt::Debug for Sequencer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Sequencer")
            .field("state", &self.state)
            .field("shot", &self.shot)
            .field("now_us", &self.now_us())
            .finish_non_exhaustive()
    }
}

impl Sequencer {
    pub fn new(store: ShotStore) -> Self {
        Sequencer {
            store,
            sink: None,
            state: SeqState::Idle,
            config: None,
            staged: None,
            clock: CentralClock::new(),
            sched: SimScheduler::new(),
            active: None,
            shot: None,
            last_shot: None,
            trace: vec![(SeqState::Idle, 0)],
            pending: None,
            records: Vec::new(),
            fault: None,
            on_transition: Vec::new(),
            write_hooks: Vec::new(),
        }
    }

    /// Posts `SEQ_STATE`, `CLOCK`, `TREE_WRITE` and `SHOT_DONE` on `sink`.
    pub fn with_events(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.clock.set_events(Some(sink.clone()));
        self.sink = Some(sink);
        self
    }

    /// Called for every state change before `SEQ_STATE` is posted.
    pub fn on_transition(&mut self, cb: impl FnMut(&Transition) + Send + 'static) {
        self.on_transition.push(Box::new(cb));
    }

    /// Attached to every shot tree created from now on.
    pub fn add_tree_write_hook(&mut self, hook: WriteHook) {
        self.write_hooks.push(hook);
    }

    pub fn store(&self) -> &ShotStore {
        &self.store
    }

    pub fn state(&self) -> (SeqState, Option<u32>) {
        (self.state, self.shot)
    }

    pub fn last_shot(&self) -> Option<u32> {
        self.last_shot
    }

    pub fn now_us(&self) -> u64 {
        self.clock.now_us()
    }

    pub fn records(&self) -> &[ShotRecord] {
        &self.records
    }

    pub fn fault_reason(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    /// Time since T0 of the running shot, if the pulse has started.
    pub fn pulse_elapsed_us(&self) -> Option<u64> {
        let t0 = self.active.as_ref()?.t0_us?;
        self.now_us().checked_sub(t0)
    }

    pub fn t0_us(&self) -> Option<u64> {
        self.active.as_ref()?.t0_us.or_else(|| {
            // Before T0 fires the clock already knows when it will be.
            self.clock.t0_us().filter(|_| self.state == SeqState::Armed && self.clock.is_running())
        })
    }

    pub fn configure(&mut self, config: ShotConfig) -> Result<(), SeqError> {
        match self.state {
            SeqState::Idle | SeqState::Configured => {
                config.validate()?;
                self.config = Some(config);
                self.transition(SeqState::Configured);
                Ok(())
            }
            SeqState::Cooldown => {
                config.validate()?;
                self.staged = Some(config);
                Ok(())
            }
            state => Err(SeqError::WrongState { op: "configure", state }),
        }
    }

    /// Allocates the next shot number and creates its tree.
    pub fn arm(&mut self) -> Result<u32, SeqError> {
        if self.state != SeqState::Configured {
            return Err(SeqError::WrongState {
                op: "arm",
                state: self.state,
            });
        }
        let config = self.config.clone().expect("configured state has a config");
        let model = config.shot_model()?;
        let mut shot = self.store.next_shot_number()?;
        if let Some(last) = self.last_shot {
            shot = shot.max(last + 1);
        }
        let mut tree = self.store.create_shot(&model, shot, self.now_us())?;
        if let Some(sink) = &self.sink {
            tree.attach_events(sink.clone());
        }
        for h in &self.write_hooks {
            tree.add_write_hook(h.clone());
        }
        let mut daq = Daq::new();
        for spec in &config.diagnostics {
            daq.register(spec.clone())
                .map_err(|e| SeqError::InvalidConfig(e.to_string()))?;
        }
        self.clock.load_program(config.clock_program.clone())?;
        self.active = Some(ActiveShot {
            shot,
            config,
            tree,
            daq,
            control: None,
            t0_us: None,
            report: None,
        });
        self.shot = Some(shot);
        self.last_shot = Some(shot);
        self.transition(SeqState::Armed);
        Ok(shot)
    }

    /// Starts the clock. T0 lands as soon as every pre-T0 event fits.
    pub fn trigger(&mut self) -> Result<(), SeqError> {
        if self.state != SeqState::Armed || self.clock.is_running() {
            return Err(SeqError::WrongState {
                op: "trigger",
                state: self.state,
            });
        }
        let program = self.clock.program().ok_or(ClockError::NoProgram)?;
        let lead = program.min_offset_us().unwrap_or(0).min(0).unsigned_abs();
        self.clock.start(self.now_us() + lead)?;
        Ok(())
    }

    /// Stops the shot now: partial data is deposited and the tree finalized
    /// with outcome ABORTED.
    pub fn abort(&mut self) -> Result<(), SeqError> {
        if !matches!(self.state, SeqState::Armed | SeqState::Pulsing) {
            return Err(SeqError::WrongState {
                op: "abort",
                state: self.state,
            });
        }
        self.clock.halt();
        self.sched.clear();
        let now = self.now_us();
        let result = self.deposit(Outcome::Aborted).and_then(|()| {
            let active = self.active.as_mut().expect("shot in progress");
            active.tree.finalize(now).map_err(SeqError::from)
        });
        match result {
            Ok(()) => {
                self.finish_shot(Outcome::Aborted);
                self.transition(SeqState::Cooldown);
                self.schedule_cooldown();
                Ok(())
            }
            Err(e) => {
                self.enter_fault(e.to_string());
                Err(e)
            }
        }
    }

    /// Leaves FAULT.
    pub fn reset(&mut self) -> Result<(), SeqError> {
        if self.state != SeqState::Fault {
            return Err(SeqError::WrongState {
                op: "reset",
                state: self.state,
            });
        }
        self.fault = None;
        self.enter_idle();
        Ok(())
    }

    /// Earliest pending clock event or scheduled action.
    pub fn next_due(&self) -> Option<u64> {
        match (self.clock.next_due(), self.sched.next_due()) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    /// Processes everything due at the next pending instant. Returns false
    /// when nothing is pending.
    pub fn step(&mut self) -> bool {
        let Some(t) = self.next_due() else {
            return false;
        };
        self.process_until(t);
        true
    }

    /// Runs the simulation up to and including `t_us`.
    pub fn advance_to(&mut self, t_us: u64) -> Result<(), SeqError> {
        if t_us < self.now_us() {
            return Err(ClockError::TimeReversal {
                to_us: t_us,
                now_us: self.now_us(),
            }
            .into());
        }
        while let Some(t) = self.next_due().filter(|&t| t <= t_us) {
            self.process_until(t);
        }
        self.clock.advance_to(t_us)?;
        self.sched.advance_to(t_us, |_, _| {})?;
        Ok(())
    }

    /// Steps until nothing is pending, i.e. the machine rests in IDLE,
    /// CONFIGURED, ARMED (untriggered) or FAULT.
    pub fn run_until_quiet(&mut self) {
        while self.step() {}
    }

    /// Configure, arm, trigger and run to the end of cooldown.
    pub fn run_shot(&mut self, config: ShotConfig) -> Result<ShotRecord, SeqError> {
        self.configure(config)?;
        let shot = self.arm()?;
        self.trigger()?;
        self.run_until_quiet();
        if let Some(reason) = &self.fault {
            return Err(SeqError::InvalidConfig(format!("shot {shot} faulted: {reason}")));
        }
        Ok(self.records.last().cloned().expect("shot recorded"))
    }

    fn process_until(&mut self, t: u64) {
        // Clock events at t go first so T0 can schedule work due at t.
        let fired = match self.clock.advance_to(t) {
            Ok(f) => f,
            Err(e) => return self.enter_fault(e.to_string()),
        };
        for b in fired {
            match b.name.as_str() {
                T0 => self.on_t0(b.abs_us),
                PULSE_END => self.on_pulse_end(),
                _ => {}
            }
            if self.state == SeqState::Fault {
                return;
            }
        }
        while let Some((_, action)) = self.sched.pop_due(t) {
            self.run_action(action);
            if self.state == SeqState::Fault {
                return;
            }
        }
    }

    fn on_t0(&mut self, t0: u64) {
        if self.state != SeqState::Armed {
            return;
        }
        let active = self.active.as_mut().expect("armed shot");
        let cfg = &active.config;
        let control = match ControlLoop::new(cfg.control.clone(), cfg.plant, cfg.initial) {
            Ok(c) => c,
            Err(e) => return self.enter_fault(e.to_string()),
        };
        active.control = Some(control);
        active.t0_us = Some(t0);
        let slots = active.daq.arm_all(cfg.pulse_len_us);
        let cycles = rtcontrol::cycle_count(cfg.pulse_len_us);
        // Samples are queued first so that at equal times they run before
        // the control cycle that may read them.
        for s in slots {
            let _ = self.sched.schedule_at(
                t0 + s.t_us,
                Action::Sample {
                    diag: s.diag,
                    rel_us: s.t_us,
                },
            );
        }
        for k in 0..cycles {
            let _ = self.sched.schedule_at(t0 + k * CYCLE_US, Action::Cycle { rel_us: k * CYCLE_US });
        }
        self.transition(SeqState::Pulsing);
    }

    fn on_pulse_end(&mut self) {
        if self.state != SeqState::Pulsing {
            return;
        }
        // Anything still queued belongs to the pulse window and is dropped.
        self.sched.clear();
        self.transition(SeqState::Acquiring);
        if let Err(e) = self.deposit(Outcome::Completed) {
            return self.enter_fault(e.to_string());
        }
        let active = self.active.as_ref().expect("shot in progress");
        let wait = active.daq.deposit_duration_us(active.config.deposit_timeout_us);
        let _ = self.sched.schedule_at(self.now_us() + wait, Action::FinishAcquire);
    }

    fn run_action(&mut self, action: Action) {
        match action {
            Action::Sample { diag, rel_us } => {
                let active = self.active.as_mut().expect("pulse in progress");
                if let Some(control) = &active.control {
                    let snap = control.snapshot(rel_us);
                    active.daq.sample(diag, rel_us, &snap);
                }
            }
            Action::Cycle { rel_us } => {
                let active = self.active.as_mut().expect("pulse in progress");
                let density = active.daq.feedback_value();
                if let Some(control) = active.control.as_mut() {
                    if let Err(e) = control.cycle(rel_us, density) {
                        self.enter_fault(e.to_string());
                    }
                }
            }
            Action::FinishAcquire => {
                self.transition(SeqState::Archiving);
                let now = self.now_us();
                let active = self.active.as_mut().expect("shot in progress");
                if let Err(e) = active.tree.finalize(now) {
                    return self.enter_fault(e.to_string());
                }
                self.finish_shot(Outcome::Completed);
                self.transition(SeqState::Cooldown);
                self.schedule_cooldown();
            }
            Action::CooldownDone => self.enter_idle(),
        }
    }

    /// Writes control waveforms, diagnostic data and bookkeeping parameters.
    fn deposit(&mut self, outcome: Outcome) -> Result<(), SeqError> {
        let active = self.active.as_mut().expect("shot in progress");
        let cfg = &active.config;
        let timeout = cfg.deposit_timeout_us;
        if let Some(control) = &active.control {
            if !control.records().is_empty() {
                rtcontrol::deposit(control.records(), &mut active.tree).map_err(|e| match e {
                    rtcontrol::RtError::Tree(t) => SeqError::Storage(t),
                    other => SeqError::InvalidConfig(other.to_string()),
                })?;
            }
        }
        let report = if active.t0_us.is_some() {
            active.daq.deposit_all(&mut active.tree, timeout)
        } else {
            DepositReport::default()
        };
        for f in report.failures() {
            log::warn!("shot {}: {} failed: {}", active.shot, f.name, f.error.as_deref().unwrap_or(""));
        }
        let tree = &mut active.tree;
        tree.put_parameter(PULSE_LEN_PATH, Parameter::float(cfg.pulse_len_us as f64 * 1e-6, "s"))?;
        tree.put_parameter(NEVENTS_PATH, Parameter::int(cfg.clock_program.len() as i64))?;
        tree.put_parameter(OUTCOME_PATH, Parameter::text(outcome.as_str()))?;
        tree.put_parameter(DAQ_TIMEOUTS_PATH, Parameter::text(&report.timed_out().join(",")))?;
        if let Some(t0) = active.t0_us {
            tree.put_parameter(T0_PATH, Parameter::int(t0 as i64))?;
        }
        active.report = Some(report);
        Ok(())
    }

    fn schedule_cooldown(&mut self) {
        let wait = self
            .active
            .as_ref()
            .map(|a| a.config.cooldown_us)
            .unwrap_or(DEFAULT_COOLDOWN_US);
        let _ = self.sched.schedule_at(self.now_us() + wait, Action::CooldownDone);
    }

    fn finish_shot(&mut self, outcome: Outcome) {
        if let Some(active) = &self.active {
            self.pending = Some((active.shot, outcome));
        }
    }

    fn enter_idle(&mut self) {
        self.active = None;
        self.shot = None;
        self.transition(SeqState::Idle);
        if let Some(staged) = self.staged.take() {
            self.config = Some(staged);
            self.transition(SeqState::Configured);
        }
    }

    fn enter_fault(&mut self, reason: String) {
        log::error!("sequencer fault: {reason}");
        self.clock.halt();
        self.sched.clear();
        self.fault = Some(reason);
        self.pending = self.active.as_ref().map(|a| (a.shot, Outcome::Faulted));
        self.transition(SeqState::Fault);
    }

    fn transition(&mut self, to: SeqState) {
        let from = self.state;
        debug_assert!(from.can_go(to), "illegal edge {from} -> {to}");
        let t_us = self.now_us();
        self.state = to;
        self.trace.push((to, t_us));
        let tr = Transition {
            from,
            to,
            shot: self.shot,
            t_us,
        };
        for cb in &mut self.on_transition {
            cb(&tr);
        }
        eventbus::notify(self.sink.as_deref(), names::SEQ_STATE, tr.payload().as_bytes());
        if matches!(to, SeqState::Idle | SeqState::Fault) {
            if let Some((shot, outcome)) = self.pending.take() {
                self.records.push(ShotRecord {
                    shot,
                    trace: self.trace.clone(),
                    outcome,
                });
            }
        }
        if to == SeqState::Idle {
            self.trace = vec![(SeqState::Idle, t_us)];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventbus::RecordingSink;
    use crate::shottree::TreeState;

    fn setup() -> (tempfile::TempDir, Sequencer, Arc<RecordingSink>) {
        let dir = tempfile::tempdir().unwrap();
        let store = ShotStore::open(dir.path()).unwrap();
        let sink = Arc::new(RecordingSink::new());
        let seq = Sequencer::new(store).with_events(sink.clone());
        (dir, seq, sink)
    }

    #[test]
    fn fresh_is_idle() {
        let (_d, seq, _) = setup();
        assert_eq!(seq.state(), (SeqState::Idle, None));
    }

    #[test]
    fn full_default_shot() {
        let (_d, mut seq, sink) = setup();
        let rec = seq.run_shot(ShotConfig::default()).unwrap();
        use SeqState::*;
        assert_eq!(
            rec.states(),
            [Idle, Configured, Armed, Pulsing, Acquiring, Archiving, Cooldown, Idle]
        );
        assert_eq!(rec.outcome, Outcome::Completed);
        assert_eq!(rec.time_in(Pulsing), Some(500_000));
        assert_eq!(rec.time_in(Cooldown), Some(DEFAULT_COOLDOWN_US));
        assert_eq!(seq.state(), (Idle, None));
        assert_eq!(seq.last_shot(), Some(1));
        assert_eq!(
            sink.texts(names::SEQ_STATE),
            [
                "CONFIGURED:-",
                "ARMED:1",
                "PULSING:1",
                "ACQUIRING:1",
                "ARCHIVING:1",
                "COOLDOWN:1",
                "IDLE:-"
            ]
        );
        assert_eq!(sink.texts(names::SHOT_DONE), ["1"]);
        assert_eq!(sink.count(names::CLOCK), 3);

        let tree = seq.store().open_shot(1).unwrap();
        assert_eq!(tree.state(), TreeState::Finalized);
        assert_eq!(tree.get_signal(rtcontrol::COIL_PATH).unwrap().samples.len(), 500);
        assert_eq!(tree.get_signal("\\TOP.MAGNETICS:B1").unwrap().samples.len(), 5000);
        assert_eq!(tree.get_signal("\\TOP.INTERF:NE").unwrap().samples.len(), 500);
        let len = tree.get_parameter(PULSE_LEN_PATH).unwrap();
        assert_eq!(*len, Parameter::float(0.5, "s"));
        assert_eq!(*tree.get_parameter(OUTCOME_PATH).unwrap(), Parameter::text("COMPLETED"));
    }

    #[test]
    fn illegal_commands() {
        let (_d, mut seq, _) = setup();
        assert!(matches!(seq.trigger(), Err(SeqError::WrongState { op: "trigger", .. })));
        assert!(matches!(seq.abort(), Err(SeqError::WrongState { op: "abort", .. })));
        assert!(matches!(seq.arm(), Err(SeqError::WrongState { .. })));
        seq.configure(ShotConfig::default()).unwrap();
        assert_eq!(seq.arm().unwrap(), 1);
        assert!(seq.store().exists(1));
        assert!(matches!(seq.arm(), Err(SeqError::WrongState { op: "arm", state: SeqState::Armed })));
        seq.trigger().unwrap();
        assert!(matches!(seq.trigger(), Err(SeqError::WrongState { .. })));
        let t0 = seq.t0_us().unwrap();
        seq.advance_to(t0 + 10).unwrap();
        assert_eq!(seq.state().0, SeqState::Pulsing);
        assert!(matches!(seq.configure(ShotConfig::default()), Err(SeqError::WrongState { .. })));
    }

    #[test]
    fn invalid_config_rejected() {
        let (_d, mut seq, _) = setup();
        let mut cfg = ShotConfig::default();
        cfg.clock_program = crate::clock::ClockProgram::new(vec![]).unwrap();
        assert!(matches!(seq.configure(cfg), Err(SeqError::InvalidConfig(_))));
        assert_eq!(seq.state().0, SeqState::Idle);
    }

    #[test]
    fn abort_while_armed() {
        let (_d, mut seq, sink) = setup();
        seq.configure(ShotConfig::default()).unwrap();
        let n = seq.arm().unwrap();
        seq.abort().unwrap();
        assert_eq!(seq.state(), (SeqState::Cooldown, Some(n)));
        seq.run_until_quiet();
        assert_eq!(seq.state(), (SeqState::Idle, None));
        let tree = seq.store().open_shot(n).unwrap();
        assert!(tree.is_finalized());
        assert_eq!(*tree.get_parameter(OUTCOME_PATH).unwrap(), Parameter::text("ABORTED"));
        assert!(!tree.has_data(rtcontrol::COIL_PATH));
        assert!(!tree.has_data("\\TOP.INTERF:NE"));
        assert_eq!(sink.texts(names::SHOT_DONE), [n.to_string()]);
        assert_eq!(seq.records()[0].outcome, Outcome::Aborted);
    }

    #[test]
    fn abort_mid_pulse_keeps_elapsed_cycles() {
        let (_d, mut seq, _) = setup();
        seq.configure(ShotConfig::default()).unwrap();
        let n = seq.arm().unwrap();
        seq.trigger().unwrap();
        let t0 = seq.t0_us().unwrap();
        seq.advance_to(t0 + 250_000 - 1).unwrap();
        assert_eq!(seq.pulse_elapsed_us(), Some(249_999));
        seq.abort().unwrap();
        seq.run_until_quiet();
        let tree = seq.store().open_shot(n).unwrap();
        assert_eq!(tree.get_signal(rtcontrol::COIL_PATH).unwrap().samples.len(), 250);
        assert_eq!(tree.get_signal("\\TOP.INTERF:NE").unwrap().samples.len(), 250);
        assert_eq!(*tree.get_parameter(OUTCOME_PATH).unwrap(), Parameter::text("ABORTED"));
        use SeqState::*;
        assert_eq!(seq.records()[0].states(), [Idle, Configured, Armed, Pulsing, Cooldown, Idle]);
    }

    #[test]
    fn configure_during_cooldown_is_staged() {
        let (_d, mut seq, sink) = setup();
        seq.configure(ShotConfig::default()).unwrap();
        seq.arm().unwrap();
        seq.abort().unwrap();
        seq.configure(ShotConfig::with_pulse_len(2000)).unwrap();
        assert_eq!(seq.state().0, SeqState::Cooldown);
        assert!(matches!(seq.arm(), Err(SeqError::WrongState { .. })));
        seq.run_until_quiet();
        assert_eq!(seq.state(), (SeqState::Configured, None));
        let texts = sink.texts(names::SEQ_STATE);
        assert_eq!(texts[texts.len() - 2..], ["IDLE:-", "CONFIGURED:-"]);
        assert_eq!(seq.arm().unwrap(), 2);
    }

    #[test]
    fn shot_numbers_increase_across_aborts() {
        let (_d, mut seq, _) = setup();
        let mut cfg = ShotConfig::with_pulse_len(5000);
        cfg.cooldown_us = 0;
        for expect in 1..=3 {
            seq.configure(cfg.clone()).unwrap();
            assert_eq!(seq.arm().unwrap(), expect);
            if expect == 2 {
                seq.abort().unwrap();
            } else {
                seq.trigger().unwrap();
            }
            seq.run_until_quiet();
        }
        assert_eq!(seq.store().list_shots().unwrap(), [1, 2, 3]);
    }

    #[test]
    fn slow_diagnostic_recorded_and_shot_archives() {
        let (_d, mut seq, _) = setup();
        let mut cfg = ShotConfig::with_pulse_len(10_000);
        cfg.diagnostics[0] = cfg.diagnostics[0].clone().with_latency(5_000_000);
        let rec = seq.run_shot(cfg).unwrap();
        assert_eq!(rec.outcome, Outcome::Completed);
        assert_eq!(rec.time_in(SeqState::Acquiring), Some(DEFAULT_DEPOSIT_TIMEOUT_US));
        let tree = seq.store().open_shot(rec.shot).unwrap();
        assert_eq!(*tree.get_parameter(DAQ_TIMEOUTS_PATH).unwrap(), Parameter::text("MAGNETICS"));
        assert!(!tree.has_data("\\TOP.MAGNETICS:B1"));
        assert!(tree.has_data("\\TOP.INTERF:NE"));
    }

    #[test]
    fn storage_failure_faults_and_reset_recovers() {
        let (dir, mut seq, _) = setup();
        let cfg = ShotConfig::with_pulse_len(10_000);
        seq.configure(cfg).unwrap();
        let n = seq.arm().unwrap();
        seq.trigger().unwrap();
        // Pull the shot directory out from under the tree.
        std::fs::remove_dir_all(dir.path().join("shots").join(format!("{n:06}"))).unwrap();
        seq.run_until_quiet();
        assert_eq!(seq.state().0, SeqState::Fault);
        assert!(seq.fault_reason().is_some());
        assert_eq!(seq.records().last().unwrap().outcome, Outcome::Faulted);
        assert!(matches!(seq.configure(ShotConfig::default()), Err(SeqError::WrongState { .. })));
        seq.reset().unwrap();
        assert_eq!(seq.state(), (SeqState::Idle, None));
    }

    #[test]
    fn legal_edge_table() {
        use SeqState::*;
        assert!(Idle.can_go(Configured));
        assert!(!Idle.can_go(Armed));
        assert!(!Idle.can_go(Fault));
        assert!(Pulsing.can_go(Cooldown));
        assert!(!Acquiring.can_go(Cooldown));
        for s in SeqState::ALL {
            assert_eq!(s.as_str().parse::<SeqState>().unwrap(), s);
        }
    }
}
