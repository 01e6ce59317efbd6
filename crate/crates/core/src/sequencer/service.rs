use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{SeqError, SeqState, Sequencer, ShotConfig, ShotRecord};
use crate::clock::Pacer;

/// Snapshot published by the driver thread.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SeqStatus {
    pub state: SeqState,
    pub shot: Option<u32>,
    pub last_shot: Option<u32>,
    pub now_us: u64,
    pub fault: Option<String>,
    pub last_record: Option<ShotRecord>,
}

type Reply<T> = mpsc::Sender<Result<T, SeqError>>;

enum Cmd {
    Configure(Box<ShotConfig>, Reply<()>),
    Arm(Reply<u32>),
    Trigger(Reply<()>),
    Abort(Reply<()>),
    Reset(Reply<()>),
    Stop,
}

struct Shared {
    status: Mutex<SeqStatus>,
    changed: Condvar,
}

impl Shared {
    fn update(&self, f: impl FnOnce(&mut SeqStatus)) {
        f(&mut self.status.lock().expect("status lock"));
        self.changed.notify_all();
    }
}

/// A [`Sequencer`] on its own driver thread. Commands from any thread are
/// queued and applied between simulation steps.
///
/// With `speed` set, simulated time is paced against the wall clock at that
/// multiple of real time; otherwise the simulation runs flat out.
pub struct SequencerService {
    tx: mpsc::Sender<Cmd>,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl SequencerService {
    pub fn spawn(mut seq: Sequencer, speed: Option<f64>) -> Self {
        let (state, shot) = seq.state();
        let shared = Arc::new(Shared {
            status: Mutex::new(SeqStatus {
                state,
                shot,
                last_shot: seq.last_shot(),
                now_us: seq.now_us(),
                fault: None,
                last_record: seq.records().last().cloned(),
            }),
            changed: Condvar::new(),
        });
        let s = shared.clone();
        seq.on_transition(move |tr| {
            s.update(|st| {
                st.state = tr.to;
                st.shot = tr.shot.filter(|_| tr.to != SeqState::Idle);
                st.now_us = tr.t_us;
            })
        });
        let (tx, rx) = mpsc::channel();
        let s = shared.clone();
        let thread = std::thread::Builder::new()
            .name("sequencer".into())
            .spawn(move || drive(seq, rx, s, speed.map(Pacer::new)))
            .expect("spawn sequencer thread");
        SequencerService {
            tx,
            shared,
            thread: Some(thread),
        }
    }

    fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Cmd) -> Result<T, SeqError> {
        let (rtx, rrx) = mpsc::channel();
        self.tx.send(make(rtx)).map_err(|_| SeqError::Stopped)?;
        rrx.recv().map_err(|_| SeqError::Stopped)?
    }

    pub fn configure(&self, config: ShotConfig) -> Result<(), SeqError> {
        self.call(|r| Cmd::Configure(Box::new(config), r))
    }

    pub fn arm(&self) -> Result<u32, SeqError> {
        self.call(Cmd::Arm)
    }

    pub fn trigger(&self) -> Result<(), SeqError> {
        self.call(Cmd::Trigger)
    }

    pub fn abort(&self) -> Result<(), SeqError> {
        self.call(Cmd::Abort)
    }

    pub fn reset(&self) -> Result<(), SeqError> {
        self.call(Cmd::Reset)
    }

    pub fn status(&self) -> SeqStatus {
        self.shared.status.lock().expect("status lock").clone()
    }

    pub fn state(&self) -> (SeqState, Option<u32>) {
        let st = self.shared.status.lock().expect("status lock");
        (st.state, st.shot)
    }

    /// Blocks until `pred` holds for the status or `timeout` passes.
    pub fn wait_until(&self, timeout: Duration, pred: impl Fn(&SeqStatus) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        let mut st = self.shared.status.lock().expect("status lock");
        loop {
            if pred(&st) {
                return true;
            }
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            st = self.shared.changed.wait_timeout(st, deadline - now).expect("status lock").0;
        }
    }

    pub fn shutdown(&mut self) {
        let _ = self.tx.send(Cmd::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for SequencerService {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn drive(mut seq: Sequencer, rx: mpsc::Receiver<Cmd>, shared: Arc<Shared>, mut pacer: Option<Pacer>) {
    loop {
        let cmd = match seq.next_due() {
            None => {
                if let Some(p) = pacer.as_mut() {
                    p.reset();
                }
                match rx.recv() {
                    Ok(cmd) => Some(cmd),
                    Err(_) => return,
                }
            }
            Some(due) => {
                let wait = pacer
                    .as_mut()
                    .map(|p| p.deadline(due).saturating_duration_since(Instant::now()))
                    .unwrap_or_default();
                match rx.recv_timeout(wait) {
                    Ok(cmd) => Some(cmd),
                    Err(RecvTimeoutError::Timeout) => None,
                    Err(RecvTimeoutError::Disconnected) => return,
                }
            }
        };
        match cmd {
            Some(Cmd::Stop) => return,
            Some(cmd) => apply(&mut seq, cmd),
            None => {
                seq.step();
            }
        }
        shared.update(|st| {
            let (state, shot) = seq.state();
            st.state = state;
            st.shot = shot;
            st.last_shot = seq.last_shot();
            st.now_us = seq.now_us();
            st.fault = seq.fault_reason().map(str::to_string);
            if st.last_record.as_ref() != seq.records().last() {
                st.last_record = seq.records().last().cloned();
            }
        });
    }
}

fn apply(seq: &mut Sequencer, cmd: Cmd) {
    // A caller that gave up waiting is not an error.
    match cmd {
        Cmd::Configure(cfg, r) => drop(r.send(seq.configure(*cfg))),
        Cmd::Arm(r) => drop(r.send(seq.arm())),
        Cmd::Trigger(r) => drop(r.send(seq.trigger())),
        Cmd::Abort(r) => drop(r.send(seq.abort())),
        Cmd::Reset(r) => drop(r.send(seq.reset())),
        Cmd::Stop => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shottree::ShotStore;

    #[test]
    fn runs_a_shot_from_another_thread() {
        let dir = tempfile::tempdir().unwrap();
        let svc = SequencerService::spawn(Sequencer::new(ShotStore::open(dir.path()).unwrap()), None);
        assert_eq!(svc.state(), (SeqState::Idle, None));
        assert!(matches!(svc.trigger(), Err(SeqError::WrongState { .. })));
        svc.configure(ShotConfig::with_pulse_len(20_000)).unwrap();
        assert_eq!(svc.arm().unwrap(), 1);
        assert_eq!(svc.state(), (SeqState::Armed, Some(1)));
        svc.trigger().unwrap();
        assert!(svc.wait_until(Duration::from_secs(10), |s| s.last_record.is_some()
            && s.state == SeqState::Idle));
        let st = svc.status();
        assert_eq!(st.last_shot, Some(1));
        assert_eq!(st.last_record.unwrap().states().len(), 8);
    }

    #[test]
    fn paced_abort_lands_mid_pulse() {
        let dir = tempfile::tempdir().unwrap();
        // 100x real time: the 1 s pre-T0 lead takes 10 ms of wall time.
        let svc = SequencerService::spawn(Sequencer::new(ShotStore::open(dir.path()).unwrap()), Some(100.0));
        svc.configure(ShotConfig::default()).unwrap();
        svc.arm().unwrap();
        svc.trigger().unwrap();
        assert!(svc.wait_until(Duration::from_secs(10), |s| s.state == SeqState::Pulsing));
        svc.abort().unwrap();
        assert_eq!(svc.state().0, SeqState::Cooldown);
        let rec = svc.status().last_record;
        assert!(rec.is_none() || rec.unwrap().shot == 1);
    }
}
