#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pulsectl::eventbus::{start_broker, Connection};
use pulsectl::rtcontrol::COIL_PATH;
use pulsectl::scope::csv_file_name;
use pulsectl::sequencer::{Sequencer, ShotConfig};
use pulsectl::shottree::{ModelTree, NodePath, ParamValue, Parameter, ShotStore, ShotTree, Signal};

pub const GROUPS: usize = 100;
pub const SIGNALS_PER_GROUP: usize = 50;
pub const PARAMS_PER_GROUP: usize = 250;
pub const SAMPLES: usize = 8;

pub fn signal_path(g: usize, i: usize) -> String {
    format!("\\TOP.G{g:03}:S{i:02}")
}

pub fn param_path(g: usize, i: usize) -> String {
    format!("\\TOP.G{g:03}:P{i:03}")
}

/// 5000 signal nodes and 25000 parameter nodes.
pub fn capacity_model() -> ModelTree {
    let mut b = ModelTree::builder();
    for g in 0..GROUPS {
        for i in 0..SIGNALS_PER_GROUP {
            b = b.signal(&signal_path(g, i));
        }
        for i in 0..PARAMS_PER_GROUP {
            b = b.parameter(&param_path(g, i));
        }
    }
    b.build().unwrap()
}

/// Deterministic contents: arbitrary finite bit patterns and every parameter kind.
pub fn capacity_data(seed: u64) -> (Vec<(String, Signal)>, Vec<(String, Parameter)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut finite = move || loop {
        let v = f64::from_bits(rng.random::<u64>());
        if v.is_finite() {
            return v;
        }
    };
    let mut sigs = Vec::new();
    let mut params = Vec::new();
    for g in 0..GROUPS {
        for i in 0..SIGNALS_PER_GROUP {
            let samples = (0..SAMPLES).map(|_| finite()).collect();
            let t0 = (g * 1000 + i) as i64 - 500;
            sigs.push((signal_path(g, i), Signal::uniform(t0, 1 + i as u64, samples, "V").unwrap()));
        }
        for i in 0..PARAMS_PER_GROUP {
            let p = match i % 4 {
                0 => Parameter::int((g * PARAMS_PER_GROUP + i) as i64 - 7),
                1 => Parameter::float(finite(), "s"),
                2 => Parameter::text(&format!("g{g} p{i} \"q\" ü")),
                _ => Parameter::new(ParamValue::Bool(i % 8 == 3), None),
            };
            params.push((param_path(g, i), p));
        }
    }
    (sigs, params)
}

pub fn fill(tree: &mut ShotTree, seed: u64) {
    let (sigs, params) = capacity_data(seed);
    for (p, s) in sigs {
        tree.put_signal(&p, s).unwrap();
    }
    for (p, v) in params {
        tree.put_parameter(&p, v).unwrap();
    }
}

/// Every node's data in `tree` equals `capacity_data(seed)` bit for bit.
pub fn matches_data(tree: &ShotTree, seed: u64) -> Result<(), String> {
    let (sigs, params) = capacity_data(seed);
    for (p, s) in &sigs {
        let got = tree.get_signal(p).map_err(|e| format!("{p}: {e}"))?;
        if !got.bit_eq(s) {
            return Err(format!("{p}: signal differs"));
        }
    }
    for (p, v) in &params {
        let got = tree.get_parameter(p).map_err(|e| format!("{p}: {e}"))?;
        let same = match (&got.value, &v.value) {
            (ParamValue::Float(a), ParamValue::Float(b)) => a.to_bits() == b.to_bits() && got.units == v.units,
            _ => got == v,
        };
        if !same {
            return Err(format!("{p}: parameter differs"));
        }
    }
    Ok(())
}

/// Relative path to file contents for everything under `root`.
pub fn dir_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

pub fn wait_for(timeout: Duration, mut pred: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if pred() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    false
}

/// Runs `scope watch` against a live broker while two shots complete.
/// Returns the export directory contents and the process output.
pub fn watch_two_shots(store_dir: &Path, out: &Path) -> (Vec<PathBuf>, Output) {
    let broker = start_broker("127.0.0.1:0").unwrap();
    let child = Command::new(env!("CARGO_BIN_EXE_scope"))
        .arg("--store")
        .arg(store_dir)
        .args(["watch", "--broker", &broker.local_addr().to_string()])
        .args(["--path", COIL_PATH, "--path", "\\TOP.NOT:THERE", "--out"])
        .arg(out)
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    assert!(wait_for(Duration::from_secs(20), || broker.stats().subscriptions >= 1));

    let poster = Arc::new(Connection::connect(broker.local_addr()).unwrap());
    let mut seq = Sequencer::new(ShotStore::open(store_dir).unwrap()).with_events(poster.clone());
    let first = seq.run_shot(ShotConfig::with_pulse_len(20_000)).unwrap().shot;
    let second = seq.run_shot(ShotConfig::with_pulse_len(20_000)).unwrap().shot;
    poster.sync().unwrap();
    let coil = NodePath::parse(COIL_PATH).unwrap();
    let expect = [out.join(csv_file_name(first, &coil)), out.join(csv_file_name(second, &coil))];
    assert!(wait_for(Duration::from_secs(20), || expect.iter().all(|p| p.exists())));

    let status = Command::new("kill")
        .args(["-INT", &child.id().to_string()])
        .status()
        .unwrap();
    assert!(status.success());
    let output = child.wait_with_output().unwrap();
    let mut files: Vec<PathBuf> = fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    (files, output)
}

