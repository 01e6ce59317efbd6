use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::tree::MANIFEST;
use super::{ModelTree, ShotTree, TreeError};
use crate::eventbus::EventSink;

const SHOTS_DIR: &str = "shots";
const LOGBOOK: &str = "logbook.jsonl";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub id: u64,
    pub shot: u32,
    pub author: String,
    pub body: String,
    pub time_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NewLogEntry {
    pub shot: u32,
    pub author: String,
    pub body: String,
    pub time_us: u64,
}

/// Root of a shot archive: `shots/` plus the logbook.
#[derive(Clone)]
pub struct ShotStore {
    root: PathBuf,
    events: Option<Arc<dyn EventSink>>,
    logbook_lock: Arc<Mutex<()>>,
}

impl std::fmt::Debug for ShotStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShotStore").field("root", &self.root).finish()
    }
}

pub(crate) fn shot_dir_name(shot: u32) -> String {
    format!("{shot:06}")
}

impl ShotStore {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, TreeError> {
        let root = root.as_ref().to_path_buf();
        let shots = root.join(SHOTS_DIR);
        fs::create_dir_all(&shots).map_err(TreeError::io(&shots))?;
        Ok(ShotStore {
            root,
            events: None,
            logbook_lock: Arc::new(Mutex::new(())),
        })
    }

    /// Trees created afterwards post their events on `sink`.
    pub fn with_events(mut self, sink: Arc<dyn EventSink>) -> Self {
        self.events = Some(sink);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn shot_dir(&self, shot: u32) -> PathBuf {
        self.root.join(SHOTS_DIR).join(shot_dir_name(shot))
    }

    pub fn exists(&self, shot: u32) -> bool {
        self.shot_dir(shot).join(MANIFEST).is_file()
    }

    /// Creates shot `shot` from `model`, writing its directory and skeleton
    /// manifest.
    pub fn create_shot(
        &self,
        model: &ModelTree,
        shot: u32,
        created_at_us: u64,
    ) -> Result<ShotTree, TreeError> {
        if shot == 0 {
            return Err(TreeError::InvalidShotNumber);
        }
        // Re-validate in case the model was assembled without its constructor.
        let model = ModelTree::new(model.nodes().to_vec())?;
        let dir = self.shot_dir(shot);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(TreeError::DuplicateShot(shot))
            }
            Err(e) => return Err(TreeError::io(&dir)(e)),
        }
        let tree = ShotTree::instantiate(shot, dir, &model, created_at_us, self.events.clone());
        tree.flush()?;
        Ok(tree)
    }

    /// Loads a shot from disk. The returned tree has no event connection.
    pub fn open_shot(&self, shot: u32) -> Result<ShotTree, TreeError> {
        if !self.exists(shot) {
            return Err(TreeError::NoSuchShot(shot));
        }
        ShotTree::load(self.shot_dir(shot))
    }

    /// Shot numbers present on disk, ascending.
    pub fn list_shots(&self) -> Result<Vec<u32>, TreeError> {
        let dir = self.root.join(SHOTS_DIR);
        let mut shots = Vec::new();
        for entry in fs::read_dir(&dir).map_err(TreeError::io(&dir))? {
            let entry = entry.map_err(TreeError::io(&dir))?;
            let name = entry.file_name();
            let Some(name) = name.to_str() else { continue };
            if name.len() == 6 && name.bytes().all(|b| b.is_ascii_digit()) {
                if let Ok(n) = name.parse::<u32>() {
                    if n > 0 {
                        shots.push(n);
                    }
                }
            }
        }
        shots.sort_unstable();
        Ok(shots)
    }

    /// One past the highest shot on disk; 1 for an empty store.
    pub fn next_shot_number(&self) -> Result<u32, TreeError> {
        Ok(self.list_shots()?.last().map_or(1, |n| n + 1))
    }

    fn logbook_path(&self) -> PathBuf {
        self.root.join(LOGBOOK)
    }

    fn read_logbook(&self) -> Result<Vec<LogEntry>, TreeError> {
        let path = self.logbook_path();
        let file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(TreeError::io(&path)(e)),
        };
        let mut entries = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(TreeError::io(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: LogEntry = serde_json::from_str(&line).map_err(|e| TreeError::Corrupt {
                path: path.clone(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            entries.push(entry);
        }
        Ok(entries)
    }

    /// Appends an entry and returns its id.
    pub fn logbook_add(&self, entry: NewLogEntry) -> Result<u64, TreeError> {
        if entry.body.trim().is_empty() {
            return Err(TreeError::EmptyBody);
        }
        let _guard = self.logbook_lock.lock().unwrap();
        let id = self.read_logbook()?.last().map_or(1, |e| e.id + 1);
        let record = LogEntry {
            id,
            shot: entry.shot,
            author: entry.author,
            body: entry.body,
            time_us: entry.time_us,
        };
        let mut line = serde_json::to_string(&record).expect("log entry serializes");
        line.push('\n');
        let path = self.logbook_path();
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(TreeError::io(&path))?;
        f.write_all(line.as_bytes()).map_err(TreeError::io(&path))?;
        Ok(id)
    }

    /// Entries for `shot`, in id order.
    pub fn logbook_query(&self, shot: u32) -> Result<Vec<LogEntry>, TreeError> {
        Ok(self
            .read_logbook()?
            .into_iter()
            .filter(|e| e.shot == shot)
            .collect())
    }

    pub fn logbook_all(&self) -> Result<Vec<LogEntry>, TreeError> {
        self.read_logbook()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eventbus::RecordingSink;
    use crate::shottree::{ParamValue, Parameter, Signal, TreeState, Usage};

    fn small_model() -> ModelTree {
        ModelTree::from_decls([("\\TOP", Usage::Structure), ("\\TOP.A", Usage::Signal)]).unwrap()
    }

    fn store() -> (tempfile::TempDir, ShotStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = ShotStore::open(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn create_copies_declarations_only() {
        let (_d, store) = store();
        let tree = store.create_shot(&small_model(), 1, 0).unwrap();
        assert_eq!(tree.state(), TreeState::Open);
        assert_eq!(tree.node_count(), 2);
        assert!(tree.paths_with_data().is_empty());
        assert!(store.shot_dir(1).join("manifest.json").is_file());
        assert!(store.shot_dir(1).ends_with("shots/000001"));
    }

    #[test]
    fn duplicate_and_zero_shots_rejected() {
        let (_d, store) = store();
        store.create_shot(&small_model(), 1, 0).unwrap();
        assert!(matches!(
            store.create_shot(&small_model(), 1, 0),
            Err(TreeError::DuplicateShot(1))
        ));
        assert!(matches!(
            store.create_shot(&small_model(), 0, 0),
            Err(TreeError::InvalidShotNumber)
        ));
    }

    #[test]
    fn uniform_signal_round_trip() {
        let (_d, store) = store();
        let mut tree = store.create_shot(&small_model(), 1, 0).unwrap();
        let samples: Vec<f64> = (0..500).map(f64::from).collect();
        let sig = Signal::uniform(0, 1000, samples, "V").unwrap();
        tree.put_signal("\\TOP.A", sig.clone()).unwrap();
        assert!(tree.get_signal("\\TOP.A").unwrap().bit_eq(&sig));
        assert!(tree.get_signal("\\top.a").unwrap().bit_eq(&sig));
        assert_eq!(tree.write_count("\\TOP.A").unwrap(), 1);
        assert!(store.shot_dir(1).join("TOP.A.sig").is_file());
    }

    #[test]
    fn write_errors() {
        let (_d, store) = store();
        let model = ModelTree::builder().signal("\\TOP.A").parameter("\\TOP.P").build().unwrap();
        let mut tree = store.create_shot(&model, 1, 0).unwrap();
        let sig = Signal::uniform(0, 1, vec![1.0], "").unwrap();
        assert!(matches!(
            tree.put_signal("\\TOP.NOPE", sig.clone()),
            Err(TreeError::NoSuchNode(_))
        ));
        assert!(matches!(
            tree.put_signal("\\TOP.P", sig.clone()),
            Err(TreeError::UsageMismatch { .. })
        ));
        assert!(matches!(
            tree.put_parameter("\\TOP.A", Parameter::int(1)),
            Err(TreeError::UsageMismatch { .. })
        ));
        let bad = Signal {
            timebase: crate::shottree::Timebase::uniform(0, 1, 2),
            samples: vec![1.0],
            units: String::new(),
        };
        assert!(matches!(tree.put_signal("\\TOP.A", bad), Err(TreeError::BadSignal(_))));
        assert!(matches!(tree.get_signal("\\TOP.A"), Err(TreeError::NoData(_))));
        assert!(matches!(tree.get_signal("\\TOP.Q"), Err(TreeError::NoSuchNode(_))));
    }

    #[test]
    fn parameters_of_every_kind() {
        let (_d, store) = store();
        let model = ModelTree::builder()
            .parameter("\\TOP.SEQ:PULSE_LEN")
            .parameter("\\TOP.CLOCK:NEVENTS")
            .parameter("\\TOP.X:T")
            .parameter("\\TOP.X:B")
            .build()
            .unwrap();
        let mut tree = store.create_shot(&model, 1, 0).unwrap();
        let values = [
            ("\\TOP.SEQ:PULSE_LEN", Parameter::float(0.5, "s")),
            ("\\TOP.CLOCK:NEVENTS", Parameter::int(15)),
            ("\\TOP.X:T", Parameter::text("hello")),
            ("\\TOP.X:B", Parameter::new(ParamValue::Bool(true), None)),
        ];
        for (p, v) in &values {
            tree.put_parameter(*p, v.clone()).unwrap();
        }
        tree.finalize(10).unwrap();
        let reopened = store.open_shot(1).unwrap();
        for (p, v) in &values {
            assert_eq!(tree.get_parameter(*p).unwrap(), v);
            assert_eq!(reopened.get_parameter(*p).unwrap(), v);
        }
        assert!(reopened == tree);
    }

    #[test]
    fn walk_patterns() {
        let (_d, store) = store();
        let model = ModelTree::builder()
            .signal("\\TOP.RTCTRL.Z")
            .signal("\\TOP.RTCTRL.COIL:CMD")
            .build()
            .unwrap();
        let tree = store.create_shot(&model, 1, 0).unwrap();
        let all: Vec<String> = tree.walk("**").iter().map(|p| p.to_string()).collect();
        assert_eq!(
            all,
            ["\\TOP.RTCTRL", "\\TOP.RTCTRL.COIL", "\\TOP.RTCTRL.COIL:CMD", "\\TOP.RTCTRL.Z"]
        );
        assert_eq!(tree.walk("**").len(), tree.node_count() - 1);
        let direct: Vec<String> =
            tree.walk("\\TOP.RTCTRL.*").iter().map(|p| p.to_string()).collect();
        assert_eq!(direct, ["\\TOP.RTCTRL.COIL", "\\TOP.RTCTRL.Z"]);
        assert!(tree.walk("").is_empty());
    }

    #[test]
    fn finalize_freezes_and_notifies_once() {
        let (_d, store) = store();
        let sink = Arc::new(RecordingSink::new());
        let store = store.with_events(sink.clone());
        let mut tree = store.create_shot(&small_model(), 7, 0).unwrap();
        let sig = Signal::uniform(0, 1, vec![1.0], "").unwrap();
        tree.put_signal("\\TOP.A", sig.clone()).unwrap();
        tree.finalize(5).unwrap();
        assert!(matches!(tree.put_signal("\\TOP.A", sig), Err(TreeError::Finalized)));
        assert!(matches!(tree.finalize(6), Err(TreeError::AlreadyFinalized)));
        assert_eq!(sink.texts("TREE_WRITE"), ["7:\\TOP.A"]);
        assert_eq!(sink.texts("SHOT_DONE"), ["7"]);
    }

    #[test]
    fn shot_numbering() {
        let (_d, store) = store();
        assert_eq!(store.next_shot_number().unwrap(), 1);
        store.create_shot(&small_model(), 3, 0).unwrap();
        store.create_shot(&small_model(), 1, 0).unwrap();
        assert_eq!(store.list_shots().unwrap(), [1, 3]);
        assert_eq!(store.next_shot_number().unwrap(), 4);
        assert!(matches!(store.open_shot(2), Err(TreeError::NoSuchShot(2))));
    }

    #[test]
    fn logbook() {
        let (_d, store) = store();
        let entry = |shot, body: &str| NewLogEntry {
            shot,
            author: "ops".into(),
            body: body.into(),
            time_us: 0,
        };
        let a = store.logbook_add(entry(1, "first")).unwrap();
        store.logbook_add(entry(2, "other shot")).unwrap();
        let b = store.logbook_add(entry(1, "second")).unwrap();
        assert!(b > a);
        let got = store.logbook_query(1).unwrap();
        assert_eq!(got.iter().map(|e| e.id).collect::<Vec<_>>(), [a, b]);
        assert!(store.logbook_query(99).unwrap().is_empty());
        assert!(matches!(store.logbook_add(entry(1, "")), Err(TreeError::EmptyBody)));
        assert!(store.root().join("logbook.jsonl").is_file());
    }
}
