//! Hierarchical per-shot data store.
//!
//! A [`ModelTree`] declares the node skeleton once; [`ShotStore::create_shot`]
//! instantiates it for every shot. Nodes hold either a [`Signal`] (waveform on
//! a [`Timebase`]) or a [`Parameter`] (scalar), as declared by their
//! [`Usage`]. A tree is written while `OPEN` and becomes immutable once
//! finalized.
//!
//! On disk each shot lives in `shots/<NNNNNN>/` with a `manifest.json` and
//! one `.sig` blob per stored signal. The operator logbook is a single
//! append-only `logbook.jsonl` next to the `shots/` directory.

mod model;
mod path;
mod signal;
mod store;
mod tree;

use std::io;
use std::path::PathBuf;

pub use model::{ModelBuilder, ModelTree, NodeDecl, Usage};
pub use path::{glob_match, NodePath, MAX_SEGMENT_LEN};
pub use signal::{ParamValue, Parameter, Signal, Timebase};
pub use store::{LogEntry, NewLogEntry, ShotStore};
pub use tree::{IntoNodePath, ShotTree, TreeState, TreeWrite, WriteHook, WriteKind};

/// Signal blob magic and version.
pub use signal::blob::{MAGIC as BLOB_MAGIC, VERSION as BLOB_VERSION};

pub fn encode_signal_blob(timebase: &Timebase, samples: &[f64]) -> Vec<u8> {
    signal::blob::encode(timebase, samples)
}

pub fn decode_signal_blob(bytes: &[u8]) -> Result<(Timebase, Vec<f64>), String> {
    signal::blob::decode(bytes)
}

#[derive(Debug, thiserror::Error)]
pub enum TreeError {
    #[error("shot {0} already exists")]
    DuplicateShot(u32),
    #[error("no shot {0} in store")]
    NoSuchShot(u32),
    #[error("shot numbers start at 1")]
    InvalidShotNumber,
    #[error("invalid model tree: {0}")]
    InvalidModel(String),
    #[error("malformed node path {0:?}")]
    BadPath(String),
    #[error("tree is finalized")]
    Finalized,
    #[error("tree is already finalized")]
    AlreadyFinalized,
    #[error("no node {0}")]
    NoSuchNode(String),
    #[error("node {path} is declared {declared:?}, not {attempted:?}")]
    UsageMismatch {
        path: String,
        declared: Usage,
        attempted: Usage,
    },
    #[error("bad signal: {0}")]
    BadSignal(String),
    #[error("bad parameter: {0}")]
    BadParameter(String),
    #[error("node {0} has no data")]
    NoData(String),
    #[error("logbook entry body is empty")]
    EmptyBody,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt store file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
}

impl TreeError {
    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> TreeError {
        let path = path.into();
        move |source| TreeError::Io { path, source }
    }
}
