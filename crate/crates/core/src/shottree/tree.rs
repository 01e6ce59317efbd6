use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::path::glob_match;
use super::signal::blob;
use super::{ModelTree, NodePath, Parameter, Signal, TreeError, Usage};
use crate::eventbus::{self, names, EventSink};

pub(crate) const MANIFEST: &str = "manifest.json";
const MANIFEST_FORMAT: &str = "pulsectl-shot/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum TreeState {
    Open,
    Finalized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WriteKind {
    Signal,
    Parameter,
}

/// Notification passed to write hooks after every successful data write.
#[derive(Debug, Clone)]
pub struct TreeWrite {
    pub shot: u32,
    pub path: NodePath,
    pub kind: WriteKind,
}

pub type WriteHook = Arc<dyn Fn(&TreeWrite) + Send + Sync>;

/// Anything usable as a node path argument.
pub trait IntoNodePath {
    fn into_node_path(self) -> Result<NodePath, TreeError>;
}

impl IntoNodePath for &str {
    fn into_node_path(self) -> Result<NodePath, TreeError> {
        NodePath::parse(self)
    }
}

impl IntoNodePath for &String {
    fn into_node_path(self) -> Result<NodePath, TreeError> {
        NodePath::parse(self)
    }
}

impl IntoNodePath for &NodePath {
    fn into_node_path(self) -> Result<NodePath, TreeError> {
        Ok(self.clone())
    }
}

impl IntoNodePath for NodePath {
    fn into_node_path(self) -> Result<NodePath, TreeError> {
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Content {
    Signal(Signal),
    Parameter(Parameter),
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    usage: Usage,
    content: Option<Content>,
    writes: u64,
}

/// One shot's data. Single writer; see the module docs for the on-disk form.
pub struct ShotTree {
    shot: u32,
    dir: PathBuf,
    nodes: BTreeMap<NodePath, Node>,
    state: TreeState,
    created_at_us: u64,
    finalized_at_us: Option<u64>,
    logbook_refs: Vec<u64>,
    events: Option<Arc<dyn EventSink>>,
    hooks: Vec<WriteHook>,
}

impl fmt::Debug for ShotTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ShotTree")
            .field("shot", &self.shot)
            .field("dir", &self.dir)
            .field("nodes", &self.nodes.len())
            .field("state", &self.state)
            .finish()
    }
}

/// Content equality: ignores event connections and hooks.
impl PartialEq for ShotTree {
    fn eq(&self, other: &Self) -> bool {
        self.shot == other.shot
            && self.state == other.state
            && self.created_at_us == other.created_at_us
            && self.finalized_at_us == other.finalized_at_us
            && self.logbook_refs == other.logbook_refs
            && self.nodes.len() == other.nodes.len()
            && self
                .nodes
                .iter()
                .zip(&other.nodes)
                .all(|((pa, a), (pb, b))| pa == pb && node_bit_eq(a, b))
    }
}

fn node_bit_eq(a: &Node, b: &Node) -> bool {
    a.usage == b.usage
        && a.writes == b.writes
        && match (&a.content, &b.content) {
            (None, None) => true,
            (Some(Content::Signal(x)), Some(Content::Signal(y))) => x.bit_eq(y),
            (Some(Content::Parameter(x)), Some(Content::Parameter(y))) => match (&x.value, &y.value) {
                (super::ParamValue::Float(p), super::ParamValue::Float(q)) => {
                    p.to_bits() == q.to_bits() && x.units == y.units
                }
                _ => x == y,
            },
            _ => false,
        }
}

impl ShotTree {
    pub(crate) fn instantiate(
        shot: u32,
        dir: PathBuf,
        model: &ModelTree,
        created_at_us: u64,
        events: Option<Arc<dyn EventSink>>,
    ) -> Self {
        let nodes = model
            .nodes()
            .iter()
            .map(|d| {
                (
                    d.path.clone(),
                    Node {
                        usage: d.usage,
                        content: None,
                        writes: 0,
                    },
                )
            })
            .collect();
        ShotTree {
            shot,
            dir,
            nodes,
            state: TreeState::Open,
            created_at_us,
            finalized_at_us: None,
            logbook_refs: Vec::new(),
            events,
            hooks: Vec::new(),
        }
    }

    pub fn shot_number(&self) -> u32 {
        self.shot
    }

    pub fn state(&self) -> TreeState {
        self.state
    }

    pub fn is_finalized(&self) -> bool {
        self.state == TreeState::Finalized
    }

    pub fn created_at_us(&self) -> u64 {
        self.created_at_us
    }

    pub fn finalized_at_us(&self) -> Option<u64> {
        self.finalized_at_us
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Number of declared nodes, root included.
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn usage(&self, path: impl IntoNodePath) -> Result<Usage, TreeError> {
        let path = path.into_node_path()?;
        self.nodes
            .get(&path)
            .map(|n| n.usage)
            .ok_or_else(|| TreeError::NoSuchNode(path.to_string()))
    }

    pub fn has_data(&self, path: impl IntoNodePath) -> bool {
        path.into_node_path()
            .ok()
            .and_then(|p| self.nodes.get(&p))
            .is_some_and(|n| n.content.is_some())
    }

    pub fn write_count(&self, path: impl IntoNodePath) -> Result<u64, TreeError> {
        let path = path.into_node_path()?;
        self.nodes
            .get(&path)
            .map(|n| n.writes)
            .ok_or_else(|| TreeError::NoSuchNode(path.to_string()))
    }

    /// Posts `TREE_WRITE` and `SHOT_DONE` on this sink.
    pub fn attach_events(&mut self, sink: Arc<dyn EventSink>) {
        self.events = Some(sink);
    }

    pub fn add_write_hook(&mut self, hook: WriteHook) {
        self.hooks.push(hook);
    }

    pub fn set_logbook_refs(&mut self, ids: Vec<u64>) {
        self.logbook_refs = ids;
    }

    pub fn logbook_refs(&self) -> &[u64] {
        &self.logbook_refs
    }

    fn writable_node(
        &mut self,
        path: &NodePath,
        usage: Usage,
    ) -> Result<&mut Node, TreeError> {
        if self.state == TreeState::Finalized {
            return Err(TreeError::Finalized);
        }
        let node = self
            .nodes
            .get_mut(path)
            .ok_or_else(|| TreeError::NoSuchNode(path.to_string()))?;
        if node.usage != usage {
            return Err(TreeError::UsageMismatch {
                path: path.to_string(),
                declared: node.usage,
                attempted: usage,
            });
        }
        Ok(node)
    }

    fn blob_path(&self, path: &NodePath) -> PathBuf {
        self.dir.join(format!("{}.sig", path.slug()))
    }

    fn after_write(&self, path: NodePath, kind: WriteKind) {
        let write = TreeWrite {
            shot: self.shot,
            path,
            kind,
        };
        for hook in &self.hooks {
            hook(&write);
        }
        let payload = format!("{}:{}", self.shot, write.path);
        eventbus::notify(self.events.as_deref(), names::TREE_WRITE, payload.as_bytes());
    }

    /// Stores a signal and writes its blob.
    pub fn put_signal(&mut self, path: impl IntoNodePath, signal: Signal) -> Result<(), TreeError> {
        let path = path.into_node_path()?;
        self.writable_node(&path, Usage::Signal)?;
        signal.validate()?;
        let file = self.blob_path(&path);
        fs::write(&file, blob::encode(&signal.timebase, &signal.samples))
            .map_err(TreeError::io(&file))?;
        let node = self.nodes.get_mut(&path).expect("checked above");
        node.content = Some(Content::Signal(signal));
        node.writes += 1;
        self.after_write(path, WriteKind::Signal);
        Ok(())
    }

    pub fn get_signal(&self, path: impl IntoNodePath) -> Result<&Signal, TreeError> {
        let path = path.into_node_path()?;
        match self.readable(&path, Usage::Signal)? {
            Content::Signal(s) => Ok(s),
            Content::Parameter(_) => unreachable!("usage checked"),
        }
    }

    pub fn put_parameter(
        &mut self,
        path: impl IntoNodePath,
        parameter: Parameter,
    ) -> Result<(), TreeError> {
        let path = path.into_node_path()?;
        self.writable_node(&path, Usage::Parameter)?;
        parameter.validate()?;
        let node = self.nodes.get_mut(&path).expect("checked above");
        node.content = Some(Content::Parameter(parameter));
        node.writes += 1;
        self.after_write(path, WriteKind::Parameter);
        Ok(())
    }

    pub fn get_parameter(&self, path: impl IntoNodePath) -> Result<&Parameter, TreeError> {
        let path = path.into_node_path()?;
        match self.readable(&path, Usage::Parameter)? {
            Content::Parameter(p) => Ok(p),
            Content::Signal(_) => unreachable!("usage checked"),
        }
    }

    fn readable(&self, path: &NodePath, usage: Usage) -> Result<&Content, TreeError> {
        let node = self
            .nodes
            .get(path)
            .ok_or_else(|| TreeError::NoSuchNode(path.to_string()))?;
        if node.usage != usage {
            return Err(TreeError::UsageMismatch {
                path: path.to_string(),
                declared: node.usage,
                attempted: usage,
            });
        }
        node.content
            .as_ref()
            .ok_or_else(|| TreeError::NoData(path.to_string()))
    }

    /// Declared paths matching `pattern`, sorted. See [`glob_match`].
    pub fn walk(&self, pattern: &str) -> Vec<NodePath> {
        // BTreeMap iteration is already lexicographic.
        self.nodes
            .keys()
            .filter(|p| glob_match(pattern, p))
            .cloned()
            .collect()
    }

    /// Paths of nodes that currently hold data.
    pub fn paths_with_data(&self) -> Vec<NodePath> {
        self.nodes
            .iter()
            .filter(|(_, n)| n.content.is_some())
            .map(|(p, _)| p.clone())
            .collect()
    }

    /// Rewrites the manifest with the current content.
    pub fn flush(&self) -> Result<(), TreeError> {
        let manifest = self.to_manifest();
        let bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let file = self.dir.join(MANIFEST);
        fs::write(&file, bytes).map_err(TreeError::io(&file))
    }

    /// Flushes, freezes the tree and posts `SHOT_DONE`.
    pub fn finalize(&mut self, now_us: u64) -> Result<(), TreeError> {
        if self.state == TreeState::Finalized {
            return Err(TreeError::AlreadyFinalized);
        }
        self.state = TreeState::Finalized;
        self.finalized_at_us = Some(now_us);
        if let Err(e) = self.flush() {
            self.state = TreeState::Open;
            self.finalized_at_us = None;
            return Err(e);
        }
        let payload = self.shot.to_string();
        eventbus::notify(self.events.as_deref(), names::SHOT_DONE, payload.as_bytes());
        Ok(())
    }

    fn to_manifest(&self) -> Manifest {
        let nodes = self
            .nodes
            .iter()
            .map(|(path, node)| {
                let (signal, parameter) = match &node.content {
                    None => (None, None),
                    Some(Content::Signal(s)) => (
                        Some(SignalRef {
                            file: format!("{}.sig", path.slug()),
                            units: s.units.clone(),
                            length: s.samples.len() as u64,
                        }),
                        None,
                    ),
                    Some(Content::Parameter(p)) => (None, Some(p.clone())),
                };
                ManifestNode {
                    path: path.clone(),
                    usage: node.usage,
                    writes: node.writes,
                    signal,
                    parameter,
                }
            })
            .collect();
        Manifest {
            format: MANIFEST_FORMAT.to_string(),
            shot: self.shot,
            state: self.state,
            created_at_us: self.created_at_us,
            finalized_at_us: self.finalized_at_us,
            logbook_refs: self.logbook_refs.clone(),
            nodes,
        }
    }

    pub(crate) fn load(dir: PathBuf) -> Result<Self, TreeError> {
        let file = dir.join(MANIFEST);
        let bytes = fs::read(&file).map_err(TreeError::io(&file))?;
        let corrupt = |reason: String| TreeError::Corrupt {
            path: file.clone(),
            reason,
        };
        let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if m.format != MANIFEST_FORMAT {
            return Err(corrupt(format!("unknown format {:?}", m.format)));
        }
        let mut nodes = BTreeMap::new();
        for n in m.nodes {
            let content = match (n.signal, n.parameter) {
                (None, None) => None,
                (Some(sref), None) => {
                    let blob_file = dir.join(&sref.file);
                    let raw = fs::read(&blob_file).map_err(TreeError::io(&blob_file))?;
                    let (timebase, samples) =
                        blob::decode(&raw).map_err(|reason| TreeError::Corrupt {
                            path: blob_file.clone(),
                            reason,
                        })?;
                    Some(Content::Signal(Signal {
                        timebase,
                        samples,
                        units: sref.units,
                    }))
                }
                (None, Some(p)) => Some(Content::Parameter(p)),
                (Some(_), Some(_)) => {
                    return Err(corrupt(format!("{} holds both kinds", n.path)));
                }
            };
            nodes.insert(
                n.path,
                Node {
                    usage: n.usage,
                    content,
                    writes: n.writes,
                },
            );
        }
        Ok(ShotTree {
            shot: m.shot,
            dir,
            nodes,
            state: m.state,
            created_at_us: m.created_at_us,
            finalized_at_us: m.finalized_at_us,
            logbook_refs: m.logbook_refs,
            events: None,
            hooks: Vec::new(),
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    shot: u32,
    state: TreeState,
    created_at_us: u64,
    finalized_at_us: Option<u64>,
    logbook_refs: Vec<u64>,
    nodes: Vec<ManifestNode>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestNode {
    path: NodePath,
    usage: Usage,
    writes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    signal: Option<SignalRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    parameter: Option<Parameter>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SignalRef {
    file: String,
    units: String,
    length: u64,
}
