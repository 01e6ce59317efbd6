//! Waveform export for one to sixty-four signals of a shot, as per-signal
//! CSV files or a single SVG grid, plus a watch loop that re-exports each
//! newly completed shot.

mod svg;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};

pub use svg::{grid_columns, grid_dims, PANEL_H, PANEL_W};

use crate::eventbus::{names, BusError, Connection};
use crate::shottree::{NodePath, ShotStore, ShotTree, Signal, TreeError};

pub const MAX_PANELS: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ScopeError {
    #[error("{0} panels requested; at most {MAX_PANELS} allowed")]
    TooManyPanels(usize),
    #[error("no signal paths given")]
    NoPanels,
    #[error("bad path {0:?}")]
    BadPath(String),
    #[error("unknown format {0:?}; expected csv or svg")]
    BadFormat(String),
    #[error("no such shot {0}")]
    NoSuchShot(u32),
    #[error("no such node {0}")]
    NoSuchNode(String),
    #[error("{0} holds no signal data")]
    NoData(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("storage error: {0}")]
    Store(TreeError),
    #[error("bad CSV: {0}")]
    BadCsv(String),
    #[error("broker: {0}")]
    Bus(#[from] BusError),
}

impl ScopeError {
    /// Process exit code: 1 usage, 2 not found, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScopeError::TooManyPanels(_)
            | ScopeError::NoPanels
            | ScopeError::BadPath(_)
            | ScopeError::BadFormat(_) => 1,
            ScopeError::NoSuchShot(_) | ScopeError::NoSuchNode(_) | ScopeError::NoData(_) => 2,
            ScopeError::Io { .. } | ScopeError::Store(_) | ScopeError::BadCsv(_) | ScopeError::Bus(_) => 3,
        }
    }

    fn from_tree(e: TreeError, path: &NodePath) -> Self {
        match e {
            TreeError::NoSuchShot(n) => ScopeError::NoSuchShot(n),
            TreeError::NoSuchNode(_) => ScopeError::NoSuchNode(path.to_string()),
            TreeError::NoData(_) | TreeError::UsageMismatch { .. } => ScopeError::NoData(path.to_string()),
            other => ScopeError::Store(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Svg,
}

impl FromStr for Format {
    type Err = ScopeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "svg" => Ok(Format::Svg),
            _ => Err(ScopeError::BadFormat(s.to_string())),
        }
    }
}

/// One plot slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub path: NodePath,
    pub label: Option<String>,
    pub y_range: Option<(f64, f64)>,
}

impl Panel {
    pub fn new(path: NodePath) -> Self {
        Panel {
            path,
            label: None,
            y_range: None,
        }
    }

    pub fn parse(raw: &str) -> Result<Self, ScopeError> {
        NodePath::parse(raw)
            .map(Panel::new)
            .map_err(|_| ScopeError::BadPath(raw.to_string()))
    }
}

pub fn panels_from_paths<S: AsRef<str>>(raw: &[S]) -> Result<Vec<Panel>, ScopeError> {
    raw.iter().map(|p| Panel::parse(p.as_ref())).collect()
}

fn check_bounds(n: usize) -> Result<(), ScopeError> {
    match n {
        0 => Err(ScopeError::NoPanels),
        n if n > MAX_PANELS => Err(ScopeError::TooManyPanels(n)),
        _ => Ok(()),
    }
}

pub fn csv_file_name(shot: u32, path: &NodePath) -> String {
    format!("{shot:06}_{}.csv", path.slug())
}

pub fn svg_file_name(shot: u32) -> String {
    format!("{shot:06}.svg")
}

/// `t_us,<path>` header then one row per sample. Floats use the shortest
/// representation that parses back to the same bits.
pub fn to_csv(path: &NodePath, signal: &Signal) -> String {
    let mut out = String::with_capacity(signal.samples.len() * 24);
    out.push_str("t_us,");
    out.push_str(path.as_str());
    out.push('\n');
    for (t, v) in signal.timebase.times().iter().zip(&signal.samples) {
        out.push_str(&format!("{t},{v:?}\n"));
    }
    out
}

/// Inverse of [`to_csv`]: `(path, times, values)`.
pub fn parse_csv(text: &str) -> Result<(String, Vec<i64>, Vec<f64>), ScopeError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ScopeError::BadCsv("empty".into()))?;
    let path = header
        .strip_prefix("t_us,")
        .ok_or_else(|| ScopeError::BadCsv(format!("bad header {header:?}")))?
        .to_string();
    let mut times = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let (t, v) = line
            .split_once(',')
            .ok_or_else(|| ScopeError::BadCsv(format!("row {}: {line:?}", i + 1)))?;
        times.push(t.parse().map_err(|_| ScopeError::BadCsv(format!("row {}: time {t:?}", i + 1)))?);
        values.push(v.parse().map_err(|_| ScopeError::BadCsv(format!("row {}: value {v:?}", i + 1)))?);
    }
    Ok((path, times, values))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, ScopeError> {
    fs::create_dir_all(dir).map_err(|source| ScopeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|source| ScopeError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn open(store: &ShotStore, shot: u32) -> Result<ShotTree, ScopeError> {
    store.open_shot(shot).map_err(|e| match e {
        TreeError::NoSuchShot(n) => ScopeError::NoSuchShot(n),
        other => ScopeError::Store(other),
    })
}

fn write_set(
    tree: &ShotTree,
    found: &[(&Panel, &Signal)],
    format: Format,
    out: &Path,
) -> Result<Vec<PathBuf>, ScopeError> {
    let shot = tree.shot_number();
    match format {
        Format::Csv => found
            .iter()
            .map(|(p, s)| write_file(out, &csv_file_name(shot, &p.path), &to_csv(&p.path, s)))
            .collect(),
        Format::Svg => {
            let data: Vec<svg::PanelData<'_>> = found
                .iter()
                .map(|(p, s)| svg::PanelData {
                    label: p.label.clone().unwrap_or_else(|| p.path.to_string()),
                    signal: s,
                    y_range: p.y_range,
                })
                .collect();
            let doc = svg::render(&format!("shot {shot}"), &data);
            Ok(vec![write_file(out, &svg_file_name(shot), &doc)?])
        }
    }
}

/// Exports every panel; any missing signal fails the whole export before
/// anything is written.
pub fn export(
    store: &ShotStore,
    shot: u32,
    panels: &[Panel],
    format: Format,
    out: &Path,
) -> Result<Vec<PathBuf>, ScopeError> {
    check_bounds(panels.len())?;
    let tree = open(store, shot)?;
    let found = panels
        .iter()
        .map(|p| {
            tree.get_signal(&p.path)
                .map(|s| (p, s))
                .map_err(|e| ScopeError::from_tree(e, &p.path))
        })
        .collect::<Result<Vec<_>, _>>()?;
    write_set(&tree, &found, format, out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSet {
    pub shot: u32,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<NodePath>,
}

/// Like [`export`] but skips panels without data, with a warning.
pub fn export_available(
    store: &ShotStore,
    shot: u32,
    panels: &[Panel],
    format: Format,
    out: &Path,
) -> Result<ExportSet, ScopeError> {
    check_bounds(panels.len())?;
    let tree = open(store, shot)?;
    let mut found = Vec::new();
    let mut skipped = Vec::new();
    for p in panels {
        match tree.get_signal(&p.path) {
            Ok(s) => found.push((p, s)),
            Err(e) => {
                log::warn!("shot {shot}: skipping {}: {e}", p.path);
                skipped.push(p.path.clone());
            }
        }
    }
    let files = if found.is_empty() {
        Vec::new()
    } else {
        write_set(&tree, &found, format, out)?
    };
    Ok(ExportSet { shot, files, skipped })
}

/// Node paths of `shot` matching `pattern`.
pub fn list(store: &ShotStore, shot: u32, pattern: &str) -> Result<Vec<NodePath>, ScopeError> {
    Ok(open(store, shot)?.walk(pattern))
}

/// Subscribes to `SHOT_DONE` and exports each completed shot until `stop`
/// is set. `on_set` sees every export set as it is written.
pub fn watch(
    store: &ShotStore,
    broker: &str,
    panels: &[Panel],
    format: Format,
    out: &Path,
    stop: &AtomicBool,
    mut on_set: impl FnMut(&ExportSet),
) -> Result<usize, ScopeError> {
    check_bounds(panels.len())?;
    let conn = Connection::connect(broker)?;
    conn.subscribe(names::SHOT_DONE)?;
    let mut sets = 0;
    while !stop.load(Ordering::SeqCst) {
        let ev = match conn.next_event(100_000) {
            Ok(ev) => ev,
            Err(BusError::Timeout) => continue,
            Err(e) => return Err(e.into()),
        };
        let text = ev.payload_text();
        let Ok(shot) = text.trim().parse::<u32>() else {
            log::warn!("ignoring SHOT_DONE payload {text:?}");
            continue;
        };
        match export_available(store, shot, panels, format, out) {
            Ok(set) => {
                sets += 1;
                on_set(&set);
            }
            Err(e) => log::warn!("shot {shot}: export failed: {e}"),
        }
    }
    Ok(sets)
}
