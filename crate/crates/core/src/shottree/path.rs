use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TreeError;

pub const MAX_SEGMENT_LEN: usize = 12;
const ROOT: &str = "\\TOP";

/// Canonical node path such as `\TOP.RTCTRL.COIL:CMD`.
///
/// Structure levels are joined with `.`; the last level may instead be a
/// `:` member. Every segment is 1 to 12 characters of `[A-Z0-9_]`. Input is
/// case-insensitive and stored uppercase.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodePath(String);

impl NodePath {
    pub fn root() -> Self {
        NodePath(ROOT.to_string())
    }

    pub fn parse(raw: &str) -> Result<Self, TreeError> {
        let bad = || TreeError::BadPath(raw.to_string());
        let upper = raw.trim().to_ascii_uppercase();
        let rest = upper.strip_prefix(ROOT).ok_or_else(bad)?;

        let (structure, member) = match rest.split_once(':') {
            Some((s, m)) => (s, Some(m)),
            None => (rest, None),
        };
        if !structure.is_empty() {
            let tail = structure.strip_prefix('.').ok_or_else(bad)?;
            if !tail.split('.').all(valid_segment) {
                return Err(bad());
            }
        }
        if let Some(m) = member {
            if !valid_segment(m) {
                return Err(bad());
            }
        }
        Ok(NodePath(upper))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == ROOT
    }

    /// Enclosing node, or `None` for the root.
    pub fn parent(&self) -> Option<NodePath> {
        if self.is_root() {
            return None;
        }
        let cut = self.0.rfind([':', '.']).expect("non-root path has a separator");
        Some(NodePath(self.0[..cut].to_string()))
    }

    /// Number of segments below the root.
    pub fn depth(&self) -> usize {
        self.0.matches(['.', ':']).count()
    }

    /// File-name form: leading backslash dropped, member separator as `-`.
    pub fn slug(&self) -> String {
        self.0[1..].replace(':', "-")
    }

    /// Joins a child structure segment.
    pub fn child(&self, segment: &str) -> Result<NodePath, TreeError> {
        NodePath::parse(&format!("{}.{}", self.0, segment))
    }

    /// Joins a member segment.
    pub fn member(&self, segment: &str) -> Result<NodePath, TreeError> {
        NodePath::parse(&format!("{}:{}", self.0, segment))
    }
}

fn valid_segment(seg: &str) -> bool {
    (1..=MAX_SEGMENT_LEN).contains(&seg.len())
        && seg
            .bytes()
            .all(|b| b.is_ascii_uppercase() || b.is_ascii_digit() || b == b'_')
}

impl FromStr for NodePath {
    type Err = TreeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        NodePath::parse(s)
    }
}

impl fmt::Display for NodePath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Serialize for NodePath {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for NodePath {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        NodePath::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Matches a walk pattern against a path.
///
/// `*` matches any run of characters inside one segment, `**` matches across
/// segments. Patterns not starting with `\` are taken relative to `\TOP`,
/// so `**` selects every node except the root.
pub fn glob_match(pattern: &str, path: &NodePath) -> bool {
    let pattern = pattern.trim().to_ascii_uppercase();
    if pattern.is_empty() {
        return false;
    }
    let p: Vec<char> = pattern.chars().collect();
    if pattern.starts_with('\\') {
        let s: Vec<char> = path.as_str().chars().collect();
        match_from(&p, &s)
    } else {
        // Relative: strip `\TOP` and the separator that follows it.
        let s = &path.as_str()[ROOT.len()..];
        let mut chars = s.chars();
        match chars.next() {
            Some('.') | Some(':') => {
                let s: Vec<char> = chars.collect();
                match_from(&p, &s)
            }
            _ => false,
        }
    }
}

fn match_from(p: &[char], s: &[char]) -> bool {
    match p.first() {
        None => s.is_empty(),
        Some('*') if p.get(1) == Some(&'*') => {
            let rest = &p[2..];
            (0..=s.len()).any(|i| match_from(rest, &s[i..]))
        }
        Some('*') => {
            let rest = &p[1..];
            let mut i = 0;
            loop {
                if match_from(rest, &s[i..]) {
                    return true;
                }
                if i == s.len() || s[i] == '.' || s[i] == ':' {
                    return false;
                }
                i += 1;
            }
        }
        Some(c) => s.first() == Some(c) && match_from(&p[1..], &s[1..]),
    }
}
