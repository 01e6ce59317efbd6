use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{NodePath, TreeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Usage {
    Signal,
    Parameter,
    Structure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDecl {
    pub path: NodePath,
    pub usage: Usage,
}

/// Template every shot tree is instantiated from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<NodeDecl>", into = "Vec<NodeDecl>")]
pub struct ModelTree {
    nodes: Vec<NodeDecl>,
}

impl ModelTree {
    /// Validates declarations: root present, paths unique, every parent declared.
    pub fn new(nodes: Vec<NodeDecl>) -> Result<Self, TreeError> {
        let mut seen = BTreeMap::new();
        for decl in &nodes {
            if seen.insert(decl.path.clone(), decl.usage).is_some() {
                return Err(TreeError::InvalidModel(format!("duplicate path {}", decl.path)));
            }
        }
        match seen.get(&NodePath::root()) {
            Some(Usage::Structure) => {}
            Some(u) => {
                return Err(TreeError::InvalidModel(format!(
                    "root must be a STRUCTURE, not {u:?}"
                )))
            }
            None => return Err(TreeError::InvalidModel("missing \\TOP".into())),
        }
        for decl in &nodes {
            if let Some(parent) = decl.path.parent() {
                if !seen.contains_key(&parent) {
                    return Err(TreeError::InvalidModel(format!(
                        "{} has undeclared parent {parent}",
                        decl.path
                    )));
                }
            }
        }
        Ok(ModelTree { nodes })
    }

    /// Builds from raw text paths; malformed paths become `InvalidModel`.
    pub fn from_decls<'a>(
        decls: impl IntoIterator<Item = (&'a str, Usage)>,
    ) -> Result<Self, TreeError> {
        let nodes = decls
            .into_iter()
            .map(|(raw, usage)| {
                NodePath::parse(raw)
                    .map(|path| NodeDecl { path, usage })
                    .map_err(|_| TreeError::InvalidModel(format!("bad path {raw:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(nodes)
    }

    pub fn builder() -> ModelBuilder {
        ModelBuilder::default()
    }

    pub fn nodes(&self) -> &[NodeDecl] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn usage_of(&self, path: &NodePath) -> Option<Usage> {
        self.nodes.iter().find(|d| &d.path == path).map(|d| d.usage)
    }
}

impl TryFrom<Vec<NodeDecl>> for ModelTree {
    type Error = TreeError;
    fn try_from(nodes: Vec<NodeDecl>) -> Result<Self, Self::Error> {
        ModelTree::new(nodes)
    }
}

impl From<ModelTree> for Vec<NodeDecl> {
    fn from(m: ModelTree) -> Self {
        m.nodes
    }
}

/// Incremental model construction. Missing ancestors are declared as
/// structures automatically; redeclaring a path keeps the first usage.
#[derive(Debug, Default)]
pub struct ModelBuilder {
    nodes: BTreeMap<NodePath, Usage>,
    error: Option<TreeError>,
}

impl ModelBuilder {
    pub fn node(mut self, raw: &str, usage: Usage) -> Self {
        if self.error.is_some() {
            return self;
        }
        match NodePath::parse(raw) {
            Ok(path) => {
                let mut anc = path.parent();
                while let Some(p) = anc {
                    anc = p.parent();
                    self.nodes.entry(p).or_insert(Usage::Structure);
                }
                self.nodes.entry(path).or_insert(usage);
            }
            Err(_) => self.error = Some(TreeError::InvalidModel(format!("bad path {raw:?}"))),
        }
        self
    }

    pub fn structure(self, raw: &str) -> Self {
        self.node(raw, Usage::Structure)
    }

    pub fn signal(self, raw: &str) -> Self {
        self.node(raw, Usage::Signal)
    }

    pub fn parameter(self, raw: &str) -> Self {
        self.node(raw, Usage::Parameter)
    }

    pub fn build(self) -> Result<ModelTree, TreeError> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut nodes: Vec<NodeDecl> = self
            .nodes
            .into_iter()
            .map(|(path, usage)| NodeDecl { path, usage })
            .collect();
        if !nodes.iter().any(|d| d.path.is_root()) {
            nodes.insert(
                0,
                NodeDecl {
                    path: NodePath::root(),
                    usage: Usage::Structure,
                },
            );
        }
        ModelTree::new(nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_missing_parent_and_duplicates() {
        assert!(matches!(
            ModelTree::from_decls([("\\TOP", Usage::Structure), ("\\TOP.A.B", Usage::Signal)]),
            Err(TreeError::InvalidModel(_))
        ));
        assert!(matches!(
            ModelTree::from_decls([
                ("\\TOP", Usage::Structure),
                ("\\TOP.A", Usage::Signal),
                ("\\top.a", Usage::Signal)
            ]),
            Err(TreeError::InvalidModel(_))
        ));
        assert!(matches!(
            ModelTree::from_decls([("\\TOP.A", Usage::Signal)]),
            Err(TreeError::InvalidModel(_))
        ));
    }

    #[test]
    fn rejects_long_segment() {
        assert!(matches!(
            ModelTree::from_decls([
                ("\\TOP", Usage::Structure),
                ("\\TOP.TOOLONGSEGMENTNAME", Usage::Signal)
            ]),
            Err(TreeError::InvalidModel(_))
        ));
    }

    #[test]
    fn builder_fills_ancestors() {
        let m = ModelTree::builder().signal("\\TOP.RTCTRL.COIL:CMD").build().unwrap();
        let paths: Vec<_> = m.nodes().iter().map(|d| d.path.to_string()).collect();
        assert_eq!(
            paths,
            ["\\TOP", "\\TOP.RTCTRL", "\\TOP.RTCTRL.COIL", "\\TOP.RTCTRL.COIL:CMD"]
        );
        assert_eq!(
            m.usage_of(&NodePath::parse("\\TOP.RTCTRL.COIL").unwrap()),
            Some(Usage::Structure)
        );
    }

    #[test]
    fn json_round_trip_validates() {
        let m = ModelTree::builder().signal("\\TOP.A").parameter("\\TOP.B").build().unwrap();
        let json = serde_json::to_string(&m).unwrap();
        assert_eq!(serde_json::from_str::<ModelTree>(&json).unwrap(), m);
        let bad = r#"[{"path":"\\TOP.A","usage":"SIGNAL"}]"#;
        assert!(serde_json::from_str::<ModelTree>(bad).is_err());
    }
}
