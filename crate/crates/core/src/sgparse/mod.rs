//! Scene graphs parsed from modification text.
//!
//! [`RuleParser`] is the deterministic reference backend (grammar documented
//! in `docs/grammar.md`); [`ExternalParser`] runs a neural parser as a child
//! process speaking the JSON wire format of [`SceneGraph`].

mod rules;
mod subject;

use std::collections::HashMap;
use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};

pub use rules::RuleParser;
pub use subject::{
    embed_graph, to_subject_centric, GraphTokenTable, MaterializedSubject, Neighbor, SubjectCentricGraph,
    SubjectCentricTokens, SubjectNode, TokenVector,
};

#[derive(Debug, thiserror::Error)]
pub enum SgError {
    #[error("modification text is empty")]
    EmptyText,
    #[error("parser backend {backend}: {message}")]
    Backend { backend: String, message: String },
    #[error("scene graph format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Entity {
    pub index: usize,
    pub name: String,
}

/// Whether an attribute describes the desired result or the state being
/// changed away from (`change the red dress ...` marks `red` as removed).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrContext {
    Target,
    Removed,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Attribute {
    pub value: String,
    pub context: AttrContext,
}

impl Attribute {
    pub fn target(value: impl Into<String>) -> Self {
        Self {
            value: value.into(),
            context: AttrContext::Target,
        }
    }

    pub fn removed(value: impl Into<String>) -> Self {
        Self {
            value: value.into(),
            context: AttrContext::Removed,
        }
    }

    /// String handed to the text encoder.
    pub fn surface(&self) -> String {
        match self.context {
            AttrContext::Target => self.value.clone(),
            AttrContext::Removed => format!("not {}", self.value),
        }
    }
}

/// Tag on a relation describing the kind of edit it came from. Tags carry no
/// algebra of their own; they are kept for inspection and serialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Relation,
    Addition,
    Removal,
    Replacement,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Relation {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
    pub kind: RelationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SceneGraph {
    /// Text the graph was parsed from.
    pub text: String,
    pub entities: Vec<Entity>,
    /// Indexed by entity index.
    pub attributes: Vec<Vec<Attribute>>,
    pub relations: Vec<Relation>,
}

impl SceneGraph {
    pub fn new(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn entity_count(&self) -> usize {
        self.entities.len()
    }

    pub fn attribute_count(&self) -> usize {
        self.attributes.iter().map(Vec::len).sum()
    }

    pub fn find_entity(&self, name: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.name == name)
    }

    /// Returns the index of `name`, adding the entity if needed.
    pub fn entity(&mut self, name: &str) -> usize {
        if let Some(i) = self.find_entity(name) {
            return i;
        }
        let index = self.entities.len();
        self.entities.push(Entity {
            index,
            name: name.to_string(),
        });
        self.attributes.push(Vec::new());
        index
    }

    pub fn add_attribute(&mut self, entity: usize, attr: Attribute) {
        let list = &mut self.attributes[entity];
        if !list.contains(&attr) {
            list.push(attr);
        }
    }

    pub fn add_relation(&mut self, subject: usize, predicate: &str, object: usize, kind: RelationKind) {
        let exists = self
            .relations
            .iter()
            .any(|r| r.subject == subject && r.object == object && r.predicate == predicate);
        if !exists {
            self.relations.push(Relation {
                subject,
                predicate: predicate.to_string(),
                object,
                kind,
            });
        }
    }

    /// Drops repeated attributes per entity and repeated
    /// (subject, predicate, object) triples, keeping first occurrences.
    pub fn collapse(&mut self) {
        for list in &mut self.attributes {
            let mut kept: Vec<Attribute> = Vec::with_capacity(list.len());
            for a in list.drain(..) {
                if !kept.contains(&a) {
                    kept.push(a);
                }
            }
            *list = kept;
        }
        let mut kept: Vec<Relation> = Vec::with_capacity(self.relations.len());
        for r in self.relations.drain(..) {
            if !kept
                .iter()
                .any(|k| k.subject == r.subject && k.object == r.object && k.predicate == r.predicate)
            {
                kept.push(r);
            }
        }
        self.relations = kept;
    }

    /// Appends another graph, identifying entities by name, then collapses.
    pub fn merge(&mut self, other: &SceneGraph) {
        let map: Vec<usize> = other.entities.iter().map(|e| self.entity(&e.name)).collect();
        for (i, attrs) in other.attributes.iter().enumerate() {
            self.attributes[map[i]].extend(attrs.iter().cloned());
        }
        for r in &other.relations {
            self.relations.push(Relation {
                subject: map[r.subject],
                predicate: r.predicate.clone(),
                object: map[r.object],
                kind: r.kind,
            });
        }
        self.collapse();
    }

    /// Endpoints in range, entity indices dense, no duplicate triples.
    pub fn check(&self) -> Result<(), SgError> {
        if self.attributes.len() != self.entities.len() {
            return Err(SgError::Format("attribute table does not match entity list".into()));
        }
        for (i, e) in self.entities.iter().enumerate() {
            if e.index != i {
                return Err(SgError::Format(format!("entity {:?} has index {} at position {i}", e.name, e.index)));
            }
        }
        let n = self.entities.len();
        for r in &self.relations {
            if r.subject >= n || r.object >= n {
                return Err(SgError::Format(format!("relation {:?} references a missing entity", r.predicate)));
            }
        }
        let mut copy = self.clone();
        copy.collapse();
        if copy.relations.len() != self.relations.len() {
            return Err(SgError::Format("duplicate relation triples".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&WireGraph::from(self)).expect("scene graph serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&WireGraph::from(self)).expect("scene graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, SgError> {
        let wire: WireGraph = serde_json::from_str(text).map_err(|e| SgError::Format(e.to_string()))?;
        wire.try_into()
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireAttribute {
    entity: String,
    value: String,
    #[serde(default = "default_context")]
    context: AttrContext,
}

fn default_context() -> AttrContext {
    AttrContext::Target
}

fn default_kind() -> RelationKind {
    RelationKind::Relation
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireRelation {
    subject: String,
    predicate: String,
    object: String,
    #[serde(default = "default_kind")]
    kind: RelationKind,
}

/// Serialized form: entities by name, attributes and relations referring to
/// entities by name.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireGraph {
    #[serde(default)]
    text: String,
    entities: Vec<String>,
    #[serde(default)]
    attributes: Vec<WireAttribute>,
    #[serde(default)]
    relations: Vec<WireRelation>,
}

impl From<&SceneGraph> for WireGraph {
    fn from(g: &SceneGraph) -> Self {
        let name = |i: usize| g.entities[i].name.clone();
        WireGraph {
            text: g.text.clone(),
            entities: g.entities.iter().map(|e| e.name.clone()).collect(),
            attributes: g
                .attributes
                .iter()
                .enumerate()
                .flat_map(|(i, list)| {
                    list.iter().map(move |a| WireAttribute {
                        entity: name(i),
                        value: a.value.clone(),
                        context: a.context,
                    })
                })
                .collect(),
            relations: g
                .relations
                .iter()
                .map(|r| WireRelation {
                    subject: name(r.subject),
                    predicate: r.predicate.clone(),
                    object: name(r.object),
                    kind: r.kind,
                })
                .collect(),
        }
    }
}

impl TryFrom<WireGraph> for SceneGraph {
    type Error = SgError;

    fn try_from(w: WireGraph) -> Result<Self, SgError> {
        let mut g = SceneGraph::new(w.text);
        for name in &w.entities {
            if g.find_entity(name).is_some() {
                return Err(SgError::Format(format!("entity {name:?} listed twice")));
            }
            g.entity(name);
        }
        let lookup = |g: &SceneGraph, name: &str| {
            g.find_entity(name)
                .ok_or_else(|| SgError::Format(format!("unknown entity {name:?}")))
        };
        for a in w.attributes {
            let e = lookup(&g, &a.entity)?;
            g.add_attribute(
                e,
                Attribute {
                    value: a.value,
                    context: a.context,
                },
            );
        }
        for r in w.relations {
            let s = lookup(&g, &r.subject)?;
            let o = lookup(&g, &r.object)?;
            g.add_relation(s, &r.predicate, o, r.kind);
        }
        Ok(g)
    }
}

pub trait ParserBackend: Send + Sync {
    fn name(&self) -> &str;

    /// Whether `parse` may be called concurrently on one instance.
    fn reentrant(&self) -> bool;

    fn parse_text(&self, text: &str) -> Result<SceneGraph, SgError>;
}

/// Parses modification text. Empty text is a precondition failure; text
/// without content words yields a graph with no entities.
pub fn parse_scene_graph(text: &str, backend: &dyn ParserBackend) -> Result<SceneGraph, SgError> {
    if text.trim().is_empty() {
        return Err(SgError::EmptyText);
    }
    let g = backend.parse_text(text)?;
    g.check()?;
    Ok(g)
}

/// Runs an external scene-graph parser per call: the text goes to the
/// child's stdin, and a JSON scene graph is read from its stdout.
#[derive(Debug, Clone)]
pub struct ExternalParser {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalParser {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl ParserBackend for ExternalParser {
    fn name(&self) -> &str {
        "external"
    }

    fn reentrant(&self) -> bool {
        true
    }

    fn parse_text(&self, text: &str) -> Result<SceneGraph, SgError> {
        let fail = |message: String| SgError::Backend {
            backend: self.program.clone(),
            message,
        };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let written = child.stdin.take().expect("piped stdin").write_all(text.as_bytes());
        // A child that exits without reading stdin reports through its status.
        if let Err(e) = written {
            if e.kind() != std::io::ErrorKind::BrokenPipe {
                return Err(fail(e.to_string()));
            }
        }
        let out = child.wait_with_output().map_err(|e| fail(e.to_string()))?;
        if !out.status.success() {
            return Err(fail(format!(
                "exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let mut g = SceneGraph::from_json(&String::from_utf8_lossy(&out.stdout))?;
        if g.text.is_empty() {
            g.text = text.to_string();
        }
        Ok(g)
    }
}

/// Caches parses by text. Used by training, where each text is parsed once.
#[derive(Default)]
pub struct ParseCache {
    graphs: HashMap<String, SceneGraph>,
}

impl ParseCache {
    pub fn get_or_parse(&mut self, text: &str, backend: &dyn ParserBackend) -> Result<&SceneGraph, SgError> {
        if !self.graphs.contains_key(text) {
            let g = parse_scene_graph(text, backend)?;
            self.graphs.insert(text.to_string(), g);
        }
        Ok(&self.graphs[text])
    }
}
