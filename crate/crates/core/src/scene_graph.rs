//! Scene graphs built from `(subject, predicate, object)` triplets.
//!
//! A mention may carry an instance tag, `sheep#1`, to refer to a specific
//! occurrence of a class. Untagged mentions refer to occurrence 0, except that
//! an untagged object of the same class as its subject names the next
//! occurrence, so `("sheep", "by", "sheep")` yields two sheep.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    #[serde(rename = "objects")]
    object_classes: Vec<String>,
    #[serde(rename = "relations")]
    relationship_classes: Vec<String>,
}

impl Vocab {
    pub fn new(object_classes: Vec<String>, relationship_classes: Vec<String>) -> Result<Self> {
        check_unique(&object_classes, "vocab.objects")?;
        check_unique(&relationship_classes, "vocab.relations")?;
        Ok(Self {
            object_classes,
            relationship_classes,
        })
    }

    pub fn object_classes(&self) -> &[String] {
        &self.object_classes
    }

    pub fn relationship_classes(&self) -> &[String] {
        &self.relationship_classes
    }

    pub fn object_index(&self, name: &str) -> Option<usize> {
        self.object_classes.iter().position(|c| c == name)
    }

    pub fn relation_index(&self, name: &str) -> Option<usize> {
        self.relationship_classes.iter().position(|c| c == name)
    }

    pub fn object_name(&self, index: usize) -> Option<&str> {
        self.object_classes.get(index).map(String::as_str)
    }

    pub fn relation_name(&self, index: usize) -> Option<&str> {
        self.relationship_classes.get(index).map(String::as_str)
    }
}

fn check_unique(names: &[String], path: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, n) in names.iter().enumerate() {
        if !seen.insert(n.as_str()) {
            return Err(Error::schema(format!("{path}[{i}]"), format!("duplicate name `{n}`")));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triplet {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        Self {
            subject: subject.to_owned(),
            predicate: predicate.to_owned(),
            object: object.to_owned(),
        }
    }
}

impl FromStr for Triplet {
    type Err = Error;

    /// Parses `"subj,pred,obj"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        match parts.as_slice() {
            [s, p, o] if !s.is_empty() && !p.is_empty() && !o.is_empty() => Ok(Triplet::new(s, p, o)),
            _ => Err(Error::InvalidValue(format!(
                "triplet `{s}` is not of the form subject,predicate,object"
            ))),
        }
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.subject, self.predicate, self.object)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub src: usize,
    pub rel: usize,
    pub dst: usize,
}

/// Object nodes with class indices and typed directed edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneGraph {
    classes: Vec<usize>,
    edges: Vec<Edge>,
}

impl SceneGraph {
    /// Builds a graph and checks the structural invariants.
    pub fn new(classes: Vec<usize>, edges: Vec<Edge>) -> Result<Self> {
        let g = Self { classes, edges };
        match g.structural_violations().into_iter().next() {
            None => Ok(g),
            Some(v) => Err(Error::schema("graph", v)),
        }
    }

    /// Builds a graph without any checks; use [`validate`] to inspect it.
    pub fn new_unchecked(classes: Vec<usize>, edges: Vec<Edge>) -> Self {
        Self { classes, edges }
    }

    pub fn num_nodes(&self) -> usize {
        self.classes.len()
    }

    /// Class index per node, indexed by node id.
    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    /// Relabels nodes: node `i` of `self` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut classes = vec![0; self.classes.len()];
        for (i, &c) in self.classes.iter().enumerate() {
            classes[perm[i]] = c;
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                rel: e.rel,
                dst: perm[e.dst],
            })
            .collect();
        Self { classes, edges }
    }

    fn structural_violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.classes.len();
        if n == 0 {
            out.push("graph has no nodes".to_owned());
        }
        for (i, e) in self.edges.iter().enumerate() {
            if e.src >= n || e.dst >= n {
                out.push(format!(
                    "edge {i} endpoint out of range ({} -> {}, {n} nodes)",
                    e.src, e.dst
                ));
            } else if e.src == e.dst {
                out.push(format!("self_loop at edge {i}"));
            }
        }
        out
    }
}

/// All invariant violations of `graph` against `vocab`; empty iff valid.
pub fn validate(graph: &SceneGraph, vocab: &Vocab) -> Vec<String> {
    let mut out = graph.structural_violations();
    for (i, &c) in graph.classes.iter().enumerate() {
        if c >= vocab.object_classes.len() {
            out.push(format!("node {i} class index {c} out of vocab range"));
        }
    }
    for (i, e) in graph.edges.iter().enumerate() {
        if e.rel >= vocab.relationship_classes.len() {
            out.push(format!("edge {i} relation index {} out of vocab range", e.rel));
        }
    }
    out
}

fn split_mention(mention: &str) -> (&str, Option<usize>) {
    match mention.rsplit_once('#') {
        Some((name, tag)) => match tag.parse() {
            Ok(k) => (name, Some(k)),
            Err(_) => (mention, None),
        },
        None => (mention, None),
    }
}

/// Builds a scene graph from triplets; nodes are ordered by first mention.
pub fn build_graph(triplets: &[Triplet], vocab: &Vocab) -> Result<SceneGraph> {
    if triplets.is_empty() {
        return Err(Error::EmptyInput("triplet list"));
    }
    let mut node_of: HashMap<(usize, usize), usize> = HashMap::new();
    let mut classes = Vec::new();
    let mut edges = Vec::with_capacity(triplets.len());
    let mut intern = |class: usize, occ: usize| {
        *node_of.entry((class, occ)).or_insert_with(|| {
            classes.push(class);
            classes.len() - 1
        })
    };
    let lookup = |name: &str| {
        vocab.object_index(name).ok_or_else(|| Error::UnknownClass {
            name: name.to_owned(),
            list: "objects",
        })
    };
    for t in triplets {
        let (sname, stag) = split_mention(&t.subject);
        let (oname, otag) = split_mention(&t.object);
        let s_class = lookup(sname)?;
        let o_class = lookup(oname)?;
        let rel = vocab
            .relation_index(&t.predicate)
            .ok_or_else(|| Error::UnknownClass {
                name: t.predicate.clone(),
                list: "relations",
            })?;
        let s_occ = stag.unwrap_or(0);
        let o_occ = match otag {
            Some(k) => k,
            None if o_class == s_class => s_occ + 1,
            None => 0,
        };
        let src = intern(s_class, s_occ);
        let dst = intern(o_class, o_occ);
        edges.push(Edge { src, rel, dst });
    }
    SceneGraph::new(classes, edges)
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: i64,
    class: String,
}

#[derive(Serialize, Deserialize)]
struct EdgeJson {
    src: i64,
    rel: String,
    dst: i64,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    vocab: Vocab,
    nodes: Vec<NodeJson>,
    edges: Vec<EdgeJson>,
}

/// Parses the graph file format from a JSON string.
pub fn graph_from_json(text: &str) -> Result<(SceneGraph, Vocab)> {
    let raw: GraphJson =
        serde_json::from_str(text).map_err(|e| Error::schema("$", e.to_string()))?;
    let vocab = Vocab::new(raw.vocab.object_classes, raw.vocab.relationship_classes)?;
    let n = raw.nodes.len();
    if n == 0 {
        return Err(Error::schema("nodes", "graph has no nodes"));
    }
    let mut classes: Vec<Option<usize>> = vec![None; n];
    for (i, node) in raw.nodes.iter().enumerate() {
        let id = usize::try_from(node.id)
            .ok()
            .filter(|&id| id < n)
            .ok_or_else(|| Error::schema(format!("nodes[{i}].id"), format!("id {} not in 0..{n}", node.id)))?;
        if classes[id].is_some() {
            return Err(Error::schema(format!("nodes[{i}].id"), format!("duplicate id {id}")));
        }
        let class = vocab.object_index(&node.class).ok_or_else(|| {
            Error::schema(format!("nodes[{i}].class"), format!("unknown class `{}`", node.class))
        })?;
        classes[id] = Some(class);
    }
    let classes: Vec<usize> = classes.into_iter().map(|c| c.expect("ids are a permutation")).collect();
    let mut edges = Vec::with_capacity(raw.edges.len());
    for (i, e) in raw.edges.iter().enumerate() {
        let endpoint = |v: i64, field: &str| {
            usize::try_from(v)
                .ok()
                .filter(|&v| v < n)
                .ok_or_else(|| Error::schema(format!("edges[{i}].{field}"), format!("endpoint {v} not in 0..{n}")))
        };
        let src = endpoint(e.src, "src")?;
        let dst = endpoint(e.dst, "dst")?;
        if src == dst {
            return Err(Error::schema(format!("edges[{i}]"), "self_loop"));
        }
        let rel = vocab.relation_index(&e.rel).ok_or_else(|| {
            Error::schema(format!("edges[{i}].rel"), format!("unknown relation `{}`", e.rel))
        })?;
        edges.push(Edge { src, rel, dst });
    }
    Ok((SceneGraph::new(classes, edges)?, vocab))
}

/// Canonical JSON text: nodes in id order, edges in stored order.
pub fn graph_to_json(graph: &SceneGraph, vocab: &Vocab) -> Result<String> {
    let violations = validate(graph, vocab);
    if let Some(v) = violations.into_iter().next() {
        return Err(Error::schema("graph", v));
    }
    let raw = GraphJson {
        vocab: vocab.clone(),
        nodes: graph
            .classes
            .iter()
            .enumerate()
            .map(|(i, &c)| NodeJson {
                id: i as i64,
                class: vocab.object_classes[c].clone(),
            })
            .collect(),
        edges: graph
            .edges
            .iter()
            .map(|e| EdgeJson {
                src: e.src as i64,
                rel: vocab.relationship_classes[e.rel].clone(),
                dst: e.dst as i64,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&raw)?)
}

pub fn load_graph_json(path: impl AsRef<Path>) -> Result<(SceneGraph, Vocab)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    graph_from_json(&text)
}

pub fn save_graph_json(path: impl AsRef<Path>, graph: &SceneGraph, vocab: &Vocab) -> Result<()> {
    let path = path.as_ref();
    let text = graph_to_json(graph, vocab)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
