//! Ground-truth scene records: a synthetic-shapes generator and a loader for
//! COCO-style annotation files. Both derive scene-graph edges from box
//! geometry with the same rule.

mod coco;
mod shapes;

use serde::{Deserialize, Serialize};

pub use coco::{load_coco_like, CocoLoader};
pub use shapes::{generate_shapes, shapes_vocab, Placement, ShapesConfig};

use crate::error::{Error, Result};
use crate::scene_graph::{validate, Edge, SceneGraph, Vocab};
use crate::sg2seg::{BBox, ObjectMask, SegMap};
use crate::shapes::Image;

/// Relationship vocabulary shared by every geometric graph.
pub const RELATIONS: [&str; 4] = ["left of", "above", "inside", "beside"];
const LEFT_OF: usize = 0;
const ABOVE: usize = 1;
const INSIDE: usize = 2;
const BESIDE: usize = 3;
/// Minimum normalised centre offset for `left of` / `above`.
pub const RELATION_OFFSET: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct SceneRecord {
    /// `[3, H, W]` in `[0, 1]`.
    pub image: Image,
    pub graph: SceneGraph,
    pub boxes: Vec<BBox>,
    /// Box-relative binary masks, `None` when the source has no masks.
    pub masks: Option<Vec<ObjectMask>>,
    pub seg: Option<SegMap>,
    pub caption: String,
}

impl SceneRecord {
    /// Invariant violations; empty iff the record is consistent.
    pub fn violations(&self, vocab: &Vocab) -> Vec<String> {
        let mut out = validate(&self.graph, vocab);
        let n = self.graph.num_nodes();
        if self.boxes.len() != n {
            out.push(format!("{} boxes for {n} nodes", self.boxes.len()));
        }
        if let Some(m) = &self.masks {
            if m.len() != n {
                out.push(format!("{} masks for {n} nodes", m.len()));
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if !b.is_valid() {
                out.push(format!("box {i} invalid: {b:?}"));
            }
        }
        let (_, h, w) = self.image.dim();
        if let Some(seg) = &self.seg {
            if seg.dim() != (h, w) {
                out.push(format!("segmentation {:?} vs image {h}x{w}", seg.dim()));
            }
            if !seg.is_valid(vocab.object_classes().len()) {
                out.push("segmentation has labels outside the vocabulary".into());
            }
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            out.push("image values outside [0, 1]".into());
        }
        let expected = geometric_edges(&self.boxes);
        if self.graph.edges() != expected.as_slice() {
            out.push("graph edges disagree with box geometry".into());
        }
        out
    }
}

/// Edges implied by box geometry. For each pair `i < j`: containment gives
/// `inside`; otherwise `left of` when centres differ by at least
/// [`RELATION_OFFSET`] horizontally and `above` likewise vertically, both
/// oriented from the smaller coordinate; pairs with neither are `beside`.
pub fn geometric_edges(boxes: &[BBox]) -> Vec<Edge> {
    let mut edges = Vec::new();
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            let (a, b) = (&boxes[i], &boxes[j]);
            if b.contains(a) {
                edges.push(Edge { src: i, rel: INSIDE, dst: j });
                continue;
            }
            if a.contains(b) {
                edges.push(Edge { src: j, rel: INSIDE, dst: i });
                continue;
            }
            let ((ax, ay), (bx, by)) = (a.center(), b.center());
            let before = edges.len();
            if ax + RELATION_OFFSET <= bx {
                edges.push(Edge { src: i, rel: LEFT_OF, dst: j });
            } else if bx + RELATION_OFFSET <= ax {
                edges.push(Edge { src: j, rel: LEFT_OF, dst: i });
            }
            if ay + RELATION_OFFSET <= by {
                edges.push(Edge { src: i, rel: ABOVE, dst: j });
            } else if by + RELATION_OFFSET <= ay {
                edges.push(Edge { src: j, rel: ABOVE, dst: i });
            }
            if edges.len() == before {
                edges.push(Edge { src: i, rel: BESIDE, dst: j });
            }
        }
    }
    edges
}

/// Caption listing every relationship, e.g. `a circle left of a star`.
pub fn caption_for(graph: &SceneGraph, vocab: &Vocab) -> String {
    let name = |n: usize| vocab.object_name(graph.classes()[n]).unwrap_or("object");
    if graph.edges().is_empty() {
        return graph
            .classes()
            .iter()
            .enumerate()
            .map(|(i, _)| format!("a {}", name(i)))
            .collect::<Vec<_>>()
            .join(" and ");
    }
    graph
        .edges()
        .iter()
        .map(|e| {
            format!(
                "a {} {} a {}",
                name(e.src),
                vocab.relation_name(e.rel).unwrap_or("near"),
                name(e.dst)
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Split lists and generation parameters for a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: ShapesConfig,
    pub count: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetManifest {
    /// First `train_count` indices train, the rest test.
    pub fn sequential(generator: ShapesConfig, count: usize, train_count: usize) -> Result<Self> {
        if train_count > count {
            return Err(Error::Config(format!("train split {train_count} exceeds {count} records")));
        }
        Ok(Self {
            generator,
            count,
            train: (0..train_count).collect(),
            test: (train_count..count).collect(),
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::schema("$", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn left_right_pair() {
        let edges = geometric_edges(&[b(0.6, 0.4, 0.9, 0.6), b(0.1, 0.4, 0.4, 0.6)]);
        assert_eq!(edges, vec![Edge { src: 1, rel: LEFT_OF, dst: 0 }]);
    }

    #[test]
    fn diagonal_pair_gets_both() {
        let edges = geometric_edges(&[b(0.0, 0.0, 0.2, 0.2), b(0.7, 0.7, 0.9, 0.9)]);
        assert_eq!(
            edges,
            vec![Edge { src: 0, rel: LEFT_OF, dst: 1 }, Edge { src: 0, rel: ABOVE, dst: 1 }]
        );
    }

    #[test]
    fn containment_and_beside() {
        let edges = geometric_edges(&[b(0.0, 0.0, 1.0, 1.0), b(0.3, 0.3, 0.5, 0.5)]);
        assert_eq!(edges, vec![Edge { src: 1, rel: INSIDE, dst: 0 }]);
        let edges = geometric_edges(&[b(0.1, 0.1, 0.5, 0.5), b(0.15, 0.12, 0.6, 0.55)]);
        assert_eq!(edges, vec![Edge { src: 0, rel: BESIDE, dst: 1 }]);
    }
}
