use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{caption_for, geometric_edges, SceneRecord, RELATIONS};
use crate::error::{Error, Result};
use crate::scene_graph::{SceneGraph, Vocab};
use crate::sg2seg::layout::compose_any_size;
use crate::sg2seg::{render_segmentation, BBox, ObjectMask, Palette, MASK_SIZE};
use crate::shapes::ShapeKind;

/// Where objects go on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Node `i` occupies quadrant `i` in reading order (top-left, top-right,
    /// bottom-left, bottom-right), so objects never overlap and the layout
    /// is recoverable from the graph up to jitter.
    Slots,
    /// Uniformly random centres; objects may overlap.
    Scattered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub placement: Placement,
    /// Maximum centre displacement in normalised units.
    pub position_jitter: f64,
    /// Maximum change of the class base size in normalised units.
    pub size_jitter: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            min_objects: 1,
            max_objects: 4,
            placement: Placement::Slots,
            position_jitter: 0.03,
            size_jitter: 0.02,
            seed: 0,
        }
    }
}

impl ShapesConfig {
    fn validate(&self) -> Result<()> {
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config(format!(
                "object count range {}..={} is empty",
                self.min_objects, self.max_objects
            )));
        }
        if self.placement == Placement::Slots && self.max_objects > 4 {
            return Err(Error::Config("slot placement holds at most 4 objects".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image_size must be at least 8".into()));
        }
        Ok(())
    }
}

/// Objects are the four shape classes; relations are the geometric ones.
pub fn shapes_vocab() -> Vocab {
    Vocab::new(
        ShapeKind::ALL.iter().map(|k| k.name().to_owned()).collect(),
        RELATIONS.iter().map(|s| s.to_string()).collect(),
    )
    .expect("names are unique")
}

fn base_size(kind: ShapeKind) -> f64 {
    match kind {
        ShapeKind::Circle => 0.30,
        ShapeKind::Square => 0.26,
        ShapeKind::Triangle => 0.32,
        ShapeKind::Star => 0.34,
    }
}

const SLOT_CENTRES: [(f64, f64); 4] = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];

/// `count` records; record `i` depends only on `(config, i)`.
pub fn generate_shapes(config: &ShapesConfig, count: usize) -> Result<Vec<SceneRecord>> {
    if count == 0 {
        return Err(Error::EmptyInput("record count"));
    }
    config.validate()?;
    let vocab = shapes_vocab();
    let palette = Palette::for_classes(vocab.object_classes());
    (0..count)
        .map(|i| generate_one(config, i as u64, &vocab, &palette))
        .collect()
}

fn generate_one(config: &ShapesConfig, index: u64, vocab: &Vocab, palette: &Palette) -> Result<SceneRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let n = rng.random_range(config.min_objects..=config.max_objects);
    let kinds: Vec<ShapeKind> = (0..n)
        .map(|_| ShapeKind::ALL[rng.random_range(0..ShapeKind::ALL.len())])
        .collect();
    let mut boxes = Vec::with_capacity(n);
    for (i, &k) in kinds.iter().enumerate() {
        let side = base_size(k) + rng.random_range(-1.0..=1.0) * config.size_jitter;
        let half = 0.5 * side;
        let (cx, cy) = match config.placement {
            Placement::Slots => {
                let (sx, sy) = SLOT_CENTRES[i];
                (
                    sx + rng.random_range(-1.0..=1.0) * config.position_jitter,
                    sy + rng.random_range(-1.0..=1.0) * config.position_jitter,
                )
            }
            Placement::Scattered => (rng.random_range(half..=1.0 - half), rng.random_range(half..=1.0 - half)),
        };
        boxes.push(BBox::new(cx - half, cy - half, cx + half, cy + half)?);
    }
    let classes: Vec<usize> = kinds
        .iter()
        .map(|k| vocab.object_index(k.name()).expect("shape classes are in the vocab"))
        .collect();
    let masks: Vec<ObjectMask> = kinds
        .iter()
        .map(|k| ObjectMask::new(k.mask(MASK_SIZE)).expect("binary mask"))
        .collect();
    let size = config.image_size;
    let seg = compose_any_size(&boxes, &masks, &classes, size, size);
    let image: Array3<f64> = render_segmentation(&seg, palette);
    let graph = SceneGraph::new(classes, geometric_edges(&boxes))?;
    let caption = caption_for(&graph, vocab);
    Ok(SceneRecord {
        image,
        graph,
        boxes,
        masks: Some(masks),
        seg: Some(seg),
        caption,
    })
}
