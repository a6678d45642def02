//! COCO-style annotation loading.
//!
//! Layout (pixel units, `bbox` is `[x, y, width, height]`):
//!
//! ```json
//! {
//!   "categories": [{"id": 1, "name": "sheep"}],
//!   "images": [{"id": 7, "file_name": "7.png", "width": 64, "height": 48, "caption": "..."}],
//!   "annotations": [{"image_id": 7, "category_id": 1, "bbox": [4, 6, 20, 12],
//!                    "segmentation": [[4, 6, 24, 6, 24, 18, 4, 18]]}]
//! }
//! ```
//!
//! `segmentation` (a list of polygons) is optional; an image whose
//! annotations lack it yields a record without masks or segmentation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::Deserialize;

use super::{caption_for, geometric_edges, SceneRecord, RELATIONS};
use crate::error::{Error, Result};
use crate::scene_graph::{SceneGraph, Vocab};
use crate::sg2seg::{crop_mask, BBox, SegMap};
use crate::shapes::{rasterize_polygon, Image};

#[derive(Debug, Deserialize)]
struct Category {
    id: i64,
    name: String,
}

#[derive(Debug, Deserialize)]
struct ImageEntry {
    id: i64,
    file_name: String,
    width: usize,
    height: usize,
    #[serde(default)]
    caption: Option<String>,
}

#[derive(Debug, Deserialize)]
struct Annotation {
    image_id: i64,
    category_id: i64,
    bbox: [f64; 4],
    #[serde(default)]
    segmentation: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
struct AnnotationFile {
    categories: Vec<Category>,
    images: Vec<ImageEntry>,
    annotations: Vec<Annotation>,
}

/// Streaming iterator over the images of an annotation file.
pub struct CocoLoader {
    vocab: Vocab,
    class_of: BTreeMap<i64, usize>,
    images: std::vec::IntoIter<ImageEntry>,
    annotations: BTreeMap<i64, Vec<Annotation>>,
    image_dir: PathBuf,
}

/// Parses the annotation file; images are read lazily while iterating.
pub fn load_coco_like(annotation_path: impl AsRef<Path>, image_dir: impl AsRef<Path>) -> Result<CocoLoader> {
    let path = annotation_path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: AnnotationFile = serde_json::from_str(&text).map_err(|e| Error::schema("$", e.to_string()))?;
    let mut cats = file.categories;
    cats.sort_by_key(|c| c.id);
    for w in cats.windows(2) {
        if w[0].id == w[1].id {
            return Err(Error::schema("categories", format!("duplicate id {}", w[0].id)));
        }
    }
    let vocab = Vocab::new(
        cats.iter().map(|c| c.name.clone()).collect(),
        RELATIONS.iter().map(|s| s.to_string()).collect(),
    )?;
    let class_of = cats.iter().enumerate().map(|(i, c)| (c.id, i)).collect::<BTreeMap<_, _>>();
    let mut annotations: BTreeMap<i64, Vec<Annotation>> = BTreeMap::new();
    for (i, a) in file.annotations.into_iter().enumerate() {
        if !class_of.contains_key(&a.category_id) {
            return Err(Error::schema(
                format!("annotations[{i}].category_id"),
                format!("unknown category {}", a.category_id),
            ));
        }
        annotations.entry(a.image_id).or_default().push(a);
    }
    Ok(CocoLoader {
        vocab,
        class_of,
        images: file.images.into_iter(),
        annotations,
        image_dir: image_dir.as_ref().to_owned(),
    })
}

impl CocoLoader {
    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn read_image(&self, entry: &ImageEntry) -> Result<Image> {
        let path = self.image_dir.join(&entry.file_name);
        if !path.exists() {
            return Err(Error::MissingImage(path));
        }
        let rgb = image::open(&path)?.to_rgb8();
        let (w, h) = rgb.dimensions();
        Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, i, j)| {
            f64::from(rgb.get_pixel(j as u32, i as u32)[c]) / 255.0
        }))
    }

    /// `Ok(None)` means the record was rejected and logged.
    fn build(&self, entry: ImageEntry, anns: Vec<Annotation>) -> Result<Option<SceneRecord>> {
        if anns.is_empty() {
            log::warn!("image {} has no annotations; skipped", entry.id);
            return Ok(None);
        }
        let (w, h) = (entry.width as f64, entry.height as f64);
        let mut boxes = Vec::with_capacity(anns.len());
        for a in &anns {
            let [x, y, bw, bh] = a.bbox;
            let b = BBox {
                x0: x / w,
                y0: y / h,
                x1: (x + bw) / w,
                y1: (y + bh) / h,
            };
            if !b.is_valid() {
                log::warn!("image {}: malformed box {:?}; record skipped", entry.id, a.bbox);
                return Ok(None);
            }
            boxes.push(b);
        }
        let image = self.read_image(&entry)?;
        let classes: Vec<usize> = anns.iter().map(|a| self.class_of[&a.category_id]).collect();
        let (masks, seg) = if anns.iter().all(|a| a.segmentation.is_some()) {
            let mut labels = Array2::<u32>::zeros((entry.height, entry.width));
            let mut masks = Vec::with_capacity(anns.len());
            for (k, a) in anns.iter().enumerate().rev() {
                let mut full = Array2::from_elem((entry.height, entry.width), false);
                for poly in a.segmentation.as_ref().expect("checked") {
                    let pts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
                    let r = rasterize_polygon(&pts, entry.height, entry.width);
                    full.zip_mut_with(&r, |m, &v| *m |= v);
                }
                // later annotations are painted first so lower indices win
                for ((i, j), &v) in full.indexed_iter() {
                    if v {
                        labels[[i, j]] = SegMap::label_of(classes[k]);
                    }
                }
                masks.push(crop_mask(&full, &boxes[k]));
            }
            masks.reverse();
            (Some(masks), Some(SegMap::new(labels)))
        } else {
            (None, None)
        };
        let seg = match (seg, image.dim()) {
            (Some(s), (_, ih, iw)) if s.dim() != (ih, iw) => Some(s.resized(ih, iw)),
            (s, _) => s,
        };
        let graph = SceneGraph::new(classes, geometric_edges(&boxes))?;
        let caption = entry
            .caption
            .clone()
            .unwrap_or_else(|| caption_for(&graph, &self.vocab));
        let record = SceneRecord {
            image,
            graph,
            boxes,
            masks,
            seg,
            caption,
        };
        let problems = record.violations(&self.vocab);
        if !problems.is_empty() {
            log::warn!("image {}: {}; record skipped", entry.id, problems.join("; "));
            return Ok(None);
        }
        Ok(Some(record))
    }
}

impl Iterator for CocoLoader {
    type Item = Result<SceneRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let entry = self.images.next()?;
            let anns = self.annotations.remove(&entry.id).unwrap_or_default();
            match self.build(entry, anns) {
                Ok(Some(r)) => return Some(Ok(r)),
                Ok(None) => continue,
                Err(e) => return Some(Err(e)),
            }
        }
    }
}
