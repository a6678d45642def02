//! Scene graph to layout: per-object embeddings, boxes, masks and a composed
//! segmentation map, plus the training loop for the three layout losses.

pub mod layout;
pub mod losses;
mod model;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use layout::{
    compose_segmentation, render_segmentation, warp_mask, BBox, ObjectMask, Palette, SegMap, MASK_SIZE,
    MIN_BOX_SIDE,
};
pub use model::{GraphBatch, LossWeights, PredictedLayout, Sg2SegConfig, Sg2SegMeta, Sg2SegModel};

use crate::datasets::SceneRecord;
use crate::embeddings::Embedder;
use crate::error::{Error, Result};
use crate::scene_graph::{SceneGraph, Vocab};

/// How node input features are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeFeatureMode {
    /// Text embedding of each node's templated class prompt.
    Semantic,
    /// A seeded random unit vector per node, independent of its class.
    Random { seed: u64 },
}

/// `[n, D]` node feature matrix for `graph`. `salt` distinguishes graphs
/// when features are random.
pub fn node_features(
    graph: &SceneGraph,
    vocab: &Vocab,
    embedder: &dyn Embedder,
    mode: NodeFeatureMode,
    salt: u64,
) -> Result<Array2<f64>> {
    let dim = embedder.profile().dimension;
    let mut out = Array2::zeros((graph.num_nodes(), dim));
    match mode {
        NodeFeatureMode::Semantic => {
            for (i, &c) in graph.classes().iter().enumerate() {
                let name = vocab
                    .object_name(c)
                    .ok_or_else(|| Error::InvalidValue(format!("node {i} class {c} not in vocab")))?;
                out.row_mut(i).assign(embedder.embed_class(name)?.vector());
            }
        }
        NodeFeatureMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            for i in 0..graph.num_nodes() {
                let v: Array1<f64> = Array1::from_shape_simple_fn(dim, || StandardNormal.sample(&mut rng));
                let norm = v.dot(&v).sqrt();
                out.row_mut(i).assign(&(v / norm));
            }
        }
    }
    Ok(out)
}

/// One training example.
#[derive(Debug, Clone)]
pub struct Sg2SegSample {
    pub graph: SceneGraph,
    pub features: Array2<f64>,
    pub boxes: Vec<BBox>,
    pub masks: Option<Vec<ObjectMask>>,
    pub seg: Option<SegMap>,
}

impl Sg2SegSample {
    pub fn from_record(record: &SceneRecord, features: Array2<f64>) -> Self {
        Self {
            graph: record.graph.clone(),
            features,
            boxes: record.boxes.clone(),
            masks: record.masks.clone(),
            seg: record.seg.clone(),
        }
    }
}

/// Samples for `records` with features computed per `mode`.
pub fn samples_from_records(
    records: &[SceneRecord],
    vocab: &Vocab,
    embedder: &dyn Embedder,
    mode: NodeFeatureMode,
) -> Result<Vec<Sg2SegSample>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let f = node_features(&r.graph, vocab, embedder, mode, i as u64)?;
            Ok(Sg2SegSample::from_record(r, f))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub box_weight: f64,
    pub mask_weight: f64,
    pub seg_weight: f64,
    /// Canvas side for the segmentation loss.
    pub seg_size: usize,
    pub seed: u64,
    /// Stops after this many optimiser steps if set.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Stops after the first epoch whose held-out box L1 is below this and
    /// whose mask IoU (when measured) is above `target_mask_iou`.
    #[serde(default)]
    pub target_box_l1: Option<f64>,
    #[serde(default)]
    pub target_mask_iou: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            learning_rate: 1e-4,
            box_weight: 1.0,
            mask_weight: 1.0,
            seg_weight: 1.0,
            seg_size: 64,
            seed: 0,
            max_steps: None,
            target_box_l1: None,
            target_mask_iou: None,
        }
    }
}

impl TrainConfig {
    fn reached_targets(&self, eval: &EvalMetrics) -> bool {
        if self.target_box_l1.is_none() && self.target_mask_iou.is_none() {
            return false;
        }
        let box_ok = self.target_box_l1.is_none_or(|t| eval.box_l1 < t);
        let mask_ok = match (self.target_mask_iou, eval.mask_iou) {
            (Some(t), Some(iou)) => iou > t,
            (Some(_), None) => false,
            (None, _) => true,
        };
        box_ok && mask_ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Mean absolute coordinate error of clamped boxes.
    pub box_l1: f64,
    /// Mean IoU of masks thresholded at 0.5; `None` without mask ground truth.
    pub mask_iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_box_loss: f64,
    pub train_mask_loss: f64,
    pub train_seg_loss: f64,
    pub eval: EvalMetrics,
}

struct Prepared {
    batch: GraphBatch,
    boxes: Vec<BBox>,
    classes: Vec<usize>,
    masks: Option<Tensor>,
    seg: Option<Tensor>,
}

fn prepare(samples: Vec<&Sg2SegSample>, num_classes: usize, seg_size: usize) -> Result<Prepared> {
    let graphs: Vec<&SceneGraph> = samples.iter().map(|s| &s.graph).collect();
    let feats: Vec<&Array2<f64>> = samples.iter().map(|s| &s.features).collect();
    let batch = GraphBatch::new(&graphs, &feats)?;
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    for s in &samples {
        if s.boxes.len() != s.graph.num_nodes() {
            return Err(Error::LengthMismatch(s.boxes.len(), s.graph.num_nodes()));
        }
        boxes.extend_from_slice(&s.boxes);
        classes.extend_from_slice(s.graph.classes());
    }
    let dev = Device::Cpu;
    let masks = if samples.iter().all(|s| s.masks.is_some()) {
        let mut v = Vec::with_capacity(boxes.len() * MASK_SIZE * MASK_SIZE);
        for s in &samples {
            for m in s.masks.as_ref().expect("checked") {
                v.extend(m.values().iter().map(|&x| x as f32));
            }
        }
        Some(Tensor::from_vec(v, (boxes.len(), 1, MASK_SIZE, MASK_SIZE), &dev)?)
    } else {
        None
    };
    let seg = if masks.is_some() && samples.iter().all(|s| s.seg.is_some()) {
        let mut v = Vec::new();
        for s in &samples {
            let one_hot = s.seg.as_ref().expect("checked").resized(seg_size, seg_size).one_hot(num_classes);
            v.extend(one_hot.iter().map(|&x| x as f32));
        }
        Some(Tensor::from_vec(v, (samples.len(), num_classes + 1, seg_size, seg_size), &dev)?)
    } else {
        None
    };
    Ok(Prepared {
        batch,
        boxes,
        classes,
        masks,
        seg,
    })
}

/// Runs the optimiser over `train_set`; metrics after each epoch are
/// computed on `eval_set` (or the training set when it is empty).
pub fn train(
    model: &mut Sg2SegModel,
    train_set: &[Sg2SegSample],
    eval_set: &[Sg2SegSample],
    vocab: &Vocab,
    config: &TrainConfig,
) -> Result<Vec<EpochMetrics>> {
    if train_set.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let num_classes = vocab.object_classes().len();
    let with_masks = config.mask_weight > 0.0 || config.seg_weight > 0.0;
    let weights = LossWeights {
        box_weight: config.box_weight,
        mask_weight: config.mask_weight,
        seg_weight: config.seg_weight,
    };
    let mut opt = AdamW::new(
        model.params().trainable(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut steps = 0usize;
    let eval_set = if eval_set.is_empty() { train_set } else { eval_set };
    'epochs: for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_box, mut sum_mask, mut sum_seg, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let prepared = prepare(chunk.iter().map(|&i| &train_set[i]).collect(), num_classes, config.seg_size)?;
            let out = model.forward(&prepared.batch, with_masks && prepared.masks.is_some(), true)?;
            let terms = model::batch_losses(
                &out,
                &prepared.boxes,
                prepared.masks.as_ref(),
                prepared.seg.as_ref(),
                &prepared.classes,
                &prepared.batch.offsets,
                num_classes,
                config.seg_size,
                &weights,
            )?;
            let total = terms.total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step: steps,
                    loss_box: terms.box_loss,
                    loss_mask: terms.mask_loss,
                    loss_seg: terms.seg_loss,
                });
            }
            opt.backward_step(&terms.total)?;
            steps += 1;
            sum_total += total;
            sum_box += terms.box_loss;
            sum_mask += terms.mask_loss;
            sum_seg += terms.seg_loss;
            batches += 1;
            if config.max_steps.is_some_and(|m| steps >= m) {
                history.push(epoch_metrics(model, eval_set, epoch, steps, batches, [sum_total, sum_box, sum_mask, sum_seg])?);
                break 'epochs;
            }
        }
        let m = epoch_metrics(model, eval_set, epoch, steps, batches, [sum_total, sum_box, sum_mask, sum_seg])?;
        log::info!(
            "epoch {epoch}: loss {:.4} box_l1 {:.4} mask_iou {:?}",
            m.train_loss,
            m.eval.box_l1,
            m.eval.mask_iou
        );
        let done = config.reached_targets(&m.eval);
        history.push(m);
        if done {
            break;
        }
    }
    Ok(history)
}

fn epoch_metrics(
    model: &Sg2SegModel,
    eval_set: &[Sg2SegSample],
    epoch: usize,
    steps: usize,
    batches: usize,
    sums: [f64; 4],
) -> Result<EpochMetrics> {
    let n = batches.max(1) as f64;
    Ok(EpochMetrics {
        epoch,
        steps,
        train_loss: sums[0] / n,
        train_box_loss: sums[1] / n,
        train_mask_loss: sums[2] / n,
        train_seg_loss: sums[3] / n,
        eval: evaluate(model, eval_set)?,
    })
}

/// Box error and mask IoU over `samples` in inference mode.
pub fn evaluate(model: &Sg2SegModel, samples: &[Sg2SegSample]) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::DatasetEmpty);
    }
    let (mut box_err, mut objects) = (0.0, 0usize);
    let (mut iou_sum, mut iou_count) = (0.0, 0usize);
    for chunk in samples.chunks(64) {
        let graphs: Vec<&SceneGraph> = chunk.iter().map(|s| &s.graph).collect();
        let feats: Vec<&Array2<f64>> = chunk.iter().map(|s| &s.features).collect();
        let batch = GraphBatch::new(&graphs, &feats)?;
        let with_masks = chunk.iter().any(|s| s.masks.is_some());
        let out = model.forward(&batch, with_masks, false)?;
        let logits = model::tensor_to_rows(&out.box_logits)?;
        let masks = match &out.mask_logits {
            Some(t) => Some(model::masks_from_logits(t)?),
            None => None,
        };
        let mut node = 0;
        for s in chunk {
            for (k, gt) in s.boxes.iter().enumerate() {
                let r = &logits[node + k];
                let pred = BBox::from_logits([r[0], r[1], r[2], r[3]]);
                box_err += pred
                    .as_array()
                    .iter()
                    .zip(gt.as_array())
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 4.0;
                objects += 1;
                if let (Some(pm), Some(gm)) = (&masks, &s.masks) {
                    iou_sum += mask_iou(&pm[node + k], &gm[k]);
                    iou_count += 1;
                }
            }
            node += s.graph.num_nodes();
        }
    }
    Ok(EvalMetrics {
        box_l1: box_err / objects.max(1) as f64,
        mask_iou: (iou_count > 0).then(|| iou_sum / iou_count as f64),
    })
}

/// IoU of two masks thresholded at 0.5; 1 when both are empty.
pub fn mask_iou(a: &ObjectMask, b: &ObjectMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (x, y) in a.values().iter().zip(b.values().iter()) {
        let (p, q) = (*x > 0.5, *y > 0.5);
        inter += usize::from(p && q);
        union += usize::from(p || q);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground-truth mask for a box: the image-level mask cropped to the box and
/// nearest-neighbour resampled to `MASK_SIZE x MASK_SIZE`.
pub fn crop_mask(mask: &Array2<bool>, bbox: &BBox) -> ObjectMask {
    let (h, w) = mask.dim();
    let vals = Array2::from_shape_fn((MASK_SIZE, MASK_SIZE), |(i, j)| {
        let y = bbox.y0 + (i as f64 + 0.5) / MASK_SIZE as f64 * bbox.height();
        let x = bbox.x0 + (j as f64 + 0.5) / MASK_SIZE as f64 * bbox.width();
        let r = ((y * h as f64) as usize).min(h - 1);
        let c = ((x * w as f64) as usize).min(w - 1);
        f64::from(mask[[r, c]])
    });
    ObjectMask::new(vals).expect("binary values on the mask grid")
}

#[cfg(test)]
mod tests;
