//! The layout network: a message-passing graph network over object nodes
//! followed by a box regression MLP and a cascaded upsampling mask head.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::layout::{warp_weights, BBox, ObjectMask, MASK_SIZE};
use crate::checkpoint;
use crate::embeddings::EmbedderProfile;
use crate::error::{Error, Result};
use crate::nn::{bce_with_logits, BatchNorm2d, Conv2d, Linear, ParamStore};
use crate::scene_graph::{SceneGraph, Vocab};

pub const CHECKPOINT_KIND: &str = "sg2seg";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sg2SegConfig {
    /// Width of the per-node input features (text embedding dimension).
    pub input_dim: usize,
    /// Object embedding width.
    pub embed_dim: usize,
    pub gcn_layers: usize,
    pub gcn_hidden: usize,
    pub box_hidden: usize,
    /// Output channels of the six upsampling blocks of the mask head.
    pub mask_widths: Vec<usize>,
    pub num_relations: usize,
    pub seed: u64,
}

impl Default for Sg2SegConfig {
    fn default() -> Self {
        Self {
            input_dim: 512,
            embed_dim: 128,
            gcn_layers: 5,
            gcn_hidden: 256,
            box_hidden: 512,
            mask_widths: vec![128, 64, 32, 16, 8, 8],
            num_relations: 4,
            seed: 0,
        }
    }
}

impl Sg2SegConfig {
    /// Mask head at the full published width (128 channels in every block).
    pub fn full_width_masks(mut self) -> Self {
        self.mask_widths = vec![self.embed_dim; 6];
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask_widths.len() != 6 {
            return Err(Error::Config(format!(
                "mask head needs 6 blocks to reach {MASK_SIZE}x{MASK_SIZE}, got {}",
                self.mask_widths.len()
            )));
        }
        if self.input_dim == 0 || self.embed_dim == 0 || self.gcn_layers == 0 {
            return Err(Error::Config("network widths and depth must be positive".into()));
        }
        Ok(())
    }
}

/// Several graphs flattened into one disjoint union.
pub struct GraphBatch {
    pub(crate) features: Tensor,
    src: Tensor,
    dst: Tensor,
    rel: Tensor,
    inv_degree: Tensor,
    num_edges: usize,
    /// Node offset of each graph; `offsets[g]..offsets[g + 1]`.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&SceneGraph], features: &[&Array2<f64>]) -> Result<Self> {
        if graphs.len() != features.len() {
            return Err(Error::LengthMismatch(graphs.len(), features.len()));
        }
        let width = features.first().map(|f| f.ncols()).unwrap_or(0);
        let mut offsets = vec![0];
        let mut feats = Vec::new();
        let (mut src, mut dst, mut rel) = (Vec::new(), Vec::new(), Vec::new());
        let mut degree = Vec::new();
        for (g, f) in graphs.iter().zip(features) {
            let base = *offsets.last().expect("non-empty");
            if f.nrows() != g.num_nodes() || f.ncols() != width {
                return Err(Error::Shape(format!(
                    "features {:?} for a graph with {} nodes",
                    f.dim(),
                    g.num_nodes()
                )));
            }
            feats.extend(f.iter().map(|&v| v as f32));
            degree.extend(std::iter::repeat_n(0u32, g.num_nodes()));
            for e in g.edges() {
                src.push((base + e.src) as u32);
                dst.push((base + e.dst) as u32);
                rel.push(e.rel as u32);
                degree[base + e.src] += 1;
                degree[base + e.dst] += 1;
            }
            offsets.push(base + g.num_nodes());
        }
        let n = *offsets.last().expect("non-empty");
        let dev = Device::Cpu;
        let num_edges = src.len();
        let inv: Vec<f32> = degree.iter().map(|&d| 1.0 / d.max(1) as f32).collect();
        Ok(Self {
            features: Tensor::from_vec(feats, (n, width), &dev)?,
            src: Tensor::from_vec(src, num_edges, &dev)?,
            dst: Tensor::from_vec(dst, num_edges, &dev)?,
            rel: Tensor::from_vec(rel, num_edges, &dev)?,
            inv_degree: Tensor::from_vec(inv, (n, 1), &dev)?,
            num_edges,
            offsets,
        })
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().expect("non-empty")
    }
}

struct GcnLayer {
    node: Linear,
    edge_in: Linear,
    edge_out: Linear,
}

struct MaskBlock {
    norm: BatchNorm2d,
    conv: Conv2d,
}

pub struct Sg2SegModel {
    config: Sg2SegConfig,
    store: ParamStore,
    relation_embedding: Tensor,
    gcn: Vec<GcnLayer>,
    box_hidden: Linear,
    box_out: Linear,
    mask_blocks: Vec<MaskBlock>,
    mask_out: Conv2d,
}

/// Forward outputs for a batch.
pub struct LayoutOutputs {
    pub embeddings: Tensor,
    /// `[N, 4]` pre-sigmoid box coordinates.
    pub box_logits: Tensor,
    /// `[N, 1, 64, 64]` pre-sigmoid mask values.
    pub mask_logits: Option<Tensor>,
}

impl Sg2SegModel {
    pub fn new(config: Sg2SegConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        let d = config.embed_dim;
        let relation_embedding = store.param(
            "gcn.relation_embedding",
            &[config.num_relations.max(1), d],
            crate::nn::Init::Uniform { fan_in: 1 },
        )?;
        let mut gcn = Vec::with_capacity(config.gcn_layers);
        for l in 0..config.gcn_layers {
            let din = if l == 0 { config.input_dim } else { d };
            gcn.push(GcnLayer {
                node: Linear::new(&mut store, &format!("gcn.{l}.node"), din, d)?,
                edge_in: Linear::new(&mut store, &format!("gcn.{l}.edge_in"), 2 * din + d, config.gcn_hidden)?,
                edge_out: Linear::new(&mut store, &format!("gcn.{l}.edge_out"), config.gcn_hidden, 3 * d)?,
            });
        }
        let box_hidden = Linear::new(&mut store, "box.0", d, config.box_hidden)?;
        let box_out = Linear::new(&mut store, "box.1", config.box_hidden, 4)?;
        let mut mask_blocks = Vec::new();
        let mut channels = d;
        for (i, &w) in config.mask_widths.iter().enumerate() {
            mask_blocks.push(MaskBlock {
                norm: BatchNorm2d::new(&mut store, &format!("mask.{i}.norm"), channels)?,
                conv: Conv2d::new(&mut store, &format!("mask.{i}.conv"), channels, w, 3, 1)?,
            });
            channels = w;
        }
        let mask_out = Conv2d::new(&mut store, "mask.out", channels, 1, 1, 0)?;
        Ok(Self {
            config,
            store,
            relation_embedding,
            gcn,
            box_hidden,
            box_out,
            mask_blocks,
            mask_out,
        })
    }

    pub fn config(&self) -> &Sg2SegConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Object embeddings `[N, embed_dim]`.
    pub fn gcn_forward(&self, batch: &GraphBatch) -> Result<Tensor> {
        if batch.features.dim(1)? != self.config.input_dim {
            return Err(Error::Shape(format!(
                "node features have width {}, model expects {}",
                batch.features.dim(1)?,
                self.config.input_dim
            )));
        }
        let d = self.config.embed_dim;
        let mut h = batch.features.clone();
        let mut r = if batch.num_edges > 0 {
            Some(self.relation_embedding.index_select(&batch.rel, 0)?)
        } else {
            None
        };
        let last = self.gcn.len() - 1;
        for (l, layer) in self.gcn.iter().enumerate() {
            let mut next = layer.node.forward(&h)?;
            if let Some(rel) = &r {
                let hs = h.index_select(&batch.src, 0)?;
                let ho = h.index_select(&batch.dst, 0)?;
                let x = Tensor::cat(&[&hs, rel, &ho], 1)?;
                let m = layer.edge_out.forward(&layer.edge_in.forward(&x)?.relu()?)?;
                let to_src = m.narrow(1, 0, d)?.contiguous()?;
                let new_rel = m.narrow(1, d, d)?.contiguous()?;
                let to_dst = m.narrow(1, 2 * d, d)?.contiguous()?;
                let agg = next
                    .zeros_like()?
                    .index_add(&batch.src, &to_src, 0)?
                    .index_add(&batch.dst, &to_dst, 0)?
                    .broadcast_mul(&batch.inv_degree)?;
                next = (next + agg)?;
                r = Some(if l == last { new_rel } else { new_rel.relu()? });
            }
            h = if l == last { next } else { next.relu()? };
        }
        Ok(h)
    }

    pub fn box_logits(&self, embeddings: &Tensor) -> Result<Tensor> {
        self.box_out.forward(&self.box_hidden.forward(embeddings)?.relu()?)
    }

    pub fn mask_logits(&self, embeddings: &Tensor, train: bool) -> Result<Tensor> {
        let (n, d) = embeddings.dims2()?;
        let mut x = embeddings.reshape((n, d, 1, 1))?;
        for block in &self.mask_blocks {
            // nearest upsampling keeps per-channel moments, so normalise first
            x = block.norm.forward(&x, train)?;
            x = crate::kernels::upsample2x(&x)?;
            x = block.conv.forward_relu(&x)?;
        }
        self.mask_out.forward(&x)
    }

    pub fn forward(&self, batch: &GraphBatch, with_masks: bool, train: bool) -> Result<LayoutOutputs> {
        let embeddings = self.gcn_forward(batch)?;
        let box_logits = self.box_logits(&embeddings)?;
        let mask_logits = if with_masks {
            Some(self.mask_logits(&embeddings, train)?)
        } else {
            None
        };
        Ok(LayoutOutputs {
            embeddings,
            box_logits,
            mask_logits,
        })
    }

    /// Predicted boxes and masks for one graph (inference mode).
    pub fn predict(&self, graph: &SceneGraph, features: &Array2<f64>) -> Result<PredictedLayout> {
        let batch = GraphBatch::new(&[graph], &[features])?;
        let out = self.forward(&batch, true, false)?;
        let logits = tensor_to_rows(&out.box_logits)?;
        let boxes = logits
            .iter()
            .map(|r| BBox::from_logits([r[0], r[1], r[2], r[3]]))
            .collect();
        let masks = masks_from_logits(out.mask_logits.as_ref().expect("requested masks"))?;
        Ok(PredictedLayout {
            embeddings: tensor_to_array2(&out.embeddings)?,
            box_logits: logits.into_iter().map(|r| [r[0], r[1], r[2], r[3]]).collect(),
            boxes,
            masks,
        })
    }

    /// Sets one named parameter; used by tests to pin weights by hand.
    pub fn set_param(&self, name: &str, values: &Tensor) -> Result<()> {
        let var = self
            .store
            .var(name)
            .ok_or_else(|| Error::InvalidValue(format!("no parameter `{name}`")))?;
        var.set(&values.to_dtype(DType::F32)?.reshape(var.shape())?)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>, meta: &Sg2SegMeta) -> Result<()> {
        let bytes = checkpoint::encode(
            CHECKPOINT_KIND,
            &self.config,
            serde_json::to_value(meta)?,
            &self.store.tensors(),
        )?;
        checkpoint::write(path, &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Sg2SegMeta)> {
        let bytes = checkpoint::read(path)?;
        let (header, tensors) = checkpoint::decode(&bytes, CHECKPOINT_KIND)?;
        let config: Sg2SegConfig = checkpoint::config_of(&header)?;
        let meta: Sg2SegMeta = serde_json::from_value(header.metadata.clone())
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let model = Self::new(config)?;
        model.store.load(&tensors)?;
        Ok((model, meta))
    }
}

/// What a checkpoint needs besides weights to run on new graphs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sg2SegMeta {
    pub vocab: Vocab,
    pub embedder: EmbedderProfile,
    pub node_features: super::NodeFeatureMode,
}

#[derive(Debug, Clone)]
pub struct PredictedLayout {
    pub embeddings: Array2<f64>,
    pub box_logits: Vec<[f64; 4]>,
    pub boxes: Vec<BBox>,
    pub masks: Vec<ObjectMask>,
}

pub(crate) fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?)
}

pub(crate) fn tensor_to_array2(t: &Tensor) -> Result<Array2<f64>> {
    let (r, c) = t.dims2()?;
    let v = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    Ok(Array2::from_shape_vec((r, c), v).expect("shape matches"))
}

/// Sigmoid masks from `[N, 1, 64, 64]` logits, kept strictly inside (0, 1).
pub(crate) fn masks_from_logits(logits: &Tensor) -> Result<Vec<ObjectMask>> {
    let (n, _, h, w) = logits.dims4()?;
    let v = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let arr = Array4::from_shape_vec((n, 1, h, w), v).expect("shape matches");
    let lo = f64::EPSILON;
    (0..n)
        .map(|i| {
            let m = arr
                .slice(ndarray::s![i, 0, .., ..])
                .mapv(|z| (1.0 / (1.0 + (-z).exp())).clamp(lo, 1.0 - lo));
            ObjectMask::new(m)
        })
        .collect()
}

/// Soft segmentation of each graph on a `size x size` canvas from mask
/// probabilities `[N, 1, 64, 64]` warped into `boxes`. Channel 0 is the
/// background (no object covers the pixel); channel `c + 1` is the
/// probabilistic union of the objects of class `c`.
pub(crate) fn soft_segmentation(
    mask_probs: &Tensor,
    boxes: &[BBox],
    classes: &[usize],
    offsets: &[usize],
    num_classes: usize,
    size: usize,
) -> Result<Tensor> {
    let n = boxes.len();
    let dev = mask_probs.device();
    let mut ay = Vec::with_capacity(n * size * MASK_SIZE);
    let mut ax_t = Vec::with_capacity(n * size * MASK_SIZE);
    for b in boxes {
        ay.extend(warp_weights(b.y0, b.y1, size, MASK_SIZE).iter().map(|&v| v as f32));
        ax_t.extend(warp_weights(b.x0, b.x1, size, MASK_SIZE).t().iter().map(|&v| v as f32));
    }
    let ay = Tensor::from_vec(ay, (n, size, MASK_SIZE), dev)?;
    let ax_t = Tensor::from_vec(ax_t, (n, MASK_SIZE, size), dev)?;
    let m = mask_probs.squeeze(1)?;
    let warped = ay.matmul(&m)?.matmul(&ax_t)?; // [N, S, S]
    let log_free = (1.0 - warped.clamp(0.0, 1.0 - 1e-6)?)?.log()?;
    let graphs = offsets.len() - 1;
    let mut slot = Vec::with_capacity(n);
    for g in 0..graphs {
        for &c in &classes[offsets[g]..offsets[g + 1]] {
            slot.push((g * num_classes + c) as u32);
        }
    }
    let slot = Tensor::from_vec(slot, n, dev)?;
    let per_class = Tensor::zeros((graphs * num_classes, size, size), DType::F32, dev)?
        .index_add(&slot, &log_free, 0)?
        .reshape((graphs, num_classes, size, size))?;
    let background = per_class.sum_keepdim(1)?.exp()?;
    let objects = (1.0 - per_class.exp()?)?;
    Ok(Tensor::cat(&[&background, &objects], 1)?)
}

/// Per-batch loss terms (means over graphs).
pub struct LossTerms {
    pub total: Tensor,
    pub box_loss: f64,
    pub mask_loss: f64,
    pub seg_loss: f64,
}

pub struct LossWeights {
    pub box_weight: f64,
    pub mask_weight: f64,
    pub seg_weight: f64,
}

/// Layout losses for a batch with ground truth laid out in batch node order.
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_losses(
    out: &LayoutOutputs,
    gt_boxes: &[BBox],
    gt_masks: Option<&Tensor>,
    gt_seg: Option<&Tensor>,
    classes: &[usize],
    offsets: &[usize],
    num_classes: usize,
    seg_size: usize,
    weights: &LossWeights,
) -> Result<LossTerms> {
    let graphs = (offsets.len() - 1) as f64;
    let dev = out.box_logits.device();
    let gt: Vec<f32> = gt_boxes.iter().flat_map(|b| b.as_array().map(|v| v as f32)).collect();
    let gt = Tensor::from_vec(gt, (gt_boxes.len(), 4), dev)?;
    let coords = candle_nn::ops::sigmoid(&out.box_logits)?;
    let box_loss = ((coords - gt)?.abs()?.sum_all()? / graphs)?;
    let mut total = (&box_loss * weights.box_weight)?;
    let mut mask_loss_v = 0.0;
    let mut seg_loss_v = 0.0;
    if let (Some(mask_logits), Some(gt_masks)) = (&out.mask_logits, gt_masks) {
        let pixels = (MASK_SIZE * MASK_SIZE) as f64;
        let mask_loss = (bce_with_logits(mask_logits, gt_masks)?.sum_all()? / (pixels * graphs))?;
        mask_loss_v = mask_loss.to_scalar::<f32>()? as f64;
        total = (total + (mask_loss * weights.mask_weight)?)?;
        if let Some(gt_seg) = gt_seg {
            if weights.seg_weight > 0.0 {
                let probs = candle_nn::ops::sigmoid(mask_logits)?;
                let pred = soft_segmentation(&probs, gt_boxes, classes, offsets, num_classes, seg_size)?;
                let seg_loss = (pred - gt_seg)?.abs()?.mean_all()?;
                seg_loss_v = seg_loss.to_scalar::<f32>()? as f64;
                total = (total + (seg_loss * weights.seg_weight)?)?;
            }
        }
    }
    Ok(LossTerms {
        box_loss: box_loss.to_scalar::<f32>()? as f64,
        mask_loss: mask_loss_v,
        seg_loss: seg_loss_v,
        total,
    })
}
