//! Guidance terms steering the sampler towards a prompt and a layout.
//!
//! Every term reports a score to be maximised and `gradient = -d score / d x`
//! with respect to the image estimate in `[0, 1]`; ascent is `x - eta * gradient`.

mod trace;

use ndarray::{Array1, Array3, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::{ae_code, FirstStageAE};
use crate::embeddings::Embedder;
use crate::error::{Error, Result};
use crate::sg2seg::{render_segmentation, BBox, Palette, SegMap};
use crate::shapes::Image;

pub use trace::{GuidanceTrace, TermRecord, TraceStep};

/// Padding noise is `clamp(PAD_MEAN + PAD_STD * eps, 0, 1)`.
pub const PAD_MEAN: f64 = 0.5;
pub const PAD_STD: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceSpec {
    pub enable_text: bool,
    pub enable_box: bool,
    pub enable_seg: bool,
    /// Use the noise-contrasted box term; `false` selects the plain box term.
    pub augmented_box: bool,
    pub lambda: f64,
    pub seg_scale: f64,
    pub alpha: f64,
    pub noise_seed: u64,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            enable_text: true,
            enable_box: true,
            enable_seg: true,
            augmented_box: true,
            lambda: 1.2,
            seg_scale: 0.5,
            alpha: 1.0,
            noise_seed: 0,
        }
    }
}

impl GuidanceSpec {
    /// Every term switched off.
    pub fn disabled() -> Self {
        Self {
            enable_text: false,
            enable_box: false,
            enable_seg: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("seg_scale", self.seg_scale), ("alpha", self.alpha)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn any_enabled(&self) -> bool {
        self.enable_text || self.enable_box || self.enable_seg
    }
}

/// Score and descent gradient of one term.
#[derive(Debug, Clone, PartialEq)]
pub struct TermOutput {
    pub score: f64,
    pub gradient: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Roi {
    pub bbox: BBox,
    pub label: String,
    pub weight: f64,
}

/// Objects to guide, with weights proportional to box area.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiContext {
    rois: Vec<Roi>,
    height: usize,
    width: usize,
}

/// `area_k / sum(area)`.
pub fn roi_weights(boxes: &[BBox]) -> Result<Vec<f64>> {
    if boxes.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let total: f64 = boxes.iter().map(BBox::area).sum();
    Ok(boxes.iter().map(|b| b.area() / total).collect())
}

impl RoiContext {
    pub fn new<S: AsRef<str>>(boxes: &[BBox], labels: &[S], height: usize, width: usize) -> Result<Self> {
        if boxes.len() != labels.len() {
            return Err(Error::LengthMismatch(boxes.len(), labels.len()));
        }
        let weights = roi_weights(boxes)?;
        Ok(Self {
            rois: boxes
                .iter()
                .zip(labels)
                .zip(weights)
                .map(|((b, l), w)| Roi {
                    bbox: *b,
                    label: l.as_ref().to_owned(),
                    weight: w,
                })
                .collect(),
            height,
            width,
        })
    }

    pub fn rois(&self) -> &[Roi] {
        &self.rois
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Pixel rows/cols `[r0, r1) x [c0, c1)` of object `k`, never empty.
    pub fn interior(&self, k: usize) -> (usize, usize, usize, usize) {
        interior(&self.rois[k].bbox, self.height, self.width)
    }

    /// Whether a pixel lies inside any ROI interior.
    pub fn union_mask(&self) -> ndarray::Array2<bool> {
        let mut m = ndarray::Array2::from_elem((self.height, self.width), false);
        for k in 0..self.rois.len() {
            let (r0, r1, c0, c1) = self.interior(k);
            m.slice_mut(ndarray::s![r0..r1, c0..c1]).fill(true);
        }
        m
    }
}

/// Pixels whose centres fall in the box; grows to the nearest pixel when
/// the box is thinner than one pixel.
pub fn interior(bbox: &BBox, height: usize, width: usize) -> (usize, usize, usize, usize) {
    let (mut r0, mut r1, mut c0, mut c1) = bbox.pixel_span(height, width);
    let (cx, cy) = bbox.center();
    if r0 >= r1 {
        r0 = ((cy * height as f64) as usize).min(height - 1);
        r1 = r0 + 1;
    }
    if c0 >= c1 {
        c0 = ((cx * width as f64) as usize).min(width - 1);
        c1 = c0 + 1;
    }
    (r0, r1, c0, c1)
}

/// Full-image padding noise for `(seed, step, object)`.
pub fn padding_noise(shape: (usize, usize, usize), seed: u64, step: usize, object: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((step as u64) << 32) | object as u64);
    Array3::from_shape_simple_fn(shape, || {
        let e: f64 = StandardNormal.sample(&mut rng);
        (PAD_MEAN + PAD_STD * e).clamp(0.0, 1.0)
    })
}

fn restrict(mut grad: Image, (r0, r1, c0, c1): (usize, usize, usize, usize)) -> Image {
    let (_, h, w) = grad.dim();
    for ((_, i, j), g) in grad.indexed_iter_mut() {
        if i < r0 || i >= r1 || j < c0 || j >= c1 {
            *g = 0.0;
        }
        debug_assert!(i < h && j < w);
    }
    grad
}

fn paste(mut noise: Image, image: &Image, (r0, r1, c0, c1): (usize, usize, usize, usize)) -> Image {
    let region = ndarray::s![.., r0..r1, c0..c1];
    noise.slice_mut(region).assign(&image.slice(region));
    noise
}

/// Keeps the box interior of `image` and fills the rest with padding noise.
pub fn pad_with_noise(image: &Image, bbox: &BBox, seed: u64, step: usize, object: usize) -> Image {
    let (_, h, w) = image.dim();
    let noise = padding_noise(image.dim(), seed, step, object);
    paste(noise, image, interior(bbox, h, w))
}

/// Prompt similarity of the whole image estimate.
pub fn text_guidance(embedder: &dyn Embedder, image: &Image, prompt: &str) -> Result<TermOutput> {
    let target = embedder.embed_text(prompt)?;
    let (score, grad) = embedder.similarity_grad(image, &target)?;
    Ok(TermOutput {
        score,
        gradient: grad.mapv(|v| -v),
    })
}

/// Per-object scores of the box term, for tracing and metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxTerm {
    pub total: TermOutput,
    pub per_object: Vec<f64>,
}

fn check_rois(image: &Image, rois: &RoiContext) -> Result<()> {
    let (_, h, w) = image.dim();
    if rois.rois.is_empty() {
        return Err(Error::EmptyRoi);
    }
    if (h, w) != rois.size() {
        return Err(Error::Shape(format!(
            "image is {h}x{w} but regions were laid out for {:?}",
            rois.size()
        )));
    }
    Ok(())
}

/// Weighted sum over objects of the class-prompt similarity of the
/// noise-padded crop.
pub fn box_guidance(
    embedder: &dyn Embedder,
    image: &Image,
    rois: &RoiContext,
    seed: u64,
    step: usize,
) -> Result<BoxTerm> {
    check_rois(image, rois)?;
    let mut gradient = Array3::zeros(image.raw_dim());
    let mut score = 0.0;
    let mut per_object = Vec::with_capacity(rois.rois.len());
    for (k, roi) in rois.rois.iter().enumerate() {
        let target = embedder.embed_class(&roi.label)?;
        let span = rois.interior(k);
        let padded = paste(padding_noise(image.dim(), seed, step, k), image, span);
        let (s, g) = embedder.similarity_grad(&padded, &target)?;
        score += roi.weight * s;
        per_object.push(s);
        let g = restrict(g, span);
        Zip::from(&mut gradient).and(&g).for_each(|a, &b| *a -= roi.weight * b);
    }
    Ok(BoxTerm {
        total: TermOutput { score, gradient },
        per_object,
    })
}

/// The box term evaluated on the pure padding noise of each object, with
/// the same prompts, weights and interior support.
pub fn gauss_guidance(
    embedder: &dyn Embedder,
    shape: (usize, usize, usize),
    rois: &RoiContext,
    seed: u64,
    step: usize,
) -> Result<TermOutput> {
    if rois.rois.is_empty() {
        return Err(Error::EmptyRoi);
    }
    let mut gradient = Array3::zeros(shape);
    let mut score = 0.0;
    for (k, roi) in rois.rois.iter().enumerate() {
        let target = embedder.embed_class(&roi.label)?;
        let noise = padding_noise(shape, seed, step, k);
        let (s, g) = embedder.similarity_grad(&noise, &target)?;
        score += roi.weight * s;
        let g = restrict(g, rois.interior(k));
        Zip::from(&mut gradient).and(&g).for_each(|a, &b| *a -= roi.weight * b);
    }
    Ok(TermOutput { score, gradient })
}

/// `lambda * box + (1 - lambda) * gauss`, i.e. `lambda (box - gauss) + gauss`.
pub fn blend_augmented(box_grad: &Image, gauss_grad: &Image, lambda: f64) -> Image {
    if lambda == 1.0 {
        return box_grad.clone();
    }
    Zip::from(box_grad)
        .and(gauss_grad)
        .map_collect(|&b, &g| lambda * b + (1.0 - lambda) * g)
}

/// Noise-contrasted box gradient; the score is the plain box score.
pub fn augmented_box_guidance(
    embedder: &dyn Embedder,
    image: &Image,
    rois: &RoiContext,
    lambda: f64,
    seed: u64,
    step: usize,
) -> Result<BoxTerm> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidValue(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let plain = box_guidance(embedder, image, rois, seed, step)?;
    if lambda == 1.0 {
        return Ok(plain);
    }
    let gauss = gauss_guidance(embedder, image.dim(), rois, seed, step)?;
    Ok(BoxTerm {
        total: TermOutput {
            score: plain.total.score,
            gradient: blend_augmented(&plain.total.gradient, &gauss.gradient, lambda),
        },
        per_object: plain.per_object,
    })
}

/// Segmentation map as seen by the autoencoder: palette colours at image size.
pub fn seg_target_image(seg: &SegMap, palette: &Palette, height: usize, width: usize) -> Image {
    render_segmentation(&seg.resized(height, width), palette)
}

/// Agreement between the codes of the image and of the rendered segmentation.
pub fn seg_guidance(ae: &FirstStageAE, image: &Image, seg: &SegMap, palette: &Palette) -> Result<TermOutput> {
    let (_, h, w) = image.dim();
    let target = ae_code(ae, &seg_target_image(seg, palette, h, w))?;
    seg_guidance_with_code(ae, image, &target)
}

/// As [`seg_guidance`] with a precomputed target code.
pub fn seg_guidance_with_code(ae: &FirstStageAE, image: &Image, target: &Array1<f64>) -> Result<TermOutput> {
    let (score, grad) = ae.code_vjp(image, target)?;
    Ok(TermOutput {
        score,
        gradient: grad.mapv(|v| -v),
    })
}

/// Inputs of the combined guidance at one sampler step.
pub struct GuidanceInputs<'a> {
    pub prompt: Option<&'a str>,
    pub rois: Option<&'a RoiContext>,
    pub seg: Option<(&'a SegMap, &'a Palette)>,
}

/// Combined gradient and the per-term records.
#[derive(Debug, Clone)]
pub struct TotalGuidance {
    pub gradient: Image,
    pub terms: Vec<(String, TermRecord)>,
}

fn norm(x: &Image) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `seg_scale * seg + text + box` over the enabled terms.
pub fn total_guidance(
    spec: &GuidanceSpec,
    embedder: &dyn Embedder,
    ae: &FirstStageAE,
    image: &Image,
    inputs: &GuidanceInputs<'_>,
    step: usize,
) -> Result<TotalGuidance> {
    spec.validate()?;
    let mut gradient = Array3::zeros(image.raw_dim());
    let mut terms = Vec::new();
    if spec.enable_seg {
        let (seg, palette) = inputs.seg.ok_or(Error::MissingInput("seg"))?;
        let t = seg_guidance(ae, image, seg, palette)?;
        Zip::from(&mut gradient).and(&t.gradient).for_each(|a, &b| *a += spec.seg_scale * b);
        terms.push(("seg".to_owned(), TermRecord::new(t.score, spec.seg_scale * norm(&t.gradient))));
    }
    if spec.enable_text {
        let prompt = inputs.prompt.ok_or(Error::MissingInput("text"))?;
        let t = text_guidance(embedder, image, prompt)?;
        gradient += &t.gradient;
        terms.push(("text".to_owned(), TermRecord::new(t.score, norm(&t.gradient))));
    }
    if spec.enable_box {
        let rois = inputs.rois.ok_or(Error::MissingInput("box"))?;
        let t = if spec.augmented_box {
            augmented_box_guidance(embedder, image, rois, spec.lambda, spec.noise_seed, step)?
        } else {
            box_guidance(embedder, image, rois, spec.noise_seed, step)?
        };
        gradient += &t.total.gradient;
        terms.push(("box".to_owned(), TermRecord::new(t.total.score, norm(&t.total.gradient))));
    }
    if gradient.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidValue("guidance gradient is not finite".into()));
    }
    Ok(TotalGuidance { gradient, terms })
}

/// Fraction of `sum |g|` over pixels (all channels) inside the ROI union.
pub fn mass_inside(gradient: &Image, rois: &RoiContext) -> f64 {
    let mask = rois.union_mask();
    let mut inside = 0.0;
    let mut total = 0.0;
    for ((_, i, j), g) in gradient.indexed_iter() {
        total += g.abs();
        if mask[[i, j]] {
            inside += g.abs();
        }
    }
    if total == 0.0 {
        0.0
    } else {
        inside / total
    }
}
