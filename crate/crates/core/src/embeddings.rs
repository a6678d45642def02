//! Text/image embedders sharing one unit-norm embedding space.
//!
//! [`ToyEmbedder`] is a deterministic, closed-form differentiable stand-in for
//! a CLIP-like model: images are 8x8 average-pooled, centred on the background
//! gray and projected by a seeded random matrix. Class prompts embed the
//! class's prototype patch through the same image path, so text and image
//! embeddings are directly comparable.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shapes::{prototype_patch, Image, ShapeKind, BACKGROUND};

pub const OBJ_PLACEHOLDER: &str = "[obj]";
pub const DEFAULT_TEMPLATE: &str = "a photo of an [obj]";
pub const DEFAULT_DIMENSION: usize = 512;
/// Side of the pooling grid used by the toy image path.
pub const POOL_GRID: usize = 8;
const POOLED_LEN: usize = 3 * POOL_GRID * POOL_GRID;
const PROTOTYPE_SIZE: usize = 64;

/// A unit-norm vector tagged with the space it lives in.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    vector: Array1<f64>,
    space: String,
}

impl Embedding {
    /// Normalises `raw` to unit length. Fails on zero or non-finite input.
    pub fn normalized(raw: Array1<f64>, space: impl Into<String>) -> Result<Self> {
        let norm = raw.dot(&raw).sqrt();
        if !norm.is_finite() || norm == 0.0 {
            return Err(Error::InvalidValue(format!("cannot normalise vector with norm {norm}")));
        }
        Ok(Self {
            vector: raw / norm,
            space: space.into(),
        })
    }

    pub fn vector(&self) -> &Array1<f64> {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn space(&self) -> &str {
        &self.space
    }

    pub fn negated(&self) -> Self {
        Self {
            vector: -&self.vector,
            space: self.space.clone(),
        }
    }
}

/// Cosine similarity of two unit embeddings from the same space.
pub fn similarity(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() || a.space != b.space {
        return Err(Error::DimensionMismatch {
            left: format!("{}:{}", a.space, a.dim()),
            right: format!("{}:{}", b.space, b.dim()),
        });
    }
    Ok(a.vector.dot(&b.vector).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderProfile {
    pub name: String,
    pub dimension: usize,
    pub differentiable_image_path: bool,
    pub prompt_template: String,
    /// Weights for external adapters; never bundled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for EmbedderProfile {
    fn default() -> Self {
        Self {
            name: "toy".to_owned(),
            dimension: DEFAULT_DIMENSION,
            differentiable_image_path: true,
            prompt_template: DEFAULT_TEMPLATE.to_owned(),
            weights: None,
            seed: Some(0),
        }
    }
}

impl EmbedderProfile {
    pub fn validate(&self) -> Result<()> {
        let count = self.prompt_template.matches(OBJ_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::Config(format!(
                "prompt template `{}` must contain exactly one {OBJ_PLACEHOLDER}, found {count}",
                self.prompt_template
            )));
        }
        if self.dimension == 0 {
            return Err(Error::Config("embedding dimension must be positive".into()));
        }
        Ok(())
    }

    /// Applies the template literally; no article correction.
    pub fn prompt(&self, class: &str) -> String {
        self.prompt_template.replacen(OBJ_PLACEHOLDER, class, 1)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Self = serde_json::from_str(&text).map_err(|e| Error::schema("$", e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Shared text/image embedding interface.
pub trait Embedder: Send + Sync {
    fn profile(&self) -> &EmbedderProfile;

    fn embed_text(&self, text: &str) -> Result<Embedding>;

    fn embed_image(&self, image: &Image) -> Result<Embedding>;

    /// `similarity(embed_image(image), target)` and its gradient w.r.t. the
    /// image pixels.
    fn similarity_grad(&self, image: &Image, target: &Embedding) -> Result<(f64, Image)> {
        let _ = (image, target);
        Err(Error::NonDifferentiableEmbedder(self.profile().name.clone()))
    }

    /// Embeds the templated prompt for `class`.
    fn embed_class(&self, class: &str) -> Result<Embedding> {
        self.embed_text(&self.profile().prompt(class))
    }
}

fn check_image(image: &Image) -> Result<(usize, usize)> {
    let (c, h, w) = image.dim();
    if c != 3 || h < POOL_GRID || w < POOL_GRID {
        return Err(Error::Shape(format!(
            "image must be [3, H>={POOL_GRID}, W>={POOL_GRID}], got [{c}, {h}, {w}]"
        )));
    }
    if image.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("image has non-finite pixels".into()));
    }
    Ok((h, w))
}

fn bin_of(index: usize, extent: usize) -> usize {
    index * POOL_GRID / extent
}

fn bin_size(bin: usize, extent: usize) -> usize {
    // pixels i with floor(i * G / extent) == bin
    let start = (bin * extent).div_ceil(POOL_GRID);
    let end = ((bin + 1) * extent).div_ceil(POOL_GRID);
    end - start
}

/// Deterministic toy embedder; see the module docs.
#[derive(Debug, Clone)]
pub struct ToyEmbedder {
    profile: EmbedderProfile,
    projection: Array2<f64>,
    classes: Vec<(String, Array1<f64>)>,
    seed: u64,
}

impl ToyEmbedder {
    pub fn new(profile: EmbedderProfile, classes: &[ShapeKind]) -> Result<Self> {
        profile.validate()?;
        let seed = profile.seed.unwrap_or(0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (profile.dimension as f64).sqrt();
        let projection = Array2::from_shape_simple_fn((profile.dimension, POOLED_LEN), || {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        let classes = classes
            .iter()
            .map(|&k| {
                let patch = prototype_patch(k, PROTOTYPE_SIZE, POOL_GRID);
                (k.name().to_owned(), Self::pool(&patch))
            })
            .collect();
        Ok(Self {
            profile,
            projection,
            classes,
            seed,
        })
    }

    /// Toy embedder over the synthetic-shapes vocabulary with default profile.
    pub fn shapes() -> Self {
        Self::new(EmbedderProfile::default(), &ShapeKind::ALL).expect("default profile is valid")
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|(n, _)| n.as_str())
    }

    /// Background-centred 8x8 average pool, `[3 * 8 * 8]`.
    fn pool(image: &Image) -> Array1<f64> {
        let (_, h, w) = image.dim();
        let mut sums = Array1::<f64>::zeros(POOLED_LEN);
        for ((c, i, j), &v) in image.indexed_iter() {
            let idx = c * POOL_GRID * POOL_GRID + bin_of(i, h) * POOL_GRID + bin_of(j, w);
            sums[idx] += v - BACKGROUND;
        }
        for by in 0..POOL_GRID {
            for bx in 0..POOL_GRID {
                let count = (bin_size(by, h) * bin_size(bx, w)) as f64;
                for c in 0..3 {
                    sums[c * POOL_GRID * POOL_GRID + by * POOL_GRID + bx] /= count;
                }
            }
        }
        sums
    }

    fn project(&self, pooled: &Array1<f64>) -> Array1<f64> {
        self.projection.dot(pooled)
    }

    fn space(&self) -> String {
        format!("{}:{}", self.profile.name, self.seed)
    }

    /// Class names mentioned as whole words (singular or plural `s`).
    fn mentioned_classes(&self, text: &str) -> Vec<usize> {
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .collect();
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| {
                words
                    .iter()
                    .any(|w| *w == name || w.strip_suffix('s') == Some(name.as_str()))
            })
            .map(|(i, _)| i)
            .collect()
    }

    fn hashed_vector(&self, text: &str) -> Array1<f64> {
        let mut h = DefaultHasher::new();
        text.hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish() ^ self.seed.rotate_left(32));
        Array1::from_shape_simple_fn(self.profile.dimension, || StandardNormal.sample(&mut rng))
    }

    /// Full Jacobian of the unit image embedding w.r.t. the flattened
    /// `[3, H, W]` pixels, `[D, 3*H*W]`.
    pub fn image_jacobian(&self, image: &Image) -> Result<Array2<f64>> {
        let (h, w) = check_image(image)?;
        let v = self.project(&Self::pool(image));
        let norm = v.dot(&v).sqrt();
        let u = &v / norm;
        let d = self.profile.dimension;
        let mut jac = Array2::zeros((d, 3 * h * w));
        for c in 0..3 {
            for i in 0..h {
                for j in 0..w {
                    let (by, bx) = (bin_of(i, h), bin_of(j, w));
                    let count = (bin_size(by, h) * bin_size(bx, w)) as f64;
                    let col = self
                        .projection
                        .column(c * POOL_GRID * POOL_GRID + by * POOL_GRID + bx);
                    let dv = &col / count;
                    let du = (&dv - &(&u * u.dot(&dv))) / norm;
                    jac.column_mut(c * h * w + i * w + j).assign(&du);
                }
            }
        }
        Ok(jac)
    }
}

impl Embedder for ToyEmbedder {
    fn profile(&self) -> &EmbedderProfile {
        &self.profile
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        if text.trim().is_empty() {
            return Err(Error::EmptyInput("text"));
        }
        let hits = self.mentioned_classes(text);
        let raw = if hits.is_empty() {
            self.hashed_vector(text)
        } else {
            let mut pooled = Array1::<f64>::zeros(POOLED_LEN);
            for &k in &hits {
                pooled += &self.classes[k].1;
            }
            self.project(&(pooled / hits.len() as f64))
        };
        Embedding::normalized(raw, self.space())
    }

    fn embed_image(&self, image: &Image) -> Result<Embedding> {
        check_image(image)?;
        let v = self.project(&Self::pool(image));
        let norm = v.dot(&v).sqrt();
        if norm < 1e-300 {
            // centred image projects to the origin; pick a fixed direction
            return Embedding::normalized(self.hashed_vector("\u{0}blank"), self.space());
        }
        Embedding::normalized(v, self.space())
    }

    fn similarity_grad(&self, image: &Image, target: &Embedding) -> Result<(f64, Image)> {
        let (h, w) = check_image(image)?;
        if target.dim() != self.profile.dimension || target.space() != self.space() {
            return Err(Error::DimensionMismatch {
                left: format!("{}:{}", self.space(), self.profile.dimension),
                right: format!("{}:{}", target.space(), target.dim()),
            });
        }
        let v = self.project(&Self::pool(image));
        let norm = v.dot(&v).sqrt();
        if norm < 1e-300 {
            return Ok((0.0, Array3::zeros(image.raw_dim())));
        }
        let u = &v / norm;
        let t = target.vector();
        let score = u.dot(t);
        let dv = (t - &(&u * score)) / norm;
        let dpooled = self.projection.t().dot(&dv);
        let mut grad = Array3::zeros(image.raw_dim());
        for ((c, i, j), g) in grad.indexed_iter_mut() {
            let (by, bx) = (bin_of(i, h), bin_of(j, w));
            let count = (bin_size(by, h) * bin_size(bx, w)) as f64;
            *g = dpooled[c * POOL_GRID * POOL_GRID + by * POOL_GRID + bx] / count;
        }
        Ok((score, grad))
    }
}

/// Placeholder for a real CLIP checkpoint. Weights are referenced by path
/// and never bundled; no inference runtime is linked into this crate, so
/// every call reports the adapter as unavailable.
#[derive(Debug, Clone)]
pub struct ExternalAdapter {
    profile: EmbedderProfile,
}

impl ExternalAdapter {
    pub fn new(profile: EmbedderProfile) -> Result<Self> {
        profile.validate()?;
        Ok(Self { profile })
    }

    fn unavailable(&self) -> Error {
        let weights = self
            .profile
            .weights
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<none>".into());
        Error::EmbedderUnavailable(format!("{} (weights: {weights})", self.profile.name))
    }
}

impl Embedder for ExternalAdapter {
    fn profile(&self) -> &EmbedderProfile {
        &self.profile
    }

    fn embed_text(&self, _text: &str) -> Result<Embedding> {
        Err(self.unavailable())
    }

    fn embed_image(&self, _image: &Image) -> Result<Embedding> {
        Err(self.unavailable())
    }

    fn similarity_grad(&self, _image: &Image, _target: &Embedding) -> Result<(f64, Image)> {
        Err(self.unavailable())
    }
}

/// Builds the embedder a profile describes: `toy` profiles get the toy
/// embedder over the shapes vocabulary, anything else an external adapter.
pub fn embedder_from_profile(profile: EmbedderProfile) -> Result<Box<dyn Embedder>> {
    if profile.name == "toy" || profile.name.starts_with("toy-") {
        Ok(Box::new(ToyEmbedder::new(profile, &ShapeKind::ALL)?))
    } else {
        Ok(Box::new(ExternalAdapter::new(profile)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
        Array3::from_shape_simple_fn((3, h, w), || rng.random::<f64>())
    }

    #[test]
    fn text_is_deterministic_and_unit() {
        let e = ToyEmbedder::shapes();
        let a = e.embed_text("a photo of a circle").unwrap();
        let b = e.embed_text("a photo of a circle").unwrap();
        assert_eq!(a, b);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let len = rng.random_range(1..20);
            let s: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            let v = e.embed_text(&s).unwrap();
            assert!((v.vector().dot(v.vector()) - 1.0).abs() < 1e-5);
        }
        assert!(matches!(e.embed_text("  "), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn literal_template() {
        let p = EmbedderProfile::default();
        assert_eq!(p.prompt("sheep"), "a photo of an sheep");
        let bad = EmbedderProfile {
            prompt_template: "[obj] and [obj]".into(),
            ..EmbedderProfile::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn image_map_is_not_constant() {
        let e = ToyEmbedder::shapes();
        let zeros = e.embed_image(&Array3::zeros((3, 32, 32))).unwrap();
        let ones = e.embed_image(&Array3::ones((3, 32, 32))).unwrap();
        assert!(similarity(&zeros, &ones).unwrap() < 0.0);
        assert!(matches!(
            e.embed_image(&Array3::zeros((3, 4, 32))),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn prototypes_identify_their_class() {
        let e = ToyEmbedder::shapes();
        let texts: Vec<Embedding> = ShapeKind::ALL
            .iter()
            .map(|k| e.embed_class(k.name()).unwrap())
            .collect();
        for (ki, k) in ShapeKind::ALL.iter().enumerate() {
            let img = e.embed_image(&prototype_patch(*k, 64, POOL_GRID)).unwrap();
            let sims: Vec<f64> = texts.iter().map(|t| similarity(&img, t).unwrap()).collect();
            assert!(sims[ki] >= 0.99, "{sims:?}");
            let best = sims
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert_eq!(best, ki);
        }
    }

    #[test]
    fn similarity_properties() {
        let e = ToyEmbedder::shapes();
        let a = e.embed_text("star").unwrap();
        assert!((similarity(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((similarity(&a, &a.negated()).unwrap() + 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for i in 0..20 {
            let x = e.embed_image(&random_image(&mut rng, 16, 16)).unwrap();
            let y = e.embed_text(&format!("thing {i}")).unwrap();
            assert_eq!(similarity(&x, &y).unwrap(), similarity(&y, &x).unwrap());
        }
        let other = ToyEmbedder::new(
            EmbedderProfile {
                dimension: 16,
                ..EmbedderProfile::default()
            },
            &ShapeKind::ALL,
        )
        .unwrap();
        let b = other.embed_text("star").unwrap();
        assert!(matches!(similarity(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let e = ToyEmbedder::shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 12, 10);
        let jac = e.image_jacobian(&img).unwrap();
        let h = 1e-3;
        let n = img.len();
        for _ in 0..40 {
            let col = rng.random_range(0..n);
            let mut plus = img.clone();
            let mut minus = img.clone();
            plus.as_slice_mut().unwrap()[col] += h;
            minus.as_slice_mut().unwrap()[col] -= h;
            let fd = (e.embed_image(&plus).unwrap().vector() - e.embed_image(&minus).unwrap().vector())
                / (2.0 * h);
            let an = jac.column(col);
            let err = (&an - &fd).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err <= 1e-4 * scale, "col {col}: {err} vs {scale}");
        }
    }

    #[test]
    fn similarity_gradient_agrees_with_jacobian() {
        let e = ToyEmbedder::shapes();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 16, 16);
        let t = e.embed_text("triangle").unwrap();
        let (s, g) = e.similarity_grad(&img, &t).unwrap();
        assert!((s - similarity(&e.embed_image(&img).unwrap(), &t).unwrap()).abs() < 1e-12);
        let jac = e.image_jacobian(&img).unwrap();
        let expect = jac.t().dot(t.vector());
        let flat = Array1::from_iter(g.iter().copied());
        let err = (&flat - &expect).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-12);
    }

    #[test]
    fn external_adapter_is_unavailable() {
        let p = EmbedderProfile {
            name: "clip-vit-b32".into(),
            weights: Some("/models/clip.safetensors".into()),
            ..EmbedderProfile::default()
        };
        let e = embedder_from_profile(p).unwrap();
        assert!(matches!(e.embed_text("cat"), Err(Error::EmbedderUnavailable(_))));
    }
}
