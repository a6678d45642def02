//! Training and export jobs behind the CLI verbs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sgguide::datasets::{generate_shapes, shapes_vocab, DatasetManifest, SceneRecord, ShapesConfig};
use sgguide::diffusion::{
    examples_from_records, train_diffusion, DiffusionMeta, DiffusionTrainConfig, UNet, UNetConfig,
};
use sgguide::embeddings::{embedder_from_profile, EmbedderProfile};
use sgguide::pipeline::io::{save_image_png, write_layout, Layout};
use sgguide::scene_graph::save_graph_json;
use sgguide::sg2seg::{self, EpochMetrics, NodeFeatureMode, Sg2SegConfig, Sg2SegMeta, Sg2SegModel, TrainConfig};
use sgguide::{Error, Result};

/// Synthetic records used by a training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    /// A manifest written by `dataset export`; overrides the fields below.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub generator: ShapesConfig,
    pub count: usize,
    pub train_count: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            manifest: None,
            generator: ShapesConfig::default(),
            count: 1000,
            train_count: 800,
        }
    }
}

impl DatasetSpec {
    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.manifest {
            Some(p) => DatasetManifest::load(p),
            None => DatasetManifest::sequential(self.generator.clone(), self.count, self.train_count),
        }
    }

    /// `(train, test)` records.
    pub fn split(&self) -> Result<(Vec<SceneRecord>, Vec<SceneRecord>)> {
        let m = self.manifest()?;
        let all = generate_shapes(&m.generator, m.count)?;
        let pick = |idx: &[usize]| -> Result<Vec<SceneRecord>> {
            idx.iter()
                .map(|&i| {
                    all.get(i)
                        .cloned()
                        .ok_or_else(|| Error::Config(format!("manifest index {i} exceeds {} records", m.count)))
                })
                .collect()
        };
        Ok((pick(&m.train)?, pick(&m.test)?))
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Sg2SegJob {
    pub dataset: DatasetSpec,
    /// `input_dim` and `num_relations` are taken from the embedder and vocabulary.
    pub model: Sg2SegConfig,
    pub train: TrainConfig,
    pub node_features: NodeFeatureMode,
    pub embedder: EmbedderProfile,
    pub checkpoint: PathBuf,
}

impl Default for Sg2SegJob {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: Sg2SegConfig::default(),
            train: TrainConfig::default(),
            node_features: NodeFeatureMode::Semantic,
            embedder: EmbedderProfile::default(),
            checkpoint: PathBuf::from("sg2seg.bin"),
        }
    }
}

/// Trains a layout network and saves it; returns the per-epoch metrics.
pub fn train_sg2seg(job: &Sg2SegJob) -> Result<Vec<EpochMetrics>> {
    let vocab = shapes_vocab();
    let embedder = embedder_from_profile(job.embedder.clone())?;
    let (train, test) = job.dataset.split()?;
    let train = sg2seg::samples_from_records(&train, &vocab, embedder.as_ref(), job.node_features)?;
    let test = sg2seg::samples_from_records(&test, &vocab, embedder.as_ref(), job.node_features)?;
    let mut model = Sg2SegModel::new(Sg2SegConfig {
        input_dim: job.embedder.dimension,
        num_relations: vocab.relationship_classes().len(),
        ..job.model.clone()
    })?;
    let history = sg2seg::train(&mut model, &train, &test, &vocab, &job.train)?;
    model.save(
        &job.checkpoint,
        &Sg2SegMeta {
            vocab,
            embedder: job.embedder.clone(),
            node_features: job.node_features,
        },
    )?;
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionJob {
    pub dataset: DatasetSpec,
    /// `image_size` must divide the generator's image size.
    pub model: UNetConfig,
    pub train: DiffusionTrainConfig,
    pub checkpoint: PathBuf,
}

impl Default for DiffusionJob {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            model: UNetConfig::default(),
            train: DiffusionTrainConfig::default(),
            checkpoint: PathBuf::from("diffusion.bin"),
        }
    }
}

/// Trains the noise predictor on the training split and saves it; returns the step losses.
pub fn train_diffusion_job(job: &DiffusionJob) -> Result<Vec<f64>> {
    if job.model.cond_dim.is_some() {
        return Err(Error::Config("the diffuse verb trains unconditional models only".into()));
    }
    let (train, _) = job.dataset.split()?;
    let data = examples_from_records(&train, job.model.image_size)?;
    let model = UNet::new(job.model.clone())?;
    let meta = DiffusionMeta::default();
    let losses = train_diffusion(&model, &data, &meta.schedule()?, &job.train)?;
    model.save(&job.checkpoint, &meta)?;
    Ok(losses)
}

/// Writes the manifest plus every record's image, graph and layout under `dir`.
pub fn export_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    let manifest = spec.manifest()?;
    let vocab = shapes_vocab();
    let records = generate_shapes(&manifest.generator, manifest.count)?;
    for (i, r) in records.iter().enumerate() {
        let rdir = dir.join("records").join(format!("{i:05}"));
        save_image_png(&r.image, rdir.join("image.png"))?;
        save_graph_json(rdir.join("graph.json"), &r.graph, &vocab)?;
        let layout = Layout {
            classes: r.graph.classes().to_vec(),
            boxes: r.boxes.clone(),
            masks: r.masks.clone(),
            seg: r.seg.clone(),
        };
        write_layout(rdir.join("layout"), &layout, &vocab, "ground_truth")?;
    }
    manifest.save(dir.join("manifest.json"))?;
    Ok(manifest)
}

