//! End-to-end runs: scene graph, layout (predicted or ground truth), guided
//! sampling, and the artifacts of a run; plus the guidance ablation table.

pub mod grid;
pub mod io;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::datasets::{caption_for, generate_shapes, shapes_vocab, ShapesConfig};
use crate::diffusion::{Conditioned, DdimSampler, FirstStageAE, NoisePredictor, UNet};
use crate::embeddings::{embedder_from_profile, similarity, Embedder, EmbedderProfile};
use crate::error::{Error, Result};
use crate::guidance::{mass_inside, total_guidance, GuidanceInputs, GuidanceSpec, GuidanceTrace, RoiContext, TermRecord};
use crate::scene_graph::{load_graph_json, SceneGraph, Vocab};
use crate::sg2seg::{compose_segmentation, node_features, Palette, Sg2SegModel, MASK_SIZE};
use crate::shapes::{Image, BACKGROUND};

pub use io::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutSource {
    Predicted,
    GroundTruth,
}

/// Where the scene graph comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SceneSource {
    /// Record `index` of a synthetic shapes set; has a ground-truth layout.
    Shapes {
        #[serde(default)]
        generator: ShapesConfig,
        index: usize,
    },
    /// A scene graph JSON file; layouts must be predicted.
    Graph { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerSettings {
    pub steps: usize,
    pub seed: u64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self { steps: 100, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub scene: SceneSource,
    pub layout: LayoutSource,
    #[serde(default)]
    pub sg2seg_checkpoint: Option<PathBuf>,
    pub diffusion_checkpoint: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub guidance: GuidanceSpec,
    #[serde(default)]
    pub sampler: SamplerSettings,
    /// Text prompt; defaults to the caption of the scene graph.
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default)]
    pub embedder: EmbedderProfile,
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::CheckpointMissing(path.to_owned()))
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.sampler.steps == 0 {
            return Err(Error::Config("sampler steps must be at least 1".into()));
        }
        self.guidance.validate()?;
        self.embedder.validate()?;
        require_file(&self.diffusion_checkpoint)?;
        match (&self.scene, self.layout) {
            (SceneSource::Graph { .. }, LayoutSource::GroundTruth) => {
                return Err(Error::Config("a graph file has no ground-truth layout; use a shapes scene".into()));
            }
            (SceneSource::Graph { path }, _) if !path.is_file() => {
                return Err(Error::Config(format!("graph file {} does not exist", path.display())));
            }
            _ => {}
        }
        if self.layout == LayoutSource::Predicted {
            let ckpt = self
                .sg2seg_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("predicted layouts need sg2seg_checkpoint".into()))?;
            require_file(ckpt)?;
        }
        Ok(())
    }
}

/// Graph and layout of the scene to render.
#[derive(Debug, Clone)]
pub struct Scene {
    pub graph: SceneGraph,
    pub vocab: Vocab,
    pub layout: Layout,
}

impl Scene {
    pub fn class_names(&self) -> Vec<String> {
        self.layout
            .classes
            .iter()
            .map(|&c| self.vocab.object_name(c).unwrap_or("object").to_owned())
            .collect()
    }

    pub fn palette(&self) -> Palette {
        Palette::for_classes(self.vocab.object_classes())
    }
}

/// Ground-truth scene of shapes record `index`.
pub fn shapes_scene(generator: &ShapesConfig, index: usize) -> Result<Scene> {
    let record = generate_shapes(generator, index + 1)?.pop().expect("index + 1 records");
    Ok(Scene {
        layout: Layout {
            classes: record.graph.classes().to_vec(),
            boxes: record.boxes,
            masks: record.masks,
            seg: record.seg,
        },
        graph: record.graph,
        vocab: shapes_vocab(),
    })
}

/// Layout of `graph` predicted by a trained layout network.
pub fn predict_scene(graph: SceneGraph, vocab: Vocab, checkpoint: &Path) -> Result<Scene> {
    let (model, meta) = Sg2SegModel::load(checkpoint)?;
    // node classes are matched to the checkpoint vocabulary by name
    let mut classes = Vec::with_capacity(graph.num_nodes());
    for &c in graph.classes() {
        let name = vocab.object_name(c).unwrap_or_default();
        classes.push(meta.vocab.object_index(name).ok_or_else(|| Error::UnknownClass {
            name: name.to_owned(),
            list: "checkpoint object classes",
        })?);
    }
    let mapped = SceneGraph::new_unchecked(classes.clone(), graph.edges().to_vec());
    let embedder = embedder_from_profile(meta.embedder.clone())?;
    let features = node_features(&mapped, &meta.vocab, embedder.as_ref(), meta.node_features, 0)?;
    let out = model.predict(&mapped, &features)?;
    let seg = compose_segmentation(&out.boxes, &out.masks, &classes, MASK_SIZE, MASK_SIZE)?;
    Ok(Scene {
        graph: mapped,
        vocab: meta.vocab,
        layout: Layout {
            classes,
            boxes: out.boxes,
            masks: Some(out.masks),
            seg: Some(seg),
        },
    })
}

/// Resolves the scene of `config` (graph build, then layout).
pub fn resolve_scene(config: &RunConfig) -> Result<Scene> {
    let (graph, vocab, gt) = match &config.scene {
        SceneSource::Shapes { generator, index } => {
            let s = shapes_scene(generator, *index).map_err(|e| e.in_module("datasets"))?;
            (s.graph.clone(), s.vocab.clone(), Some(s))
        }
        SceneSource::Graph { path } => {
            let (g, v) = load_graph_json(path).map_err(|e| e.in_module("scene_graph"))?;
            (g, v, None)
        }
    };
    match config.layout {
        LayoutSource::GroundTruth => gt.ok_or_else(|| Error::Config("no ground-truth layout for this scene".into())),
        LayoutSource::Predicted => {
            let ckpt = config
                .sg2seg_checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("predicted layouts need sg2seg_checkpoint".into()))?;
            predict_scene(graph, vocab, ckpt).map_err(|e| e.in_module("sg2seg"))
        }
    }
}

/// A loaded sampler with everything the guidance needs for one scene.
pub struct Prepared {
    pub model: UNet,
    pub sampler: DdimSampler,
    pub embedder: Box<dyn Embedder>,
    pub ae: FirstStageAE,
    pub scene: Scene,
    pub prompt: String,
    pub rois: RoiContext,
    pub palette: Palette,
    pub shape: (usize, usize, usize),
    cond: Option<Vec<f32>>,
}

impl Prepared {
    pub fn new(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let scene = resolve_scene(config)?;
        let embedder = embedder_from_profile(config.embedder.clone()).map_err(|e| e.in_module("embeddings"))?;
        let (model, meta) = UNet::load(&config.diffusion_checkpoint).map_err(|e| e.in_module("diffusion"))?;
        let schedule = meta.schedule()?;
        let sampler = DdimSampler::new(schedule, config.sampler.steps).map_err(|e| e.in_module("diffusion"))?;
        let cfg = model.config().clone();
        let shape = (cfg.channels, cfg.image_size, cfg.image_size);
        let prompt = config
            .prompt
            .clone()
            .unwrap_or_else(|| caption_for(&scene.graph, &scene.vocab));
        let cond = match cfg.cond_dim {
            None => None,
            Some(d) => {
                let e = embedder.embed_text(&prompt)?;
                if e.dim() != d {
                    return Err(Error::Config(format!(
                        "diffusion model expects a {d}-wide condition, embedder gives {}",
                        e.dim()
                    )));
                }
                Some(e.vector().iter().map(|&v| v as f32).collect())
            }
        };
        let rois = RoiContext::new(&scene.layout.boxes, &scene.class_names(), shape.1, shape.2)?;
        let palette = scene.palette();
        Ok(Self {
            model,
            sampler,
            embedder,
            ae: FirstStageAE::identity(shape),
            rois,
            palette,
            prompt,
            scene,
            shape,
            cond,
        })
    }

    pub fn inputs(&self) -> GuidanceInputs<'_> {
        GuidanceInputs {
            prompt: Some(&self.prompt),
            rois: Some(&self.rois),
            seg: self.scene.layout.seg.as_ref().map(|s| (s, &self.palette)),
        }
    }

    pub fn sample(&self, spec: &GuidanceSpec, seed: u64) -> Result<GuidedRun> {
        let inputs = self.inputs();
        match &self.cond {
            Some(c) => {
                let m = Conditioned {
                    model: &self.model,
                    cond: c.clone(),
                };
                guided_sample(&m, &self.sampler, self.shape, seed, spec, self.embedder.as_ref(), &self.ae, &inputs)
            }
            None => guided_sample(
                &self.model,
                &self.sampler,
                self.shape,
                seed,
                spec,
                self.embedder.as_ref(),
                &self.ae,
                &inputs,
            ),
        }
    }
}

/// Result of one guided sampling run.
#[derive(Debug, Clone)]
pub struct GuidedRun {
    pub image: Image,
    pub trace: GuidanceTrace,
    /// Mean over steps of the share of guidance mass inside the ROIs;
    /// zero without box inputs or guidance.
    pub adherence: f64,
}

/// Samples with the combined guidance of `spec`; with every term disabled
/// the sampler runs without a guidance hook at all.
#[allow(clippy::too_many_arguments)]
pub fn guided_sample(
    model: &dyn NoisePredictor,
    sampler: &DdimSampler,
    shape: (usize, usize, usize),
    seed: u64,
    spec: &GuidanceSpec,
    embedder: &dyn Embedder,
    ae: &FirstStageAE,
    inputs: &GuidanceInputs<'_>,
) -> Result<GuidedRun> {
    spec.validate()?;
    let mut trace = GuidanceTrace::default();
    if !spec.any_enabled() {
        let image = sampler.sample(model, shape, seed, None, spec.alpha).map_err(|e| e.in_module("diffusion"))?;
        return Ok(GuidedRun {
            image,
            trace,
            adherence: 0.0,
        });
    }
    let mut adherence = 0.0;
    let mut hook = |step: usize, t: usize, estimate: &Array3<f64>| -> Result<Array3<f64>> {
        let total = total_guidance(spec, embedder, ae, estimate, inputs, step).map_err(|e| e.in_module("guidance"))?;
        if let Some(rois) = inputs.rois {
            adherence += mass_inside(&total.gradient, rois);
        }
        trace.push(step, t, total.terms)?;
        // terms report descent gradients; the sampler ascends
        Ok(total.gradient.mapv(|v| -v))
    };
    let image = sampler
        .sample(model, shape, seed, Some(&mut hook), spec.alpha)
        .map_err(|e| e.in_module("diffusion"))?;
    let steps = trace.len().max(1) as f64;
    Ok(GuidedRun {
        image,
        trace,
        adherence: adherence / steps,
    })
}

/// Similarity of each ROI of `image`, with everything outside the box set to
/// the background gray, to its class prompt.
pub fn roi_similarities(embedder: &dyn Embedder, image: &Image, rois: &RoiContext) -> Result<Vec<f64>> {
    let (_, h, w) = image.dim();
    rois.rois()
        .iter()
        .enumerate()
        .map(|(k, roi)| {
            let (r0, r1, c0, c1) = rois.interior(k);
            let mut crop = Array3::from_elem((3, h, w), BACKGROUND);
            let region = ndarray::s![.., r0..r1, c0..c1];
            crop.slice_mut(region).assign(&image.slice(region));
            similarity(&embedder.embed_image(&crop)?, &embedder.embed_class(&roi.label)?)
        })
        .collect()
}

pub fn mean_roi_similarity(embedder: &dyn Embedder, image: &Image, rois: &RoiContext) -> Result<f64> {
    let s = roi_similarities(embedder, image, rois)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub images: Vec<PathBuf>,
    pub layout: PathBuf,
    pub trace: PathBuf,
    pub trace_summary: BTreeMap<String, TermRecord>,
    pub prompt: String,
    pub mean_roi_similarity: f64,
    pub config: RunConfig,
    pub wall_clock_secs: f64,
}

pub const REPORT_FILE: &str = "report.json";

/// Runs the whole pipeline and writes `grid.png`, `layout/`, `trace.jsonl`
/// and `report.json` into the output directory.
pub fn run_pipeline(config: &RunConfig) -> Result<RunReport> {
    let start = Instant::now();
    let prepared = Prepared::new(config)?;
    let run = prepared.sample(&config.guidance, config.sampler.seed)?;
    let out = &config.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let grid_path = out.join("grid.png");
    let grid = grid::render_grid(std::slice::from_ref(&run.image), std::slice::from_ref(&prepared.prompt))?;
    io::save_rgb_png(&grid, &grid_path)?;
    let source = match config.layout {
        LayoutSource::Predicted => "predicted",
        LayoutSource::GroundTruth => "ground_truth",
    };
    let layout = io::write_layout(out.join("layout"), &prepared.scene.layout, &prepared.scene.vocab, source)?;
    let trace_path = out.join("trace.jsonl");
    run.trace.write_jsonl(&trace_path)?;

    let report = RunReport {
        images: vec![grid_path],
        layout,
        trace: trace_path,
        trace_summary: run.trace.summary(),
        prompt: prepared.prompt.clone(),
        mean_roi_similarity: mean_roi_similarity(prepared.embedder.as_ref(), &run.image, &prepared.rois)?,
        config: config.clone(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

/// Which guidance terms a cell enables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermSet {
    pub text: bool,
    #[serde(rename = "box")]
    pub boxes: bool,
    pub seg: bool,
}

impl TermSet {
    pub const ALL: Self = Self {
        text: true,
        boxes: true,
        seg: true,
    };

    /// `text+box+seg`, any subset joined by `+`, or `none`.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Self {
            text: false,
            boxes: false,
            seg: false,
        };
        if s == "none" {
            return Ok(t);
        }
        for part in s.split('+') {
            match part.trim() {
                "text" => t.text = true,
                "box" => t.boxes = true,
                "seg" => t.seg = true,
                other => return Err(Error::Config(format!("unknown guidance term `{other}` in `{s}`"))),
            }
        }
        Ok(t)
    }

    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.text, "text"), (self.boxes, "box"), (self.seg, "seg")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            "none".to_owned()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub lambdas: Vec<f64>,
    pub term_sets: Vec<TermSet>,
}

impl AblationGrid {
    /// One guidance spec per `(term set, lambda)` pair, term sets outermost.
    pub fn cells(&self, base: &GuidanceSpec) -> Result<Vec<(TermSet, GuidanceSpec)>> {
        if self.lambdas.is_empty() || self.term_sets.is_empty() {
            return Err(Error::Config("ablation grid has no cells".into()));
        }
        let mut out = Vec::new();
        for ts in &self.term_sets {
            for &lambda in &self.lambdas {
                let spec = GuidanceSpec {
                    enable_text: ts.text,
                    enable_box: ts.boxes,
                    enable_seg: ts.seg,
                    augmented_box: true,
                    lambda,
                    ..base.clone()
                };
                spec.validate()?;
                out.push((*ts, spec));
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub terms: String,
    pub lambda: f64,
    pub seeds: usize,
    pub mean_roi_similarity: f64,
    pub box_adherence: f64,
    pub runtime_secs: f64,
    /// For `lambda = 1` cells with the box term: whether every output
    /// matched the plain box term run bit for bit.
    pub vanilla_equivalent: Option<bool>,
}

struct CellResult {
    images: Vec<Image>,
    similarity: f64,
    adherence: f64,
}

fn run_cell(prepared: &Prepared, spec: &GuidanceSpec, seeds: &[u64]) -> Result<CellResult> {
    let mut images = Vec::with_capacity(seeds.len());
    let (mut sim, mut adh) = (0.0, 0.0);
    for &seed in seeds {
        let run = prepared.sample(spec, seed)?;
        sim += mean_roi_similarity(prepared.embedder.as_ref(), &run.image, &prepared.rois)?;
        adh += run.adherence;
        images.push(run.image);
    }
    let n = seeds.len() as f64;
    Ok(CellResult {
        images,
        similarity: sim / n,
        adherence: adh / n,
    })
}

/// Runs every grid cell over `seeds` (shared by all cells) on the scene of
/// `config`.
pub fn ablate(config: &RunConfig, grid: &AblationGrid, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let cells = grid.cells(&config.guidance)?;
    let prepared = Prepared::new(config)?;
    let mut rows = Vec::with_capacity(cells.len());
    for (terms, spec) in cells {
        let start = Instant::now();
        let res = run_cell(&prepared, &spec, seeds)?;
        let runtime_secs = start.elapsed().as_secs_f64();
        let vanilla_equivalent = if spec.enable_box && spec.lambda == 1.0 {
            let vanilla = run_cell(
                &prepared,
                &GuidanceSpec {
                    augmented_box: false,
                    ..spec.clone()
                },
                seeds,
            )?;
            Some(
                vanilla.images == res.images
                    && vanilla.similarity.to_bits() == res.similarity.to_bits()
                    && vanilla.adherence.to_bits() == res.adherence.to_bits(),
            )
        } else {
            None
        };
        log::info!("ablation cell {} lambda {}: similarity {:.4}", terms.label(), spec.lambda, res.similarity);
        rows.push(AblationRow {
            terms: terms.label(),
            lambda: spec.lambda,
            seeds: seeds.len(),
            mean_roi_similarity: res.similarity,
            box_adherence: res.adherence,
            runtime_secs,
            vanilla_equivalent,
        });
    }
    Ok(rows)
}

pub fn write_ablation_csv(rows: &[AblationRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_ablation_csv(path: impl AsRef<Path>) -> Result<Vec<AblationRow>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
