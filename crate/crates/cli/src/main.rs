//! `sgguide`: scene graphs to guided toy images from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 missing artifact,
//! 4 runtime failure. Relative output paths are resolved against
//! `SGGUIDE_OUTPUT_ROOT` when it is set.

mod jobs;

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgguide::diffusion::{DdimSampler, UNet};
use sgguide::pipeline::{self, io, AblationGrid, LayoutSource, RunConfig, TermSet};
use sgguide::scene_graph::{build_graph, graph_from_json, save_graph_json, Triplet, Vocab};
use sgguide::{datasets, Error, Result};

use jobs::{DatasetSpec, DiffusionJob, Sg2SegJob};

pub const OUTPUT_ROOT_VAR: &str = "SGGUIDE_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "sgguide", version, about = "Scene-graph guided diffusion on synthetic shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scene graph construction.
    #[command(subcommand)]
    Graph(GraphCmd),
    /// Layout network training and prediction.
    #[command(subcommand)]
    Sg2seg(Sg2SegCmd),
    /// Noise predictor training and unguided sampling.
    #[command(subcommand)]
    Diffuse(DiffuseCmd),
    /// End-to-end runs and guidance ablations.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Synthetic dataset export.
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Subcommand)]
enum GraphCmd {
    /// Builds a scene graph JSON from triplets.
    Build {
        /// `subject,predicate,object`; repeatable.
        #[arg(long = "triplet")]
        triplets: Vec<String>,
        /// JSON list of triplet strings, read in addition to `--triplet`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// `{"objects": [...], "relations": [...]}`; defaults to the shapes vocabulary.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum Sg2SegCmd {
    /// Trains on synthetic shapes; writes the checkpoint and `metrics.json` next to it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predicts a layout for a graph.
    Predict {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Layout JSON path; masks and the segmentation PNG go next to it.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DiffuseCmd {
    /// Trains the noise predictor; writes the checkpoint and `losses.json` next to it.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        records: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draws one unguided sample.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Predicted,
    GroundTruth,
}

/// Overrides applied on top of a run config file.
#[derive(Args)]
struct RunOverrides {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long, value_enum)]
    layout: Option<LayoutArg>,
    #[arg(long)]
    sg2seg_ckpt: Option<PathBuf>,
    #[arg(long)]
    diffusion_ckpt: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Graph, layout and guided sample; writes the grid, layout, trace and report.
    Run {
        #[command(flatten)]
        run: RunOverrides,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs a grid of guidance settings and writes a CSV table.
    Ablate {
        #[command(flatten)]
        run: RunOverrides,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 1.2])]
        lambdas: Vec<f64>,
        /// Term sets such as `text+box+seg` or `box`; comma separated.
        #[arg(long, value_delimiter = ',', default_value = "text+box+seg")]
        terms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Writes a manifest plus per-record image, graph and layout files.
    Export {
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long)]
        train_count: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn output_path(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_owned(),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Config(_)
        | Error::Schema { .. }
        | Error::UnknownClass { .. }
        | Error::EmptyInput(_)
        | Error::Json(_)
        | Error::DatasetEmpty
        | Error::EmptyLayout
        | Error::EmptyRoi
        | Error::MissingInput(_) => 2,
        Error::CheckpointMissing(_) | Error::MissingImage(_) => 3,
        Error::Io { source, .. } if source.kind() == ErrorKind::NotFound => 3,
        _ => 4,
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_or_default<T: Default + for<'de> serde::Deserialize<'de>>(config: Option<&Path>) -> Result<T> {
    match config {
        Some(p) if !p.is_file() => Err(Error::Config(format!("config file {} does not exist", p.display()))),
        Some(p) => jobs::read_json(p),
        None => Ok(T::default()),
    }
}

fn graph_build(triplets: &[String], input: Option<&Path>, vocab: Option<&Path>, out: &Path) -> Result<()> {
    let mut all = Vec::new();
    if let Some(p) = input {
        let listed: Vec<String> = jobs::read_json(p)?;
        all.extend(listed);
    }
    all.extend(triplets.iter().cloned());
    let parsed = all
        .iter()
        .map(|s| s.parse::<Triplet>().map_err(|e| Error::Config(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let vocab: Vocab = match vocab {
        Some(p) => jobs::read_json(p)?,
        None => datasets::shapes_vocab(),
    };
    let graph = build_graph(&parsed, &vocab)?;
    let out = output_path(out);
    if let Some(p) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))?;
    }
    save_graph_json(&out, &graph, &vocab)?;
    println!("{}", out.display());
    Ok(())
}

fn sg2seg_predict(graph: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    if !ckpt.is_file() {
        return Err(Error::CheckpointMissing(ckpt.to_owned()));
    }
    let text = std::fs::read_to_string(graph).map_err(|e| Error::io(graph, e))?;
    let (graph, vocab) = graph_from_json(&text)?;
    let scene = pipeline::predict_scene(graph, vocab, ckpt)?;
    let out = output_path(out);
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let written = io::write_layout(dir, &scene.layout, &scene.vocab, "predicted")?;
    if written != out {
        std::fs::rename(&written, &out).map_err(|e| Error::io(&out, e))?;
    }
    println!("{}", out.display());
    Ok(())
}

fn diffuse_sample(ckpt: &Path, seed: u64, steps: usize, out: &Path) -> Result<()> {
    let (model, meta) = UNet::load(ckpt)?;
    if model.config().cond_dim.is_some() {
        return Err(Error::Config("conditional checkpoints are sampled through `pipeline run`".into()));
    }
    let sampler = DdimSampler::new(meta.schedule()?, steps).map_err(|e| Error::Config(e.to_string()))?;
    let c = model.config();
    let image = sampler.sample(&model, (c.channels, c.image_size, c.image_size), seed, None, 0.0)?;
    let out = output_path(out);
    io::save_image_png(&image, &out)?;
    println!("{}", out.display());
    Ok(())
}

fn run_config(o: &RunOverrides) -> Result<RunConfig> {
    if !o.config.is_file() {
        return Err(Error::Config(format!("config file {} does not exist", o.config.display())));
    }
    let mut cfg = RunConfig::load(&o.config)?;
    if let Some(s) = o.seed {
        cfg.sampler.seed = s;
    }
    if let Some(s) = o.steps {
        cfg.sampler.steps = s;
    }
    if let Some(l) = o.lambda {
        cfg.guidance.lambda = l;
    }
    if let Some(a) = o.alpha {
        cfg.guidance.alpha = a;
    }
    if let Some(l) = o.layout {
        cfg.layout = match l {
            LayoutArg::Predicted => LayoutSource::Predicted,
            LayoutArg::GroundTruth => LayoutSource::GroundTruth,
        };
    }
    if let Some(p) = &o.sg2seg_ckpt {
        cfg.sg2seg_checkpoint = Some(p.clone());
    }
    if let Some(p) = &o.diffusion_ckpt {
        cfg.diffusion_checkpoint = p.clone();
    }
    if let Some(p) = &o.prompt {
        cfg.prompt = Some(p.clone());
    }
    cfg.output_dir = output_path(&cfg.output_dir);
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Graph(GraphCmd::Build {
            triplets,
            input,
            vocab,
            out,
        }) => graph_build(&triplets, input.as_deref(), vocab.as_deref(), &out),
        Command::Sg2seg(Sg2SegCmd::Train {
            config,
            epochs,
            records,
            seed,
            out,
        }) => {
            let mut job: Sg2SegJob = load_or_default(config.as_deref())?;
            if let Some(e) = epochs {
                job.train.epochs = e;
            }
            if let Some(n) = records {
                job.dataset.train_count = job.dataset.train_count * n / job.dataset.count.max(1);
                job.dataset.count = n;
            }
            if let Some(s) = seed {
                job.train.seed = s;
            }
            if let Some(p) = out {
                job.checkpoint = p;
            }
            job.checkpoint = output_path(&job.checkpoint);
            let history = jobs::train_sg2seg(&job)?;
            jobs::write_json(&job.checkpoint.with_file_name("metrics.json"), &history)?;
            print_json(&history.last())
        }
        Command::Sg2seg(Sg2SegCmd::Predict { graph, ckpt, out }) => sg2seg_predict(&graph, &ckpt, &out),
        Command::Diffuse(DiffuseCmd::Train {
            config,
            steps,
            records,
            seed,
            out,
        }) => {
            let mut job: DiffusionJob = load_or_default(config.as_deref())?;
            if let Some(s) = steps {
                job.train.steps = s;
            }
            if let Some(n) = records {
                job.dataset.train_count = job.dataset.train_count * n / job.dataset.count.max(1);
                job.dataset.count = n;
            }
            if let Some(s) = seed {
                job.train.seed = s;
            }
            if let Some(p) = out {
                job.checkpoint = p;
            }
            job.checkpoint = output_path(&job.checkpoint);
            let losses = jobs::train_diffusion_job(&job)?;
            jobs::write_json(&job.checkpoint.with_file_name("losses.json"), &losses)?;
            println!("{}", job.checkpoint.display());
            Ok(())
        }
        Command::Diffuse(DiffuseCmd::Sample { ckpt, seed, steps, out }) => diffuse_sample(&ckpt, seed, steps, &out),
        Command::Pipeline(PipelineCmd::Run { run, out }) => {
            let mut cfg = run_config(&run)?;
            if let Some(o) = out {
                cfg.output_dir = output_path(&o);
            }
            let report = pipeline::run_pipeline(&cfg)?;
            print_json(&report)
        }
        Command::Pipeline(PipelineCmd::Ablate {
            run,
            lambdas,
            terms,
            seeds,
            out,
        }) => {
            let cfg = run_config(&run)?;
            let term_sets = terms
                .iter()
                .map(|t| TermSet::parse(t))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Config(e.to_string()))?;
            let rows = pipeline::ablate(&cfg, &AblationGrid { lambdas, term_sets }, &seeds)?;
            let out = output_path(&out);
            pipeline::write_ablation_csv(&rows, &out)?;
            println!("{}", out.display());
            Ok(())
        }
        Command::Dataset(DatasetCmd::Export {
            count,
            train_count,
            seed,
            out,
        }) => {
            let mut spec = DatasetSpec {
                count,
                train_count: train_count.unwrap_or(count * 4 / 5),
                ..DatasetSpec::default()
            };
            spec.generator.seed = seed;
            let manifest = jobs::export_dataset(&spec, &output_path(&out))?;
            println!("{} records", manifest.count);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
