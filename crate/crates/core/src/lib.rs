pub mod checkpoint;
pub mod datasets;
pub mod diffusion;
pub mod embeddings;
pub mod error;
pub mod guidance;
pub mod kernels;
pub mod nn;
pub mod pipeline;
pub mod scene_graph;
pub mod sg2seg;
pub mod shapes;

pub use error::{Error, Result};
