//! Toy diffusion model trained with a three-stage preference-optimization
//! curriculum on procedurally generated image data, plus the dataset
//! construction, losses, metrics, persistence, and CLI around it.

pub mod config;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod imageops;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod world;

pub use error::{HgError, Result};
pub use tensor::Tensor;
