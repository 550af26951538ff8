pub mod autograd;
pub mod codec;
pub mod config;
pub mod denoiser;
pub mod depthmetrics;
pub mod error;
pub mod experiment;
pub mod oracles;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scenegen;
pub mod schedule;
pub mod templates;
pub mod trainer;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
