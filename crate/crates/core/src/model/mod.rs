//! Generator and critic networks: layouts, initialization, forward passes.

mod config;
mod discriminator;
mod generator;
mod layers;
mod params;

use thiserror::Error;

pub use config::{ExpressionVector, ImageBatch, ModelConfig};
pub use discriminator::{
    build_discriminator, discriminator_forward, discriminator_graph, discriminator_layout, CriticGraph, CriticOutput,
    DiscriminatorParams,
};
pub use generator::{
    build_generator, generator_forward, generator_graph, generator_layout, GeneratorOutput, GeneratorParams,
};
pub use layers::{ShapeTrace, LEAKY_SLOPE, NORM_EPS};
pub use params::{initialize, BoundParams, Init, LayerSpec, ParamSet, PARAM_FORMAT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("parameter container: {0}")]
    Format(String),
}

/// Sum of element counts over every array of a parameter collection.
pub fn count_parameters(params: impl AsRef<ParamSet>) -> usize {
    params.as_ref().count()
}
