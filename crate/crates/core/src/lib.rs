//! Facial-expression synthesis with a conditional GAN whose generator adds its
//! input image to its output (an "ultimate skip"), so the network only has to
//! learn the expression residual.
//!
//! The crate is organized as:
//!
//! - [`model`]: generator and two-headed critic, parameter layouts and containers.
//! - [`objectives`]: adversarial, gradient-penalty, reconstruction and classification losses.
//! - [`training`]: Adam, alternating critic/generator updates, checkpoints.
//! - [`data`]: manifests, preprocessing, splits, batching, and a procedural sprite corpus.
//! - [`evaluation`]: content distance, verification-score client, accuracy, survey grids.
//!
//! Everything runs on [`tensor::Tensor`] and the differentiable [`autograd::Tape`].

pub mod autograd;
pub mod data;
pub mod evaluation;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod training;

pub use model::{
    build_discriminator, build_generator, count_parameters, discriminator_forward, generator_forward,
    CriticOutput, DiscriminatorParams, ExpressionVector, GeneratorParams, ImageBatch, ModelConfig, ModelError,
};
pub use tensor::Tensor;
