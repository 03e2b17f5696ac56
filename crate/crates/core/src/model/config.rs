use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tensor::Tensor;

/// Architecture hyperparameters shared by the generator and the critic.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length `D` of the square input images.
    pub image_size: usize,
    /// Number of expression classes `C`.
    pub num_classes: usize,
    /// Width of the first generator and critic layers; deeper layers are multiples.
    pub base_channels: usize,
    pub num_residual_blocks: usize,
    pub use_ultimate_skip: bool,
    /// Number of stride-2 critic trunk layers; `image_size` must be divisible by `2^critic_layers`.
    pub critic_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            num_classes: 7,
            base_channels: 64,
            num_residual_blocks: 1,
            use_ultimate_skip: true,
            critic_layers: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::Config(msg));
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.base_channels < 1 {
            return fail("base_channels must be at least 1".into());
        }
        if self.critic_layers < 1 || self.critic_layers > 16 {
            return fail(format!("critic_layers must be in 1..=16, got {}", self.critic_layers));
        }
        let factor = 1usize << self.critic_layers;
        if self.image_size == 0 || self.image_size % factor != 0 {
            return fail(format!(
                "image_size {} must be a positive multiple of 2^critic_layers = {factor}",
                self.image_size
            ));
        }
        Ok(())
    }

    /// Spatial size of the critic's final trunk volume.
    pub fn critic_trunk_size(&self) -> usize {
        self.image_size >> self.critic_layers
    }
}

/// A one-hot expression code of length `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpressionVector {
    code: Vec<f64>,
}

impl ExpressionVector {
    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        assert!(class < num_classes, "class {class} out of range for {num_classes} classes");
        let mut code = vec![0.0; num_classes];
        code[class] = 1.0;
        Self { code }
    }

    /// Accepts only codes with entries in `{0, 1}` and exactly one `1`.
    pub fn from_code(code: Vec<f64>) -> Result<Self, ModelError> {
        let ones = code.iter().filter(|&&v| v == 1.0).count();
        let valid = code.iter().all(|&v| v == 0.0 || v == 1.0) && ones == 1;
        if !valid {
            return Err(ModelError::Validation(format!("not a one-hot expression code: {code:?}")));
        }
        Ok(Self { code })
    }

    pub fn class(&self) -> usize {
        self.code.iter().position(|&v| v == 1.0).expect("one-hot invariant")
    }

    pub fn num_classes(&self) -> usize {
        self.code.len()
    }

    pub fn code(&self) -> &[f64] {
        &self.code
    }
}

/// Images `[N, 3, D, D]` (channel-first), every value finite and in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self, ModelError> {
        match *data.shape() {
            [_, 3, h, w] if h == w && h > 0 => {}
            ref s => return Err(ModelError::Dimension(format!("image batch must be [N, 3, D, D], got {s:?}"))),
        }
        if let Some(v) = data.data().iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(ModelError::Validation(format!("image value {v} outside [-1, 1]")));
        }
        Ok(Self { data })
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_size(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    /// Image `n` as a batch of one.
    pub fn image(&self, n: usize) -> ImageBatch {
        ImageBatch { data: self.data.sample(n) }
    }

    pub fn concat(images: &[ImageBatch]) -> Result<ImageBatch, ModelError> {
        if images.is_empty() {
            return Err(ModelError::Dimension("cannot concatenate zero image batches".into()));
        }
        let mut samples = Vec::new();
        for b in images {
            for n in 0..b.len() {
                samples.push(b.data.sample(n));
            }
        }
        ImageBatch::new(Tensor::stack(&samples))
    }

    pub(crate) fn check_len(&self, n: usize) -> Result<(), ModelError> {
        if self.len() != n {
            return Err(ModelError::Dimension(format!("{} labels for {} images", n, self.len())));
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, config: &ModelConfig) -> Result<(), ModelError> {
        if self.image_size() != config.image_size {
            return Err(ModelError::Dimension(format!(
                "image size {} does not match configured {}",
                self.image_size(),
                config.image_size
            )));
        }
        Ok(())
    }
}

/// Stack labels into the `[N, C, D, D]` map the generator concatenates to its input.
pub(crate) fn replicate_labels(labels: &[ExpressionVector], num_classes: usize, size: usize) -> Result<Tensor, ModelError> {
    let plane = size * size;
    let mut data = Vec::with_capacity(labels.len() * num_classes * plane);
    for label in labels {
        if label.num_classes() != num_classes {
            return Err(ModelError::Validation(format!(
                "expression code has {} entries, expected {num_classes}",
                label.num_classes()
            )));
        }
        for &v in label.code() {
            data.extend(std::iter::repeat_n(v, plane));
        }
    }
    Ok(Tensor::new(vec![labels.len(), num_classes, size, size], data))
}
