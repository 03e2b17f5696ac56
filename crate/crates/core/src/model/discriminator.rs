//! The two-headed critic. A trunk of 4×4 stride-2 convolutions (each with a
//! bias and LeakyReLU) doubles the width per layer; the realism head is a
//! 3×3 convolution to one channel averaged over space, and the class head is
//! a convolution covering the whole trunk volume, yielding `C` logits.

use super::layers::{add_channel_bias, ShapeTrace, LEAKY_SLOPE, SAME3, STRIDE2};
use super::params::{initialize, BoundParams, Init, LayerSpec, ParamSet};
use super::{ImageBatch, ModelConfig, ModelError};
use crate::autograd::{Tape, Var};
use crate::tensor::{ConvGeom, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorParams(pub ParamSet);

impl AsRef<ParamSet> for DiscriminatorParams {
    fn as_ref(&self) -> &ParamSet {
        &self.0
    }
}

impl DiscriminatorParams {
    pub fn params(&self) -> &ParamSet {
        &self.0
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.0
    }

    pub fn from_set(set: ParamSet, config: &ModelConfig) -> Result<Self, ModelError> {
        set.check_layout(&discriminator_layout(config)?)?;
        Ok(Self(set))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self, ModelError> {
        Self::from_set(ParamSet::from_bytes(bytes)?, config)
    }
}

/// Trunk channel widths: `b, 2b, 4b, …` for `critic_layers` layers.
pub fn trunk_channels(config: &ModelConfig) -> Vec<usize> {
    (0..config.critic_layers).map(|i| config.base_channels << i).collect()
}

pub fn discriminator_layout(config: &ModelConfig) -> Result<Vec<LayerSpec>, ModelError> {
    config.validate()?;
    let mut l = Vec::new();
    let mut c_in = 3;
    for (i, c) in trunk_channels(config).into_iter().enumerate() {
        l.push(LayerSpec::new(format!("trunk{i}.conv.weight"), vec![c, c_in, 4, 4], Init::FanIn(c_in * 16)));
        l.push(LayerSpec::new(format!("trunk{i}.conv.bias"), vec![c], Init::Zeros));
        c_in = c;
    }
    let k = config.critic_trunk_size();
    l.push(LayerSpec::new("realism.conv.weight", vec![1, c_in, 3, 3], Init::FanIn(c_in * 9)));
    l.push(LayerSpec::new("class.conv.weight", vec![config.num_classes, c_in, k, k], Init::FanIn(c_in * k * k)));
    Ok(l)
}

pub fn build_discriminator(config: &ModelConfig, seed: u64) -> Result<DiscriminatorParams, ModelError> {
    Ok(DiscriminatorParams(initialize(&discriminator_layout(config)?, seed)))
}

/// Tape values of one critic application.
#[derive(Clone, Copy)]
pub struct CriticGraph<'t> {
    /// `[N]` realism scores.
    pub realism: Var<'t>,
    /// `[N, C]` class logits.
    pub logits: Var<'t>,
}

pub fn discriminator_graph<'t>(
    p: &BoundParams<'t>,
    img: Var<'t>,
    config: &ModelConfig,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<CriticGraph<'t>, ModelError> {
    let shape = img.shape();
    let d = config.image_size;
    if shape.len() != 4 || shape[1..] != [3, d, d] {
        return Err(ModelError::Dimension(format!("critic input {shape:?}, expected [N, 3, {d}, {d}]")));
    }
    let n = shape[0];
    let mut h = img;
    for i in 0..config.critic_layers {
        h = add_channel_bias(h.conv(p.get(&format!("trunk{i}.conv.weight")), STRIDE2), p.get(&format!("trunk{i}.conv.bias")))
            .leaky_relu(LEAKY_SLOPE);
        ShapeTrace::record(&mut trace, &format!("trunk{i}"), h);
    }
    let k = config.critic_trunk_size();
    let score_map = h.conv(p.get("realism.conv.weight"), SAME3);
    ShapeTrace::record(&mut trace, "realism", score_map);
    let realism = score_map.reduce_sum(1, k * k, &[n]).scale(1.0 / (k * k) as f64);
    let logits = h.conv(p.get("class.conv.weight"), ConvGeom::new(k, 1, 0));
    ShapeTrace::record(&mut trace, "class", logits);
    let logits = logits.reshape(&[n, config.num_classes]);
    Ok(CriticGraph { realism, logits })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticOutput {
    /// One realism score per image.
    pub realism_score: Vec<f64>,
    /// `[N, C]` unnormalized class scores.
    pub class_logits: Tensor,
    pub trace: ShapeTrace,
}

impl CriticOutput {
    /// Arg-max class per image (first maximum on ties).
    pub fn predicted_classes(&self) -> Vec<usize> {
        let c = self.class_logits.shape()[1];
        self.class_logits
            .data()
            .chunks(c)
            .map(|row| row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best }))
            .collect()
    }
}

pub fn discriminator_forward(
    params: &DiscriminatorParams,
    img: &ImageBatch,
    config: &ModelConfig,
) -> Result<CriticOutput, ModelError> {
    img.check_against(config)?;
    let tape = Tape::new();
    let bound = params.0.bind(&tape, false);
    let mut trace = ShapeTrace::default();
    let out = discriminator_graph(&bound, tape.constant(img.tensor().clone()), config, Some(&mut trace))?;
    Ok(CriticOutput {
        realism_score: out.realism.value().data().to_vec(),
        class_logits: out.logits.value().as_ref().clone(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_progression_doubles_from_base() {
        assert_eq!(trunk_channels(&ModelConfig::default()), vec![64, 128, 256, 512, 1024, 2048]);
        let layout = discriminator_layout(&ModelConfig::default()).unwrap();
        assert_eq!(layout.iter().filter(|s| s.name.starts_with("trunk")).count(), 12);
        let class = layout.iter().find(|s| s.name == "class.conv.weight").unwrap();
        assert_eq!(class.shape, vec![7, 2048, 2, 2]);
    }

    #[test]
    fn zero_parameters_score_zero() {
        let cfg = ModelConfig { image_size: 32, num_classes: 4, base_channels: 2, critic_layers: 5, ..Default::default() };
        let mut d = build_discriminator(&cfg, 0).unwrap();
        for (_, t) in d.params_mut().iter_mut() {
            t.data_mut().fill(0.0);
        }
        let img = ImageBatch::new(Tensor::full(&[2, 3, 32, 32], 0.3)).unwrap();
        let out = discriminator_forward(&d, &img, &cfg).unwrap();
        assert_eq!(out.realism_score, vec![0.0, 0.0]);
        assert!(out.class_logits.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.class_logits.shape(), &[2, 4]);
        assert_eq!(out.trace.get("trunk4"), Some(&[2, 32, 1, 1][..]));
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = ModelConfig { image_size: 32, base_channels: 2, critic_layers: 5, ..Default::default() };
        let d = build_discriminator(&cfg, 0).unwrap();
        let img = ImageBatch::new(Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        assert!(matches!(discriminator_forward(&d, &img, &cfg), Err(ModelError::Dimension(_))));
    }
}
