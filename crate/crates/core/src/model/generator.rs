//! The conditional generator: three encoding layers, a stack of residual
//! blocks, two fractionally-strided decoding layers, a `tanh` output layer,
//! and the optional input-to-output skip.
//!
//! Stage shapes for image size `D`, `C` classes and base width `b`:
//!
//! ```text
//! input  D   × D   × (3+C)
//! enc1   D   × D   × b      7×7 stride 1, IN, ReLU
//! enc2   D/2 × D/2 × 2b     4×4 stride 2, IN, ReLU
//! enc3   D/4 × D/4 × 4b     4×4 stride 2, IN, ReLU
//! resK   D/4 × D/4 × 4b     3×3, IN, ReLU, 3×3, IN, + block input
//! dec1   D/2 × D/2 × 2b     4×4 stride ½, IN, ReLU
//! dec2   D   × D   × b      4×4 stride ½, IN, ReLU
//! out    D   × D   × 3      7×7 stride 1, tanh
//! ```
//!
//! Convolutions followed by instance normalization carry no bias; the output
//! layer does.

use super::config::replicate_labels;
use super::layers::{add_channel_bias, instance_norm, ShapeTrace, SAME3, STRIDE2, WIDE};
use super::params::{initialize, BoundParams, Init, LayerSpec, ParamSet};
use super::{ExpressionVector, ImageBatch, ModelConfig, ModelError};
use crate::autograd::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorParams(pub ParamSet);

impl AsRef<ParamSet> for GeneratorParams {
    fn as_ref(&self) -> &ParamSet {
        &self.0
    }
}

impl GeneratorParams {
    pub fn params(&self) -> &ParamSet {
        &self.0
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.0
    }

    /// Validate names and shapes against `config` and wrap.
    pub fn from_set(set: ParamSet, config: &ModelConfig) -> Result<Self, ModelError> {
        set.check_layout(&generator_layout(config)?)?;
        Ok(Self(set))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8], config: &ModelConfig) -> Result<Self, ModelError> {
        Self::from_set(ParamSet::from_bytes(bytes)?, config)
    }

    /// Zero the output layer so the network's residual is identically zero.
    pub fn zero_output_layer(&mut self) {
        for (name, t) in self.0.iter_mut() {
            if name.starts_with("out.") {
                t.data_mut().fill(0.0);
            }
        }
    }
}

fn norm_specs(prefix: &str, channels: usize) -> [LayerSpec; 2] {
    [
        LayerSpec::new(format!("{prefix}.gamma"), vec![channels], Init::Ones),
        LayerSpec::new(format!("{prefix}.beta"), vec![channels], Init::Zeros),
    ]
}

/// Ordered names, shapes and initializers of every generator array.
pub fn generator_layout(config: &ModelConfig) -> Result<Vec<LayerSpec>, ModelError> {
    config.validate()?;
    let b = config.base_channels;
    let c_in = 3 + config.num_classes;
    let mut l = Vec::new();
    l.push(LayerSpec::new("enc1.conv.weight", vec![b, c_in, 7, 7], Init::FanIn(c_in * 49)));
    l.extend(norm_specs("enc1.norm", b));
    l.push(LayerSpec::new("enc2.conv.weight", vec![2 * b, b, 4, 4], Init::FanIn(b * 16)));
    l.extend(norm_specs("enc2.norm", 2 * b));
    l.push(LayerSpec::new("enc3.conv.weight", vec![4 * b, 2 * b, 4, 4], Init::FanIn(2 * b * 16)));
    l.extend(norm_specs("enc3.norm", 4 * b));
    for r in 0..config.num_residual_blocks {
        for k in 1..=2 {
            l.push(LayerSpec::new(format!("res{r}.conv{k}.weight"), vec![4 * b, 4 * b, 3, 3], Init::FanIn(4 * b * 9)));
            l.extend(norm_specs(&format!("res{r}.norm{k}"), 4 * b));
        }
    }
    // Transposed kernels are stored as the forward convolution they invert:
    // [wide channels, narrow channels, k, k]. Each output pixel sees k²/4 taps per input channel.
    l.push(LayerSpec::new("dec1.conv.weight", vec![4 * b, 2 * b, 4, 4], Init::FanIn(4 * b * 4)));
    l.extend(norm_specs("dec1.norm", 2 * b));
    l.push(LayerSpec::new("dec2.conv.weight", vec![2 * b, b, 4, 4], Init::FanIn(2 * b * 4)));
    l.extend(norm_specs("dec2.norm", b));
    l.push(LayerSpec::new("out.conv.weight", vec![3, b, 7, 7], Init::FanIn(b * 49)));
    l.push(LayerSpec::new("out.conv.bias", vec![3], Init::Zeros));
    Ok(l)
}

/// Deterministic fresh parameters for `config`.
pub fn build_generator(config: &ModelConfig, seed: u64) -> Result<GeneratorParams, ModelError> {
    Ok(GeneratorParams(initialize(&generator_layout(config)?, seed)))
}

/// Tape values of one generator application.
#[derive(Clone, Copy)]
pub struct GeneratorVars<'t> {
    pub output: Var<'t>,
    pub residual: Var<'t>,
}

fn conv_norm_relu<'t>(p: &BoundParams<'t>, x: Var<'t>, name: &str, geom: crate::tensor::ConvGeom) -> Var<'t> {
    let h = x.conv(p.get(&format!("{name}.conv.weight")), geom);
    instance_norm(h, p.get(&format!("{name}.norm.gamma")), p.get(&format!("{name}.norm.beta"))).relu()
}

fn upconv_norm_relu<'t>(p: &BoundParams<'t>, x: Var<'t>, name: &str) -> Var<'t> {
    let s = x.shape();
    let h = x.conv_input_grad(p.get(&format!("{name}.conv.weight")), STRIDE2, 2 * s[2], 2 * s[3]);
    instance_norm(h, p.get(&format!("{name}.norm.gamma")), p.get(&format!("{name}.norm.beta"))).relu()
}

/// Record `G(x, c)` on `x`'s tape. `x` is `[N, 3, D, D]`.
pub fn generator_graph<'t>(
    p: &BoundParams<'t>,
    x: Var<'t>,
    labels: &[ExpressionVector],
    config: &ModelConfig,
    mut trace: Option<&mut ShapeTrace>,
) -> Result<GeneratorVars<'t>, ModelError> {
    let shape = x.shape();
    let d = config.image_size;
    if shape != [shape[0], 3, d, d] {
        return Err(ModelError::Dimension(format!("generator input {shape:?}, expected [N, 3, {d}, {d}]")));
    }
    if labels.len() != shape[0] {
        return Err(ModelError::Dimension(format!("{} labels for {} images", labels.len(), shape[0])));
    }
    let label_map = replicate_labels(labels, config.num_classes, d)?;
    let input = x.concat(x.tape().constant(label_map));
    ShapeTrace::record(&mut trace, "input", input);

    let mut h = conv_norm_relu(p, input, "enc1", WIDE);
    ShapeTrace::record(&mut trace, "enc1", h);
    h = conv_norm_relu(p, h, "enc2", STRIDE2);
    ShapeTrace::record(&mut trace, "enc2", h);
    h = conv_norm_relu(p, h, "enc3", STRIDE2);
    ShapeTrace::record(&mut trace, "enc3", h);

    for r in 0..config.num_residual_blocks {
        let a = h.conv(p.get(&format!("res{r}.conv1.weight")), SAME3);
        let a = instance_norm(a, p.get(&format!("res{r}.norm1.gamma")), p.get(&format!("res{r}.norm1.beta"))).relu();
        let a = a.conv(p.get(&format!("res{r}.conv2.weight")), SAME3);
        let a = instance_norm(a, p.get(&format!("res{r}.norm2.gamma")), p.get(&format!("res{r}.norm2.beta")));
        h = h + a;
        ShapeTrace::record(&mut trace, &format!("res{r}"), h);
    }

    h = upconv_norm_relu(p, h, "dec1");
    ShapeTrace::record(&mut trace, "dec1", h);
    h = upconv_norm_relu(p, h, "dec2");
    ShapeTrace::record(&mut trace, "dec2", h);

    let residual = add_channel_bias(h.conv(p.get("out.conv.weight"), WIDE), p.get("out.conv.bias")).tanh();
    ShapeTrace::record(&mut trace, "out", residual);
    let output = if config.use_ultimate_skip { (residual + x).clamp(-1.0, 1.0) } else { residual };
    Ok(GeneratorVars { output, residual })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorOutput {
    /// The synthesized image.
    pub output: ImageBatch,
    /// The bounded network output before the skip is added.
    pub residual: ImageBatch,
    pub trace: ShapeTrace,
}

/// Synthesize `x` under target codes `c_t` (one per image).
pub fn generator_forward(
    params: &GeneratorParams,
    x: &ImageBatch,
    c_t: &[ExpressionVector],
    config: &ModelConfig,
) -> Result<GeneratorOutput, ModelError> {
    x.check_against(config)?;
    let tape = Tape::new();
    let bound = params.0.bind(&tape, false);
    let xv = tape.constant(x.tensor().clone());
    let mut trace = ShapeTrace::default();
    let vars = generator_graph(&bound, xv, c_t, config, Some(&mut trace))?;
    Ok(GeneratorOutput {
        output: ImageBatch::new(vars.output.value().as_ref().clone())?,
        residual: ImageBatch::new(vars.residual.value().as_ref().clone())?,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::count_parameters;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelConfig {
        ModelConfig { image_size: 16, num_classes: 3, base_channels: 4, critic_layers: 4, ..Default::default() }
    }

    fn random_images(n: usize, d: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * d * d).map(|_| rng.random_range(-1.0..=1.0)).collect();
        ImageBatch::new(Tensor::new(vec![n, 3, d, d], data)).unwrap()
    }

    fn labels(classes: &[usize], c: usize) -> Vec<ExpressionVector> {
        classes.iter().map(|&k| ExpressionVector::one_hot(k, c)).collect()
    }

    #[test]
    fn residual_blocks_hold_two_256_channel_3x3_convolutions() {
        let layout = generator_layout(&ModelConfig::default()).unwrap();
        let res: Vec<_> = layout.iter().filter(|s| s.name.starts_with("res0.conv")).collect();
        assert_eq!(res.len(), 2);
        for s in res {
            assert_eq!(s.shape, vec![256, 256, 3, 3]);
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_generator(&small(), 11).unwrap();
        let b = build_generator(&small(), 11).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let c = build_generator(&small(), 12).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn extra_residual_blocks_add_exact_count() {
        let one = count_parameters(build_generator(&ModelConfig::default(), 0).unwrap());
        let six = count_parameters(
            build_generator(&ModelConfig { num_residual_blocks: 6, ..Default::default() }, 0).unwrap(),
        );
        // Two 256→256 3×3 kernels plus two instance norms (scale and shift) per block.
        assert_eq!(six - one, 5 * (2 * 256 * 256 * 3 * 3 + 2 * 2 * 256));
    }

    #[test]
    fn zero_output_layer_gives_identity_with_skip_and_zero_without() {
        let cfg = small();
        let mut g = build_generator(&cfg, 1).unwrap();
        g.zero_output_layer();
        let x = random_images(2, 16, 3);
        let c = labels(&[0, 2], 3);
        let out = generator_forward(&g, &x, &c, &cfg).unwrap();
        assert_eq!(out.output, x);
        assert!(out.residual.tensor().data().iter().all(|&v| v == 0.0));

        let cfg_off = ModelConfig { use_ultimate_skip: false, ..cfg };
        let out = generator_forward(&g, &x, &c, &cfg_off).unwrap();
        assert!(out.output.tensor().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stage_shapes_follow_the_encoder_decoder_chain() {
        let cfg = ModelConfig { num_residual_blocks: 2, ..small() };
        let g = build_generator(&cfg, 0).unwrap();
        let out = generator_forward(&g, &random_images(1, 16, 0), &labels(&[1], 3), &cfg).unwrap();
        let t = &out.trace;
        assert_eq!(t.get("input"), Some(&[1, 6, 16, 16][..]));
        assert_eq!(t.get("enc1"), Some(&[1, 4, 16, 16][..]));
        assert_eq!(t.get("enc2"), Some(&[1, 8, 8, 8][..]));
        assert_eq!(t.get("enc3"), Some(&[1, 16, 4, 4][..]));
        assert_eq!(t.get("res1"), Some(&[1, 16, 4, 4][..]));
        assert_eq!(t.get("dec1"), Some(&[1, 8, 8, 8][..]));
        assert_eq!(t.get("dec2"), Some(&[1, 4, 16, 16][..]));
        assert_eq!(t.get("out"), Some(&[1, 3, 16, 16][..]));
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = small();
        let g = build_generator(&cfg, 0).unwrap();
        let x = random_images(2, 16, 0);
        assert!(matches!(
            generator_forward(&g, &x, &labels(&[0], 3), &cfg),
            Err(ModelError::Dimension(_))
        ));
        assert!(matches!(
            generator_forward(&g, &x, &labels(&[0, 1], 4), &cfg),
            Err(ModelError::Validation(_))
        ));
        let wrong_size = random_images(1, 32, 0);
        assert!(generator_forward(&g, &wrong_size, &labels(&[0], 3), &cfg).is_err());
    }

    #[test]
    fn permuting_label_channels_with_kernel_slices_is_invisible() {
        let cfg = small();
        let g = build_generator(&cfg, 5).unwrap();
        let x = random_images(2, 16, 9);
        let perm = [2usize, 0, 1]; // new channel k holds old channel perm[k]
        let before = generator_forward(&g, &x, &labels(&[0, 1], 3), &cfg).unwrap();

        let mut permuted = g.clone();
        let w = g.params().get("enc1.conv.weight").unwrap();
        let nw = permuted.params_mut().get_mut("enc1.conv.weight").unwrap();
        let (co, ci, kk) = (w.shape()[0], w.shape()[1], 49);
        for o in 0..co {
            for k in 0..3 {
                let src = &w.data()[(o * ci + 3 + perm[k]) * kk..][..kk];
                nw.data_mut()[(o * ci + 3 + k) * kk..][..kk].copy_from_slice(src);
            }
        }
        // old class j sits at new channel k where perm[k] == j
        let inv = |j: usize| perm.iter().position(|&p| p == j).unwrap();
        let after = generator_forward(&permuted, &x, &labels(&[inv(0), inv(1)], 3), &cfg).unwrap();
        for (a, b) in before.output.tensor().data().iter().zip(after.output.tensor().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
