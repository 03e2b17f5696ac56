use crate::autograd::Var;
use crate::tensor::ConvGeom;

/// Negative slope of the critic's LeakyReLU activations.
pub const LEAKY_SLOPE: f64 = 0.01;
/// Variance offset inside instance normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Output shape of every named stage of a forward pass, in execution order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShapeTrace {
    pub stages: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub(crate) fn record(trace: &mut Option<&mut ShapeTrace>, name: &str, v: Var<'_>) {
        if let Some(t) = trace.as_deref_mut() {
            t.stages.push((name.to_string(), v.shape()));
        }
    }

    pub fn get(&self, name: &str) -> Option<&[usize]> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }
}

/// Per-sample, per-channel normalization followed by a learned scale and shift.
pub(crate) fn instance_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let hw = shape[2] * shape[3];
    let inv_hw = 1.0 / hw as f64;
    let mean = x.reduce_sum(1, hw, &[n, c]).scale(inv_hw);
    let centered = x - mean.expand(1, hw, &shape);
    let var = (centered * centered).reduce_sum(1, hw, &[n, c]).scale(inv_hw);
    let inv_std = var.add_scalar(NORM_EPS).powf(-0.5);
    let normed = centered * inv_std.expand(1, hw, &shape);
    normed * gamma.expand(n, hw, &shape) + beta.expand(n, hw, &shape)
}

pub(crate) fn add_channel_bias<'t>(x: Var<'t>, bias: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    x + bias.expand(shape[0], shape[2] * shape[3], &shape)
}

pub(crate) const STRIDE2: ConvGeom = ConvGeom::new(4, 2, 1);
pub(crate) const WIDE: ConvGeom = ConvGeom::new(7, 1, 3);
pub(crate) const SAME3: ConvGeom = ConvGeom::new(3, 1, 1);
