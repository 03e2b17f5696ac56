//! Loss terms of the adversarial game.
//!
//! Sign conventions (both objectives are minimized):
//!
//! ```text
//! critic_gain = mean D_I(x) − mean D_I(y)
//! L_D = −(critic_gain − λ_gp·gp) + λ_C·cls_real
//! L_G = −mean D_I(y) + λ_C·cls_fake + λ_R·rec
//! ```
//!
//! The combinations are written once, generically over [`LossValue`], so the
//! numbers reported in logs and the tape values being differentiated come
//! from the same formula.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::model::{
    discriminator_graph, DiscriminatorParams, ExpressionVector, ImageBatch, ModelConfig, ModelError,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite {what}: {detail}")]
    Numerical { what: &'static str, detail: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// λ_C, weight of both classification terms.
    pub lambda_cls: f64,
    /// λ_R, weight of the cycle reconstruction term.
    pub lambda_rec: f64,
    /// λ_gp, weight of the gradient penalty.
    pub lambda_gp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_cls: 1.0, lambda_rec: 10.0, lambda_gp: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [("lambda_cls", self.lambda_cls), ("lambda_rec", self.lambda_rec), ("lambda_gp", self.lambda_gp)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Something the objectives can be combined over: plain numbers or tape values.
pub trait LossValue: Copy {
    fn plus(self, other: Self) -> Self;
    fn times(self, k: f64) -> Self;
}

impl LossValue for f64 {
    fn plus(self, other: f64) -> f64 {
        self + other
    }
    fn times(self, k: f64) -> f64 {
        self * k
    }
}

impl<'t> LossValue for Var<'t> {
    fn plus(self, other: Var<'t>) -> Var<'t> {
        self + other
    }
    fn times(self, k: f64) -> Var<'t> {
        self.scale(k)
    }
}

/// Inputs to the critic objective.
#[derive(Clone, Copy, Debug)]
pub struct CriticTerms<T> {
    pub critic_gain: T,
    pub gp: T,
    pub cls_real: T,
}

/// Inputs to the generator objective.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms<T> {
    /// Mean realism score of the synthesized images.
    pub gen_gain: T,
    pub cls_fake: T,
    pub rec: T,
}

pub fn discriminator_objective<T: LossValue>(t: &CriticTerms<T>, w: &LossWeights) -> T {
    t.critic_gain.times(-1.0).plus(t.gp.times(w.lambda_gp)).plus(t.cls_real.times(w.lambda_cls))
}

pub fn generator_objective<T: LossValue>(t: &GeneratorTerms<T>, w: &LossWeights) -> T {
    t.gen_gain.times(-1.0).plus(t.cls_fake.times(w.lambda_cls)).plus(t.rec.times(w.lambda_rec))
}

/// Which update produced a report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Critic,
    Generator,
}

/// Loss values of one update. Terms the update did not evaluate are `None`
/// (a critic update does not run the cycle pass; a generator update does not
/// evaluate the penalty), and so is the total that depends on them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: Phase,
    /// mean D_I(x) − mean D_I(y)
    pub adv: Option<f64>,
    /// mean D_I(y)
    pub fake_score: Option<f64>,
    pub rec: Option<f64>,
    pub cls_fake: Option<f64>,
    pub cls_real: Option<f64>,
    pub gp: Option<f64>,
    pub total_g: Option<f64>,
    pub total_d: Option<f64>,
}

impl LossReport {
    /// Recompute the totals from the stored terms.
    pub fn recombined(&self, w: &LossWeights) -> (Option<f64>, Option<f64>) {
        let total_d = match (self.adv, self.gp, self.cls_real) {
            (Some(critic_gain), Some(gp), Some(cls_real)) => {
                Some(discriminator_objective(&CriticTerms { critic_gain, gp, cls_real }, w))
            }
            _ => None,
        };
        let total_g = match (self.fake_score, self.cls_fake, self.rec) {
            (Some(gen_gain), Some(cls_fake), Some(rec)) => {
                Some(generator_objective(&GeneratorTerms { gen_gain, cls_fake, rec }, w))
            }
            _ => None,
        };
        (total_g, total_d)
    }

    pub fn all_finite(&self) -> bool {
        [self.adv, self.fake_score, self.rec, self.cls_fake, self.cls_real, self.gp, self.total_g, self.total_d]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Returns `(critic_gain, gen_gain)` for per-sample realism scores.
pub fn adversarial_terms(d_real: &[f64], d_fake: &[f64]) -> (f64, f64) {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fake = mean(d_fake);
    (mean(d_real) - fake, fake)
}

/// Mean absolute difference on the tape.
pub fn l1_graph<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    (a - b).abs().mean()
}

/// Mean over all elements of `|x − x_hat|`.
pub fn reconstruction_loss(x: &ImageBatch, x_hat: &ImageBatch) -> Result<f64, ModelError> {
    let (a, b) = (x.tensor(), x_hat.tensor());
    if a.shape() != b.shape() {
        return Err(ModelError::Dimension(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.numel() as f64)
}

/// Batch-mean cross-entropy of `[N, C]` logits against one-hot targets, on the tape.
pub fn cross_entropy_graph<'t>(logits: Var<'t>, targets: &[ExpressionVector]) -> Var<'t> {
    let shape = logits.shape();
    let (n, c) = (shape[0], shape[1]);
    assert_eq!(targets.len(), n, "one target per row");
    let onehot = Tensor::new(vec![n, c], targets.iter().flat_map(|t| t.code().iter().copied()).collect());
    let picked = logits.mask(std::rc::Rc::new(onehot)).reduce_sum(1, c, &[n]);
    (logits.logsumexp_rows() - picked).mean()
}

/// `−log softmax(logits)[target]`, averaged over the rows of `[N, C]` logits.
pub fn classification_loss(logits: &Tensor, targets: &[ExpressionVector]) -> f64 {
    let tape = Tape::new();
    cross_entropy_graph(tape.constant(logits.clone()), targets).value().item()
}

/// Record the gradient penalty of `critic` (images → `[N]` realism scores)
/// at `x̄ = ε·x + (1−ε)·y` with one `ε` per sample. The returned value is
/// differentiable with respect to anything `critic` closes over.
pub fn gradient_penalty_graph<'t, F>(
    tape: &'t Tape,
    x: &Tensor,
    y: &Tensor,
    eps: &[f64],
    critic: F,
) -> Result<Var<'t>, ObjectiveError>
where
    F: FnOnce(Var<'t>) -> Result<Var<'t>, ModelError>,
{
    if x.shape() != y.shape() {
        return Err(ModelError::Dimension(format!("penalty endpoints {:?} vs {:?}", x.shape(), y.shape())).into());
    }
    let n = x.shape()[0];
    assert_eq!(eps.len(), n, "one interpolation weight per sample");
    let per = x.numel() / n;
    let mixed: Vec<f64> = x
        .data()
        .iter()
        .zip(y.data())
        .enumerate()
        .map(|(i, (&a, &b))| {
            let e = eps[i / per];
            e * a + (1.0 - e) * b
        })
        .collect();
    let x_bar = tape.param(Tensor::new(x.shape().to_vec(), mixed));
    let scores = critic(x_bar)?;
    let grad = tape.grad(scores.sum(), &[x_bar])[0];
    if !grad.with_value(Tensor::all_finite) {
        return Err(ObjectiveError::Numerical {
            what: "critic input gradient",
            detail: format!("gradient of realism score w.r.t. interpolated images over {n} samples"),
        });
    }
    let norms = (grad * grad).reduce_sum(1, per, &[n]).sqrt_or_zero();
    let dev = norms.add_scalar(-1.0);
    Ok((dev * dev).mean())
}

/// Interpolation weights, one uniform draw on `[0, 1)` per sample.
pub fn draw_interpolation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| rng.random::<f64>()).collect()
}

/// Mean over samples of `(‖∇_{x̄} D_I(x̄)‖₂ − 1)²` for the critic `d_params`.
pub fn gradient_penalty<R: Rng>(
    d_params: &DiscriminatorParams,
    x: &ImageBatch,
    y: &ImageBatch,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<f64, ObjectiveError> {
    let eps = draw_interpolation(x.len(), rng);
    let tape = Tape::new();
    let bound = d_params.params().bind(&tape, false);
    let gp = gradient_penalty_graph(&tape, x.tensor(), y.tensor(), &eps, |img| {
        Ok(discriminator_graph(&bound, img, config, None)?.realism)
    })?;
    Ok(gp.value().item())
}
