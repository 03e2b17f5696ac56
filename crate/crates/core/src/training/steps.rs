//! One critic update and one generator update, plus the loss-and-gradient
//! evaluations they are built from.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{TrainError, TrainState};
use crate::autograd::{Tape, Var};
use crate::data::Batch;
use crate::model::{
    discriminator_graph, generator_forward, generator_graph, DiscriminatorParams, ExpressionVector, GeneratorParams,
    ImageBatch, ModelConfig, ModelError,
};
use crate::objectives::{
    cross_entropy_graph, discriminator_objective, draw_interpolation, generator_objective, gradient_penalty_graph,
    l1_graph, CriticTerms, GeneratorTerms, LossReport, LossWeights, ObjectiveError, Phase,
};
use crate::tensor::Tensor;

/// A uniformly random permutation of the batch's own labels.
pub fn sample_target_labels<R: Rng + ?Sized>(batch_labels: &[ExpressionVector], rng: &mut R) -> Vec<ExpressionVector> {
    let mut out = batch_labels.to_vec();
    out.shuffle(rng);
    out
}

/// `x̂ = G(y, c_o)`, under the same skip rule as the forward synthesis.
pub fn cycle_reconstruct(
    g: &GeneratorParams,
    y: &ImageBatch,
    c_o: &[ExpressionVector],
    config: &ModelConfig,
) -> Result<ImageBatch, ModelError> {
    Ok(generator_forward(g, y, c_o, config)?.output)
}

/// Loss report and parameter gradients of one objective evaluation.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: LossReport,
    /// Gradients in parameter order.
    pub grads: Vec<Tensor>,
}

fn mean<'t>(v: Var<'t>) -> f64 {
    v.value().item()
}

fn diverged(phase: Phase, what: &str, report: Option<&LossReport>) -> TrainError {
    let detail = match report {
        Some(r) => format!("{what}; report: {}", serde_json::to_string(r).unwrap_or_default()),
        None => what.to_string(),
    };
    TrainError::Diverged { phase, detail }
}

fn collect_grads<'t>(tape: &'t Tape, total: Var<'t>, wrt: &[Var<'t>]) -> Vec<Tensor> {
    tape.grad(total, wrt).into_iter().map(|g| g.value().as_ref().clone()).collect()
}

/// `L_D` at fixed targets `c_t` and interpolation weights `eps`, with its
/// gradient with respect to every critic parameter.
pub fn critic_evaluation(
    g: &GeneratorParams,
    d: &DiscriminatorParams,
    config: &ModelConfig,
    weights: &LossWeights,
    x: &ImageBatch,
    c_o: &[ExpressionVector],
    c_t: &[ExpressionVector],
    eps: &[f64],
) -> Result<Evaluation, TrainError> {
    x.check_len(c_o.len())?;
    let tape = Tape::new();
    let gb = g.params().bind(&tape, false);
    let db = d.params().bind(&tape, true);
    let xv = tape.constant(x.tensor().clone());
    let y = generator_graph(&gb, xv, c_t, config, None)?.output;
    let y_value = tape.constant(y.value().as_ref().clone());

    let real = discriminator_graph(&db, xv, config, None)?;
    let fake = discriminator_graph(&db, y_value, config, None)?;
    let real_mean = real.realism.mean();
    let fake_mean = fake.realism.mean();
    let critic_gain = real_mean - fake_mean;
    let cls_real = cross_entropy_graph(real.logits, c_o);
    let gp = gradient_penalty_graph(&tape, x.tensor(), &y_value.value(), eps, |img| {
        Ok(discriminator_graph(&db, img, config, None)?.realism)
    })
    .map_err(|e| match e {
        ObjectiveError::Numerical { what, detail } => diverged(Phase::Critic, &format!("{what}: {detail}"), None),
        ObjectiveError::Model(m) => TrainError::Model(m),
    })?;
    let total = discriminator_objective(&CriticTerms { critic_gain, gp, cls_real }, weights);
    let report = LossReport {
        phase: Phase::Critic,
        adv: Some(mean(critic_gain)),
        fake_score: Some(mean(fake_mean)),
        rec: None,
        cls_fake: None,
        cls_real: Some(mean(cls_real)),
        gp: Some(mean(gp)),
        total_g: None,
        total_d: Some(mean(total)),
    };
    if !report.all_finite() {
        return Err(diverged(Phase::Critic, "non-finite critic loss", Some(&report)));
    }
    let grads = collect_grads(&tape, total, &db.vars());
    if !grads.iter().all(Tensor::all_finite) {
        return Err(diverged(Phase::Critic, "non-finite critic gradient", Some(&report)));
    }
    Ok(Evaluation { report, grads })
}

/// `L_G` at fixed targets `c_t`, with its gradient with respect to every
/// generator parameter.
pub fn generator_evaluation(
    g: &GeneratorParams,
    d: &DiscriminatorParams,
    config: &ModelConfig,
    weights: &LossWeights,
    x: &ImageBatch,
    c_o: &[ExpressionVector],
    c_t: &[ExpressionVector],
) -> Result<Evaluation, TrainError> {
    x.check_len(c_o.len())?;
    let tape = Tape::new();
    let gb = g.params().bind(&tape, true);
    let db = d.params().bind(&tape, false);
    let xv = tape.constant(x.tensor().clone());
    let y = generator_graph(&gb, xv, c_t, config, None)?.output;
    let critic = discriminator_graph(&db, y, config, None)?;
    let gen_gain = critic.realism.mean();
    let cls_fake = cross_entropy_graph(critic.logits, c_t);
    let x_hat = generator_graph(&gb, y, c_o, config, None)?.output;
    let rec = l1_graph(xv, x_hat);
    let total = generator_objective(&GeneratorTerms { gen_gain, cls_fake, rec }, weights);
    let report = LossReport {
        phase: Phase::Generator,
        adv: None,
        fake_score: Some(mean(gen_gain)),
        rec: Some(mean(rec)),
        cls_fake: Some(mean(cls_fake)),
        cls_real: None,
        gp: None,
        total_g: Some(mean(total)),
        total_d: None,
    };
    if !report.all_finite() {
        return Err(diverged(Phase::Generator, "non-finite generator loss", Some(&report)));
    }
    let grads = collect_grads(&tape, total, &gb.vars());
    if !grads.iter().all(Tensor::all_finite) {
        return Err(diverged(Phase::Generator, "non-finite generator gradient", Some(&report)));
    }
    Ok(Evaluation { report, grads })
}

fn batch_codes(state: &TrainState, batch: &Batch) -> Vec<ExpressionVector> {
    let c = state.config.model.num_classes;
    batch.labels.iter().map(|&l| ExpressionVector::one_hot(l, c)).collect()
}

/// One Adam update of the critic against the current (frozen) generator.
/// Draws the targets, then the interpolation weights, from `rng`.
pub fn train_step_critic<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &Batch,
    rng: &mut R,
) -> Result<LossReport, TrainError> {
    let c_o = batch_codes(state, batch);
    let c_t = sample_target_labels(&c_o, rng);
    let eps = draw_interpolation(c_o.len(), rng);
    let cfg = &state.config;
    let eval = critic_evaluation(
        &state.generator,
        &state.discriminator,
        &cfg.model,
        &cfg.weights,
        &batch.images,
        &c_o,
        &c_t,
        &eps,
    )?;
    let lr = cfg.learning_rate_at(state.epoch);
    state.d_opt.step(state.discriminator.params_mut(), &eval.grads, lr)?;
    Ok(eval.report)
}

/// One Adam update of the generator against the current (frozen) critic.
pub fn train_step_generator<R: Rng + ?Sized>(
    state: &mut TrainState,
    batch: &Batch,
    rng: &mut R,
) -> Result<LossReport, TrainError> {
    let c_o = batch_codes(state, batch);
    let c_t = sample_target_labels(&c_o, rng);
    let cfg = &state.config;
    let eval =
        generator_evaluation(&state.generator, &state.discriminator, &cfg.model, &cfg.weights, &batch.images, &c_o, &c_t)?;
    let lr = cfg.learning_rate_at(state.epoch);
    state.g_opt.step(state.generator.params_mut(), &eval.grads, lr)?;
    Ok(eval.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_label_batch_is_unchanged() {
        let l = vec![ExpressionVector::one_hot(2, 5)];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_target_labels(&l, &mut rng), l);
    }

    #[test]
    fn targets_are_a_permutation_of_the_batch() {
        let labels: Vec<_> = [0, 1, 1, 4, 2].iter().map(|&c| ExpressionVector::one_hot(c, 5)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = sample_target_labels(&labels, &mut rng);
            let mut a: Vec<_> = t.iter().map(ExpressionVector::class).collect();
            a.sort();
            assert_eq!(a, vec![0, 1, 1, 2, 4]);
            assert!(t.iter().all(|v| v.num_classes() == 5 && v.code().iter().sum::<f64>() == 1.0));
        }
    }
}
