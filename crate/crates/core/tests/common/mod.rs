//! Finite-difference oracles shared by the gradient and acceptance suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usgan::autograd::Tape;
use usgan::model::{
    build_discriminator, build_generator, discriminator_forward, discriminator_graph, DiscriminatorParams,
    ExpressionVector, GeneratorParams, ImageBatch, ModelConfig, ParamSet,
};
use usgan::objectives::{draw_interpolation, gradient_penalty, LossWeights};
use usgan::training::{critic_evaluation, generator_evaluation};
use usgan::Tensor;

const H: f64 = 1e-4;
const TOLERANCE: f64 = 1e-3;
/// Coordinates probed per parameter tensor.
const PER_TENSOR: usize = 3;

fn config() -> ModelConfig {
    ModelConfig { image_size: 16, num_classes: 3, base_channels: 4, critic_layers: 4, ..Default::default() }
}

fn images(seed: u64) -> ImageBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2 * 3 * 16 * 16).map(|_| rng.random_range(-0.8..0.8)).collect();
    ImageBatch::new(Tensor::new(vec![2, 3, 16, 16], data)).unwrap()
}

fn codes(classes: &[usize]) -> Vec<ExpressionVector> {
    classes.iter().map(|&c| ExpressionVector::one_hot(c, 3)).collect()
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Outcome of probing one objective.
#[derive(Debug, Default)]
pub struct Probed {
    pub worst: f64,
    /// Probes whose `±H` interval crossed a switch of the objective.
    pub straddled: usize,
    pub total: usize,
}

/// Compare `grads` (in parameter order) with central differences of `loss`
/// at a few seeded coordinates of every tensor.
///
/// The objectives are piecewise smooth (ReLU, absolute values, clamps). A
/// probe whose `±H` interval crosses one of those switches has no valid
/// finite-difference oracle at step `H`; it shows up as central differences
/// at `h` and `h / 10` disagreeing, which cannot happen on a smooth interval.
/// Such a probe is checked with the largest step that stays smooth. A wrong
/// analytic gradient fails either way, since both steps agree with each
/// other and not with it.
fn check(params: &ParamSet, grads: &[Tensor], mut loss: impl FnMut(&ParamSet) -> f64) -> Probed {
    let names: Vec<String> = params.names().map(str::to_string).collect();
    assert_eq!(names.len(), grads.len());
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut out = Probed::default();
    for (name, grad) in names.iter().zip(grads) {
        let numel = params.get(name).unwrap().numel();
        assert_eq!(grad.numel(), numel, "{name}");
        for _ in 0..PER_TENSOR.min(numel) {
            let i = rng.random_range(0..numel);
            let mut central = |h: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += h;
                let up = loss(&p);
                p.get_mut(name).unwrap().data_mut()[i] -= 2.0 * h;
                (up - loss(&p)) / (2.0 * h)
            };
            let mut h = H;
            let mut numeric = central(h);
            loop {
                let finer = central(h / 10.0);
                if relative_error(numeric, finer) < TOLERANCE / 10.0 {
                    break;
                }
                h /= 10.0;
                numeric = finer;
                assert!(h >= 1e-7, "{name}[{i}]: no smooth interval around the probe");
            }
            let err = relative_error(grad.data()[i], numeric);
            assert!(
                err < TOLERANCE,
                "{name}[{i}]: analytic {} vs numeric {numeric} at step {h:e} (rel err {err:e})",
                grad.data()[i]
            );
            out.worst = out.worst.max(err);
            out.total += 1;
            out.straddled += (h != H) as usize;
        }
    }
    out
}

pub fn critic_check(weights: LossWeights) -> Probed {
    let cfg = config();
    let g = build_generator(&cfg, 1).unwrap();
    let d = build_discriminator(&cfg, 2).unwrap();
    let x = images(3);
    let (c_o, c_t) = (codes(&[0, 2]), codes(&[2, 1]));
    let eps = [0.3, 0.8];
    let eval = critic_evaluation(&g, &d, &cfg, &weights, &x, &c_o, &c_t, &eps).unwrap();
    check(
        d.params(),
        &eval.grads,
        |p| {
            let d = DiscriminatorParams::from_set(p.clone(), &cfg).unwrap();
            critic_evaluation(&g, &d, &cfg, &weights, &x, &c_o, &c_t, &eps).unwrap().report.total_d.unwrap()
        },
    )
}

pub fn generator_check(weights: LossWeights) -> Probed {
    let cfg = config();
    let g = build_generator(&cfg, 4).unwrap();
    let d = build_discriminator(&cfg, 5).unwrap();
    let x = images(6);
    let (c_o, c_t) = (codes(&[1, 0]), codes(&[0, 2]));
    let eval = generator_evaluation(&g, &d, &cfg, &weights, &x, &c_o, &c_t).unwrap();
    check(
        g.params(),
        &eval.grads,
        |p| {
            let g = GeneratorParams::from_set(p.clone(), &cfg).unwrap();
            generator_evaluation(&g, &d, &cfg, &weights, &x, &c_o, &c_t).unwrap().report.total_g.unwrap()
        },
    )
}

/// Sum of realism scores over a batch, straight from the forward pass.
fn realism_sum(d: &DiscriminatorParams, cfg: &ModelConfig, t: &Tensor) -> f64 {
    discriminator_forward(d, &ImageBatch::new(t.clone()).unwrap(), cfg).unwrap().realism_score.iter().sum()
}

/// Input gradient of the realism score at an interpolated batch against
/// finite differences, and the penalty against the norm of that numeric
/// gradient. Returns the worst relative gradient error.
pub fn penalty_check() -> f64 {
    let cfg = config();
    let d = build_discriminator(&cfg, 7).unwrap();
    let (x, y) = (images(8), images(9));
    let eps = draw_interpolation(2, &mut ChaCha8Rng::seed_from_u64(10));
    let per = 3 * 16 * 16;
    let mixed: Vec<f64> = (0..2 * per)
        .map(|i| eps[i / per] * x.tensor().data()[i] + (1.0 - eps[i / per]) * y.tensor().data()[i])
        .collect();
    let x_bar = Tensor::new(vec![2, 3, 16, 16], mixed);

    let tape = Tape::new();
    let bound = d.params().bind(&tape, false);
    let input = tape.param(x_bar.clone());
    let scores = discriminator_graph(&bound, input, &cfg, None).unwrap().realism;
    let analytic = tape.grad(scores.sum(), &[input])[0].value().as_ref().clone();

    let mut numeric = vec![0.0; 2 * per];
    for (i, slot) in numeric.iter_mut().enumerate() {
        let mut t = x_bar.clone();
        t.data_mut()[i] += H;
        let up = realism_sum(&d, &cfg, &t);
        t.data_mut()[i] -= 2.0 * H;
        *slot = (up - realism_sum(&d, &cfg, &t)) / (2.0 * H);
    }
    let mut worst: f64 = 0.0;
    for (i, (&a, &n)) in analytic.data().iter().zip(&numeric).enumerate() {
        let err = relative_error(a, n);
        assert!(err < TOLERANCE, "pixel {i}: analytic {a} vs numeric {n}");
        worst = worst.max(err);
    }

    let penalty_from = |g: &[f64]| {
        g.chunks(per).map(|s| (s.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).powi(2)).sum::<f64>() / 2.0
    };
    let expected = penalty_from(&numeric);
    let got = gradient_penalty(&d, &x, &y, &cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    assert!((got - expected).abs() <= 1e-6 * expected.max(1.0), "penalty {got} vs finite-difference {expected}");
    worst
}
