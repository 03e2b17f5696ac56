//! Identity-preservation and expression metrics.
//!
//! - [`acd`]: squared distance between embeddings of input and output.
//! - [`verification`]: HTTP client for an external face-verification score,
//!   plus a local mock backend speaking the same contract.
//! - [`expression_accuracy`]: agreement of a classifier with target labels.
//! - [`survey`]: comparison grids with a hidden, recorded variant order.

pub mod survey;
pub mod verification;

use thiserror::Error;

use crate::data::Dataset;
use crate::model::{discriminator_forward, DiscriminatorParams, ImageBatch, ModelConfig, ModelError};

pub use survey::{survey_grid, SurveyGrid, SurveyManifest};
pub use verification::{MockVerificationServer, VerificationClient, VerifyError, CREDENTIALS_ENV};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("embedder {name}: {detail}")]
    Embedder { name: String, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid input: {0}")]
    Input(String),
}

/// Maps one image to a fixed-length feature vector.
pub trait Embedder {
    fn name(&self) -> &str;
    fn version(&self) -> &str;
    /// Feature length `K`.
    fn dim(&self) -> usize;
    /// Embed image `n` of `images`.
    fn embed(&self, images: &ImageBatch, n: usize) -> Result<Vec<f64>, EvalError>;
}

/// Per-channel mean and standard deviation followed by a `grid × grid`
/// average-pooled thumbnail of each channel, channel-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PixelStatsEmbedder {
    pub grid: usize,
}

impl Default for PixelStatsEmbedder {
    fn default() -> Self {
        Self { grid: 4 }
    }
}

impl Embedder for PixelStatsEmbedder {
    fn name(&self) -> &str {
        "pixel-stats"
    }

    fn version(&self) -> &str {
        "1"
    }

    fn dim(&self) -> usize {
        3 * (2 + self.grid * self.grid)
    }

    fn embed(&self, images: &ImageBatch, n: usize) -> Result<Vec<f64>, EvalError> {
        let d = images.image_size();
        if n >= images.len() {
            return Err(EvalError::Input(format!("image {n} of a batch of {}", images.len())));
        }
        if d % self.grid != 0 {
            return Err(EvalError::Embedder {
                name: self.name().into(),
                detail: format!("image size {d} is not a multiple of the {}-cell grid", self.grid),
            });
        }
        let plane = d * d;
        let data = &images.tensor().data()[n * 3 * plane..(n + 1) * 3 * plane];
        let cell = d / self.grid;
        let mut out = Vec::with_capacity(self.dim());
        for c in 0..3 {
            let ch = &data[c * plane..(c + 1) * plane];
            let mean = ch.iter().sum::<f64>() / plane as f64;
            let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / plane as f64;
            out.push(mean);
            out.push(var.sqrt());
        }
        for c in 0..3 {
            let ch = &data[c * plane..(c + 1) * plane];
            for gy in 0..self.grid {
                for gx in 0..self.grid {
                    let mut s = 0.0;
                    for y in gy * cell..(gy + 1) * cell {
                        s += ch[y * d + gx * cell..y * d + (gx + 1) * cell].iter().sum::<f64>();
                    }
                    out.push(s / (cell * cell) as f64);
                }
            }
        }
        Ok(out)
    }
}

/// `‖a − b‖²` of two embeddings.
pub fn squared_distance(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Input(format!("embeddings of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum())
}

/// Content distance `‖φ(x) − φ(y)‖²` between two single images.
pub fn acd(embedder: &dyn Embedder, x: &ImageBatch, y: &ImageBatch) -> Result<f64, EvalError> {
    squared_distance(&embedder.embed(x, 0)?, &embedder.embed(y, 0)?)
}

/// Per-image content distances between paired batches.
pub fn acd_batch(embedder: &dyn Embedder, x: &ImageBatch, y: &ImageBatch) -> Result<Vec<f64>, EvalError> {
    if x.len() != y.len() {
        return Err(EvalError::Input(format!("{} inputs vs {} outputs", x.len(), y.len())));
    }
    (0..x.len()).map(|n| squared_distance(&embedder.embed(x, n)?, &embedder.embed(y, n)?)).collect()
}

/// Mean `|y − x|` over every channel of every pixel where `mask` is false
/// (all pixels when `mask` is `None`), one value per image pair.
pub fn identity_drift(x: &ImageBatch, y: &ImageBatch, mask: Option<&[bool]>) -> Result<Vec<f64>, EvalError> {
    if x.tensor().shape() != y.tensor().shape() {
        return Err(EvalError::Input(format!("{:?} vs {:?}", x.tensor().shape(), y.tensor().shape())));
    }
    let plane = x.image_size() * x.image_size();
    if let Some(m) = mask {
        if m.len() != plane {
            return Err(EvalError::Input(format!("mask of {} pixels for {plane}-pixel images", m.len())));
        }
    }
    let keep = |p: usize| mask.is_none_or(|m| !m[p]);
    let kept = (0..plane).filter(|&p| keep(p)).count();
    if kept == 0 {
        return Err(EvalError::Input("mask covers every pixel".into()));
    }
    let (a, b) = (x.tensor().data(), y.tensor().data());
    Ok((0..x.len())
        .map(|n| {
            let mut s = 0.0;
            for c in 0..3 {
                let base = (n * 3 + c) * plane;
                s += (0..plane).filter(|&p| keep(p)).map(|p| (a[base + p] - b[base + p]).abs()).sum::<f64>();
            }
            s / (3 * kept) as f64
        })
        .collect())
}

/// Predicts an expression class for each image of a batch.
pub trait ExpressionClassifier {
    fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>, EvalError>;
}

/// The critic's class head used as a classifier.
pub struct CriticClassifier<'a> {
    pub params: &'a DiscriminatorParams,
    pub config: &'a ModelConfig,
}

impl ExpressionClassifier for CriticClassifier<'_> {
    fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>, EvalError> {
        Ok(discriminator_forward(self.params, images, self.config)?.predicted_classes())
    }
}

/// Classifies by the nearest per-class mean image, optionally restricted to a
/// pixel mask. Trained independently of any GAN component.
#[derive(Clone, Debug, PartialEq)]
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
    /// Flattened `[3, D, D]` indices the distance is measured over.
    support: Vec<usize>,
}

impl NearestCentroid {
    /// Fit on every image of `dataset`. With a mask, only masked pixels count.
    pub fn fit(dataset: &Dataset, mask: Option<&[bool]>) -> Result<Self, EvalError> {
        let d = dataset.image_size();
        let plane = d * d;
        let support: Vec<usize> = (0..3 * plane).filter(|&i| mask.is_none_or(|m| m[i % plane])).collect();
        let c = dataset.num_classes();
        let mut sums = vec![vec![0.0; support.len()]; c];
        let mut counts = vec![0usize; c];
        for i in 0..dataset.len() {
            let img = dataset.image(i);
            let data = img.tensor().data();
            let label = dataset.labels()[i];
            for (s, &k) in sums[label].iter_mut().zip(&support) {
                *s += data[k];
            }
            counts[label] += 1;
        }
        if let Some(missing) = counts.iter().position(|&n| n == 0) {
            return Err(EvalError::Input(format!("no training images for class {missing}")));
        }
        let centroids = sums.into_iter().zip(counts).map(|(s, n)| s.into_iter().map(|v| v / n as f64).collect()).collect();
        Ok(Self { centroids, support })
    }
}

impl ExpressionClassifier for NearestCentroid {
    fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>, EvalError> {
        let per = images.tensor().numel() / images.len().max(1);
        let max_index = self.support.last().copied().unwrap_or(0);
        if max_index >= per {
            return Err(EvalError::Input("images are smaller than the fitted classifier expects".into()));
        }
        let data = images.tensor().data();
        Ok((0..images.len())
            .map(|n| {
                let img = &data[n * per..(n + 1) * per];
                let dist = |c: &Vec<f64>| -> f64 {
                    self.support.iter().zip(c).map(|(&k, m)| (img[k] - m) * (img[k] - m)).sum()
                };
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, c) in self.centroids.iter().enumerate() {
                    let dd = dist(c);
                    if dd < best_d {
                        best = i;
                        best_d = dd;
                    }
                }
                best
            })
            .collect())
    }
}

/// Fraction of images whose predicted class equals the target.
pub fn expression_accuracy(
    classifier: &dyn ExpressionClassifier,
    images: &ImageBatch,
    targets: &[usize],
) -> Result<f64, EvalError> {
    if images.len() != targets.len() {
        return Err(EvalError::Input(format!("{} images for {} targets", images.len(), targets.len())));
    }
    if targets.is_empty() {
        return Err(EvalError::Input("no images to score".into()));
    }
    let predicted = classifier.predict(images)?;
    Ok(predicted.iter().zip(targets).filter(|(p, t)| p == t).count() as f64 / targets.len() as f64)
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SpriteSpec;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn batch(values: Vec<f64>, n: usize, d: usize) -> ImageBatch {
        ImageBatch::new(Tensor::new(vec![n, 3, d, d], values)).unwrap()
    }

    struct Fixed(Vec<Vec<f64>>);

    impl Embedder for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }
        fn version(&self) -> &str {
            "0"
        }
        fn dim(&self) -> usize {
            self.0[0].len()
        }
        fn embed(&self, images: &ImageBatch, _n: usize) -> Result<Vec<f64>, EvalError> {
            // select by the first pixel value
            Ok(self.0[(images.tensor().data()[0] > 0.0) as usize].clone())
        }
    }

    #[test]
    fn orthogonal_unit_embeddings_are_two_apart() {
        let e = Fixed(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let x = batch(vec![-0.5; 12], 1, 2);
        let y = batch(vec![0.5; 12], 1, 2);
        assert_eq!(acd(&e, &x, &y).unwrap(), 2.0);
        assert_eq!(acd(&e, &x, &x).unwrap(), 0.0);
    }

    #[test]
    fn pixel_stats_of_a_constant_image() {
        let e = PixelStatsEmbedder::default();
        let x = batch(vec![0.25; 3 * 64], 1, 8);
        let f = e.embed(&x, 0).unwrap();
        assert_eq!(f.len(), e.dim());
        assert_eq!(&f[..6], &[0.25, 0.0, 0.25, 0.0, 0.25, 0.0]);
        assert!(f[6..].iter().all(|&v| v == 0.25));
        assert!(e.embed(&batch(vec![0.0; 3 * 36], 1, 6), 0).is_err());
    }

    #[test]
    fn constant_classifier_accuracy() {
        struct Zero;
        impl ExpressionClassifier for Zero {
            fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>, EvalError> {
                Ok(vec![0; images.len()])
            }
        }
        let x = batch(vec![0.0; 3 * 3 * 4], 3, 2);
        assert_eq!(expression_accuracy(&Zero, &x, &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(expression_accuracy(&Zero, &x, &[1, 1, 1]).unwrap(), 0.0);
        assert!(expression_accuracy(&Zero, &x, &[0]).is_err());
    }

    #[test]
    fn nearest_centroid_separates_held_out_sprites() {
        let spec = SpriteSpec::new(32, 7, 0).unwrap();
        let train = Dataset::from_sprites(&spec, 0..40);
        let test = Dataset::from_sprites(&spec, 40..60);
        let clf = NearestCentroid::fit(&train, Some(&spec.expression_mask())).unwrap();
        let idx: Vec<usize> = (0..test.len()).collect();
        let b = test.gather(&idx);
        let acc = expression_accuracy(&clf, &b.images, &b.labels).unwrap();
        assert!(acc >= 0.9, "held-out accuracy {acc}");
    }

    #[test]
    fn drift_ignores_masked_pixels() {
        let x = batch(vec![0.0; 3 * 4], 1, 2);
        let mut v = vec![0.0; 3 * 4];
        v[0] = 1.0;
        v[4 + 1] = 0.5;
        let y = batch(v, 1, 2);
        let mask = [true, false, false, false];
        assert_eq!(identity_drift(&x, &y, Some(&mask)).unwrap(), vec![0.5 / 9.0]);
        assert_eq!(identity_drift(&x, &y, None).unwrap(), vec![1.5 / 12.0]);
        assert!(identity_drift(&x, &y, Some(&[true; 4])).is_err());
    }

    proptest! {
        #[test]
        fn acd_is_a_symmetric_nonnegative_premetric(
            a in proptest::collection::vec(-1.0f64..1.0, 48),
            b in proptest::collection::vec(-1.0f64..1.0, 48),
        ) {
            let e = PixelStatsEmbedder { grid: 2 };
            let (x, y) = (batch(a, 1, 4), batch(b, 1, 4));
            let xy = acd(&e, &x, &y).unwrap();
            prop_assert!(xy >= 0.0);
            prop_assert_eq!(xy, acd(&e, &y, &x).unwrap());
            prop_assert_eq!(acd(&e, &x, &x).unwrap(), 0.0);
        }

        #[test]
        fn accuracy_is_invariant_under_joint_shuffles(labels in proptest::collection::vec(0usize..3, 2..12), seed in 0u64..100) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let n = labels.len();
            // image n carries its "predicted" class in its first pixel
            struct FirstPixel;
            impl ExpressionClassifier for FirstPixel {
                fn predict(&self, images: &ImageBatch) -> Result<Vec<usize>, EvalError> {
                    let per = images.tensor().numel() / images.len();
                    Ok((0..images.len()).map(|i| (images.tensor().data()[i * per] * 2.0).round() as usize).collect())
                }
            }
            let preds: Vec<usize> = (0..n).map(|i| (i * 7 + 1) % 3).collect();
            let make = |order: &[usize]| {
                let mut v = vec![0.0; n * 12];
                for (slot, &i) in order.iter().enumerate() {
                    v[slot * 12] = preds[i] as f64 / 2.0;
                }
                (batch(v, n, 2), order.iter().map(|&i| labels[i]).collect::<Vec<_>>())
            };
            let ident: Vec<usize> = (0..n).collect();
            let mut perm = ident.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (b0, t0) = make(&ident);
            let (b1, t1) = make(&perm);
            let a0 = expression_accuracy(&FirstPixel, &b0, &t0).unwrap();
            prop_assert!((0.0..=1.0).contains(&a0));
            prop_assert_eq!(a0, expression_accuracy(&FirstPixel, &b1, &t1).unwrap());
        }
    }
}
