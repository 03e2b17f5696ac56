//! Datasets: manifests and splits, image preprocessing, in-memory batching,
//! and a procedural sprite corpus for small end-to-end runs.

mod manifest;
mod preprocess;
pub mod sprites;

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{ImageBatch, ModelError};
use crate::tensor::Tensor;

pub use manifest::{split, DatasetManifest, ManifestRecord, SplitMode};
pub use preprocess::{
    center_crop, intensity_to_unit, load_image, preprocess, rgb_to_tensor, save_png, tensor_to_rgb, unit_to_intensity,
};
pub use sprites::{generate_toy_corpus, SpriteSpec};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("image listed in manifest not found: {}", .0.display())]
    MissingImage(PathBuf),
    #[error("cannot decode image{}: {detail}", .path.as_ref().map(|p| format!(" {}", p.display())).unwrap_or_default())]
    Decode { path: Option<PathBuf>, detail: String },
    #[error("{}: {detail}", .path.display())]
    Io { path: PathBuf, detail: String },
    #[error("invalid data configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl DataError {
    pub fn io(path: &Path, err: std::io::Error) -> Self {
        DataError::Io { path: path.to_path_buf(), detail: err.to_string() }
    }
}

/// Preprocessed images held in memory alongside their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_size: usize,
    num_classes: usize,
    pub(crate) images: Vec<Tensor>,
    labels: Vec<usize>,
    subjects: Vec<String>,
}

/// One minibatch: images and their source expression classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Decode and preprocess every record of `manifest` to `image_size`.
    pub fn load(manifest: &DatasetManifest, image_size: usize) -> Result<Self, DataError> {
        manifest.validate()?;
        manifest.check_paths()?;
        let mut images = Vec::with_capacity(manifest.len());
        for r in &manifest.records {
            images.push(load_image(&manifest.resolve(r), image_size)?.into_tensor());
        }
        Ok(Self {
            image_size,
            num_classes: manifest.num_classes(),
            images,
            labels: manifest.records.iter().map(|r| r.expression_id).collect(),
            subjects: manifest.records.iter().map(|r| r.subject_id.clone()).collect(),
        })
    }

    /// Render a sprite corpus directly into memory, identity-major like
    /// [`generate_toy_corpus`].
    pub fn from_sprites(spec: &SpriteSpec, identities: std::ops::Range<usize>) -> Self {
        let mut ds = Self {
            image_size: spec.image_size,
            num_classes: spec.num_classes,
            images: Vec::new(),
            labels: Vec::new(),
            subjects: Vec::new(),
        };
        for k in identities {
            for c in 0..spec.num_classes {
                ds.images.push(rgb_to_tensor(&spec.render(k, c)));
                ds.labels.push(c);
                ds.subjects.push(format!("identity_{k}"));
            }
        }
        ds
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subject(&self, i: usize) -> &str {
        &self.subjects[i]
    }

    /// Image `i` as a batch of one.
    pub fn image(&self, i: usize) -> ImageBatch {
        ImageBatch::new(self.images[i].clone()).expect("dataset images are validated on load")
    }

    /// Gather the given indices into one batch.
    pub fn gather(&self, indices: &[usize]) -> Batch {
        let picked: Vec<Tensor> = indices.iter().map(|&i| self.images[i].clone()).collect();
        Batch {
            images: ImageBatch::new(Tensor::stack(&picked)).expect("dataset images are validated on load"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Like [`Dataset::gather`], mirroring left-right each image whose `flip`
    /// entry is set.
    pub fn gather_flipped(&self, indices: &[usize], flip: &[bool]) -> Batch {
        assert_eq!(indices.len(), flip.len(), "one flip flag per index");
        let mut batch = self.gather(indices);
        let w = self.image_size;
        let per = 3 * w * w;
        let mut t = batch.images.into_tensor();
        for (chunk, _) in t.data_mut().chunks_exact_mut(per).zip(flip).filter(|(_, &f)| f) {
            for row in chunk.chunks_exact_mut(w) {
                row.reverse();
            }
        }
        batch.images = ImageBatch::new(t).expect("flipping preserves the shape");
        batch
    }

    /// Seeded per-epoch visiting order, cut into full batches. A trailing
    /// partial batch is dropped.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        assert!(batch_size > 0, "batch size must be positive");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2 + epoch);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
    }

    pub fn batches_per_epoch(&self, batch_size: usize) -> usize {
        self.len() / batch_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_batches_are_deterministic_disjoint_and_full() {
        let ds = Dataset::from_sprites(&SpriteSpec::new(8, 3, 0).unwrap(), 0..5);
        assert_eq!(ds.len(), 15);
        let a = ds.epoch_batches(4, 7, 0);
        assert_eq!(a, ds.epoch_batches(4, 7, 0));
        assert_ne!(a, ds.epoch_batches(4, 7, 1));
        assert_eq!(a.len(), 3);
        let mut seen: Vec<usize> = a.concat();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }

    #[test]
    fn gather_keeps_labels_aligned() {
        let mut ds = Dataset::from_sprites(&SpriteSpec::new(8, 4, 0).unwrap(), 0..2);
        // Sprites are mirror-symmetric; a horizontal ramp is not.
        for t in &mut ds.images {
            t.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = (i % 8) as f64 / 8.0);
        }
        let b = ds.gather(&[5, 2]);
        let f = ds.gather_flipped(&[5, 2], &[false, true]);
        let (n, w) = (3 * 8 * 8, 8);
        assert_eq!(f.labels, b.labels);
        assert_eq!(f.images.tensor().data()[..n], b.images.tensor().data()[..n]);
        let (plain, mirrored) = (&b.images.tensor().data()[n..], &f.images.tensor().data()[n..]);
        for (p, m) in plain.chunks(w).zip(mirrored.chunks(w)) {
            assert!(p.iter().rev().eq(m.iter()));
            assert_ne!(p, m);
        }
        assert_eq!(b.labels, vec![1, 2]);
        assert_eq!(b.images.len(), 2);
        assert_eq!(b.images.image(0), ds.image(5));
    }

    #[test]
    fn loading_from_disk_matches_in_memory_rendering() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SpriteSpec::new(16, 3, 2).unwrap();
        let m = generate_toy_corpus(&spec, 2, dir.path()).unwrap();
        let disk = Dataset::load(&m, 16).unwrap();
        assert_eq!(disk, Dataset::from_sprites(&spec, 0..2));
        std::fs::remove_file(dir.path().join("identity_1/expr_0.png")).unwrap();
        assert!(matches!(Dataset::load(&m, 16), Err(DataError::MissingImage(_))));
    }
}
