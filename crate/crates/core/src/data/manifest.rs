//! Manifest files: a `#classes:` header naming the expression classes, a
//! column header, then one `path,expression_id,subject_id` record per image.
//!
//! ```text
//! #classes: neutral,happy,sad
//! path,expression_id,subject_id
//! identity_0/expr_0.png,0,identity_0
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

const CLASSES_PREFIX: &str = "#classes:";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(rename = "path")]
    pub image_path: PathBuf,
    pub expression_id: usize,
    pub subject_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<ManifestRecord>,
    /// Directory relative record paths are resolved against.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        if record.image_path.is_absolute() {
            record.image_path.clone()
        } else {
            self.base_dir.join(&record.image_path)
        }
    }

    /// Records per class, in class order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for r in &self.records {
            counts[r.expression_id] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let c = self.num_classes();
        if c < 2 {
            return Err(DataError::Manifest(format!("manifest names {c} classes, need at least 2")));
        }
        for (i, r) in self.records.iter().enumerate() {
            if r.expression_id >= c {
                return Err(DataError::Manifest(format!(
                    "record {i} ({}): expression_id {} out of range for {c} classes",
                    r.image_path.display(),
                    r.expression_id
                )));
            }
            if r.subject_id.is_empty() {
                return Err(DataError::Manifest(format!("record {i} ({}): empty subject_id", r.image_path.display())));
            }
        }
        Ok(())
    }

    /// Check that every record's image exists on disk.
    pub fn check_paths(&self) -> Result<(), DataError> {
        for r in &self.records {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(DataError::MissingImage(p));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> Result<String, DataError> {
        let mut out = format!("{CLASSES_PREFIX} {}\n", self.class_names.join(","));
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).map_err(|e| DataError::Manifest(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| DataError::Manifest(e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        if self.records.is_empty() {
            out.push_str("path,expression_id,subject_id\n");
        }
        Ok(out)
    }

    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, DataError> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let classes = first
            .trim_end_matches('\r')
            .strip_prefix(CLASSES_PREFIX)
            .ok_or_else(|| DataError::Manifest(format!("first line must start with {CLASSES_PREFIX:?}")))?;
        let class_names: Vec<String> = classes.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(rest.as_bytes());
        let headers = reader.headers().map_err(|e| DataError::Manifest(e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["path", "expression_id", "subject_id"] {
            return Err(DataError::Manifest(format!("expected header path,expression_id,subject_id, got {headers:?}")));
        }
        let mut records = Vec::new();
        for (i, row) in reader.deserialize::<ManifestRecord>().enumerate() {
            records.push(row.map_err(|e| DataError::Manifest(format!("record {i}: {e}")))?);
        }
        let m = Self { class_names, records, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        fs::write(path, self.to_text()?).map_err(|e| DataError::io(path, e))
    }

    fn with_records(&self, records: Vec<ManifestRecord>) -> Self {
        Self { class_names: self.class_names.clone(), records, base_dir: self.base_dir.clone() }
    }
}

/// How [`split`] keeps records apart.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Shuffle records and cut at `floor(n · train_fraction)`.
    #[default]
    Record,
    /// Shuffle subjects and assign whole subjects to the training side until it
    /// holds at least `floor(n · train_fraction)` records.
    SubjectDisjoint,
}

/// Seeded shuffle and partition into `(train, test)`.
pub fn split(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
    mode: SplitMode,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if manifest.is_empty() {
        return Err(DataError::Manifest("cannot split an empty manifest".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::Manifest(format!("train_fraction must be in (0, 1), got {train_fraction}")));
    }
    let n = manifest.len();
    let target = (n as f64 * train_fraction).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test) = match mode {
        SplitMode::Record => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let (a, b) = order.split_at(target);
            (a.to_vec(), b.to_vec())
        }
        SplitMode::SubjectDisjoint => {
            let mut subjects: Vec<&str> = Vec::new();
            for r in &manifest.records {
                if !subjects.contains(&r.subject_id.as_str()) {
                    subjects.push(&r.subject_id);
                }
            }
            subjects.shuffle(&mut rng);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for s in subjects {
                let members = (0..n).filter(|&i| manifest.records[i].subject_id == s);
                if train.len() < target {
                    train.extend(members);
                } else {
                    test.extend(members);
                }
            }
            (train, test)
        }
    };
    let pick = |idx: &[usize]| manifest.with_records(idx.iter().map(|&i| manifest.records[i].clone()).collect());
    Ok((pick(&train), pick(&test)))
}
