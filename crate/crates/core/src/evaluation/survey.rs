//! Side-by-side comparison rows for preference surveys: the input on the
//! left, then the candidate outputs in a seeded random order. The order is
//! written to a sidecar manifest so answers can be tallied afterwards.

use std::path::Path;

use image::RgbImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::{save_png, tensor_to_rgb};
use crate::model::ImageBatch;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SurveyManifest {
    /// `order[k]` is the index of the variant shown in column `k + 1`.
    pub order: Vec<usize>,
    pub image_size: usize,
}

impl SurveyManifest {
    /// Variant index shown in grid column `column` (0 is the input).
    pub fn variant_at(&self, column: usize) -> Option<usize> {
        column.checked_sub(1).and_then(|k| self.order.get(k).copied())
    }

    /// Grid column of variant `v`.
    pub fn column_of(&self, v: usize) -> Option<usize> {
        self.order.iter().position(|&o| o == v).map(|k| k + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurveyGrid {
    pub image: RgbImage,
    pub manifest: SurveyManifest,
}

impl SurveyGrid {
    /// Write `<stem>.png` and `<stem>.json` beside each other.
    pub fn save(&self, png_path: &Path) -> Result<(), EvalError> {
        save_png(&self.image, png_path).map_err(|e| EvalError::Input(e.to_string()))?;
        let json = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        let side = png_path.with_extension("json");
        std::fs::write(&side, json).map_err(|e| EvalError::Input(format!("{}: {e}", side.display())))
    }
}

/// One row: `input`, then every variant in a random order drawn from `rng`.
/// All images are single-image batches of equal size.
pub fn survey_grid<R: Rng + ?Sized>(input: &ImageBatch, variants: &[ImageBatch], rng: &mut R) -> Result<SurveyGrid, EvalError> {
    if variants.len() < 2 {
        return Err(EvalError::Input(format!("need at least 2 variants, got {}", variants.len())));
    }
    let d = input.image_size();
    for (i, v) in std::iter::once(input).chain(variants).enumerate() {
        if v.len() != 1 || v.image_size() != d {
            return Err(EvalError::Input(format!(
                "grid cell {i} holds {} image(s) of size {}, expected one of size {d}",
                v.len(),
                v.image_size()
            )));
        }
    }
    let mut order: Vec<usize> = (0..variants.len()).collect();
    order.shuffle(rng);
    let cells: Vec<&ImageBatch> = std::iter::once(input).chain(order.iter().map(|&i| &variants[i])).collect();
    let mut image = RgbImage::new((d * cells.len()) as u32, d as u32);
    for (col, cell) in cells.iter().enumerate() {
        image::imageops::replace(&mut image, &tensor_to_rgb(cell.tensor(), 0), (col * d) as i64, 0);
    }
    Ok(SurveyGrid { image, manifest: SurveyManifest { order, image_size: d } })
}
