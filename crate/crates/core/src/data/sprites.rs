//! Procedural expression sprites: a desk-scale stand-in for labeled face
//! photographs.
//!
//! Identity (background tint, face hue and radius, eye spacing) is drawn per
//! identity from a seeded stream. Expression (mouth curvature and openness,
//! eyebrow tilt and height) comes from a fixed per-class table and is drawn
//! only inside two fixed boxes, so two sprites of one identity differ only
//! inside [`SpriteSpec::expression_mask`].

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestRecord};
use super::preprocess::save_png;
use super::DataError;

/// Expression parameters of one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpressionParams {
    /// Positive raises the mouth corners.
    pub mouth_curvature: f64,
    /// 0 is a closed line, 1 fully open.
    pub mouth_openness: f64,
    /// Positive raises the inner ends of the brows.
    pub brow_angle: f64,
    pub brow_raise: f64,
}

pub const EXPRESSION_NAMES: [&str; 7] = ["neutral", "happy", "sad", "surprised", "angry", "disgusted", "fearful"];

const EXPRESSIONS: [ExpressionParams; 7] = [
    ExpressionParams { mouth_curvature: 0.0, mouth_openness: 0.0, brow_angle: 0.0, brow_raise: 0.0 },
    ExpressionParams { mouth_curvature: 1.0, mouth_openness: 0.3, brow_angle: 0.0, brow_raise: 0.3 },
    ExpressionParams { mouth_curvature: -1.0, mouth_openness: 0.0, brow_angle: 0.8, brow_raise: 0.0 },
    ExpressionParams { mouth_curvature: 0.0, mouth_openness: 1.0, brow_angle: 0.0, brow_raise: 1.0 },
    ExpressionParams { mouth_curvature: -0.4, mouth_openness: 0.0, brow_angle: -1.0, brow_raise: -0.6 },
    ExpressionParams { mouth_curvature: -0.8, mouth_openness: 0.5, brow_angle: -0.5, brow_raise: -0.2 },
    ExpressionParams { mouth_curvature: -0.3, mouth_openness: 0.8, brow_angle: 0.8, brow_raise: 0.8 },
];

/// Identity parameters of one sprite subject.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IdentityParams {
    pub face_hue: f64,
    pub face_saturation: f64,
    pub face_value: f64,
    pub face_radius: f64,
    pub eye_spacing: f64,
    pub background_hue: f64,
}

/// Axis-aligned box in unit image coordinates, `[u0, u1) × [v0, v1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitBox {
    pub u0: f64,
    pub u1: f64,
    pub v0: f64,
    pub v1: f64,
}

impl UnitBox {
    fn contains(&self, u: f64, v: f64) -> bool {
        u >= self.u0 && u < self.u1 && v >= self.v0 && v < self.v1
    }
}

pub const BROW_BOX: UnitBox = UnitBox { u0: 0.16, u1: 0.84, v0: 0.2, v1: 0.39 };
pub const MOUTH_BOX: UnitBox = UnitBox { u0: 0.28, u1: 0.72, v0: 0.58, v1: 0.85 };

const SUPERSAMPLE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub image_size: usize,
    pub num_classes: usize,
    pub seed: u64,
}

impl SpriteSpec {
    pub fn new(image_size: usize, num_classes: usize, seed: u64) -> Result<Self, DataError> {
        if num_classes < 2 || num_classes > EXPRESSIONS.len() {
            return Err(DataError::Config(format!(
                "sprite corpus supports 2..={} classes, got {num_classes}",
                EXPRESSIONS.len()
            )));
        }
        if image_size < 8 {
            return Err(DataError::Config(format!("sprite size must be at least 8, got {image_size}")));
        }
        Ok(Self { image_size, num_classes, seed })
    }

    pub fn class_names(&self) -> Vec<String> {
        EXPRESSION_NAMES[..self.num_classes].iter().map(|s| s.to_string()).collect()
    }

    pub fn expression(&self, class: usize) -> ExpressionParams {
        EXPRESSIONS[class]
    }

    pub fn identity(&self, k: usize) -> IdentityParams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k as u64 + 1);
        IdentityParams {
            face_hue: rng.random_range(0.0..1.0),
            face_saturation: rng.random_range(0.25..0.55),
            face_value: rng.random_range(0.7..0.95),
            face_radius: rng.random_range(0.42..0.48),
            eye_spacing: rng.random_range(0.13..0.19),
            background_hue: rng.random_range(0.0..1.0),
        }
    }

    /// Pixels that may differ between expressions of one identity.
    pub fn expression_mask(&self) -> Vec<bool> {
        let d = self.image_size;
        let overlaps = |b: &UnitBox, x: usize, y: usize| {
            let (px0, px1) = (x as f64 / d as f64, (x + 1) as f64 / d as f64);
            let (py0, py1) = (y as f64 / d as f64, (y + 1) as f64 / d as f64);
            px1 > b.u0 && px0 < b.u1 && py1 > b.v0 && py0 < b.v1
        };
        (0..d * d).map(|i| overlaps(&BROW_BOX, i % d, i / d) || overlaps(&MOUTH_BOX, i % d, i / d)).collect()
    }

    pub fn render(&self, identity: usize, class: usize) -> RgbImage {
        assert!(class < self.num_classes, "class {class} out of range");
        let id = self.identity(identity);
        let ex = self.expression(class);
        let d = self.image_size;
        let n = SUPERSAMPLE;
        RgbImage::from_fn(d as u32, d as u32, |x, y| {
            let mut acc = [0.0; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let u = (x as f64 + (sx as f64 + 0.5) / n as f64) / d as f64;
                    let v = (y as f64 + (sy as f64 + 0.5) / n as f64) / d as f64;
                    let c = shade(&id, &ex, u, v);
                    for k in 0..3 {
                        acc[k] += c[k];
                    }
                }
            }
            let px = acc.map(|a| ((a / (n * n) as f64).clamp(0.0, 1.0) * 255.0).round() as u8);
            Rgb(px)
        })
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

const FEATURE: [f64; 3] = [0.08, 0.06, 0.08];
const MOUTH: [f64; 3] = [0.45, 0.05, 0.1];

fn shade(id: &IdentityParams, ex: &ExpressionParams, u: f64, v: f64) -> [f64; 3] {
    if BROW_BOX.contains(u, v) && on_brow(ex, u, v) {
        return FEATURE;
    }
    if MOUTH_BOX.contains(u, v) && on_mouth(ex, u, v) {
        return MOUTH;
    }
    let (fu, fv) = (u - 0.5, v - 0.52);
    if (fu * fu + fv * fv).sqrt() > id.face_radius {
        return hsv(id.background_hue, 0.2, 0.9);
    }
    for side in [-1.0, 1.0] {
        let (eu, ev) = (u - (0.5 + side * id.eye_spacing), v - 0.46);
        if (eu * eu + ev * ev).sqrt() < 0.045 {
            return FEATURE;
        }
    }
    hsv(id.face_hue, id.face_saturation, id.face_value)
}

fn on_brow(ex: &ExpressionParams, u: f64, v: f64) -> bool {
    let tilt = ex.brow_angle * 0.45;
    for side in [-1.0, 1.0] {
        let cu = 0.5 + side * 0.165;
        let cv = 0.3 - ex.brow_raise * 0.035;
        // t runs from the inner end (-1) to the outer end (+1)
        let t = (u - cu) * side / 0.1;
        if t.abs() > 1.0 {
            continue;
        }
        let centre = cv + t * tilt * 0.1;
        if (v - centre).abs() < 0.02 {
            return true;
        }
    }
    false
}

fn on_mouth(ex: &ExpressionParams, u: f64, v: f64) -> bool {
    let t = (u - 0.5) / 0.17;
    if t.abs() > 1.0 {
        return false;
    }
    let centre = 0.71 - ex.mouth_curvature * 0.06 * (t * t - 0.5);
    let half = 0.018 + ex.mouth_openness * 0.05 * (1.0 - t * t);
    (v - centre).abs() < half
}

/// Render `num_identities × C` sprites under `out_dir` as
/// `identity_<k>/expr_<c>.png` and write `manifest.csv` beside them.
pub fn generate_toy_corpus(spec: &SpriteSpec, num_identities: usize, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    if num_identities == 0 {
        return Err(DataError::Config("num_identities must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(num_identities * spec.num_classes);
    for k in 0..num_identities {
        for c in 0..spec.num_classes {
            let rel = PathBuf::from(format!("identity_{k}")).join(format!("expr_{c}.png"));
            save_png(&spec.render(k, c), &out_dir.join(&rel))?;
            records.push(ManifestRecord { image_path: rel, expression_id: c, subject_id: format!("identity_{k}") });
        }
    }
    let manifest = DatasetManifest { class_names: spec.class_names(), records, base_dir: out_dir.to_path_buf() };
    manifest.save(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}
