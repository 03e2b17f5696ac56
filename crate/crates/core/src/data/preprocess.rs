//! Image ingestion: center square crop, bilinear resize, and the mapping of
//! 8-bit intensities onto `[-1, 1]`.

use std::path::Path;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb, RgbImage};

use super::DataError;
use crate::model::ImageBatch;
use crate::tensor::Tensor;

/// `v ∈ [0, 255] ↦ 2v/255 − 1`.
pub fn intensity_to_unit(v: u8) -> f64 {
    2.0 * v as f64 / 255.0 - 1.0
}

/// Inverse of [`intensity_to_unit`], rounding and saturating.
pub fn unit_to_intensity(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8
}

/// Largest centered square of `img`.
pub fn center_crop(img: &RgbImage) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    imageops::crop_imm(img, (w - side) / 2, (h - side) / 2, side, side).to_image()
}

/// Crop, resize to `size × size` with a bilinear filter, and normalize to a
/// `[1, 3, size, size]` batch.
pub fn preprocess(raw: &RgbImage, size: usize) -> Result<ImageBatch, DataError> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(DataError::Decode { path: None, detail: "empty image".into() });
    }
    let square = center_crop(raw);
    let resized = if square.width() as usize == size {
        square
    } else {
        imageops::resize(&square, size as u32, size as u32, FilterType::Triangle)
    };
    Ok(ImageBatch::new(rgb_to_tensor(&resized)).expect("8-bit intensities map into [-1, 1]"))
}

/// Decode an image file and [`preprocess`] it.
pub fn load_image(path: &Path, size: usize) -> Result<ImageBatch, DataError> {
    let img = image::open(path)
        .map_err(|e| DataError::Decode { path: Some(path.to_path_buf()), detail: e.to_string() })?
        .to_rgb8();
    preprocess(&img, size).map_err(|e| match e {
        DataError::Decode { detail, .. } => DataError::Decode { path: Some(path.to_path_buf()), detail },
        other => other,
    })
}

pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * w * h];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = intensity_to_unit(px[c]);
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Image `n` of a `[N, 3, H, W]` tensor as 8-bit RGB.
pub fn tensor_to_rgb(t: &Tensor, n: usize) -> RgbImage {
    let s = t.shape();
    let (h, w) = (s[2], s[3]);
    let base = n * 3 * h * w;
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| unit_to_intensity(t.data()[base + (c * h + y as usize) * w + x as usize]);
        Rgb([at(0), at(1), at(2)])
    })
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DataError::Io { path: path.to_path_buf(), detail: e.to_string() })
}
