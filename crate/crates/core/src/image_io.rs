//! Image decoding and teacher-input preprocessing.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use image::imageops::FilterType;
use image::DynamicImage;

use crate::backbone::{IMAGENET_MEAN, IMAGENET_STD};
use crate::error::{Error, Result};

pub fn open_image(path: &Path) -> Result<DynamicImage> {
    image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// 8-bit RGB (grayscale replicated), bilinear resize to `size`×`size`,
/// then channel-wise standardization. Returns `(3, size, size)` values.
pub fn preprocess(img: &DynamicImage, size: usize) -> Vec<f32> {
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != size || rgb.height() as usize != size {
        rgb = image::imageops::resize(&rgb, size as u32, size as u32, FilterType::Triangle);
    }
    let plane = size * size;
    let mut out = vec![0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            let v = px[c] as f64 / 255.0;
            out[c * plane + i] = ((v - IMAGENET_MEAN[c]) / IMAGENET_STD[c]) as f32;
        }
    }
    out
}

/// Loads and preprocesses a batch of images into `(B, 3, size, size)`.
pub fn load_batch<P: AsRef<Path>>(
    paths: &[P],
    size: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(paths.len() * 3 * size * size);
    for p in paths {
        data.extend(preprocess(&open_image(p.as_ref())?, size));
    }
    Ok(Tensor::from_vec(data, (paths.len(), 3, size, size), device)?.to_dtype(dtype)?)
}
