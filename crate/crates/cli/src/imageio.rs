//! 8-bit PNG in and out; pixels live in `[0, 1]` as `[3, H, W]` tensors.

use std::path::{Path, PathBuf};

use ffabic::{Scalar, Tensor};
use image::{ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{CliError, CliResult};

fn image_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Image { path: path.display().to_string(), message: e.to_string() }
}

pub fn read_png<T: Scalar>(path: &Path) -> CliResult<Tensor<T>> {
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    if img.color().bytes_per_pixel() / img.color().channel_count() != 1 {
        log::warn!("{}: converting {:?} to 8-bit RGB", path.display(), img.color());
    }
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn from_rgb8<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, r) = (i / (h * w), i % (h * w));
        T::from_f64c(raw[r * 3 + c] as f64 / 255.0)
    })
}

/// Rounds to the nearest 8-bit level after clamping to `[0, 1]`.
pub fn to_rgb8<T: Scalar>(x: &Tensor<T>) -> RgbImage {
    let (_, h, w) = x.dims3();
    let d = x.data();
    ImageBuffer::from_fn(w as u32, h as u32, |px, py| {
        let r = py as usize * w + px as usize;
        Rgb([0, 1, 2].map(|c| (d[c * h * w + r].to_f64c().clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

/// The image as it would come back from an 8-bit file.
pub fn quantize_8bit<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    from_rgb8(&to_rgb8(x))
}

pub fn write_png<T: Scalar>(path: &Path, x: &Tensor<T>) -> CliResult<()> {
    if x.ndim() != 3 || x.shape()[0] != 3 {
        return Err(image_err(path, format!("expected a [3, H, W] image, got {:?}", x.shape())));
    }
    to_rgb8(x).save(path).map_err(|e| image_err(path, e))
}

/// Writes a single-channel map, min-max normalised to the 8-bit range.
pub fn write_gray_map<T: Scalar>(path: &Path, map: &Tensor<T>) -> CliResult<()> {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let vals: Vec<f64> = map.data().iter().map(|v| v.to_f64c()).collect();
    let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let img =
        ImageBuffer::from_fn(w as u32, h as u32, |x, y| Luma([((vals[y as usize * w + x as usize] - lo) / span * 255.0).round() as u8]));
    img.save(path).map_err(|e| image_err(path, e))
}

/// PNG files of a directory in name order.
pub fn list_pngs(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(CliError::Usage(format!("no PNG files in {}", dir.display())));
    }
    Ok(out)
}
