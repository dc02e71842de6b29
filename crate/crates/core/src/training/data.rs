//! Training images: a seeded synthetic generator or a fixed image list with random crops.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Seeded synthetic image: gradient background, soft-edged ellipses and
/// rectangles, and a faint oriented texture. Values lie in `[0, 1]`.
pub fn synthetic_image<T: Scalar>(seed: u64, h: usize, w: usize) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = vec![0.0f64; 3 * h * w];
    let (hf, wf) = (h as f64, w as f64);
    for c in 0..3 {
        let (a, gx, gy): (f64, f64, f64) = (rng.random_range(0.2..0.8), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
        for y in 0..h {
            for x in 0..w {
                img[(c * h + y) * w + x] = a + gx * (x as f64 / wf - 0.5) + gy * (y as f64 / hf - 0.5);
            }
        }
    }
    let shapes = rng.random_range(2..=5);
    for _ in 0..shapes {
        let color: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        let (cx, cy) = (rng.random_range(0.0..wf), rng.random_range(0.0..hf));
        let (rx, ry) = (rng.random_range(0.08..0.35) * wf, rng.random_range(0.08..0.35) * hf);
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                // signed distance in pixels, roughly
                let d = if ellipse {
                    ((dx * dx + dy * dy).sqrt() - 1.0) * rx.min(ry)
                } else {
                    (dx.abs() - 1.0).max(dy.abs() - 1.0) * rx.min(ry)
                };
                let alpha = 1.0 / (1.0 + (d / 0.7).exp());
                for (c, col) in color.iter().enumerate() {
                    let p = &mut img[(c * h + y) * w + x];
                    *p = *p * (1.0 - alpha) + col * alpha;
                }
            }
        }
    }
    let (fx, fy): (f64, f64) = (rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6));
    let amp: f64 = rng.random_range(0.0..0.06);
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let p = &mut img[(c * h + y) * w + x];
                *p = (*p + amp * (fx * x as f64 + fy * y as f64 + phase).sin()).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], img.into_iter().map(T::from_f64c).collect())
}

/// Source of training crops.
#[derive(Debug, Clone)]
pub enum Dataset<T> {
    /// Fresh synthetic images, one per draw.
    Synthetic { size: usize },
    /// Random crops of fixed images.
    Images { images: Vec<Tensor<T>>, crop: usize },
}

impl<T: Scalar> Dataset<T> {
    pub fn images(images: Vec<Tensor<T>>, crop: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Input("dataset has no images".into()));
        }
        for (i, im) in images.iter().enumerate() {
            if im.ndim() != 3 || im.shape()[0] != 3 || im.shape()[1] < crop || im.shape()[2] < crop {
                return Err(Error::Input(format!("image {i} with shape {:?} cannot yield {crop}x{crop} crops", im.shape())));
            }
        }
        Ok(Dataset::Images { images, crop })
    }

    /// One training image drawn with `rng`.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Tensor<T> {
        match self {
            Dataset::Synthetic { size } => synthetic_image(rng.random(), *size, *size),
            Dataset::Images { images, crop } => {
                let im = &images[rng.random_range(0..images.len())];
                let (_, h, w) = im.dims3();
                let (y0, x0) = (rng.random_range(0..=h - crop), rng.random_range(0..=w - crop));
                Tensor::from_fn(&[3, *crop, *crop], |i| {
                    let (c, r) = (i / (crop * crop), i % (crop * crop));
                    im.data()[(c * h + y0 + r / crop) * w + x0 + r % crop]
                })
            }
        }
    }
}

/// Fixed held-out images independent of any training draw.
pub fn held_out_images<T: Scalar>(count: usize, size: usize) -> Vec<Tensor<T>> {
    (0..count).map(|i| synthetic_image(0xE7A1_0000 + i as u64, size, size)).collect()
}
