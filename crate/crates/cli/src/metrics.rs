//! PSNR and multi-scale SSIM on `[3, H, W]` images with values in `[0, 1]`.

use ffabic::{Scalar, Tensor};

use crate::error::{CliError, CliResult};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

/// Per-scale exponents of the five-scale variant.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> CliResult<()> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(CliError::Core(ffabic::Error::Input(format!("cannot compare images of shapes {:?} and {:?}", a.shape(), b.shape()))));
    }
    Ok(())
}

pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> CliResult<f64> {
    check_pair(a, b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x.to_f64c() - y.to_f64c()).powi(2)).sum::<f64>() / a.len() as f64;
    Ok(psnr_from_mse(mse))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// Plane stored row-major in f64.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn zip(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect() }
    }

    /// Valid-mode separable Gaussian filtering.
    fn blur(&self, k: &[f64]) -> Plane {
        let n = k.len();
        let (oh, ow) = (self.h + 1 - n, self.w + 1 - n);
        let mut rows = vec![0.0; self.h * ow];
        for y in 0..self.h {
            for x in 0..ow {
                rows[y * ow + x] = (0..n).map(|i| k[i] * self.v[y * self.w + x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2×2 average pooling; an odd edge is first extended by mirroring its last row or column.
    fn downsample(&self) -> Plane {
        let (oh, ow) = (self.h.div_ceil(2), self.w.div_ceil(2));
        let at = |y: usize, x: usize| self.v[y.min(self.h - 1) * self.w + x.min(self.w - 1)];
        let v = (0..oh * ow)
            .map(|i| {
                let (y, x) = (2 * (i / ow), 2 * (i % ow));
                (at(y, x) + at(y, x + 1) + at(y + 1, x) + at(y + 1, x + 1)) / 4.0
            })
            .collect();
        Plane { h: oh, w: ow, v }
    }
}

fn gaussian_taps() -> Vec<f64> {
    let c = (WINDOW - 1) as f64 / 2.0;
    let g: Vec<f64> = (0..WINDOW).map(|i| (-0.5 * ((i as f64 - c) / SIGMA).powi(2)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64]) -> (f64, f64) {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let (ma, mb) = (a.blur(k), b.blur(k));
    let ab = a.zip(b, |x, y| x * y).blur(k);
    let sq = a.zip(b, |x, y| x * x + y * y).blur(k);
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..ma.v.len() {
        let num0 = 2.0 * ma.v[i] * mb.v[i];
        let den0 = ma.v[i] * ma.v[i] + mb.v[i] * mb.v[i];
        let lum = (num0 + c1) / (den0 + c1);
        let c = (2.0 * ab.v[i] - num0 + c2) / (sq.v[i] - den0 + c2);
        ssim += lum * c;
        cs += c;
    }
    let n = ma.v.len() as f64;
    (ssim / n, cs / n)
}

/// Number of scales whose coarsest plane still fits the Gaussian window.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let (mut h, mut w, mut k) = (h, w, 0);
    while k < MS_SSIM_WEIGHTS.len() && h.min(w) >= WINDOW {
        k += 1;
        h = h.div_ceil(2);
        w = w.div_ceil(2);
    }
    k
}

/// Multi-scale SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over channels.
///
/// Images too small for five scales use as many as fit, with the leading
/// exponents renormalised to sum to one.
pub fn ms_ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> CliResult<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.dims3();
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(CliError::Core(ffabic::Error::Input(format!("{h}x{w} image is smaller than the {WINDOW}x{WINDOW} window"))));
    }
    if scales < MS_SSIM_WEIGHTS.len() {
        log::warn!("{h}x{w} image fits only {scales} MS-SSIM scales");
    }
    let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
    let weights: Vec<f64> = MS_SSIM_WEIGHTS[..scales].iter().map(|v| v / total).collect();
    let k = gaussian_taps();
    let mut acc = 0.0;
    for ch in 0..c {
        let plane = |t: &Tensor<T>| Plane { h, w, v: t.channel(ch).iter().map(|v| v.to_f64c()).collect() };
        let (mut pa, mut pb) = (plane(a), plane(b));
        let mut value = 1.0;
        for (s, wt) in weights.iter().enumerate() {
            if s > 0 {
                pa = pa.downsample();
                pb = pb.downsample();
            }
            let (ssim, cs) = ssim_terms(&pa, &pb, &k);
            let term = if s + 1 == scales { ssim } else { cs };
            value *= term.max(0.0).powf(*wt);
        }
        acc += value;
    }
    Ok(acc / c as f64)
}
