//! The four loss terms and their weighted total.

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::model::{Model, PassMode};
use crate::nn::Ctx;
use crate::numerics::{Fft2Plan, ZERO_AMPLITUDE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Rate.
    pub lambda1: f64,
    /// Spatial content.
    pub lambda2: f64,
    /// Frequency content.
    pub lambda3: f64,
    /// Diffusion noise prediction.
    pub lambda4: f64,
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64, lambda4: f64) -> Result<Self> {
        let w = LossWeights { lambda1, lambda2, lambda3, lambda4 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got {all:?}")));
        }
        if all.iter().all(|l| *l == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.lambda1, self.lambda2, self.lambda3, self.lambda4]
    }
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    /// Cross-entropy of the rounded latents, bits per pixel.
    pub bpp: f64,
    pub rate: f64,
    pub spatial: f64,
    pub frequency: f64,
    pub noise: f64,
    pub total: f64,
}

impl LossReport {
    pub fn terms(&self) -> [f64; 4] {
        [self.rate, self.spatial, self.frequency, self.noise]
    }

    /// Elementwise mean of several reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let mut m = LossReport::default();
        for r in reports {
            m.bpp += r.bpp / n;
            m.rate += r.rate / n;
            m.spatial += r.spatial / n;
            m.frequency += r.frequency / n;
            m.noise += r.noise / n;
            m.total += r.total / n;
        }
        m
    }
}

/// `(bits_y + bits_z) / pixels`.
pub fn rate_loss<'t, T: Scalar>(bits_y: Var<'t, T>, bits_z: Var<'t, T>, pixels: usize) -> Result<Var<'t, T>> {
    if pixels == 0 {
        return Err(Error::Input("rate of an empty image".into()));
    }
    Ok(bits_y.add(bits_z).scale(1.0 / pixels as f64))
}

/// Mean squared error between the content representation and its target.
pub fn spatial_loss<'t, T: Scalar>(z_c: Var<'t, T>, target: Var<'t, T>) -> Result<Var<'t, T>> {
    if z_c.shape() != target.shape() {
        return Err(contract(format!("spatial loss shapes {:?} and {:?}", z_c.shape(), target.shape())));
    }
    Ok(z_c.mse(target))
}

/// Amplitude and phase distance of full-plane spectra, channel by channel.
///
/// Amplitude: mean squared difference over all bins. Phase: `2 - 2cos(P1 - P2)`
/// computed on unit phasors, summed over bins where either amplitude reaches
/// [`ZERO_AMPLITUDE`] and divided by the total bin count.
pub fn frequency_loss<'t, T: Scalar>(a: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() != bv.shape() || av.ndim() != 3 {
        return Err(contract(format!("frequency loss needs equal [C, H, W] shapes, got {:?} and {:?}", av.shape(), bv.shape())));
    }
    let (c, h, w) = av.dims3();
    let plane = h * w;
    let n = (c * plane) as f64;
    let plan = Fft2Plan::<f64>::new(h, w);
    let spectrum = |t: &Tensor<T>| -> Vec<Complex<f64>> {
        let mut s: Vec<Complex<f64>> = t.data().iter().map(|v| Complex::new(v.to_f64c(), 0.0)).collect();
        for ch in s.chunks_mut(plane) {
            plan.forward(ch);
        }
        s
    };
    let (fa, fb) = (spectrum(&av), spectrum(&bv));
    let unit = |z: Complex<f64>, r: f64| if r < ZERO_AMPLITUDE { Complex::new(1.0, 0.0) } else { z / r };

    let mut total = 0.0;
    let mut ga = vec![Complex::new(0.0, 0.0); fa.len()];
    let mut gb = vec![Complex::new(0.0, 0.0); fb.len()];
    for i in 0..fa.len() {
        let (ra, rb) = (fa[i].norm(), fb[i].norm());
        let (ua, ub) = (unit(fa[i], ra), unit(fb[i], rb));
        let d = ra - rb;
        total += d * d;
        let active = ra >= ZERO_AMPLITUDE || rb >= ZERO_AMPLITUDE;
        let cos = (ua * ub.conj()).re;
        if active {
            // |ua - ub|² = 2 - 2cos, exactly zero for equal phasors
            total += (ua - ub).norm_sqr();
        }
        if ra >= ZERO_AMPLITUDE {
            ga[i] += ua * (2.0 * d / n);
            if active {
                ga[i] -= (ub - ua * cos) * (2.0 / (n * ra));
            }
        }
        if rb >= ZERO_AMPLITUDE {
            gb[i] -= ub * (2.0 * d / n);
            if active {
                gb[i] -= (ua - ub * cos) * (2.0 / (n * rb));
            }
        }
    }
    let shape = av.shape().to_vec();
    let back = move |g: f64, spec: &[Complex<f64>]| -> Tensor<T> {
        let mut s = spec.to_vec();
        for ch in s.chunks_mut(plane) {
            plan.inverse(ch);
        }
        Tensor::from_parts(shape.clone(), s.iter().map(|z| T::from_f64c(g * z.re * plane as f64)).collect())
    };
    Ok(a.tape().op(Tensor::scalar(T::from_f64c(total / n)), &[a, b], move |g| {
        let g = g.data()[0].to_f64c();
        vec![Some(back(g, &ga)), Some(back(g, &gb))]
    }))
}

/// Weighted total of one image together with its component report.
pub struct ImageLoss<'t, T: Scalar> {
    pub total: Var<'t, T>,
    pub report: LossReport,
}

/// Every loss term for one padded image. Terms with zero weight are reported but
/// kept out of the differentiated total.
pub fn total_loss<'t, T: Scalar, R: Rng>(
    model: &Model<T>,
    ctx: &Ctx<'t, '_, T>,
    x: &Tensor<T>,
    pixels: usize,
    weights: &LossWeights,
    rng: &mut R,
) -> Result<ImageLoss<'t, T>> {
    weights.validate()?;
    let prior = model.extract_prior(x)?;
    let target = model.content_target(x)?;
    let pass = model.codec_pass(ctx, x, &prior, PassMode::Train, rng)?;
    let target_var = ctx.constant(target.clone());
    let rate = rate_loss(pass.bits_y, pass.bits_z, pixels)?;
    let spatial = spatial_loss(pass.z_c, target_var)?;
    let frequency = frequency_loss(pass.z_c, target_var)?;
    let t = rng.random_range(1..=model.schedule.steps());
    let eps = Tensor::from_fn(target.shape(), |_| {
        let e: f64 = StandardNormal.sample(rng);
        T::from_f64c(e)
    });
    let noise = model.denoiser.noise_loss(ctx, &model.schedule, &target, t, &eps, pass.z_c)?;

    let terms = [rate, spatial, frequency, noise];
    let mut total: Option<Var<'t, T>> = None;
    for (term, lambda) in terms.iter().zip(weights.as_array()) {
        if lambda == 0.0 {
            continue;
        }
        let wt = term.scale(lambda);
        total = Some(match total {
            Some(acc) => acc.add(wt),
            None => wt,
        });
    }
    let total = total.expect("validated weights have a positive entry");
    let report = LossReport {
        bpp: pass.coded_bits / pixels as f64,
        rate: rate.item().to_f64c(),
        spatial: spatial.item().to_f64c(),
        frequency: frequency.item().to_f64c(),
        noise: noise.item().to_f64c(),
        total: total.item().to_f64c(),
    };
    Ok(ImageLoss { total, report })
}
