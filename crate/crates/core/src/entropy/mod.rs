//! Quantization, rate models and the entropy coder for the latents.
//!
//! The main latent is split into ten channel slices coded in order, each with a
//! discretised Gaussian whose mean and scale come from the hyper features and
//! the slices already decoded. The hyper latent uses a per-channel
//! non-parametric prior.

mod bitstream;
mod coder;
mod context;
mod gaussian;

use rand::Rng;

pub use bitstream::{Bitstream, Header, FORMAT_VERSION, MAGIC};
pub use coder::{decode_stream, encode_stream, FactorizedModel, FreqTable, GaussianModel, SymbolModel, ALPHABET, PROB_BITS, TAIL};
pub use context::{SliceContext, SliceParams, CONTEXT_WIDTH};
pub use gaussian::{gaussian_bits, gaussian_mass, BIT_FLOOR, PROB_FLOOR};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Lower bound applied to every predicted scale.
pub const SIGMA_MIN: f64 = 0.04;

/// Number of bins of the factorized prior, covering the integers in `[-TAIL, TAIL]`.
pub const FACTORIZED_BINS: usize = 2 * TAIL as usize + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantMode {
    Round,
    /// Additive uniform noise in `[-0.5, 0.5)`.
    Noise,
    /// Rounded forward value, identity gradient.
    Ste,
}

/// Quantizes `v - offset` and adds the offset back. Rounding is half away from zero.
pub fn quantize<T: Scalar, R: Rng>(v: &Tensor<T>, mode: QuantMode, offset: Option<&Tensor<T>>, rng: &mut R) -> Tensor<T> {
    let centered = match offset {
        Some(o) => v.sub(o),
        None => v.clone(),
    };
    let q = match mode {
        QuantMode::Round | QuantMode::Ste => centered.map(|x| x.round()),
        QuantMode::Noise => centered.map(|x| x + T::from_f64c(rng.random_range(-0.5..0.5))),
    };
    match offset {
        Some(o) => q.add(o),
        None => q,
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Differentiable [`quantize`]; `Round` behaves like `Ste` here.
    pub fn quantize<R: Rng>(&self, mode: QuantMode, offset: Option<Var<'t, T>>, rng: &mut R) -> Var<'t, T> {
        let centered = match offset {
            Some(o) => self.sub(o),
            None => *self,
        };
        let q = match mode {
            QuantMode::Round | QuantMode::Ste => centered.round_ste(),
            QuantMode::Noise => {
                let shape = centered.shape();
                let u = Tensor::from_fn(&shape, |_| T::from_f64c(rng.random_range(-0.5..0.5)));
                centered.add_const(&u)
            }
        };
        match offset {
            Some(o) => q.add(o),
            None => q,
        }
    }
}

/// Channel counts of the ten latent slices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceLayout {
    sizes: Vec<usize>,
}

const SLICE_PATTERN: [usize; 10] = [1, 1, 2, 2, 2, 2, 3, 3, 4, 4];

pub fn slice_layout(m: usize) -> Result<SliceLayout> {
    if m == 0 || !m.is_multiple_of(24) {
        return Err(Error::Config(format!("latent channels {m} must be a positive multiple of 24")));
    }
    Ok(SliceLayout { sizes: SLICE_PATTERN.iter().map(|p| p * m / 24).collect() })
}

impl SliceLayout {
    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// First channel of slice `i`.
    pub fn start(&self, i: usize) -> usize {
        self.sizes[..i].iter().sum()
    }

    /// Splits a `[M, H, W]` tensor into its slices.
    pub fn split<T: Scalar>(&self, y: &Tensor<T>) -> Vec<Tensor<T>> {
        (0..self.len()).map(|i| y.narrow_channels(self.start(i), self.sizes[i])).collect()
    }
}

/// Mean and scale of a discretised Gaussian per element.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams<T> {
    pub mu: Tensor<T>,
    pub sigma: Tensor<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mu: Tensor<T>, sigma: Tensor<T>) -> Result<Self> {
        if !mu.same_shape(&sigma) {
            return Err(contract(format!("mu {:?} and sigma {:?} differ in shape", mu.shape(), sigma.shape())));
        }
        let floor = T::from_f64c(SIGMA_MIN);
        Ok(GaussianParams { mu, sigma: sigma.map(|s| s.max(floor)) })
    }
}

/// Bits to code `values` (mean-offset integer grid) under `p`.
pub fn rate_estimate<T: Scalar>(values: &Tensor<T>, p: &GaussianParams<T>) -> f64 {
    assert!(values.same_shape(&p.mu), "rate_estimate: value and parameter shapes differ");
    values.data().iter().zip(p.mu.data()).zip(p.sigma.data()).map(|((&v, &m), &s)| gaussian_bits((v - m).to_f64c(), s.to_f64c()).0).sum()
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Total bits of `self` under elementwise discretised Gaussians `(mu, sigma)`.
    pub fn gaussian_bits(&self, mu: Var<'t, T>, sigma: Var<'t, T>) -> Var<'t, T> {
        let (v, m, s) = (self.value(), mu.value(), sigma.value());
        assert!(v.same_shape(&m) && v.same_shape(&s), "gaussian_bits: shape mismatch");
        let n = v.len();
        let (mut dr, mut ds) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut total = 0.0;
        for i in 0..n {
            let (b, gr, gs) = gaussian_bits((v.data()[i] - m.data()[i]).to_f64c(), s.data()[i].to_f64c());
            total += b;
            dr.push(gr);
            ds.push(gs);
        }
        let shape = v.shape().to_vec();
        self.tape().op(Tensor::scalar(T::from_f64c(total)), &[*self, mu, sigma], move |g| {
            let g = g.data()[0].to_f64c();
            let dv = Tensor::from_parts(shape.clone(), dr.iter().map(|&d| T::from_f64c(g * d)).collect());
            let dm = dv.map(|x| -x);
            let dsig = Tensor::from_parts(shape.clone(), ds.iter().map(|&d| T::from_f64c(g * d)).collect());
            vec![Some(dv), Some(dm), Some(dsig)]
        })
    }

    /// Total bits of `self` (`[C, H, W]`) under per-channel factorized priors given by
    /// `logits` (`[C, FACTORIZED_BINS]`). Off-grid values interpolate the two nearest masses.
    pub fn factorized_bits(&self, logits: Var<'t, T>) -> Var<'t, T> {
        let (v, l) = (self.value(), logits.value());
        let (c, h, w) = v.dims3();
        assert_eq!(l.shape(), &[c, FACTORIZED_BINS], "factorized logits shape");
        let probs = softmax_rows(&l.to_f64_vec(), FACTORIZED_BINS);
        let plane = h * w;
        let mut total = 0.0;
        let mut dv = vec![0.0; v.len()];
        let mut dp = vec![0.0; probs.len()];
        for ch in 0..c {
            let p = &probs[ch * FACTORIZED_BINS..(ch + 1) * FACTORIZED_BINS];
            for i in ch * plane..(ch + 1) * plane {
                let t = v.data()[i].to_f64c() + TAIL as f64;
                if !(0.0..=2.0 * TAIL as f64).contains(&t) {
                    total += -PROB_FLOOR.log2();
                    continue;
                }
                let n = (t.floor() as usize).min(FACTORIZED_BINS - 2);
                let d = t - n as f64;
                let mass = (1.0 - d) * p[n] + d * p[n + 1];
                if mass <= PROB_FLOOR {
                    total += -PROB_FLOOR.log2();
                    continue;
                }
                let bits = -mass.log2();
                if bits <= BIT_FLOOR {
                    total += BIT_FLOOR;
                    continue;
                }
                total += bits;
                let gm = -1.0 / (mass * std::f64::consts::LN_2);
                dv[i] = gm * (p[n + 1] - p[n]);
                dp[ch * FACTORIZED_BINS + n] += gm * (1.0 - d);
                dp[ch * FACTORIZED_BINS + n + 1] += gm * d;
            }
        }
        let (vshape, lshape) = (v.shape().to_vec(), l.shape().to_vec());
        self.tape().op(Tensor::scalar(T::from_f64c(total)), &[*self, logits], move |g| {
            let g = g.data()[0].to_f64c();
            let gv = Tensor::from_parts(vshape.clone(), dv.iter().map(|&d| T::from_f64c(g * d)).collect());
            let mut gl = Vec::with_capacity(dp.len());
            for (row_p, row_g) in probs.chunks(FACTORIZED_BINS).zip(dp.chunks(FACTORIZED_BINS)) {
                let inner: f64 = row_p.iter().zip(row_g).map(|(p, g)| p * g).sum();
                gl.extend(row_p.iter().zip(row_g).map(|(p, gp)| T::from_f64c(g * p * (gp - inner))));
            }
            vec![Some(gv), Some(Tensor::from_parts(lshape.clone(), gl))]
        })
    }
}

pub(crate) fn softmax_rows(logits: &[f64], width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(width) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    out
}

/// Per-channel probability tables of the factorized prior, `[C][FACTORIZED_BINS]`.
pub fn factorized_probs<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    softmax_rows(&logits.to_f64_vec(), FACTORIZED_BINS).chunks(FACTORIZED_BINS).map(|r| r.to_vec()).collect()
}

/// Bits of the integer tensor `z` (`[C, H, W]`) under the factorized prior.
pub fn factorized_bits<T: Scalar>(z: &Tensor<T>, logits: &Tensor<T>) -> f64 {
    let tables = factorized_probs(logits);
    let (c, h, w) = z.dims3();
    assert_eq!(tables.len(), c, "factorized prior channel count");
    let mut total = 0.0;
    for (ch, p) in tables.iter().enumerate() {
        for &v in &z.data()[ch * h * w..(ch + 1) * h * w] {
            let k = v.to_f64c().round() as i64;
            let mass = if k.abs() <= TAIL as i64 { p[(k + TAIL as i64) as usize] } else { 0.0 };
            total += (-mass.max(PROB_FLOOR).log2()).max(BIT_FLOOR);
        }
    }
    total
}

#[cfg(test)]
mod tests;
