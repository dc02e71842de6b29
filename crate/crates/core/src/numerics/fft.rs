use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Scalar;
use crate::tensor::{ComplexTensor, Tensor};

/// Row and column plans for repeated 2-D transforms of one plane size.
pub struct Fft2Plan<T: Scalar> {
    height: usize,
    width: usize,
    row_fwd: Arc<dyn Fft<T>>,
    row_inv: Arc<dyn Fft<T>>,
    col_fwd: Arc<dyn Fft<T>>,
    col_inv: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Fft2Plan<T> {
    pub fn new(height: usize, width: usize) -> Self {
        assert!(height >= 1 && width >= 1, "fft plane must be non-empty");
        let mut planner = FftPlanner::new();
        Fft2Plan {
            height,
            width,
            row_fwd: planner.plan_fft_forward(width),
            row_inv: planner.plan_fft_inverse(width),
            col_fwd: planner.plan_fft_forward(height),
            col_inv: planner.plan_fft_inverse(height),
        }
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    /// In-place unnormalized forward transform of one row-major plane.
    pub fn forward(&self, plane: &mut [Complex<T>]) {
        self.apply(plane, false);
    }

    /// In-place inverse transform of one plane, scaled by `1/(H·W)`.
    pub fn inverse(&self, plane: &mut [Complex<T>]) {
        self.apply(plane, true);
        let s = T::one() / T::from_usize(self.plane_len()).unwrap();
        plane.iter_mut().for_each(|v| *v *= s);
    }

    fn apply(&self, plane: &mut [Complex<T>], inverse: bool) {
        let (h, w) = (self.height, self.width);
        assert_eq!(plane.len(), h * w);
        let (row, col) = if inverse { (&self.row_inv, &self.col_inv) } else { (&self.row_fwd, &self.col_fwd) };
        if w > 1 {
            row.process(plane);
        }
        if h > 1 {
            let mut column = vec![Complex::new(T::zero(), T::zero()); h];
            for x in 0..w {
                for y in 0..h {
                    column[y] = plane[y * w + x];
                }
                col.process(&mut column);
                for y in 0..h {
                    plane[y * w + x] = column[y];
                }
            }
        }
    }
}

fn last_two<E: Copy>(t: &Tensor<E>) -> (usize, usize) {
    let s = t.shape();
    assert!(s.len() >= 2, "fft2 needs at least two dimensions, got {s:?}");
    (s[s.len() - 2], s[s.len() - 1])
}

/// Unnormalized 2-D DFT over the trailing two axes of a real tensor.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> ComplexTensor<T> {
    fft2_complex(&ComplexTensor::from_real(x))
}

pub fn fft2_complex<T: Scalar>(x: &ComplexTensor<T>) -> ComplexTensor<T> {
    let (h, w) = last_two(x);
    let plan = Fft2Plan::new(h, w);
    let mut out = x.clone();
    out.data_mut().chunks_mut(h * w).for_each(|p| plan.forward(p));
    out
}

/// Inverse of [`fft2`] (carries the `1/(H·W)` factor).
pub fn ifft2<T: Scalar>(x: &ComplexTensor<T>) -> ComplexTensor<T> {
    let (h, w) = last_two(x);
    let plan = Fft2Plan::new(h, w);
    let mut out = x.clone();
    out.data_mut().chunks_mut(h * w).for_each(|p| plan.inverse(p));
    out
}

/// Amplitude and phase of a 2-D spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum<T: Scalar> {
    pub amplitude: Tensor<T>,
    pub phase: Tensor<T>,
}

/// Bins whose magnitude falls below this are treated as exactly zero (phase 0).
pub const ZERO_AMPLITUDE: f64 = 1e-8;

pub(crate) fn phase_of<T: Scalar>(c: Complex<T>) -> T {
    if c.norm().to_f64c() < ZERO_AMPLITUDE {
        return T::zero();
    }
    let p = c.im.atan2(c.re);
    // atan2 returns -pi for (negative, -0.0); fold onto the half-open range (-pi, pi].
    let pi = T::from_f64c(std::f64::consts::PI);
    if p <= -pi {
        pi
    } else {
        p
    }
}

pub fn spectrum<T: Scalar>(x: &Tensor<T>) -> Spectrum<T> {
    let f = fft2(x);
    Spectrum { amplitude: f.map(|c| c.norm()), phase: f.map(phase_of) }
}
