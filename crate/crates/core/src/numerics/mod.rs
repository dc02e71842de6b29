//! Numerical substrate: window tiling, 2-D FFT, spectra, and gradient checks.

mod fft;
mod gradcheck;
mod window;

pub use fft::{fft2, fft2_complex, ifft2, spectrum, Fft2Plan, Spectrum, ZERO_AMPLITUDE};
pub use gradcheck::{grad_check, grad_check_at, spread_coordinates, GradCheckReport};
pub use window::{window_merge, window_partition, PadInfo, WindowSpec};
