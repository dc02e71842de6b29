use std::f64::consts::{FRAC_1_SQRT_2, LN_2};

/// Smallest probability mass a symbol may be assigned by the rate model.
pub const PROB_FLOOR: f64 = 1e-9;
/// Smallest cost of one symbol, in bits.
pub const BIT_FLOOR: f64 = 1.0 / 65536.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal CDF, accurate in the lower tail.
fn phi_lower(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn density(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Mass of `[r - 1/2, r + 1/2]` under `N(0, sigma²)`.
///
/// Evaluated on `-|r|` so both CDF terms come from the accurate lower tail.
pub fn gaussian_mass(r: f64, sigma: f64) -> f64 {
    let a = r.abs();
    let upper = (0.5 - a) / sigma;
    let lower = (-0.5 - a) / sigma;
    if upper > 0.0 {
        1.0 - phi_lower(-upper) - phi_lower(lower)
    } else {
        phi_lower(upper) - phi_lower(lower)
    }
}

/// Bits for residual `r` and their derivatives with respect to `r` and `sigma`.
pub fn gaussian_bits(r: f64, sigma: f64) -> (f64, f64, f64) {
    let p = gaussian_mass(r, sigma);
    if p <= PROB_FLOOR {
        return (-PROB_FLOOR.log2(), 0.0, 0.0);
    }
    let bits = -p.log2();
    if bits <= BIT_FLOOR {
        return (BIT_FLOOR, 0.0, 0.0);
    }
    let u = (r + 0.5) / sigma;
    let l = (r - 0.5) / sigma;
    let (du, dl) = (density(u), density(l));
    let dp_dr = (du - dl) / sigma;
    let dp_ds = (dl * l - du * u) / sigma;
    let k = -1.0 / (p * LN_2);
    (bits, k * dp_dr, k * dp_ds)
}
