//! Log-gamma, digamma, and trigamma.
//!
//! All three use the same scheme: push the argument above a cutoff with the
//! corresponding recurrence, then evaluate an asymptotic (Stirling-family)
//! series. With cutoff 10 the truncation error of each series is below
//! 1e-13, comfortably inside the exported accuracy targets (1e-10 absolute
//! for `lgamma`, 1e-9 for `digamma`) across `[1e-3, 1e4]`.

use crate::error::{Error, Result};

const CUTOFF: f64 = 10.0;
const HALF_LN_TWO_PI: f64 = 0.918_938_533_204_672_8;

/// Natural log of the gamma function for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("lgamma", format!("requires x > 0, got {x}")));
    }
    let mut shift = 0.0;
    let mut z = x;
    while z < CUTOFF {
        shift += z.ln();
        z += 1.0;
    }
    // Stirling series: (z - 1/2) ln z - z + ln(2*pi)/2 + sum B_{2n}/(2n(2n-1) z^{2n-1})
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2 * (1.0 / 1260.0 + inv2 * (-1.0 / 1680.0 + inv2 * (1.0 / 1188.0)))));
    Ok((z - 0.5) * z.ln() - z + HALF_LN_TWO_PI + series - shift)
}

/// Digamma (psi) function for `x > 0`: derivative of `lgamma`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("digamma", format!("requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut z = x;
    // psi(z) = psi(z + 1) - 1/z
    while z < CUTOFF {
        acc -= 1.0 / z;
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 120.0
                    + inv2 * (1.0 / 252.0 + inv2 * (-1.0 / 240.0 + inv2 * (1.0 / 132.0)))));
    Ok(acc + z.ln() - 0.5 * inv - series)
}

/// Trigamma function for `x > 0`: derivative of `digamma`.
///
/// Needed for the analytic gradients of the digamma-based losses.
pub fn trigamma(x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::domain("trigamma", format!("requires x > 0, got {x}")));
    }
    let mut acc = 0.0;
    let mut z = x;
    // psi'(z) = psi'(z + 1) + 1/z^2
    while z < CUTOFF {
        acc += 1.0 / (z * z);
        z += 1.0;
    }
    let inv = 1.0 / z;
    let inv2 = inv * inv;
    let series = inv
        * (1.0
            + inv * (0.5
                + inv * (1.0 / 6.0
                    + inv2
                        * (-1.0 / 30.0
                            + inv2 * (1.0 / 42.0 + inv2 * (-1.0 / 30.0 + inv2 * (5.0 / 66.0)))))));
    Ok(acc + series)
}
