//! Log-gamma and friends, tuned for negative-binomial likelihood sums.

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Below this argument the Stirling series is not used directly.
const STIRLING_MIN: f64 = 10.0;

/// Stirling correction `lnΓ(x) - [(x-½)ln x - x + ½ln 2π]` for `x >= 10`.
#[inline]
fn stirling_tail(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    inv * (1.0 / 12.0
        + inv2
            * (-1.0 / 360.0
                + inv2
                    * (1.0 / 1260.0
                        + inv2
                            * (-1.0 / 1680.0
                                + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360_360.0 + inv2 * (1.0 / 156.0)))))))
}

/// Natural log of the gamma function for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x.is_nan() || x <= 0.0 {
        return f64::NAN;
    }
    if x.is_infinite() {
        return f64::INFINITY;
    }
    if x >= STIRLING_MIN {
        return ln_gamma_large(x);
    }
    // Shift up: Γ(x) = Γ(x+n) / (x (x+1) ... (x+n-1)).
    let mut shifted = x;
    let mut prod = 1.0;
    while shifted < STIRLING_MIN {
        prod *= shifted;
        shifted += 1.0;
    }
    ln_gamma_large(shifted) - prod.ln()
}

#[inline]
pub(crate) fn ln_gamma_large(x: f64) -> f64 {
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + stirling_tail(x)
}

/// `lnΓ(r + y) - lnΓ(r)` for `r > 0` and integer `y >= 0`, without the
/// cancellation that the naive difference suffers when `r` is large.
pub fn ln_rising(r: f64, y: u64) -> f64 {
    if y == 0 {
        return 0.0;
    }
    let yf = y as f64;
    if y <= 24 {
        let mut acc = 0.0;
        let mut prod = 1.0;
        for k in 0..y {
            prod *= r + k as f64;
            // keep the running product well inside f64 range
            if prod > 1e250 {
                acc += prod.ln();
                prod = 1.0;
            }
        }
        return acc + prod.ln();
    }
    if r >= STIRLING_MIN {
        // (r+y-½)ln(r+y) - (r-½)ln r - y, rearranged around ln1p(y/r)
        let s = r + yf;
        return (r - 0.5) * (yf / r).ln_1p() + yf * s.ln() - yf + stirling_tail(s) - stirling_tail(r);
    }
    ln_gamma(r + yf) - ln_gamma(r)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn log1p_exp(x: f64) -> f64 {
    if x > 36.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Log-density of a normal distribution.
#[inline]
pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - HALF_LN_2PI
}
