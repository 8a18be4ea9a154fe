//! Scalar math that works with and without `std`.

use num_traits::Float;

#[inline]
pub fn sqrt(x: f64) -> f64 {
    Float::sqrt(x)
}

#[inline]
pub fn exp(x: f64) -> f64 {
    Float::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    Float::ln(x)
}

#[inline]
pub fn ln_1p(x: f64) -> f64 {
    Float::ln_1p(x)
}

#[inline]
pub fn log2(x: f64) -> f64 {
    Float::log2(x)
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    Float::tanh(x)
}

#[inline]
pub fn sin_cos(x: f64) -> (f64, f64) {
    Float::sin_cos(x)
}

#[inline]
pub fn ceil(x: f64) -> f64 {
    Float::ceil(x)
}

#[inline]
pub fn round(x: f64) -> f64 {
    Float::round(x)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + ln_1p(exp(-x))
    } else {
        ln_1p(exp(x))
    }
}

/// Logistic function, the derivative of [`softplus`].
#[cfg(test)]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn exp_m1(x: f64) -> f64 {
    Float::exp_m1(x)
}
