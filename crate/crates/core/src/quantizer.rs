//! Stochastic fixed-point quantization.
//!
//! A precision level of `n` bits spends one bit on the integer part and
//! `n - 1` on the fraction, so the grid step is `κ = 2^(1-n)` and values are
//! stored as multiples of `κ`. A value between two grid points rounds up with
//! probability equal to its fractional distance from the lower point, which
//! makes the quantizer unbiased with per-element variance at most `κ²/4`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported precision: the `κ` grid must stay exact in an `f64`.
pub const MAX_SUPPORTED_BITS: u32 = 52;

/// The conventional full-precision width.
pub const DEFAULT_MAX_BITS: u32 = 32;

/// A bit width `n` together with the ceiling `n_max` it was validated against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Precision {
    bits: u32,
    max_bits: u32,
}

impl Precision {
    pub fn new(bits: u32, max_bits: u32) -> Result<Self> {
        if max_bits == 0 || max_bits > MAX_SUPPORTED_BITS {
            return Err(Error::domain(format!(
                "n_max = {max_bits} outside 1..={MAX_SUPPORTED_BITS}"
            )));
        }
        if bits == 0 || bits > max_bits {
            return Err(Error::domain(format!(
                "precision n = {bits} outside 1..={max_bits}"
            )));
        }
        Ok(Self { bits, max_bits })
    }

    /// Full precision, `n = n_max`.
    pub fn full(max_bits: u32) -> Result<Self> {
        Self::new(max_bits, max_bits)
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn max_bits(self) -> u32 {
        self.max_bits
    }

    /// Grid step `κ = 2^(1-n)`.
    pub fn step(self) -> f64 {
        step(self)
    }

    /// Every precision level from 1 to `max_bits`.
    pub fn all(max_bits: u32) -> Result<Vec<Self>> {
        (1..=max_bits).map(|b| Self::new(b, max_bits)).collect()
    }
}

/// Grid step `κ = 2^(1-n)`; exact because it is a power of two.
pub fn step(n: Precision) -> f64 {
    2f64.powi(1 - n.bits as i32)
}

/// Projects onto `[-1, 1]`.
pub fn clip_unit(w: f64) -> Result<f64> {
    if !w.is_finite() {
        return Err(Error::domain(format!("cannot clip non-finite value {w}")));
    }
    Ok(w.clamp(-1.0, 1.0))
}

/// Stochastically rounds `w ∈ [-1, 1]` onto the `κ` grid using one uniform draw.
///
/// `w = 1` has no representable upper neighbour and maps to `1 - κ`.
pub fn quantize_scalar<R: Rng + ?Sized>(w: f64, n: Precision, rng: &mut R) -> Result<f64> {
    if !(-1.0..=1.0).contains(&w) {
        return Err(Error::domain(format!(
            "quantizer input {w} outside [-1, 1]; clip first"
        )));
    }
    let u: f64 = rng.random();
    Ok(round_with(w, step(n), u))
}

#[inline]
pub(crate) fn round_with(w: f64, kappa: f64, u: f64) -> f64 {
    if w == 1.0 {
        return 1.0 - kappa;
    }
    let lower = (w / kappa).floor() * kappa;
    let frac = (w - lower) / kappa;
    if u < frac {
        lower + kappa
    } else {
        lower
    }
}

/// A vector whose entries are multiples of `κ` inside `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedVector {
    values: Vec<f64>,
    precision: Precision,
}

impl QuantizedVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Elementwise [`quantize_scalar`], one independent draw per element in order.
pub fn quantize_vector<R: Rng + ?Sized>(
    w: &[f64],
    n: Precision,
    rng: &mut R,
) -> Result<QuantizedVector> {
    let kappa = step(n);
    let mut values = Vec::with_capacity(w.len());
    for (i, &x) in w.iter().enumerate() {
        if !(-1.0..=1.0).contains(&x) {
            return Err(Error::domain(format!(
                "element {i} = {x} outside [-1, 1]; clip first"
            )));
        }
        values.push(round_with(x, kappa, rng.random()));
    }
    Ok(QuantizedVector {
        values,
        precision: n,
    })
}

/// Bias and mean-squared-error bound of [`quantize_vector`] on a `d`-vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentBounds {
    pub bias: f64,
    pub var_bound: f64,
}

pub fn moment_bounds(n: Precision, d: u64) -> MomentBounds {
    MomentBounds {
        bias: 0.0,
        var_bound: d as f64 * 2f64.powi(-2 * n.bits as i32),
    }
}
