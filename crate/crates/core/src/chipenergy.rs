//! Energy of local training on a two-level-buffer MAC-array accelerator.
//!
//! A MAC at precision `n` costs `E_MAC(n) = A (n / n_max)^α`. A local-buffer
//! access costs one `E_MAC(n)` and a main-buffer access two. One local SGD
//! iteration over an architecture with `N_c` MACs, `N_s` weights and `O_s`
//! intermediate outputs costs
//!
//! ```text
//! E_C = E_MAC(n) N_c + 4 O_s E_MAC(n_max)
//! E_W = E_m N_s   + E_l N_c sqrt(n / (p n_max))
//! E_A = 2 E_m O_s + E_l N_c sqrt(n / (p n_max))
//! ```
//!
//! where the `sqrt` factor is the local-buffer reuse of a `√p × √p` array.
//! All energies are in joules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qnn::NetworkArch;
use crate::quantizer::Precision;

pub const PICOJOULE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChipProfile {
    /// Energy of one MAC at full precision, joules.
    pub mac_energy_j: f64,
    pub alpha: f64,
    /// Number of MAC units `p`; must be a perfect square.
    pub array_size: u64,
    pub max_bits: u32,
}

impl ChipProfile {
    pub fn new(mac_energy_j: f64, alpha: f64, array_size: u64, max_bits: u32) -> Result<Self> {
        let chip = Self {
            mac_energy_j,
            alpha,
            array_size,
            max_bits,
        };
        chip.validate()?;
        Ok(chip)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mac_energy_j.is_finite() && self.mac_energy_j > 0.0) {
            return Err(Error::domain(format!(
                "MAC energy A = {} must be positive",
                self.mac_energy_j
            )));
        }
        if !(self.alpha > 1.0 && self.alpha < 2.0) {
            return Err(Error::domain(format!(
                "alpha = {} outside (1, 2)",
                self.alpha
            )));
        }
        let side = (self.array_size as f64).sqrt().round() as u64;
        if self.array_size == 0 || side * side != self.array_size {
            return Err(Error::domain(format!(
                "MAC array size p = {} is not a positive perfect square",
                self.array_size
            )));
        }
        if self.max_bits == 0 {
            return Err(Error::domain("n_max must be at least 1"));
        }
        Ok(())
    }

    fn check(&self, n: Precision) -> Result<f64> {
        if n.bits() > self.max_bits {
            return Err(Error::domain(format!(
                "precision {} exceeds chip n_max {}",
                n.bits(),
                self.max_bits
            )));
        }
        Ok(n.bits() as f64)
    }
}

/// Compute, weight-fetch and activation-fetch energy of one local iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub e_compute: f64,
    pub e_weights: f64,
    pub e_activations: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(e_compute: f64, e_weights: f64, e_activations: f64) -> Self {
        Self {
            e_compute,
            e_weights,
            e_activations,
            total: e_compute + e_weights + e_activations,
        }
    }
}

pub fn e_mac(n: Precision, chip: &ChipProfile) -> Result<f64> {
    let bits = chip.check(n)?;
    Ok(e_mac_relaxed(bits, chip))
}

/// [`e_mac`] over a continuous bit width, for line searches.
pub fn e_mac_relaxed(bits: f64, chip: &ChipProfile) -> f64 {
    chip.mac_energy_j * (bits / chip.max_bits as f64).powf(chip.alpha)
}

pub fn compute_energy(
    n: Precision,
    arch: &NetworkArch,
    chip: &ChipProfile,
) -> Result<EnergyBreakdown> {
    let bits = chip.check(n)?;
    Ok(compute_energy_relaxed(bits, arch, chip))
}

pub fn compute_energy_relaxed(bits: f64, arch: &NetworkArch, chip: &ChipProfile) -> EnergyBreakdown {
    let mac = e_mac_relaxed(bits, chip);
    let local = mac;
    let main = 2.0 * mac;
    let n_c = arch.n_mac as f64;
    let n_s = arch.n_weights as f64;
    let o_s = arch.n_outputs as f64;
    let reuse = (bits / (chip.array_size as f64 * chip.max_bits as f64)).sqrt();

    let e_compute = mac * n_c + 4.0 * o_s * chip.mac_energy_j;
    let e_weights = main * n_s + local * n_c * reuse;
    let e_activations = 2.0 * main * o_s + local * n_c * reuse;
    EnergyBreakdown::new(e_compute, e_weights, e_activations)
}
