//! Uplink radio model: device placement, Rayleigh-faded path loss, OFDMA
//! rate `r = B log2(1 + P h / (N0 B))`, and the time and energy needed to
//! upload `d` values at `n` bits each.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::Precision;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadioParams {
    pub tx_power_w: f64,
    pub bandwidth_hz: f64,
    pub noise_psd_w_per_hz: f64,
    pub area_side_m: f64,
    pub pathloss_exponent: f64,
}

impl RadioParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("tx_power_w", self.tx_power_w),
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_psd_w_per_hz", self.noise_psd_w_per_hz),
            ("area_side_m", self.area_side_m),
            ("pathloss_exponent", self.pathloss_exponent),
        ];
        for (name, value) in fields {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::domain(format!("{name} = {value} must be positive")));
            }
        }
        Ok(())
    }

    pub fn base_station(&self) -> Position {
        Position {
            x: self.area_side_m / 2.0,
            y: self.area_side_m / 2.0,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Topology {
    pub devices: Vec<Position>,
    pub base_station: Position,
}

impl Topology {
    pub fn distances(&self) -> Vec<f64> {
        self.devices
            .iter()
            .map(|p| p.distance(&self.base_station))
            .collect()
    }
}

/// Drops `n` devices uniformly on the square with the base station at its center.
pub fn place_devices<R: Rng + ?Sized>(n: usize, params: &RadioParams, rng: &mut R) -> Result<Topology> {
    if n == 0 {
        return Err(Error::domain("need at least one device"));
    }
    let side = params.area_side_m;
    let devices = (0..n)
        .map(|_| Position {
            x: rng.random::<f64>() * side,
            y: rng.random::<f64>() * side,
        })
        .collect();
    Ok(Topology {
        devices,
        base_station: params.base_station(),
    })
}

/// Deterministic part of the gain, `distance^(-exponent)` with a unit reference constant.
pub fn path_gain(distance: f64, params: &RadioParams) -> Result<f64> {
    if !(distance.is_finite() && distance > 0.0) {
        return Err(Error::domain(format!("distance {distance} must be positive")));
    }
    Ok(distance.powf(-params.pathloss_exponent))
}

/// Path gain times a unit-mean exponential power fade.
pub fn channel_gain<R: Rng + ?Sized>(distance: f64, params: &RadioParams, rng: &mut R) -> Result<f64> {
    let base = path_gain(distance, params)?;
    let fade: f64 = Exp1.sample(rng);
    Ok(base * fade)
}

/// Achievable uplink rate in bits per second.
pub fn achievable_rate(h: f64, params: &RadioParams) -> f64 {
    let snr = params.tx_power_w * h / (params.noise_psd_w_per_hz * params.bandwidth_hz);
    params.bandwidth_hz * snr.ln_1p() / std::f64::consts::LN_2
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UplinkCost {
    pub time_s: f64,
    pub energy_j: f64,
}

/// Time and energy to send `dim` values quantized to `n` bits: `T = d n / r`, `E = P T`.
pub fn uplink_energy(dim: u64, n: Precision, rate: f64, params: &RadioParams) -> Result<UplinkCost> {
    uplink_energy_relaxed(dim, n.bits() as f64, rate, params)
}

pub fn uplink_energy_relaxed(dim: u64, bits: f64, rate: f64, params: &RadioParams) -> Result<UplinkCost> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(Error::domain(format!("uplink rate {rate} must be positive")));
    }
    let time_s = dim as f64 * bits / rate;
    Ok(UplinkCost {
        time_s,
        energy_j: params.tx_power_w * time_s,
    })
}
