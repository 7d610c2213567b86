//! Convergence bound, expected energy objective and precision optimizer.
//!
//! The variance aggregate
//!
//! ```text
//! v(n) = Σσ_k²/N² + d 2^(-2n) (1 + 2 I G₂ / K) + 4 (I-1)² G₂ + 4 (N-K) / (K (N-1)) I² G₂
//! ```
//!
//! sets the rounds needed to reach accuracy `ε`, `T = max(L v / (2ε) - γ, 1)`,
//! and the expected energy is `f_E(n) = (K T / N) Σ_k (E_UL,k(n) + I E_C(n))`.
//! `G₂` is the bound on the expected squared gradient norm; see
//! [`GradientBound`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chipenergy::{compute_energy, compute_energy_relaxed, ChipProfile};
use crate::error::{Error, Result};
use crate::qnn::NetworkArch;
use crate::quantizer::Precision;
use crate::radio::{achievable_rate, channel_gain, path_gain, place_devices, RadioParams};
use crate::stream::{substream, tag};

/// How the configured gradient bound `G` enters the variance aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBound {
    /// `G` bounds `E‖g‖²`, so it enters linearly.
    #[default]
    SquaredNorm,
    /// `G` bounds `‖g‖`, so it enters as `G²`.
    Norm,
}

impl GradientBound {
    pub fn squared(self, g: f64) -> f64 {
        match self {
            GradientBound::SquaredNorm => g,
            GradientBound::Norm => g * g,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningParams {
    /// Smoothness `L`.
    pub lipschitz: f64,
    /// Strong convexity `μ`.
    pub strong_convexity: f64,
    pub grad_bound: f64,
    #[serde(default)]
    pub gradient_bound: GradientBound,
    /// Per-device gradient noise bounds `σ_k`; one entry per device.
    pub sigma: Vec<f64>,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub local_steps: usize,
    pub devices_per_round: usize,
    /// Reject parameters whose initial step violates `L < 2η₀/(2η₀²+1)`.
    #[serde(default)]
    pub enforce_step_condition: bool,
}

/// The step-size condition evaluated at `η₀ = β/γ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCondition {
    pub eta0: f64,
    pub lipschitz: f64,
    pub limit: f64,
    pub holds: bool,
}

impl LearningParams {
    pub fn devices(&self) -> usize {
        self.sigma.len()
    }

    pub fn grad_sq(&self) -> f64 {
        self.gradient_bound.squared(self.grad_bound)
    }

    pub fn step_condition(&self) -> StepCondition {
        let eta0 = self.beta / self.gamma;
        let limit = 2.0 * eta0 / (2.0 * eta0 * eta0 + 1.0);
        StepCondition {
            eta0,
            lipschitz: self.lipschitz,
            limit,
            holds: self.lipschitz < limit,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lipschitz", self.lipschitz),
            ("strong_convexity", self.strong_convexity),
            ("gamma", self.gamma),
            ("epsilon", self.epsilon),
        ];
        for (name, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::infeasible(format!("{name} > 0 (got {value})")));
            }
        }
        if !(self.grad_bound.is_finite() && self.grad_bound >= 0.0) {
            return Err(Error::infeasible(format!(
                "grad_bound >= 0 (got {})",
                self.grad_bound
            )));
        }
        if let Some(s) = self.sigma.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::infeasible(format!("sigma >= 0 (got {s})")));
        }
        if !(self.beta.is_finite() && self.beta > 1.0 / self.strong_convexity) {
            return Err(Error::infeasible(format!(
                "beta > 1/strong_convexity (beta = {}, strong_convexity = {})",
                self.beta, self.strong_convexity
            )));
        }
        if self.local_steps == 0 {
            return Err(Error::infeasible("local_steps >= 1"));
        }
        let n = self.devices();
        if self.devices_per_round == 0 || self.devices_per_round > n {
            return Err(Error::infeasible(format!(
                "1 <= devices_per_round <= devices (K = {}, N = {n})",
                self.devices_per_round
            )));
        }
        let step = self.step_condition();
        if self.enforce_step_condition && !step.holds {
            return Err(Error::infeasible(format!(
                "lipschitz < 2 eta0 / (2 eta0^2 + 1) with eta0 = beta/gamma = {} (L = {}, limit = {})",
                step.eta0, step.lipschitz, step.limit
            )));
        }
        Ok(())
    }
}

pub fn variance_term(params: &LearningParams, n: Precision, d: u64) -> Result<f64> {
    variance_term_relaxed(params, n.bits() as f64, d)
}

/// [`variance_term`] over a continuous bit width.
pub fn variance_term_relaxed(params: &LearningParams, bits: f64, d: u64) -> Result<f64> {
    let n = params.devices();
    if n < 2 {
        return Err(Error::domain(format!("variance term needs N >= 2, got {n}")));
    }
    let k = params.devices_per_round as f64;
    let nf = n as f64;
    let i = params.local_steps as f64;
    let g2 = params.grad_sq();
    let noise = params.sigma.iter().map(|s| s * s).sum::<f64>() / (nf * nf);
    let quant = d as f64 * (-2.0 * bits).exp2() * (1.0 + 2.0 * i * g2 / k);
    let drift = 4.0 * (i - 1.0).powi(2) * g2;
    let sampling = if params.devices_per_round == n {
        0.0
    } else {
        4.0 * (nf - k) / (k * (nf - 1.0)) * i * i * g2
    };
    Ok(noise + quant + drift + sampling)
}

/// Real-valued rounds to reach accuracy `ε`, floored at one.
pub fn rounds_to_accuracy(params: &LearningParams, v: f64) -> Result<f64> {
    params.validate()?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::domain(format!("variance term {v} must be non-negative")));
    }
    Ok((params.lipschitz * v / (2.0 * params.epsilon) - params.gamma).max(1.0))
}

/// The optimality-gap bound `(L/2) v / (t + γ)` after `t` rounds.
pub fn gap_bound(params: &LearningParams, v: f64, t: f64) -> f64 {
    params.lipschitz / 2.0 * v / (t + params.gamma)
}

/// How per-device uplink energy is averaged over channel samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UplinkAverage {
    /// Energy at the mean achievable rate, `P d n / E[r]`.
    #[default]
    ErgodicRate,
    /// Mean of per-sample energies, `P d n E[1/r]`. Heavy-tailed under Rayleigh fading.
    EnergyMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub learning: LearningParams,
    pub arch: NetworkArch,
    pub chip: ChipProfile,
    pub radio: RadioParams,
    pub channel_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub uplink_average: UplinkAverage,
    /// Values sent per uplink, when it differs from the model dimension.
    #[serde(default)]
    pub uplink_dim: Option<u64>,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.learning.validate()?;
        self.chip.validate()?;
        self.radio.validate()?;
        if self.channel_samples == 0 {
            return Err(Error::domain("channel_samples must be at least 1"));
        }
        Ok(())
    }

    pub fn payload_dim(&self) -> u64 {
        self.uplink_dim.unwrap_or(self.arch.dim())
    }

    pub fn max_bits(&self) -> u32 {
        self.chip.max_bits
    }
}

/// Channel power gains, one row of `N` devices per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSamples {
    gains: Vec<Vec<f64>>,
}

impl ChannelSamples {
    /// Independent topology and fading per sample, keyed by the scenario seed.
    pub fn draw(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let n = scenario.learning.devices();
        let radio = scenario.radio;
        let gains = (0..scenario.channel_samples as u64)
            .into_par_iter()
            .map(|m| {
                let topo = place_devices(n, &radio, &mut substream(scenario.seed, &[tag::TOPOLOGY, m]))?;
                let mut fade = substream(scenario.seed, &[tag::FADING, m]);
                topo.distances()
                    .into_iter()
                    .map(|r| channel_gain(r, &radio, &mut fade))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { gains })
    }

    /// A single fixed draw.
    pub fn frozen(gains: Vec<f64>) -> Self {
        Self { gains: vec![gains] }
    }

    pub fn from_rows(gains: Vec<Vec<f64>>) -> Self {
        Self { gains }
    }

    /// Gains without fading at the given distances.
    pub fn at_distances(distances: &[f64], radio: &RadioParams) -> Result<Self> {
        let row = distances
            .iter()
            .map(|&r| path_gain(r, radio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::frozen(row))
    }

    pub fn samples(&self) -> usize {
        self.gains.len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.gains
    }
}

/// One point of the energy curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyPoint {
    pub bits: u32,
    pub f_e: f64,
    pub rounds: f64,
    pub v: f64,
    pub e_compute_per_iter: f64,
    /// Mean over devices of the expected uplink energy per round.
    pub e_uplink_mean: f64,
}

/// `f_E` with the channel expectation precomputed, so every precision sees
/// the same draws.
#[derive(Debug, Clone)]
pub struct EnergyModel {
    scenario: Scenario,
    /// `Σ_k` of the per-device expected inverse rate, in seconds per bit.
    inv_rate_sum: f64,
}

impl EnergyModel {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        let samples = ChannelSamples::draw(scenario)?;
        Self::with_samples(scenario, &samples)
    }

    pub fn with_samples(scenario: &Scenario, samples: &ChannelSamples) -> Result<Self> {
        scenario.validate()?;
        let n = scenario.learning.devices();
        if samples.samples() == 0 {
            return Err(Error::domain("no channel samples"));
        }
        if let Some(row) = samples.rows().iter().find(|r| r.len() != n) {
            return Err(Error::shape(format!(
                "channel sample has {} devices, scenario has {n}",
                row.len()
            )));
        }
        let m = samples.samples() as f64;
        let mut inv_rate_sum = 0.0;
        for k in 0..n {
            let mut acc = 0.0;
            for row in samples.rows() {
                let r = achievable_rate(row[k], &scenario.radio);
                if !(r.is_finite() && r > 0.0) {
                    return Err(Error::domain(format!("device {k} has rate {r}")));
                }
                acc += match scenario.uplink_average {
                    UplinkAverage::ErgodicRate => r,
                    UplinkAverage::EnergyMean => 1.0 / r,
                };
            }
            inv_rate_sum += match scenario.uplink_average {
                UplinkAverage::ErgodicRate => m / acc,
                UplinkAverage::EnergyMean => acc / m,
            };
        }
        Ok(Self {
            scenario: scenario.clone(),
            inv_rate_sum,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    fn uplink_sum(&self, bits: f64) -> f64 {
        self.scenario.radio.tx_power_w * self.scenario.payload_dim() as f64 * bits * self.inv_rate_sum
    }

    pub fn evaluate(&self, n: Precision) -> Result<EnergyPoint> {
        let s = &self.scenario;
        let l = &s.learning;
        let v = variance_term(l, n, s.arch.dim())?;
        let rounds = rounds_to_accuracy(l, v)?;
        let e_c = compute_energy(n, &s.arch, &s.chip)?.total;
        let nf = l.devices() as f64;
        let uplink = self.uplink_sum(n.bits() as f64);
        let per_round = uplink + nf * l.local_steps as f64 * e_c;
        Ok(EnergyPoint {
            bits: n.bits(),
            f_e: l.devices_per_round as f64 * rounds / nf * per_round,
            rounds,
            v,
            e_compute_per_iter: e_c,
            e_uplink_mean: uplink / nf,
        })
    }

    /// `f_E` on the continuous relaxation of the bit width.
    pub fn evaluate_relaxed(&self, bits: f64) -> Result<f64> {
        let s = &self.scenario;
        let l = &s.learning;
        let v = variance_term_relaxed(l, bits, s.arch.dim())?;
        let rounds = rounds_to_accuracy(l, v)?;
        let e_c = compute_energy_relaxed(bits, &s.arch, &s.chip).total;
        let nf = l.devices() as f64;
        let per_round = self.uplink_sum(bits) + nf * l.local_steps as f64 * e_c;
        Ok(l.devices_per_round as f64 * rounds / nf * per_round)
    }

    /// `f_E` at every precision `1..=n_max`.
    pub fn curve(&self) -> Result<Vec<EnergyPoint>> {
        Precision::all(self.scenario.max_bits())?
            .into_par_iter()
            .map(|n| self.evaluate(n))
            .collect()
    }
}

/// Expected total energy at precision `n`, drawing channels from the scenario seed.
pub fn expected_total_energy(n: Precision, scenario: &Scenario) -> Result<f64> {
    Ok(EnergyModel::new(scenario)?.evaluate(n)?.f_e)
}

/// Minimizes `f` on `[lo, hi]` by golden-section search.
pub fn golden_section<F>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = f(c)?;
    let mut fd = f(d)?;
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = f(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = f(d)?;
        }
    }
    Ok((a + b) / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionOptimum {
    pub n_star: u32,
    pub curve: Vec<EnergyPoint>,
    /// Minimizer of the continuous relaxation.
    pub relaxed_bits: f64,
    /// Best of the integers next to `relaxed_bits`.
    pub line_search_bits: u32,
}

impl PrecisionOptimum {
    pub fn best(&self) -> &EnergyPoint {
        &self.curve[self.n_star as usize - 1]
    }

    pub fn at(&self, bits: u32) -> Option<&EnergyPoint> {
        self.curve.get(bits as usize - 1)
    }

    pub fn line_search_agrees(&self) -> bool {
        self.line_search_bits == self.n_star
    }
}

/// Line search on the relaxation plus an exhaustive integer scan; the scan decides.
pub fn optimize_with(model: &EnergyModel) -> Result<PrecisionOptimum> {
    let max_bits = model.scenario().max_bits();
    let curve = model.curve()?;
    let mut n_star = 1;
    for p in &curve {
        if p.f_e < curve[n_star as usize - 1].f_e {
            n_star = p.bits;
        }
    }
    let relaxed_bits = if max_bits == 1 {
        1.0
    } else {
        golden_section(|b| model.evaluate_relaxed(b), 1.0, max_bits as f64, 1e-6)?
    };
    let rounded = (relaxed_bits.round() as u32).clamp(1, max_bits);
    let mut line_search_bits = rounded;
    for cand in [rounded.saturating_sub(1), rounded + 1] {
        if (1..=max_bits).contains(&cand) {
            let better = curve[cand as usize - 1].f_e < curve[line_search_bits as usize - 1].f_e;
            let tie_lower = curve[cand as usize - 1].f_e == curve[line_search_bits as usize - 1].f_e
                && cand < line_search_bits;
            if better || tie_lower {
                line_search_bits = cand;
            }
        }
    }
    Ok(PrecisionOptimum {
        n_star,
        curve,
        relaxed_bits,
        line_search_bits,
    })
}

pub fn optimize_precision(scenario: &Scenario) -> Result<PrecisionOptimum> {
    optimize_with(&EnergyModel::new(scenario)?)
}
