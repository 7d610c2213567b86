//! Flat JSON experiment configuration.
//!
//! Every field is optional in the file and falls back to the default
//! scenario: 50 devices, 30 per round, 5 local steps, 100 mW at 10 MHz over
//! -100 dBm/Hz noise, a 3.7 pJ MAC with `α = 1.25` on an 8×8 array, `n_max = 32`,
//! `ε = 0.01`, `β = 5`, `L = μ = γ = 1`, `σ_k = 1` and `G = 0.02`.

use std::path::{Path, PathBuf};

use fedq_core::analysis::{GradientBound, LearningParams, Scenario, UplinkAverage};
use fedq_core::chipenergy::{ChipProfile, PICOJOULE};
use fedq_core::fedsim::QuadraticProblem;
use fedq_core::qnn::NetworkArch;
use fedq_core::radio::{dbm_to_watts, RadioParams};
use serde::{Deserialize, Serialize};

use crate::preset::model_preset;
use crate::CliError;

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Analytic,
    Simulate,
}

/// `σ_k` for every device, or one value per device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Uniform(f64),
    PerDevice(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variable", content = "values")]
pub enum Sweep {
    #[serde(rename = "n")]
    Precision(Vec<u32>),
    #[serde(rename = "I")]
    LocalSteps(Vec<usize>),
    #[serde(rename = "d")]
    Dimension(Vec<u64>),
    #[serde(rename = "epsilon")]
    Epsilon(Vec<f64>),
    #[serde(rename = "model_preset")]
    Model(Vec<String>),
}

impl Sweep {
    pub fn len(&self) -> usize {
        match self {
            Sweep::Precision(v) => v.len(),
            Sweep::LocalSteps(v) => v.len(),
            Sweep::Dimension(v) => v.len(),
            Sweep::Epsilon(v) => v.len(),
            Sweep::Model(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variable(&self) -> &'static str {
        match self {
            Sweep::Precision(_) => "n",
            Sweep::LocalSteps(_) => "I",
            Sweep::Dimension(_) => "d",
            Sweep::Epsilon(_) => "epsilon",
            Sweep::Model(_) => "model_preset",
        }
    }
}

/// Synthetic strongly convex problem run by the simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub points_per_device: usize,
    pub dim: usize,
    pub curvature: f64,
    pub center_spread: f64,
    pub noise: f64,
    pub batch_size: usize,
    pub data_seed: u64,
    /// Independent seeded runs averaged per sweep point.
    pub runs: usize,
    /// Rounds per run; defaults to the analytic `T` rounded up.
    pub rounds: Option<usize>,
    /// Replace `L`, `μ`, `G` and `σ_k` with values measured from the data.
    pub measure_constants: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            points_per_device: 40,
            dim: 10,
            curvature: 0.5,
            center_spread: 0.3,
            noise: 0.2,
            batch_size: 2,
            data_seed: 7,
            runs: 20,
            rounds: None,
            measure_constants: true,
        }
    }
}

impl SimulationConfig {
    pub fn problem(&self, devices: usize) -> fedq_core::Result<QuadraticProblem> {
        QuadraticProblem::generate(
            devices,
            self.points_per_device,
            self.dim,
            self.curvature,
            self.center_spread,
            self.noise,
            self.batch_size,
            self.data_seed,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,

    pub devices: usize,
    pub devices_per_round: usize,
    pub local_steps: usize,
    pub lipschitz: f64,
    pub strong_convexity: f64,
    pub grad_bound: f64,
    pub gradient_bound: GradientBound,
    pub sigma: Sigma,
    pub beta: f64,
    pub gamma: f64,
    pub epsilon: f64,
    pub enforce_step_condition: bool,

    pub n_mac: u64,
    pub n_weights: u64,
    pub n_outputs: u64,
    pub uplink_dim: Option<u64>,
    /// `N_c / N_s` used when sweeping `d`.
    pub mac_per_weight: Option<f64>,
    /// `O_s / N_s` used when sweeping `d`.
    pub outputs_per_weight: Option<f64>,

    pub mac_energy_pj: f64,
    pub alpha: f64,
    pub array_size: u64,
    pub max_bits: u32,

    pub tx_power_mw: f64,
    pub bandwidth_hz: f64,
    pub noise_dbm_per_hz: f64,
    pub area_side_m: f64,
    pub pathloss_exponent: f64,

    pub channel_samples: usize,
    pub uplink_average: UplinkAverage,
    pub seed: u64,

    pub sweep: Option<Sweep>,
    pub mode: Mode,
    pub output: Option<PathBuf>,
    pub simulation: Option<SimulationConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            devices: 50,
            devices_per_round: 30,
            local_steps: 5,
            lipschitz: 1.0,
            strong_convexity: 1.0,
            grad_bound: 0.02,
            gradient_bound: GradientBound::SquaredNorm,
            sigma: Sigma::Uniform(1.0),
            beta: 5.0,
            gamma: 1.0,
            epsilon: 0.01,
            enforce_step_condition: false,
            n_mac: 20_640_000,
            n_weights: 180_000,
            n_outputs: 1354,
            uplink_dim: None,
            mac_per_weight: None,
            outputs_per_weight: None,
            mac_energy_pj: 3.7,
            alpha: 1.25,
            array_size: 64,
            max_bits: 32,
            tx_power_mw: 100.0,
            bandwidth_hz: 10e6,
            noise_dbm_per_hz: -100.0,
            area_side_m: 100.0,
            pathloss_exponent: 2.0,
            channel_samples: 10_000,
            uplink_average: UplinkAverage::ErgodicRate,
            seed: DEFAULT_SEED,
            sweep: None,
            mode: Mode::Analytic,
            output: None,
            simulation: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses and checks a config; structural problems are config errors.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Structural checks on values that do not need the learning constants.
    pub fn check(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.channel_samples == 0 {
            return bad("channel_samples must be at least 1".into());
        }
        if let Sigma::PerDevice(s) = &self.sigma {
            if s.len() != self.devices {
                return bad(format!("sigma has {} entries for {} devices", s.len(), self.devices));
            }
        }
        if self.devices < 2 {
            return bad(format!("devices = {} must be at least 2", self.devices));
        }
        if self.max_bits == 0 || self.max_bits > fedq_core::quantizer::MAX_SUPPORTED_BITS {
            return bad(format!("max_bits = {} out of range", self.max_bits));
        }
        if let Some(sweep) = &self.sweep {
            if sweep.is_empty() {
                return bad(format!("sweep over {} has no values", sweep.variable()));
            }
            match sweep {
                Sweep::Precision(v) => {
                    if let Some(n) = v.iter().find(|&&n| n == 0 || n > self.max_bits) {
                        return bad(format!("sweep value n = {n} outside 1..={}", self.max_bits));
                    }
                }
                Sweep::LocalSteps(v) => {
                    if v.contains(&0) {
                        return bad("sweep value I = 0; local steps must be at least 1".into());
                    }
                }
                Sweep::Dimension(v) => {
                    if v.contains(&0) {
                        return bad("sweep value d = 0".into());
                    }
                }
                Sweep::Epsilon(v) => {
                    if let Some(e) = v.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
                        return bad(format!("sweep value epsilon = {e} must be positive"));
                    }
                }
                Sweep::Model(v) => {
                    for name in v {
                        model_preset(name)?;
                    }
                }
            }
        }
        if self.mode == Mode::Simulate && self.simulation.is_none() {
            return bad("simulate mode needs a \"simulation\" section".into());
        }
        if let Some(sim) = &self.simulation {
            if sim.runs == 0 || sim.rounds == Some(0) {
                return bad("simulation needs at least one run and one round".into());
            }
        }
        Ok(())
    }

    fn learning(&self) -> Result<LearningParams, CliError> {
        let mut params = LearningParams {
            lipschitz: self.lipschitz,
            strong_convexity: self.strong_convexity,
            grad_bound: self.grad_bound,
            gradient_bound: self.gradient_bound,
            sigma: match &self.sigma {
                Sigma::Uniform(s) => vec![*s; self.devices],
                Sigma::PerDevice(s) => s.clone(),
            },
            beta: self.beta,
            gamma: self.gamma,
            epsilon: self.epsilon,
            local_steps: self.local_steps,
            devices_per_round: self.devices_per_round,
            enforce_step_condition: self.enforce_step_condition,
        };
        if let Some(sim) = self.simulation.as_ref().filter(|s| s.measure_constants) {
            let m = sim.problem(self.devices)?.measure()?;
            params.lipschitz = m.lipschitz;
            params.strong_convexity = m.strong_convexity;
            params.grad_bound = m.grad_sq_bound;
            params.gradient_bound = GradientBound::SquaredNorm;
            params.sigma = m.sigma;
        }
        Ok(params)
    }

    /// The analytic scenario; infeasible learning constants are feasibility errors.
    pub fn scenario(&self) -> Result<Scenario, CliError> {
        self.check()?;
        let scenario = Scenario {
            learning: self.learning()?,
            arch: NetworkArch::new(self.n_mac, self.n_weights, self.n_outputs),
            chip: ChipProfile {
                mac_energy_j: self.mac_energy_pj * PICOJOULE,
                alpha: self.alpha,
                array_size: self.array_size,
                max_bits: self.max_bits,
            },
            radio: RadioParams {
                tx_power_w: self.tx_power_mw * 1e-3,
                bandwidth_hz: self.bandwidth_hz,
                noise_psd_w_per_hz: dbm_to_watts(self.noise_dbm_per_hz),
                area_side_m: self.area_side_m,
                pathloss_exponent: self.pathloss_exponent,
            },
            channel_samples: self.channel_samples,
            seed: self.seed,
            uplink_average: self.uplink_average,
            uplink_dim: self.uplink_dim,
        };
        scenario
            .validate()
            .map_err(|e| CliError::from(e).context(format!("config \"{}\"", self.name)))?;
        Ok(scenario)
    }
}
