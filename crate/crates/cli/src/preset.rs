//! Named experiment presets.

use serde::Serialize;

use crate::config::{ExperimentConfig, Mode, SimulationConfig, Sweep};
use crate::CliError;

pub const PRESETS: &[&str] = &["fig3", "fig4", "fig5", "fig6", "fig7", "toy-sim"];

/// MACs per weight used for the large-model presets.
pub const MAC_PER_WEIGHT: f64 = 500.0;

/// Intermediate outputs per weight, taken from the 3-layer CNN counts.
pub const OUTPUTS_PER_WEIGHT: f64 = 1354.0 / 180_000.0;

/// A network described only by its weight count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelPreset {
    pub name: &'static str,
    pub n_weights: u64,
}

impl ModelPreset {
    pub fn n_mac(&self) -> u64 {
        (self.n_weights as f64 * MAC_PER_WEIGHT).round() as u64
    }

    pub fn n_outputs(&self) -> u64 {
        (self.n_weights as f64 * OUTPUTS_PER_WEIGHT).round() as u64
    }

    pub fn dim(&self) -> u64 {
        self.n_weights
    }
}

// AlexNet, SENet-154 and DPN-131 use their commonly published parameter counts.
pub const MODELS: &[ModelPreset] = &[
    ModelPreset {
        name: "AlexNet",
        n_weights: 61_100_000,
    },
    ModelPreset {
        name: "ResNet-50",
        n_weights: 25_600_000,
    },
    ModelPreset {
        name: "VGG-16",
        n_weights: 138_800_000,
    },
    ModelPreset {
        name: "SENet-154",
        n_weights: 115_100_000,
    },
    ModelPreset {
        name: "DPN",
        n_weights: 79_300_000,
    },
];

pub fn model_preset(name: &str) -> Result<ModelPreset, CliError> {
    MODELS.iter().copied().find(|m| m.name == name).ok_or_else(|| {
        let names: Vec<&str> = MODELS.iter().map(|m| m.name).collect();
        CliError::Config(format!("unknown model preset \"{name}\"; known: {}", names.join(", ")))
    })
}

/// The named configuration, checked for feasibility.
pub fn preset(name: &str) -> Result<ExperimentConfig, CliError> {
    let base = ExperimentConfig {
        name: name.to_string(),
        ..ExperimentConfig::default()
    };
    let cfg = match name {
        "fig3" => ExperimentConfig {
            sweep: Some(Sweep::Precision((1..=32).collect())),
            ..base
        },
        "fig4" => ExperimentConfig {
            sweep: Some(Sweep::LocalSteps((3..=20).collect())),
            ..base
        },
        "fig5" => ExperimentConfig {
            mac_per_weight: Some(MAC_PER_WEIGHT),
            outputs_per_weight: Some(OUTPUTS_PER_WEIGHT),
            sweep: Some(Sweep::Dimension(vec![
                100_000,
                300_000,
                1_000_000,
                3_000_000,
                10_000_000,
                30_000_000,
                100_000_000,
            ])),
            ..base
        },
        "fig6" => ExperimentConfig {
            sweep: Some(Sweep::Epsilon(vec![0.01, 0.005, 0.002, 0.001])),
            ..base
        },
        "fig7" => ExperimentConfig {
            sweep: Some(Sweep::Model(MODELS.iter().map(|m| m.name.to_string()).collect())),
            ..base
        },
        "toy-sim" => {
            let sim = SimulationConfig {
                runs: 200,
                rounds: Some(30),
                ..SimulationConfig::default()
            };
            let d = sim.dim as u64;
            ExperimentConfig {
                devices: 10,
                devices_per_round: 5,
                local_steps: 5,
                beta: 2.5,
                gamma: 5.0,
                enforce_step_condition: true,
                n_mac: d,
                n_weights: d,
                n_outputs: d,
                channel_samples: 1000,
                sweep: Some(Sweep::Precision(vec![2, 4, 8, 16])),
                mode: Mode::Simulate,
                simulation: Some(sim),
                ..base
            }
        }
        _ => {
            return Err(CliError::Config(format!(
                "unknown preset \"{name}\"; available: {}",
                PRESETS.join(", ")
            )))
        }
    };
    cfg.scenario()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fig3_shape() {
        let cfg = preset("fig3").unwrap();
        assert_eq!(cfg.sweep, Some(Sweep::Precision((1..=32).collect())));
        assert_eq!((cfg.n_mac, cfg.n_weights, cfg.n_outputs), (20_640_000, 180_000, 1354));
    }

    #[test]
    fn fig7_models() {
        assert_eq!(model_preset("VGG-16").unwrap().n_weights, 138_800_000);
        assert_eq!(model_preset("ResNet-50").unwrap().n_weights, 25_600_000);
        let vgg = model_preset("VGG-16").unwrap();
        assert_eq!(vgg.n_mac(), 69_400_000_000);
        assert_eq!(vgg.dim(), vgg.n_weights);
        let Some(Sweep::Model(names)) = preset("fig7").unwrap().sweep else {
            panic!("fig7 sweeps models")
        };
        assert!(names.iter().any(|n| n == "VGG-16"));
    }

    #[test]
    fn every_preset_is_feasible() {
        for name in PRESETS {
            let cfg = preset(name).unwrap();
            assert_eq!(&cfg.name, name);
            assert!(cfg.scenario().is_ok());
        }
    }

    #[test]
    fn unknown_preset_lists_names() {
        let err = preset("fig9").unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("toy-sim"));
    }
}
