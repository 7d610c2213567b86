//! Experiment front end: configs, presets and sweeps over the precision
//! optimizer and the federated simulator.

pub mod config;
pub mod preset;
pub mod sweep;

use std::fmt;

pub use config::{ExperimentConfig, Mode, SimulationConfig, Sweep};
pub use preset::{preset, PRESETS};
pub use sweep::{run_sweep, SweepRow};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("{}", Prefixed(.context, .source))]
    Core {
        context: Option<String>,
        #[source]
        source: fedq_core::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Prefixed<'a>(&'a Option<String>, &'a fedq_core::Error);

impl fmt::Display for Prefixed<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(c) => write!(f, "{c}: {}", self.1),
            None => write!(f, "{}", self.1),
        }
    }
}

impl From<fedq_core::Error> for CliError {
    fn from(source: fedq_core::Error) -> Self {
        CliError::Core {
            context: None,
            source,
        }
    }
}

impl CliError {
    pub fn context(self, ctx: impl Into<String>) -> Self {
        match self {
            CliError::Core { source, .. } => CliError::Core {
                context: Some(ctx.into()),
                source,
            },
            other => other,
        }
    }

    /// 1 for I/O and runtime failures, 2 for configuration errors, 3 for infeasible learning constants.
    pub fn exit_code(&self) -> i32 {
        use fedq_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 1,
            CliError::Core { source, .. } => match source {
                E::Infeasible { .. } => 3,
                E::Domain(_) | E::Shape(_) | E::Json(_) => 2,
                E::Io(_) | E::Csv(_) | E::NonFinite { .. } | E::Diverged { .. } => 1,
            },
        }
    }
}
