//! Federated averaging with quantized local training and quantized uplink.
//!
//! Each round samples `K` of `N` devices. Every sampled device starts from
//! the global model, runs `I` local SGD steps at precision `n`, clips (or
//! halves) its update into `[-1, 1]`, quantizes it and uploads it. The server
//! adds the mean of the received updates to the global model. Uplink and
//! compute energy are metered per device and per round.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chipenergy::compute_energy;
use crate::error::{Error, Result};
use crate::qnn::{local_round, Dataset, Learner, ModelState, QuadraticModel};
use crate::quantizer::{quantize_vector, Precision};
use crate::radio::{achievable_rate, channel_gain, place_devices, uplink_energy};
use crate::analysis::Scenario;
use crate::stream::{substream, tag};

/// `K` distinct device ids drawn uniformly from `0..N`, sorted.
pub fn sample_devices<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::domain(format!("cannot sample {k} of {n} devices")));
    }
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `η_t = β / (t + γ)`.
pub fn learning_rate(t: usize, beta: f64, gamma: f64) -> f64 {
    beta / (t as f64 + gamma)
}

/// How an update is brought into the quantizer's `[-1, 1]` domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaRange {
    #[default]
    Clip,
    /// Halve before quantizing, double at the server.
    Scale,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Fresh Rayleigh fade per device and round over a seeded topology.
    #[default]
    Fading,
    /// Fixed per-device power gains for every round.
    Frozen(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    MaxRounds(usize),
    LossTarget { target: f64, max_rounds: usize },
}

impl StopRule {
    fn max_rounds(self) -> usize {
        match self {
            StopRule::MaxRounds(r) => r,
            StopRule::LossTarget { max_rounds, .. } => max_rounds,
        }
    }
}

/// Everything a run needs beyond the analytic scenario.
#[derive(Clone)]
pub struct FederatedSetup {
    pub learner: Arc<dyn Learner>,
    /// One shard per device.
    pub shards: Vec<Dataset>,
    pub initial: Vec<f64>,
    pub batch_size: usize,
    pub delta_range: DeltaRange,
    pub channel: ChannelMode,
    /// Constant learning rate instead of the `β/(t+γ)` schedule.
    pub lr_override: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    pub devices: Vec<usize>,
    /// Full-precision loss of the global model after this round.
    pub global_loss: f64,
    pub uplink_energy_j: f64,
    pub compute_energy_j: f64,
}

impl RoundRecord {
    pub fn energy_j(&self) -> f64 {
        self.uplink_energy_j + self.compute_energy_j
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub bits: u32,
    pub initial_loss: f64,
    pub rounds: Vec<RoundRecord>,
    pub total_uplink_j: f64,
    pub total_compute_j: f64,
    pub total_energy_j: f64,
    pub stop_round: usize,
    pub final_weights: Vec<f64>,
}

/// Totals without the per-round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub bits: u32,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub stop_round: usize,
    pub total_uplink_j: f64,
    pub total_compute_j: f64,
    pub total_energy_j: f64,
    pub config: serde_json::Value,
}

impl RunRecord {
    fn new(seed: u64, bits: u32, initial_loss: f64) -> Self {
        Self {
            seed,
            bits,
            initial_loss,
            rounds: Vec::new(),
            total_uplink_j: 0.0,
            total_compute_j: 0.0,
            total_energy_j: 0.0,
            stop_round: 0,
            final_weights: Vec::new(),
        }
    }

    fn push(&mut self, r: RoundRecord) {
        self.total_uplink_j += r.uplink_energy_j;
        self.total_compute_j += r.compute_energy_j;
        self.total_energy_j += r.energy_j();
        self.stop_round = r.round;
        self.rounds.push(r);
    }

    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(self.initial_loss, |r| r.global_loss)
    }

    /// One row per round; device ids are space separated.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "round",
            "devices",
            "global_loss",
            "uplink_energy_j",
            "compute_energy_j",
            "cumulative_energy_j",
        ])?;
        let mut cumulative = 0.0;
        for r in &self.rounds {
            cumulative += r.energy_j();
            let ids: Vec<String> = r.devices.iter().map(|d| d.to_string()).collect();
            w.write_record([
                r.round.to_string(),
                ids.join(" "),
                r.global_loss.to_string(),
                r.uplink_energy_j.to_string(),
                r.compute_energy_j.to_string(),
                cumulative.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, config: serde_json::Value) -> RunSummary {
        RunSummary {
            seed: self.seed,
            bits: self.bits,
            initial_loss: self.initial_loss,
            final_loss: self.final_loss(),
            stop_round: self.stop_round,
            total_uplink_j: self.total_uplink_j,
            total_compute_j: self.total_compute_j,
            total_energy_j: self.total_energy_j,
            config,
        }
    }

    pub fn write_summary_json(&self, path: impl AsRef<Path>, config: serde_json::Value) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, &self.summary(config))?;
        Ok(())
    }
}

struct DeviceUpdate {
    delta: Vec<f64>,
    uplink_j: f64,
}

/// Runs FedAvg at precision `n` until `stop`.
///
/// Energy is metered from the scenario's architecture counts and radio, so a
/// small learner can stand in for a large network.
pub fn run_federated(
    scenario: &Scenario,
    setup: &FederatedSetup,
    n: Precision,
    stop: StopRule,
    seed: u64,
) -> Result<RunRecord> {
    scenario.validate()?;
    let params = &scenario.learning;
    let devices = params.devices();
    let k = params.devices_per_round;
    let learner = setup.learner.as_ref();
    let dim = learner.dim();
    if setup.shards.len() != devices {
        return Err(Error::shape(format!(
            "{} shards for {devices} devices",
            setup.shards.len()
        )));
    }
    if let Some(i) = setup.shards.iter().position(Dataset::is_empty) {
        return Err(Error::domain(format!("device {i} has an empty shard")));
    }
    if setup.initial.len() != dim {
        return Err(Error::shape(format!(
            "initial model has {} values, learner needs {dim}",
            setup.initial.len()
        )));
    }
    if setup.batch_size == 0 {
        return Err(Error::domain("batch size must be positive"));
    }
    if n.bits() > scenario.chip.max_bits {
        return Err(Error::domain(format!(
            "precision {} exceeds n_max {}",
            n.bits(),
            scenario.chip.max_bits
        )));
    }
    let distances = match &setup.channel {
        ChannelMode::Fading => {
            place_devices(devices, &scenario.radio, &mut substream(seed, &[tag::TOPOLOGY]))?.distances()
        }
        ChannelMode::Frozen(g) if g.len() != devices => {
            return Err(Error::shape(format!("{} frozen gains for {devices} devices", g.len())))
        }
        ChannelMode::Frozen(_) => Vec::new(),
    };

    let union = Dataset::union(&setup.shards)?;
    let payload = scenario.payload_dim();
    let compute_j = params.local_steps as f64 * compute_energy(n, &scenario.arch, &scenario.chip)?.total;
    let mut global: Vec<f64> = setup
        .initial
        .iter()
        .map(|&w| crate::quantizer::clip_unit(w))
        .collect::<Result<_>>()?;
    let mut record = RunRecord::new(seed, n.bits(), learner.loss(&global, &union)?);

    for t in 0..stop.max_rounds() {
        let round = t as u64;
        let eta = setup
            .lr_override
            .unwrap_or_else(|| learning_rate(t, params.beta, params.gamma));
        let ids = sample_devices(devices, k, &mut substream(seed, &[tag::SAMPLING, round]))?;
        let updates = ids
            .par_iter()
            .map(|&id| {
                let dev = id as u64;
                let mut train = substream(seed, &[tag::TRAIN_QUANT, round, dev]);
                let mut model = ModelState::new(global.clone(), n, &mut train)?;
                let raw = local_round(
                    learner,
                    &mut model,
                    &setup.shards[id],
                    params.local_steps,
                    eta,
                    setup.batch_size,
                    &mut train,
                )?;
                let (scale, send): (f64, Vec<f64>) = match setup.delta_range {
                    DeltaRange::Clip => (1.0, raw.iter().map(|d| d.clamp(-1.0, 1.0)).collect()),
                    DeltaRange::Scale => (2.0, raw.iter().map(|d| (d / 2.0).clamp(-1.0, 1.0)).collect()),
                };
                let mut uq = substream(seed, &[tag::UPLINK_QUANT, round, dev]);
                let q = quantize_vector(&send, n, &mut uq)?;
                let gain = match &setup.channel {
                    ChannelMode::Frozen(g) => g[id],
                    ChannelMode::Fading => channel_gain(
                        distances[id],
                        &scenario.radio,
                        &mut substream(seed, &[tag::FADING, round, dev]),
                    )?,
                };
                let rate = achievable_rate(gain, &scenario.radio);
                let uplink = uplink_energy(payload, n, rate, &scenario.radio)?;
                Ok(DeviceUpdate {
                    delta: q.into_values().into_iter().map(|v| v * scale).collect(),
                    uplink_j: uplink.energy_j,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let mut sum = vec![0.0; dim];
        let mut uplink_j = 0.0;
        for u in &updates {
            for (s, d) in sum.iter_mut().zip(&u.delta) {
                *s += d;
            }
            uplink_j += u.uplink_j;
        }
        for (w, s) in global.iter_mut().zip(&sum) {
            *w = (*w + s / k as f64).clamp(-1.0, 1.0);
        }
        let loss = learner.loss(&global, &union)?;
        record.push(RoundRecord {
            round: t + 1,
            devices: ids,
            global_loss: loss,
            uplink_energy_j: uplink_j,
            compute_energy_j: k as f64 * compute_j,
        });
        if !loss.is_finite() {
            record.final_weights = global;
            return Err(Error::Diverged {
                round: t + 1,
                record: Box::new(record),
            });
        }
        if let StopRule::LossTarget { target, .. } = stop {
            if loss <= target {
                break;
            }
        }
    }
    record.final_weights = global;
    Ok(record)
}

/// A strongly convex federated problem with measurable constants.
///
/// Device `k` holds points `x = c_k + u` with a device centre `c_k` and
/// uniform noise `u`. Its loss is `(c/2) E‖w - x‖²`, so `L = μ = c`.
#[derive(Debug, Clone)]
pub struct QuadraticProblem {
    pub model: QuadraticModel,
    pub shards: Vec<Dataset>,
    pub batch_size: usize,
}

/// Constants of [`QuadraticProblem`] measured from its data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredConstants {
    pub lipschitz: f64,
    pub strong_convexity: f64,
    /// Bound on `E‖g‖²` over `[-1, 1]^d`.
    pub grad_sq_bound: f64,
    pub sigma: Vec<f64>,
    pub optimum: Vec<f64>,
    pub optimal_loss: f64,
}

impl QuadraticProblem {
    /// `devices` shards of `points` rows in dimension `dim`, centres in
    /// `±center_spread` and noise in `±noise`.
    pub fn generate(
        devices: usize,
        points: usize,
        dim: usize,
        curvature: f64,
        center_spread: f64,
        noise: f64,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        if devices == 0 || points == 0 || dim == 0 || batch_size == 0 {
            return Err(Error::domain("synthetic problem needs devices, points, dim and batch size"));
        }
        if !(curvature > 0.0 && center_spread >= 0.0 && noise >= 0.0) {
            return Err(Error::domain("curvature must be positive and spreads non-negative"));
        }
        if center_spread + noise > 1.0 {
            return Err(Error::domain("data must lie inside [-1, 1]"));
        }
        let shards = (0..devices as u64)
            .map(|k| {
                let mut rng = substream(seed, &[tag::DATA, k]);
                let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-center_spread..=center_spread)).collect();
                let mut inputs = Vec::with_capacity(points * dim);
                for _ in 0..points {
                    for c in &center {
                        inputs.push(c + rng.random_range(-noise..=noise));
                    }
                }
                Dataset::new(inputs, dim, vec![0; points])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: QuadraticModel { dim, curvature },
            shards,
            batch_size,
        })
    }

    pub fn measure(&self) -> Result<MeasuredConstants> {
        let c = self.model.curvature;
        let dim = self.model.dim;
        let b = self.batch_size as f64;
        let mut sigma = Vec::with_capacity(self.shards.len());
        let mut grad_sq_bound: f64 = 0.0;
        for shard in &self.shards {
            let mean = column_means(shard);
            let trace: f64 = (0..shard.len())
                .map(|r| shard.row(r).iter().zip(&mean).map(|(x, m)| (x - m).powi(2)).sum::<f64>())
                .sum::<f64>()
                / shard.len() as f64;
            let noise_sq = c * c * trace / b;
            sigma.push(noise_sq.sqrt());
            let drift: f64 = mean.iter().map(|m| (1.0 + m.abs()).powi(2)).sum();
            grad_sq_bound = grad_sq_bound.max(c * c * drift + noise_sq);
        }
        let union = Dataset::union(&self.shards)?;
        let optimum = column_means(&union);
        debug_assert_eq!(optimum.len(), dim);
        let optimal_loss = crate::qnn::Learner::loss(&self.model, &optimum, &union)?;
        Ok(MeasuredConstants {
            lipschitz: c,
            strong_convexity: c,
            grad_sq_bound,
            sigma,
            optimum,
            optimal_loss,
        })
    }

    pub fn setup(&self, channel: ChannelMode) -> FederatedSetup {
        FederatedSetup {
            learner: Arc::new(self.model),
            shards: self.shards.clone(),
            initial: vec![0.0; self.model.dim],
            batch_size: self.batch_size,
            delta_range: DeltaRange::Clip,
            channel,
            lr_override: None,
        }
    }
}

fn column_means(data: &Dataset) -> Vec<f64> {
    let mut mean = vec![0.0; data.width()];
    for r in 0..data.len() {
        for (m, x) in mean.iter_mut().zip(data.row(r)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= data.len() as f64;
    }
    mean
}
