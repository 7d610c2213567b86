//! Sweep execution and CSV output.
//!
//! Columns, in order:
//!
//! | column | meaning |
//! |---|---|
//! | `sweep_value` | value of the swept variable |
//! | `n_star` | energy-optimal precision, or the swept `n` itself in an `n` sweep |
//! | `f_E_joules` | expected total energy at `n_star` |
//! | `T_rounds` | rounds to reach `ε` at `n_star` (real, at least 1) |
//! | `v` | variance aggregate at `n_star` |
//! | `e_compute_per_iter` | chip energy of one local iteration at `n_star` |
//! | `e_uplink_mean` | device-averaged expected uplink energy per round at `n_star` |
//! | `seed` | root seed |
//! | `f_E_nmax_joules` | expected total energy at `n = n_max` |
//!
//! Simulate mode appends `sim_runs`, `sim_rounds`, `sim_energy_joules` (mean
//! measured total), `sim_final_gap` (mean final optimality gap) and
//! `sim_gap_bound` (the analytic bound at the final round).
//!
//! Floats are written in shortest round-trip form, so rows parse back to
//! identical values.

use std::io::Write;
use std::path::Path;

use fedq_core::analysis::{
    gap_bound, optimize_with, rounds_to_accuracy, variance_term, ChannelSamples, EnergyModel, EnergyPoint,
    Scenario,
};
use fedq_core::fedsim::{run_federated, ChannelMode, StopRule};
use fedq_core::stream::derive_seed;
use fedq_core::Precision;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode, Sweep};
use crate::preset::model_preset;
use crate::CliError;

pub const COLUMNS: [&str; 9] = [
    "sweep_value",
    "n_star",
    "f_E_joules",
    "T_rounds",
    "v",
    "e_compute_per_iter",
    "e_uplink_mean",
    "seed",
    "f_E_nmax_joules",
];

pub const SIM_COLUMNS: [&str; 5] = ["sim_runs", "sim_rounds", "sim_energy_joules", "sim_final_gap", "sim_gap_bound"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSummary {
    pub runs: usize,
    pub rounds: usize,
    pub energy_joules: f64,
    pub final_gap: f64,
    pub gap_bound: f64,
}

/// Per-round averages over seeded simulator runs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub summary: SimSummary,
    /// Mean `F(w_t) - F(w*)` after each round.
    pub mean_gap: Vec<f64>,
    /// `(L/2) v / (t + γ)` after each round.
    pub bound: Vec<f64>,
    pub initial_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_value: String,
    pub n_star: u32,
    pub f_e_joules: f64,
    pub t_rounds: f64,
    pub v: f64,
    pub e_compute_per_iter: f64,
    pub e_uplink_mean: f64,
    pub seed: u64,
    pub f_e_nmax_joules: f64,
    pub sim: Option<SimSummary>,
}

impl SweepRow {
    fn new(label: String, p: &EnergyPoint, full: &EnergyPoint, seed: u64) -> Self {
        Self {
            sweep_value: label,
            n_star: p.bits,
            f_e_joules: p.f_e,
            t_rounds: p.rounds,
            v: p.v,
            e_compute_per_iter: p.e_compute_per_iter,
            e_uplink_mean: p.e_uplink_mean,
            seed,
            f_e_nmax_joules: full.f_e,
            sim: None,
        }
    }

    fn fields(&self) -> Vec<String> {
        let mut out = vec![
            self.sweep_value.clone(),
            self.n_star.to_string(),
            self.f_e_joules.to_string(),
            self.t_rounds.to_string(),
            self.v.to_string(),
            self.e_compute_per_iter.to_string(),
            self.e_uplink_mean.to_string(),
            self.seed.to_string(),
            self.f_e_nmax_joules.to_string(),
        ];
        if let Some(s) = &self.sim {
            out.extend([
                s.runs.to_string(),
                s.rounds.to_string(),
                s.energy_joules.to_string(),
                s.final_gap.to_string(),
                s.gap_bound.to_string(),
            ]);
        }
        out
    }

    fn parse(fields: &[&str]) -> Result<Self, CliError> {
        let bad = |what: &str, v: &str| CliError::Config(format!("bad {what} \"{v}\" in sweep CSV"));
        let f = |i: usize| fields[i].parse::<f64>().map_err(|_| bad(COLUMNS[i], fields[i]));
        if fields.len() != COLUMNS.len() && fields.len() != COLUMNS.len() + SIM_COLUMNS.len() {
            return Err(CliError::Config(format!("sweep CSV row has {} fields", fields.len())));
        }
        let sim = if fields.len() > COLUMNS.len() {
            let g = |i: usize| fields[i].parse::<f64>().map_err(|_| bad(SIM_COLUMNS[i - 9], fields[i]));
            Some(SimSummary {
                runs: fields[9].parse().map_err(|_| bad("sim_runs", fields[9]))?,
                rounds: fields[10].parse().map_err(|_| bad("sim_rounds", fields[10]))?,
                energy_joules: g(11)?,
                final_gap: g(12)?,
                gap_bound: g(13)?,
            })
        } else {
            None
        };
        Ok(Self {
            sweep_value: fields[0].to_string(),
            n_star: fields[1].parse().map_err(|_| bad("n_star", fields[1]))?,
            f_e_joules: f(2)?,
            t_rounds: f(3)?,
            v: f(4)?,
            e_compute_per_iter: f(5)?,
            e_uplink_mean: f(6)?,
            seed: fields[7].parse().map_err(|_| bad("seed", fields[7]))?,
            f_e_nmax_joules: f(8)?,
            sim,
        })
    }
}

struct Point {
    label: String,
    scenario: Scenario,
    fixed_bits: Option<u32>,
}

fn points(cfg: &ExperimentConfig, base: &Scenario, sweep: &Sweep) -> Result<Vec<Point>, CliError> {
    let mut out = Vec::with_capacity(sweep.len());
    let mut push = |label: String, scenario: Scenario, fixed_bits: Option<u32>| {
        out.push(Point {
            label,
            scenario,
            fixed_bits,
        })
    };
    match sweep {
        Sweep::Precision(v) => {
            for &n in v {
                push(n.to_string(), base.clone(), Some(n));
            }
        }
        Sweep::LocalSteps(v) => {
            for &i in v {
                let mut s = base.clone();
                s.learning.local_steps = i;
                push(i.to_string(), s, None);
            }
        }
        Sweep::Epsilon(v) => {
            for &e in v {
                let mut s = base.clone();
                s.learning.epsilon = e;
                push(e.to_string(), s, None);
            }
        }
        Sweep::Dimension(v) => {
            let w = cfg.n_weights.max(1) as f64;
            let mac_ratio = cfg.mac_per_weight.unwrap_or(cfg.n_mac as f64 / w);
            let out_ratio = cfg.outputs_per_weight.unwrap_or(cfg.n_outputs as f64 / w);
            for &d in v {
                let mut s = base.clone();
                s.arch.n_weights = d;
                s.arch.n_mac = (mac_ratio * d as f64).round() as u64;
                s.arch.n_outputs = (out_ratio * d as f64).round() as u64;
                push(d.to_string(), s, None);
            }
        }
        Sweep::Model(v) => {
            for name in v {
                let m = model_preset(name)?;
                let mut s = base.clone();
                s.arch.n_weights = m.n_weights;
                s.arch.n_mac = m.n_mac();
                s.arch.n_outputs = m.n_outputs();
                push(name.clone(), s, None);
            }
        }
    }
    Ok(out)
}

/// Evaluates every sweep point against one shared set of channel draws.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<Vec<SweepRow>, CliError> {
    let base = cfg.scenario()?;
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("config \"{}\" has no sweep", cfg.name)))?;
    let samples = ChannelSamples::draw(&base)?;
    let max_bits = base.max_bits();
    points(cfg, &base, sweep)?
        .into_par_iter()
        .map(|pt| {
            let at = |e: fedq_core::Error| {
                CliError::from(e).context(format!("{} at {} = {}", cfg.name, sweep.variable(), pt.label))
            };
            let model = EnergyModel::with_samples(&pt.scenario, &samples).map_err(at)?;
            let full = model.evaluate(Precision::full(max_bits).map_err(at)?).map_err(at)?;
            let best = match pt.fixed_bits {
                Some(n) => model.evaluate(Precision::new(n, max_bits).map_err(at)?).map_err(at)?,
                None => *optimize_with(&model).map_err(at)?.best(),
            };
            let mut row = SweepRow::new(pt.label.clone(), &best, &full, cfg.seed);
            if cfg.mode == Mode::Simulate {
                let n = Precision::new(best.bits, max_bits).map_err(at)?;
                row.sim = Some(simulate_point(cfg, &pt.scenario, n)?.summary);
            }
            Ok(row)
        })
        .collect()
}

/// Averages seeded simulator runs of the configured synthetic problem at precision `n`.
pub fn simulate_point(cfg: &ExperimentConfig, scenario: &Scenario, n: Precision) -> Result<SimStats, CliError> {
    let sim = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| CliError::Config("simulate mode needs a \"simulation\" section".into()))?;
    let problem = sim.problem(scenario.learning.devices())?;
    let optimal = problem.measure()?.optimal_loss;
    let v = variance_term(&scenario.learning, n, scenario.arch.dim())?;
    let rounds = match sim.rounds {
        Some(r) => r,
        None => rounds_to_accuracy(&scenario.learning, v)?.ceil() as usize,
    };
    let setup = problem.setup(ChannelMode::Fading);
    let records = (0..sim.runs as u64)
        .into_par_iter()
        .map(|r| run_federated(scenario, &setup, n, StopRule::MaxRounds(rounds), derive_seed(cfg.seed, &[r])))
        .collect::<fedq_core::Result<Vec<_>>>()?;
    let runs = records.len() as f64;
    let mut mean_gap = vec![0.0; rounds];
    let mut energy = 0.0;
    let mut initial_gap = 0.0;
    for rec in &records {
        for (g, r) in mean_gap.iter_mut().zip(&rec.rounds) {
            *g += (r.global_loss - optimal) / runs;
        }
        energy += rec.total_energy_j / runs;
        initial_gap += (rec.initial_loss - optimal) / runs;
    }
    let bound: Vec<f64> = (1..=rounds)
        .map(|t| gap_bound(&scenario.learning, v, t as f64))
        .collect();
    Ok(SimStats {
        summary: SimSummary {
            runs: records.len(),
            rounds,
            energy_joules: energy,
            final_gap: *mean_gap.last().unwrap_or(&initial_gap),
            gap_bound: *bound.last().unwrap_or(&f64::INFINITY),
        },
        mean_gap,
        bound,
        initial_gap,
    })
}

pub fn header(simulate: bool) -> Vec<&'static str> {
    let mut h = COLUMNS.to_vec();
    if simulate {
        h.extend(SIM_COLUMNS);
    }
    h
}

pub fn write_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<(), CliError> {
    let simulate = rows.iter().any(|r| r.sim.is_some());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(simulate)).map_err(fedq_core::Error::from)?;
    for r in rows {
        w.write_record(r.fields()).map_err(fedq_core::Error::from)?;
    }
    w.flush()?;
    Ok(())
}

/// Whitespace-separated columns with a `#` header, as gnuplot reads them.
pub fn write_gnuplot<W: Write>(rows: &[SweepRow], mut out: W) -> Result<(), CliError> {
    let simulate = rows.iter().any(|r| r.sim.is_some());
    writeln!(out, "# {}", header(simulate).join(" "))?;
    for r in rows {
        writeln!(out, "{}", r.fields().join(" "))?;
    }
    Ok(())
}

pub fn write_file(rows: &[SweepRow], path: &Path, gnuplot: bool) -> Result<(), CliError> {
    let file = std::fs::File::create(path)
        .map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let buf = std::io::BufWriter::new(file);
    if gnuplot {
        write_gnuplot(rows, buf)
    } else {
        write_csv(rows, buf)
    }
}

pub fn read_csv(text: &str) -> Result<Vec<SweepRow>, CliError> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(fedq_core::Error::from)?;
        let fields: Vec<&str> = rec.iter().collect();
        rows.push(SweepRow::parse(&fields)?);
    }
    Ok(rows)
}

/// Row with the smallest `f_E`; ties go to the first.
pub fn argmin(rows: &[SweepRow]) -> Option<&SweepRow> {
    rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
        Some(b) if b.f_e_joules <= r.f_e_joules => Some(b),
        _ => Some(r),
    })
}
