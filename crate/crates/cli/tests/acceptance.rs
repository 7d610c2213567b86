//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::time::{Duration, Instant};

use fedq::config::{ExperimentConfig, Sweep};
use fedq::sweep::{run_sweep, simulate_point, write_csv, SweepRow};
use fedq::{preset, PRESETS};
use fedq_core::analysis::{variance_term, ChannelSamples, EnergyModel};
use fedq_core::chipenergy::{compute_energy, ChipProfile, PICOJOULE};
use fedq_core::fedsim::{run_federated, ChannelMode, StopRule};
use fedq_core::qnn::NetworkArch;
use fedq_core::quantizer::{quantize_vector, step};
use fedq_core::stream::substream;
use fedq_core::Precision;

const QUANT_DRAWS: usize = 1_000_000;
const QUANT_MEAN_TOL_FACTOR: f64 = 3.0 / 1e3;
const QUANT_MSE_SLACK: f64 = 1.05;
const QUANT_TIME_LIMIT: Duration = Duration::from_secs(10);
const ENERGY_REL_TOL: f64 = 1e-12;
const FIG3_TIME_LIMIT: Duration = Duration::from_secs(60);
const BIT_TOL: i64 = 1;
const VGG_RATIO_LIMIT: f64 = 0.6;
const BOUND_SEEDS: usize = 200;
const BOUND_TIME_LIMIT: Duration = Duration::from_secs(300);
const LEDGER_REL_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn prec(bits: u32) -> Precision {
    Precision::new(bits, 32).unwrap()
}

fn rows_for(name: &str, sweep: Sweep) -> Vec<SweepRow> {
    let cfg = ExperimentConfig {
        sweep: Some(sweep),
        ..preset(name).unwrap()
    };
    run_sweep(&cfg).unwrap()
}

fn quantizer_moments() -> Outcome {
    let start = Instant::now();
    let mut worst = String::new();
    let mut failures = Vec::new();
    for bits in [1, 4, 8, 16] {
        let n = prec(bits);
        let kappa = step(n);
        for w in [-1.0, -0.73, 0.0, 0.3, 1.0 - kappa] {
            let mut rng = substream(0xA11CE, &[bits as u64, w.to_bits()]);
            let q = quantize_vector(&vec![w; QUANT_DRAWS], n, &mut rng).unwrap();
            let m = QUANT_DRAWS as f64;
            let mean = q.values().iter().sum::<f64>() / m;
            let mse = q.values().iter().map(|x| (x - w).powi(2)).sum::<f64>() / m;
            let mean_tol = QUANT_MEAN_TOL_FACTOR * kappa / 2.0;
            let mse_tol = QUANT_MSE_SLACK * (-2.0 * bits as f64).exp2();
            if (mean - w).abs() > mean_tol || mse > mse_tol {
                failures.push(format!("n={bits} w={w}: mean {mean} mse {mse}"));
            }
            if bits == 1 && w == 0.3 {
                worst = format!("n=1 w=0.3 mean {mean:.5} mse {mse:.5}");
            }
        }
    }
    let elapsed = start.elapsed();
    if elapsed > QUANT_TIME_LIMIT {
        failures.push(format!("took {elapsed:?}"));
    }
    if failures.is_empty() {
        Ok(format!("20 cases in {elapsed:.1?}; {worst}"))
    } else {
        Err(failures.join("; "))
    }
}

fn energy_oracle() -> Outcome {
    // Independent high-precision evaluation of the per-iteration energy terms.
    let oracle = [
        (1, 1.0234388475014948785e-6, 3.967336586085851069e-8, 2.2435504397211705458e-8, 1.0855477177595650946e-6),
        (10, 1.7863288531922214116e-5, 1.5580544165184096193e-6, 1.2515170753793443881e-6, 2.0672860023819968124e-5),
        (32, 7.63880392e-5, 1.0878e-5, 9.5660392e-6, 9.68320784e-5),
    ];
    let chip = ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap();
    let arch = NetworkArch::new(20_640_000, 180_000, 1354);
    let mut worst: f64 = 0.0;
    for (bits, c, w, a, t) in oracle {
        let b = compute_energy(prec(bits), &arch, &chip).unwrap();
        for (got, want) in [(b.e_compute, c), (b.e_weights, w), (b.e_activations, a), (b.total, t)] {
            worst = worst.max(((got - want) / want).abs());
        }
    }
    let msg = format!("max relative error {worst:.2e}");
    if worst < ENERGY_REL_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig3_argmin() -> Outcome {
    let start = Instant::now();
    let cfg = preset("fig3").unwrap();
    assert_eq!(cfg.channel_samples, 10_000);
    let rows = run_sweep(&cfg).unwrap();
    let best = fedq::sweep::argmin(&rows).unwrap();
    let elapsed = start.elapsed();
    let msg = format!("n* = {} ({:.4} J) in {elapsed:.1?}", best.n_star, best.f_e_joules);
    if (9..=11).contains(&best.n_star) && elapsed < FIG3_TIME_LIMIT {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig4_trend() -> Outcome {
    let steps = vec![3, 5, 10, 20];
    let rows = rows_for("fig4", Sweep::LocalSteps(steps.clone()));
    let n: Vec<u32> = rows.iter().map(|r| r.n_star).collect();
    let monotone = n.windows(2).all(|w| w[1] <= w[0]);
    let first = (n[0] as i64 - 10).abs() <= BIT_TOL;
    let last = (n[3] as i64 - 7).abs() <= BIT_TOL;
    let msg = format!(
        "n*(I) over I={steps:?} = {n:?}; non-increasing {monotone}, I=3 within 1 of 10 {first}, I=20 within 1 of 7 {last}"
    );
    if monotone && first && last {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig5_trend() -> Outcome {
    let dims = vec![100_000, 1_000_000, 10_000_000, 100_000_000];
    let rows = rows_for("fig5", Sweep::Dimension(dims.clone()));
    let n: Vec<u32> = rows.iter().map(|r| r.n_star).collect();
    let msg = format!("n*(d) over d={dims:?} = {n:?}");
    if n.windows(2).all(|w| w[1] >= w[0]) {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig6_trend() -> Outcome {
    let rows = rows_for("fig6", Sweep::Epsilon(vec![0.01, 0.001]));
    let dn = rows[1].n_star as i64 - rows[0].n_star as i64;
    let de = rows[1].f_e_joules - rows[0].f_e_joules;
    let msg = format!(
        "n* {} -> {} (shift {dn}), f_E {:.3} J -> {:.3} J (+{de:.3} J)",
        rows[0].n_star, rows[1].n_star, rows[0].f_e_joules, rows[1].f_e_joules
    );
    if (dn - 1).abs() <= BIT_TOL && de > 0.0 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn fig7_trend() -> Outcome {
    let rows = rows_for("fig7", Sweep::Model(vec!["VGG-16".into(), "ResNet-50".into()]));
    let ratio = |r: &SweepRow| r.f_e_joules / r.f_e_nmax_joules;
    let (vgg, resnet) = (ratio(&rows[0]), ratio(&rows[1]));
    let bound = vgg <= VGG_RATIO_LIMIT;
    let order = 1.0 - vgg > 1.0 - resnet;
    let msg = format!(
        "VGG-16 n*={} f(n*)/f(32)={vgg:.3} (<= {VGG_RATIO_LIMIT}: {bound}); reduction VGG-16 {:.1}% vs ResNet-50 {:.1}% (n*={}) (VGG larger: {order})",
        rows[0].n_star,
        100.0 * (1.0 - vgg),
        100.0 * (1.0 - resnet),
        rows[1].n_star
    );
    if bound && order {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn sci(xs: &[f64]) -> String {
    let parts: Vec<String> = xs.iter().map(|x| format!("{x:.4e}")).collect();
    format!("[{}]", parts.join(", "))
}

fn bound_validation() -> Outcome {
    let start = Instant::now();
    let cfg = preset("toy-sim").unwrap();
    let sim = cfg.simulation.as_ref().unwrap();
    assert!(sim.runs >= BOUND_SEEDS);
    let scenario = cfg.scenario().unwrap();
    let mut finals = Vec::new();
    let mut failures = Vec::new();
    let mut slack = f64::INFINITY;
    for bits in [2, 4, 8, 16] {
        let stats = simulate_point(&cfg, &scenario, prec(bits)).unwrap();
        for (t, (g, b)) in stats.mean_gap.iter().zip(&stats.bound).enumerate() {
            slack = slack.min(b / g.max(f64::MIN_POSITIVE));
            if g > b {
                failures.push(format!("n={bits} round {}: gap {g:.4e} > bound {b:.4e}", t + 1));
            }
        }
        finals.push(stats.summary.final_gap);
    }
    if !finals.windows(2).all(|w| w[1] <= w[0]) {
        failures.push(format!("final gap not non-increasing in n: {}", sci(&finals)));
    }
    let elapsed = start.elapsed();
    if elapsed > BOUND_TIME_LIMIT {
        failures.push(format!("took {elapsed:?}"));
    }
    let msg = format!(
        "{} seeds, final gaps over n=[2,4,8,16] {}, min bound/gap {slack:.1}, {elapsed:.1?}",
        sim.runs,
        sci(&finals)
    );
    if failures.is_empty() {
        Ok(msg)
    } else {
        Err(format!("{msg}; {}", failures.join("; ")))
    }
}

fn ledger_consistency() -> Outcome {
    let cfg = preset("toy-sim").unwrap();
    let sim = cfg.simulation.clone().unwrap();
    let n = prec(8);
    let rounds = 6;
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (k, equal) in [(10, false), (5, true)] {
        let mut scenario = cfg.scenario().unwrap();
        scenario.learning.devices_per_round = k;
        let v = variance_term(&scenario.learning, n, scenario.arch.dim()).unwrap();
        scenario.learning.epsilon = scenario.learning.lipschitz * v / (2.0 * (rounds as f64 + scenario.learning.gamma));
        let draw = ChannelSamples::draw(&fedq_core::analysis::Scenario {
            channel_samples: 1,
            ..scenario.clone()
        })
        .unwrap();
        let mut gains = draw.rows()[0].clone();
        if equal {
            gains = vec![gains[0]; gains.len()];
        }
        let point = EnergyModel::with_samples(&scenario, &ChannelSamples::frozen(gains.clone()))
            .unwrap()
            .evaluate(n)
            .unwrap();
        let problem = sim.problem(scenario.learning.devices()).unwrap();
        let rec = run_federated(
            &scenario,
            &problem.setup(ChannelMode::Frozen(gains)),
            n,
            StopRule::MaxRounds(rounds),
            99,
        )
        .unwrap();
        let err = ((rec.total_energy_j - point.f_e) / point.f_e).abs();
        worst = worst.max(err);
        details.push(format!("K={k}: T={:.12} measured {:.6e} J vs expected {:.6e} J", point.rounds, rec.total_energy_j, point.f_e));
    }
    let msg = format!("{}; max relative error {worst:.2e}", details.join("; "));
    if worst < LEDGER_REL_TOL {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn csv_bytes(cfg: &ExperimentConfig) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&run_sweep(cfg).unwrap(), &mut buf).unwrap();
    buf
}

fn determinism() -> Outcome {
    let mut failures = Vec::new();
    for name in PRESETS {
        let cfg = preset(name).unwrap();
        let a = csv_bytes(&cfg);
        let b = csv_bytes(&cfg);
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| csv_bytes(&cfg));
        if a != b || a != single {
            failures.push(name.to_string());
        }
    }
    if failures.is_empty() {
        Ok(format!("{} presets byte-identical across repeats and 1-thread runs", PRESETS.len()))
    } else {
        Err(format!("differing output: {}", failures.join(", ")))
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("quantizer moments", quantizer_moments),
        ("energy formula oracle", energy_oracle),
        ("fig3 argmin", fig3_argmin),
        ("fig4 trend", fig4_trend),
        ("fig5 trend", fig5_trend),
        ("fig6 trend", fig6_trend),
        ("fig7 trend", fig7_trend),
        ("bound validation", bound_validation),
        ("ledger consistency", ledger_consistency),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(msg) => println!("PASS criterion {} ({name}): {msg}", i + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {msg}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
