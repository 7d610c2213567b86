use std::sync::Arc;

use fedq_core::analysis::{
    optimize_with, rounds_to_accuracy, variance_term, ChannelSamples, EnergyModel, GradientBound, LearningParams,
    Scenario, UplinkAverage,
};
use fedq_core::chipenergy::{compute_energy, ChipProfile, PICOJOULE};
use fedq_core::fedsim::{run_federated, ChannelMode, DeltaRange, FederatedSetup, StopRule};
use fedq_core::qnn::{count_arch, local_round, Activation, Dataset, LayerSpec, ModelState, NetworkArch, QuadraticModel};
use fedq_core::radio::{achievable_rate, RadioParams};
use fedq_core::stream::substream;
use fedq_core::Precision;
use proptest::prelude::*;

fn prec(bits: u32) -> Precision {
    Precision::new(bits, 32).unwrap()
}

fn learning(n: usize, k: usize, i: usize, g: f64, sigma: f64, eps: f64) -> LearningParams {
    LearningParams {
        lipschitz: 1.0,
        strong_convexity: 1.0,
        grad_bound: g,
        gradient_bound: GradientBound::SquaredNorm,
        sigma: vec![sigma; n],
        beta: 5.0,
        gamma: 1.0,
        epsilon: eps,
        local_steps: i,
        devices_per_round: k,
        enforce_step_condition: false,
    }
}

fn radio() -> RadioParams {
    RadioParams {
        tx_power_w: 0.1,
        bandwidth_hz: 1e7,
        noise_psd_w_per_hz: 1e-13,
        area_side_m: 100.0,
        pathloss_exponent: 2.0,
    }
}

fn arch_strategy() -> impl Strategy<Value = NetworkArch> {
    (0u64..100_000_000, 0u64..10_000_000, 0u64..100_000).prop_map(|(c, s, o)| NetworkArch::new(c, s, o))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn chip_energy_increases_with_precision(arch in arch_strategy(), side in 1u64..32, alpha in 1.01f64..1.99) {
        prop_assume!(arch.n_mac > 0 || arch.n_weights > 0 || arch.n_outputs > 0);
        let chip = ChipProfile::new(3.7 * PICOJOULE, alpha, side * side, 32).unwrap();
        let mut last = 0.0;
        for bits in 1..=32 {
            let e = compute_energy(prec(bits), &arch, &chip).unwrap();
            prop_assert!(e.total > last);
            prop_assert_eq!(e.total, e.e_compute + e.e_weights + e.e_activations);
            last = e.total;
        }
    }

    #[test]
    fn chip_energy_linear_in_mac_energy(arch in arch_strategy(), bits in 1u32..=32, scale in 0.1f64..10.0) {
        let a = ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap();
        let b = ChipProfile { mac_energy_j: a.mac_energy_j * scale, ..a };
        let ea = compute_energy(prec(bits), &arch, &a).unwrap().total;
        let eb = compute_energy(prec(bits), &arch, &b).unwrap().total;
        prop_assert!((eb - scale * ea).abs() <= 1e-12 * eb.abs().max(1e-300));
    }

    #[test]
    fn variance_monotone(n in 2usize..100, kf in 0.0f64..1.0, i in 1usize..20, g in 0.001f64..5.0, d in 1u64..100_000_000) {
        let k = 1 + ((n - 1) as f64 * kf) as usize;
        let p = learning(n, k, i, g, 1.0, 0.01);
        let by_n: Vec<f64> = (1..=32).map(|b| variance_term(&p, prec(b), d).unwrap()).collect();
        prop_assert!(by_n.iter().all(|v| *v > 0.0));
        for w in by_n.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
        prop_assert!(variance_term(&p, prec(1), d + 1).unwrap() > by_n[0]);
        let more_steps = LearningParams { local_steps: i + 1, ..p.clone() };
        prop_assert!(variance_term(&more_steps, prec(8), d).unwrap() > variance_term(&p, prec(8), d).unwrap());
    }

    #[test]
    fn rounds_linear_in_v_and_decreasing_in_eps(v in 0.0f64..100.0, eps in 1e-4f64..1.0) {
        let p = learning(10, 5, 3, 0.1, 1.0, eps);
        let t = rounds_to_accuracy(&p, v).unwrap();
        let raw = v / (2.0 * eps) - 1.0;
        prop_assert_eq!(t, raw.max(1.0));
        let tighter = LearningParams { epsilon: eps / 2.0, ..p.clone() };
        let t2 = rounds_to_accuracy(&tighter, v).unwrap();
        prop_assert!(t2 >= t);
        if raw > 1.0 {
            prop_assert!(t2 > t);
            let doubled = rounds_to_accuracy(&p, 2.0 * v).unwrap();
            prop_assert!((doubled + 1.0 - 2.0 * (t + 1.0)).abs() <= 1e-9 * doubled);
        }
    }

    #[test]
    fn optimizer_is_global_on_grid(seed in any::<u64>(), i in 1usize..15, eps in 1e-3f64..1e-1, d in 1_000u64..10_000_000) {
        let scenario = Scenario {
            learning: learning(12, 6, i, 0.02, 1.0, eps),
            arch: NetworkArch::new(d * 100, d, d / 100),
            chip: ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap(),
            radio: radio(),
            channel_samples: 32,
            seed,
            uplink_average: UplinkAverage::ErgodicRate,
            uplink_dim: None,
        };
        let model = EnergyModel::new(&scenario).unwrap();
        let opt = optimize_with(&model).unwrap();
        prop_assert!((1..=32).contains(&opt.n_star));
        let best = opt.best().f_e;
        for p in &opt.curve {
            prop_assert!(best <= p.f_e);
        }
        let again = optimize_with(&EnergyModel::new(&scenario).unwrap()).unwrap();
        prop_assert_eq!(again, opt);
    }

    #[test]
    fn rate_monotone(h in 1e-12f64..1e-2, f in 1.01f64..4.0) {
        let r = radio();
        let base = achievable_rate(h, &r);
        prop_assert!(achievable_rate(h * f, &r) > base);
        let louder = RadioParams { tx_power_w: r.tx_power_w * f, ..r };
        let wider = RadioParams { bandwidth_hz: r.bandwidth_hz * f, ..r };
        prop_assert!(achievable_rate(h, &louder) > base);
        prop_assert!(achievable_rate(h, &wider) > base);
    }

    #[test]
    fn dense_counts_add(widths in proptest::collection::vec(1usize..64, 1..6)) {
        let layers: Vec<LayerSpec> = widths.windows(2).map(|w| LayerSpec::dense(w[0], w[1], Activation::Relu)).collect();
        let total = count_arch(&layers);
        let parts = layers.iter().map(|l| count_arch(std::slice::from_ref(l)));
        let (mut c, mut s, mut o) = (0, 0, 0);
        for p in parts {
            c += p.n_mac;
            s += p.n_weights;
            o += p.n_outputs;
        }
        prop_assert_eq!(total, NetworkArch::new(c, s, o));
        prop_assert_eq!(total.dim(), total.n_weights);
    }

    #[test]
    fn shadow_weights_stay_clipped(
        start in proptest::collection::vec(-1.0f64..=1.0, 4),
        target in proptest::collection::vec(-1.0f64..=1.0, 4),
        eta in 0.0f64..10.0,
        bits in 1u32..=32,
        seed in any::<u64>(),
    ) {
        let q = QuadraticModel { dim: 4, curvature: 3.0 };
        let shard = Dataset::new(target.iter().map(|t| -t * 0.9).chain(target.iter().cloned()).collect(), 4, vec![0, 0]).unwrap();
        let mut rng = substream(seed, &[]);
        let mut model = ModelState::new(start.clone(), prec(bits), &mut rng).unwrap();
        let before = model.shadow().to_vec();
        let delta = local_round(&q, &mut model, &shard, 7, eta, 2, &mut rng).unwrap();
        prop_assert!(model.shadow().iter().all(|w| (-1.0..=1.0).contains(w)));
        prop_assert!(model.quantized().iter().all(|w| (-1.0..=1.0).contains(w)));
        for ((d, a), b) in delta.iter().zip(model.shadow()).zip(&before) {
            prop_assert_eq!(*d, a - b);
            prop_assert!((-2.0..=2.0).contains(d));
        }
    }

    #[test]
    fn zero_updates_conserve_global_model(init in proptest::collection::vec(-1.0f64..=1.0, 3), seed in any::<u64>(), bits in 1u32..=32) {
        let scenario = Scenario {
            learning: LearningParams {
                lipschitz: 0.5,
                strong_convexity: 0.5,
                beta: 2.5,
                gamma: 5.0,
                ..learning(3, 2, 2, 1.0, 0.1, 0.01)
            },
            arch: NetworkArch::new(3, 3, 3),
            chip: ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap(),
            radio: radio(),
            channel_samples: 1,
            seed,
            uplink_average: UplinkAverage::ErgodicRate,
            uplink_dim: None,
        };
        let shard = Dataset::new(vec![0.1, 0.2, 0.3], 3, vec![0]).unwrap();
        let setup = FederatedSetup {
            learner: Arc::new(QuadraticModel { dim: 3, curvature: 0.5 }),
            shards: vec![shard; 3],
            initial: init.clone(),
            batch_size: 1,
            delta_range: DeltaRange::Clip,
            channel: ChannelMode::Fading,
            lr_override: Some(0.0),
        };
        let rec = run_federated(&scenario, &setup, prec(bits), StopRule::MaxRounds(3), seed).unwrap();
        prop_assert_eq!(rec.final_weights, init);
        let sum: f64 = rec.rounds.iter().map(|r| r.energy_j()).sum();
        prop_assert_eq!(rec.total_energy_j, sum);
    }
}

#[test]
fn common_random_numbers_give_deterministic_curves() {
    let scenario = Scenario {
        learning: learning(50, 30, 5, 0.02, 1.0, 0.01),
        arch: NetworkArch::new(20_640_000, 180_000, 1354),
        chip: ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap(),
        radio: radio(),
        channel_samples: 500,
        seed: 8,
        uplink_average: UplinkAverage::EnergyMean,
        uplink_dim: None,
    };
    let samples = ChannelSamples::draw(&scenario).unwrap();
    assert_eq!(samples, ChannelSamples::draw(&scenario).unwrap());
    let a = EnergyModel::with_samples(&scenario, &samples).unwrap().curve().unwrap();
    let b = EnergyModel::new(&scenario).unwrap().curve().unwrap();
    assert_eq!(a, b);
}

#[test]
fn full_precision_local_round_tracks_reference() {
    // Single-point shard: the batch is fixed, so the unquantized trajectory is known.
    let q = QuadraticModel { dim: 2, curvature: 1.0 };
    let x = [0.3, -0.7];
    let shard = Dataset::new(x.to_vec(), 2, vec![0]).unwrap();
    let mut rng = substream(21, &[]);
    let mut model = ModelState::new(vec![-0.5, 0.5], prec(32), &mut rng).unwrap();
    let steps = 5;
    let eta = 0.3;
    let delta = local_round(&q, &mut model, &shard, steps, eta, 1, &mut rng).unwrap();
    let mut w = [-0.5f64, 0.5];
    for _ in 0..steps {
        for j in 0..2 {
            w[j] = (w[j] - eta * (w[j] - x[j])).clamp(-1.0, 1.0);
        }
    }
    let envelope = steps as f64 * eta * 1.0 * 2f64.powi(-31);
    for j in 0..2 {
        assert!((model.shadow()[j] - w[j]).abs() <= envelope, "{} vs {}", model.shadow()[j], w[j]);
        assert_eq!(delta[j], model.shadow()[j] - [-0.5, 0.5][j]);
    }
}
