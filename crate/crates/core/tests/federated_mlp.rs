use std::sync::Arc;

use fedq_core::analysis::{GradientBound, LearningParams, Scenario, UplinkAverage};
use fedq_core::chipenergy::{ChipProfile, PICOJOULE};
use fedq_core::fedsim::{run_federated, ChannelMode, DeltaRange, FederatedSetup, RunRecord, StopRule};
use fedq_core::qnn::{synthetic_blobs, Activation, Dataset, LayerSpec, Learner, Mlp};
use fedq_core::radio::RadioParams;
use fedq_core::stream::substream;
use fedq_core::Precision;

fn setup(bits: u32, seed: u64) -> RunRecord {
    let net = Mlp::new(&[
        LayerSpec::dense(2, 16, Activation::Relu).with_batchnorm(),
        LayerSpec::dense(16, 2, Activation::None),
    ])
    .unwrap();
    let shards: Vec<Dataset> = (0..4)
        .map(|k| synthetic_blobs(2, 2, 30, 0.15, &mut substream(3, &[k])).unwrap())
        .collect();
    let initial = net.init_weights(&mut substream(4, &[]));
    let arch = net.arch();
    let scenario = Scenario {
        learning: LearningParams {
            lipschitz: 1.0,
            strong_convexity: 1.0,
            grad_bound: 1.0,
            gradient_bound: GradientBound::SquaredNorm,
            sigma: vec![1.0; 4],
            beta: 5.0,
            gamma: 1.0,
            epsilon: 0.01,
            local_steps: 5,
            devices_per_round: 2,
            enforce_step_condition: false,
        },
        arch,
        chip: ChipProfile::new(3.7 * PICOJOULE, 1.25, 64, 32).unwrap(),
        radio: RadioParams {
            tx_power_w: 0.1,
            bandwidth_hz: 1e7,
            noise_psd_w_per_hz: 1e-13,
            area_side_m: 100.0,
            pathloss_exponent: 2.0,
        },
        channel_samples: 1,
        seed,
        uplink_average: UplinkAverage::ErgodicRate,
        uplink_dim: None,
    };
    let setup = FederatedSetup {
        learner: Arc::new(net),
        shards,
        initial,
        batch_size: 8,
        delta_range: DeltaRange::Clip,
        channel: ChannelMode::Fading,
        lr_override: Some(0.2),
    };
    run_federated(
        &scenario,
        &setup,
        Precision::new(bits, 32).unwrap(),
        StopRule::MaxRounds(25),
        seed,
    )
    .unwrap()
}

#[test]
fn quantized_mlp_learns_blobs() {
    for bits in [6, 12] {
        let rec = setup(bits, 1);
        assert!(
            rec.final_loss() < 0.7 * rec.initial_loss,
            "n={bits}: {} -> {}",
            rec.initial_loss,
            rec.final_loss()
        );
        assert!(rec.final_weights.iter().all(|w| (-1.0..=1.0).contains(w)));
        assert_eq!(rec.rounds.len(), 25);
        assert!(rec.rounds.iter().all(|r| r.devices.len() == 2));
    }
}

#[test]
fn mlp_run_is_reproducible() {
    let a = setup(8, 9);
    let b = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap()
        .install(|| setup(8, 9));
    assert_eq!(a, b);
    assert_ne!(a, setup(8, 10));
}

#[test]
fn lower_precision_spends_less_energy() {
    let low = setup(4, 2);
    let high = setup(16, 2);
    assert!(low.total_uplink_j < high.total_uplink_j);
    assert!(low.total_compute_j < high.total_compute_j);
}
