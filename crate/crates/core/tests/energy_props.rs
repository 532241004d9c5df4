//! Spike recounts, IFR additivity and the efficiency identity.

use eqspike_core::energy::{collect_ifr, efficiency, layer_ops, norm_ops, EnergyReport, MAC_ACC_RATIO};
use eqspike_core::equilibrium::Simulator;
use eqspike_core::model::{InitConfig, ModelConfig, ModelParams};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toy() -> (ModelConfig, ModelParams) {
    let cfg = ModelConfig {
        vocab_size: 6,
        n_encoders: 2,
        seq_len: 4,
        d_emb: 4,
        d_intermediate: 6,
        ..ModelConfig::default()
    };
    let init = InitConfig {
        weight_std: 0.5,
        embedding_std: 1.0,
    };
    let p = ModelParams::init_with(&cfg, &mut ChaCha8Rng::seed_from_u64(11), &init);
    (cfg, p)
}

#[test]
fn ifr_is_a_recount_and_additive_over_windows() {
    let (cfg, p) = toy();
    let tokens = [1, 2, 5, 3];
    let ids = cfg.layer_ids();
    let mut sim = Simulator::new(&cfg, &p, &tokens, 5).unwrap();
    let mut window = [vec![0u64; ids.len()], vec![0u64; ids.len()]];
    let (t1, t2) = (17, 23);
    let mut first = None;
    for t in 0..t1 + t2 {
        sim.step().unwrap();
        let w = usize::from(t >= t1);
        for (c, id) in window[w].iter_mut().zip(&ids) {
            *c += sim.state().layer(*id).last_spikes().count();
        }
        if t + 1 == t1 {
            first = Some(sim.record(false).unwrap());
        }
    }
    let first = collect_ifr(&first.unwrap(), false).unwrap();
    let rec = sim.record(false).unwrap();
    let both = collect_ifr(&rec, false).unwrap();
    let per_step = collect_ifr(&rec, true).unwrap();
    assert!(window[0].iter().sum::<u64>() > 0);
    for i in 0..ids.len() {
        let n = rec.neurons[i] as f64;
        assert_eq!(first[i], window[0][i] as f64 / n);
        assert!((both[i] - (window[0][i] + window[1][i]) as f64 / n).abs() < 1e-12);
        assert!((both[i] - first[i] - window[1][i] as f64 / n).abs() < 1e-12);
        assert!((per_step[i] - both[i] / (t1 + t2) as f64).abs() < 1e-12);
    }
    let report = EnergyReport::from_record(&cfg, &rec, false).unwrap();
    assert_eq!(report.layer_ops, layer_ops(&cfg));
    assert_eq!(report.norm_ops, norm_ops(&both, &report.layer_ops).unwrap());
}

#[test]
fn disabled_counters_are_an_error() {
    let (cfg, p) = toy();
    let mut sim = Simulator::new(&cfg, &p, &[0, 1, 2, 3], 2).unwrap().without_spike_counts();
    sim.step().unwrap();
    assert!(collect_ifr(&sim.record(false).unwrap(), false).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn efficiency_times_norm_ops_is_the_energy_ratio(n in 1e-6f64..1e3) {
        let e = efficiency(n).unwrap();
        prop_assert!((e * n - MAC_ACC_RATIO).abs() <= 4.0 * f64::EPSILON * MAC_ACC_RATIO);
    }

    #[test]
    fn norm_ops_is_weighted_mean_of_rates(
        ifr in prop::collection::vec(0.0f64..1.0, 1..8),
        seed_ops in prop::collection::vec(1.0f64..1e4, 9),
    ) {
        let ops = &seed_ops[..ifr.len() + 1];
        let total: f64 = ops.iter().sum();
        let expect: f64 = ifr.iter().enumerate().map(|(i, f)| f * ops[i + 1]).sum::<f64>() / total;
        let got = norm_ops(&ifr, ops).unwrap();
        prop_assert!((got - expect).abs() < 1e-12);
        prop_assert!(got <= 1.0);
    }
}
