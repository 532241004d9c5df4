//! Binarity, rate bounds, IF conservation and ASR recursion of neuron layers.

use eqspike_core::neuron::{LifParams, NeuronState};
use eqspike_core::numerics::RealTensor;
use proptest::prelude::*;

fn config() -> ProptestConfig {
    ProptestConfig::with_cases(1000)
}

fn currents(width: usize, steps: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(lo..hi, width), steps)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn spikes_binary_and_rates_bounded(
        v_th in 0.1f64..3.0,
        gamma in 0.05f64..=1.0,
        input in currents(4, 30, -3.0, 3.0),
    ) {
        let mut n = NeuronState::new(&[4], LifParams::new(v_th, gamma).unwrap());
        for step in &input {
            let s = n.step(&RealTensor::vector(step.clone()).unwrap()).unwrap();
            let real = s.to_real();
            prop_assert!(real.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(s.count() as usize, s.bits().iter().filter(|&&b| b).count());
            let asr = n.asr().unwrap();
            prop_assert!(asr.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
            prop_assert!((0.0..=1.0).contains(&n.mean_asr()));
        }
    }

    #[test]
    fn if_conservation(
        v_th in 0.1f64..3.0,
        input in currents(3, 60, 0.0, 2.0),
    ) {
        let mut n = NeuronState::new(&[3], LifParams::integrate_and_fire(v_th).unwrap());
        let mut spikes = [0u64; 3];
        let mut total = [0.0f64; 3];
        for step in &input {
            let s = n.step(&RealTensor::vector(step.clone()).unwrap()).unwrap();
            for j in 0..3 {
                spikes[j] += s.bits()[j] as u64;
                total[j] += step[j];
            }
        }
        let u = n.membrane();
        for j in 0..3 {
            prop_assert!((v_th * spikes[j] as f64 + u.data()[j] - total[j]).abs() < 1e-9);
        }
    }

    #[test]
    fn asr_recursion_matches_direct_sum(
        gamma in 0.5f64..=1.0,
        steps in 1usize..1000,
        seed_bits in prop::collection::vec(any::<bool>(), 64),
        drive in 0.0f64..2.0,
    ) {
        let mut n = NeuronState::new(&[1], LifParams::new(1.0, gamma).unwrap());
        let mut history = Vec::with_capacity(steps);
        for t in 0..steps {
            let current = if seed_bits[t % 64] { drive } else { 0.0 };
            let s = n.step(&RealTensor::vector(vec![current]).unwrap()).unwrap();
            history.push(s.bits()[0]);
        }
        let t = steps - 1;
        let (mut num, mut den) = (0.0, 0.0);
        for (tau, &s) in history.iter().enumerate() {
            let w = gamma.powi((t - tau) as i32);
            num += w * s as u8 as f64;
            den += w;
        }
        prop_assert!((n.asr().unwrap().data()[0] - num / den).abs() < 1e-10);
    }
}

#[test]
fn if_rate_equals_spike_count_over_steps() {
    let mut n = NeuronState::new(&[5], LifParams::integrate_and_fire(1.0).unwrap());
    let drive = RealTensor::vector(vec![0.05, 0.3, 0.77, 1.4, 0.0]).unwrap();
    let mut counts = [0u32; 5];
    for _ in 0..200 {
        let s = n.step(&drive).unwrap();
        for (c, &b) in counts.iter_mut().zip(s.bits()) {
            *c += b as u32;
        }
    }
    for (a, c) in n.asr().unwrap().data().iter().zip(counts) {
        assert!((a - c as f64 / 200.0).abs() < 1e-12);
    }
}
