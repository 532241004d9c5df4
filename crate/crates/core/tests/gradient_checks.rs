//! Implicit and backprop gradients against finite differences.

use eqspike_core::equilibrium::{simulate_to_equilibrium, ConvergenceCriterion, SurrogateNet};
use eqspike_core::gradients::{
    gradcheck_params, loss_gradients, random_toy_config, tight_picard, toy_gradient_check, AdjointMethod,
    ImplicitSolveConfig, ProbeLoss,
};
use eqspike_core::model::{ModelConfig, ModelParams};
use eqspike_core::numerics::{ParamId, RealTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn run_check(seed: u64, feedback: bool) -> (f64, usize) {
    let (_, report) = toy_gradient_check(seed, feedback, 80, STEP).unwrap();
    assert!(report.checked > 40, "too many exclusions: {report:?}");
    (report.max_relative_error, report.checked)
}

#[test]
fn feedforward_gradients_match_finite_differences() {
    for seed in 0..12 {
        let (err, _) = run_check(seed, false);
        assert!(err < 1e-3, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn feedback_gradients_match_finite_differences() {
    for seed in 100..110 {
        let (err, _) = run_check(seed, true);
        assert!(err < 1e-2, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn dense_and_iterative_adjoints_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = ModelConfig {
        n_encoders: 2,
        d_emb: 4,
        n_heads: 1,
        ..random_toy_config(&mut rng, true)
    };
    let params = gradcheck_params(&cfg, &mut rng);
    let tokens: Vec<usize> = (0..cfg.seq_len).map(|i| i % cfg.vocab_size).collect();
    let probe = ProbeLoss::random(&cfg, &mut rng);
    let mut net = SurrogateNet::new(&cfg, &params).unwrap();
    net.picard = tight_picard();
    let iterative = loss_gradients(&net, None, &tokens, |t, g| probe.record(t, g), &ImplicitSolveConfig::default()).unwrap();
    let dense = loss_gradients(
        &net,
        None,
        &tokens,
        |t, g| probe.record(t, g),
        &ImplicitSolveConfig {
            method: AdjointMethod::Dense,
            ..ImplicitSolveConfig::default()
        },
    )
    .unwrap();
    assert!(iterative.adjoint_iterations > 0);
    for (id, g) in &iterative.grads {
        assert!(g.max_abs_diff(&dense.grads[id]).unwrap() < 1e-9, "param {id:?}");
    }
}

#[test]
fn parameter_free_loss_has_zero_gradients() {
    let cfg = ModelConfig::default();
    let params = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
    let net = SurrogateNet::new(&cfg, &params).unwrap();
    let tokens = vec![1; cfg.seq_len];
    let res = loss_gradients(
        &net,
        None,
        &tokens,
        |t, _| Ok(t.constant(RealTensor::scalar(3.0).unwrap())),
        &ImplicitSolveConfig::default(),
    )
    .unwrap();
    assert_eq!(res.loss, 3.0);
    assert!(res.grads.values().all(|g| g.max_abs() == 0.0));
}

#[test]
fn gradients_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = random_toy_config(&mut rng, true);
    let params = gradcheck_params(&cfg, &mut rng);
    let probe = ProbeLoss::random(&cfg, &mut rng);
    let tokens: Vec<usize> = (0..cfg.seq_len).collect();
    let net = SurrogateNet::new(&cfg, &params).unwrap();
    let run = || loss_gradients(&net, None, &tokens, |t, g| probe.record(t, g), &ImplicitSolveConfig::default()).unwrap();
    assert_eq!(run(), run());
}

#[test]
fn clamped_layer_passes_no_gradient() {
    // A huge negative input bias clamps the input layer at 0; nothing upstream
    // of it (embeddings, input bias) receives gradient.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let cfg = random_toy_config(&mut rng, false);
    let mut params = gradcheck_params(&cfg, &mut rng);
    params.b_in = RealTensor::filled(&[cfg.d_emb], -50.0);
    let probe = ProbeLoss::random(&cfg, &mut rng);
    let tokens: Vec<usize> = (0..cfg.seq_len).collect();
    let net = SurrogateNet::new(&cfg, &params).unwrap();
    let res = loss_gradients(&net, None, &tokens, |t, g| probe.record(t, g), &ImplicitSolveConfig::default()).unwrap();
    for id in 0..3 {
        assert_eq!(res.grads[&ParamId(id)].max_abs(), 0.0);
    }
    assert!(res.max_abs() > 0.0);
}

#[test]
fn tape_size_independent_of_forward_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = random_toy_config(&mut rng, false);
    let params = gradcheck_params(&cfg, &mut rng);
    let probe = ProbeLoss::random(&cfg, &mut rng);
    let tokens: Vec<usize> = (0..cfg.seq_len).collect();
    let net = SurrogateNet::new(&cfg, &params).unwrap();
    let sizes: Vec<usize> = [5, 80, 400]
        .iter()
        .map(|&t| {
            let rec = simulate_to_equilibrium(&cfg, &params, &tokens, &ConvergenceCriterion::fixed(t)).unwrap();
            loss_gradients(&net, Some(&rec), &tokens, |tp, g| probe.record(tp, g), &ImplicitSolveConfig::default())
                .unwrap()
                .tape_nodes
        })
        .collect();
    assert!(sizes.windows(2).all(|w| w[0] == w[1]), "{sizes:?}");
}
