//! Spike raster oracle, binarity and spike conservation of the full model.

use eqspike_core::equilibrium::{simulate_to_equilibrium, ConvergenceCriterion};
use eqspike_core::model::{embed, model_step, InitConfig, LayerId, ModelConfig, ModelParams, ModelState, SubLayer};
use eqspike_core::neuron::LifParams;
use eqspike_core::numerics::RealTensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Mat = Vec<Vec<f64>>;


fn bits(m: &Mat) -> Vec<Vec<bool>> {
    m.iter().map(|r| r.iter().map(|&v| v == 1.0).collect()).collect()
}

fn matmul(a: &Mat, b: &RealTensor) -> Mat {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

fn add_bias(a: &Mat, b: &RealTensor) -> Mat {
    a.iter().map(|r| r.iter().zip(b.data()).map(|(x, y)| x + y).collect()).collect()
}

fn norm(a: &Mat, gain: &RealTensor, shift: &RealTensor) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, v)| gain.data()[j] * (v - mean) / (var + 1e-12).sqrt() + shift.data()[j])
                .collect()
        })
        .collect()
}

fn gelu(a: &Mat) -> Mat {
    a.iter()
        .map(|r| r.iter().map(|&x| x * 0.5 * (1.0 + libm::erf(x / 2f64.sqrt()))).collect())
        .collect()
}

struct Lif {
    u: Mat,
    v_th: f64,
    gamma: f64,
}

impl Lif {
    fn new(rows: usize, cols: usize, lif: LifParams) -> Self {
        Self {
            u: vec![vec![0.0; cols]; rows],
            v_th: lif.v_th,
            gamma: lif.gamma,
        }
    }

    fn step(&mut self, current: &Mat) -> Mat {
        let mut s = current.clone();
        for (r, row) in current.iter().enumerate() {
            for (c, &i) in row.iter().enumerate() {
                let u = &mut self.u[r][c];
                *u = self.gamma * *u + i;
                s[r][c] = if *u > self.v_th { 1.0 } else { 0.0 };
                *u -= self.v_th * s[r][c];
            }
        }
        s
    }
}

struct OracleEncoder {
    key: Lif,
    value: Lif,
    attn: Lif,
    il1: Lif,
    il2: Lif,
    out: Lif,
}

/// Straight-line reimplementation; returns the raster of every layer in
/// `layer_ids` order for each step.
fn oracle_rasters(cfg: &ModelConfig, p: &ModelParams, tokens: &[usize], steps: usize) -> Vec<Vec<Vec<Vec<bool>>>> {
    let (n, d, di, lif) = (cfg.seq_len, cfg.d_emb, cfg.d_intermediate, cfg.lif);
    let emb: Mat = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| (0..d).map(|c| p.token_emb.get(t, c) + p.pos_emb.get(pos, c)).collect())
        .collect();
    let mut input = Lif::new(n, d, lif);
    let mut encs: Vec<OracleEncoder> = (0..cfg.n_encoders)
        .map(|_| OracleEncoder {
            key: Lif::new(n, d, lif),
            value: Lif::new(n, d, lif),
            attn: Lif::new(n, d, lif),
            il1: Lif::new(n, d, lif),
            il2: Lif::new(n, di, lif),
            out: Lif::new(n, d, lif),
        })
        .collect();
    let dk = d / cfg.n_heads;
    let mut out = Vec::new();
    for _ in 0..steps {
        let mut raster = Vec::new();
        let mut s = input.step(&add_bias(&emb, &p.b_in));
        raster.push(bits(&s));
        for (st, ep) in encs.iter_mut().zip(&p.encoders) {
            let a = &ep.attention;
            let q = add_bias(&matmul(&s, &a.w_q), &a.b_q);
            let sk = st.key.step(&add_bias(&matmul(&s, &a.w_k), &a.b_k));
            let sv = st.value.step(&add_bias(&matmul(&s, &a.w_v), &a.b_v));
            let mut attn = vec![vec![0.0; d]; n];
            for h in 0..cfg.n_heads {
                let cols = h * dk..(h + 1) * dk;
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| cols.clone().map(|c| q[i][c] * sk[j][c]).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for c in cols.clone() {
                        attn[i][c] = (0..n).map(|j| e[j] / z * sv[j][c]).sum();
                    }
                }
            }
            let s_attn = st.attn.step(&add_bias(&attn, &a.b_attn));
            let s_il1 = st.il1.step(&add_bias(&norm(&add(&matmul(&s_attn, &ep.w_il1), &s), &ep.ln1_gain, &ep.ln1_shift), &ep.b_il1));
            let s_il2 = st.il2.step(&add_bias(&gelu(&matmul(&s_il1, &ep.w_il2)), &ep.b_il2));
            let s_out = st.out.step(&add_bias(&norm(&add(&matmul(&s_il2, &ep.w_out), &s_il1), &ep.ln2_gain, &ep.ln2_shift), &ep.b_out));
            raster.extend([&sk, &sv, &s_attn, &s_il1, &s_il2, &s_out].map(bits));
            s = s_out;
        }
        out.push(raster);
    }
    out
}

fn noisy_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = InitConfig {
        weight_std: 0.5,
        embedding_std: 1.0,
    };
    let mut p = ModelParams::init_with(cfg, &mut rng, &init);
    for t in p.tensors_mut() {
        let data: Vec<f64> = t.data().iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        *t = RealTensor::new(t.shape().to_vec(), data).unwrap();
    }
    p
}

fn toy(n_encoders: usize, lif: LifParams) -> ModelConfig {
    ModelConfig {
        vocab_size: 7,
        n_encoders,
        seq_len: 4,
        d_emb: 4,
        d_intermediate: 6,
        n_heads: 2,
        lif,
        ..ModelConfig::default()
    }
}

#[test]
fn spike_raster_matches_straight_line_oracle() {
    for seed in 0..20 {
        let lif = LifParams::new(0.7 + 0.05 * seed as f64, if seed % 2 == 0 { 1.0 } else { 0.9 }).unwrap();
        let cfg = toy(2, lif);
        let p = noisy_params(&cfg, seed);
        let tokens = [1, (seed as usize) % 7, 3, 6];
        let expected = oracle_rasters(&cfg, &p, &tokens, 5);
        let emb = embed(&tokens, &p, &cfg).unwrap();
        let mut state = ModelState::new(&cfg);
        let mut active = 0;
        for raster in &expected {
            model_step(&mut state, &p, &cfg, &emb).unwrap();
            for (id, want) in cfg.layer_ids().iter().zip(raster) {
                let got = state.layer(*id).last_spikes();
                let got: Vec<Vec<bool>> = (0..got.rows()).map(|r| got.row(r).to_vec()).collect();
                assert_eq!(&got, want, "seed {seed} layer {}", id.name());
                active += want.iter().flatten().filter(|&&b| b).count();
            }
        }
        assert!(active > 0, "seed {seed} produced no spikes");
    }
}

fn model_case() -> impl Strategy<Value = (u64, usize, f64, f64, bool, Vec<usize>)> {
    (
        any::<u64>(),
        1usize..=2,
        0.3f64..2.0,
        0.8f64..=1.0,
        any::<bool>(),
        prop::collection::vec(0usize..7, 4),
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn model_spikes_binary_and_conserved((seed, n_enc, v_th, gamma, feedback, tokens) in model_case()) {
        let cfg = ModelConfig {
            feedback_enabled: feedback,
            ..toy(n_enc, LifParams::new(v_th, gamma).unwrap())
        };
        let p = noisy_params(&cfg, seed);
        let emb = embed(&tokens, &p, &cfg).unwrap();
        let mut state = ModelState::new(&cfg);
        let ids = cfg.layer_ids();
        let mut counts = vec![0u64; ids.len()];
        let steps = 6;
        for _ in 0..steps {
            let scores = model_step(&mut state, &p, &cfg, &emb).unwrap();
            prop_assert_eq!(scores.len(), n_enc);
            for (c, id) in counts.iter_mut().zip(&ids) {
                let s = state.layer(*id).last_spikes();
                prop_assert!(s.to_real().data().iter().all(|&v| v == 0.0 || v == 1.0));
                *c += s.count();
            }
            prop_assert!(state.last_output.to_real().data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        prop_assert_eq!(state.counter.spike_multiplies, 0);
        for (c, id) in counts.iter().zip(&ids) {
            let layer = state.layer(*id);
            prop_assert_eq!(*c, layer.spike_total());
            prop_assert!(*c <= (steps * layer.neurons()) as u64);
            let asr = layer.asr().unwrap();
            prop_assert!(asr.data().iter().all(|&a| (0.0..=1.0).contains(&a)));
            if gamma == 1.0 {
                prop_assert!((asr.sum() * steps as f64 - *c as f64).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn record_matches_layer_accessors_and_bounds() {
    let cfg = toy(2, LifParams::default());
    let p = noisy_params(&cfg, 3);
    let crit = ConvergenceCriterion::default();
    let rec = simulate_to_equilibrium(&cfg, &p, &[1, 2, 3, 4], &crit).unwrap();
    assert!(rec.t_used <= crit.t_max);
    assert!(rec.asr.iter().all(|a| a.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    let neurons: Vec<usize> = cfg.layer_widths().iter().map(|w| w * cfg.seq_len).collect();
    assert_eq!(rec.neurons, neurons);
    assert_eq!(rec.layers, cfg.layer_ids());
    assert_eq!(rec.layers[1], LayerId::Encoder(0, SubLayer::Key));
}
