//! Spiking self-attention and its steady-state surrogate.
//!
//! Per time step, with input spikes `S_x`:
//!
//! ```text
//! Q   = S_x·W_Q + b_Q                      (real valued, no LIF layer)
//! S_K = LIF(S_x·W_K + b_K)                 (spikes)
//! S_V = LIF(S_x·W_V + b_V)                 (spikes)
//! I   = π(s · Q·S_Kᵀ) · S_V,   s = 1/√d_k  (per head, concatenated)
//! ```
//!
//! Every product with a spike operand goes through the accumulate-only
//! kernels below. At equilibrium the rates satisfy
//! `a = clip01((π(s·(a_x W_Q + b_Q)·a_kᵀ)·a_v + b)/v_th)`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronState, SpikeTensor};
use crate::numerics::{softmax_rows, RealTensor, Tape, Var};

/// Normalization applied to attention scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PiMode {
    #[default]
    Softmax,
    Identity,
}

/// Operation tallies for one simulation context.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounter {
    /// Additions performed by the spike kernels.
    pub accumulates: u64,
    /// Multiplications with a spike operand. The spike kernels never
    /// multiply, so this stays zero; it exists so that claim is checkable.
    pub spike_multiplies: u64,
    /// Real×real multiplications (score scaling).
    pub dense_multiplies: u64,
}

impl OpCounter {
    pub fn merge(&mut self, other: &OpCounter) {
        self.accumulates += other.accumulates;
        self.spike_multiplies += other.spike_multiplies;
        self.dense_multiplies += other.dense_multiplies;
    }
}

/// `S · W` for spikes `S` (n×k) and real `W` (k×m), by row accumulation.
pub fn spike_matmul(spikes: &SpikeTensor, w: &RealTensor, counter: &mut OpCounter) -> Result<RealTensor> {
    if spikes.cols() != w.rows() || w.shape().len() != 2 {
        return Err(Error::dim("spike_matmul", spikes.shape(), w.shape()));
    }
    let (n, m) = (spikes.rows(), w.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &bit) in spikes.row(i).iter().enumerate() {
            if bit {
                for (o, v) in orow.iter_mut().zip(w.row(p)) {
                    *o += v;
                }
                counter.accumulates += m as u64;
            }
        }
    }
    RealTensor::new(vec![n, m], out)
}

/// `A · Sᵀ` for real `A` (n×k) and spikes `S` (m×k).
pub fn real_matmul_spike_t(a: &RealTensor, spikes: &SpikeTensor, counter: &mut OpCounter) -> Result<RealTensor> {
    if a.cols() != spikes.cols() {
        return Err(Error::dim("real_matmul_spike_t", a.shape(), spikes.shape()));
    }
    let (n, m) = (a.rows(), spikes.rows());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = a.row(i);
        for j in 0..m {
            let mut s = 0.0;
            for (&x, &bit) in arow.iter().zip(spikes.row(j)) {
                if bit {
                    s += x;
                    counter.accumulates += 1;
                }
            }
            out[i * m + j] = s;
        }
    }
    RealTensor::new(vec![n, m], out)
}

/// `A · S` for real `A` (n×m) and spikes `S` (m×k).
pub fn real_matmul_spike(a: &RealTensor, spikes: &SpikeTensor, counter: &mut OpCounter) -> Result<RealTensor> {
    if a.cols() != spikes.rows() {
        return Err(Error::dim("real_matmul_spike", a.shape(), spikes.shape()));
    }
    let (n, m, k) = (a.rows(), a.cols(), spikes.cols());
    let mut out = vec![0.0; n * k];
    for i in 0..n {
        for j in 0..m {
            let x = a.get(i, j);
            for (c, &bit) in spikes.row(j).iter().enumerate() {
                if bit {
                    out[i * k + c] += x;
                    counter.accumulates += 1;
                }
            }
        }
    }
    RealTensor::new(vec![n, k], out)
}

/// Learnable attention tensors. Matrices are `d_emb × d_emb` with heads laid
/// out as contiguous column blocks; biases have length `d_emb`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = RealTensor> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    /// Bias of the attention-output LIF layer.
    pub b_attn: T,
}

impl AttentionWeights<RealTensor> {
    pub fn zeros(d_emb: usize) -> Self {
        let m = || RealTensor::zeros(&[d_emb, d_emb]);
        let v = || RealTensor::zeros(&[d_emb]);
        Self {
            w_q: m(),
            b_q: v(),
            w_k: m(),
            b_k: v(),
            w_v: m(),
            b_v: v(),
            b_attn: v(),
        }
    }

    pub fn d_emb(&self) -> usize {
        self.w_q.cols()
    }
}

/// Head layout and score normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionShape {
    pub n_heads: usize,
    pub d_emb: usize,
    pub pi_mode: PiMode,
}

impl AttentionShape {
    pub fn new(n_heads: usize, d_emb: usize, pi_mode: PiMode) -> Result<Self> {
        if n_heads == 0 || !d_emb.is_multiple_of(n_heads) {
            return Err(Error::Config(format!(
                "d_emb ({d_emb}) must be a positive multiple of n_heads ({n_heads})"
            )));
        }
        Ok(Self {
            n_heads,
            d_emb,
            pi_mode,
        })
    }

    pub fn d_k(&self) -> usize {
        self.d_emb / self.n_heads
    }

    /// `s = 1/√d_k`.
    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.d_k() as f64)
    }

    fn head_cols(&self, h: usize) -> (usize, usize) {
        (h * self.d_k(), (h + 1) * self.d_k())
    }

    fn normalize(&self, scores: &RealTensor) -> RealTensor {
        match self.pi_mode {
            PiMode::Softmax => softmax_rows(scores),
            PiMode::Identity => scores.clone(),
        }
    }
}

/// Scaled, pre-normalization attention scores, one `N_s × N_s` matrix per head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionScore {
    pub heads: Vec<RealTensor>,
}

impl AttentionScore {
    pub fn zeros(n_heads: usize, seq_len: usize) -> Self {
        Self {
            heads: vec![RealTensor::zeros(&[seq_len, seq_len]); n_heads],
        }
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    /// Elementwise mean of several score sets.
    pub fn average(scores: &[AttentionScore]) -> Result<AttentionScore> {
        let first = scores
            .first()
            .ok_or_else(|| Error::contract("cannot average an empty score window"))?;
        let mut acc: Vec<Vec<f64>> = first.heads.iter().map(|h| vec![0.0; h.len()]).collect();
        for s in scores {
            if s.heads.len() != acc.len() {
                return Err(Error::dim("AttentionScore::average", &[acc.len()], &[s.heads.len()]));
            }
            for (a, h) in acc.iter_mut().zip(&s.heads) {
                for (x, v) in a.iter_mut().zip(h.data()) {
                    *x += v;
                }
            }
        }
        let n = scores.len() as f64;
        let heads = acc
            .into_iter()
            .zip(&first.heads)
            .map(|(a, h)| RealTensor::new(h.shape().to_vec(), a.into_iter().map(|v| v / n).collect()))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionScore { heads })
    }
}

/// Key and Value LIF layers of one attention block.
#[derive(Debug, Clone)]
pub struct SpikingAttention {
    pub key: NeuronState,
    pub value: NeuronState,
}

/// Output of one spiking attention step.
#[derive(Debug, Clone)]
pub struct AttentionStep {
    /// Current for the attention-output LIF layer, before its bias.
    pub current: RealTensor,
    pub score: AttentionScore,
    pub key_spikes: SpikeTensor,
    pub value_spikes: SpikeTensor,
}

impl SpikingAttention {
    pub fn new(seq_len: usize, d_emb: usize, lif: LifParams) -> Self {
        Self {
            key: NeuronState::new(&[seq_len, d_emb], lif),
            value: NeuronState::new(&[seq_len, d_emb], lif),
        }
    }

    /// One time step of spiking attention.
    pub fn step(
        &mut self,
        input: &SpikeTensor,
        weights: &AttentionWeights,
        shape: &AttentionShape,
        counter: &mut OpCounter,
    ) -> Result<AttentionStep> {
        if input.shape() != self.key.shape() || input.shape() != self.value.shape() {
            return Err(Error::contract(format!(
                "attention neuron state {:?} not initialized for input {:?}",
                self.key.shape(),
                input.shape()
            )));
        }
        let q = spike_matmul(input, &weights.w_q, counter)?.add_row(&weights.b_q)?;
        let k_cur = spike_matmul(input, &weights.w_k, counter)?.add_row(&weights.b_k)?;
        let v_cur = spike_matmul(input, &weights.w_v, counter)?.add_row(&weights.b_v)?;
        let key_spikes = self.key.step(&k_cur)?;
        let value_spikes = self.value.step(&v_cur)?;

        let scale = shape.scale();
        let mut heads = Vec::with_capacity(shape.n_heads);
        let mut outputs = Vec::with_capacity(shape.n_heads);
        for h in 0..shape.n_heads {
            let (start, end) = shape.head_cols(h);
            let q_h = q.slice_cols(start, end)?;
            let raw = real_matmul_spike_t(&q_h, &key_spikes.slice_cols(start, end), counter)?;
            counter.dense_multiplies += raw.len() as u64;
            let score = raw.scale(scale)?;
            let weights_h = shape.normalize(&score);
            outputs.push(real_matmul_spike(&weights_h, &value_spikes.slice_cols(start, end), counter)?);
            heads.push(score);
        }
        Ok(AttentionStep {
            current: RealTensor::concat_cols(&outputs)?,
            score: AttentionScore { heads },
            key_spikes,
            value_spikes,
        })
    }
}

/// Tape handles of the attention weights.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub b_attn: Var,
}

/// Records the attention steady-state map on a tape. Returns the output rate
/// node and the per-head scaled score nodes.
pub fn surrogate_attention_on_tape(
    tape: &mut Tape,
    a_x: Var,
    a_k: Var,
    a_v: Var,
    vars: AttentionVars,
    shape: &AttentionShape,
    v_th: f64,
) -> Result<(Var, Vec<Var>)> {
    let q = tape.matmul(a_x, vars.w_q)?;
    let q = tape.add_row(q, vars.b_q)?;
    let mut scores = Vec::with_capacity(shape.n_heads);
    let mut outs = Vec::with_capacity(shape.n_heads);
    for h in 0..shape.n_heads {
        let (start, end) = shape.head_cols(h);
        let q_h = tape.slice_cols(q, start, end)?;
        let k_h = tape.slice_cols(a_k, start, end)?;
        let v_h = tape.slice_cols(a_v, start, end)?;
        let k_t = tape.transpose(k_h)?;
        let raw = tape.matmul(q_h, k_t)?;
        let score = tape.scale(raw, shape.scale())?;
        let p = match shape.pi_mode {
            PiMode::Softmax => tape.softmax_rows(score),
            PiMode::Identity => score,
        };
        outs.push(tape.matmul(p, v_h)?);
        scores.push(score);
    }
    let attn = tape.concat_cols(&outs)?;
    let biased = tape.add_row(attn, vars.b_attn)?;
    let scaled = tape.scale(biased, 1.0 / v_th)?;
    Ok((tape.clip01(scaled), scores))
}

fn check_rate(name: &str, t: &RealTensor) -> Result<()> {
    if t.data().iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v)) {
        return Err(Error::contract(format!("{name} rates must lie in [0, 1]")));
    }
    Ok(())
}

/// Steady-state attention output rate from converged input, key and value rates.
pub fn surrogate_attention(
    a_x: &RealTensor,
    a_k: &RealTensor,
    a_v: &RealTensor,
    weights: &AttentionWeights,
    shape: &AttentionShape,
    v_th: f64,
) -> Result<RealTensor> {
    check_rate("a_x", a_x)?;
    check_rate("a_k", a_k)?;
    check_rate("a_v", a_v)?;
    let mut tape = Tape::new();
    let x = tape.constant(a_x.clone());
    let k = tape.constant(a_k.clone());
    let v = tape.constant(a_v.clone());
    let vars = AttentionVars {
        w_q: tape.constant(weights.w_q.clone()),
        b_q: tape.constant(weights.b_q.clone()),
        b_attn: tape.constant(weights.b_attn.clone()),
    };
    let (out, _) = surrogate_attention_on_tape(&mut tape, x, k, v, vars, shape, v_th)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> RealTensor {
        RealTensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
            .unwrap()
    }

    fn random_weights(rng: &mut ChaCha8Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            w_q: random(rng, d, d, 1.0),
            b_q: RealTensor::vector((0..d).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap(),
            w_k: random(rng, d, d, 1.0),
            b_k: RealTensor::vector((0..d).map(|_| rng.random_range(0.0..0.8)).collect()).unwrap(),
            w_v: random(rng, d, d, 1.0),
            b_v: RealTensor::vector((0..d).map(|_| rng.random_range(0.0..0.8)).collect()).unwrap(),
            b_attn: RealTensor::zeros(&[d]),
        }
    }

    #[test]
    fn silent_input_gives_zero_current() {
        let shape = AttentionShape::new(1, 4, PiMode::Softmax).unwrap();
        let mut attn = SpikingAttention::new(3, 4, LifParams::default());
        let mut counter = OpCounter::default();
        let out = attn
            .step(&SpikeTensor::zeros(&[3, 4]), &AttentionWeights::zeros(4), &shape, &mut counter)
            .unwrap();
        assert!(out.current.data().iter().all(|&v| v == 0.0));
        assert!(out.score.heads[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = AttentionShape::new(1, 4, PiMode::Softmax).unwrap();
        let w = random_weights(&mut rng, 4);
        let mut attn = SpikingAttention::new(1, 4, LifParams::default());
        let input = SpikeTensor::from_bits(vec![1, 4], vec![true, false, true, true]).unwrap();
        let out = attn.step(&input, &w, &shape, &mut OpCounter::default()).unwrap();
        assert_eq!(out.current, out.value_spikes.to_real());
    }

    /// Dense oracle of the same per-step formula using ordinary matmul.
    #[test]
    fn spike_kernels_match_dense_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for heads in [1, 2] {
            let shape = AttentionShape::new(heads, 4, PiMode::Softmax).unwrap();
            let w = random_weights(&mut rng, 4);
            let mut attn = SpikingAttention::new(2, 4, LifParams::default());
            let mut reference_k = NeuronState::new(&[2, 4], LifParams::default());
            let mut reference_v = NeuronState::new(&[2, 4], LifParams::default());
            let mut counter = OpCounter::default();
            for _ in 0..6 {
                let bits = (0..8).map(|_| rng.random_bool(0.5)).collect();
                let input = SpikeTensor::from_bits(vec![2, 4], bits).unwrap();
                let out = attn.step(&input, &w, &shape, &mut counter).unwrap();

                let x = input.to_real();
                let dense = |m: &RealTensor| crate::numerics::matmul(&x, m).unwrap();
                let q = dense(&w.w_q).add_row(&w.b_q).unwrap();
                let sk = reference_k.step(&dense(&w.w_k).add_row(&w.b_k).unwrap()).unwrap().to_real();
                let sv = reference_v.step(&dense(&w.w_v).add_row(&w.b_v).unwrap()).unwrap().to_real();
                let mut parts = Vec::new();
                for h in 0..heads {
                    let (s, e) = shape.head_cols(h);
                    let score = crate::numerics::matmul(
                        &q.slice_cols(s, e).unwrap(),
                        &sk.slice_cols(s, e).unwrap().transpose().unwrap(),
                    )
                    .unwrap()
                    .scale(shape.scale())
                    .unwrap();
                    assert_eq!(score, out.score.heads[h]);
                    let p = softmax_rows(&score);
                    parts.push(crate::numerics::matmul(&p, &sv.slice_cols(s, e).unwrap()).unwrap());
                }
                let expected = RealTensor::concat_cols(&parts).unwrap();
                assert!(out.current.max_abs_diff(&expected).unwrap() < 1e-15);
            }
            assert_eq!(counter.spike_multiplies, 0);
            assert!(counter.accumulates > 0);
        }
    }

    #[test]
    fn surrogate_zero_rates() {
        let shape = AttentionShape::new(2, 4, PiMode::Softmax).unwrap();
        let z = RealTensor::zeros(&[3, 4]);
        let out = surrogate_attention(&z, &z, &z, &AttentionWeights::zeros(4), &shape, 1.0).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn surrogate_is_vanilla_attention_when_unclipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = AttentionShape::new(1, 4, PiMode::Softmax).unwrap();
        let mut w = random_weights(&mut rng, 4);
        w.b_attn = RealTensor::zeros(&[4]);
        let rate = |rng: &mut ChaCha8Rng| {
            RealTensor::matrix(3, 4, (0..12).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap()
        };
        let (x, k, v) = (rate(&mut rng), rate(&mut rng), rate(&mut rng));
        let out = surrogate_attention(&x, &k, &v, &w, &shape, 1.0).unwrap();
        let q = crate::numerics::matmul(&x, &w.w_q).unwrap().add_row(&w.b_q).unwrap();
        let score = crate::numerics::matmul(&q, &k.transpose().unwrap()).unwrap().scale(0.5).unwrap();
        let vanilla = crate::numerics::matmul(&softmax_rows(&score), &v).unwrap();
        // Softmax rows are convex weights of rates in (0,1): nothing clips.
        assert!(out.max_abs_diff(&vanilla).unwrap() < 1e-15);
    }

    /// Scalar-loop evaluation of the steady-state attention equation.
    #[test]
    fn surrogate_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d, heads) = (3, 4, 2);
        let shape = AttentionShape::new(heads, d, PiMode::Softmax).unwrap();
        let mut w = random_weights(&mut rng, d);
        w.b_attn = RealTensor::vector((0..d).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
        let rate = |rng: &mut ChaCha8Rng| {
            RealTensor::matrix(n, d, (0..n * d).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
        };
        let (x, k, v) = (rate(&mut rng), rate(&mut rng), rate(&mut rng));
        let v_th = 0.8;
        let got = surrogate_attention(&x, &k, &v, &w, &shape, v_th).unwrap();

        let dk = d / heads;
        let s = 1.0 / libm::sqrt(dk as f64);
        for h in 0..heads {
            for i in 0..n {
                let mut q = [0.0; 2];
                for (c, qc) in q.iter_mut().enumerate() {
                    let col = h * dk + c;
                    *qc = w.b_q.data()[col];
                    for p in 0..d {
                        *qc += x.get(i, p) * w.w_q.get(p, col);
                    }
                }
                let mut sc = [0.0; 3];
                for (j, scj) in sc.iter_mut().enumerate() {
                    *scj = s * (0..dk).map(|c| q[c] * k.get(j, h * dk + c)).sum::<f64>();
                }
                let mx = sc.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = sc.iter().map(|z| libm::exp(z - mx)).collect();
                let tot: f64 = e.iter().sum();
                for c in 0..dk {
                    let col = h * dk + c;
                    let a: f64 = (0..n).map(|j| e[j] / tot * v.get(j, col)).sum();
                    let expect = ((a + w.b_attn.data()[col]) / v_th).clamp(0.0, 1.0);
                    assert!((got.get(i, col) - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn surrogate_rejects_out_of_range_rates() {
        let shape = AttentionShape::new(1, 2, PiMode::Softmax).unwrap();
        let ok = RealTensor::zeros(&[1, 2]);
        let bad = RealTensor::filled(&[1, 2], 1.1);
        assert!(matches!(
            surrogate_attention(&bad, &ok, &ok, &AttentionWeights::zeros(2), &shape, 1.0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn head_count_must_divide_width() {
        assert!(AttentionShape::new(3, 4, PiMode::Softmax).is_err());
        assert!(AttentionShape::new(0, 4, PiMode::Softmax).is_err());
    }
}
