//! Spiking encoder stack: embeddings, input LIF layer, N spiking encoder
//! blocks and a linear task head, plus the per-step simulation state.
//!
//! Inside one encoder, per time step:
//!
//! ```text
//! attention  I = π(s·Q·S_Kᵀ)·S_V + b_attn
//! IL-1       I = norm(s_attn·W_il1 + s_in) + b_il1
//! IL-2       I = gelu(s_il1·W_il2) + b_il2
//! output     I = norm(s_il2·W_out + s_il1) + b_out
//! ```
//!
//! Each current drives its own LIF layer; the skip connections carry spikes.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{
    spike_matmul, AttentionScore, AttentionShape, AttentionWeights, OpCounter, PiMode, SpikingAttention,
};
use crate::error::{Error, Result};
use crate::neuron::{LifParams, NeuronState, SpikeTensor};
use crate::numerics::{gelu, layer_norm, RealTensor};

/// Prediction head kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskHead {
    Classification { classes: usize },
    Regression,
}

impl TaskHead {
    pub fn outputs(&self) -> usize {
        match self {
            TaskHead::Classification { classes } => *classes,
            TaskHead::Regression => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_encoders: usize,
    pub seq_len: usize,
    pub d_emb: usize,
    pub d_intermediate: usize,
    pub n_heads: usize,
    pub lif: LifParams,
    pub feedback_enabled: bool,
    pub norm_enabled: bool,
    pub pi_mode: PiMode,
    pub head: TaskHead,
}

impl Default for ModelConfig {
    /// Desk-scale defaults; the full-size reference is 4 encoders, width 768,
    /// intermediate 3072 and sequence length 128.
    fn default() -> Self {
        Self {
            vocab_size: 16,
            n_encoders: 1,
            seq_len: 8,
            d_emb: 16,
            d_intermediate: 32,
            n_heads: 2,
            lif: LifParams::default(),
            feedback_enabled: false,
            norm_enabled: true,
            pi_mode: PiMode::Softmax,
            head: TaskHead::Classification { classes: 2 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("n_encoders", self.n_encoders),
            ("seq_len", self.seq_len),
            ("d_emb", self.d_emb),
            ("d_intermediate", self.d_intermediate),
            ("n_heads", self.n_heads),
            ("head outputs", self.head.outputs()),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        self.lif.validate()?;
        self.attention_shape().map(|_| ())
    }

    pub fn attention_shape(&self) -> Result<AttentionShape> {
        AttentionShape::new(self.n_heads, self.d_emb, self.pi_mode)
    }

    /// Names of all spiking layers in simulation order.
    pub fn layer_ids(&self) -> Vec<LayerId> {
        let mut ids = vec![LayerId::Input];
        for e in 0..self.n_encoders {
            ids.extend(SubLayer::ALL.iter().map(|&sub| LayerId::Encoder(e, sub)));
        }
        ids
    }

    /// Neurons per spiking layer, aligned with [`layer_ids`](Self::layer_ids).
    pub fn layer_widths(&self) -> Vec<usize> {
        self.layer_ids()
            .iter()
            .map(|id| match id {
                LayerId::Encoder(_, SubLayer::Il2) => self.d_intermediate,
                _ => self.d_emb,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubLayer {
    Key,
    Value,
    Attention,
    Il1,
    Il2,
    Output,
}

impl SubLayer {
    pub const ALL: [SubLayer; 6] = [
        SubLayer::Key,
        SubLayer::Value,
        SubLayer::Attention,
        SubLayer::Il1,
        SubLayer::Il2,
        SubLayer::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubLayer::Key => "key",
            SubLayer::Value => "value",
            SubLayer::Attention => "attention",
            SubLayer::Il1 => "il1",
            SubLayer::Il2 => "il2",
            SubLayer::Output => "output",
        }
    }
}

/// One spiking layer of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LayerId {
    /// The LIF layer fed by the embeddings (and the feedback path).
    Input,
    Encoder(usize, SubLayer),
}

impl LayerId {
    pub fn name(&self) -> String {
        match self {
            LayerId::Input => String::from("input"),
            LayerId::Encoder(e, sub) => format!("encoder{e}.{}", sub.name()),
        }
    }
}

/// Learnable tensors of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = RealTensor> {
    pub attention: AttentionWeights<T>,
    pub w_il1: T,
    pub b_il1: T,
    pub ln1_gain: T,
    pub ln1_shift: T,
    pub w_il2: T,
    pub b_il2: T,
    pub w_out: T,
    pub b_out: T,
    pub ln2_gain: T,
    pub ln2_shift: T,
}

/// All learnable tensors of the spiking student. Generic so the same layout
/// can hold tape handles.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = RealTensor> {
    pub token_emb: T,
    pub pos_emb: T,
    /// Bias of the input LIF layer.
    pub b_in: T,
    pub encoders: Vec<EncoderParams<T>>,
    /// Feedback from the last encoder's output spikes into the input layer.
    pub feedback: Option<T>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ModelParams<T> {
    /// Maps every tensor in canonical order, passing its name.
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> core::result::Result<U, E>) -> core::result::Result<ModelParams<U>, E> {
        let token_emb = f("embeddings.token", &self.token_emb)?;
        let pos_emb = f("embeddings.position", &self.pos_emb)?;
        let b_in = f("input.bias", &self.b_in)?;
        let mut encoders = Vec::with_capacity(self.encoders.len());
        for (e, p) in self.encoders.iter().enumerate() {
            let mut g = |field: &str, t: &T| f(&format!("encoder{e}.{field}"), t);
            let a = &p.attention;
            encoders.push(EncoderParams {
                attention: AttentionWeights {
                    w_q: g("attention.w_q", &a.w_q)?,
                    b_q: g("attention.b_q", &a.b_q)?,
                    w_k: g("attention.w_k", &a.w_k)?,
                    b_k: g("attention.b_k", &a.b_k)?,
                    w_v: g("attention.w_v", &a.w_v)?,
                    b_v: g("attention.b_v", &a.b_v)?,
                    b_attn: g("attention.b_attn", &a.b_attn)?,
                },
                w_il1: g("il1.weight", &p.w_il1)?,
                b_il1: g("il1.bias", &p.b_il1)?,
                ln1_gain: g("il1.norm_gain", &p.ln1_gain)?,
                ln1_shift: g("il1.norm_shift", &p.ln1_shift)?,
                w_il2: g("il2.weight", &p.w_il2)?,
                b_il2: g("il2.bias", &p.b_il2)?,
                w_out: g("output.weight", &p.w_out)?,
                b_out: g("output.bias", &p.b_out)?,
                ln2_gain: g("output.norm_gain", &p.ln2_gain)?,
                ln2_shift: g("output.norm_shift", &p.ln2_shift)?,
            });
        }
        let feedback = match &self.feedback {
            Some(t) => Some(f("feedback", t)?),
            None => None,
        };
        Ok(ModelParams {
            token_emb,
            pos_emb,
            b_in,
            encoders,
            feedback,
            head_w: f("head.weight", &self.head_w)?,
            head_b: f("head.bias", &self.head_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ModelParams<U> {
        match self.try_map::<U, core::convert::Infallible>(|n, t| Ok(f(n, t))) {
            Ok(m) => m,
            Err(never) => match never {},
        }
    }

    /// Mutable references in canonical order (same order as [`try_map`](Self::try_map)).
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb, &mut self.b_in];
        for p in &mut self.encoders {
            let a = &mut p.attention;
            out.extend([
                &mut a.w_q,
                &mut a.b_q,
                &mut a.w_k,
                &mut a.b_k,
                &mut a.w_v,
                &mut a.b_v,
                &mut a.b_attn,
            ]);
            out.extend([
                &mut p.w_il1,
                &mut p.b_il1,
                &mut p.ln1_gain,
                &mut p.ln1_shift,
                &mut p.w_il2,
                &mut p.b_il2,
                &mut p.w_out,
                &mut p.b_out,
                &mut p.ln2_gain,
                &mut p.ln2_shift,
            ]);
        }
        if let Some(f) = &mut self.feedback {
            out.push(f);
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// Tensors in canonical order with their names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(String::from(n)));
        let mut refs = Vec::new();
        self.visit(&mut |t| refs.push(t));
        names.into_iter().zip(refs).collect()
    }

    fn visit<'a>(&'a self, f: &mut impl FnMut(&'a T)) {
        f(&self.token_emb);
        f(&self.pos_emb);
        f(&self.b_in);
        for p in &self.encoders {
            let a = &p.attention;
            for t in [&a.w_q, &a.b_q, &a.w_k, &a.b_k, &a.w_v, &a.b_v, &a.b_attn] {
                f(t);
            }
            for t in [
                &p.w_il1,
                &p.b_il1,
                &p.ln1_gain,
                &p.ln1_shift,
                &p.w_il2,
                &p.b_il2,
                &p.w_out,
                &p.b_out,
                &p.ln2_gain,
                &p.ln2_shift,
            ] {
                f(t);
            }
        }
        if let Some(fb) = &self.feedback {
            f(fb);
        }
        f(&self.head_w);
        f(&self.head_b);
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Samples `N(0, σ²)` truncated to `±2σ`.
pub fn truncated_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> RealTensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect();
    RealTensor::from_parts(shape.to_vec(), data)
}

/// Standard deviation of weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Truncated-normal scales used by [`ModelParams::init_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct InitConfig {
    pub weight_std: f64,
    /// Scale of the token and position tables.
    pub embedding_std: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_std: INIT_STD,
            embedding_std: INIT_STD,
        }
    }
}

impl ModelParams<RealTensor> {
    /// All-zero parameters (unit norm gains) shaped for `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::build(cfg, &mut |shape: &[usize]| RealTensor::zeros(shape))
    }

    /// Truncated-normal weights (σ = 0.02), zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        Self::init_with(cfg, rng, &InitConfig::default())
    }

    pub fn init_with(cfg: &ModelConfig, rng: &mut impl Rng, init: &InitConfig) -> Self {
        let mut p = Self::build(cfg, &mut |shape: &[usize]| truncated_normal(rng, shape, init.weight_std));
        if init.embedding_std != init.weight_std {
            let scale = init.embedding_std / init.weight_std;
            p.token_emb = p.token_emb.scale(scale).expect("finite");
            p.pos_emb = p.pos_emb.scale(scale).expect("finite");
        }
        p
    }

    fn build(cfg: &ModelConfig, weight: &mut dyn FnMut(&[usize]) -> RealTensor) -> Self {
        let (d, di) = (cfg.d_emb, cfg.d_intermediate);
        let zeros = |n: usize| RealTensor::zeros(&[n]);
        let ones = |n: usize| RealTensor::filled(&[n], 1.0);
        let token_emb = weight(&[cfg.vocab_size, d]);
        let pos_emb = weight(&[cfg.seq_len, d]);
        let encoders = (0..cfg.n_encoders)
            .map(|_| EncoderParams {
                attention: AttentionWeights {
                    w_q: weight(&[d, d]),
                    b_q: zeros(d),
                    w_k: weight(&[d, d]),
                    b_k: zeros(d),
                    w_v: weight(&[d, d]),
                    b_v: zeros(d),
                    b_attn: zeros(d),
                },
                w_il1: weight(&[d, d]),
                b_il1: zeros(d),
                ln1_gain: ones(d),
                ln1_shift: zeros(d),
                w_il2: weight(&[d, di]),
                b_il2: zeros(di),
                w_out: weight(&[di, d]),
                b_out: zeros(d),
                ln2_gain: ones(d),
                ln2_shift: zeros(d),
            })
            .collect();
        let feedback = cfg.feedback_enabled.then(|| weight(&[d, d]));
        let k = cfg.head.outputs();
        Self {
            token_emb,
            pos_emb,
            b_in: zeros(d),
            encoders,
            feedback,
            head_w: weight(&[d, k]),
            head_b: zeros(k),
        }
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(cfg: &ModelConfig, tensors: &[(String, RealTensor)]) -> Result<Self> {
        cfg.validate()?;
        let template = Self::zeros(cfg);
        if tensors.len() != template.len() {
            return Err(Error::Input(format!(
                "expected {} tensors, found {}",
                template.len(),
                tensors.len()
            )));
        }
        template.try_map(|name, t| {
            let (_, found) = tensors
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if found.shape() != t.shape() {
                return Err(Error::dim("ModelParams::from_named", t.shape(), found.shape()));
            }
            Ok(found.clone())
        })
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let template = Self::zeros(cfg);
        let mine = self.named();
        let theirs = template.named();
        if mine.len() != theirs.len() {
            return Err(Error::Input("parameter layout does not match configuration".into()));
        }
        for ((n, a), (_, b)) in mine.iter().zip(&theirs) {
            if a.shape() != b.shape() {
                return Err(Error::Input(format!("tensor `{n}` has shape {:?}, expected {:?}", a.shape(), b.shape())));
            }
        }
        Ok(())
    }
}

/// Token plus learned position embedding, `N_s × D_emb`.
pub fn embed(tokens: &[usize], params: &ModelParams, cfg: &ModelConfig) -> Result<RealTensor> {
    if tokens.len() != cfg.seq_len {
        return Err(Error::Input(format!(
            "sequence length {} does not match configured {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    let d = cfg.d_emb;
    let mut data = Vec::with_capacity(tokens.len() * d);
    for (pos, &tok) in tokens.iter().enumerate() {
        if tok >= params.token_emb.rows() {
            return Err(Error::Input(format!(
                "token id {tok} outside vocabulary of {}",
                params.token_emb.rows()
            )));
        }
        data.extend(params.token_emb.row(tok).iter().zip(params.pos_emb.row(pos)).map(|(a, b)| a + b));
    }
    RealTensor::new(vec![tokens.len(), d], data)
}

/// LIF layers of one encoder block.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub attention: SpikingAttention,
    pub attn_out: NeuronState,
    pub il1: NeuronState,
    pub il2: NeuronState,
    pub out: NeuronState,
}

impl EncoderState {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (n, d, di) = (cfg.seq_len, cfg.d_emb, cfg.d_intermediate);
        Self {
            attention: SpikingAttention::new(n, d, cfg.lif),
            attn_out: NeuronState::new(&[n, d], cfg.lif),
            il1: NeuronState::new(&[n, d], cfg.lif),
            il2: NeuronState::new(&[n, di], cfg.lif),
            out: NeuronState::new(&[n, d], cfg.lif),
        }
    }

    pub fn layer(&self, sub: SubLayer) -> &NeuronState {
        match sub {
            SubLayer::Key => &self.attention.key,
            SubLayer::Value => &self.attention.value,
            SubLayer::Attention => &self.attn_out,
            SubLayer::Il1 => &self.il1,
            SubLayer::Il2 => &self.il2,
            SubLayer::Output => &self.out,
        }
    }
}

/// Spikes produced by one encoder step.
#[derive(Debug, Clone)]
pub struct EncoderStep {
    pub output: SpikeTensor,
    pub score: AttentionScore,
}

fn maybe_norm(x: RealTensor, gain: &RealTensor, shift: &RealTensor, enabled: bool) -> Result<RealTensor> {
    if enabled {
        layer_norm(&x, gain, shift)
    } else {
        Ok(x)
    }
}

/// Advances one encoder block by one time step.
pub fn encoder_step(
    state: &mut EncoderState,
    params: &EncoderParams,
    cfg: &ModelConfig,
    input: &SpikeTensor,
    counter: &mut OpCounter,
) -> Result<EncoderStep> {
    let shape = cfg.attention_shape()?;
    let attn = state.attention.step(input, &params.attention, &shape, counter)?;
    let s_attn = state.attn_out.step(&attn.current.add_row(&params.attention.b_attn)?)?;

    let pre = spike_matmul(&s_attn, &params.w_il1, counter)?.add(&input.to_real())?;
    let i_il1 = maybe_norm(pre, &params.ln1_gain, &params.ln1_shift, cfg.norm_enabled)?.add_row(&params.b_il1)?;
    let s_il1 = state.il1.step(&i_il1)?;

    let i_il2 = gelu(&spike_matmul(&s_il1, &params.w_il2, counter)?).add_row(&params.b_il2)?;
    let s_il2 = state.il2.step(&i_il2)?;

    let pre = spike_matmul(&s_il2, &params.w_out, counter)?.add(&s_il1.to_real())?;
    let i_out = maybe_norm(pre, &params.ln2_gain, &params.ln2_shift, cfg.norm_enabled)?.add_row(&params.b_out)?;
    let output = state.out.step(&i_out)?;
    Ok(EncoderStep {
        output,
        score: attn.score,
    })
}

/// Simulation state of the whole spiking model for one input.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub input: NeuronState,
    pub encoders: Vec<EncoderState>,
    /// Final encoder spikes from the previous step (zero at `t = 0`).
    pub last_output: SpikeTensor,
    pub counter: OpCounter,
}

impl ModelState {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            input: NeuronState::new(&[cfg.seq_len, cfg.d_emb], cfg.lif),
            encoders: (0..cfg.n_encoders).map(|_| EncoderState::new(cfg)).collect(),
            last_output: SpikeTensor::zeros(&[cfg.seq_len, cfg.d_emb]),
            counter: OpCounter::default(),
        }
    }

    pub fn layer(&self, id: LayerId) -> &NeuronState {
        match id {
            LayerId::Input => &self.input,
            LayerId::Encoder(e, sub) => self.encoders[e].layer(sub),
        }
    }

    pub fn time(&self) -> usize {
        self.input.time()
    }
}

/// Advances the whole model one time step; returns each encoder's scores.
pub fn model_step(
    state: &mut ModelState,
    params: &ModelParams,
    cfg: &ModelConfig,
    embedded: &RealTensor,
) -> Result<Vec<AttentionScore>> {
    let mut current = embedded.add_row(&params.b_in)?;
    if cfg.feedback_enabled {
        let f = params
            .feedback
            .as_ref()
            .ok_or_else(|| Error::Config("feedback enabled but no feedback matrix".into()))?;
        current = current.add(&spike_matmul(&state.last_output, f, &mut state.counter)?)?;
    }
    let mut spikes = state.input.step(&current)?;
    let mut scores = Vec::with_capacity(cfg.n_encoders);
    for (enc_state, enc_params) in state.encoders.iter_mut().zip(&params.encoders) {
        let step = encoder_step(enc_state, enc_params, cfg, &spikes, &mut state.counter)?;
        spikes = step.output;
        scores.push(step.score);
    }
    state.last_output = spikes;
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 5,
            n_encoders: 2,
            seq_len: 3,
            d_emb: 4,
            d_intermediate: 6,
            n_heads: 2,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn canonical_orders_agree() {
        let cfg = ModelConfig {
            feedback_enabled: true,
            ..tiny()
        };
        let mut p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0));
        let named: Vec<(String, RealTensor)> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let muts: Vec<RealTensor> = p.tensors_mut().into_iter().map(|t| t.clone()).collect();
        assert_eq!(named.len(), muts.len());
        for ((_, a), b) in named.iter().zip(&muts) {
            assert_eq!(a, b);
        }
        assert_eq!(ModelParams::from_named(&cfg, &named).unwrap(), p);
        let mut names: Vec<&String> = named.iter().map(|(n, _)| n).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), named.len());
    }

    #[test]
    fn embedding_examples() {
        let cfg = tiny();
        let mut p = ModelParams::zeros(&cfg);
        assert_eq!(embed(&[0, 1, 2], &p, &cfg).unwrap(), RealTensor::zeros(&[3, 4]));

        // Table-lookup oracle: one-hot rows plus distinct position rows.
        p.token_emb = RealTensor::matrix(5, 4, (0..20).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        p.pos_emb = RealTensor::matrix(3, 4, (0..12).map(|i| 0.1 * i as f64).collect()).unwrap();
        let y = embed(&[2, 2, 4], &p, &cfg).unwrap();
        for (pos, tok) in [2usize, 2, 4].iter().enumerate() {
            for c in 0..4 {
                let expect = p.token_emb.get(*tok, c) + p.pos_emb.get(pos, c);
                assert_eq!(y.get(pos, c), expect);
            }
        }
        assert_ne!(y.row(0), y.row(1));
        assert!(matches!(embed(&[0, 1, 5], &p, &cfg), Err(Error::Input(_))));
        assert!(matches!(embed(&[0, 1], &p, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn zero_model_is_silent() {
        let cfg = tiny();
        let p = ModelParams::zeros(&cfg);
        let mut state = ModelState::new(&cfg);
        let emb = embed(&[0, 1, 2], &p, &cfg).unwrap();
        for _ in 0..5 {
            model_step(&mut state, &p, &cfg, &emb).unwrap();
            assert_eq!(state.last_output.count(), 0);
        }
        assert!(cfg.layer_ids().iter().all(|&id| state.layer(id).spike_total() == 0));
    }

    #[test]
    fn il1_skip_isolated_when_weight_zero() {
        // With W_il1 = 0 the IL-1 current is norm(s_in) + b_il1 regardless of attention.
        let cfg = ModelConfig {
            n_encoders: 1,
            ..tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = ModelParams::init(&cfg, &mut rng);
        p.encoders[0].w_il1 = RealTensor::zeros(&[4, 4]);
        p.encoders[0].b_il1 = RealTensor::vector(vec![0.3, 0.1, -0.2, 0.6]).unwrap();
        let input = SpikeTensor::from_bits(vec![3, 4], vec![true, false, true, true, false, false, true, false, true, true, true, false]).unwrap();
        let mut state = EncoderState::new(&cfg);
        let mut probe = state.il1.clone();
        encoder_step(&mut state, &p.encoders[0], &cfg, &input, &mut OpCounter::default()).unwrap();
        let expected = layer_norm(&input.to_real(), &p.encoders[0].ln1_gain, &p.encoders[0].ln1_shift)
            .unwrap()
            .add_row(&p.encoders[0].b_il1)
            .unwrap();
        probe.step(&expected).unwrap();
        assert_eq!(probe.membrane(), state.il1.membrane());
    }
}
