//! Non-spiking teacher, layer mapping and the distillation losses and stages.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::attention::AttentionScore;
use crate::equilibrium::{simulate_to_equilibrium, SurrogateGraph, SurrogateNet};
use crate::error::{Error, Result};
use crate::gradients::{first_extra_param, loss_gradients, GradientResult};
use crate::model::{truncated_normal, LayerId, ModelConfig, ModelParams, SubLayer, TaskHead};
use crate::numerics::{log_softmax_rows, softmax_rows, ParamId, RealTensor, Tape, Var};
use crate::train::{
    apply_update, argmax, evaluate, pearson, supervised_loss, Dataset, EpochMetrics, Example, Label, OptimizerState,
    TaskSpec, TrainConfig, CLS, SEP,
};

/// Architecture of the teacher encoder stack.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TeacherConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head: TaskHead,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            seq_len: 8,
            d_hidden: 16,
            d_ff: 32,
            n_layers: 2,
            n_heads: 2,
            head: TaskHead::Classification { classes: 2 },
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.seq_len == 0 || self.d_ff == 0 || self.n_layers == 0 {
            return Err(Error::Config("teacher sizes must be positive".into()));
        }
        if self.n_heads == 0 || !self.d_hidden.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "teacher d_hidden ({}) must be a positive multiple of n_heads ({})",
                self.d_hidden, self.n_heads
            )));
        }
        if self.head.outputs() == 0 {
            return Err(Error::Config("teacher head needs at least one output".into()));
        }
        Ok(())
    }

    /// Teacher matching a student's vocabulary, sequence length, heads and task head.
    pub fn for_student(student: &ModelConfig, n_layers: usize, d_hidden: usize, d_ff: usize) -> Self {
        Self {
            vocab_size: student.vocab_size,
            seq_len: student.seq_len,
            d_hidden,
            d_ff,
            n_layers,
            n_heads: student.n_heads,
            head: student.head,
        }
    }

    fn scale(&self) -> f64 {
        1.0 / libm::sqrt((self.d_hidden / self.n_heads) as f64)
    }
}

const LAYER_FIELDS: [&str; 16] = [
    "attention.w_q",
    "attention.b_q",
    "attention.w_k",
    "attention.b_k",
    "attention.w_v",
    "attention.b_v",
    "attention.w_o",
    "attention.b_o",
    "attention.norm_gain",
    "attention.norm_shift",
    "ff.w_in",
    "ff.b_in",
    "ff.w_out",
    "ff.b_out",
    "ff.norm_gain",
    "ff.norm_shift",
];

/// One post-norm transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherLayer<T = RealTensor> {
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln1_gain: T,
    pub ln1_shift: T,
    pub w_ff1: T,
    pub b_ff1: T,
    pub w_ff2: T,
    pub b_ff2: T,
    pub ln2_gain: T,
    pub ln2_shift: T,
}

impl<T> TeacherLayer<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln1_gain,
            &self.ln1_shift,
            &self.w_ff1,
            &self.b_ff1,
            &self.w_ff2,
            &self.b_ff2,
            &self.ln2_gain,
            &self.ln2_shift,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln1_gain,
            &mut self.ln1_shift,
            &mut self.w_ff1,
            &mut self.b_ff1,
            &mut self.w_ff2,
            &mut self.b_ff2,
            &mut self.ln2_gain,
            &mut self.ln2_shift,
        ]
    }

    fn from_vec(v: Vec<T>) -> Self {
        let [w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln1_gain, ln1_shift, w_ff1, b_ff1, w_ff2, b_ff2, ln2_gain, ln2_shift]: [T; 16] =
            v.try_into().ok().expect("16 layer fields");
        Self {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
            ln1_gain,
            ln1_shift,
            w_ff1,
            b_ff1,
            w_ff2,
            b_ff2,
            ln2_gain,
            ln2_shift,
        }
    }
}

/// All teacher weights. Canonical order: embeddings.token, embeddings.position,
/// embeddings.norm_gain, embeddings.norm_shift, layer{l}.* in field order,
/// head.weight, head.bias.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherParams<T = RealTensor> {
    pub token_emb: T,
    pub pos_emb: T,
    pub emb_gain: T,
    pub emb_shift: T,
    pub layers: Vec<TeacherLayer<T>>,
    pub head_w: T,
    pub head_b: T,
}

impl<T> TeacherParams<T> {
    pub fn try_map<U, E>(&self, mut f: impl FnMut(&str, &T) -> core::result::Result<U, E>) -> core::result::Result<TeacherParams<U>, E> {
        let token_emb = f("embeddings.token", &self.token_emb)?;
        let pos_emb = f("embeddings.position", &self.pos_emb)?;
        let emb_gain = f("embeddings.norm_gain", &self.emb_gain)?;
        let emb_shift = f("embeddings.norm_shift", &self.emb_shift)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut fields = Vec::with_capacity(16);
            for (name, t) in LAYER_FIELDS.iter().zip(layer.refs()) {
                fields.push(f(&format!("layer{l}.{name}"), t)?);
            }
            layers.push(TeacherLayer::from_vec(fields));
        }
        Ok(TeacherParams {
            token_emb,
            pos_emb,
            emb_gain,
            emb_shift,
            layers,
            head_w: f("head.weight", &self.head_w)?,
            head_b: f("head.bias", &self.head_b)?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> TeacherParams<U> {
        match self.try_map::<U, core::convert::Infallible>(|n, t| Ok(f(n, t))) {
            Ok(p) => p,
            Err(e) => match e {},
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![&mut self.token_emb, &mut self.pos_emb, &mut self.emb_gain, &mut self.emb_shift];
        for l in &mut self.layers {
            out.extend(l.refs_mut());
        }
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut names = Vec::new();
        self.map(|n, _| names.push(String::from(n)));
        let mut refs = vec![&self.token_emb, &self.pos_emb, &self.emb_gain, &self.emb_shift];
        for l in &self.layers {
            refs.extend(l.refs());
        }
        refs.push(&self.head_w);
        refs.push(&self.head_b);
        names.into_iter().zip(refs).collect()
    }

    pub fn len(&self) -> usize {
        4 + 16 * self.layers.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl TeacherParams<RealTensor> {
    fn build(cfg: &TeacherConfig, weight: &mut dyn FnMut(&[usize]) -> RealTensor) -> Self {
        let (d, f) = (cfg.d_hidden, cfg.d_ff);
        let zeros = |n: usize| RealTensor::zeros(&[n]);
        let ones = |n: usize| RealTensor::filled(&[n], 1.0);
        let token_emb = weight(&[cfg.vocab_size, d]);
        let pos_emb = weight(&[cfg.seq_len, d]);
        let layers = (0..cfg.n_layers)
            .map(|_| TeacherLayer {
                w_q: weight(&[d, d]),
                b_q: zeros(d),
                w_k: weight(&[d, d]),
                b_k: zeros(d),
                w_v: weight(&[d, d]),
                b_v: zeros(d),
                w_o: weight(&[d, d]),
                b_o: zeros(d),
                ln1_gain: ones(d),
                ln1_shift: zeros(d),
                w_ff1: weight(&[d, f]),
                b_ff1: zeros(f),
                w_ff2: weight(&[f, d]),
                b_ff2: zeros(d),
                ln2_gain: ones(d),
                ln2_shift: zeros(d),
            })
            .collect();
        let k = cfg.head.outputs();
        Self {
            token_emb,
            pos_emb,
            emb_gain: ones(d),
            emb_shift: zeros(d),
            layers,
            head_w: weight(&[d, k]),
            head_b: zeros(k),
        }
    }

    pub fn zeros(cfg: &TeacherConfig) -> Self {
        Self::build(cfg, &mut |s| RealTensor::zeros(s))
    }

    /// Truncated-normal weights with standard deviation `std`, zero biases, unit norm gains.
    pub fn init(cfg: &TeacherConfig, rng: &mut impl Rng, std: f64) -> Self {
        Self::build(cfg, &mut |s| truncated_normal(rng, s, std))
    }

    /// Rebuilds parameters from named tensors, checking names and shapes.
    pub fn from_named(cfg: &TeacherConfig, tensors: &[(String, RealTensor)]) -> Result<Self> {
        cfg.validate()?;
        let template = Self::zeros(cfg);
        if tensors.len() != template.len() {
            return Err(Error::Input(format!(
                "expected {} teacher tensors, found {}",
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
                return Err(Error::dim("TeacherParams::from_named", t.shape(), found.shape()));
            }
            Ok(found.clone())
        })
    }
}

/// Teacher activations recorded on a tape.
#[derive(Debug, Clone)]
pub struct TeacherGraph {
    pub embedding: Var,
    pub hidden: Vec<Var>,
    /// Scaled pre-softmax scores per layer and head.
    pub scores: Vec<Vec<Var>>,
    pub logits: Var,
}

/// Teacher activations for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherOutputs {
    pub embedding: RealTensor,
    pub hidden: Vec<RealTensor>,
    pub scores: Vec<AttentionScore>,
    pub logits: RealTensor,
}

/// Records the teacher forward pass on `tape`.
pub fn teacher_forward(tape: &mut Tape, cfg: &TeacherConfig, p: &TeacherParams<Var>, tokens: &[usize]) -> Result<TeacherGraph> {
    if tokens.len() != cfg.seq_len {
        return Err(Error::Input(format!("expected {} tokens, got {}", cfg.seq_len, tokens.len())));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {t} outside vocabulary of {}", cfg.vocab_size)));
    }
    let tok = tape.gather_rows(p.token_emb, tokens)?;
    let sum = tape.add(tok, p.pos_emb)?;
    let embedding = tape.layer_norm(sum, p.emb_gain, p.emb_shift)?;
    let dk = cfg.d_hidden / cfg.n_heads;
    let mut x = embedding;
    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut scores = Vec::with_capacity(cfg.n_layers);
    for l in &p.layers {
        let q = tape.matmul(x, l.w_q)?;
        let q = tape.add_row(q, l.b_q)?;
        let k = tape.matmul(x, l.w_k)?;
        let k = tape.add_row(k, l.b_k)?;
        let v = tape.matmul(x, l.w_v)?;
        let v = tape.add_row(v, l.b_v)?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        let mut outs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let q_h = tape.slice_cols(q, h * dk, (h + 1) * dk)?;
            let k_h = tape.slice_cols(k, h * dk, (h + 1) * dk)?;
            let v_h = tape.slice_cols(v, h * dk, (h + 1) * dk)?;
            let k_t = tape.transpose(k_h)?;
            let raw = tape.matmul(q_h, k_t)?;
            let score = tape.scale(raw, cfg.scale())?;
            let prob = tape.softmax_rows(score);
            outs.push(tape.matmul(prob, v_h)?);
            heads.push(score);
        }
        let attn = tape.concat_cols(&outs)?;
        let attn = tape.matmul(attn, l.w_o)?;
        let attn = tape.add_row(attn, l.b_o)?;
        let res = tape.add(x, attn)?;
        let h1 = tape.layer_norm(res, l.ln1_gain, l.ln1_shift)?;
        let ff = tape.matmul(h1, l.w_ff1)?;
        let ff = tape.add_row(ff, l.b_ff1)?;
        let ff = tape.gelu(ff);
        let ff = tape.matmul(ff, l.w_ff2)?;
        let ff = tape.add_row(ff, l.b_ff2)?;
        let res = tape.add(h1, ff)?;
        x = tape.layer_norm(res, l.ln2_gain, l.ln2_shift)?;
        hidden.push(x);
        scores.push(heads);
    }
    let first = tape.gather_rows(x, &[0])?;
    let logits = tape.matmul(first, p.head_w)?;
    let logits = tape.add_row(logits, p.head_b)?;
    Ok(TeacherGraph {
        embedding,
        hidden,
        scores,
        logits,
    })
}

fn register_teacher(tape: &mut Tape, params: &TeacherParams) -> TeacherParams<Var> {
    let mut i = 0;
    params.map(|_, t| {
        let v = tape.param(ParamId(i), t.clone());
        i += 1;
        v
    })
}

/// Teacher activations as values.
pub fn teacher_outputs(cfg: &TeacherConfig, params: &TeacherParams, tokens: &[usize]) -> Result<TeacherOutputs> {
    let mut tape = Tape::new();
    let vars = params.map(|_, t| tape.constant(t.clone()));
    let g = teacher_forward(&mut tape, cfg, &vars, tokens)?;
    Ok(TeacherOutputs {
        embedding: tape.value(g.embedding).clone(),
        hidden: g.hidden.iter().map(|&h| tape.value(h).clone()).collect(),
        scores: g
            .scores
            .iter()
            .map(|heads| AttentionScore {
                heads: heads.iter().map(|&s| tape.value(s).clone()).collect(),
            })
            .collect(),
        logits: tape.value(g.logits).clone(),
    })
}

/// Teacher accuracy, or Pearson correlation for a regression head.
pub fn evaluate_teacher(cfg: &TeacherConfig, params: &TeacherParams, examples: &[Example]) -> Result<f64> {
    let mut correct = 0usize;
    let (mut pred, mut target) = (Vec::new(), Vec::new());
    for ex in examples {
        let out = teacher_outputs(cfg, params, &ex.tokens)?;
        match ex.label {
            Label::Class(c) => correct += usize::from(argmax(out.logits.data()) == c),
            Label::Score(s) => {
                pred.push(out.logits.data()[0]);
                target.push(s);
            }
        }
    }
    Ok(match cfg.head {
        TaskHead::Classification { .. } => correct as f64 / examples.len().max(1) as f64,
        TaskHead::Regression => pearson(&pred, &target),
    })
}

/// Plain backpropagation training of the teacher on task labels.
pub fn train_teacher(
    cfg: &TeacherConfig,
    params: &mut TeacherParams,
    data: &Dataset,
    train: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    train.validate()?;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let mut opt = OptimizerState::new(train.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut acc: Vec<RealTensor> = params.named().iter().map(|(_, t)| RealTensor::zeros(t.shape())).collect();
            for &i in batch {
                let ex = &data.train[i];
                let mut tape = Tape::new();
                let vars = register_teacher(&mut tape, params);
                let g = teacher_forward(&mut tape, cfg, &vars, &ex.tokens)?;
                let loss = supervised_loss(&mut tape, g.logits, ex.label)?;
                total += tape.value(loss).item()?;
                for (id, grad) in tape.backward(loss)?.params() {
                    acc[id.0] = acc[id.0].add(&grad)?;
                }
            }
            let n = batch.len() as f64;
            let grads = acc.iter().map(|g| g.scale(1.0 / n)).collect::<Result<Vec<_>>>()?;
            opt.apply(&mut params.tensors_mut(), &names, &grads)?;
        }
        log.push(EpochMetrics {
            epoch,
            train_loss: total / data.train.len().max(1) as f64,
            eval_metric: evaluate_teacher(cfg, params, &data.eval)?,
        });
    }
    Ok(log)
}

/// Student encoder `i` (0-based) learns from teacher layer `p·(i+1) − 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerMap {
    pub teacher_layers: usize,
    pub student_layers: usize,
}

impl LayerMap {
    pub fn new(teacher_layers: usize, student_layers: usize) -> Result<Self> {
        if student_layers == 0 || !teacher_layers.is_multiple_of(student_layers) {
            return Err(Error::Config(format!(
                "teacher layers ({teacher_layers}) must be a positive multiple of student layers ({student_layers})"
            )));
        }
        Ok(Self {
            teacher_layers,
            student_layers,
        })
    }

    pub fn ratio(&self) -> usize {
        self.teacher_layers / self.student_layers
    }

    pub fn map(&self, student: usize) -> usize {
        self.ratio() * (student + 1) - 1
    }
}

fn check_rates(t: &RealTensor) -> Result<()> {
    if t.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::contract("student rates must lie in [0, 1]"));
    }
    Ok(())
}

fn mse(a: &RealTensor, b: &RealTensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    Ok(a.sub(b)?.data().iter().map(|d| d * d).sum::<f64>() / a.len().max(1) as f64)
}

/// `MSE(a·W, T)` between projected student rates and a teacher hidden state.
pub fn hidden_loss(student_asr: &RealTensor, w_td: &RealTensor, teacher_hidden: &RealTensor) -> Result<f64> {
    check_rates(student_asr)?;
    mse(&crate::numerics::matmul(student_asr, w_td)?, teacher_hidden)
}

/// Same form as [`hidden_loss`] on the embedding layer.
pub fn embedding_loss(student_embedding_asr: &RealTensor, w_td_emb: &RealTensor, teacher_embedding: &RealTensor) -> Result<f64> {
    hidden_loss(student_embedding_asr, w_td_emb, teacher_embedding)
}

/// MSE over all heads' score matrices.
pub fn attention_loss(student: &AttentionScore, teacher: &AttentionScore) -> Result<f64> {
    if student.n_heads() != teacher.n_heads() {
        return Err(Error::dim("attention_loss", &[student.n_heads()], &[teacher.n_heads()]));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for (s, t) in student.heads.iter().zip(&teacher.heads) {
        if s.shape() != t.shape() {
            return Err(Error::dim("attention_loss", s.shape(), t.shape()));
        }
        sum += s.sub(t)?.data().iter().map(|d| d * d).sum::<f64>();
        n += s.len();
    }
    Ok(sum / n.max(1) as f64)
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    Ok(())
}

/// Soft cross-entropy of tempered logits averaged over rows. Single-output
/// (regression) logits use squared error instead.
pub fn prediction_loss(student_logits: &RealTensor, teacher_logits: &RealTensor, temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::dim("prediction_loss", student_logits.shape(), teacher_logits.shape()));
    }
    if student_logits.cols() == 1 {
        return mse(student_logits, teacher_logits);
    }
    let target = softmax_rows(&teacher_logits.scale(1.0 / temperature)?);
    let log_p = log_softmax_rows(&student_logits.scale(1.0 / temperature)?);
    let ce: f64 = target.data().iter().zip(log_p.data()).map(|(t, l)| -t * l).sum();
    Ok(ce / student_logits.rows().max(1) as f64)
}

fn mse_on_tape(tape: &mut Tape, a: Var, target: &RealTensor) -> Result<Var> {
    let t = tape.constant(target.clone());
    let d = tape.sub(a, t)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Tape form of [`hidden_loss`] and [`embedding_loss`].
pub fn hidden_loss_on_tape(tape: &mut Tape, student_asr: Var, w_td: Var, teacher: &RealTensor) -> Result<Var> {
    let proj = tape.matmul(student_asr, w_td)?;
    mse_on_tape(tape, proj, teacher)
}

/// Tape form of [`attention_loss`].
pub fn attention_loss_on_tape(tape: &mut Tape, student: &[Var], teacher: &AttentionScore) -> Result<Var> {
    if student.len() != teacher.n_heads() {
        return Err(Error::dim("attention_loss", &[student.len()], &[teacher.n_heads()]));
    }
    let mut total: Option<Var> = None;
    let mut n = 0usize;
    for (&s, t) in student.iter().zip(&teacher.heads) {
        let c = tape.constant(t.clone());
        let d = tape.sub(s, c)?;
        let sq = tape.mul(d, d)?;
        let part = tape.sum(sq);
        n += t.len();
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let total = total.ok_or_else(|| Error::contract("attention loss over zero heads"))?;
    tape.scale(total, 1.0 / n.max(1) as f64)
}

/// Tape form of [`prediction_loss`].
pub fn prediction_loss_on_tape(tape: &mut Tape, student_logits: Var, teacher_logits: &RealTensor, temperature: f64) -> Result<Var> {
    check_temperature(temperature)?;
    let shape = tape.value(student_logits).shape().to_vec();
    if shape != teacher_logits.shape() {
        return Err(Error::dim("prediction_loss", &shape, teacher_logits.shape()));
    }
    if teacher_logits.cols() == 1 {
        return mse_on_tape(tape, student_logits, teacher_logits);
    }
    let target = softmax_rows(&teacher_logits.scale(1.0 / temperature)?).scale(-1.0 / teacher_logits.rows() as f64)?;
    let scaled = tape.scale(student_logits, 1.0 / temperature)?;
    let log_p = tape.log_softmax_rows(scaled);
    let w = tape.constant(target);
    let prod = tape.mul(log_p, w)?;
    Ok(tape.sum(prod))
}

/// Distillation stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Stage {
    General,
    Task,
    Prediction,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::General => "general",
            Stage::Task => "task",
            Stage::Prediction => "prediction",
        }
    }
}

/// Weights of the internal-layer losses.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct LossWeights {
    pub hidden: f64,
    pub attention: f64,
    pub embedding: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hidden: 1.0,
            attention: 1.0,
            embedding: 1.0,
        }
    }
}

/// Settings of one distillation stage.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DistillConfig {
    pub stage: Stage,
    pub temperature: f64,
    pub weights: LossWeights,
    pub train: TrainConfig,
}

impl DistillConfig {
    pub fn new(stage: Stage, train: TrainConfig) -> Self {
        Self {
            stage,
            temperature: 1.0,
            weights: LossWeights::default(),
            train,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_temperature(self.temperature)?;
        let w = self.weights;
        if [w.hidden, w.attention, w.embedding].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        self.train.validate()
    }
}

/// Learnable maps from student rates to teacher width: one for the
/// embedding and one per student encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub embedding: RealTensor,
    pub layers: Vec<RealTensor>,
}

impl Projections {
    pub fn init(student: &ModelConfig, teacher: &TeacherConfig, rng: &mut impl Rng, std: f64) -> Self {
        let shape = [student.d_emb, teacher.d_hidden];
        Self {
            embedding: truncated_normal(rng, &shape, std),
            layers: (0..student.n_encoders).map(|_| truncated_normal(rng, &shape, std)).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = vec![String::from("projection.embedding")];
        out.extend((0..self.layers.len()).map(|i| format!("projection.layer{i}")));
        out
    }

    pub fn named(&self) -> Vec<(String, &RealTensor)> {
        self.names().into_iter().zip(core::iter::once(&self.embedding).chain(&self.layers)).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut RealTensor> {
        let mut out = vec![&mut self.embedding];
        out.extend(self.layers.iter_mut());
        out
    }

    pub fn from_named(student: &ModelConfig, teacher: &TeacherConfig, tensors: &[(String, RealTensor)]) -> Result<Self> {
        let shape = [student.d_emb, teacher.d_hidden];
        let get = |name: String| -> Result<RealTensor> {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::dim("Projections::from_named", &shape, t.shape()));
            }
            Ok(t.clone())
        };
        Ok(Self {
            embedding: get("projection.embedding".into())?,
            layers: (0..student.n_encoders)
                .map(|i| get(format!("projection.layer{i}")))
                .collect::<Result<Vec<_>>>()?,
        })
    }
}

/// Loss components of one example or averaged over a pass.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct StageLoss {
    pub hidden: f64,
    pub attention: f64,
    pub embedding: f64,
    pub prediction: f64,
    pub total: f64,
}

impl StageLoss {
    fn add(&mut self, o: &StageLoss) {
        self.hidden += o.hidden;
        self.attention += o.attention;
        self.embedding += o.embedding;
        self.prediction += o.prediction;
        self.total += o.total;
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            hidden: self.hidden * k,
            attention: self.attention * k,
            embedding: self.embedding * k,
            prediction: self.prediction * k,
            total: self.total * k,
        }
    }
}

fn output_index(cfg: &ModelConfig, encoder: usize) -> Result<usize> {
    cfg.layer_ids()
        .iter()
        .position(|&l| l == LayerId::Encoder(encoder, SubLayer::Output))
        .ok_or_else(|| Error::contract(format!("student has no encoder {encoder}")))
}

/// Records the stage loss on a student surrogate graph. Projection `k`
/// (embedding first) is looked up in `proj_vars`.
pub fn record_stage_loss(
    tape: &mut Tape,
    graph: &SurrogateGraph,
    cfg: &ModelConfig,
    target: &TeacherOutputs,
    proj_vars: &[Var],
    config: &DistillConfig,
) -> Result<(Var, StageLoss)> {
    let mut parts = StageLoss::default();
    if config.stage == Stage::Prediction {
        let l = prediction_loss_on_tape(tape, graph.logits, &target.logits, config.temperature)?;
        parts.prediction = tape.value(l).item()?;
        parts.total = parts.prediction;
        return Ok((l, parts));
    }
    let map = LayerMap::new(target.hidden.len(), cfg.n_encoders)?;
    if proj_vars.len() != cfg.n_encoders + 1 {
        return Err(Error::dim("record_stage_loss", &[cfg.n_encoders + 1], &[proj_vars.len()]));
    }
    let w = config.weights;
    let emb = hidden_loss_on_tape(tape, graph.layers[0], proj_vars[0], &target.embedding)?;
    parts.embedding = tape.value(emb).item()?;
    let mut total = tape.scale(emb, w.embedding)?;
    for i in 0..cfg.n_encoders {
        let j = map.map(i);
        let h = hidden_loss_on_tape(tape, graph.layers[output_index(cfg, i)?], proj_vars[i + 1], &target.hidden[j])?;
        let a = attention_loss_on_tape(tape, &graph.scores[i], &target.scores[j])?;
        parts.hidden += tape.value(h).item()?;
        parts.attention += tape.value(a).item()?;
        let h = tape.scale(h, w.hidden)?;
        let a = tape.scale(a, w.attention)?;
        total = tape.add(total, h)?;
        total = tape.add(total, a)?;
    }
    parts.total = tape.value(total).item()?;
    Ok((total, parts))
}

/// Stage-loss gradients for one sequence. Projection gradients carry
/// `ParamId`s following the model's, embedding first.
pub fn stage_gradients(
    net: &SurrogateNet,
    record: Option<&crate::equilibrium::EquilibriumRecord>,
    tokens: &[usize],
    target: &TeacherOutputs,
    proj: &Projections,
    config: &DistillConfig,
) -> Result<(GradientResult, StageLoss)> {
    let base = first_extra_param(net.params);
    let mut parts = StageLoss::default();
    let res = loss_gradients(
        net,
        record,
        tokens,
        |tape, graph| {
            let vars: Vec<Var> = if config.stage == Stage::Prediction {
                Vec::new()
            } else {
                core::iter::once(&proj.embedding)
                    .chain(&proj.layers)
                    .enumerate()
                    .map(|(k, t)| tape.param(ParamId(base + k), t.clone()))
                    .collect()
            };
            let (l, p) = record_stage_loss(tape, graph, net.cfg, target, &vars, config)?;
            parts = p;
            Ok(l)
        },
        &config.train.solve,
    )?;
    Ok((res, parts))
}

fn check_pair(student: &ModelConfig, teacher: &TeacherConfig) -> Result<()> {
    student.validate()?;
    teacher.validate()?;
    if student.seq_len != teacher.seq_len || student.vocab_size != teacher.vocab_size {
        return Err(Error::Config("teacher and student must share vocabulary and sequence length".into()));
    }
    if student.n_heads != teacher.n_heads {
        return Err(Error::Config(format!(
            "teacher heads ({}) must equal student heads ({})",
            teacher.n_heads, student.n_heads
        )));
    }
    if student.head != teacher.head {
        return Err(Error::Config("teacher and student heads differ".into()));
    }
    LayerMap::new(teacher.n_layers, student.n_encoders).map(|_| ())
}

/// Average stage loss over `corpus` without updating anything.
pub fn measure_stage(
    student_cfg: &ModelConfig,
    student: &ModelParams,
    targets: &[TeacherOutputs],
    corpus: &[Vec<usize>],
    proj: &Projections,
    config: &DistillConfig,
) -> Result<StageLoss> {
    let net = SurrogateNet::new(student_cfg, student)?;
    let mut acc = StageLoss::default();
    for (tokens, target) in corpus.iter().zip(targets) {
        let record = simulate_to_equilibrium(student_cfg, student, tokens, &config.train.criterion)?;
        let mut tape = Tape::new();
        let graph = net.build(&mut tape, tokens, Some(&record))?;
        let vars: Vec<Var> = core::iter::once(&proj.embedding)
            .chain(&proj.layers)
            .map(|t| tape.constant(t.clone()))
            .collect();
        acc.add(&record_stage_loss(&mut tape, &graph, student_cfg, target, &vars, config)?.1);
    }
    Ok(acc.scaled(1.0 / corpus.len().max(1) as f64))
}

/// Per-epoch distillation log entry.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct DistillMetrics {
    pub epoch: usize,
    pub stage: Stage,
    pub loss: StageLoss,
    pub eval_metric: Option<f64>,
}

/// Teacher activations for every sequence of a corpus.
pub fn teacher_targets(cfg: &TeacherConfig, params: &TeacherParams, corpus: &[Vec<usize>]) -> Result<Vec<TeacherOutputs>> {
    corpus.iter().map(|t| teacher_outputs(cfg, params, t)).collect()
}

/// Trains the student (and projections) against the teacher on `corpus`.
#[allow(clippy::too_many_arguments)]
pub fn distill_stage(
    student_cfg: &ModelConfig,
    student: &mut ModelParams,
    teacher_cfg: &TeacherConfig,
    teacher: &TeacherParams,
    proj: &mut Projections,
    corpus: &[Vec<usize>],
    eval: Option<&[Example]>,
    config: &DistillConfig,
    rng: &mut impl Rng,
) -> Result<Vec<DistillMetrics>> {
    check_pair(student_cfg, teacher_cfg)?;
    config.validate()?;
    let targets = teacher_targets(teacher_cfg, teacher, corpus)?;
    let names = proj.names();
    let mut opt = OptimizerState::new(config.train.lr);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut log = Vec::with_capacity(config.train.epochs);
    for epoch in 1..=config.train.epochs {
        order.shuffle(rng);
        let mut acc = StageLoss::default();
        for batch in order.chunks(config.train.batch_size) {
            let mut results = Vec::with_capacity(batch.len());
            for &i in batch {
                let net = SurrogateNet::new(student_cfg, student)?;
                let record = simulate_to_equilibrium(student_cfg, student, &corpus[i], &config.train.criterion)?;
                let (res, parts) = stage_gradients(&net, Some(&record), &corpus[i], &targets[i], proj, config)?;
                acc.add(&parts);
                results.push(res);
            }
            let mut extra: Vec<(String, &mut RealTensor)> = names.iter().cloned().zip(proj.tensors_mut()).collect();
            apply_update(&mut opt, student, &mut extra, &results)?;
        }
        let eval_metric = match eval {
            Some(ex) => Some(evaluate(student_cfg, student, ex, &config.train.criterion)?.metric),
            None => None,
        };
        log.push(DistillMetrics {
            epoch,
            stage: config.stage,
            loss: acc.scaled(1.0 / corpus.len().max(1) as f64),
            eval_metric,
        });
    }
    Ok(log)
}

/// Random packed sequences over a task's alphabet for general distillation.
pub fn general_corpus(spec: &TaskSpec, size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let vocab = spec.vocabulary()?;
    let symbols = vocab.symbols().len();
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        let mut tokens = vec![crate::train::PAD; spec.seq_len];
        tokens[0] = CLS;
        let body = spec.seq_len - 1;
        let len = rng.random_range(1..=body);
        for t in tokens.iter_mut().skip(1).take(len) {
            *t = 3 + rng.random_range(0..symbols);
        }
        if len < body {
            tokens[1 + len] = SEP;
        }
        out.push(tokens);
    }
    Ok(out)
}

/// Stage settings and corpus size of the general → task → prediction pipeline.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PipelineConfig {
    pub general: DistillConfig,
    pub task: DistillConfig,
    pub prediction: DistillConfig,
    pub general_corpus_size: usize,
    pub projection_std: f64,
}

impl PipelineConfig {
    /// Total student epochs across the three stages.
    pub fn epochs(&self) -> usize {
        self.general.train.epochs + self.task.train.epochs + self.prediction.train.epochs
    }
}

/// Log of a full pipeline run.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineLog {
    pub metrics: Vec<DistillMetrics>,
    /// Task-stage loss at the student's initialization, before the task
    /// stage and after it.
    pub initial: StageLoss,
    pub task_before: StageLoss,
    pub task_after: StageLoss,
}

/// General distillation on random sequences, internal-layer distillation on
/// the task set, then prediction distillation on the task set.
#[allow(clippy::too_many_arguments)]
pub fn run_pipeline(
    spec: &TaskSpec,
    data: &Dataset,
    student_cfg: &ModelConfig,
    student: &mut ModelParams,
    teacher_cfg: &TeacherConfig,
    teacher: &TeacherParams,
    config: &PipelineConfig,
    rng: &mut impl Rng,
) -> Result<(Projections, PipelineLog)> {
    check_pair(student_cfg, teacher_cfg)?;
    let mut proj = Projections::init(student_cfg, teacher_cfg, rng, config.projection_std);
    let general = general_corpus(spec, config.general_corpus_size, rng)?;
    let task: Vec<Vec<usize>> = data.train.iter().map(|e| e.tokens.clone()).collect();
    let targets = teacher_targets(teacher_cfg, teacher, &task)?;
    let initial = measure_stage(student_cfg, student, &targets, &task, &proj, &config.task)?;
    let eval = Some(data.eval.as_slice());
    let mut metrics = distill_stage(student_cfg, student, teacher_cfg, teacher, &mut proj, &general, eval, &config.general, rng)?;
    let task_before = measure_stage(student_cfg, student, &targets, &task, &proj, &config.task)?;
    metrics.extend(distill_stage(student_cfg, student, teacher_cfg, teacher, &mut proj, &task, eval, &config.task, rng)?);
    let task_after = measure_stage(student_cfg, student, &targets, &task, &proj, &config.task)?;
    metrics.extend(distill_stage(
        student_cfg,
        student,
        teacher_cfg,
        teacher,
        &mut proj,
        &task,
        eval,
        &config.prediction,
        rng,
    )?);
    Ok((
        proj,
        PipelineLog {
            metrics,
            initial,
            task_before,
            task_after,
        },
    ))
}
