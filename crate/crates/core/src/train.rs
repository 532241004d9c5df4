//! Optimizer, synthetic tasks, evaluation and supervised training.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::equilibrium::{simulate_to_equilibrium, ConvergenceCriterion, EquilibriumRecord, SurrogateNet};
use crate::error::{Error, Result};
use crate::gradients::{loss_gradients, GradientResult, ImplicitSolveConfig};
use crate::model::{ModelConfig, ModelParams, TaskHead};
use crate::numerics::{matmul, RealTensor, Tape, Var};

/// Learning rate for general distillation.
pub const LR_GENERAL_KD: f64 = 4e-5;
/// Learning rate for task and prediction distillation.
pub const LR_TASK_KD: f64 = 2e-5;

/// Bias-corrected Adam without weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<RealTensor>,
    v: Vec<RealTensor>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// First and second moments, aligned with the parameter list.
    pub fn moments(&self) -> (&[RealTensor], &[RealTensor]) {
        (&self.m, &self.v)
    }

    /// One update of `params` with `grads`. Every gradient is checked before
    /// any parameter changes.
    pub fn apply(&mut self, params: &mut [&mut RealTensor], names: &[String], grads: &[RealTensor]) -> Result<()> {
        if params.len() != grads.len() || names.len() != grads.len() {
            return Err(Error::dim("OptimizerState::apply", &[params.len(), names.len()], &[grads.len()]));
        }
        for ((p, g), name) in params.iter().zip(grads).zip(names) {
            if p.shape() != g.shape() {
                return Err(Error::Training {
                    param: name.clone(),
                    reason: format!("gradient shape {:?} does not match parameter {:?}", g.shape(), p.shape()),
                });
            }
            if g.data().iter().any(|v| !v.is_finite()) {
                return Err(Error::Training {
                    param: name.clone(),
                    reason: "non-finite gradient".to_string(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| RealTensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() {
            return Err(Error::contract("optimizer reused with a different parameter list"));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let md = m.data_mut_unchecked();
            let vd = v.data_mut_unchecked();
            let pd = p.data_mut_unchecked();
            for (((pi, &gi), mi), vi) in pd.iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi -= lr * m_hat / (libm::sqrt(v_hat) + eps);
            }
        }
        Ok(())
    }
}

/// Character vocabulary with three reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;

impl Vocabulary {
    pub fn new(symbols: &str) -> Result<Self> {
        let chars: Vec<char> = symbols.chars().collect();
        let unique: BTreeSet<char> = chars.iter().copied().collect();
        if unique.len() != chars.len() || chars.is_empty() {
            return Err(Error::Config("vocabulary symbols must be unique and non-empty".into()));
        }
        Ok(Self { symbols: chars })
    }

    /// Reserved ids plus one per symbol.
    pub fn size(&self) -> usize {
        3 + self.symbols.len()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn id(&self, c: char) -> Result<usize> {
        self.symbols
            .iter()
            .position(|&s| s == c)
            .map(|i| i + 3)
            .ok_or_else(|| Error::Input(format!("character {c:?} not in vocabulary")))
    }

    /// `[CLS] s1 [SEP] (s2 [SEP])` padded with `[PAD]` to `seq_len`.
    pub fn encode(&self, s1: &str, s2: Option<&str>, seq_len: usize) -> Result<Vec<usize>> {
        let mut out = vec![CLS];
        for c in s1.chars() {
            out.push(self.id(c)?);
        }
        out.push(SEP);
        if let Some(s2) = s2 {
            for c in s2.chars() {
                out.push(self.id(c)?);
            }
            out.push(SEP);
        }
        if out.len() > seq_len {
            return Err(Error::Input(format!(
                "packed sequence of {} tokens exceeds seq_len {seq_len}",
                out.len()
            )));
        }
        out.resize(seq_len, PAD);
        Ok(out)
    }
}

/// Target of one example.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Label {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub sentence: String,
    pub sentence2: Option<String>,
    pub tokens: Vec<usize>,
    pub label: Label,
}

/// Synthetic task families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TaskKind {
    /// Is `a` strictly more frequent than `b`?
    Majority,
    /// Does the pattern `ab` occur?
    Containment,
    /// Fraction of aligned positions where two strings agree.
    Similarity,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub alphabet: String,
    pub sentence_len: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub eval_size: usize,
}

/// Train and eval splits with no shared sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskSpec {
    pub fn majority() -> Self {
        Self {
            name: "majority".into(),
            kind: TaskKind::Majority,
            alphabet: "abc".into(),
            sentence_len: 5,
            seq_len: 8,
            train_size: 160,
            eval_size: 64,
        }
    }

    pub fn containment() -> Self {
        Self {
            name: "containment".into(),
            kind: TaskKind::Containment,
            alphabet: "abc".into(),
            sentence_len: 5,
            seq_len: 8,
            train_size: 160,
            eval_size: 64,
        }
    }

    pub fn similarity() -> Self {
        Self {
            name: "similarity".into(),
            kind: TaskKind::Similarity,
            alphabet: "abc".into(),
            sentence_len: 3,
            seq_len: 9,
            train_size: 160,
            eval_size: 64,
        }
    }

    pub fn head(&self) -> TaskHead {
        match self.kind {
            TaskKind::Similarity => TaskHead::Regression,
            _ => TaskHead::Classification { classes: 2 },
        }
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(&self.alphabet)
    }

    pub fn validate(&self) -> Result<()> {
        let vocab = self.vocabulary()?;
        let needed = match self.kind {
            TaskKind::Similarity => 2 * self.sentence_len + 3,
            _ => self.sentence_len + 2,
        };
        if needed > self.seq_len {
            return Err(Error::Config(format!("seq_len {} too short for packed length {needed}", self.seq_len)));
        }
        if self.kind != TaskKind::Similarity && !(self.alphabet.contains('a') && self.alphabet.contains('b')) {
            return Err(Error::Config("task alphabet must contain `a` and `b`".into()));
        }
        let space = match self.kind {
            TaskKind::Similarity => libm::pow(vocab.symbols().len() as f64, 2.0 * self.sentence_len as f64),
            _ => libm::pow(vocab.symbols().len() as f64, self.sentence_len as f64),
        };
        if ((self.train_size + self.eval_size) as f64) > space {
            return Err(Error::Config(format!(
                "{} distinct examples requested but only {space} exist",
                self.train_size + self.eval_size
            )));
        }
        Ok(())
    }

    fn label(&self, s1: &str, s2: Option<&str>) -> Label {
        match self.kind {
            TaskKind::Majority => {
                let a = s1.chars().filter(|&c| c == 'a').count();
                let b = s1.chars().filter(|&c| c == 'b').count();
                Label::Class(usize::from(a > b))
            }
            TaskKind::Containment => Label::Class(usize::from(s1.contains("ab"))),
            TaskKind::Similarity => {
                let s2 = s2.unwrap_or("");
                let same = s1.chars().zip(s2.chars()).filter(|(x, y)| x == y).count();
                Label::Score(same as f64 / self.sentence_len.max(1) as f64)
            }
        }
    }

    /// Builds an example from raw strings.
    pub fn example(&self, s1: &str, s2: Option<&str>) -> Result<Example> {
        let vocab = self.vocabulary()?;
        Ok(Example {
            sentence: s1.into(),
            sentence2: s2.map(String::from),
            tokens: vocab.encode(s1, s2, self.seq_len)?,
            label: self.label(s1, s2),
        })
    }

    /// Draws distinct sequences; classification splits are balanced where
    /// the task allows it.
    pub fn generate(&self, rng: &mut impl Rng) -> Result<Dataset> {
        self.validate()?;
        let symbols: Vec<char> = self.alphabet.chars().collect();
        let mut seen = BTreeSet::new();
        let draw = |rng: &mut dyn rand::RngCore| -> String {
            (0..self.sentence_len)
                .map(|_| symbols[rng.random_range(0..symbols.len())])
                .collect()
        };
        let total = self.train_size + self.eval_size;
        let mut examples = Vec::with_capacity(total);
        let mut per_class = [0usize; 2];
        let cap = total.div_ceil(2);
        let mut attempts = 0usize;
        while examples.len() < total {
            attempts += 1;
            if attempts > 1000 * total + 10_000 {
                return Err(Error::Config(format!("could not draw {total} distinct examples for {}", self.name)));
            }
            let s1 = draw(rng);
            let s2 = (self.kind == TaskKind::Similarity).then(|| draw(rng));
            let key = format!("{s1}|{}", s2.as_deref().unwrap_or(""));
            if seen.contains(&key) {
                continue;
            }
            let ex = self.example(&s1, s2.as_deref())?;
            if let Label::Class(c) = ex.label {
                if per_class[c] >= cap && attempts < 100 * total {
                    continue;
                }
                per_class[c] += 1;
            }
            seen.insert(key);
            examples.push(ex);
        }
        // Interleave classes so both splits stay balanced.
        let (mut zeros, mut rest): (Vec<Example>, Vec<Example>) =
            examples.into_iter().partition(|e| e.label == Label::Class(0));
        zeros.reverse();
        rest.reverse();
        let mut mixed = Vec::with_capacity(total);
        loop {
            let next = if mixed.len() % 2 == 0 {
                zeros.pop().or_else(|| rest.pop())
            } else {
                rest.pop().or_else(|| zeros.pop())
            };
            match next {
                Some(e) => mixed.push(e),
                None => break,
            }
        }
        let eval = mixed.split_off(self.train_size);
        Ok(Dataset { train: mixed, eval })
    }
}

/// Head output for a record: the head map applied to the first-token rates.
pub fn record_logits(params: &ModelParams, record: &EquilibriumRecord) -> Result<RealTensor> {
    let pooled = RealTensor::matrix(1, record.prediction_asr().cols(), record.prediction_asr().row(0).to_vec())?;
    matmul(&pooled, &params.head_w)?.add_row(&params.head_b)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    if n == 0 {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for i in 0..n {
        let (dx, dy) = (x[i] - mx, y[i] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / libm::sqrt(sxx * syy)
    }
}

/// Metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct Evaluation {
    /// Accuracy for classification, Pearson correlation for regression.
    pub metric: f64,
    pub predictions: Vec<f64>,
    /// Mean ASR of each layer averaged over examples.
    pub mean_asr: Vec<f64>,
    /// Spikes per neuron of each layer averaged over examples.
    pub ifr: Vec<f64>,
    pub mean_t_used: f64,
    pub layer_names: Vec<String>,
}

/// Simulates every example to equilibrium and scores the head output.
pub fn evaluate(cfg: &ModelConfig, params: &ModelParams, examples: &[Example], criterion: &ConvergenceCriterion) -> Result<Evaluation> {
    let records = examples
        .iter()
        .map(|ex| simulate_to_equilibrium(cfg, params, &ex.tokens, criterion))
        .collect::<Result<Vec<_>>>()?;
    evaluate_records(cfg, params, examples, &records)
}

/// Scores precomputed records.
pub fn evaluate_records(
    cfg: &ModelConfig,
    params: &ModelParams,
    examples: &[Example],
    records: &[EquilibriumRecord],
) -> Result<Evaluation> {
    let layers = cfg.layer_ids();
    let mut mean_asr = vec![0.0; layers.len()];
    let mut ifr = vec![0.0; layers.len()];
    let mut predictions = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    let mut correct = 0usize;
    let mut t_used = 0.0;
    for (ex, rec) in examples.iter().zip(records) {
        let logits = record_logits(params, rec)?;
        match ex.label {
            Label::Class(c) => {
                let p = argmax(logits.data());
                correct += usize::from(p == c);
                predictions.push(p as f64);
            }
            Label::Score(s) => {
                predictions.push(logits.data()[0]);
                targets.push(s);
            }
        }
        for i in 0..layers.len() {
            mean_asr[i] += rec.mean_asr(i);
            if let Some(counts) = &rec.spike_counts {
                ifr[i] += counts[i] as f64 / rec.neurons[i] as f64;
            }
        }
        t_used += rec.t_used as f64;
    }
    let n = examples.len().max(1) as f64;
    let metric = match cfg.head {
        TaskHead::Classification { .. } => correct as f64 / n,
        TaskHead::Regression => pearson(&predictions, &targets),
    };
    Ok(Evaluation {
        metric,
        predictions,
        mean_asr: mean_asr.into_iter().map(|v| v / n).collect(),
        ifr: ifr.into_iter().map(|v| v / n).collect(),
        mean_t_used: t_used / n,
        layer_names: layers.iter().map(|l| l.name()).collect(),
    })
}

/// Cross-entropy against a class label, or squared error against a score.
pub fn supervised_loss(tape: &mut Tape, logits: Var, label: Label) -> Result<Var> {
    match label {
        Label::Class(c) => {
            let k = tape.value(logits).cols();
            if c >= k {
                return Err(Error::Input(format!("label {c} outside {k} classes")));
            }
            let ls = tape.log_softmax_rows(logits);
            let mut onehot = vec![0.0; k];
            onehot[c] = -1.0;
            let w = tape.constant(RealTensor::new(vec![1, k], onehot)?);
            let picked = tape.mul(ls, w)?;
            Ok(tape.sum(picked))
        }
        Label::Score(s) => {
            let first = tape.slice_cols(logits, 0, 1)?;
            let target = tape.constant(RealTensor::new(vec![1, 1], vec![s])?);
            let diff = tape.sub(first, target)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.sum(sq))
        }
    }
}

/// Settings shared by the training loops.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub criterion: ConvergenceCriterion,
    pub solve: ImplicitSolveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: LR_TASK_KD,
            batch_size: 8,
            criterion: ConvergenceCriterion::default(),
            solve: ImplicitSolveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be finite and non-negative".into()));
        }
        self.criterion.validate()?;
        self.solve.validate()
    }
}

/// Per-epoch training log entry.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

/// Averages gradient maps in slice order.
pub fn average_grads(results: &[GradientResult], total_params: usize) -> Vec<RealTensor> {
    let mut out: Vec<Option<RealTensor>> = vec![None; total_params];
    for r in results {
        for (id, g) in &r.grads {
            if id.0 >= total_params {
                continue;
            }
            out[id.0] = Some(match out[id.0].take() {
                Some(acc) => acc.add(g).expect("gradient shapes agree"),
                None => g.clone(),
            });
        }
    }
    let n = results.len().max(1) as f64;
    out.into_iter()
        .map(|g| g.map(|g| g.scale(1.0 / n).expect("finite")).unwrap_or_else(|| RealTensor::zeros(&[0])))
        .collect()
}

/// Gradients of the supervised loss for one example.
pub fn supervised_gradients(
    cfg: &ModelConfig,
    params: &ModelParams,
    example: &Example,
    train: &TrainConfig,
) -> Result<GradientResult> {
    let record = simulate_to_equilibrium(cfg, params, &example.tokens, &train.criterion)?;
    let net = SurrogateNet::new(cfg, params)?;
    loss_gradients(
        &net,
        Some(&record),
        &example.tokens,
        |tape, graph| supervised_loss(tape, graph.logits, example.label),
        &train.solve,
    )
}

/// Applies averaged gradients to the model (and any extra tensors whose
/// `ParamId`s follow the model's).
pub fn apply_update(
    optimizer: &mut OptimizerState,
    params: &mut ModelParams,
    extra: &mut [(String, &mut RealTensor)],
    results: &[GradientResult],
) -> Result<()> {
    let names: Vec<String> = params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .chain(extra.iter().map(|(n, _)| n.clone()))
        .collect();
    let total = names.len();
    let mut grads = average_grads(results, total);
    let mut tensors: Vec<&mut RealTensor> = params.tensors_mut();
    for (_, t) in extra.iter_mut() {
        tensors.push(t);
    }
    for (g, t) in grads.iter_mut().zip(&tensors) {
        if g.is_empty() && !t.is_empty() {
            *g = RealTensor::zeros(t.shape());
        }
    }
    optimizer.apply(&mut tensors, &names, &grads)
}

/// Direct training on task labels.
pub fn train_supervised(
    cfg: &ModelConfig,
    params: &mut ModelParams,
    data: &Dataset,
    train: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<EpochMetrics>> {
    train.validate()?;
    let mut opt = OptimizerState::new(train.lr);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        order.shuffle(rng);
        let mut total = 0.0;
        for batch in order.chunks(train.batch_size) {
            let results = batch
                .iter()
                .map(|&i| supervised_gradients(cfg, params, &data.train[i], train))
                .collect::<Result<Vec<_>>>()?;
            total += results.iter().map(|r| r.loss).sum::<f64>();
            apply_update(&mut opt, params, &mut [], &results)?;
        }
        let eval = evaluate(cfg, params, &data.eval, &train.criterion)?;
        log.push(EpochMetrics {
            epoch,
            train_loss: total / data.train.len().max(1) as f64,
            eval_metric: eval.metric,
        });
    }
    Ok(log)
}
