use alloc::vec::Vec;

use super::EquilibriumRecord;
use crate::attention::{surrogate_attention_on_tape, AttentionScore, AttentionVars};
use crate::error::{Error, Result};
use crate::model::{EncoderParams, LayerId, ModelConfig, ModelParams};
use crate::numerics::{ParamId, RealTensor, Tape, Var};

/// Damped Picard settings for the feedback fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct PicardConfig {
    pub damping: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Largest residual still accepted once `max_iters` is exhausted.
    pub accept: f64,
}

impl Default for PicardConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            tol: 1e-8,
            max_iters: 500,
            accept: 1e-6,
        }
    }
}

/// Registers every parameter on the tape with `ParamId` equal to its
/// canonical index.
pub fn register_params(tape: &mut Tape, params: &ModelParams) -> ModelParams<Var> {
    let mut i = 0;
    params.map(|_, t| {
        let v = tape.param(ParamId(i), t.clone());
        i += 1;
        v
    })
}

/// Steady-state equations of the spiking model, sharing its parameters.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateNet<'a> {
    pub cfg: &'a ModelConfig,
    pub params: &'a ModelParams,
    pub picard: PicardConfig,
}

/// Surrogate computation recorded on a tape.
#[derive(Debug, Clone)]
pub struct SurrogateGraph {
    pub params: ModelParams<Var>,
    /// Token plus position embedding.
    pub embedding: Var,
    /// Layer rates as consumed downstream (the simulated ASRs when a record
    /// was supplied), aligned with [`ModelConfig::layer_ids`].
    pub layers: Vec<Var>,
    /// Each layer's steady-state prediction from its upstream rates.
    pub raw: Vec<Var>,
    /// Per-encoder, per-head scaled scores.
    pub scores: Vec<Vec<Var>>,
    /// First-token row of the final output rates.
    pub pooled: Var,
    pub logits: Var,
    /// Input-layer rate leaf when feedback is enabled.
    pub z: Option<Var>,
    /// `l₁(l_M ∘ … ∘ l₂(z), x)` when feedback is enabled.
    pub g: Option<Var>,
}

/// Values of a surrogate evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub layers: Vec<RealTensor>,
    pub scores: Vec<AttentionScore>,
    pub logits: RealTensor,
    /// Picard iterations used (0 without feedback).
    pub iterations: usize,
    pub residual: f64,
}

/// Collects layer nodes, substituting simulated rates when a record is given.
struct Emitter<'r> {
    record: Option<&'r EquilibriumRecord>,
    layers: Vec<Var>,
    raw: Vec<Var>,
}

impl Emitter<'_> {
    fn emit(&mut self, tape: &mut Tape, pred: Var) -> Result<Var> {
        let used = match self.record {
            Some(r) => tape.substitute(pred, r.asr[self.layers.len()].clone())?,
            None => pred,
        };
        self.raw.push(pred);
        self.layers.push(used);
        Ok(used)
    }
}

fn clip_layer(tape: &mut Tape, pre: Var, v_th: f64) -> Result<Var> {
    let scaled = tape.scale(pre, 1.0 / v_th)?;
    Ok(tape.clip01(scaled))
}

impl<'a> SurrogateNet<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(cfg)?;
        Ok(Self {
            cfg,
            params,
            picard: PicardConfig::default(),
        })
    }

    /// Records the surrogate on `tape`. With a record, every layer consumes
    /// the simulated ASRs of its upstream layers while gradients follow the
    /// surrogate equations. Without one, the surrogate is evaluated on its
    /// own fixed point.
    pub fn build(&self, tape: &mut Tape, tokens: &[usize], record: Option<&EquilibriumRecord>) -> Result<SurrogateGraph> {
        if let Some(r) = record {
            if r.layers != self.cfg.layer_ids() {
                return Err(Error::contract("record layers do not match the model configuration"));
            }
        }
        let z_value = match (self.cfg.feedback_enabled, record) {
            (false, _) => None,
            (true, Some(r)) => Some(r.asr[0].clone()),
            (true, None) => Some(self.fixed_point(tokens)?.0),
        };
        self.build_at(tape, tokens, record, z_value)
    }

    fn build_at(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        record: Option<&EquilibriumRecord>,
        z_value: Option<RealTensor>,
    ) -> Result<SurrogateGraph> {
        let cfg = self.cfg;
        if tokens.len() != cfg.seq_len {
            return Err(Error::Input(alloc::format!(
                "sequence length {} does not match configured {}",
                tokens.len(),
                cfg.seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(alloc::format!("token id {bad} outside vocabulary of {}", cfg.vocab_size)));
        }
        let v_th = cfg.lif.v_th;
        let pv = register_params(tape, self.params);
        let tok = tape.gather_rows(pv.token_emb, tokens)?;
        let positions: Vec<usize> = (0..cfg.seq_len).collect();
        let pos = tape.gather_rows(pv.pos_emb, &positions)?;
        let embedding = tape.add(tok, pos)?;
        let input_pre = tape.add_row(embedding, pv.b_in)?;

        let mut em = Emitter {
            record,
            layers: Vec::new(),
            raw: Vec::new(),
        };
        let z = match z_value {
            Some(zv) => {
                let z = tape.input(zv);
                em.layers.push(z);
                em.raw.push(z);
                Some(z)
            }
            None => {
                let a_in = clip_layer(tape, input_pre, v_th)?;
                em.emit(tape, a_in)?;
                None
            }
        };

        let mut x = em.layers[0];
        let mut scores = Vec::with_capacity(cfg.n_encoders);
        for pe in &pv.encoders {
            let (out, s) = self.encoder(tape, pe, x, &mut em)?;
            scores.push(s);
            x = out;
        }

        let g = match (z, pv.feedback) {
            (Some(_), Some(f)) => {
                let fb = tape.matmul(x, f)?;
                let pre = tape.add(input_pre, fb)?;
                let g = clip_layer(tape, pre, v_th)?;
                em.raw[0] = g;
                Some(g)
            }
            (Some(_), None) => return Err(Error::Config("feedback enabled but no feedback matrix".into())),
            _ => None,
        };
        let Emitter { layers, raw, .. } = em;

        let pooled = tape.gather_rows(x, &[0])?;
        let logits = tape.matmul(pooled, pv.head_w)?;
        let logits = tape.add_row(logits, pv.head_b)?;
        Ok(SurrogateGraph {
            params: pv,
            embedding,
            layers,
            raw,
            scores,
            pooled,
            logits,
            z,
            g,
        })
    }

    fn encoder(
        &self,
        tape: &mut Tape,
        pe: &EncoderParams<Var>,
        a_x: Var,
        em: &mut Emitter,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = self.cfg;
        let v_th = cfg.lif.v_th;
        let a = &pe.attention;

        let k = tape.matmul(a_x, a.w_k)?;
        let k = tape.add_row(k, a.b_k)?;
        let a_k = clip_layer(tape, k, v_th)?;
        let a_k = em.emit(tape, a_k)?;

        let v = tape.matmul(a_x, a.w_v)?;
        let v = tape.add_row(v, a.b_v)?;
        let a_v = clip_layer(tape, v, v_th)?;
        let a_v = em.emit(tape, a_v)?;

        let vars = AttentionVars {
            w_q: a.w_q,
            b_q: a.b_q,
            b_attn: a.b_attn,
        };
        let (a_attn, scores) = surrogate_attention_on_tape(tape, a_x, a_k, a_v, vars, &cfg.attention_shape()?, v_th)?;
        let a_attn = em.emit(tape, a_attn)?;

        let h = tape.matmul(a_attn, pe.w_il1)?;
        let h = tape.add(h, a_x)?;
        let h = self.norm(tape, h, pe.ln1_gain, pe.ln1_shift)?;
        let h = tape.add_row(h, pe.b_il1)?;
        let a_il1 = clip_layer(tape, h, v_th)?;
        let a_il1 = em.emit(tape, a_il1)?;

        let h = tape.matmul(a_il1, pe.w_il2)?;
        let h = tape.gelu(h);
        let h = tape.add_row(h, pe.b_il2)?;
        let a_il2 = clip_layer(tape, h, v_th)?;
        let a_il2 = em.emit(tape, a_il2)?;

        let h = tape.matmul(a_il2, pe.w_out)?;
        let h = tape.add(h, a_il1)?;
        let h = self.norm(tape, h, pe.ln2_gain, pe.ln2_shift)?;
        let h = tape.add_row(h, pe.b_out)?;
        let a_out = clip_layer(tape, h, v_th)?;
        let a_out = em.emit(tape, a_out)?;
        Ok((a_out, scores))
    }

    fn norm(&self, tape: &mut Tape, x: Var, gain: Var, shift: Var) -> Result<Var> {
        if self.cfg.norm_enabled {
            tape.layer_norm(x, gain, shift)
        } else {
            Ok(x)
        }
    }

    /// `l₁(l_M ∘ … ∘ l₂(z), x)` for a given input-layer rate `z`.
    pub fn feedback_map(&self, tokens: &[usize], z: &RealTensor) -> Result<RealTensor> {
        let mut tape = Tape::new();
        let graph = self.build_at(&mut tape, tokens, None, Some(z.clone()))?;
        let g = graph.g.ok_or_else(|| Error::contract("feedback map requested without feedback"))?;
        Ok(tape.value(g).clone())
    }

    /// Damped Picard iteration for the input-layer fixed point. Returns the
    /// rate, the iterations used and the final residual.
    pub fn fixed_point(&self, tokens: &[usize]) -> Result<(RealTensor, usize, f64)> {
        let PicardConfig {
            damping,
            tol,
            max_iters,
            accept,
        } = self.picard;
        let mut a = RealTensor::zeros(&[self.cfg.seq_len, self.cfg.d_emb]);
        let mut residual = f64::INFINITY;
        for it in 0..max_iters {
            let la = self.feedback_map(tokens, &a)?;
            residual = la.max_abs_diff(&a)?;
            if residual < tol {
                return Ok((a, it, residual));
            }
            a = a.scale(1.0 - damping)?.add(&la.scale(damping)?)?;
        }
        let la = self.feedback_map(tokens, &a)?;
        residual = residual.min(la.max_abs_diff(&a)?);
        if residual > accept {
            return Err(Error::NonConvergence {
                what: "feedback fixed point",
                residual,
                iterations: max_iters,
            });
        }
        Ok((a, max_iters, residual))
    }
}

/// Surrogate layer rates, scores and logits for one input.
pub fn surrogate_forward(net: &SurrogateNet, tokens: &[usize]) -> Result<SurrogateOutput> {
    let (z, iterations, residual) = if net.cfg.feedback_enabled {
        let (z, it, r) = net.fixed_point(tokens)?;
        (Some(z), it, r)
    } else {
        (None, 0, 0.0)
    };
    let mut tape = Tape::new();
    let graph = net.build_at(&mut tape, tokens, None, z)?;
    let scores = graph
        .scores
        .iter()
        .map(|heads| AttentionScore {
            heads: heads.iter().map(|&h| tape.value(h).clone()).collect(),
        })
        .collect();
    Ok(SurrogateOutput {
        layers: graph.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        scores,
        logits: tape.value(graph.logits).clone(),
        iterations,
        residual,
    })
}

/// Difference between a layer's simulated ASR and its surrogate prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerAgreement {
    pub layer: LayerId,
    /// `‖a_sim − l(upstream a_sim)‖_F`.
    pub norm: f64,
    /// `norm / max(‖a_sim‖_F, ‖prediction‖_F)`, 0 when both vanish.
    pub relative: f64,
}

/// Per-layer Frobenius distance between the simulated ASRs and the surrogate
/// predictions evaluated on the simulated upstream ASRs.
pub fn agreement_report(record: &EquilibriumRecord, net: &SurrogateNet, tokens: &[usize]) -> Result<Vec<LayerAgreement>> {
    let mut tape = Tape::new();
    let graph = net.build(&mut tape, tokens, Some(record))?;
    record
        .layers
        .iter()
        .zip(&record.asr)
        .zip(&graph.raw)
        .map(|((&layer, sim), &pred)| {
            let pred = tape.value(pred);
            let norm = sim.sub(pred)?.frobenius_norm();
            let scale = sim.frobenius_norm().max(pred.frobenius_norm());
            let relative = if scale == 0.0 { 0.0 } else { norm / scale };
            Ok(LayerAgreement { layer, norm, relative })
        })
        .collect()
}
