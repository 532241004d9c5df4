//! Spike-count instrumentation and the normalized-operations energy model.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::equilibrium::{ConvergenceCriterion, EquilibriumRecord};
use crate::error::{Error, Result};
use crate::model::{LayerId, ModelConfig, ModelParams, SubLayer};
use crate::train::{evaluate, Evaluation, Example};

/// Energy of one multiply-accumulate, pJ.
pub const MAC_ENERGY_PJ: f64 = 4.6;
/// Energy of one accumulate, pJ.
pub const ACC_ENERGY_PJ: f64 = 0.9;
/// MAC to ACC energy ratio used by the efficiency factor.
pub const MAC_ACC_RATIO: f64 = 5.1;

/// Spikes per neuron of every layer in a record. `per_step` also divides
/// by the number of simulated steps.
pub fn collect_ifr(record: &EquilibriumRecord, per_step: bool) -> Result<Vec<f64>> {
    let counts = record
        .spike_counts
        .as_ref()
        .ok_or_else(|| Error::contract("spike counters were disabled for this simulation"))?;
    let steps = if per_step { record.t_used.max(1) as f64 } else { 1.0 };
    Ok(counts
        .iter()
        .zip(&record.neurons)
        .map(|(&c, &n)| c as f64 / n.max(1) as f64 / steps)
        .collect())
}

/// Synaptic operations of each layer's input current followed by the head.
/// Weight applications count fan-in × fan-out × positions; score and value
/// products count `N_s² · D` each.
pub fn layer_ops(cfg: &ModelConfig) -> Vec<f64> {
    let (n, d, di) = (cfg.seq_len as f64, cfg.d_emb as f64, cfg.d_intermediate as f64);
    let mut ops: Vec<f64> = cfg
        .layer_ids()
        .iter()
        .map(|id| match id {
            LayerId::Input => n * d + if cfg.feedback_enabled { n * d * d } else { 0.0 },
            LayerId::Encoder(_, SubLayer::Key | SubLayer::Value | SubLayer::Il1) => n * d * d,
            LayerId::Encoder(_, SubLayer::Attention) => n * d * d + 2.0 * n * n * d,
            LayerId::Encoder(_, SubLayer::Il2 | SubLayer::Output) => n * d * di,
        })
        .collect();
    ops.push(d * cfg.head.outputs() as f64);
    ops
}

/// `Σ_i IFR_i · ops_{i+1} / Σ ops`, with one more op entry than IFR entries.
pub fn norm_ops(ifr: &[f64], layer_ops: &[f64]) -> Result<f64> {
    if layer_ops.len() != ifr.len() + 1 {
        return Err(Error::dim("norm_ops", &[ifr.len() + 1], &[layer_ops.len()]));
    }
    if ifr.iter().chain(layer_ops).any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::contract("IFR and op counts must be finite and non-negative"));
    }
    let total: f64 = layer_ops.iter().sum();
    if total == 0.0 {
        return Err(Error::contract("op counts sum to zero"));
    }
    Ok(ifr.iter().zip(&layer_ops[1..]).map(|(f, o)| f * o).sum::<f64>() / total)
}

/// `e = 5.1 / Norm#OPS`.
pub fn efficiency(norm_ops: f64) -> Result<f64> {
    if norm_ops == 0.0 {
        return Err(Error::UndefinedEfficiency);
    }
    if !(norm_ops > 0.0 && norm_ops.is_finite()) {
        return Err(Error::contract(format!("normalized operations must be positive, got {norm_ops}")));
    }
    Ok(MAC_ACC_RATIO / norm_ops)
}

/// Per-layer firing and the resulting energy estimate.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct EnergyReport {
    pub layer_names: Vec<String>,
    pub ifr: Vec<f64>,
    pub layer_ops: Vec<f64>,
    pub norm_ops: f64,
    /// `None` for a silent network.
    pub efficiency: Option<f64>,
    pub mac_energy: f64,
    pub acc_energy: f64,
    pub mac_acc_ratio: f64,
}

impl EnergyReport {
    pub fn from_ifr(cfg: &ModelConfig, ifr: Vec<f64>) -> Result<Self> {
        let ops = layer_ops(cfg);
        let n = norm_ops(&ifr, &ops)?;
        Ok(Self {
            layer_names: cfg.layer_ids().iter().map(LayerId::name).collect(),
            ifr,
            layer_ops: ops,
            norm_ops: n,
            efficiency: match efficiency(n) {
                Ok(e) => Some(e),
                Err(Error::UndefinedEfficiency) => None,
                Err(e) => return Err(e),
            },
            mac_energy: MAC_ENERGY_PJ,
            acc_energy: ACC_ENERGY_PJ,
            mac_acc_ratio: MAC_ACC_RATIO,
        })
    }

    /// Report of a single simulation.
    pub fn from_record(cfg: &ModelConfig, record: &EquilibriumRecord, per_step: bool) -> Result<Self> {
        Self::from_ifr(cfg, collect_ifr(record, per_step)?)
    }

    /// Report from IFRs averaged over an evaluation pass.
    pub fn from_evaluation(cfg: &ModelConfig, eval: &Evaluation, per_step: bool) -> Result<Self> {
        let ifr = if per_step {
            let t = eval.mean_t_used.max(1.0);
            eval.ifr.iter().map(|v| v / t).collect()
        } else {
            eval.ifr.clone()
        };
        Self::from_ifr(cfg, ifr)
    }
}

/// Report averaged over the records of several inputs.
pub fn mean_report(cfg: &ModelConfig, records: &[EquilibriumRecord], per_step: bool) -> Result<EnergyReport> {
    let mut acc = vec![0.0; cfg.layer_ids().len()];
    for r in records {
        for (a, v) in acc.iter_mut().zip(collect_ifr(r, per_step)?) {
            *a += v;
        }
    }
    let n = records.len().max(1) as f64;
    EnergyReport::from_ifr(cfg, acc.into_iter().map(|v| v / n).collect())
}

/// Setting varied by a sweep.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SweepAxis {
    /// Fixed numbers of inference steps.
    TConv(Vec<usize>),
    /// Thresholds, each simulated with the base criterion.
    VTh(Vec<f64>),
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::TConv(_) => "t_conv",
            SweepAxis::VTh(_) => "v_th",
        }
    }
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SweepRow {
    pub axis_value: f64,
    pub accuracy: f64,
    pub mean_asr_attention: f64,
    pub mean_asr_il1: f64,
    pub mean_asr_il2: f64,
    pub mean_asr_output: f64,
    pub norm_ops: f64,
    pub e: Option<f64>,
}

/// Mean ASR of one sub-layer kind averaged over encoders.
pub fn sublayer_mean(cfg: &ModelConfig, eval: &Evaluation, sub: SubLayer) -> f64 {
    let ids = cfg.layer_ids();
    let vals: Vec<f64> = ids
        .iter()
        .zip(&eval.mean_asr)
        .filter(|(id, _)| matches!(id, LayerId::Encoder(_, s) if *s == sub))
        .map(|(_, v)| *v)
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// Evaluation and energy report at one setting.
pub fn sweep_point(
    cfg: &ModelConfig,
    params: &ModelParams,
    examples: &[Example],
    criterion: &ConvergenceCriterion,
    per_step: bool,
) -> Result<(Evaluation, EnergyReport)> {
    let eval = evaluate(cfg, params, examples, criterion)?;
    let report = EnergyReport::from_evaluation(cfg, &eval, per_step)?;
    Ok((eval, report))
}

/// Evaluates every setting of `axis` and tabulates accuracy, sub-layer
/// rates and energy.
pub fn sweep(
    cfg: &ModelConfig,
    params: &ModelParams,
    examples: &[Example],
    axis: &SweepAxis,
    base: &ConvergenceCriterion,
    per_step: bool,
) -> Result<Vec<SweepRow>> {
    let settings: Vec<(f64, ModelConfig, ConvergenceCriterion)> = match axis {
        SweepAxis::TConv(ts) => ts
            .iter()
            .map(|&t| (t as f64, cfg.clone(), ConvergenceCriterion { window: base.window, ..ConvergenceCriterion::fixed(t) }))
            .collect(),
        SweepAxis::VTh(vs) => vs
            .iter()
            .map(|&v| {
                let mut c = cfg.clone();
                c.lif.v_th = v;
                (v, c, *base)
            })
            .collect(),
    };
    let mut rows = Vec::with_capacity(settings.len());
    for (value, c, crit) in settings {
        c.validate()?;
        let (eval, report) = sweep_point(&c, params, examples, &crit, per_step)?;
        rows.push(SweepRow {
            axis_value: value,
            accuracy: eval.metric,
            mean_asr_attention: sublayer_mean(&c, &eval, SubLayer::Attention),
            mean_asr_il1: sublayer_mean(&c, &eval, SubLayer::Il1),
            mean_asr_il2: sublayer_mean(&c, &eval, SubLayer::Il2),
            mean_asr_output: sublayer_mean(&c, &eval, SubLayer::Output),
            norm_ops: report.norm_ops,
            e: report.efficiency,
        });
    }
    Ok(rows)
}
