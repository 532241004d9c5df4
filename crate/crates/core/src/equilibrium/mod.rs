//! Forward phase to steady state, the ASR-domain surrogate network and
//! spiking↔surrogate agreement.

mod surrogate;

pub use surrogate::{
    agreement_report, register_params, surrogate_forward, LayerAgreement, PicardConfig, SurrogateGraph,
    SurrogateNet, SurrogateOutput,
};

use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::{AttentionScore, OpCounter};
use crate::error::{Error, Result};
use crate::model::{embed, model_step, LayerId, ModelConfig, ModelParams, ModelState};
use crate::numerics::RealTensor;

/// When to stop the forward phase.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ConvergenceCriterion {
    /// Hard step cap (`T_conv`).
    pub t_max: usize,
    /// Threshold on the windowed mean-ASR change. Zero forces `t_max` steps.
    pub tol: f64,
    /// Steps over which the change is measured.
    pub window: usize,
}

impl Default for ConvergenceCriterion {
    fn default() -> Self {
        Self {
            t_max: 80,
            tol: 1e-3,
            window: 10,
        }
    }
}

impl ConvergenceCriterion {
    /// Runs exactly `steps` steps.
    pub fn fixed(steps: usize) -> Self {
        Self {
            t_max: steps,
            tol: 0.0,
            window: 10.min(steps.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_max == 0 || self.window == 0 {
            return Err(Error::Config("t_max and window must be at least 1".into()));
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err(Error::Config(format!("tol must be finite and non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Result of one forward phase.
#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumRecord {
    pub layers: Vec<LayerId>,
    /// Converged ASR of each layer, aligned with `layers`.
    pub asr: Vec<RealTensor>,
    /// Per-encoder scores averaged over the final window.
    pub scores: Vec<AttentionScore>,
    /// `mean_asr_history[t][i]`: mean ASR of layer `i` after `t + 1` steps.
    pub mean_asr_history: Vec<Vec<f64>>,
    /// Windowed max-layer change, one entry per step from `t = window` on.
    pub change_history: Vec<f64>,
    pub t_used: usize,
    pub converged: bool,
    /// Total spikes per layer; `None` when counting was disabled.
    pub spike_counts: Option<Vec<u64>>,
    pub neurons: Vec<usize>,
    pub ops: OpCounter,
}

impl EquilibriumRecord {
    pub fn layer_index(&self, id: LayerId) -> Option<usize> {
        self.layers.iter().position(|&l| l == id)
    }

    pub fn layer_asr(&self, id: LayerId) -> Option<&RealTensor> {
        self.layer_index(id).map(|i| &self.asr[i])
    }

    /// ASR of the embedding-driven input layer.
    pub fn embedding_asr(&self) -> &RealTensor {
        &self.asr[0]
    }

    /// ASR of the final encoder output, the head's input.
    pub fn prediction_asr(&self) -> &RealTensor {
        &self.asr[self.asr.len() - 1]
    }

    pub fn mean_asr(&self, i: usize) -> f64 {
        self.asr[i].mean()
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(LayerId::name).collect()
    }
}

/// Step-by-step driver of the spiking model for one input.
#[derive(Debug, Clone)]
pub struct Simulator<'a> {
    cfg: &'a ModelConfig,
    params: &'a ModelParams,
    embedded: RealTensor,
    state: ModelState,
    layers: Vec<LayerId>,
    history: Vec<Vec<f64>>,
    changes: Vec<f64>,
    window_scores: VecDeque<Vec<AttentionScore>>,
    window: usize,
    count_spikes: bool,
}

impl<'a> Simulator<'a> {
    pub fn new(cfg: &'a ModelConfig, params: &'a ModelParams, tokens: &[usize], window: usize) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(cfg)?;
        if window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        Ok(Self {
            cfg,
            params,
            embedded: embed(tokens, params, cfg)?,
            state: ModelState::new(cfg),
            layers: cfg.layer_ids(),
            history: Vec::new(),
            changes: Vec::new(),
            window_scores: VecDeque::with_capacity(window),
            window,
            count_spikes: true,
        })
    }

    /// Disables spike counters in the produced records.
    pub fn without_spike_counts(mut self) -> Self {
        self.count_spikes = false;
        self
    }

    pub fn time(&self) -> usize {
        self.state.time()
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    /// Advances one step; returns the windowed change once `t ≥ window`.
    pub fn step(&mut self) -> Result<Option<f64>> {
        let scores = model_step(&mut self.state, self.params, self.cfg, &self.embedded)?;
        if self.window_scores.len() == self.window {
            self.window_scores.pop_front();
        }
        self.window_scores.push_back(scores);
        let means: Vec<f64> = self.layers.iter().map(|&id| self.state.layer(id).mean_asr()).collect();
        self.history.push(means);
        let t = self.history.len();
        if t < self.window {
            return Ok(None);
        }
        let now = &self.history[t - 1];
        let change = now
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let past = if t == self.window { 0.0 } else { self.history[t - 1 - self.window][i] };
                (m - past).abs()
            })
            .fold(0.0, f64::max);
        self.changes.push(change);
        Ok(Some(change))
    }

    /// Snapshot of the current state as a record.
    pub fn record(&self, converged: bool) -> Result<EquilibriumRecord> {
        let asr = self
            .layers
            .iter()
            .map(|&id| self.state.layer(id).asr())
            .collect::<Result<Vec<_>>>()?;
        let n_enc = self.cfg.n_encoders;
        let scores = (0..n_enc)
            .map(|e| {
                let window: Vec<AttentionScore> = self.window_scores.iter().map(|s| s[e].clone()).collect();
                AttentionScore::average(&window)
            })
            .collect::<Result<Vec<_>>>()?;
        let spike_counts = self
            .count_spikes
            .then(|| self.layers.iter().map(|&id| self.state.layer(id).spike_total()).collect());
        Ok(EquilibriumRecord {
            layers: self.layers.clone(),
            asr,
            scores,
            mean_asr_history: self.history.clone(),
            change_history: self.changes.clone(),
            t_used: self.time(),
            converged,
            spike_counts,
            neurons: self.layers.iter().map(|&id| self.state.layer(id).neurons()).collect(),
            ops: self.state.counter,
        })
    }
}

/// Steps until the windowed max-layer mean-ASR change drops below `tol` or
/// `t_max` is reached. Non-convergence is reported in the record.
pub fn simulate_to_equilibrium(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    criterion: &ConvergenceCriterion,
) -> Result<EquilibriumRecord> {
    criterion.validate()?;
    let mut sim = Simulator::new(cfg, params, tokens, criterion.window)?;
    while sim.time() < criterion.t_max {
        if let Some(change) = sim.step()? {
            if change < criterion.tol {
                return sim.record(true);
            }
        }
    }
    sim.record(false)
}
