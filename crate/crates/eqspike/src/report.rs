//! CSV row types for metrics, sweeps, agreement and energy reports.

use eqspike_core::distill::DistillMetrics;
use eqspike_core::energy::EnergyReport;
use eqspike_core::equilibrium::LayerAgreement;
use eqspike_core::train::EpochMetrics;
use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: f64,
}

impl From<&EpochMetrics> for EpochRow {
    fn from(m: &EpochMetrics) -> Self {
        Self {
            epoch: m.epoch,
            train_loss: m.train_loss,
            eval_metric: m.eval_metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DistillRow {
    pub epoch: usize,
    pub stage: &'static str,
    pub hidden_loss: f64,
    pub attention_loss: f64,
    pub embedding_loss: f64,
    pub prediction_loss: f64,
    pub total_loss: f64,
    pub eval_metric: Option<f64>,
}

impl From<&DistillMetrics> for DistillRow {
    fn from(m: &DistillMetrics) -> Self {
        Self {
            epoch: m.epoch,
            stage: m.stage.name(),
            hidden_loss: m.loss.hidden,
            attention_loss: m.loss.attention,
            embedding_loss: m.loss.embedding,
            prediction_loss: m.loss.prediction,
            total_loss: m.loss.total,
            eval_metric: m.eval_metric,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementRow {
    pub steps: usize,
    pub example: usize,
    pub layer: String,
    pub difference_norm: f64,
    pub relative: f64,
}

impl AgreementRow {
    pub fn new(steps: usize, example: usize, a: &LayerAgreement) -> Self {
        Self {
            steps,
            example,
            layer: a.layer.name(),
            difference_norm: a.norm,
            relative: a.relative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyRow {
    pub layer: String,
    pub ifr: f64,
    /// Operations driven by this layer's spikes.
    pub driven_ops: f64,
}

/// One row per spiking layer.
pub fn energy_rows(report: &EnergyReport) -> Vec<EnergyRow> {
    report
        .layer_names
        .iter()
        .zip(&report.ifr)
        .zip(&report.layer_ops[1..])
        .map(|((name, &ifr), &ops)| EnergyRow {
            layer: name.clone(),
            ifr,
            driven_ops: ops,
        })
        .collect()
}
