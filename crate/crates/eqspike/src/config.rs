//! Run configuration: JSON with a schema version, overridden by flags.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, then
//! command-line flags. A run manifest is accepted as a config file.

use std::path::{Path, PathBuf};

use eqspike_core::distill::{DistillConfig, PipelineConfig, Stage, TeacherConfig};
use eqspike_core::energy::SweepAxis;
use eqspike_core::equilibrium::ConvergenceCriterion;
use eqspike_core::model::{InitConfig, ModelConfig};
use eqspike_core::train::{TaskSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsio::read_json;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Paths of TSV corpora replacing the generated task data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusPaths {
    pub train: PathBuf,
    pub eval: PathBuf,
}

/// Teacher architecture (vocabulary, length, heads and task head follow the
/// student) and its training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherSettings {
    pub n_layers: usize,
    pub d_hidden: usize,
    pub d_ff: usize,
    pub init_std: f64,
    pub train: TrainConfig,
}

impl Default for TeacherSettings {
    fn default() -> Self {
        Self {
            n_layers: 1,
            d_hidden: 16,
            d_ff: 32,
            init_std: 0.3,
            train: TrainConfig {
                epochs: 60,
                lr: 0.003,
                ..TrainConfig::default()
            },
        }
    }
}

impl TeacherSettings {
    pub fn config_for(&self, student: &ModelConfig) -> TeacherConfig {
        TeacherConfig::for_student(student, self.n_layers, self.d_hidden, self.d_ff)
    }
}

/// Finite-difference check settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSettings {
    /// Random configurations without feedback; as many again with feedback.
    pub configs: usize,
    pub coordinates: usize,
    pub step: f64,
    pub tolerance: f64,
    pub feedback_tolerance: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            configs: 10,
            coordinates: 80,
            step: 1e-5,
            tolerance: 1e-3,
            feedback_tolerance: 1e-2,
        }
    }
}

/// Simulation lengths and sample count of the agreement report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgreementSettings {
    pub steps: Vec<usize>,
    pub examples: usize,
}

impl Default for AgreementSettings {
    fn default() -> Self {
        Self {
            steps: vec![50, 500],
            examples: 4,
        }
    }
}

fn stage(stage: Stage, epochs: usize, lr: f64) -> DistillConfig {
    DistillConfig::new(
        stage,
        TrainConfig {
            epochs,
            lr,
            ..TrainConfig::default()
        },
    )
}

/// Desk-scale pipeline: 5 general, 25 task and 10 prediction epochs.
pub fn default_pipeline() -> PipelineConfig {
    PipelineConfig {
        general: stage(Stage::General, 5, 0.005),
        task: stage(Stage::Task, 25, 0.005),
        prediction: stage(Stage::Prediction, 10, 0.002),
        general_corpus_size: 160,
        projection_std: 0.02,
    }
}

/// Everything a run needs besides the command itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub task: TaskSpec,
    pub corpus: Option<CorpusPaths>,
    /// Vocabulary size, sequence length and head are taken from the task.
    pub model: ModelConfig,
    pub init: InitConfig,
    /// Inference criterion of `eval`, `sweep` and `agreement`.
    pub criterion: ConvergenceCriterion,
    pub train: TrainConfig,
    pub teacher: TeacherSettings,
    pub pipeline: PipelineConfig,
    pub sweep: SweepAxis,
    /// Divide IFR by the number of simulated steps.
    pub per_step_ifr: bool,
    pub agreement: AgreementSettings,
    pub gradcheck: GradCheckSettings,
    pub checkpoint: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    /// Replaces `t_max` of every criterion.
    pub t_conv: Option<usize>,
    /// Replaces the threshold of the model in use.
    pub v_th: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let task = TaskSpec::majority();
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            model: ModelConfig {
                d_emb: 32,
                d_intermediate: 32,
                ..ModelConfig::default()
            },
            task,
            corpus: None,
            init: InitConfig {
                weight_std: 0.3,
                embedding_std: 1.0,
            },
            criterion: ConvergenceCriterion::default(),
            train: TrainConfig {
                epochs: 30,
                lr: 0.005,
                ..TrainConfig::default()
            },
            teacher: TeacherSettings::default(),
            pipeline: default_pipeline(),
            sweep: SweepAxis::TConv(vec![4, 8, 16, 32, 64, 80]),
            per_step_ifr: false,
            agreement: AgreementSettings::default(),
            gradcheck: GradCheckSettings::default(),
            checkpoint: None,
            teacher_checkpoint: None,
            t_conv: None,
            v_th: None,
        }
    }
}

/// Overlays `top` on `base`. Objects merge key by key; a single-key object
/// whose key is absent from a single-key base replaces it (enum variants);
/// everything else replaces.
fn merge(base: &mut serde_json::Value, top: serde_json::Value) {
    use serde_json::Value;
    match (base, top) {
        (Value::Object(b), Value::Object(t)) if !(b.len() == 1 && t.len() == 1 && !b.contains_key(t.keys().next().unwrap())) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

impl RunConfig {
    /// Reads a config file or the `config` section of a run manifest.
    /// Reads a config or manifest. The file is merged over the defaults, so
    /// nested objects may be partial.
    pub fn load(path: &Path) -> CliResult<Self> {
        let mut value: serde_json::Value = read_json(path)?;
        if value.get("manifest_version").is_some() {
            value = value
                .get_mut("config")
                .map(serde_json::Value::take)
                .ok_or_else(|| CliError::format(path, "manifest has no config"))?;
        }
        let mut merged = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
        merge(&mut merged, value);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| CliError::format(path, e))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self) {
        if let Some(t) = self.t_conv {
            for c in [
                &mut self.criterion,
                &mut self.train.criterion,
                &mut self.pipeline.general.train.criterion,
                &mut self.pipeline.task.train.criterion,
                &mut self.pipeline.prediction.train.criterion,
            ] {
                c.t_max = t;
            }
        }
        if let Some(v) = self.v_th {
            self.model.lif.v_th = v;
        }
        self.model.vocab_size = self.task.vocabulary().map(|v| v.size()).unwrap_or(self.model.vocab_size);
        self.model.seq_len = self.task.seq_len;
        self.model.head = self.task.head();
    }

    /// Model of a loaded checkpoint with the threshold override applied.
    pub fn checkpoint_model(&self, mut cfg: ModelConfig) -> ModelConfig {
        if let Some(v) = self.v_th {
            cfg.lif.v_th = v;
        }
        cfg
    }

    pub fn validate(&self) -> CliResult<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.criterion.validate()?;
        self.train.validate()?;
        self.teacher.train.validate()?;
        for s in [&self.pipeline.general, &self.pipeline.task, &self.pipeline.prediction] {
            s.validate()?;
        }
        if self.t_conv == Some(0) {
            return Err(CliError::Config("--t-conv must be at least 1".into()));
        }
        match &self.sweep {
            SweepAxis::TConv(v) if v.is_empty() || v.contains(&0) => {
                return Err(CliError::Config("t_conv sweep needs positive step counts".into()))
            }
            SweepAxis::VTh(v) if v.is_empty() || v.iter().any(|x| !(*x > 0.0)) => {
                return Err(CliError::Config("v_th sweep needs positive thresholds".into()))
            }
            _ => {}
        }
        Ok(())
    }
}
