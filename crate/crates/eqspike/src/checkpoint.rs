//! JSON checkpoints: a configuration plus named tensors in canonical order.

use std::path::Path;

use eqspike_core::distill::{Projections, TeacherConfig, TeacherParams};
use eqspike_core::model::{ModelConfig, ModelParams};
use eqspike_core::numerics::RealTensor;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::fsio::{read_json, write_json};

pub const FORMAT: &str = "eqspike-checkpoint";
pub const SCHEMA_VERSION: u32 = 1;

/// Kind of weights stored in a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Student,
    Teacher,
    Projections,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// On-disk checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub schema_version: u32,
    pub kind: Kind,
    pub config: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new<C: Serialize>(kind: Kind, config: &C, named: Vec<(String, &RealTensor)>) -> Self {
        Self {
            format: FORMAT.into(),
            schema_version: SCHEMA_VERSION,
            kind,
            config: serde_json::to_value(config).expect("configs serialize"),
            tensors: named
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path, kind: Kind) -> CliResult<Self> {
        let ck: Checkpoint = read_json(path)?;
        if ck.format != FORMAT {
            return Err(CliError::format(path, format!("not an {FORMAT} file")));
        }
        if ck.schema_version != SCHEMA_VERSION {
            return Err(CliError::format(
                path,
                format!("unsupported schema version {}", ck.schema_version),
            ));
        }
        if ck.kind != kind {
            return Err(CliError::format(path, format!("expected a {kind:?} checkpoint, found {:?}", ck.kind)));
        }
        Ok(ck)
    }

    pub fn config_as<C: DeserializeOwned>(&self, path: &Path) -> CliResult<C> {
        serde_json::from_value(self.config.clone()).map_err(|e| CliError::format(path, e))
    }

    pub fn named_tensors(&self, path: &Path) -> CliResult<Vec<(String, RealTensor)>> {
        self.tensors
            .iter()
            .map(|t| {
                RealTensor::new(t.shape.clone(), t.data.clone())
                    .map(|r| (t.name.clone(), r))
                    .map_err(|e| CliError::format(path, format!("tensor `{}`: {e}", t.name)))
            })
            .collect()
    }
}

pub fn save_student(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> CliResult<()> {
    Checkpoint::new(Kind::Student, cfg, params.named()).save(path)
}

pub fn load_student(path: &Path) -> CliResult<(ModelConfig, ModelParams)> {
    let ck = Checkpoint::load(path, Kind::Student)?;
    let cfg: ModelConfig = ck.config_as(path)?;
    let params = ModelParams::from_named(&cfg, &ck.named_tensors(path)?)?;
    Ok((cfg, params))
}

pub fn save_teacher(path: &Path, cfg: &TeacherConfig, params: &TeacherParams) -> CliResult<()> {
    Checkpoint::new(Kind::Teacher, cfg, params.named()).save(path)
}

pub fn load_teacher(path: &Path) -> CliResult<(TeacherConfig, TeacherParams)> {
    let ck = Checkpoint::load(path, Kind::Teacher)?;
    let cfg: TeacherConfig = ck.config_as(path)?;
    let params = TeacherParams::from_named(&cfg, &ck.named_tensors(path)?)?;
    Ok((cfg, params))
}

/// Projections are stored with the student configuration they bridge from
/// and the teacher configuration they bridge to.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProjectionConfig {
    student: ModelConfig,
    teacher: TeacherConfig,
}

pub fn save_projections(path: &Path, student: &ModelConfig, teacher: &TeacherConfig, proj: &Projections) -> CliResult<()> {
    let cfg = ProjectionConfig {
        student: student.clone(),
        teacher: teacher.clone(),
    };
    Checkpoint::new(Kind::Projections, &cfg, proj.named()).save(path)
}

pub fn load_projections(path: &Path) -> CliResult<(ModelConfig, TeacherConfig, Projections)> {
    let ck = Checkpoint::load(path, Kind::Projections)?;
    let cfg: ProjectionConfig = ck.config_as(path)?;
    let proj = Projections::from_named(&cfg.student, &cfg.teacher, &ck.named_tensors(path)?)?;
    Ok((cfg.student, cfg.teacher, proj))
}
