//! Command implementations. Each run writes its artifacts and a manifest
//! into the output directory.

use std::path::{Path, PathBuf};

use eqspike_core::distill::{evaluate_teacher, run_pipeline, train_teacher, TeacherParams};
use eqspike_core::energy::{sweep, EnergyReport};
use eqspike_core::equilibrium::{agreement_report, simulate_to_equilibrium, ConvergenceCriterion, SurrogateNet};
use eqspike_core::gradients::{toy_gradient_check, GradCheckReport};
use eqspike_core::model::{ModelConfig, ModelParams};
use eqspike_core::train::{evaluate, train_supervised, Dataset, Evaluation};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_student, load_teacher, save_projections, save_student, save_teacher};
use crate::config::RunConfig;
use crate::corpus::{read_tsv, write_tsv};
use crate::error::{CliError, CliResult};
use crate::fsio::{write_csv, write_json};
use crate::report::{energy_rows, AgreementRow, DistillRow, EpochRow};

pub const MANIFEST_VERSION: u32 = 1;

/// Pipelines exposed on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Train,
    Distill,
    Eval,
    Sweep,
    Agreement,
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Distill => "distill",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
            Command::Agreement => "agreement",
            Command::Gradcheck => "gradcheck",
        }
    }
}

/// Resolved configuration, tool versions and written files of a run.
#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: Command,
    pub config: RunConfig,
    pub outputs: Vec<String>,
}

/// Outcome of a run, also printed as JSON on standard output.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub command: Command,
    pub out: PathBuf,
    pub outputs: Vec<String>,
    pub metric: Option<f64>,
}

struct Outputs<'a> {
    dir: &'a Path,
    names: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn path(&mut self, name: &str) -> PathBuf {
        self.names.push(name.to_string());
        self.dir.join(name)
    }
}

fn load_data(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> CliResult<Dataset> {
    match &cfg.corpus {
        Some(paths) => Ok(Dataset {
            train: read_tsv(&paths.train, &cfg.task)?,
            eval: read_tsv(&paths.eval, &cfg.task)?,
        }),
        None => Ok(cfg.task.generate(rng)?),
    }
}

fn require_checkpoint(cfg: &RunConfig) -> CliResult<&Path> {
    cfg.checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("this command needs --checkpoint".into()))
}

fn loaded_student(cfg: &RunConfig, path: &Path) -> CliResult<(ModelConfig, ModelParams)> {
    let (model, params) = load_student(path)?;
    let model = cfg.checkpoint_model(model);
    model.validate()?;
    if model.vocab_size != cfg.model.vocab_size || model.seq_len != cfg.model.seq_len || model.head != cfg.model.head {
        return Err(CliError::Config(format!(
            "checkpoint {} does not match the task's vocabulary, length or head",
            path.display()
        )));
    }
    Ok((model, params))
}

#[derive(Serialize)]
struct EvalFile<'a> {
    evaluation: &'a Evaluation,
    energy: &'a EnergyReport,
}

#[derive(Serialize)]
struct DistillSummary {
    teacher_metric: f64,
    initial: eqspike_core::distill::StageLoss,
    task_before: eqspike_core::distill::StageLoss,
    task_after: eqspike_core::distill::StageLoss,
    /// Task-stage hidden loss at initialization over the value after the task stage.
    hidden_drop: f64,
    eval_metric: f64,
}

#[derive(Serialize)]
struct GradCheckEntry {
    seed: u64,
    n_encoders: usize,
    seq_len: usize,
    d_emb: usize,
    report: GradCheckReport,
}

#[derive(Serialize)]
struct GradCheckFile {
    max_relative_error: f64,
    max_relative_error_feedback: f64,
    tolerance: f64,
    feedback_tolerance: f64,
    passed: bool,
    checks: Vec<GradCheckEntry>,
}

/// Executes `command` with a resolved configuration, writing into `out`.
pub fn run(command: Command, mut cfg: RunConfig, out: &Path) -> CliResult<RunSummary> {
    cfg.apply_overrides();
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut o = Outputs {
        dir: out,
        names: Vec::new(),
    };
    let mut check_failure = None;
    let metric = match command {
        Command::Train => {
            let data = load_data(&cfg, &mut rng)?;
            let mut params = match &cfg.checkpoint {
                Some(p) => loaded_student(&cfg, p)?.1,
                None => ModelParams::init_with(&cfg.model, &mut rng, &cfg.init),
            };
            let log = train_supervised(&cfg.model, &mut params, &data, &cfg.train, &mut rng)?;
            let eval = evaluate(&cfg.model, &params, &data.eval, &cfg.criterion)?;
            save_student(&o.path("student.json"), &cfg.model, &params)?;
            write_csv(&o.path("metrics.csv"), &log.iter().map(EpochRow::from).collect::<Vec<_>>())?;
            write_tsv(&o.path("train.tsv"), &data.train)?;
            write_tsv(&o.path("eval.tsv"), &data.eval)?;
            Some(eval.metric)
        }
        Command::Distill => {
            let data = load_data(&cfg, &mut rng)?;
            let mut student = match &cfg.checkpoint {
                Some(p) => loaded_student(&cfg, p)?.1,
                None => ModelParams::init_with(&cfg.model, &mut rng, &cfg.init),
            };
            let (tcfg, teacher) = match &cfg.teacher_checkpoint {
                Some(p) => load_teacher(p)?,
                None => {
                    let tcfg = cfg.teacher.config_for(&cfg.model);
                    tcfg.validate()?;
                    let mut t = TeacherParams::init(&tcfg, &mut rng, cfg.teacher.init_std);
                    let log = train_teacher(&tcfg, &mut t, &data, &cfg.teacher.train, &mut rng)?;
                    write_csv(&o.path("teacher_metrics.csv"), &log.iter().map(EpochRow::from).collect::<Vec<_>>())?;
                    (tcfg, t)
                }
            };
            let teacher_metric = evaluate_teacher(&tcfg, &teacher, &data.eval)?;
            let (proj, log) = run_pipeline(&cfg.task, &data, &cfg.model, &mut student, &tcfg, &teacher, &cfg.pipeline, &mut rng)?;
            let eval = evaluate(&cfg.model, &student, &data.eval, &cfg.criterion)?;
            save_teacher(&o.path("teacher.json"), &tcfg, &teacher)?;
            save_student(&o.path("student.json"), &cfg.model, &student)?;
            save_projections(&o.path("projections.json"), &cfg.model, &tcfg, &proj)?;
            write_csv(&o.path("distill_metrics.csv"), &log.metrics.iter().map(DistillRow::from).collect::<Vec<_>>())?;
            write_json(
                &o.path("summary.json"),
                &DistillSummary {
                    teacher_metric,
                    initial: log.initial,
                    task_before: log.task_before,
                    task_after: log.task_after,
                    hidden_drop: log.initial.hidden / log.task_after.hidden,
                    eval_metric: eval.metric,
                },
            )?;
            Some(eval.metric)
        }
        Command::Eval => {
            let data = load_data(&cfg, &mut rng)?;
            let (model, params) = loaded_student(&cfg, require_checkpoint(&cfg)?)?;
            let eval = evaluate(&model, &params, &data.eval, &cfg.criterion)?;
            let energy = EnergyReport::from_evaluation(&model, &eval, cfg.per_step_ifr)?;
            write_json(&o.path("eval.json"), &EvalFile {
                evaluation: &eval,
                energy: &energy,
            })?;
            write_csv(&o.path("energy.csv"), &energy_rows(&energy))?;
            Some(eval.metric)
        }
        Command::Sweep => {
            let data = load_data(&cfg, &mut rng)?;
            let (model, params) = loaded_student(&cfg, require_checkpoint(&cfg)?)?;
            let rows = sweep(&model, &params, &data.eval, &cfg.sweep, &cfg.criterion, cfg.per_step_ifr)?;
            write_csv(&o.path("sweep.csv"), &rows)?;
            None
        }
        Command::Agreement => {
            let data = load_data(&cfg, &mut rng)?;
            let (model, params) = match &cfg.checkpoint {
                Some(p) => loaded_student(&cfg, p)?,
                None => (cfg.model.clone(), ModelParams::init_with(&cfg.model, &mut rng, &cfg.init)),
            };
            let net = SurrogateNet::new(&model, &params)?;
            let mut rows = Vec::new();
            for &steps in &cfg.agreement.steps {
                let crit = ConvergenceCriterion {
                    window: cfg.criterion.window,
                    ..ConvergenceCriterion::fixed(steps)
                };
                for (i, ex) in data.eval.iter().take(cfg.agreement.examples).enumerate() {
                    let rec = simulate_to_equilibrium(&model, &params, &ex.tokens, &crit)?;
                    rows.extend(agreement_report(&rec, &net, &ex.tokens)?.iter().map(|a| AgreementRow::new(steps, i, a)));
                }
            }
            write_csv(&o.path("agreement.csv"), &rows)?;
            rows.iter().map(|r| r.relative).reduce(f64::max)
        }
        Command::Gradcheck => {
            let g = &cfg.gradcheck;
            let mut checks = Vec::new();
            let (mut worst, mut worst_fb) = (0.0f64, 0.0f64);
            for feedback in [false, true] {
                for i in 0..g.configs as u64 {
                    let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(i + if feedback { 500_000 } else { 0 });
                    let (model, report) = toy_gradient_check(seed, feedback, g.coordinates, g.step)?;
                    if feedback {
                        worst_fb = worst_fb.max(report.max_relative_error);
                    } else {
                        worst = worst.max(report.max_relative_error);
                    }
                    checks.push(GradCheckEntry {
                        seed,
                        n_encoders: model.n_encoders,
                        seq_len: model.seq_len,
                        d_emb: model.d_emb,
                        report,
                    });
                }
            }
            let passed = worst < g.tolerance && worst_fb < g.feedback_tolerance;
            write_json(
                &o.path("gradcheck.json"),
                &GradCheckFile {
                    max_relative_error: worst,
                    max_relative_error_feedback: worst_fb,
                    tolerance: g.tolerance,
                    feedback_tolerance: g.feedback_tolerance,
                    passed,
                    checks,
                },
            )?;
            if !passed {
                check_failure = Some(format!(
                    "max relative error {worst:e} (feedback {worst_fb:e}) exceeds tolerance"
                ));
            }
            Some(worst.max(worst_fb))
        }
    };
    let mut outputs = o.names;
    outputs.push("manifest.json".into());
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            manifest_version: MANIFEST_VERSION,
            tool: "eqspike",
            version: env!("CARGO_PKG_VERSION"),
            core_version: eqspike_core::VERSION,
            command,
            config: cfg,
            outputs: outputs.clone(),
        },
    )?;
    if let Some(msg) = check_failure {
        return Err(CliError::Check(msg));
    }
    Ok(RunSummary {
        command,
        out: out.to_path_buf(),
        outputs,
        metric,
    })
}
