//! End-to-end runs of the command-line tool.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use eqspike::checkpoint::{load_student, save_student};
use eqspike::config::RunConfig;
use eqspike_core::energy::SweepAxis;
use eqspike_core::model::{InitConfig, ModelConfig, ModelParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

fn eqspike(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eqspike")).args(args).output().unwrap()
}

fn write_config(dir: &Path, value: Value) -> String {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&value).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn small_config() -> Value {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.model.d_emb = 8;
    cfg.model.d_intermediate = 8;
    cfg.train.epochs = 2;
    cfg.teacher.train.epochs = 2;
    for s in [&mut cfg.pipeline.general, &mut cfg.pipeline.task, &mut cfg.pipeline.prediction] {
        s.train.epochs = 1;
    }
    cfg.pipeline.general_corpus_size = 16;
    cfg.sweep = SweepAxis::TConv(vec![4, 8, 16]);
    cfg.agreement.steps = vec![10, 40];
    cfg.agreement.examples = 2;
    cfg.gradcheck.configs = 1;
    cfg.gradcheck.coordinates = 20;
    serde_json::to_value(cfg).unwrap()
}

fn assert_success(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn out_dir(root: &Path, name: &str) -> String {
    root.join(name).to_str().unwrap().to_string()
}

#[test]
fn train_eval_sweep_agreement_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), small_config());
    let train = out_dir(tmp.path(), "train");
    assert_success(&eqspike(&["train", "--config", &config, "--out", &train]));
    let manifest: Value = serde_json::from_str(&fs::read_to_string(format!("{train}/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "train");
    assert_eq!(manifest["config"]["seed"], 3);
    for f in ["student.json", "metrics.csv", "train.tsv", "eval.tsv"] {
        assert!(Path::new(&train).join(f).exists(), "{f}");
    }
    let metrics = fs::read_to_string(format!("{train}/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let ckpt = format!("{train}/student.json");
    let eval = out_dir(tmp.path(), "eval");
    assert_success(&eqspike(&["eval", "--config", &config, "--checkpoint", &ckpt, "--out", &eval]));
    let report: Value = serde_json::from_str(&fs::read_to_string(format!("{eval}/eval.json")).unwrap()).unwrap();
    let e = report["energy"]["efficiency"].as_f64();
    let n = report["energy"]["norm_ops"].as_f64().unwrap();
    if let Some(e) = e {
        assert!((e * n - 5.1).abs() < 1e-12);
    }

    let sweep = out_dir(tmp.path(), "sweep");
    assert_success(&eqspike(&["sweep", "--config", &config, "--checkpoint", &ckpt, "--out", &sweep]));
    let rows = fs::read_to_string(format!("{sweep}/sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
    assert!(rows.starts_with("axis_value,accuracy,"));

    let agree = out_dir(tmp.path(), "agreement");
    assert_success(&eqspike(&["agreement", "--config", &config, "--checkpoint", &ckpt, "--out", &agree]));
    let rows = fs::read_to_string(format!("{agree}/agreement.csv")).unwrap();
    // 2 step counts × 2 examples × 7 layers.
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 7);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), small_config());
    let a = out_dir(tmp.path(), "a");
    let b = out_dir(tmp.path(), "b");
    assert_success(&eqspike(&["distill", "--config", &config, "--out", &a, "--t-conv", "20"]));
    let manifest = format!("{a}/manifest.json");
    assert_success(&eqspike(&["distill", "--config", &manifest, "--out", &b]));
    let names: Vec<String> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    assert!(names.len() >= 7);
    for name in names {
        let x = fs::read(Path::new(&a).join(&name)).unwrap();
        let y = fs::read(Path::new(&b).join(&name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn gradcheck_command_passes_and_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path(), small_config());
    let out = out_dir(tmp.path(), "gc");
    assert_success(&eqspike(&["gradcheck", "--config", &config, "--out", &out]));
    let report: Value = serde_json::from_str(&fs::read_to_string(format!("{out}/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 2);
}

#[test]
fn errors_are_json_with_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_dir(tmp.path(), "x");
    let missing = eqspike(&["eval", "--out", &out]);
    assert_eq!(missing.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&missing.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "config");

    let bad = write_config(tmp.path(), json!({"seed": 1, "sede": 2}));
    let out = eqspike(&["train", "--config", &bad, "--out", &out]);
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("sede"));

    let zero = eqspike(&["train", "--t-conv", "0", "--out", &out_dir(tmp.path(), "y")]);
    assert_eq!(zero.status.code(), Some(2));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        feedback_enabled: true,
        n_encoders: 2,
        ..ModelConfig::default()
    };
    let init = InitConfig {
        weight_std: 0.3,
        embedding_std: 1.0,
    };
    let params = ModelParams::init_with(&cfg, &mut ChaCha8Rng::seed_from_u64(9), &init);
    let path = tmp.path().join("s.json");
    save_student(&path, &cfg, &params).unwrap();
    let (cfg2, params2) = load_student(&path).unwrap();
    assert_eq!(cfg2, cfg);
    for ((n1, a), (n2, b)) in params.named().into_iter().zip(params2.named()) {
        assert_eq!(n1, n2);
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{n1}");
    }
}
