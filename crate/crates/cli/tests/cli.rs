use std::path::Path;
use std::process::{Command, Output};

use ifgmi_core::seed;
use serde_json::Value;

fn ifgmi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ifgmi")).args(args).output().expect("binary runs")
}

fn common<'a>(cmd: &'a str, out: &'a Path, config: Option<&'a Path>) -> Vec<String> {
    let mut v = vec![cmd.to_string(), "--out".into(), out.display().to_string(), "--seed".into(), "3".into()];
    v.extend(["--threads".into(), "1".into()]);
    if let Some(c) = config {
        v.extend(["--config".into(), c.display().to_string()]);
    }
    v
}

fn run(args: &[String]) -> Output {
    ifgmi(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {line}"))
}

fn success(out: Output) -> Value {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("summary JSON")
}

/// A corpus and models small enough to train in seconds.
const TINY: &str = r#"{
  "corpus": {"identities": 3, "per_identity": 20, "public_size": 500},
  "training": {
    "prior": {"arch": {"block_channels": [4, 4, 4, 4]}, "epochs": 1, "batch": 50, "fid_samples": 100},
    "classifier": {"epochs": 15}
  },
  "attack": {"candidates": 6, "select": 2, "n_aug": 2, "steps": [2, 1, 1, 1]},
  "methods": [{"kind": "ifgmi", "depth": 3}, {"kind": "ifgmi", "depth": 0}, {"kind": "latent"}, {"kind": "pixel"}],
  "baselines": {"pixel_steps": 3, "latent_steps": 2},
  "metrics": {"k": 2},
  "repeats": 2,
  "ablation": {"repeats": 1, "radii_scales": [0.0, 1.0]}
}"#;

#[test]
fn usage_errors_are_json_with_exit_code_2() {
    let out = ifgmi(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["kind"], "usage");
    assert!(ifgmi(&["--help"]).status.success());
}

#[test]
fn attack_without_checkpoints_names_the_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&common("attack", dir.path(), None));
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["command"], "attack");
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("checkpoint"));
}

#[test]
fn train_without_corpus_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = common("train", dir.path(), None);
    args.extend(["--model".into(), "target".into()]);
    let err = error_json(&run(&args));
    assert_eq!(err["kind"], "missing_artifact");
    assert!(err["message"].as_str().unwrap().contains("private corpus"));
}

#[test]
fn bad_config_and_unknown_axis_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"corpus": {"identities": 10, "colour": 3}}"#).unwrap();
    let err = error_json(&run(&common("gen-data", &dir.path().join("o"), Some(&cfg))));
    assert_eq!(err["kind"], "invalid_config");

    let mut args = common("ablate", &dir.path().join("o"), None);
    args.extend(["--axis".into(), "width".into()]);
    let out = run(&args);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["kind"], "invalid_config");
}

#[test]
fn gen_data_is_reproducible_and_emits_both_presets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let sa = success(run(&common("gen-data", &a, Some(&cfg))));
    let sb = success(run(&common("gen-data", &b, Some(&cfg))));
    assert_eq!(sa["private"], sb["private"]);
    assert_eq!(sa["public"], sb["public"]);
    let shifts: Vec<&str> = sa["public"].as_array().unwrap().iter().map(|p| p["shift"].as_str().unwrap()).collect();
    assert_eq!(shifts, ["mild", "strong"]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(a.join("data/private.json")).unwrap()).unwrap();
    assert_eq!(manifest["identities"], 3);
    assert_eq!(manifest["images_per_identity"], 20);
    let echoed = std::fs::read(a.join("config.json")).unwrap();
    assert_eq!(sa["config_hash"], seed::hex_digest(&echoed));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("run");
    success(run(&common("gen-data", &out, Some(&cfg))));
    let trained = success(run(&common("train", &out, Some(&cfg))));
    let models = trained["models"].as_array().unwrap();
    assert_eq!(models.len(), 4);
    let seeds: Vec<u64> = models.iter().map(|m| m["seed"].as_u64().unwrap()).collect();
    assert_ne!(seeds[0], seeds[1], "target and eval seeds differ");
    assert!(models[3]["fid_final"].is_f64());

    success(run(&common("attack", &out, Some(&cfg))));
    for label in ["ifgmi-L3", "ifgmi-L0", "latent", "pixel"] {
        for r in 0..2 {
            let d = out.join("attack").join(label).join(format!("seed_{r}"));
            for f in ["result.json", "final.ifgt", "final.ppm"] {
                assert!(d.join(f).exists(), "{label}/{r}/{f}");
            }
        }
    }
    assert!(out.join("attack/ifgmi-L3/seed_0/snapshots/stage_3.ppm").exists());
    let result: Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("attack/ifgmi-L3/seed_0/result.json")).unwrap()).unwrap();
    assert_eq!(result["audit"]["stages"].as_array().unwrap().len(), 4);

    // a second single-threaded attack reproduces the tensors bit for bit
    let first = std::fs::read(out.join("attack/ifgmi-L3/seed_1/final.ifgt")).unwrap();
    success(run(&common("attack", &out, Some(&cfg))));
    assert_eq!(first, std::fs::read(out.join("attack/ifgmi-L3/seed_1/final.ifgt")).unwrap());

    success(run(&common("evaluate", &out, Some(&cfg))));
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report/report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 4 * 2);
    for row in rows {
        let m = &row["metrics"];
        assert!(m["acc1"].as_f64().unwrap() <= m["acc5"].as_f64().unwrap());
    }
    assert_eq!(report["config_hash"], seed::hex_digest(&std::fs::read(out.join("config.json")).unwrap()));
    assert_eq!(report["reference"]["delta_eval"], 0.0);
    let eval: Value = serde_json::from_str(&std::fs::read_to_string(out.join("models/eval.json")).unwrap()).unwrap();
    assert_eq!(report["reference"]["acc1"], eval["report"]["train_accuracy"]);
    let csv = std::fs::read_to_string(out.join("report/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 8);
    assert!(out.join("report/grid_ifgmi-L3.ppm").exists());

    let mut args = common("ablate", &out, Some(&cfg));
    args.extend(["--axis".into(), "L".into()]);
    let sweep = success(run(&args));
    assert_eq!(sweep["table"].as_array().unwrap().len(), 4);
    let mut args = common("ablate", &out, Some(&cfg));
    args.extend(["--axis".into(), "radii".into()]);
    success(run(&args));
    let table = std::fs::read_to_string(out.join("ablate/radii_table.csv")).unwrap();
    assert_eq!(table.lines().count(), 1 + 2);
}
