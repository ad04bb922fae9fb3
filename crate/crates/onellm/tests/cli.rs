use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let stage = |name: &str, steps: u64| format!("[{name}]\nsteps = {steps}\nbatch = 2\nlr = 0.001\nwarmup = 1\n");
    let mut text = format!(
        "seed = 5\n{extra}\n[data]\ntrain_size = 6\neval_size = 2\neval_seed = 500\n[io]\nrun_dir = \"{}\"\n[ablation]\neval_size = 2\nexperts = [1, 2]\n",
        dir.join("run").display()
    );
    for (name, steps) in [
        ("stages.text", 3),
        ("stages.I", 3),
        ("stages.II", 2),
        ("stages.III", 2),
        ("stages.instruct", 2),
        ("ablation.align", 2),
        ("ablation.instruct", 4),
    ] {
        text.push_str(&stage(name, steps));
    }
    let path = dir.join("tiny.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn onellm(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_onellm"))
        .arg("--config")
        .arg(config)
        .arg("--quiet")
        .args(args)
        .env("ONEREPO_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn generate_data_writes_one_manifest_per_modality_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let first = ok(&onellm(&cfg, &["generate-data"]));
    assert_eq!(first.lines().count(), 8);
    let data = dir.path().join("run/data");
    let mut names: Vec<String> = std::fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["audio", "depth", "fmri", "image", "imu", "normal", "point", "video"].map(|m| format!("{m}.olmf")));
    let bytes: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(data.join(n)).unwrap()).collect();
    let second = ok(&onellm(&cfg, &["generate-data"]));
    assert_eq!(first, second);
    for (n, b) in names.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(data.join(n)).unwrap(), b, "{n}");
    }
    assert!(dir.path().join("run/config.toml").exists());
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let zero = tiny_config(dir.path(), "[data.sizes]\nvideo = 0");
    let out = onellm(&zero, &["generate-data"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("video"));
    let unknown = dir.path().join("bad.toml");
    std::fs::write(&unknown, "[model]\nexpertz = 3\n").unwrap();
    let out = onellm(&unknown, &["generate-data"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("expertz"));
    let cfg = tiny_config(dir.path(), "");
    assert_eq!(code(&onellm(&cfg, &["ablate", "--axis", "colour"])), 2);
    assert_eq!(code(&onellm(&cfg, &["train", "--stage", "IV"])), 2);
    assert_eq!(code(&onellm(&cfg, &["eval", "--task", "bleu"])), 2);
}

#[test]
fn missing_prerequisite_names_the_expected_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = onellm(&cfg, &["train", "--stage", "II"]);
    assert_eq!(code(&out), 3);
    // text warm-up and stage I take 3 steps each
    let expected = dir.path().join("run/ckpt_6.olmc");
    assert!(stderr(&out).contains(&expected.display().to_string()), "{}", stderr(&out));
    assert!(stderr(&out).contains("--stage I"));
    let out = onellm(&cfg, &["ablate", "--axis", "router"]);
    assert_eq!(code(&out), 3);
    let out = onellm(&cfg, &["eval", "--stage", "III"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn diverging_run_exits_with_4_and_leaves_a_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "[stages.I]\nsteps = 3\nbatch = 2\nlr = 0.001",
        "[stages.I]\nsteps = 3\nbatch = 2\nlr = 1e300",
    );
    std::fs::write(&cfg, text).unwrap();
    let out = onellm(&cfg, &["train", "--stage", "I"]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert!(dir.path().join("run/abort_I.olmc").exists());
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("run").join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn full_pipeline_eval_and_ablations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let run = dir.path().join("run");
    for stage in ["I", "II", "III", "instruct"] {
        let table = ok(&onellm(&cfg, &["train", "--stage", stage]));
        assert!(table.contains(&format!("stage {stage} report")), "{table}");
        assert!(table.contains("routing"));
    }
    for step in [6, 8, 10, 12] {
        assert!(run.join(format!("ckpt_{step}.olmc")).exists(), "ckpt_{step}");
    }
    // per-modality loss table with routing statistics
    let report: serde_json::Value = serde_json::from_str(&read(dir.path(), "report_III.json")).unwrap();
    assert_eq!(report["validation"].as_array().unwrap().len(), 8);
    let routing = report["phases"][0]["routing"].as_array().unwrap();
    assert!(!routing.is_empty());
    for r in routing {
        let sum: f64 = r[1].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }
    let metrics = read(dir.path(), "metrics_II.jsonl");
    assert_eq!(metrics.lines().count(), 2);
    let line: serde_json::Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    for key in ["stage", "phase", "step", "loss", "lr", "grad_norm", "modality_losses", "routing"] {
        assert!(line.get(key).is_some(), "{key}");
    }
    assert!(read(dir.path(), "metrics_II.csv").starts_with("stage,phase,step,modality,loss,lr,grad_norm\n"));

    // two evaluations of one checkpoint agree
    ok(&onellm(&cfg, &["eval", "--stage", "instruct"]));
    let a = read(dir.path(), "eval_instruct.json");
    ok(&onellm(&cfg, &["eval", "--stage", "instruct"]));
    assert_eq!(a, read(dir.path(), "eval_instruct.json"));
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    let rows = v["report"]["per_modality"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    for key in ["caption_exact_match", "qa_token_accuracy", "option_accuracy", "perplexity"] {
        assert!(rows.iter().all(|r| r[key].is_number()), "{key}");
    }
    // alignment checkpoints are scored on captions of their modalities
    let table = ok(&onellm(&cfg, &["eval", "--stage", "II", "--task", "perplexity"]));
    assert!(table.contains("Alignment"));
    let v: serde_json::Value = serde_json::from_str(&read(dir.path(), "eval_II.json")).unwrap();
    assert_eq!(v["report"]["per_modality"].as_array().unwrap().len(), 4);
    assert!(v["report"]["per_modality"][0]["caption_exact_match"].is_null());

    // ablation tables: one row per setting, shared seeds in the header
    let router = ok(&onellm(&cfg, &["ablate", "--axis", "router"]));
    let json: serde_json::Value = serde_json::from_str(&read(dir.path(), "ablate_router.json")).unwrap();
    let labels: Vec<&str> = json["align_rows"].as_array().unwrap().iter().map(|r| r["label"].as_str().unwrap()).collect();
    assert_eq!(labels, ["constant", "sparse", "soft"]);
    assert!(router.contains("data seed 0"), "{router}");
    let again = ok(&onellm(&cfg, &["ablate", "--axis", "router"]));
    assert_eq!(router, again);
    for (axis, rows) in [("experts", 2), ("init", 2), ("encoder", 2), ("replay", 3)] {
        ok(&onellm(&cfg, &["ablate", "--axis", axis]));
        let json: serde_json::Value = serde_json::from_str(&read(dir.path(), &format!("ablate_{axis}.json"))).unwrap();
        assert_eq!(json["align_rows"].as_array().unwrap().len(), rows, "{axis}");
        assert!(read(dir.path(), &format!("ablate_{axis}.csv")).lines().count() == rows + 1);
    }
    let mode = ok(&onellm(&cfg, &["ablate", "--axis", "mode"]));
    let json: serde_json::Value = serde_json::from_str(&read(dir.path(), "ablate_mode.json")).unwrap();
    let rows = json["mode_rows"].as_array().unwrap();
    assert_eq!(rows.len(), 8);
    assert!(mode.contains("joint") && mode.contains("separate"));
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "");
    let out = dir.path().join("elsewhere");
    ok(&onellm(&cfg, &["--seed", "99", "--out", out.to_str().unwrap(), "generate-data"]));
    let resolved = std::fs::read_to_string(out.join("config.toml")).unwrap();
    assert!(resolved.starts_with("seed = 99\n"), "{resolved}");
    assert!(out.join("data/image.olmf").exists());
    assert!(!dir.path().join("run").exists());
}
