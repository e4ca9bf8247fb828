use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [0, 1]

[stream]
num_tasks = 2
input_dim = 3
classes_per_task = 2
samples_per_task = 40
pretrain_samples = 40

[model]
layer_dims = [3, 5, 4]
num_classes = 2

[pretrain]
epochs = 20

[finetune]
epochs = 20

[fusion]
ot_epochs = 4
head_epochs = 4
"#;

fn otmf(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_otmf"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_seed_scoped_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(otmf(d, &["gen"]));
    ok(otmf(d, &["train"]));
    for m in ["otmf", "swa", "task_arithmetic", "ties"] {
        ok(otmf(d, &["merge", "--method", m]));
    }
    let eval = ok(otmf(d, &["eval", "--seed", "1"]));
    assert_eq!(eval.lines().count(), 2);
    let ablate = ok(otmf(d, &["ablate-alpha", "--grid", "0,1", "--seed", "0"]));
    assert_eq!(ablate.lines().count(), 2);
    assert_eq!(ablate.matches("(best)").count(), 1);

    for seed in ["seed-0", "seed-1"] {
        let root = d.join("out").join(seed);
        for f in [
            "config.toml",
            "data/task2_test.csv",
            "models/pretrained.ckpt",
            "models/task1.ckpt",
            "models/task2.ckpt",
            "merge/otmf/step1.ckpt",
            "merge/otmf/step2.ckpt",
            "merge/ties/merged.ckpt",
            "merge/swa/report.json",
            "merge/swa/accuracy.csv",
            "merge/swa/timings.json",
        ] {
            assert!(root.join(f).exists(), "{seed}/{f} missing");
        }
    }
    let root = d.join("out/seed-1");
    assert!(!root.join("merge/otmf/step3.ckpt").exists());
    let dump = fs::read_to_string(root.join("eval/otmf/features_task1.csv")).unwrap();
    assert!(dump.starts_with("f0,f1,f2,f3,model\n"));
    let report = fs::read_to_string(root.join("merge/otmf/report.json")).unwrap();
    assert!(report.contains("\"seed\": 1"));
    assert!(report.contains("\"config\""));
    let alpha = fs::read_to_string(d.join("out/seed-0/ablate-alpha/alpha.csv")).unwrap();
    assert!(alpha.starts_with("alpha,task1,task2,average,best\n"));
}

#[test]
fn sft_checkpoint_eval_matches_training_record() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(otmf(d, &["gen", "--seed", "3"]));
    ok(otmf(d, &["train", "--seed", "3"]));
    let root = d.join("out/seed-3");
    let ckpt = root.join("models/task2.ckpt");
    ok(otmf(d, &["eval", "--seed", "3", "--checkpoint", ckpt.to_str().unwrap()]));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("eval/task2/eval.json")).unwrap()).unwrap();
    let reference: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(root.join("models/reference.json")).unwrap()).unwrap();
    let got = eval["result"]["tasks"][0]["accuracy"].as_f64().unwrap();
    let recorded = reference["result"]["finetuned"][1].as_f64().unwrap();
    assert!(got >= recorded - 1e-12);
    assert_eq!(eval["result"]["tasks"][0]["l1_shift"].as_f64().unwrap(), 0.0);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let bad = d.join("bad.toml");
    fs::write(&bad, "[fusion]\nalpha = 3.0\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_otmf"))
        .args(["--config", bad.to_str().unwrap(), "gen"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = otmf(d, &["merge", "--method", "bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // Merging before training: missing checkpoints.
    ok(otmf(d, &["gen", "--seed", "0"]));
    let out = otmf(d, &["merge", "--method", "swa", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));

    // Corrupt dataset.
    ok(otmf(d, &["train", "--seed", "0"]));
    fs::write(d.join("out/seed-0/data/task1_test.csv"), "x0,x1,x2,label\n1,2\n").unwrap();
    let out = otmf(d, &["merge", "--method", "swa", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(3));

    let out = otmf(d, &["ablate-alpha", "--grid", "0.5,1.5", "--seed", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_4() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(otmf(d, &["gen", "--seed", "0"]));
    ok(otmf(d, &["train", "--seed", "0"]));
    let ckpt = d.join("out/seed-0/models/task1.ckpt");
    let mut bytes = fs::read(&ckpt).unwrap();
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(&ckpt, bytes).unwrap();
    let out = otmf(d, &["eval", "--seed", "0", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}
