use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set",
    "data.source_count=12",
    "--set",
    "data.target_count=12",
    "--set",
    "data.val_count=4",
];

fn segadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segadapt")).args(args).output().expect("spawn segadapt")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn gen_data(dir: &Path) {
    let mut args = vec!["gen-data", "--out", dir.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    ok(&segadapt(&args));
}

fn train(data: &Path, run: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", data.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--set", "eval.every=0"]);
    args.extend_from_slice(extra);
    ok(&segadapt(&args))
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_data(&a);
    gen_data(&b);
    let ta = tree(&a);
    assert!(ta.iter().any(|(n, _)| n.ends_with("manifest")));
    assert_eq!(ta, tree(&b));
}

#[test]
fn gen_data_without_out_is_an_error() {
    let out = segadapt(&["gen-data"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
}

#[test]
fn invalid_override_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = segadapt(&["gen-data", "--out", tmp.path().join("d").to_str().unwrap(), "--set", "data.classes=1"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn non_empty_directory_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen_data(&d);
    let mut args = vec!["gen-data", "--out", d.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    assert_eq!(segadapt(&args).status.code(), Some(1));
    args.push("--force");
    ok(&segadapt(&args));
}

#[test]
fn train_then_eval_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data);
    let stdout = train(&data, &run, &["--iterations", "3", "--no-pixel", "--no-patch"]);
    assert!(stdout.contains("target val mIoU"));
    for f in ["config.toml", "run.json", "metrics.jsonl", "checkpoint.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let lines = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["pixel"], 0.0);
    assert_eq!(first["patch"], 0.0);

    let ckpt = run.join("checkpoint.ckpt");
    let eval = |json: &Path| {
        ok(&segadapt(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--json", json.to_str().unwrap()]))
    };
    let (j1, j2) = (tmp.path().join("e1.json"), tmp.path().join("e2.json"));
    assert_eq!(eval(&j1), eval(&j2));
    assert_eq!(std::fs::read(&j1).unwrap(), std::fs::read(&j2).unwrap());

    let jt = tmp.path().join("teacher.json");
    let args =
        ["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--weights", "teacher"];
    ok(&segadapt(&[&args[..], &["--json", jt.to_str().unwrap()]].concat()));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&jt).unwrap()).unwrap();
    assert_eq!(report["weights"], "teacher");
    assert!(report["miou"].as_f64().unwrap().is_finite());
}

#[test]
fn untrained_checkpoint_scores_near_chance() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data);
    train(&data, &run, &["--iterations", "0"]);
    let json = tmp.path().join("e.json");
    ok(&segadapt(&[
        "eval",
        "--checkpoint",
        run.join("checkpoint.ckpt").to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--json",
        json.to_str().unwrap(),
    ]));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    let miou = report["miou"].as_f64().unwrap();
    assert!(miou < 0.35, "untrained mIoU {miou}");
}

#[test]
fn checkpoint_version_mismatch_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("run"));
    gen_data(&data);
    train(&data, &run, &["--iterations", "0"]);
    let ckpt = run.join("checkpoint.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    // magic (8 bytes) then the little-endian u32 version.
    bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = segadapt(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("v99"), "{err}");
}

#[test]
fn ablate_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, run) = (tmp.path().join("data"), tmp.path().join("abl"));
    gen_data(&data);
    let mut args = vec!["ablate", "--data", data.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--seeds", "1", "--iterations", "2", "--set", "eval.every=0"]);
    let stdout = ok(&segadapt(&args));
    assert!(stdout.contains("mIoU (mean ± std)"));
    assert!(run.join("ablation.json").exists());
    assert!(run.join("ablation.md").exists());
}

#[test]
fn ablate_refuses_when_over_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_data(&data);
    let run = tmp.path().join("abl");
    let mut args = vec!["ablate", "--data", data.to_str().unwrap(), "--run-dir", run.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&["--budget-minutes", "0.001"]);
    let out = segadapt(&args);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("over budget"));
}

#[test]
fn gradcheck_passes_and_detects_faults() {
    ok(&segadapt(&["gradcheck"]));
    let out = segadapt(&["gradcheck", "--inject-fault", "patch-gradient-sign"]);
    assert_eq!(out.status.code(), Some(2));
    // A tolerance below the attainable error fails verification.
    let out = segadapt(&["gradcheck", "--tol", "1e-30"]);
    assert_eq!(out.status.code(), Some(2));
}
