use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dermanet"))
        .args(args)
        .output()
        .expect("spawn dermanet")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn missing_metadata_csv_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.csv");
    let cfg = write_config(
        tmp.path(),
        &format!("[data]\nmetadata_csv = {:?}\nsynthetic = false\n", p(&missing)),
    );
    let out = run(&["--config", p(&cfg), "--out", p(&tmp.path().join("o")), "-q", "prepare"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("nope.csv"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[loss]\ngama = 2.0\n");
    let out = run(&["--config", p(&cfg), "--out", p(&tmp.path().join("o")), "-q", "prepare"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("gama"), "{}", stderr(&out));
}

#[test]
fn dry_run_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let synth = run(&["--preset", "desk", "--out", p(&out_dir), "-q", "synth", "--size", "16"]);
    assert!(synth.status.success(), "{}", stderr(&synth));
    let before: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    let dry = run(&["--preset", "desk", "--out", p(&out_dir), "--dry-run", "prepare"]);
    assert!(dry.status.success(), "{}", stderr(&dry));
    assert!(String::from_utf8_lossy(&dry.stdout).contains("nv"));
    let after: Vec<_> = fs::read_dir(&out_dir).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(before, after);
    assert!(!out_dir.join("split.csv").exists());
}

#[test]
fn prepare_and_balance_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let o = p(&out_dir);
    assert!(run(&["--preset", "desk", "--out", o, "-q", "synth", "--size", "16"]).status.success());
    let prep = run(&["--preset", "desk", "--out", o, "prepare"]);
    assert!(prep.status.success(), "{}", stderr(&prep));
    let split = fs::read_to_string(out_dir.join("split.csv")).unwrap();
    assert_eq!(split.lines().count(), 701);
    assert!(out_dir.join("config.toml").exists());

    let bal = run(&["--preset", "desk", "--out", o, "balance", "--full-counts"]);
    assert!(bal.status.success(), "{}", stderr(&bal));
    let text = String::from_utf8_lossy(&bal.stdout);
    // round(0.6 * 250) = 150 for every minority class, 250 nv
    assert!(text.contains("150"), "{text}");
    assert!(text.contains("1150"), "{text}");
}

#[test]
fn missing_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let o = p(&out_dir);
    assert!(run(&["--preset", "desk", "--out", o, "-q", "synth", "--size", "16"]).status.success());
    let out = run(&["--preset", "desk", "--out", o, "-q", "eval"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = run(&["--preset", "desk", "--out", o, "-q", "explain", "--checkpoint", p(&tmp.path().join("ckpt"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn unknown_image_id_exits_2() {
    use dermanet::model::{CheckpointMeta, Classifier, FreezeStage};
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("o");
    let o = p(&out_dir);
    assert!(run(&["--preset", "desk", "--out", o, "-q", "synth", "--size", "16"]).status.success());
    assert!(run(&["--preset", "desk", "--out", o, "-q", "prepare"]).status.success());
    let cfg = dermanet::config::RunConfig::desk();
    let model = Classifier::build(&cfg.model, 1).unwrap();
    let ckpt = out_dir.join("checkpoints").join("best");
    model
        .save(
            &ckpt,
            &CheckpointMeta {
                format_version: dermanet::model::CHECKPOINT_FORMAT_VERSION,
                spec: cfg.model.clone(),
                freeze_stage: Some(FreezeStage::Full as u8),
                stage: Some(3),
                epoch: Some(1),
                history: serde_json::Value::Null,
            },
        )
        .unwrap();
    let out = run(&["--preset", "desk", "--out", o, "-q", "explain", "--image", "does_not_exist"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("does_not_exist"), "{}", stderr(&out));

    let ok = run(&["--preset", "desk", "--out", o, "-q", "explain", "--image", "blob_00000", "--kind", "both"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let files: Vec<String> = fs::read_dir(out_dir.join("explain"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(files.iter().any(|f| f.ends_with("_gradcam.png")), "{files:?}");
    assert!(files.iter().any(|f| f.ends_with("_saliency.csv")), "{files:?}");
}

#[test]
fn bad_arguments_exit_2() {
    let out = run(&["--preset", "nonsense", "prepare"]);
    assert_eq!(code(&out), 2);
    let out = run(&["frobnicate"]);
    assert_eq!(code(&out), 2);
}
