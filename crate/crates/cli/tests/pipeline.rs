//! End-to-end runs of the `stagematte` binary on a tiny workspace.

use std::path::{Path, PathBuf};
use std::process::Command;

const SMOKE: &str = r#"
seed = 3

[generator]
width = 32
height = 32

[generator.counts]
base = 3
capture_stage = 2
unlabeled = 2
validation = 1

[train.base_teacher]
batch_size = 2
iterations = 3

[train.base_student]
batch_size = 2
iterations = 3

[train.finetune_teacher]
batch_size = 2
iterations = 3

[train.finetune_student]
batch_size = 2
coarse_epochs = 1
joint_epochs = 1

[train.direct_student]
batch_size = 2
iterations = 3
"#;

struct Run {
    dir: PathBuf,
    config: PathBuf,
}

impl Run {
    fn new(dir: &Path) -> Self {
        let config = dir.join("smoke.toml");
        std::fs::write(&config, SMOKE).unwrap();
        Run {
            dir: dir.to_path_buf(),
            config,
        }
    }

    fn exec(&self, args: &[&str]) -> (i32, String, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_stagematte"))
            .current_dir(&self.dir)
            .arg("--config")
            .arg(&self.config)
            .arg("--workspace")
            .arg(self.dir.join("ws"))
            .args(args)
            .env_remove(stagematte_cli::WORKSPACE_ENV)
            .output()
            .unwrap();
        (
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }

    fn ok(&self, args: &[&str]) -> String {
        let (code, out, err) = self.exec(args);
        assert_eq!(code, 0, "{args:?} failed: {err}");
        out
    }

    fn read(&self, rel: &str) -> Vec<u8> {
        std::fs::read(self.dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
    }
}

const PIPELINE: &[&[&str]] = &[
    &["gen-data"],
    &["train-base", "--net", "teacher", "--out", "ck/teacher.ckpt"],
    &["train-base", "--net", "student", "--out", "ck/student.ckpt"],
    &["finetune-teacher", "--checkpoint", "ck/teacher.ckpt", "--out", "ck/teacher_ft.ckpt"],
    &["distill", "--checkpoint", "ck/teacher_ft.ckpt"],
    &["finetune-student", "--checkpoint", "ck/student.ckpt", "--out", "ck/student_ft.ckpt"],
    &["predict", "--checkpoint", "ck/student_ft.ckpt", "--split", "validation", "--out", "pred"],
    &["eval", "--pred", "pred", "--split", "validation", "--out", "reports/eval.json"],
];

const ARTIFACTS: &[&str] = &[
    "ws/manifest.jsonl",
    "ck/teacher.ckpt",
    "ck/teacher.log.tsv",
    "ck/student.ckpt",
    "ck/teacher_ft.ckpt",
    "ck/teacher_ft.log.tsv",
    "ws/pseudo/unlabeled-0000.png",
    "ck/student_ft.ckpt",
    "ck/student_ft.log.tsv",
    "pred/val-0000.png",
    "reports/eval.json",
];

#[test]
fn full_pipeline_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ra, rb) = (Run::new(a.path()), Run::new(b.path()));
    for step in PIPELINE {
        ra.ok(step);
        rb.ok(step);
    }
    for f in ARTIFACTS {
        assert_eq!(ra.read(f), rb.read(f), "{f} differs between runs");
    }
    let manifest = String::from_utf8(ra.read("ws/manifest.jsonl")).unwrap();
    assert!(manifest.contains("\"pseudo_label\":\"pseudo/unlabeled-0001.png\""));
    let log = String::from_utf8(ra.read("ck/teacher_ft.log.tsv")).unwrap();
    assert!(log.starts_with(stagematte::training::LOG_HEADER));
    assert_eq!(log.lines().count(), 4);

    // Re-running without --force is refused; with --force it reproduces.
    let (code, _, err) = ra.exec(PIPELINE[4]);
    assert_eq!(code, 1);
    assert!(err.contains("--force") && err.lines().count() == 1, "{err}");
    let before = ra.read("ws/pseudo/unlabeled-0000.png");
    ra.ok(&["distill", "--checkpoint", "ck/teacher_ft.ckpt", "--force"]);
    assert_eq!(ra.read("ws/pseudo/unlabeled-0000.png"), before);
}

#[test]
fn remaining_commands_emit_artifacts() {
    let d = tempfile::tempdir().unwrap();
    let r = Run::new(d.path());
    for step in &PIPELINE[..5] {
        r.ok(step);
    }
    r.ok(&["finetune-student-direct", "--checkpoint", "ck/student.ckpt", "--out", "ck/direct.ckpt"]);
    r.ok(&[
        "finetune-student-direct",
        "--checkpoint",
        "ck/student.ckpt",
        "--train-refiner",
        "--out",
        "ck/direct2.ckpt",
    ]);
    assert!(String::from_utf8(r.read("ck/direct2.log.tsv")).unwrap().contains("\nrefiner\t"));
    r.ok(&["predict", "--checkpoint", "ck/teacher_ft.ckpt", "--split", "validation", "--out", "pred"]);
    let table = r.ok(&["eval", "--pred", "pred", "--split", "validation", "--band", "2"]);
    assert!(table.contains("·10⁻⁴"));
    let qc = r.ok(&["qc", "--pred", "pred", "--split", "validation", "--out", "reports/qc.json"]);
    assert!(qc.contains("passed"));
    let report: serde_json::Value = serde_json::from_slice(&r.read("reports/qc.json")).unwrap();
    assert_eq!(report["band_radius"], 3);
    r.ok(&["export-review", "--pred", "pred", "--split", "validation", "--out", "review"]);
    let panel = stagematte::image::Image::decode_png(&r.read("review/val-0000.png")).unwrap();
    assert_eq!(panel.dims(), (128, 32));
    r.ok(&["export-review", "--checkpoint", "ck/teacher_ft.ckpt", "--split", "capture_stage", "--out", "review2"]);
    let sweep = r.ok(&[
        "ratio-sweep",
        "--checkpoint",
        "ck/teacher.ckpt",
        "--values",
        "0,0.5,1",
        "--iterations",
        "2",
        "--out",
        "sweep",
    ]);
    assert!(sweep.contains("base_fraction=0.5"));
    for f in ["sweep/ratio-0.ckpt", "sweep/ratio-1.ckpt", "sweep/ratio_sweep.txt", "sweep/ratio_sweep.json"] {
        r.read(f);
    }
}

#[test]
fn eval_of_ground_truth_is_zero() {
    let d = tempfile::tempdir().unwrap();
    let r = Run::new(d.path());
    r.ok(&["gen-data"]);
    std::fs::create_dir_all(d.path().join("gt")).unwrap();
    std::fs::copy(d.path().join("ws/data/val-0000/alpha.png"), d.path().join("gt/val-0000.png")).unwrap();
    r.ok(&["eval", "--pred", "gt", "--split", "validation", "--out", "zero.json"]);
    let rep: serde_json::Value = serde_json::from_slice(&r.read("zero.json")).unwrap();
    assert_eq!(rep["mse"], 0.0);
    assert_eq!(rep["sad"], 0.0);
    assert_eq!(rep["grad"], 0.0);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let r = Run::new(d.path());
    let code = |args: &[&str]| r.exec(args).0;
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["predict", "--bogus-flag"]), 1);
    // No workspace yet.
    assert_eq!(code(&["train-base", "--net", "teacher", "--out", "t.ckpt"]), 2);
    r.ok(&["gen-data"]);
    assert_eq!(code(&["predict", "--checkpoint", "missing.ckpt", "--split", "validation", "--out", "p"]), 2);
    assert_eq!(code(&["predict", "--checkpoint", "x", "--split", "valid", "--out", "p"]), 1);
    r.ok(&["train-base", "--net", "student", "--out", "s.ckpt"]);
    let (c, _, err) = r.exec(&["finetune-student", "--checkpoint", "s.ckpt", "--split", "validation", "--out", "x.ckpt"]);
    assert_eq!(c, 1, "{err}");
    assert_eq!(err.lines().count(), 1);
    assert_eq!(code(&["finetune-teacher", "--checkpoint", "s.ckpt", "--out", "x.ckpt"]), 1);

    std::fs::write(
        d.path().join("hot.toml"),
        "[generator]\nwidth = 32\nheight = 32\n[generator.counts]\nbase = 3\ncapture_stage = 2\nunlabeled = 2\nvalidation = 1\n\
         [train.base_teacher]\nbatch_size = 2\niterations = 20\nlr_initial = 1e300\nlr_after = 1e300\n",
    )
    .unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stagematte"))
        .current_dir(d.path())
        .args(["--config", "hot.toml", "--workspace", "ws", "train-base", "--net", "teacher", "--out", "hot.ckpt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn workspace_from_environment() {
    let d = tempfile::tempdir().unwrap();
    let ws = d.path().join("envws");
    let status = Command::new(env!("CARGO_BIN_EXE_stagematte"))
        .current_dir(d.path())
        .env(stagematte_cli::WORKSPACE_ENV, &ws)
        .args(["--config", "none.toml", "gen-data"])
        .output()
        .unwrap();
    // A missing config file is a usage problem, reported before anything runs.
    assert_ne!(status.status.code(), Some(0));
    std::fs::write(d.path().join("tiny.toml"), SMOKE).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stagematte"))
        .current_dir(d.path())
        .env(stagematte_cli::WORKSPACE_ENV, &ws)
        .args(["--config", "tiny.toml", "gen-data"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ws.join("manifest.jsonl").is_file());
}
