use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tc::lwsi::{read_lwsi, write_lwsi};

const TINY: &str = r#"{
  "backbone": { "variant": "conv", "embed_dim": 16, "depths": [1, 1, 1, 1], "input_size": 32 },
  "tasks": [
    { "name": "classification", "kind": "classification", "train_size": 6, "val_size": 3 },
    { "name": "segmentation", "kind": "segmentation", "train_size": 6, "val_size": 3 },
    { "name": "detection", "kind": "detection", "train_size": 6, "val_size": 3 }
  ],
  "trainer": { "accumulation": 3, "batch_size": 2, "total_steps": 9, "checkpoint_every": 1 },
  "compression": { "patch_size": 32, "stride": 32, "workers": 2 },
  "mil": { "hidden_dim": 8, "train": { "epochs": 2 } },
  "eval": { "seeds": [0] },
  "fixture": { "slides_per_center": 6, "size": [448, 448] },
  "seed": 4
}"#;

fn tc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tc")).args(args).env_remove("TC_OUTPUT_DIR").output().expect("spawn tc")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stdout:\n{}\nstderr:\n{}", String::from_utf8_lossy(&o.stdout), stderr(o));
}

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
}

fn setup() -> Env {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("tiny.json");
    std::fs::write(&config, TINY).unwrap();
    Env { _dir: dir, root, config: config.display().to_string() }
}

impl Env {
    fn run(&self, args: &[&str]) -> Output {
        let out = self.root.join("run").display().to_string();
        let mut all = vec!["-c", self.config.as_str(), "--output-dir", out.as_str()];
        all.extend_from_slice(args);
        tc(&all)
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).display().to_string()
    }

    fn slides(&self) -> String {
        let p = self.path("slides");
        ok(&self.run(&["synth", "--out", &p]));
        p
    }

    fn latents(&self) -> String {
        let slides = self.slides();
        let out = self.path("latents");
        ok(&self.run(&["compress", "--random-init", "--slides", &slides, "--out", &out]));
        out
    }
}

fn files_with_ext(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn missing_config_exits_2_and_names_the_file() {
    let o = tc(&["-c", "/nonexistent/run.json", "report", "/tmp"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/run.json"), "{}", stderr(&o));
}

#[test]
fn unknown_key_exits_2_with_its_path() {
    let env = setup();
    let bad = TINY.replace("\"checkpoint_every\": 1", "\"checkpoint_every\": 1, \"bogus\": 3");
    std::fs::write(&env.config, bad).unwrap();
    let o = env.run(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("trainer") && err.contains("bogus"), "{err}");
}

#[test]
fn wrong_type_names_the_json_path() {
    let env = setup();
    std::fs::write(&env.config, TINY.replace("\"epochs\": 2", "\"epochs\": \"two\"")).unwrap();
    let o = env.run(&["pretrain"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mil.train.epochs"), "{}", stderr(&o));
}

#[test]
fn bad_split_argument_is_an_invocation_error() {
    let o = tc(&["train-mil", "--latents", "/tmp", "--split", "kfold:1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn report_on_empty_dir_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = tc(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn pretrain_writes_log_checkpoint_and_provenance() {
    let env = setup();
    ok(&env.run(&["pretrain", "--no-eval"]));
    let run = env.root.join("run");
    let log = std::fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 9);
    for (i, line) in log.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["step"], i as u64);
        assert_eq!(v["task_id"], (i % 3) as u64);
    }
    for f in ["checkpoint.tcck", "encoder.tcck", "resolved_config.json", "provenance.json", "pretrain_summary.json"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    // resuming a finished run is a no-op that keeps the log intact
    ok(&env.run(&["pretrain", "--no-eval", "--resume"]));
    assert_eq!(std::fs::read_to_string(run.join("train_log.jsonl")).unwrap(), log);
}

#[test]
fn deterministic_pretraining_reproduces_checkpoints() {
    let env = setup();
    let mut sums = Vec::new();
    for name in ["a", "b"] {
        let out = env.path(name);
        ok(&tc(&["-c", &env.config, "--deterministic", "--seed", "7", "--output-dir", &out, "pretrain", "--no-eval"]));
        sums.push(tc::io::file_checksum(&Path::new(&out).join("checkpoint.tcck")).unwrap());
    }
    assert_eq!(sums[0], sums[1]);
}

#[test]
fn compress_then_skip_existing() {
    let env = setup();
    let latents = env.latents();
    let files = files_with_ext(Path::new(&latents), "lwsi");
    assert_eq!(files.len(), 12);
    let l = read_lwsi(&files[0]).unwrap();
    assert_eq!(l.data.shape(), &[16, 14, 14]);
    assert_eq!(l.meta.encoder_id, "random");

    let slides = env.path("slides");
    let o = env.run(&["compress", "--random-init", "--slides", &slides, "--out", &latents, "--skip-existing"]);
    ok(&o);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&latents).join("compress_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["skipped"], 12);
    assert_eq!(summary["written"], 0);
}

#[test]
fn one_corrupt_slide_is_a_partial_failure() {
    let env = setup();
    let slides = env.slides();
    let pngs = files_with_ext(Path::new(&slides), "png");
    std::fs::write(&pngs[3], b"not a png").unwrap();
    let out = env.path("latents");
    let o = env.run(&["compress", "--random-init", "--slides", &slides, "--out", &out]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert_eq!(files_with_ext(Path::new(&out), "lwsi").len(), pngs.len() - 1);
}

#[test]
fn train_mil_both_heads_share_splits_and_report_renders() {
    let env = setup();
    let latents = env.latents();
    let mut test_ids = Vec::new();
    for head in ["maxpool", "abmil"] {
        let out = env.path(&format!("mil-{head}"));
        ok(&env.run(&["train-mil", "--latents", &latents, "--split", "cross-center", "--head", head, "--out", &out]));
        let reports = files_with_ext(&Path::new(&out).join("reports"), "json");
        assert_eq!(reports.len(), 1);
        let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&reports[0]).unwrap()).unwrap();
        assert_eq!(r["head"], head);
        assert_eq!(r["sizes"]["test"], 6);
        assert_eq!(r["sizes"]["train"].as_u64().unwrap() + r["sizes"]["val"].as_u64().unwrap(), 6);
        test_ids.push(r["test_ids"].clone());

        let heads = files_with_ext(&Path::new(&out).join("heads"), "tcck");
        let eval = env.run(&["eval", "--checkpoint", heads[0].to_str().unwrap(), "--latents", &latents]);
        ok(&eval);
        let m: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
        assert_eq!(m["n_samples"], 12);
    }
    assert_eq!(test_ids[0], test_ids[1]);

    let table = env.path("ablation/random.csv");
    ok(&env.run(&["ablation", "--random-init", "--out", &table]));
    let rows = tc::ablation::parse_csv(&std::fs::read_to_string(&table).unwrap(), Path::new(&table)).unwrap();
    assert_eq!(rows.len(), 5 * 10);

    let figures = env.path("figures");
    ok(&tc(&["report", &env.path("."), "--out", &figures]));
    for f in ["boxplot_auc.svg", "sample_efficiency.svg", "summary.csv"] {
        assert!(Path::new(&figures).join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(Path::new(&figures).join("summary.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("maxpool-random")), "{csv}");
}

#[test]
fn duplicated_slide_across_partitions_is_leakage() {
    let env = setup();
    let latents = env.latents();
    let files = files_with_ext(Path::new(&latents), "lwsi");
    // a center-A slide re-labelled as a center-B slide under a new id
    let src = files.iter().map(|p| read_lwsi(p).unwrap()).find(|l| l.meta.center_id == "A").unwrap();
    let mut copy = src.clone();
    copy.meta.slide_id = "B-copy".into();
    copy.meta.center_id = "B".into();
    write_lwsi(&copy, &Path::new(&latents).join("B-copy.lwsi")).unwrap();
    let o = env.run(&["train-mil", "--latents", &latents, "--split", "cross-center"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("leakage"), "{}", stderr(&o));
    assert!(!env.root.join("run").join("reports").exists());
}
