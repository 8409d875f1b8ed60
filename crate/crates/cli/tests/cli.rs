use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spkadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spkadapt")).args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const GEN: &str = r#"{
  "num_seen_speakers": 3, "num_unseen_speakers": 2,
  "train_frames": 40, "valid_frames": 10, "test_frames": 10, "adapt_frames": 20,
  "input_dim": 3, "output_dim": 2, "mode": "affine", "noise_sigma": 0.05, "seed": 1
}"#;

const SPEC: &str = r#"{
  "data": {"path": "data"},
  "network": {"width": 6, "depth": 1},
  "train": {"epochs": 8},
  "adapt": {"train": {"epochs": 6}},
  "strategies": [{"kind": "bias", "q": 2}, {"kind": "affine", "p": 2, "q": 2}],
  "modes": ["nonlinear"],
  "adapt_sizes": [5, 20],
  "code_sizes": [1, 2],
  "seeds": [0]
}"#;

/// A scratch directory with `gen.json`, `spec.json` and a generated `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("gen.json"), GEN).unwrap();
    fs::write(dir.path().join("spec.json"), SPEC).unwrap();
    let out = spkadapt(&["gen-data", "--config", &p(dir.path(), "gen.json"), "--out", &p(dir.path(), "data")]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

#[test]
fn gen_data_lists_counts_and_is_reproducible() {
    let dir = workspace();
    let first = spkadapt(&["gen-data", "--config", &p(dir.path(), "gen.json"), "--out", &p(dir.path(), "again")]);
    assert!(first.status.success());
    let text = stdout(&first);
    assert!(text.contains("spk0 train 40"), "{text}");
    assert!(text.contains("spk3 adapt 20"), "{text}");
    assert!(!text.contains("spk3 train"), "unseen speakers have no training frames: {text}");
    let meta_a = fs::read(dir.path().join("data/frames.csv")).unwrap();
    let meta_b = fs::read(dir.path().join("again/frames.csv")).unwrap();
    assert_eq!(meta_a, meta_b);

    let reseeded = spkadapt(&["gen-data", "--config", &p(dir.path(), "gen.json"), "--out", &p(dir.path(), "other"), "--seed", "2"]);
    assert!(reseeded.status.success());
    assert_ne!(stdout(&reseeded).lines().next(), text.lines().next());
}

#[test]
fn gen_data_rejects_missing_fields_and_overwrites() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), GEN.replace(r#""noise_sigma": 0.05, "#, "")).unwrap();
    let out = spkadapt(&["gen-data", "--config", &p(dir.path(), "bad.json"), "--out", &p(dir.path(), "x")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("noise_sigma"), "{}", stderr(&out));

    let out = spkadapt(&["gen-data", "--config", &p(dir.path(), "gen.json"), "--out", &p(dir.path(), "data")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("overwrite"));
}

#[test]
fn train_eval_adapt_round_trip() {
    let dir = workspace();
    let spec = p(dir.path(), "spec.json");
    let run = p(dir.path(), "run");
    let out = spkadapt(&["train", "--config", &spec, "--out", &run]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(dir.path().join("run/train.1.json").exists());
    assert!(dir.path().join("run/train.1.csv").exists());
    let model = p(dir.path(), "run/checkpoints/affine-p2-q2-nonlinear-seed0.json");
    assert!(Path::new(&model).exists());

    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run/train.1.json")).unwrap()).unwrap();
    let cell = report["cells"].as_array().unwrap().iter().find(|c| c["strategy"]["kind"] == "affine").unwrap();
    let test_rmse = cell["seen"]["test_rmse"].as_f64().unwrap();

    let eval = spkadapt(&["eval", "--config", &spec, "--model", &model]);
    assert!(eval.status.success(), "{}", stderr(&eval));
    let text = stdout(&eval);
    assert_eq!(text.lines().count(), 4, "three seen speakers and the mean: {text}");
    let mean: f64 = text.lines().last().unwrap().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((mean - test_rmse).abs() < 1e-6);
    // Evaluation does not touch the checkpoint.
    assert_eq!(stdout(&spkadapt(&["eval", "--config", &spec, "--model", &model])), text);

    let adapt = spkadapt(&["adapt", "--config", &spec, "--model", &model, "--out", &run]);
    assert!(adapt.status.success(), "{}", stderr(&adapt));
    let adapted = p(dir.path(), "run/checkpoints/affine-p2-q2-nonlinear-seed0-adapt20.json");
    let eval = spkadapt(&["eval", "--config", &spec, "--model", &adapted, "--split", "test"]);
    assert_eq!(stdout(&eval).lines().count(), 6, "{}", stdout(&eval));

    // Training again into the same directory must not replace checkpoints.
    let again = spkadapt(&["train", "--config", &spec, "--out", &run]);
    assert_eq!(again.status.code(), Some(2));
    assert!(dir.path().join("run/train.2.json").exists(), "reports are numbered, not replaced");
}

#[test]
fn compare_and_sweep_write_reports() {
    let dir = workspace();
    let spec = p(dir.path(), "spec.json");
    let out = spkadapt(&["compare", "--config", &spec, "--out", &p(dir.path(), "cmp"), "--seed", "0,1", "--threads", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(dir.path().join("cmp/compare.1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(csv.lines().next().unwrap().contains("adapt20_test_rmse"));

    let out = spkadapt(&["sweep", "--config", &spec]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("p=1\t") && text.contains("p=2\t"), "{text}");
    assert!(text.contains("spearman"));
}

#[test]
fn failed_cells_exit_with_runtime_status() {
    let dir = workspace();
    fs::write(dir.path().join("big.json"), SPEC.replace("[5, 20]", "[50]")).unwrap();
    let out = spkadapt(&["compare", "--config", &p(dir.path(), "big.json")]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stdout(&out).contains("failure"));
}

#[test]
fn gradcheck_passes_and_detects_injected_bug() {
    let out = spkadapt(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let text = stdout(&out);
    for strategy in ["bias", "scale", "affine", "level", "bottle", "lhuc", "full_finetune"] {
        for mode in ["nonlinear", "linear"] {
            let rows = text
                .lines()
                .filter(|l| {
                    let cols: Vec<&str> = l.split_whitespace().collect();
                    cols.first() == Some(&strategy) && cols.get(1) == Some(&mode)
                })
                .count();
            assert_eq!(rows, 1, "{strategy} {mode}");
        }
    }
    let bugged = spkadapt(&["gradcheck", "--inject-bug"]);
    assert_eq!(bugged.status.code(), Some(1));
}

#[test]
fn bench_reports_every_configured_cell() {
    let dir = workspace();
    let out = spkadapt(&["bench", "--config", &p(dir.path(), "spec.json"), "--frames", "200"]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 1 + 2);
}

#[test]
fn validation_errors_exit_one() {
    let dir = workspace();
    fs::write(dir.path().join("typo.json"), r#"{"sedes": [1]}"#).unwrap();
    for args in [
        vec!["train", "--config", "/nonexistent/spec.json", "--out", "/tmp/unused"],
        vec!["frobnicate"],
        vec!["compare", "--config", &p(dir.path(), "typo.json")],
        vec!["eval", "--config", &p(dir.path(), "spec.json"), "--model", "/nonexistent.json"],
        vec!["train", "--config", &p(dir.path(), "spec.json")],
    ] {
        let out = spkadapt(&args);
        assert_eq!(out.status.code(), Some(1), "{args:?}: {}", stderr(&out));
    }
}
