use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stepreward")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["frobnicate"], dir.path())), 2);
    assert_eq!(code(&run(&["train-rm", "--kind", "nope"], dir.path())), 2);
    assert_eq!(code(&run(&["--help"], dir.path())), 0);
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["--out", "x", "build-dataset", "--corpus", "no_such_corpus"], dir.path());
    assert_eq!(code(&o), 1, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(dir.path().join("bad.toml"), "[rl]\nstepz = 3\n").unwrap();
    let o = run(&["--config", "bad.toml", "--out", "x", "report", "."], dir.path());
    assert_eq!(code(&o), 1);
}

#[test]
fn build_dataset_is_deterministic_and_feeds_training_and_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    for out in ["a", "b"] {
        let o = run(&["--seed", "3", "--out", out, "build-dataset", "--corpus", "toy"], d);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["train.jsonl", "validation.jsonl", "test.jsonl", "stats.json", "manifest.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f} differs");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(d.join("a/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "build-dataset");
    assert!(manifest["outputs"]["train.jsonl"].as_str().is_some_and(|h| h.len() == 64));

    let o = run(&["--out", "rm", "train-rm", "--kind", "prm", "--dataset", "a"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("rm/model.json").is_file());

    fs::write(d.join("eval.toml"), "[eval]\nrejection_trials = 13\n").unwrap();
    let o = run(
        &["--config", "eval.toml", "--out", "ev", "evaluate", "--rm", "rm/model.json", "--n", "4", "--k", "1,2", "--dataset", "a"],
        d,
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["eval.jsonl", "eval_table.txt", "rejection.json", "errors.json", "manifest.json"] {
        assert!(d.join("ev").join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("pass@1") && stdout.contains("pass@2"), "{stdout}");

    let o = run(&["--out", "rep", "report", "a", "rm", "ev"], d);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).contains("best-of-4"));
}

#[test]
fn ingest_assigns_splits() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let rec = |id: u32| {
        serde_json::json!({
            "task_id": id,
            "text": "Add one.",
            "code": "def f(x):\n\treturn x + 1",
            "test_list": ["assert f(1) == 2"],
        })
        .to_string()
    };
    fs::write(d.join("in.jsonl"), [rec(5), rec(550), rec(700)].join("\n") + "\n").unwrap();
    let o = run(&["--out", "c", "ingest", "--input", "in.jsonl"], d);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(d.join("c/corpus.jsonl")).unwrap();
    let splits: Vec<String> = text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["split"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(splits, ["test", "validation", "sft_seed"]);
    assert!(text.contains("    return x + 1"));
}
