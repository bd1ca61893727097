use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn recbench(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_recbench")).args(args).current_dir(cwd).env_remove("RECBENCH_OUT").output().unwrap()
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "exit {:?}\nstderr:\n{}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_lines(out: &Output) -> Vec<Value> {
    String::from_utf8_lossy(&out.stderr).lines().map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not json ({e}): {l}"))).collect()
}

/// Writes a small synthetic dataset under `cwd/data`; returns the config path.
fn small_dataset(cwd: &Path) -> PathBuf {
    ok(recbench(cwd, &["synth", "--items", "40", "--sessions", "300", "--blocks", "2", "--seed", "5", "--out", "data"]));
    cwd.join("data/config.json")
}

fn files_under(dir: &Path) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out
}

#[test]
fn help_lists_flags_and_model_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let top = ok(recbench(tmp.path(), &["--help"]));
    let text = stdout(&top);
    for kind in ["cnn", "rnn", "gnn", "autoencoder", "transformer", "ncf", "siamese"] {
        assert!(text.contains(kind), "{kind} missing from help");
    }
    assert!(text.contains("0.0001") && text.contains("dropout"));

    let sweep = stdout(&ok(recbench(tmp.path(), &["sweep", "--help"])));
    for flag in ["--config", "--seed", "--out", "--jobs", "--format", "--epochs", "--lr", "--batch", "RECBENCH_OUT", "[default: csv]"] {
        assert!(sweep.contains(flag), "{flag} missing from sweep help");
    }
    assert!(sweep.contains("0.0005"));
    let synth = stdout(&ok(recbench(tmp.path(), &["synth", "--help"])));
    assert!(synth.contains("[default: 2000]") && synth.contains("[default: 0.2]"));
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = recbench(tmp.path(), &["sweep"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("Usage"));

    let unknown = recbench(tmp.path(), &["sweep", "--config", "c.json", "--frobnicate"]);
    assert_eq!(unknown.status.code(), Some(2));
    let bad_format = recbench(tmp.path(), &["sweep", "--config", "c.json", "--format", "xml"]);
    assert_eq!(bad_format.status.code(), Some(2));
    assert_eq!(recbench(tmp.path(), &[]).status.code(), Some(2));
    assert!(files_under(tmp.path()).is_empty());
}

#[test]
fn runtime_errors_exit_one_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = recbench(tmp.path(), &["prepare", "--config", "nope.json"]);
    assert_eq!(missing.status.code(), Some(1));
    let last = stderr_lines(&missing).pop().unwrap();
    assert_eq!(last["level"], "error");
    assert_eq!(last["stage"], "config");

    std::fs::write(tmp.path().join("c.json"), r#"{"dataset": {"source": "synthetic_dir", "path": "absent"}, "models": {"gnn": {}}}"#).unwrap();
    let absent = recbench(tmp.path(), &["sweep", "--config", "c.json", "--out", "o"]);
    assert_eq!(absent.status.code(), Some(1));
    assert_eq!(stderr_lines(&absent).pop().unwrap()["stage"], "ingest");

    let stale = recbench(tmp.path(), &["report", "--input", "missing.json"]);
    assert_eq!(stale.status.code(), Some(1));
    assert_eq!(stderr_lines(&stale).pop().unwrap()["stage"], "report");
}

#[test]
fn synth_then_sweep_reports_seven_models_and_baselines() {
    let tmp = tempfile::tempdir().unwrap();
    ok(recbench(tmp.path(), &["synth", "--items", "200", "--sessions", "2000", "--blocks", "4", "--seed", "1", "--out", "data"]));
    let run = ok(recbench(tmp.path(), &["sweep", "--config", "data/config.json", "--epochs", "1", "--out", "run"]));

    let rows = recbench::bench::parse_csv(&stdout(&run)).unwrap();
    let mut per_model = std::collections::BTreeMap::<String, Vec<usize>>::new();
    for r in &rows {
        per_model.entry(r.model.clone()).or_default().push(r.k);
        assert!((0.0..=100.0).contains(&r.accuracy_pct) && (0.0..=100.0).contains(&r.ild_pct));
    }
    let names: BTreeSet<&str> = per_model.keys().map(String::as_str).collect();
    let want: BTreeSet<&str> = ["cnn", "rnn", "gnn", "autoencoder", "transformer", "ncf", "siamese", "popularity", "random"].into();
    assert_eq!(names, want);
    for ks in per_model.values() {
        assert_eq!(ks, &(1..=10).collect::<Vec<_>>());
    }
    assert_eq!(std::fs::read_to_string(tmp.path().join("run/report.csv")).unwrap(), stdout(&run));

    let logs = stderr_lines(&run);
    let resolved = logs.iter().find(|l| l["msg"] == "resolved config").expect("resolved config logged");
    assert_eq!(resolved["models"]["transformer"]["lr"], 0.0001);
    assert_eq!(resolved["models"]["rnn"]["epochs"], 1);

    let top: BTreeSet<String> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(top, ["data".to_string(), "run".to_string()].into());
    let written = files_under(&tmp.path().join("run"));
    for f in ["report.csv", "report.json", "pipeline_report.json", "timings.json", "checkpoints/siamese.ckpt", "checkpoints/siamese.json"] {
        assert!(written.contains(f), "{f} not written");
    }
}

#[test]
fn sweep_is_deterministic_and_report_regenerates() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dataset(tmp.path());
    let config = config.to_str().unwrap();
    ok(recbench(tmp.path(), &["sweep", "--config", config, "--seed", "7", "--epochs", "1", "--out", "a"]));
    ok(recbench(tmp.path(), &["sweep", "--config", config, "--seed", "7", "--epochs", "1", "--out", "b", "--jobs", "2"]));
    let read = |p: &str| std::fs::read(tmp.path().join(p)).unwrap();
    assert_eq!(read("a/report.csv"), read("b/report.csv"));
    assert_eq!(read("a/report.json"), read("b/report.json"));

    let csv = ok(recbench(tmp.path(), &["report", "--input", "a/report.json"]));
    assert_eq!(csv.stdout, read("a/report.csv"));
    ok(recbench(tmp.path(), &["report", "--input", "a/report.json", "--format", "json", "--out", "regen"]));
    assert_eq!(read("regen/report.json"), read("a/report.json"));
    assert_eq!(files_under(&tmp.path().join("regen")), ["report.json".to_string()].into());

    let other = ok(recbench(tmp.path(), &["sweep", "--config", config, "--seed", "8", "--epochs", "1", "--out", "c"]));
    assert_ne!(other.stdout, read("a/report.csv"));
}

#[test]
fn train_then_evaluate_matches_sweep_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dataset(tmp.path());
    let config = config.to_str().unwrap();
    let trained = ok(recbench(tmp.path(), &["train", "--config", config, "--model", "gnn,siamese", "--epochs", "2", "--out", "t"]));
    assert!(stdout(&trained).starts_with("model,epochs,final_loss\ngnn,2,"));
    assert_eq!(files_under(&tmp.path().join("t")), ["checkpoints/gnn.ckpt", "checkpoints/gnn.json", "checkpoints/siamese.ckpt", "checkpoints/siamese.json"].map(String::from).into());

    let evaluated = ok(recbench(tmp.path(), &["evaluate", "--config", config, "--model", "gnn,siamese", "--epochs", "2", "--out", "t"]));
    let swept = ok(recbench(tmp.path(), &["sweep", "--config", config, "--epochs", "2", "--out", "s"]));
    let keep = |text: String| -> Vec<String> { text.lines().filter(|l| l.starts_with("gnn,") || l.starts_with("siamese,") || l.starts_with("popularity,")).map(String::from).collect() };
    let e = keep(stdout(&evaluated));
    assert_eq!(e.len(), 30);
    assert_eq!(e, keep(stdout(&swept)));

    let mismatch = recbench(tmp.path(), &["evaluate", "--config", config, "--model", "gnn", "--epochs", "3", "--out", "t"]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert_eq!(stderr_lines(&mismatch).pop().unwrap()["stage"], "checkpoint");
}

#[test]
fn prepare_and_graph_write_inside_out() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dataset(tmp.path());
    let config = config.to_str().unwrap();
    let prep = ok(recbench(tmp.path(), &["prepare", "--config", config, "--out", "p"]));
    let report: Value = serde_json::from_str(&stdout(&prep)).unwrap();
    assert_eq!(report["n_items"], 40);
    assert_eq!(report["n_sessions"].as_u64().unwrap(), report["n_train_sessions"].as_u64().unwrap() + report["n_test_sessions"].as_u64().unwrap());

    let graph = ok(recbench(tmp.path(), &["graph", "--config", config, "--out", "p"]));
    let summary: Value = serde_json::from_str(&stdout(&graph)).unwrap();
    assert!(summary["train"]["edges"].as_u64().unwrap() > 0);
    let g = recbench::graph::ItemGraph::load(&tmp.path().join("p/graph_train.ndjson")).unwrap();
    assert_eq!(g.n_edges() as u64, summary["train"]["edges"].as_u64().unwrap());

    assert_eq!(files_under(&tmp.path().join("p")), ["graph_test.ndjson", "graph_train.ndjson", "pipeline_report.json", "preprocessed.json"].map(String::from).into());
    let top: BTreeSet<String> = std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    assert_eq!(top, ["data".to_string(), "p".to_string()].into());
}

#[test]
fn out_defaults_to_environment_variable() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_dataset(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_recbench"))
        .args(["prepare", "--config", config.to_str().unwrap()])
        .current_dir(tmp.path())
        .env("RECBENCH_OUT", "from_env")
        .output()
        .unwrap();
    ok(out);
    assert!(tmp.path().join("from_env/pipeline_report.json").exists());
}
