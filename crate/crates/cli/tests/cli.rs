use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seeds = [1]

[data]
source = "synthetic"
seed = 3

[data.generator]
n_categories = 4
n_brands = 4
words_per_category = 10
n_noise_words = 20
n_items = 120
n_queries = 40

[model]
hidden_dim = 16
n_layers = 1
n_heads = 2
ffn_dim = 32
max_len = 24

[pretrain]
epochs = 2
batch_size = 16
checkpoint_every_n_epochs = 1

[finetune]
epochs = 2
batch_size = 8
learning_rate = 1e-3

[eval]
metrics = ["recall@10", "ndcg@10"]
selection_metric = "recall@10"
depth = 20

[[methods]]
name = "ATTEMPT"
mode = "ATTEMPT"

[[methods]]
name = "BIBERT"
mode = "BIBERT"
"#;

fn amr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_amr"))
        .args(args)
        .env_remove("AMR_WORKDIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = amr(args);
    assert!(
        out.status.success(),
        "amr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, body).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files_under(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.to_string_lossy().ends_with(ext) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--seed", "1", "--out", s(&a)]);
    ok(&["synth", "--seed", "1", "--out", s(&b)]);
    for f in ["items.jsonl", "queries.jsonl", "qrels.tsv", "splits.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "synth", "--seed", "1", "--out", s(&b)])).unwrap();
    assert_eq!(summary["items"], 2000);
    assert_eq!(summary["queries"], 600);
}

#[test]
fn eval_reports_graded_ndcg() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run.trec");
    let qrels = tmp.path().join("qrels.tsv");
    fs::write(&run, "q1 Q0 a 1 3.0 t\nq1 Q0 b 2 2.0 t\nq1 Q0 c 3 1.0 t\n").unwrap();
    fs::write(&qrels, "q1\ta\tE\nq1\tb\tI\nq1\tc\tS\n").unwrap();
    let out = amr(&["--json", "eval", "--run", s(&run), "--qrels", s(&qrels), "--k", "3", "--gains", "esci"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config_hash="));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let ndcg = report["ndcg@3"]["mean"].as_f64().unwrap();
    assert!((ndcg - 0.98768).abs() < 1e-4, "{ndcg}");
    assert_eq!(report["recall@3"]["mean"].as_f64().unwrap(), 1.0);

    let text = ok(&["eval", "--run", s(&run), "--qrels", s(&qrels), "--k", "1"]);
    assert!(text.contains("recall@1\t1.000000"), "{text}");
}

#[test]
fn errors_are_one_machine_readable_line() {
    let out = amr(&["eval", "--run", "/nonexistent/run.trec", "--qrels", "/nonexistent/q.tsv"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error kind=invalid message=\""), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    let qrels = tmp.path().join("qrels.tsv");
    fs::write(&qrels, "q1\ta\tX\n").unwrap();
    let run = tmp.path().join("run.trec");
    fs::write(&run, "q1 Q0 a 1 1.0 t\n").unwrap();
    let out = amr(&["eval", "--run", s(&run), "--qrels", s(&qrels)]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("kind=unknown_label"), "{err}");
}

#[test]
fn missing_workdir_is_an_error_before_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = amr(&["experiment", "--config", s(&cfg)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));
}

#[test]
fn experiment_is_deterministic_resumable_and_comparable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let (w1, w2) = (tmp.path().join("w1"), tmp.path().join("w2"));
    let table = ok(&["experiment", "--config", s(&cfg), "--workdir", s(&w1)]);
    assert!(table.contains("ATTEMPT") && table.contains("BIBERT"), "{table}");
    for sub in ["data", "vocab", "pretrain", "finetune", "runs", "reports"] {
        assert!(w1.join(sub).is_dir(), "{sub}");
    }
    assert!(w1.join("reports/comparison.csv").exists());

    // Same config and seed in another directory: byte-identical run files.
    let out = Command::new(env!("CARGO_BIN_EXE_amr"))
        .args(["experiment", "--config", s(&cfg)])
        .env("AMR_WORKDIR", &w2)
        .output()
        .unwrap();
    assert!(out.status.success());
    let runs1 = files_under(&w1.join("runs"), ".trec");
    let runs2 = files_under(&w2.join("runs"), ".trec");
    assert_eq!(runs1.len(), 2);
    for (a, b) in runs1.iter().zip(&runs2) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    // Deleting only the run outputs recomputes them from stored checkpoints.
    let ckpts = files_under(&w1.join("finetune"), "params.bin");
    let before: Vec<_> = ckpts.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    let original = fs::read(&runs1[0]).unwrap();
    fs::remove_dir_all(w1.join("runs")).unwrap();
    ok(&["experiment", "--config", s(&cfg), "--workdir", s(&w1)]);
    assert_eq!(fs::read(&runs1[0]).unwrap(), original);
    let after: Vec<_> = ckpts.iter().map(|p| fs::metadata(p).unwrap().modified().unwrap()).collect();
    assert_eq!(before, after);

    // A different configuration may not resume this directory.
    let changed = write_config(tmp.path(), &TINY.replace("hidden_dim = 16", "hidden_dim = 8"));
    let out = amr(&["experiment", "--config", s(&changed), "--workdir", s(&w1)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("kind=config"));

    // Comparing a run with its identical twin: zero deltas, p = 1.
    let results1 = files_under(&w1.join("runs"), ".result.json");
    let results1: Vec<&PathBuf> = results1
        .iter()
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with("ATTEMPT-"))
        .collect();
    let twin = w2.join("runs").join(results1[0].file_name().unwrap());
    let cmp: serde_json::Value =
        serde_json::from_str(&ok(&["--json", "compare", s(results1[0]), s(&twin)])).unwrap();
    let cells = cmp["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 4);
    for c in cells.iter().filter(|c| !c["test"].is_null()) {
        assert_eq!(c["delta"].as_f64().unwrap(), 0.0);
        assert_eq!(c["test"]["p_two_tailed"].as_f64().unwrap(), 1.0);
    }

    // Whole working directories compare method by method.
    let text = ok(&["compare", s(&w1), s(&w2)]);
    assert_eq!(text.lines().count(), 6, "{text}");
}

#[test]
fn stage_commands_chain_into_encode_search_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let w = tmp.path().join("w");
    let cfg_s = s(&cfg);
    let w_s = s(&w);

    let out = amr(&["finetune", "--config", cfg_s, "--workdir", w_s, "--method", "ATTEMPT"]);
    assert!(!out.status.success(), "fine-tuning without pre-training must fail");
    assert!(String::from_utf8_lossy(&out.stderr).contains("amr pretrain"));

    ok(&["vocab", "--config", cfg_s, "--workdir", w_s]);
    assert!(w.join("vocab/vocab.json").exists());
    ok(&["pretrain", "--config", cfg_s, "--workdir", w_s, "--method", "ATTEMPT", "--seed", "5"]);
    let done: serde_json::Value = serde_json::from_str(&ok(&[
        "--json", "finetune", "--config", cfg_s, "--workdir", w_s, "--method", "ATTEMPT", "--seed", "5",
    ]))
    .unwrap();
    let fdir = PathBuf::from(done[0]["dir"].as_str().unwrap());
    let ckpt = fdir.join("selected");
    assert!(ckpt.join("manifest.json").exists());

    let vocab = w.join("vocab/vocab.json");
    let (qe, ie, run) = (tmp.path().join("q.jsonl"), tmp.path().join("i.jsonl"), tmp.path().join("run.trec"));
    let queries = w.join("data/queries.jsonl");
    let items = w.join("data/items.jsonl");
    let aspects = "category,brand";
    ok(&["encode", "--checkpoint", s(&ckpt), "--vocab", s(&vocab), "--records", s(&queries), "--aspects", aspects, "--side", "query", "--out", s(&qe)]);
    ok(&["encode", "--checkpoint", s(&ckpt), "--vocab", s(&vocab), "--records", s(&items), "--aspects", aspects, "--side", "item", "--out", s(&ie)]);
    ok(&["search", "--queries", s(&qe), "--items", s(&ie), "--k", "10", "--out", s(&run)]);
    let report: serde_json::Value = serde_json::from_str(&ok(&[
        "--json", "eval", "--run", s(&run), "--qrels", s(&w.join("data/qrels.tsv")), "--k", "10",
    ]))
    .unwrap();
    let r = report["recall@10"]["mean"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&r));
}
