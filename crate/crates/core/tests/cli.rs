use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "model": {"layers": 1, "heads": 2, "dim": 16, "ffn_dim": 32, "max_len": 48},
  "train": {"epoch_steps": 4, "batch_sentences": 8, "max_epochs_pretrain": 1,
            "max_epochs_finetune": 1, "max_epochs_iterative": 1, "eval_sentences": 10},
  "embeddings": {"skipgram": {"dim": 16, "epochs": 1}},
  "toy": {"mono_sentences": 300, "test_pairs": 12, "valid_pairs": 12},
  "bpe_merges": 150
}"#;

fn unmt(run: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unmt"))
        .arg("--run-dir")
        .arg(run)
        .arg("--config")
        .arg(run.join("tiny.json"))
        .args(args)
        .env("UNMT_LOG", "warn")
        .output()
        .expect("spawn unmt")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

#[test]
fn evaluate_identical_files_scores_100() {
    let dir = setup();
    let p = dir.path().join("h.txt");
    std::fs::write(&p, "the cat sat on the mat\na b c d e\n").unwrap();
    let p = p.to_str().unwrap();
    let out = ok(unmt(dir.path(), &["evaluate", "--candidates", p, "--references", p]));
    assert_eq!(out.trim(), "BLEU 100.0");
}

#[test]
fn missing_stage_is_named() {
    let dir = setup();
    let out = unmt(dir.path(), &["train-embeddings"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    assert!(line.starts_with("error kind=missing_stage code=13 "), "{line}");
    assert!(line.contains("preprocess"), "{line}");
}

#[test]
fn bad_config_key_is_rejected() {
    let dir = setup();
    std::fs::write(dir.path().join("tiny.json"), r#"{"train": {"learning_rate": 1}}"#).unwrap();
    let out = unmt(dir.path(), &["gen-toy"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.learning_rate"));
}

#[test]
fn staged_pipeline_runs_end_to_end() {
    let dir = setup();
    let run = dir.path();
    let toy = run.join("toy");
    ok(unmt(run, &["gen-toy", "--out", toy.to_str().unwrap()]));
    for f in ["mono.src", "mono.tgt", "test.src", "test.tgt", "dict.gold.tsv"] {
        assert!(toy.join(f).exists(), "{f}");
    }
    ok(unmt(run, &["preprocess", "--toy", toy.to_str().unwrap()]));

    // An untrained model can translate once the vocabulary exists.
    let hyp = run.join("hyp.txt");
    ok(unmt(
        run,
        &["translate", "--input", toy.join("test.src").to_str().unwrap(), "--output", hyp.to_str().unwrap()],
    ));
    let n_in = std::fs::read_to_string(toy.join("test.src")).unwrap().lines().count();
    assert_eq!(std::fs::read_to_string(&hyp).unwrap().lines().count(), n_in);

    ok(unmt(run, &["train-embeddings"]));
    ok(unmt(run, &["align"]));
    let table = ok(unmt(run, &["eval-dictionary"]));
    assert!(table.contains("CSLS"), "{table}");
    ok(unmt(run, &["pretrain", "--objective", "dae", "--mode", "static"]));
    let ft = ok(unmt(run, &["finetune"]));
    assert!(ft.contains("test BLEU"), "{ft}");
    let ev = ok(unmt(run, &["evaluate"]));
    assert!(ev.contains("BLEU src-tgt") && ev.contains("BLEU tgt-src"), "{ev}");
    for f in ["finetune/metrics.csv", "finetune/checkpoints/best.ckpt", "evaluation.json", "manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let metrics = std::fs::read_to_string(run.join("finetune/metrics.csv")).unwrap();
    assert!(metrics.starts_with("epoch,regime,metric,value"));
    assert!(metrics.contains("BT_finetune,valid_bleu"));
}

#[test]
fn experiment_writes_table_and_skips_completed_runs() {
    let dir = setup();
    let run = dir.path();
    let args = ["run-experiment", "--regimes", "dae_pretrain-static,dae_iterative-static", "--seeds", "1,2"];
    let table = ok(unmt(run, &args));
    let rows: Vec<&str> = table.lines().filter(|l| l.starts_with("| DAE")).collect();
    assert_eq!(rows.len(), 2, "{table}");
    assert!(table.lines().next().unwrap().contains("src-tgt"));
    for l in &rows {
        assert!(l.trim_end().ends_with("| 2 |"), "{l}");
    }
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("results.json")).unwrap()).unwrap();
    assert_eq!(results.as_array().unwrap().len(), 4);
    assert!(run.join("runs/dae_pretrain-static-s2/summary.json").exists());

    let ckpt = run.join("runs/dae_pretrain-static-s1/checkpoints/best.ckpt");
    let before = std::fs::metadata(&ckpt).unwrap().modified().unwrap();
    let again = ok(unmt(run, &args));
    assert_eq!(again, table);
    assert_eq!(std::fs::metadata(&ckpt).unwrap().modified().unwrap(), before);
}
