//! End-to-end runs of the `sparselab` binary on tiny configurations.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sparselab::sparsity::{validate_mask, NMConfig};
use sparselab::trainer::{Checkpoint, RunMetrics};

const TINY: &str = "\
width = 16
heads = 2
layers = 1
context = 8
batch = 2
warmup = 2
eval_every = 3
refresh_every = 2
corpus_bytes = 6000
val_sequences = 2
calibration_batches = 2
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparselab"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn data(name: &str) -> String {
    format!("{}/data/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn field(report: &str, key: &str) -> f64 {
    report
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key}\t")))
        .unwrap_or_else(|| panic!("{key} missing from {report}"))
        .trim()
        .parse()
        .unwrap()
}

/// Writes the tiny config and pretrains a dense checkpoint into `dir/dense`.
fn pretrained(dir: &Path) -> PathBuf {
    std::fs::write(dir.join("tiny.cfg"), TINY).unwrap();
    let o = run(dir, &["pretrain", "--config", "tiny.cfg", "--seed", "1", "--steps", "12", "--out", "dense"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    dir.join("dense/checkpoints/final.ckpt")
}

#[test]
fn fit_law_reproduces_published_coefficients() {
    let o = bin().args(["fit-law", &data("retrain_2-7b.csv"), "--loo", "--target-ppl", "5.12"]).output().unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!((field(&out, "A") - 1.561).abs() <= 0.01);
    assert!((field(&out, "B") - 0.258).abs() <= 0.01);
    assert!(field(&out, "R2") >= 0.98);
    assert!((field(&out, "holdout_predicted_ppl") - 5.23).abs() <= 0.02);
    assert!(out.contains("tokens_to_match_billions") && out.contains("25%"));
}

#[test]
fn fit_law_input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "tokens_billions,perplexity\n1.5,abc\n").unwrap();
    let few = dir.path().join("few.csv");
    std::fs::write(&few, "tokens_billions,perplexity\n1.5,6.0\n").unwrap();
    for path in [bad, few, dir.path().join("missing.csv")] {
        let o = bin().args(["fit-law"]).arg(&path).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{}", path.display());
    }
}

#[test]
fn zero_steps_leave_no_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain", "--steps", "0", "--out", "never"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("never").exists());
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn missing_corpus_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain", "--steps", "2", "--corpus", "nope.txt", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("corpus"));
}

#[test]
fn unknown_config_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["pretrain", "--steps", "2", "--set", "stepz=3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_probe_type_lists_valid_ones() {
    let o = bin().args(["probe", "--type", "bogus", "--out", "x"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("ste-error") && err.contains("dense-forward"), "{err}");
}

#[test]
fn gen_corpus_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = run(dir.path(), &["gen-corpus", "--seed", "0", "--bytes", "5000", "a.txt"]);
    let b = run(dir.path(), &["gen-corpus", "--seed", "0", "--bytes", "5000", "b.txt"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    let (x, y) = (
        std::fs::read(dir.path().join("a.txt")).unwrap(),
        std::fs::read(dir.path().join("b.txt")).unwrap(),
    );
    assert_eq!(x, y);
    assert_eq!(x.len(), 5000);
    let vocab = std::fs::read_to_string(dir.path().join("a.txt.vocab.tsv")).unwrap();
    assert_eq!(vocab.lines().skip(1).filter(|l| !l.starts_with('#')).count(), 64);
    let rate = field(&stdout(&a), "entropy_rate_nats");
    assert!(rate < 64f64.ln(), "{rate}");
    let tiny = run(dir.path(), &["gen-corpus", "--bytes", "10", "c.txt"]);
    assert_eq!(tiny.status.code(), Some(2));
}

#[test]
fn pretrain_is_reproducible_and_evaluable() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let again = run(dir.path(), &["pretrain", "--config", "tiny.cfg", "--seed", "1", "--steps", "12", "--out", "dense2"]);
    assert_eq!(again.status.code(), Some(0));
    for f in ["checkpoints/final.ckpt", "metrics.csv", "config.cfg", "report.txt"] {
        assert_eq!(
            std::fs::read(dir.path().join("dense").join(f)).unwrap(),
            std::fs::read(dir.path().join("dense2").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(dir.path().join("dense/vocab.tsv").exists());

    let e1 = run(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--config", "tiny.cfg", "--csv", "ev.csv"]);
    let e2 = run(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--config", "tiny.cfg"]);
    assert_eq!(e1.status.code(), Some(0), "{}", stderr(&e1));
    assert_eq!(stdout(&e1), stdout(&e2));
    let printed = stdout(&e1);
    assert_eq!(printed.trim().split('.').nth(1).unwrap().len(), 4);
    let csv = std::fs::read_to_string(dir.path().join("ev.csv")).unwrap();
    assert!(csv.starts_with("checkpoint,forward,val_ce,val_ppl\n"));

    let sparse = run(dir.path(), &["eval", "--checkpoint", ck.to_str().unwrap(), "--config", "tiny.cfg", "--forward", "sparse"]);
    assert_eq!(sparse.status.code(), Some(2));
}

#[test]
fn tampered_checkpoint_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[0] ^= 0xff;
    std::fs::write(dir.path().join("bad.ckpt"), &bytes).unwrap();
    let o = run(dir.path(), &["eval", "--checkpoint", "bad.ckpt", "--config", "tiny.cfg"]);
    assert_eq!(o.status.code(), Some(4));
    let truncated = &std::fs::read(&ck).unwrap()[..100];
    std::fs::write(dir.path().join("short.ckpt"), truncated).unwrap();
    let o = run(dir.path(), &["eval", "--checkpoint", "short.ckpt", "--config", "tiny.cfg"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn sparsify_requires_a_dense_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["sparsify", "--method", "naive", "--steps", "2"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["sparsify", "--method", "naive", "--steps", "2", "--dense-checkpoint", "none.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sparsify_methods_write_valid_exports() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let ck = ck.to_str().unwrap();
    for method in ["naive", "srste"] {
        let o = run(
            dir.path(),
            &["sparsify", "--config", "tiny.cfg", "--method", method, "--steps", "8", "--dense-checkpoint", ck, "--out", method],
        );
        assert_eq!(o.status.code(), Some(0), "{method}: {}", stderr(&o));
        let run_dir = dir.path().join(method);
        let exported = Checkpoint::load(&run_dir.join("checkpoints/exported.ckpt")).unwrap();
        for mask in exported.model.masks().unwrap() {
            assert!(validate_mask(&mask, &NMConfig::default()).is_ok());
        }
        assert!(run_dir.join("checkpoints/trained.ckpt").exists());
        assert!(run_dir.join("mask_stats.csv").exists());
        let metrics = RunMetrics::from_csv(&std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap()).unwrap();
        if method == "naive" {
            assert!(metrics.column("r_t").unwrap().iter().all(|&r| r == 0.0));
        }
        let out = dir.path().join(format!("{method}-probe"));
        let p = run(dir.path(), &["probe", "--type", "dense-forward", "--run", method, "--out", out.to_str().unwrap()]);
        assert_eq!(p.status.code(), Some(0), "{}", stderr(&p));
        let series = std::fs::read_to_string(out.join("dense_forward.csv")).unwrap();
        let dense_ppl = metrics.column("dense_ppl").unwrap();
        let got: Vec<f64> = series.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
        assert_eq!(got, dense_ppl);
        assert!(out.join("dense_forward.svg").exists());
    }
    let o = run(dir.path(), &["eval", "--checkpoint", "naive/checkpoints/exported.ckpt", "--config", "tiny.cfg", "--forward", "sparse"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn cast_without_decay_is_refused_with_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let o = run(
        dir.path(),
        &["sparsify", "--config", "tiny.cfg", "--method", "cast", "--lambda", "0", "--steps", "6", "--dense-checkpoint", ck.to_str().unwrap(), "--out", "cast"],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("cast/report.txt")).unwrap();
    assert!(report.contains("refused"));
    assert!(field(&report, "sparse_weight_ratio") < 0.999);
    assert!(!dir.path().join("cast/checkpoints/exported.ckpt").exists());
}

#[test]
fn ste_error_probe_writes_pairs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = pretrained(dir.path());
    let o = run(
        dir.path(),
        &["probe", "--type", "ste-error", "--checkpoint", ck.to_str().unwrap(), "--config", "tiny.cfg", "--lambda", "0.001", "--out", "probe"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("probe/ste_error.csv")).unwrap();
    assert!(csv.lines().count() > 10);
    assert!(stdout(&o).contains("slope"));
    assert!(dir.path().join("probe/ste_error.svg").exists());
    let missing = run(dir.path(), &["probe", "--type", "ste-error", "--out", "p2"]);
    assert_eq!(missing.status.code(), Some(2));
}
