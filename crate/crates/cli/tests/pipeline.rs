//! End-to-end tests of the `minimt` binary: the full pipeline on a tiny
//! configuration, prerequisite diagnostics, exit codes, and run-to-run
//! determinism.

use std::path::Path;
use std::process::{Command, Output};

/// Settings small enough for the whole pipeline to run in seconds.
const TINY: &[&str] = &[
    "--set",
    "vocab_size=24",
    "--set",
    "d_model=16",
    "--set",
    "n_heads=2",
    "--set",
    "n_enc_layers=1",
    "--set",
    "n_dec_layers=1",
    "--set",
    "d_ff=32",
    "--set",
    "max_seq_len=24",
    "--set",
    "n_train=40",
    "--set",
    "n_valid=8",
    "--set",
    "n_test=8",
    "--set",
    "len_min=3",
    "--set",
    "len_max=6",
    "--set",
    "mlm.max_updates=4",
    "--set",
    "base.max_updates=8",
    "--set",
    "ckd.max_updates=4",
    "--set",
    "mlm.checkpoint_every=4",
    "--set",
    "base.checkpoint_every=4",
    "--set",
    "ckd.checkpoint_every=4",
    "--set",
    "mlm.batch_tokens=256",
    "--set",
    "base.batch_tokens=256",
    "--set",
    "ckd.batch_tokens=256",
];

fn minimt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_minimt"))
        .current_dir(dir)
        .args(args)
        .args(TINY)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&minimt(dir, &["gen-data"]), "gen-data");
    for f in ["train.src", "train.tgt", "valid.src", "valid.tgt", "test.src", "test.tgt", "vocab.tsv"]
    {
        assert!(dir.join("data").join(f).exists(), "missing data/{f}");
    }
    let n_train = std::fs::read_to_string(dir.join("data/train.src")).unwrap().lines().count();
    assert_eq!(n_train, 40);

    assert_ok(&minimt(dir, &["pretrain"]), "pretrain");
    assert!(dir.join("runs/mlm/final.ckpt").exists());
    assert!(dir.join("runs/mlm/metrics.tsv").exists());

    assert_ok(&minimt(dir, &["train-base"]), "train-base");
    assert!(dir.join("runs/base/final.ckpt").exists());
    let metrics = std::fs::read_to_string(dir.join("runs/base/metrics.tsv")).unwrap();
    assert!(metrics.starts_with("update\tsplit\tnll\tbleu"));
    assert!(metrics.lines().any(|l| l.contains("\tvalid\t")), "no valid rows:\n{metrics}");

    assert_ok(&minimt(dir, &["train-ckd"]), "train-ckd");
    assert!(dir.join("runs/ckd/final.ckpt").exists());
    assert!(dir.join("runs/ckd/schedule.tsv").exists());

    // Every run dir records the resolved config with a version stamp.
    for d in ["data", "runs/mlm", "runs/base", "runs/ckd"] {
        let resolved = std::fs::read_to_string(dir.join(d).join("config.resolved"))
            .unwrap_or_else(|_| panic!("missing {d}/config.resolved"));
        assert!(resolved.starts_with("# minimt "), "{d} lacks the version stamp");
        assert!(resolved.contains("seed = 17"));
    }

    let eval = minimt(dir, &["evaluate"]);
    assert_ok(&eval, "evaluate");
    let report = std::fs::read_to_string(dir.join("runs/eval/report_test.tsv")).unwrap();
    assert!(report.lines().count() >= 3, "report too short:\n{report}");
    assert!(report.contains("bleu4"));
    assert!(String::from_utf8_lossy(&eval.stdout).contains("BLEU-4"));

    // Translations align line for line with the input.
    std::fs::write(dir.join("input.txt"), "w1 w2 w3\nw4 w5\nw0 w0 w1\n").unwrap();
    let out = minimt(dir, &["translate", "--input", "input.txt", "--beam", "2"]);
    assert_ok(&out, "translate");
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 3);
    let to_file = minimt(
        dir,
        &["translate", "--input", "input.txt", "--output", "out.txt", "--beam", "1"],
    );
    assert_ok(&to_file, "translate --output");
    assert_eq!(std::fs::read_to_string(dir.join("out.txt")).unwrap().lines().count(), 3);

    // The distillation weight is flag-adjustable down to plain NLL.
    let alpha0 = minimt(dir, &["train-ckd", "--alpha", "0"]);
    assert_ok(&alpha0, "train-ckd --alpha 0");
}

#[test]
fn gen_data_refuses_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&minimt(dir, &["gen-data"]), "first gen-data");
    let again = minimt(dir, &["gen-data"]);
    assert_eq!(again.status.code(), Some(2), "overwrite must be a config error");
    assert!(stderr(&again).contains("--force"), "stderr: {}", stderr(&again));
    assert_ok(&minimt(dir, &["gen-data", "--force"]), "gen-data --force");
}

#[test]
fn missing_prerequisites_name_the_stage_to_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let pre = minimt(dir, &["pretrain"]);
    assert_eq!(pre.status.code(), Some(3));
    assert!(stderr(&pre).contains("run gen-data first"), "stderr: {}", stderr(&pre));

    assert_ok(&minimt(dir, &["gen-data"]), "gen-data");
    let base = minimt(dir, &["train-base"]);
    assert_eq!(base.status.code(), Some(3));
    assert!(stderr(&base).contains("run pretrain first"), "stderr: {}", stderr(&base));

    let ckd = minimt(dir, &["train-ckd"]);
    assert_eq!(ckd.status.code(), Some(3));
    assert!(stderr(&ckd).contains("run train-base first"), "stderr: {}", stderr(&ckd));

    let eval = minimt(dir, &["evaluate"]);
    assert_eq!(eval.status.code(), Some(3));
    assert!(stderr(&eval).contains("run train-ckd first"), "stderr: {}", stderr(&eval));
}

#[test]
fn config_mistakes_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let unknown = minimt(dir, &["gen-data", "--set", "nonsense=1"]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(stderr(&unknown).contains("unknown config key"), "stderr: {}", stderr(&unknown));

    let malformed = minimt(dir, &["gen-data", "--set", "no-equals-sign"]);
    assert_eq!(malformed.status.code(), Some(2));

    std::fs::write(dir.join("exp.cfg"), "seed = 23\nn_train = oops\n").unwrap();
    let badfile = minimt(dir, &["gen-data", "-c", "exp.cfg"]);
    assert_eq!(badfile.status.code(), Some(2));
    assert!(stderr(&badfile).contains("line 2"), "stderr: {}", stderr(&badfile));
}

#[test]
fn identical_seeds_reproduce_artifacts_bit_for_bit() {
    let tmp_a = tempfile::tempdir().unwrap();
    let tmp_b = tempfile::tempdir().unwrap();
    for dir in [tmp_a.path(), tmp_b.path()] {
        assert_ok(&minimt(dir, &["gen-data", "--seed", "23"]), "gen-data");
        assert_ok(&minimt(dir, &["pretrain", "--seed", "23"]), "pretrain");
        assert_ok(&minimt(dir, &["train-base", "--seed", "23"]), "train-base");
        assert_ok(&minimt(dir, &["evaluate", "--checkpoint", "runs/base/final.ckpt", "--seed", "23"]), "evaluate");
    }
    let read = |dir: &Path, p: &str| std::fs::read(dir.join(p)).unwrap();
    for artifact in ["data/train.src", "runs/mlm/final.ckpt", "runs/base/final.ckpt", "runs/base/metrics.tsv", "runs/eval/report_test.tsv"]
    {
        assert_eq!(
            read(tmp_a.path(), artifact),
            read(tmp_b.path(), artifact),
            "{artifact} differs between identically seeded runs"
        );
    }

    // A different seed must actually change the trained parameters.
    let tmp_c = tempfile::tempdir().unwrap();
    assert_ok(&minimt(tmp_c.path(), &["gen-data", "--seed", "24"]), "gen-data");
    assert_ok(&minimt(tmp_c.path(), &["pretrain", "--seed", "24"]), "pretrain");
    assert_ne!(
        read(tmp_a.path(), "runs/mlm/final.ckpt"),
        read(tmp_c.path(), "runs/mlm/final.ckpt"),
        "different seeds produced identical checkpoints"
    );
}

#[test]
fn ablate_reports_all_four_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_ok(&minimt(dir, &["gen-data"]), "gen-data");
    assert_ok(&minimt(dir, &["pretrain"]), "pretrain");
    let out = minimt(dir, &["ablate"]);
    assert_ok(&out, "ablate");
    let report = std::fs::read_to_string(dir.join("runs/ablate/report.tsv")).unwrap();
    assert!(report.contains("seed = 17"));
    let rows: Vec<&str> = report.lines().skip(2).collect();
    assert_eq!(rows.len(), 4, "expected 4 variant rows:\n{report}");
    for name in ["from_scratch", "joint", "decoder_only", "decoder_only+ckd"] {
        assert!(
            rows.iter().any(|r| r.starts_with(&format!("{name}\t"))),
            "missing variant {name}:\n{report}"
        );
    }
}
