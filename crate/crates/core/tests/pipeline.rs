//! Cross-module pipeline integration: CLI contracts, artifact layout and
//! determinism of the command-line surface.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_stainlab"))
}

const TINY_CFG: &str = "\
corpus.classes = 2
corpus.slides_per_class = 3
corpus.slide_size = 448
corpus.cap = 4
dino.epochs = 2
dino.batch = 16
dino.checkpoint_every = 1
probe.epochs = 3
probe.lr = 0.01
harness.folds = 2
";

fn write_cfg(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, TINY_CFG).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stderr);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn print_config_round_trips_through_the_parser() {
    let out = bin().arg("--print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("dino.teacher_temp = 0.04"));
    assert!(text.contains("[paper]"));
    assert!(text.contains("[desk]"));
    // feeding the print output back as a config parses and prints the same
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("echo.cfg");
    std::fs::write(&cfg, &text).unwrap();
    let out2 = bin().arg("--config").arg(&cfg).arg("--print-config").output().unwrap();
    assert!(out2.status.success(), "{}", String::from_utf8_lossy(&out2.stderr));
    assert_eq!(text, String::from_utf8(out2.stdout).unwrap());
}

#[test]
fn config_errors_exit_one_runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "vit.embed_dim = 65\nvit.heads = 4\n").unwrap();
    let out = bin()
        .arg("--config")
        .arg(&bad)
        .args(["gen-corpus", "--out"])
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));

    // missing corpus manifest is a runtime failure
    let out = bin()
        .args(["pretrain", "--corpus"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn full_cli_pipeline_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let corpus = dir.path().join("corpus");
    let run_dir = dir.path().join("run");
    let feats = dir.path().join("features.stnf");
    let bags = dir.path().join("bags");
    let report = dir.path().join("report.jsonl");

    let ok = |out: std::process::Output, what: &str| {
        assert!(
            out.status.success(),
            "{what}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    ok(
        bin().arg("--config").arg(&cfg).args(["gen-corpus", "--out"]).arg(&corpus).output().unwrap(),
        "gen-corpus",
    );
    assert!(corpus.join("manifest.csv").is_file());

    ok(
        bin().arg("--config").arg(&cfg)
            .args(["pretrain", "--corpus"]).arg(&corpus)
            .arg("--out").arg(&run_dir)
            .output().unwrap(),
        "pretrain",
    );
    // checkpoint series includes every epoch (cadence 1) and the loss log
    assert!(run_dir.join("checkpoint_ep0001.stnc").is_file());
    assert!(run_dir.join("checkpoint_ep0002.stnc").is_file());
    let loss_csv = std::fs::read_to_string(run_dir.join("loss.csv")).unwrap();
    assert!(loss_csv.starts_with("step,epoch,loss,lr,wd,momentum"));
    assert!(loss_csv.lines().count() > 2);

    ok(
        bin().arg("--config").arg(&cfg)
            .args(["extract", "--checkpoint"]).arg(run_dir.join("checkpoint_ep0002.stnc"))
            .arg("--corpus").arg(&corpus)
            .arg("--out").arg(&feats)
            .arg("--bags-out").arg(&bags)
            .output().unwrap(),
        "extract",
    );
    assert!(feats.is_file());
    assert!(bags.join("bags.csv").is_file());

    let out = bin().arg("--config").arg(&cfg)
        .args(["probe", "--features"]).arg(&feats)
        .args(["--mode", "mlp", "--folds", "2", "--out"]).arg(&report)
        .output().unwrap();
    ok(out, "probe");
    let rows = std::fs::read_to_string(&report).unwrap();
    assert_eq!(rows.lines().count(), 2, "one report row per fold");

    ok(
        bin().arg("--config").arg(&cfg)
            .args(["retrieve", "--features"]).arg(&feats)
            .args(["--k-max", "4", "--out"]).arg(dir.path().join("retr.csv"))
            .output().unwrap(),
        "retrieve",
    );
    let retr = std::fs::read_to_string(dir.path().join("retr.csv")).unwrap();
    assert_eq!(retr.lines().count(), 5); // header + K=1..4

    ok(
        bin().arg("--config").arg(&cfg)
            .args(["mil", "--bags"]).arg(&bags)
            .args(["--model", "simlp", "--folds", "2", "--out"]).arg(&report)
            .output().unwrap(),
        "mil",
    );

    ok(
        bin().args(["report", "--rows"]).arg(&report)
            .arg("--summary").arg(dir.path().join("summary.csv"))
            .output().unwrap(),
        "report",
    );
    let summary = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert!(summary.starts_with("task,model,metric,mean,std"));
    assert!(summary.contains("probe,mlp,bal_acc"));
    assert!(summary.contains("mil,simlp,acc"));
}

#[test]
fn probe_accepts_labels_from_manifest() {
    // features written without labels need --manifest
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path());
    let corpus = dir.path().join("corpus");
    let run_dir = dir.path().join("run");
    let feats = dir.path().join("f.stnf");
    for args in [
        vec!["gen-corpus".to_string(), "--out".into(), corpus.display().to_string()],
        vec![
            "pretrain".into(),
            "--corpus".into(),
            corpus.display().to_string(),
            "--out".into(),
            run_dir.display().to_string(),
        ],
        vec![
            "extract".into(),
            "--checkpoint".into(),
            run_dir.join("checkpoint_ep0002.stnc").display().to_string(),
            "--corpus".into(),
            corpus.display().to_string(),
            "--out".into(),
            feats.display().to_string(),
        ],
    ] {
        let out = bin().arg("--config").arg(&cfg).args(&args).output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    // strip labels from the feature file
    let fm = stainlab::downstream::read_features(&feats).unwrap();
    let unlabeled = stainlab::downstream::FeatureMatrix::new(fm.ids.clone(), fm.x.clone(), None).unwrap();
    stainlab::downstream::write_features(&feats, &unlabeled).unwrap();

    // without a manifest: validation error
    let out = bin().arg("--config").arg(&cfg)
        .args(["probe", "--features"]).arg(&feats)
        .args(["--folds", "2"])
        .arg("--out").arg(dir.path().join("r.jsonl"))
        .output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    let out = bin().arg("--config").arg(&cfg)
        .args(["probe", "--features"]).arg(&feats)
        .arg("--manifest").arg(corpus.join("manifest.csv"))
        .args(["--folds", "2"])
        .arg("--out").arg(dir.path().join("r.jsonl"))
        .output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
