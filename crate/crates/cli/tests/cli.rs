use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn z2fsl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_z2fsl"))
        .args(args)
        .env_remove("Z2FSL_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = z2fsl(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn manifest_value(dir: &Path, key: &str) -> Option<String> {
    fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .find_map(|l| {
            let (k, v) = l.split_once('=')?;
            (k.trim() == key).then(|| v.trim().to_string())
        })
}

#[test]
fn make_toy_writes_fifteen_classes_and_an_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    let stdout = ok(&[
        "make-toy", "--out", path(&out), "--seen", "10", "--unseen", "5", "--attr-dim", "16", "--feat-dim", "32",
        "--per-class", "50", "--noise", "0.05", "--seed", "7",
    ]);
    assert!(stdout.contains("classes = 15"));
    assert_eq!(manifest_value(&out, "C").as_deref(), Some("15"));
    let oracle: f64 = manifest_value(&out, "oracle_accuracy").unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&oracle));
}

#[test]
fn make_toy_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["make-toy", "--out", path(&a), "--seed", "9"]);
    ok(&["make-toy", "--out", path(&b), "--seed", "9"]);
    for f in ["manifest.txt", "features.z2fd", "attributes.z2fd", "labels.z2fd", "splits.z2fd"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["make-toy", "--out", path(&a), "--seed", "21"]);
    let out = Command::new(env!("CARGO_BIN_EXE_z2fsl"))
        .args(["make-toy", "--out", path(&b)])
        .env("Z2FSL_SEED", "21")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(fs::read(a.join("features.z2fd")).unwrap(), fs::read(b.join("features.z2fd")).unwrap());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("toy");
    assert_eq!(z2fsl(&["make-toy", "--out", path(&out), "--per-class", "2"]).status.code(), Some(2));
    assert_eq!(z2fsl(&["make-toy", "--bogus"]).status.code(), Some(2));

    ok(&["make-toy", "--out", path(&out), "--seen", "2", "--unseen", "2", "--per-class", "6"]);
    let run = dir.path().join("run");
    let pre = |extra: &str| {
        z2fsl(&[
            "pretrain", "--data", path(&out), "--config", "toy-zsl", "--out", path(&run), "--override", extra,
        ])
    };
    // unknown keys fail before anything is written
    assert_eq!(pre("n_X=3").status.code(), Some(2));
    assert!(!run.exists());
    // the 2-class toy cannot host a 3-way episode
    assert_eq!(pre("n_W=3").status.code(), Some(2));
    assert_eq!(
        z2fsl(&["train", "--data", path(&out), "--config", "no-such-config", "--out", path(&run)]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = z2fsl(&[
        "pretrain", "--data", path(&dir.path().join("nothing")), "--config", "toy-zsl", "--out",
        path(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_needs_a_network_unless_told_otherwise() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["make-toy", "--out", path(&toy), "--seen", "4", "--unseen", "2", "--per-class", "8"]);
    let run = dir.path().join("run");
    let base = ["train", "--data", path(&toy), "--config", "toy-zsl", "--out", path(&run), "--override", "N=3"];
    assert_eq!(z2fsl(&base).status.code(), Some(2));
    let mut args = base.to_vec();
    args.extend(["--no-pretrain", "--override", "n_W=3"]);
    ok(&args);
    let resolved = fs::read_to_string(run.join("resolved-config.txt")).unwrap();
    assert!(resolved.contains("pretrain = false"));
    assert!(resolved.contains("N = 3"));
    let log = fs::read_to_string(run.join("train-log.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.starts_with("iteration,fsl,critic,zsl,fsl_generator,objective\n"));
}

fn train_and_eval(dir: &Path, preset: &str, mode: &str, eval_extra: &[&str]) -> String {
    let toy = dir.join("toy");
    ok(&["make-toy", "--out", path(&toy), "--seen", "4", "--unseen", "2", "--per-class", "10", "--mode", mode]);
    let small = ["--override", "N=5", "--override", "n_W=3", "--override", "n_S_test=10"];
    let train = dir.join("train");
    let mut args = vec!["train", "--data", path(&toy), "--config", preset, "--out", path(&train), "--no-pretrain"];
    args.extend(small);
    ok(&args);
    let eval = dir.join("eval");
    let mut args = vec!["eval", "--data", path(&toy), "--config", preset, "--out", path(&eval)];
    args.extend(["--model", path(&train)]);
    args.extend(small);
    args.extend(eval_extra);
    ok(&args);
    fs::read_to_string(eval.join("report.txt")).unwrap()
}

#[test]
fn zero_shot_report_has_one_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let report = train_and_eval(dir.path(), "toy-zsl", "zsl", &[]);
    assert_eq!(report.lines().filter(|l| l.starts_with("acc = ")).count(), 1);
    assert!(!report.lines().any(|l| l.starts_with("H = ")));
}

#[test]
fn generalized_report_has_u_s_and_h() {
    let dir = tempfile::tempdir().unwrap();
    let report = train_and_eval(
        dir.path(),
        "toy-gzsl",
        "gzsl",
        &["--seen-source", "real", "--seen-shot", "3", "--test-shot", "7"],
    );
    for key in ["u = ", "s = ", "H = "] {
        assert!(report.lines().any(|l| l.starts_with(key)), "{key} missing");
    }
    assert!(!report.lines().any(|l| l.starts_with("acc = ")));
    let resolved = fs::read_to_string(dir.path().join("eval/resolved-config.txt")).unwrap();
    for line in ["seen_source = real", "m_S = 3", "n_S_test = 7"] {
        assert!(resolved.lines().any(|l| l == line), "{line}");
    }
}

#[test]
fn linear_baseline_trains_the_backbone_alone() {
    let dir = tempfile::tempdir().unwrap();
    let toy = dir.path().join("toy");
    ok(&["make-toy", "--out", path(&toy), "--seen", "4", "--unseen", "2", "--per-class", "10"]);
    let train = dir.path().join("train");
    ok(&[
        "train", "--data", path(&toy), "--config", "toy-zsl", "--out", path(&train), "--backbone", "wgan", "--gamma",
        "0", "--head", "linear", "--override", "N=3", "--override", "n_W=3",
    ]);
    assert!(train.join("backbone.z2fm").exists());
    assert!(!train.join("protonet.z2fm").exists());
    let log = fs::read_to_string(train.join("train-log.csv")).unwrap();
    // no classifier columns, critic column filled
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "");
    assert!(!row[2].is_empty());
    let eval = dir.path().join("eval");
    let stdout = ok(&[
        "eval", "--data", path(&toy), "--config", "toy-zsl", "--out", path(&eval), "--model", path(&train), "--head",
        "linear", "--override", "n_S_test=10",
    ]);
    assert!(stdout.contains("acc = "));
    assert!(eval.join("linear.z2fm").exists());
}
