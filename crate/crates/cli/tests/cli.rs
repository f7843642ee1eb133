use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn transrec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transrec"))
        .args(args)
        .env_remove("TRANSREC_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = transrec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic corpus prepared into `dir/split`.
fn prepared(dir: &Path) -> std::path::PathBuf {
    let tsv = dir.join("s.tsv");
    ok(&["synth", "--out", s(&tsv), "--users", "40", "--items", "25", "--seed", "1"]);
    let split = dir.join("split");
    ok(&["prepare", "--input", s(&tsv), "--out", s(&split), "--k-core", "2"]);
    split
}

const QUICK: &[&str] = &[
    "--encoder.dim=8",
    "--encoder.max_len=10",
    "--train.epochs=2",
    "--train.batch_size=16",
    "--precision=f64",
];

#[test]
fn prepare_toy_file() {
    let dir = tempfile::tempdir().unwrap();
    let tsv = dir.path().join("toy.tsv");
    fs::write(
        &tsv,
        "a\tx\t1\na\ty\t2\na\tz\t3\nb\ty\t1\nb\tx\t2\nb\tz\t3\nc\tz\t1\nc\ty\t2\nc\tx\t3\n",
    )
    .unwrap();
    let out = dir.path().join("split");
    let stdout = ok(&["prepare", "--input", s(&tsv), "--out", s(&out), "--k-core", "1"]);
    assert!(stdout.contains("users\t3"), "{stdout}");
    assert!(stdout.contains("density\t1.000000"), "{stdout}");
    let split = transrec::corpus::SplitDataset::read_dir(&out).unwrap();
    assert_eq!(split.num_users(), 3);
    assert_eq!(split.num_items, 3);
    assert!(out.join("stats.json").exists());
}

#[test]
fn missing_input_exits_nonzero() {
    let out = transrec(&["prepare", "--input", "/nonexistent/file.tsv", "--out", "/tmp/never"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/file.tsv"));
}

#[test]
fn train_writes_tagged_outputs_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepared(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&split), "--out", s(&out)];
        args.extend(["--loss.name=trans_bpr", "sampler.mode=pop", "sampler.transitivity=weak"]);
        args.extend(QUICK);
        ok(&args);
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["metrics.json", "trajectory.csv", "valid_metrics.json", "config.txt", "best.ckpt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let metrics = fs::read_to_string(a.join("metrics.json")).unwrap();
    let digest = fs::read_to_string(a.join("config.txt")).unwrap();
    let digest = digest.lines().next().unwrap().strip_prefix("# config_digest=").unwrap();
    assert!(metrics.contains(digest));

    let eval_out = ok(&["evaluate", "--data", s(&split), "--checkpoint", s(&a), "--stage", "test"]);
    let printed: serde_json::Value = serde_json::from_str(&eval_out).unwrap();
    let stored: serde_json::Value = serde_json::from_str(&metrics).unwrap();
    assert_eq!(printed, stored);
}

#[test]
fn incompatible_loss_and_sampler_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepared(dir.path());
    let out = dir.path().join("run");
    let r = transrec(&["train", "--data", s(&split), "--out", s(&out), "loss.name=ssm", "sampler.kind=quad"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("set batches"));
    assert!(!out.exists());
    let r = transrec(&["train", "--data", s(&split), "--out", s(&out), "loss.nmae=bpr"]);
    assert!(!r.status.success());
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown key"));
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.cfg");
    fs::write(&path, "# experiment\nloss.name = bce\ntrain.seed = 3\n").unwrap();
    let a = ok(&["config", "--config", s(&path)]);
    assert!(a.contains("loss.name = bce"));
    let b = ok(&["config", "--config", s(&path), "--train.seed=4"]);
    assert!(b.contains("train.seed = 4"));
    assert_ne!(a.lines().next(), b.lines().next());
    fs::write(&path, "train.seed = 3\nloss.name = bce\n").unwrap();
    assert_eq!(ok(&["config", "--config", s(&path)]), a);
}

#[test]
fn analyze_commands() {
    let dir = tempfile::tempdir().unwrap();
    let split = prepared(dir.path());
    let mut runs = Vec::new();
    for t in ["weak", "strict"] {
        let out = dir.path().join(t);
        let tr = format!("sampler.transitivity={t}");
        let mut args = vec!["train", "--data", s(&split), "--out", s(&out), tr.as_str()];
        args.extend(QUICK);
        ok(&args);
        runs.push(out);
    }
    let terms = dir.path().join("terms.csv");
    let weak = format!("weak={}", s(&runs[0]));
    let strict = format!("strict={}", s(&runs[1].join("trajectory.csv")));
    ok(&["analyze", "terms", "--log", &weak, "--log", &strict, "--out", s(&terms)]);
    let text = fs::read_to_string(&terms).unwrap();
    let rows: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 3, "{text}");
    assert_eq!(rows[0], "scheme,steps,final_preference,slope");

    let buckets = dir.path().join("buckets.csv");
    ok(&["analyze", "buckets", "--data", s(&split), "--checkpoint", s(&runs[0]), "--out", s(&buckets)]);
    let text = fs::read_to_string(&buckets).unwrap();
    assert!(text.starts_with("# config_digest="));
    assert_eq!(text.lines().count(), 7);

    let missing = transrec(&["analyze", "buckets", "--data", s(&split), "--checkpoint", "/no/ckpt", "--out", s(&buckets)]);
    assert!(!missing.status.success());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["analyze", "gradcheck"]);
    assert!(out.starts_with("check,max_rel_err,tolerance,checked,passed"));
    assert!(out.lines().skip(1).all(|l| l.ends_with(",true")), "{out}");
}

#[test]
fn thread_count_is_validated() {
    let r = Command::new(env!("CARGO_BIN_EXE_transrec"))
        .args(["analyze", "gradcheck"])
        .env("TRANSREC_THREADS", "lots")
        .output()
        .unwrap();
    assert!(!r.status.success());
    assert!(ok(&["--threads", "2", "config"]).contains("precision = f32"));
}
