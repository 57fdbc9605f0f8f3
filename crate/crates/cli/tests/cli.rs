use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use evseg::io::{read_f32, read_pgm};

const TINY: &str = "\
seed = 5
net.stage_channels = 4,6,8
euga.rank = 2
data.size = 16
data.synth = 4
train.epochs = 2
";

fn evseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_evseg"))
        .args(args)
        .env_remove("EVSEG_SEED")
        .output()
        .expect("spawn evseg")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains the tiny model into `dir/run` and returns the checkpoint path.
fn train_tiny(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "tiny.cfg", TINY);
    let out = dir.join("run");
    let o = evseg(&["train", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("model.ckpt")
}

#[test]
fn train_is_reproducible_and_logs_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", TINY);
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = evseg(&["train", "--config", s(&cfg), "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(fs::read_to_string(out.join("train_log.csv")).unwrap());
        assert!(out.join("model.ckpt").is_file());
    }
    assert_eq!(logs[0], logs[1]);
    let mut lines = logs[0].lines();
    assert_eq!(lines.next(), Some("epoch,lambda1,l_ice,l_kl,l_u,l_total,val_dice"));
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(first[0], "0");
    assert_eq!(first[1].parse::<f64>().unwrap(), 0.0);
    assert_eq!(lines.count(), 1);
}

#[test]
fn seed_env_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    let run = |env: Option<&str>, out: &str| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_evseg"));
        c.args(["train", "--config", s(&cfg), "--out", s(&dir.path().join(out))]);
        match env {
            Some(v) => c.env("EVSEG_SEED", v),
            None => c.env_remove("EVSEG_SEED"),
        };
        assert!(c.output().unwrap().status.success());
        fs::read_to_string(dir.path().join(out).join("train_log.csv")).unwrap()
    };
    let base = run(None, "base");
    assert_eq!(run(Some("5"), "same"), base);
    assert_ne!(run(Some("6"), "other"), base);
}

#[test]
fn eval_writes_metric_and_trace_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let cfg = dir.path().join("tiny.cfg");
    let out = dir.path().join("eval");
    let o = evseg(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "image_id,dice,iou,assd,ueo@0.5,ueo_max");
    assert!(lines.last().unwrap().starts_with("mean,"));
    assert_eq!(lines.len(), 1 + 1 + 1);
    let traces = fs::read_to_string(out.join("traces.csv")).unwrap();
    assert!(traces.starts_with("image_id,iter,delta\n"));

    let noisy = dir.path().join("noisy");
    let o = evseg(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&noisy),
        "--noise",
        "0.4",
    ]);
    assert_eq!(code(&o), 0);
    let o = evseg(&["eval", "--config", s(&cfg), "--checkpoint", s(&ckpt), "--noise", "0.9"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn mismatched_checkpoint_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let other = write_config(dir.path(), "other.cfg", &format!("{TINY}net.use_euga = false\n"));
    let o = evseg(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt), "--out", s(dir.path())]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn predict_outputs_follow_encoding_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let corpus = dir.path().join("corpus");
    let o = evseg(&["synth", "--n", "4", "--size", "16", "--seed", "3", "--out", s(&corpus)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("pred");
    let o = evseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&corpus.join("test-0000.f32")),
        "--mask",
        s(&corpus.join("test-0000_mask.pgm")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let u = read_f32(&out.join("umap.f32")).unwrap();
    assert_eq!(u.shape(), &[1, 16, 16]);
    assert!(u.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    let upgm = read_pgm(&out.join("umap.pgm")).unwrap();
    assert_eq!(upgm.maxval, 65535);
    for (&p, &v) in upgm.pixels.iter().zip(u.data()) {
        assert_eq!(p, (65535.0 * v).round() as u16);
    }
    let pred = read_pgm(&out.join("pred.pgm")).unwrap();
    assert!(pred.pixels.iter().all(|&p| p <= 1));
    let truth = read_pgm(&corpus.join("test-0000_mask.pgm")).unwrap();
    let diff = read_pgm(&out.join("diff.pgm")).unwrap();
    for ((d, p), t) in diff.pixels.iter().zip(&pred.pixels).zip(&truth.pixels) {
        assert_eq!(*d == 255, p != t);
    }
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.lines().count() >= 2);

    // the 16-bit gray channel is a supported input too
    let o = evseg(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--image",
        s(&corpus.join("test-0000_c0.pgm")),
        "--out",
        s(&dir.path().join("pred16")),
    ]);
    assert_eq!(code(&o), 0);
}

#[test]
fn unreadable_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path());
    let junk = write_config(dir.path(), "junk.f32", "not an image");
    let o = evseg(&["predict", "--checkpoint", s(&ckpt), "--image", s(&junk), "--out", s(dir.path())]);
    assert_eq!(code(&o), 2);
    let o = evseg(&["predict", "--checkpoint", s(&ckpt), "--image", s(&dir.path().join("missing.pgm"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn bad_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.cfg", "seed = 1\nnet.classes = two\n");
    let o = evseg(&["train", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("net.classes"), "{err}");
}

#[test]
fn numeric_blowup_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "hot.cfg", &format!("{TINY}train.lr = 1e300\n"));
    let o = evseg(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("hot"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("epoch"), "{err}");
}

#[test]
fn ablate_emits_four_rows_with_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "tiny.cfg", &TINY.replace("train.epochs = 2", "train.epochs = 1"));
    let out = dir.path().join("ablate");
    let o = evseg(&["ablate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 5);
    assert_eq!(rows[0][..4], ["euga", "sael", "generator", "uncertainty_term"]);
    for r in &rows[1..] {
        let sael_on = r[1] == "on";
        assert_eq!(r[2], if sael_on { "smooth" } else { "exp" });
        assert_eq!(r[3], if sael_on { "corrected" } else { "literal" });
    }
}

#[test]
fn check_command_passes() {
    let o = evseg(&["check", "--instances", "3", "--vectors", "200"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS ")), "{text}");
}
