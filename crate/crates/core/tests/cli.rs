use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_zlss");

const TINY: &[&str] = &[
    "--height", "8", "--width", "8", "--train-size", "6", "--eval-size", "3", "--in-channels", "4",
    "--embed-dim", "4", "--n-seen", "3", "--n-unseen", "2", "--max-cosine", "0.95",
];
const QUICK: &[&str] = &["--base-iters", "5", "--cycle-iters", "3", "--cycles", "2", "--lr", "1e-3", "--batch-size", "2"];

fn zlss(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = zlss(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn with(cmd: &str, parts: &[&[&str]]) -> Vec<String> {
    std::iter::once(cmd)
        .chain(parts.iter().flat_map(|p| p.iter().copied()))
        .map(String::from)
        .collect()
}

fn run(dir: &Path, cmd: &str, parts: &[&[&str]]) -> String {
    let args = with(cmd, parts);
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

fn summary(stdout: &str) -> &str {
    stdout.lines().last().unwrap()
}

#[test]
fn gen_data_writes_the_dataset_layout() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    let data = tmp.path().join("data");
    for f in ["meta.txt", "embeddings.txt", "hidden_map.txt", "oracle.ckpt"] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let files: Vec<_> = std::fs::read_dir(&data).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(files.len() > 4);
}

#[test]
fn unknown_key_exits_with_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = zlss(tmp.path(), &["gen-data", "--no-such-key", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
}

#[test]
fn missing_checkpoint_exits_with_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    let out = zlss(tmp.path(), &["eval", "--checkpoint", "nowhere.ckpt"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn help_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(zlss(tmp.path(), &["--help"]).status.success());
    assert_eq!(zlss(tmp.path(), &["no-such-command"]).status.code(), Some(1));
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = [
        "--noise", "0", "--height", "32", "--width", "32", "--in-channels", "8", "--embed-dim", "8", "--n-seen", "6",
        "--n-unseen", "3", "--background", "ignored", "--train-size", "4", "--eval-size", "10",
    ];
    run(tmp.path(), "gen-data", &[&gen]);
    let out = run(tmp.path(), "eval", &[&["--checkpoint", "data/oracle.ckpt"]]);
    assert_eq!(summary(&out), "S=100.0 U=100.0 HM=100.0");
    let csv = std::fs::read_to_string(tmp.path().join("run/default/report.csv")).unwrap();
    assert!(csv.starts_with("# zlss-report v1\nclass,iou,gt_pixels,pred_pixels\n"));
}

#[test]
fn zero_gamma_matches_no_calibration() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    run(tmp.path(), "train-base", &[QUICK]);
    let ckpt: &[&str] = &["--checkpoint", "run/default/base.ckpt"];
    run(tmp.path(), "eval", &[ckpt, &["--name", "plain"]]);
    run(tmp.path(), "eval", &[ckpt, &["--name", "zero", "--gamma", "0"]]);
    let read = |n: &str| std::fs::read(tmp.path().join(format!("run/{n}/report.csv"))).unwrap();
    assert_eq!(read("plain"), read("zero"));
}

#[test]
fn zero_cycles_reports_only_the_base_model() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    let base = run(tmp.path(), "train-base", &[QUICK]);
    let st = run(tmp.path(), "selftrain", &[QUICK, &["--cycles", "0"]]);
    assert_eq!(summary(&st), summary(&base));
    let history = std::fs::read_to_string(tmp.path().join("run/default/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
    assert!(tmp.path().join("run/default/cycle_0.ckpt").is_file());
    assert!(!tmp.path().join("run/default/cycle_1.ckpt").exists());
}

#[test]
fn pseudo_writes_one_mask_per_training_image() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    run(tmp.path(), "train-base", &[QUICK]);
    let out = run(tmp.path(), "pseudo", &[&["--checkpoint", "run/default/base.ckpt", "--strategy", "topp:20"]]);
    assert!(out.contains("strategy=topp:20"));
    assert!(out.contains("precision="));
    let masks = std::fs::read_dir(tmp.path().join("run/default/pseudo")).unwrap().count();
    assert_eq!(masks, 6);
}

#[test]
fn ablation_has_eight_settings_and_none_is_raw_self_training() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    run(tmp.path(), "ablate-augs", &[QUICK]);
    let csv = std::fs::read_to_string(tmp.path().join("run/default/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 8);
    let none: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(none[..2], ["none", "identity"]);

    let raw = run(tmp.path(), "selftrain", &[QUICK, &["--strategy", "raw_st", "--name", "raw"]]);
    assert_eq!(summary(&raw), format!("S={} U={} HM={}", none[2], none[3], none[4]));
}

#[test]
fn reruns_produce_identical_history() {
    let tmp = tempfile::tempdir().unwrap();
    run(tmp.path(), "gen-data", &[TINY]);
    run(tmp.path(), "selftrain", &[QUICK, &["--name", "a"]]);
    run(tmp.path(), "selftrain", &[QUICK, &["--name", "b", "--workers", "1"]]);
    let read = |n: &str| std::fs::read(tmp.path().join(format!("run/{n}/history.csv"))).unwrap();
    assert_eq!(read("a"), read("b"));
}

#[test]
fn config_file_and_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("tiny.cfg"), "# tiny dataset\nheight = 6\nwidth=6\ntrain_size = 4\n").unwrap();
    run(tmp.path(), "gen-data", &[&TINY[4..], &["--config", "tiny.cfg", "--width", "7"]]);
    let meta = std::fs::read_to_string(tmp.path().join("data/meta.txt")).unwrap();
    assert!(meta.contains("height=6"));
    assert!(meta.contains("width=7"));
}
