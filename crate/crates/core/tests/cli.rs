use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fastbat"))
        .args(args)
        .current_dir(root())
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const HEADER: &str = "epoch,lr,train_loss,sa,ra_pgd,ga_score,epoch_seconds";

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["bogus"]).status.code(), Some(2));
}

#[test]
fn bad_values_are_usage_errors() {
    assert_eq!(run(&["train", "--method", "sgd"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--set", "no_such_key=1"]).status.code(),
        Some(2)
    );
    assert_eq!(run(&["train", "--set", "epochs"]).status.code(), Some(2));
    assert_eq!(
        run(&["train", "--method", "fast_at", "--lambda", "2"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn zero_epochs_writes_only_the_header() {
    let o = run(&["train", "--epochs", "0", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), format!("{HEADER}\n"));
}

#[test]
fn train_writes_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("m.csv");
    let o = run(&[
        "train",
        "--method",
        "fast_at",
        "--epochs",
        "3",
        "--set",
        "early_stop=false",
        "--metrics-out",
        csv.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len(), 4);
    for (i, l) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols.len(), 7);
        assert_eq!(cols[0], (i + 1).to_string());
        let sa: f64 = cols[3].parse().unwrap();
        let ra: f64 = cols[4].parse().unwrap();
        assert!((0.0..=100.0).contains(&sa) && ra <= sa);
    }
}

#[test]
fn config_file_is_overridden_by_set_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# toy run\nepochs = 5\nmethod = fast_at\nn = 128\n").unwrap();
    let c = cfg.to_str().unwrap();
    let rows = |o: &Output| stdout(o).lines().count() - 1;

    let o = run(&["--config", c, "train"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(rows(&o) >= 1 && rows(&o) <= 5);
    let o = run(&["--config", c, "--set", "epochs=1", "train"]);
    assert_eq!(rows(&o), 1);
    let o = run(&[
        "--config",
        c,
        "--set",
        "epochs=1",
        "train",
        "--epochs",
        "2",
        "--set",
        "early_stop=false",
    ]);
    assert_eq!(rows(&o), 2);

    std::fs::write(&cfg, "epochs = 1\nepochs = 2\n").unwrap();
    assert_eq!(run(&["--config", c, "train"]).status.code(), Some(2));
    assert_eq!(
        run(&["--config", "/no/such/file", "train"]).status.code(),
        Some(2)
    );
}

#[test]
fn checkpoint_feeds_eval_ga_and_landscape() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    let ck = ck.to_str().unwrap();
    let o = run(&[
        "train",
        "--epochs",
        "2",
        "--seed",
        "4",
        "--checkpoint-out",
        ck,
    ]);
    assert_eq!(o.status.code(), Some(0));

    let o = run(&["eval", "--checkpoint", ck, "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("sa,ra_pgd"));
    let vals: Vec<f64> = lines
        .next()
        .unwrap()
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert!(vals[1] <= vals[0]);

    let o = run(&["ga", "--checkpoint", ck, "--samples", "4", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let g: f64 = out
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .next()
        .unwrap()
        .parse()
        .unwrap();
    assert!((-1.0..=1.0).contains(&g));

    let grid = dir.path().join("grid.csv");
    let o = run(&[
        "landscape",
        "--checkpoint",
        ck,
        "--grid-n",
        "5",
        "--seed",
        "4",
        "--out",
        grid.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&grid).unwrap();
    assert!(text.lines().count() >= 5);

    let o = run(&[
        "landscape",
        "--checkpoint",
        ck,
        "--index",
        "100000",
        "--seed",
        "4",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn eval_rejects_a_checkpoint_for_another_model() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("model.ckpt");
    let ck = ck.to_str().unwrap();
    assert_eq!(
        run(&["train", "--epochs", "1", "--checkpoint-out", ck])
            .status
            .code(),
        Some(0)
    );
    let o = run(&["eval", "--checkpoint", ck, "--set", "hidden=8"]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["eval", "--checkpoint", "/no/such/checkpoint"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_exit_code_reflects_its_report() {
    let o = run(&["check", "--seed", "0"]);
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 7);
    let all_pass = lines.iter().all(|l| l.starts_with("[PASS]"));
    assert!(lines
        .iter()
        .all(|l| l.starts_with("[PASS]") || l.starts_with("[FAIL]")));
    assert_eq!(o.status.code(), Some(if all_pass { 0 } else { 1 }));
}
