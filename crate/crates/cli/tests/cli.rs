use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn drk(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drk"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DRK_THREADS")
        .output()
        .expect("spawn drk")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn make_data(dir: &Path, name: &str, n: usize) {
    let o = drk(&["make-data", "--out", name, "--n", &n.to_string(), "--seed", "3"], dir);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn gradcheck_single_module_line() {
    let tmp = tempfile::tempdir().unwrap();
    let o = drk(&["gradcheck", "--module", "raf", "--seed", "7"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let line = out.trim();
    assert!(line.starts_with("module=raf max_rel_err="), "{line}");
    assert!(line.ends_with("pass=true"), "{line}");
}

#[test]
fn gradcheck_unknown_module_is_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = drk(&["gradcheck", "--module", "nope"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn rejects_unknown_flags_and_bad_threads() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(drk(&["bench", "--op", "conv", "--fast"], tmp.path()).status.code(), Some(1));
    assert_eq!(drk(&["bench", "--op", "fft"], tmp.path()).status.code(), Some(1));
    let o = Command::new(env!("CARGO_BIN_EXE_drk"))
        .args(["bench", "--op", "conv", "--size", "8", "--iters", "1"])
        .env("DRK_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("DRK_THREADS"));
}

#[test]
fn make_data_zero_samples_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = drk(&["make-data", "--out", "d", "--n", "0"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("validation"));
    assert!(!tmp.path().join("d").exists());
}

#[test]
fn make_data_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path(), "a", 6);
    make_data(tmp.path(), "b", 6);
    let mut names: Vec<_> = fs::read_dir(tmp.path().join("a"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(names.len(), 1 + 3 * 6);
    for n in names {
        let a = fs::read(tmp.path().join("a").join(&n)).unwrap();
        let b = fs::read(tmp.path().join("b").join(&n)).unwrap();
        assert_eq!(a, b, "{n:?}");
    }
}

#[test]
fn eval_ground_truth_copy_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path(), "d", 8);
    let o = drk(&["eval", "--pred", "d", "--data", "d", "--out", "m.csv"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("m.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "sample_id,iou");
    assert_eq!(lines.len(), 1 + 8 + 6);
    assert!(lines[1..9].iter().all(|l| l.ends_with(",1")));
    assert_eq!(lines[9], "miou,1");
    for (k, line) in [50, 60, 70, 80, 90].iter().zip(&lines[10..]) {
        assert_eq!(*line, format!("prec@{k},1"));
    }
}

#[test]
fn missing_paths_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let o = drk(&["eval", "--pred", "nowhere", "--data", "alsonowhere"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alsonowhere"));

    make_data(tmp.path(), "d", 4);
    let o = drk(&["eval", "--ckpt", "missing.dckp", "--data", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.dckp"));

    let o = drk(&["train", "--data", "d", "--out", "r", "--config", "none.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("none.cfg"));
    assert!(!tmp.path().join("r").exists());
}

#[test]
fn train_rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path(), "d", 4);
    fs::write(tmp.path().join("c.cfg"), "epochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = drk(&["train", "--data", "d", "--out", "r", "--config", "c.cfg"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
}

#[test]
fn train_is_byte_deterministic_and_eval_reads_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    make_data(tmp.path(), "d", 10);
    fs::write(
        tmp.path().join("c.cfg"),
        "# short run\nepochs = 2\nbatch_size = 4\nchannels = 4\n",
    )
    .unwrap();
    for (run, threads) in [("r1", "1"), ("r2", "2")] {
        let o = drk(
            &["--threads", threads, "train", "--data", "d", "--out", run, "--config", "c.cfg"],
            tmp.path(),
        );
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    for f in ["history.csv", "model.dckp"] {
        let a = fs::read(tmp.path().join("r1").join(f)).unwrap();
        let b = fs::read(tmp.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let history = fs::read_to_string(tmp.path().join("r1/history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);

    let o = drk(&["eval", "--ckpt", "r1/model.dckp", "--data", "d"], tmp.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.starts_with("sample_id,iou\n"));
    assert!(out.lines().any(|l| l.starts_with("miou,")));
}

#[test]
fn bench_prints_median() {
    let tmp = tempfile::tempdir().unwrap();
    for op in ["conv", "deform"] {
        let o = drk(&["bench", "--op", op, "--size", "16", "--iters", "3"], tmp.path());
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let out = stdout(&o);
        assert!(out.starts_with(&format!("op={op} size=16 iters=3 median_us=")), "{out}");
    }
}
