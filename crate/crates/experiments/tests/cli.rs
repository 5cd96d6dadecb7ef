use std::path::Path;
use std::process::{Command, Output};

fn ebm(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebm"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("EBM_DATA_DIR")
        .output()
        .unwrap()
}

fn summary(dir: &Path, name: &str) -> Vec<(String, String)> {
    std::fs::read_to_string(dir.join(format!("{name}.summary")))
        .unwrap()
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key=value line");
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn get<'a>(s: &'a [(String, String)], key: &str) -> &'a str {
    &s.iter().find(|(k, _)| k == key).unwrap().1
}

#[test]
fn csv_header_carries_hash_and_seeds() {
    let dir = tempfile::tempdir().unwrap();
    ebm(&["fig2b", "--seed", "3,5", "--steps", "12"], dir.path());
    let csv = std::fs::read_to_string(dir.path().join("fig2b.csv")).unwrap();
    let header: Vec<&str> = csv.lines().take_while(|l| l.starts_with('#')).collect();
    assert!(header.iter().any(|l| l.starts_with("# config_hash=") && l.len() == 14 + 64));
    assert!(header.contains(&"# seeds=3,5"));
    assert_eq!(csv.lines().nth(header.len()), Some("step,mean_distance,std_distance"));
    assert_eq!(csv.lines().count(), header.len() + 1 + 13);
}

#[test]
fn reruns_are_byte_identical_across_thread_counts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let args = ["fig2a", "--seed", "0..4", "--steps", "8"];
    ebm(&args, a.path());
    ebm(&[&args[..], &["--jobs", "4"]].concat(), b.path());
    for f in ["fig2a.csv", "fig2a.summary"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn exit_code_follows_assertions() {
    for args in [&["fig2b"][..], &["fig2a", "--seed", "0"], &["train", "--rule", "backprop", "--subset", "256,64", "--epochs", "1"]] {
        let dir = tempfile::tempdir().unwrap();
        let out = ebm(args, dir.path());
        let s = summary(dir.path(), args[0]);
        assert_eq!(out.status.success(), get(&s, "pass") == "true", "{args:?}");
        assert_eq!(out.stdout, std::fs::read(dir.path().join(format!("{}.summary", args[0]))).unwrap());
    }
}

#[test]
fn train_reports_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let out = ebm(&["train", "--rule", "pc_nudge", "--subset", "256,64", "--epochs", "1", "--batch-size", "32"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let s = summary(dir.path(), "train");
    assert_eq!(get(&s, "rule"), "pc_nudge");
    assert_eq!(get(&s, "batches"), "8");
    let acc: f64 = get(&s, "test_accuracy").parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn data_dir_falls_back_to_environment() {
    let empty = tempfile::tempdir().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ebm"))
        .args(["train", "--subset", "64", "--epochs", "1", "--out"])
        .arg(dir.path())
        .env("EBM_DATA_DIR", empty.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&empty.path().display().to_string()), "{err}");
}

#[test]
fn bad_flags_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ebm(&["fig2a", "--lambda", "x"], dir.path()).status.code(), Some(2));
    assert_eq!(ebm(&["fig2a", "--lambda", "0.1,0.2"], dir.path()).status.code(), Some(2));
    assert!(!ebm(&["nope"], dir.path()).status.success());
}
