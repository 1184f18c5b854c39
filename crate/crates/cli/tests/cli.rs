use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY: &[&str] = &[
    "n_points=64",
    "n_train=24",
    "n_test=10",
    "epochs=1",
    "layer1=16 8 4 16,16",
    "layer2=8 8 4 16,32",
    "global=32,64",
    "head=32",
];

fn pcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcnet")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("{name}.ck"));
    let mut args = vec!["train".to_string(), "--out".into(), out.to_str().unwrap().into()];
    for kv in TINY.iter().chain(extra) {
        args.push("--set".into());
        args.push(kv.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let o = pcnet(&refs);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn gradcheck_passes_and_is_deterministic() {
    let a = pcnet(&["gradcheck", "--seed", "3"]);
    assert!(a.status.success(), "{}", stderr(&a));
    let text = stdout(&a);
    assert_eq!(text.lines().next(), Some("component,max_rel_error,worst_param,status"));
    assert_eq!(text.lines().count(), 12);
    assert!(text.lines().skip(1).all(|l| l.ends_with(",pass")));
    assert_eq!(stdout(&pcnet(&["gradcheck", "--seed", "3"])), text);
}

#[test]
fn gradcheck_names_corrupted_op() {
    let o = pcnet(&["gradcheck", "--inject-fault", "softmax"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("softmax"), "{err}");
    assert!(err.contains("pnl_cell"), "{err}");
    assert_eq!(pcnet(&["gradcheck", "--inject-fault", "nope"]).status.code(), Some(2));
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("x.ck");
    let ck = ck.to_str().unwrap();
    assert_eq!(pcnet(&["train", "--set", "bogus=1", "--out", ck]).status.code(), Some(2));
    assert_eq!(pcnet(&["train", "--variant", "pnl", "--out", ck]).status.code(), Some(2));
    assert_eq!(pcnet(&["train", "--config", "/nonexistent.cfg", "--out", ck]).status.code(), Some(2));
    assert_eq!(pcnet(&["eval", "--checkpoint", ck]).status.code(), Some(2));
    assert_eq!(pcnet(&["noise-sweep", "--checkpoint", ck]).status.code(), Some(2));
    fs::write(dir.path().join("junk.ck"), b"not a checkpoint").unwrap();
    let junk = dir.path().join("junk.ck");
    assert_eq!(pcnet(&["eval", "--checkpoint", junk.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = TempDir::new().unwrap();
    let ck = dir.path().join("d.ck");
    let mut args = vec!["train", "--variant", "pl", "--set", "lr=1e200", "--out", ck.to_str().unwrap()];
    for kv in TINY {
        args.extend(["--set", kv]);
    }
    let o = pcnet(&args);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!ck.exists());
}

#[test]
fn zero_epochs_writes_initial_checkpoint() {
    let dir = TempDir::new().unwrap();
    let ck = train(dir.path(), "zero", &["epochs=0"]);
    assert_eq!(fs::read_to_string(ck.with_extension("csv")).unwrap(), "epoch,train_loss,test_accuracy\n");
    let o = pcnet(&["eval", "--checkpoint", ck.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("split,accuracy,miou\ntest,"));
}

#[test]
fn training_is_reproducible_and_sweeps_are_consistent() {
    let dir = TempDir::new().unwrap();
    let a = train(dir.path(), "a", &["seed=5"]);
    let b = train(dir.path(), "b", &["seed=5"]);
    let csv = fs::read_to_string(a.with_extension("csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.with_extension("csv")).unwrap());
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let pl = train(dir.path(), "pl", &["variant=pl"]);
    let (a, pl) = (a.to_str().unwrap(), pl.to_str().unwrap());

    let eval = stdout(&pcnet(&["eval", "--checkpoint", a]));
    let clean: f64 = eval.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();

    let o = pcnet(&["noise-sweep", "--checkpoint", a, "--checkpoint", pl, "--ratios", "0,0.5", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let noise = stdout(&o);
    let lines: Vec<&str> = noise.lines().collect();
    assert_eq!(lines[0], "variant,ratio,seed,accuracy");
    assert_eq!(lines.len(), 1 + 2 * 2 * 2);
    assert_eq!(lines[1].split(',').next(), Some("pl+pnl+as"));
    assert!(lines.iter().any(|l| l.starts_with("pl,0.5,")));
    let at_zero: f64 = lines[1].rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(at_zero, clean);

    let o = pcnet(&["sparsity-sweep", "--checkpoint", a, "--counts", "64,16", "--seeds", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sparse = stdout(&o);
    assert_eq!(sparse.lines().next(), Some("variant,count,seed,accuracy"));
    let full: f64 = sparse.lines().nth(1).unwrap().rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(full, clean);
    assert_eq!(pcnet(&["sparsity-sweep", "--checkpoint", a, "--counts", "65"]).status.code(), Some(2));
}

#[test]
fn ablation_table_has_one_row_per_mode() {
    let dir = TempDir::new().unwrap();
    let mut cks = Vec::new();
    for (s, w) in [("fps", "group-feature"), ("fps", "average"), ("random", "group-feature"), ("random", "average")] {
        let name = format!("{s}-{w}");
        cks.push(train(dir.path(), &name, &[&format!("sampling={s}"), &format!("weighting={w}"), "epochs=0"]));
    }
    let mut args = vec!["as-ablation", "--seeds", "2"];
    for c in &cks {
        args.extend(["--checkpoint", c.to_str().unwrap()]);
    }
    let o = pcnet(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = stdout(&o);
    let modes: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(table.lines().next(), Some("mode,accuracy_mean,accuracy_std"));
    assert_eq!(modes, ["fps+group-feature", "fps+average", "random+group-feature", "random+average"]);
    assert_eq!(stdout(&pcnet(&args)), table);
}
