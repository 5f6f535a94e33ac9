use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &[&str] = &[
    "--epochs", "1", "--set", "d_model=16", "--set", "d_ff=32", "--set", "d_hidden=32", "--set", "n_layers=1", "--set", "n_heads=2",
];

fn pmad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmad")).args(args).output().expect("spawn pmad")
}

fn ok(args: &[&str]) -> Output {
    let out = pmad(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args.iter().copied().chain(SMALL.iter().copied()).collect()
}

fn corpus(tmp: &TempDir) -> PathBuf {
    let data = tmp.path().join("data");
    ok(&["synth", "--seed", "42", "--out", s(&data)]);
    data
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> =
        fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect();
    v.sort();
    v
}

fn rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn synth_is_complete_and_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = corpus(&tmp);
    let b = tmp.path().join("again");
    ok(&["synth", "--seed", "42", "--out", s(&b)]);
    let files = csv_files(&a);
    assert_eq!(files.len(), 12);
    for f in &files {
        assert_eq!(fs::read(f).unwrap(), fs::read(b.join(f.file_name().unwrap())).unwrap());
    }
    assert!(a.join("config.txt").is_file());
}

#[test]
fn unwritable_output_fails_with_message() {
    let tmp = TempDir::new().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = pmad(&["synth", "--out", s(&blocker.join("sub"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn bad_configuration_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("run.txt");
    fs::write(&cfg, "epochs = 1\nlearning_rate = 3\n").unwrap();
    let out = pmad(&["train", "--config", s(&cfg), "--data", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(1));
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("row 2") && msg.contains("learning_rate"), "{msg}");
    assert_eq!(pmad(&["train", "--bogus-flag"]).status.code(), Some(1));
    assert_eq!(pmad(&["train", "--set", "epochs=0", "--data", "x", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn train_then_eval_multi_domain() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let run = tmp.path().join("run");
    let cfg = tmp.path().join("base.txt");
    fs::write(&cfg, "seed = 5\nmemory_strategy = frozen # overridden below\n").unwrap();
    ok(&with_small(&["train", "--config", s(&cfg), "--strategy", "data_driven", "--data", s(&data), "--out", s(&run)]));
    let resolved = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(resolved.contains("seed = 5") && resolved.contains("memory_strategy = data_driven"), "{resolved}");
    assert!(run.join("model.pmad").is_file());
    let log = rows(&run.join("model.train_log.csv"));
    assert!(!log.is_empty());

    let eval = tmp.path().join("eval");
    ok(&["eval", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]);
    let report = rows(&eval.join("report.csv"));
    let count = |level: &str| report.iter().filter(|r| &r[0] == level).count();
    assert_eq!((count("series"), count("domain"), count("corpus")), (12, 3, 1));
    for r in rows(&eval.join("heatmap.csv")) {
        let sum: f64 = (1..r.len() - 1).map(|i| r[i].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 1e-5 || &r[r.len() - 1] == "1", "{r:?}");
    }
    assert!(!rows(&eval.join("scores.csv")).is_empty());

    // the resolved config reproduces the run
    let rerun = tmp.path().join("rerun");
    ok(&["train", "--config", s(&run.join("config.txt")), "--out", s(&rerun)]);
    assert_eq!(fs::read(run.join("model.pmad")).unwrap(), fs::read(rerun.join("model.pmad")).unwrap());

    let mismatch = pmad(&["eval", "--checkpoint", s(&run.join("model.pmad")), "--data", s(&data), "--out", s(&eval), "--set", "d_model=32"]);
    assert_eq!(mismatch.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("d_model"));
}

#[test]
fn per_dataset_and_few_shot() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let run = tmp.path().join("pd");
    ok(&with_small(&["train", "--mode", "per_dataset", "--data", s(&data), "--out", s(&run)]));
    let n = fs::read_dir(&run).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pmad")).count();
    assert_eq!(n, 12);
    let eval = tmp.path().join("pd_eval");
    ok(&["eval", "--checkpoint", s(&run), "--data", s(&data), "--out", s(&eval)]);
    assert_eq!(rows(&eval.join("report.csv")).len(), 16);

    let few = tmp.path().join("few");
    ok(&with_small(&["train", "--ratio", "0.1", "--data", s(&data), "--out", s(&few)]));
    for r in rows(&few.join("train_sizes.csv")) {
        assert_eq!((&r[1], &r[2]), ("2048", "205"));
    }
}

#[test]
fn grid_commands_shape_their_tables() {
    let tmp = TempDir::new().unwrap();
    let data = corpus(&tmp);
    let out = tmp.path().join("abl");
    ok(&with_small(&["ablate", "--grid", "scratch:frozen,scratch:own_domain,scratch:data_driven", "--data", s(&data), "--out", s(&out)]));
    let table = rows(&out.join("ablation.csv"));
    assert_eq!(table.iter().map(|r| r[1].to_string()).collect::<Vec<_>>(), ["frozen", "own_domain", "data_driven"]);

    let sweep = tmp.path().join("sweep");
    ok(&with_small(&["sweep", "--ratios", "0.1,0.3", "--k-values", "1,2", "--data", s(&data), "--out", s(&sweep)]));
    let table = rows(&sweep.join("sweep.csv"));
    assert_eq!(table.len(), 4);
    let ratios: Vec<f64> = table.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(ratios.windows(2).all(|w| w[0] <= w[1]));
    let too_big = pmad(&with_small(&["sweep", "--ratios", "0.5", "--k-values", "4", "--data", s(&data), "--out", s(&sweep)]));
    assert_eq!(too_big.status.code(), Some(1));

    let loo = tmp.path().join("loo");
    ok(&with_small(&["loo", "--compare-baseline", "--data", s(&data), "--out", s(&loo)]));
    let table = rows(&loo.join("loo.csv"));
    assert_eq!(table.len(), 3 * 2 + 2);
    assert_eq!(table.iter().filter(|r| &r[0] == "mean").count(), 2);
}
