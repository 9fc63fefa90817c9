use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_deepmaxent");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, seed: &str) -> PathBuf {
    let d = dir.join(format!("data{seed}"));
    ok(&["synth", "--out", p(&d), "--seed", seed, "--grid-side", "10", "--species", "3", "--occurrences", "80"]);
    d
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for d in [&a, &b] {
        ok(&["synth", "--out", p(d), "--seed", "7"]);
    }
    for f in ["sites.csv", "occurrences.csv", "pa.csv", "truth.csv", "manifest.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_predict_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "3");
    let m = tmp.path().join("model");
    ok(&[
        "train", "--sites", p(&d.join("sites.csv")), "--occurrences", p(&d.join("occurrences.csv")),
        "--out", p(&m), "--loss", "deepmaxent", "--tgb", "--batch-size", "30", "--layers", "1",
        "--hidden-width", "8", "--epochs", "5",
    ]);
    let history = fs::read_to_string(m.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,loss,seconds\n"));
    assert_eq!(history.lines().count(), 6);
    let manifest = fs::read_to_string(m.join("manifest.txt")).unwrap();
    assert!(manifest.contains("tgb=true"));
    assert!(manifest.contains("batch_size=30"));
    assert!(manifest.contains("sha256"));

    let pr = tmp.path().join("pred");
    ok(&["predict", "--model", p(&m.join("model.txt")), "--sites", p(&d.join("sites.csv")), "--out", p(&pr), "--heatmap"]);
    let pred = fs::read_to_string(pr.join("predictions.csv")).unwrap();
    let mut lines = pred.lines();
    let mut header: Vec<&str> = lines.next().unwrap().split(',').collect();
    header.sort_unstable();
    assert_eq!(header, ["site_id", "sp1", "sp2", "sp3"]);
    let mut sums = [0.0; 3];
    for line in lines {
        for (s, v) in sums.iter_mut().zip(line.split(',').skip(1)) {
            *s += v.parse::<f64>().unwrap();
        }
    }
    for s in sums {
        assert!((s - 1.0).abs() < 1e-9);
    }
    let img = fs::read(pr.join("heatmaps").join("sp1.pgm")).unwrap();
    let header = b"P5\n10 10\n255\n";
    assert!(img.starts_with(header));
    assert_eq!(img.len(), header.len() + 100);
    assert!(img[header.len()..].contains(&255));
    assert!(img[header.len()..].contains(&0));

    let e = tmp.path().join("eval");
    let out = ok(&["eval", "--model", p(&m.join("model.txt")), "--sites", p(&d.join("sites.csv")), "--pa", p(&d.join("pa.csv")), "--out", p(&e)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("general average AUC"));
    let metrics = fs::read_to_string(e.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("species_id,group,region,auc,n_pos,n_neg\n"));
    let summary = fs::read_to_string(e.join("summary.csv")).unwrap();
    assert!(summary.starts_with("region,mean_auc\n"));
    assert!(summary.contains("general_avg,"));
}

#[test]
fn config_file_is_overridden_by_flags_and_manifest_replays() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "4");
    let cfg = tmp.path().join("run.cfg");
    fs::write(&cfg, "# small run\nepochs=3\nbatch_size=25\nlayers=1\nhidden_width=4\nseed=5\n").unwrap();
    let sites = d.join("sites.csv");
    let occ = d.join("occurrences.csv");
    let a = tmp.path().join("a");
    ok(&["train", "--sites", p(&sites), "--occurrences", p(&occ), "--out", p(&a), "--config", p(&cfg), "--epochs", "4"]);
    let manifest = fs::read_to_string(a.join("manifest.txt")).unwrap();
    assert!(manifest.contains("epochs=4"));
    assert!(manifest.contains("batch_size=25"));
    assert!(manifest.contains("seed=5"));

    let b = tmp.path().join("b");
    ok(&["train", "--sites", p(&sites), "--occurrences", p(&occ), "--out", p(&b), "--config", p(&a.join("manifest.txt"))]);
    assert_eq!(fs::read(a.join("model.txt")).unwrap(), fs::read(b.join("model.txt")).unwrap());
}

#[test]
fn cross_validation_command_writes_fold_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "5");
    let out_dir = tmp.path().join("cv");
    let out = ok(&[
        "cv", "--sites", p(&d.join("sites.csv")), "--occurrences", p(&d.join("occurrences.csv")),
        "--out", p(&out_dir), "--folds", "4", "--grid-side", "4", "--epochs", "2", "--layers", "1",
        "--hidden-width", "4", "--batch-size", "20",
    ]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("mean cross-validated AUC"));
    let table = fs::read_to_string(out_dir.join("cv.csv")).unwrap();
    assert!(table.starts_with("fold,n_train,n_valid,species_scored,auc\n"));
    assert_eq!(table.lines().count(), 1 + 4 + 1);
    assert!(table.lines().last().unwrap().starts_with("mean,"));
}

#[test]
fn verify_quick_exits_zero() {
    let out = ok(&["verify", "--quick"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 17);
    assert!(!text.contains("FAIL"));
}

#[test]
fn failures_map_to_exit_codes_without_partial_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = synth(tmp.path(), "6");
    let sites = d.join("sites.csv");
    let occ = d.join("occurrences.csv");
    let out = tmp.path().join("out");

    // usage
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train", "--sites", p(&sites), "--occurrences", p(&occ), "--out", p(&out), "--loss", "nope"]).status.code(), Some(1));
    let bad_cfg = tmp.path().join("bad.cfg");
    fs::write(&bad_cfg, "epochs\n").unwrap();
    assert_eq!(run(&["train", "--sites", p(&sites), "--occurrences", p(&occ), "--out", p(&out), "--config", p(&bad_cfg)]).status.code(), Some(1));

    // data
    let missing = tmp.path().join("missing.csv");
    assert_eq!(run(&["train", "--sites", p(&missing), "--occurrences", p(&occ), "--out", p(&out)]).status.code(), Some(2));
    let broken = tmp.path().join("broken.csv");
    fs::write(&broken, "site_id,species_id,count\ns00000,sp1,-3\n").unwrap();
    let res = run(&["train", "--sites", p(&sites), "--occurrences", p(&broken), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("broken.csv:2"));

    // numerical
    let res = run(&[
        "train", "--sites", p(&sites), "--occurrences", p(&occ), "--out", p(&out),
        "--learning-rate", "1e300", "--epochs", "3", "--layers", "1", "--hidden-width", "4",
    ]);
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(String::from_utf8_lossy(&res.stderr).contains("epoch"));

    assert!(!out.exists() || fs::read_dir(&out).unwrap().next().is_none());
}
