use std::path::Path;
use std::process::{Command, Output};

fn sira(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sira"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = sira(dir, args);
    assert!(
        out.status.success(),
        "sira {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

/// Synthetic world plus train/test dataset bundles.
fn world(dir: &Path, samples: usize) {
    ok(dir, &["synth", "--out", "w", "--seed", "3", "--set", &format!("synth.samples={samples}")]);
    ok(dir, &["ingest", "--samples", "w/train.csv", "--atmosphere", "w/atmosphere.csv", "--out", "train.csv"]);
    ok(dir, &["ingest", "--samples", "w/test.csv", "--atmosphere", "w/atmosphere.csv", "--out", "test.csv"]);
}

#[test]
fn version_names_model_format() {
    let out = sira(Path::new("."), &["--version"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("model format 1"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(sira(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let out = sira(dir.path(), &["synth", "--out", "w", "--set", "gb.trees=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gb.trees"));
    std::fs::write(dir.path().join("run.cfg"), "# comment\nseed = 1\nbogus = 2\n").unwrap();
    let out = sira(dir.path(), &["--config", "run.cfg", "synth", "--out", "w"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.cfg:3"));
}

#[test]
fn missing_input_exits_1_and_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = sira(dir.path(), &["train", "gb", "--data", "absent.csv", "--out", "m.model"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn train_gb_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    world(d, 120);
    let args = ["--set", "gb.n_trees=10", "--set", "gb.final_iters=50", "--seed", "5"];
    for out in ["a.model", "b.model"] {
        let mut a = vec!["train", "gb", "--data", "train.csv", "--out", out, "--isotope", "d18O"];
        a.extend(args);
        ok(d, &a);
    }
    assert_eq!(read(d.join("a.model")), read(d.join("b.model")));
    ok(d, &["predict", "--model", "a.model", "--data", "test.csv", "--out", "p.csv"]);
    assert!(read(d.join("p.csv")).starts_with("lat,lon,mean_d18O,var_d18O\n"));
}

#[test]
fn pipeline_verify_isoscape_and_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    world(d, 300);
    ok(d, &["train", "mtg", "--data", "train.csv", "--out", "mtg.model", "--set", "mtg.tasks=d18O,d2H"]);

    // A claim whose measured vector is the model's own prediction.
    ok(d, &["predict", "--model", "mtg.model", "--data", "test.csv", "--out", "pred.csv"]);
    let pred = read(d.join("pred.csv"));
    let row: Vec<&str> = pred.lines().nth(1).unwrap().split(',').collect();
    let claims = format!(
        "claim_id,lat,lon,d18O,d13C,d2H,d34S\nself,{},{},{},,{},\n",
        row[0], row[1], row[2], row[4]
    );
    std::fs::write(d.join("claims.csv"), claims).unwrap();
    ok(d, &["verify", "--model", "mtg.model", "--claims", "claims.csv", "--atmosphere", "w/atmosphere.csv", "--out", "v.csv"]);
    let report = read(d.join("v.csv"));
    let line = report.lines().nth(1).unwrap();
    assert!(line.starts_with("self,"), "{line}");
    assert_eq!(line.split(',').nth(4), Some("consistent"));

    let iso = [
        "isoscape", "--model", "mtg.model", "--atmosphere", "w/atmosphere.csv", "--bounds", "40,45,10,20",
        "--isotope", "d2H", "--out-prefix",
    ];
    for p in ["r1", "r2"] {
        let mut a = iso.to_vec();
        a.push(p);
        ok(d, &a);
    }
    assert_eq!(read(d.join("r1_mean.asc")), read(d.join("r2_mean.asc")));
    assert_eq!(read(d.join("r1_std.asc")), read(d.join("r2_std.asc")));
    assert!(read(d.join("r1_mean.meta")).contains("task d2H"));

    ok(d, &["importance", "--model", "mtg.model", "--out-dir", "imp"]);
    assert!(read(d.join("imp/importance.csv")).starts_with("task,feature,lengthscale,importance,rank\n"));
    assert_eq!(read(d.join("imp/task_dependency.csv")).lines().count(), 5);

    ok(
        d,
        &[
            "experiment", "--model", "mtg.model", "--atmosphere", "w/atmosphere.csv", "--test", "w/test.csv",
            "--out", "curve.csv", "--set", "experiment.distances=500,2500", "--set", "experiment.trials=300",
        ],
    );
    let curve = read(d.join("curve.csv"));
    let acc: Vec<f64> = curve
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(acc[1] > acc[0], "accuracy did not rise with distance:\n{curve}");
}

#[test]
fn eval_single_variant_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    world(d, 120);
    ok(
        d,
        &[
            "eval", "--data", "train.csv", "--out-dir", "ev", "--model", "boosting", "--set", "eval.folds=3",
            "--set", "gb.n_trees=10", "--set", "eval.isotopes=d18O",
        ],
    );
    let csv = read(d.join("ev/metrics.csv"));
    assert!(csv.starts_with("model,isotope,r2,rmse,n_test,folds,seed,fold_hash\n"));
    assert_eq!(csv.lines().count(), 2);
    let out = sira(d, &["eval", "--data", "train.csv", "--out-dir", "ev", "--model", "forest"]);
    assert_eq!(out.status.code(), Some(2));
}
