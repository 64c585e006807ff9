//! End-to-end runs of the `gfsvi` binary on small configs.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn gfsvi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gfsvi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, value: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn sin_config() -> Value {
    json!({
        "schema_version": 1,
        "dataset": { "source": "sin", "n": 40, "noise": 0.1 },
        "method": "gfsvi",
        "architecture": { "hidden": [8] },
        "prior": { "gp": { "family": "rbf", "amplitude": 1.0, "lengthscale": 0.5, "noise": 0.1 } },
        "measurement": { "count": 10, "lower": [-2.0], "upper": [2.0] },
        "training": { "batch_size": 20, "steps": 100, "learning_rate": 0.01, "check_every": 25 },
        "seed": 3
    })
}

fn moons_config() -> Value {
    json!({
        "schema_version": 1,
        "dataset": { "source": "two_moons", "n": 40, "noise": 0.1 },
        "method": "gfsvi",
        "architecture": { "hidden": [8] },
        "prior": { "gp": { "family": "rbf", "amplitude": 2.0, "lengthscale": 0.5 } },
        "likelihood": { "kind": "categorical", "mc_samples": 2 },
        "measurement": { "count": 10 },
        "training": { "batch_size": 20, "steps": 50, "learning_rate": 0.01 },
        "seed": 1
    })
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &TempDir, config: &Value, out: &str) -> PathBuf {
    let cfg = write_config(dir.path(), &format!("{out}.json"), config);
    let out = dir.path().join(out);
    let o = gfsvi(&["train", "--config", arg(&cfg), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_header(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .next()
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect()
}

#[test]
fn missing_prior_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg.as_object_mut().unwrap().remove("prior");
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = gfsvi(&[
        "train",
        "--config",
        arg(&path),
        "--out",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prior"));
}

#[test]
fn unknown_fields_and_bad_usage_are_config_errors() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg["trainng"] = json!({});
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = gfsvi(&[
        "train",
        "--config",
        arg(&path),
        "--out",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(gfsvi(&["train"]).status.code(), Some(2));
    assert_eq!(
        gfsvi(&["eval", "--config", arg(&path), "--protocol", "bogus"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn missing_dataset_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg["dataset"] = json!({ "source": "csv", "path": "absent.csv", "target": "y" });
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = gfsvi(&[
        "train",
        "--config",
        arg(&path),
        "--out",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.csv"));
}

#[test]
fn train_writes_artifacts_and_reruns_are_identical() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    for f in [
        "checkpoint.json",
        "trace.csv",
        "report.json",
        "config.resolved.json",
    ] {
        assert!(a.join(f).is_file(), "{f} missing");
    }
    assert_eq!(
        csv_header(&a.join("trace.csv")),
        ["step", "train_loss", "val_loss"]
    );
    assert_eq!(
        fs::read_to_string(a.join("trace.csv"))
            .unwrap()
            .lines()
            .count(),
        1 + 4
    );
    let report = read_json(&a.join("report.json"));
    assert_eq!(report["folds"].as_array().unwrap().len(), 1);
    assert!(report["aggregate"]["test_expected_ll"]["mean"].is_f64());
    assert!(report["aggregate"]["test_expected_ll"]["se"].is_null());

    let b = train(&dir, &sin_config(), "b");
    for f in ["checkpoint.json", "trace.csv", "report.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn resolved_config_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let resolved = a.join("config.resolved.json");
    let b = dir.path().join("b");
    let o = gfsvi(&["train", "--config", arg(&resolved), "--out", arg(&b)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("checkpoint.json")).unwrap(),
        fs::read(b.join("checkpoint.json")).unwrap()
    );
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let cfg = write_config(dir.path(), "s.json", &sin_config());
    let b = dir.path().join("b");
    assert!(gfsvi(&[
        "train",
        "--config",
        arg(&cfg),
        "--out",
        arg(&b),
        "--seed",
        "99"
    ])
    .status
    .success());
    assert_ne!(
        fs::read(a.join("trace.csv")).unwrap(),
        fs::read(b.join("trace.csv")).unwrap()
    );
    assert_eq!(read_json(&b.join("config.resolved.json"))["seed"], 99);
}

#[test]
fn posterior_grid_without_samples_has_summary_columns_only() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let out = dir.path().join("g");
    let ck = a.join("checkpoint.json");
    let o = gfsvi(&[
        "posterior-grid",
        "--checkpoint",
        arg(&ck),
        "--grid",
        "-2:2:7",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let path = out.join("grids/posterior.csv");
    assert_eq!(csv_header(&path), ["x1", "mean", "std"]);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 8);

    let o = gfsvi(&[
        "posterior-grid",
        "--checkpoint",
        arg(&ck),
        "--grid",
        "-2:2:7",
        "--samples",
        "3",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success());
    assert_eq!(
        csv_header(&path),
        ["x1", "mean", "std", "sample_1", "sample_2", "sample_3"]
    );
}

#[test]
fn two_dimensional_grid_is_row_major() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &moons_config(), "m");
    let out = dir.path().join("g");
    let ck = a.join("checkpoint.json");
    let o = gfsvi(&[
        "posterior-grid",
        "--checkpoint",
        arg(&ck),
        "--grid",
        "-1:1:3",
        "--grid",
        "0:2:2",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("grids/posterior.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        header,
        ["x1", "x2", "mean", "std", "prob_0", "prob_1", "entropy"]
    );
    let coords: Vec<(f64, f64)> = lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
            assert!((v[4] + v[5] - 1.0).abs() < 1e-12);
            (v[0], v[1])
        })
        .collect();
    assert_eq!(
        coords,
        [
            (-1.0, 0.0),
            (-1.0, 2.0),
            (0.0, 0.0),
            (0.0, 2.0),
            (1.0, 0.0),
            (1.0, 2.0)
        ]
    );
}

#[test]
fn grid_dimension_must_match_the_model() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let ck = a.join("checkpoint.json");
    let o = gfsvi(&[
        "posterior-grid",
        "--checkpoint",
        arg(&ck),
        "--grid",
        "0:1:3",
        "--grid",
        "0:1:3",
        "--out",
        arg(&a),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let o = gfsvi(&[
        "posterior-grid",
        "--checkpoint",
        arg(&ck),
        "--grid",
        "0:1",
        "--out",
        arg(&a),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn w2_without_reference_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let cfg = a.join("config.resolved.json");
    let ck = a.join("checkpoint.json");
    let out = dir.path().join("e");
    let o = gfsvi(&[
        "eval",
        "--config",
        arg(&cfg),
        "--checkpoint",
        arg(&ck),
        "--protocol",
        "w2",
        "--out",
        arg(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("reference"));
}

#[test]
fn eval_protocols_report_their_metrics() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &sin_config(), "a");
    let cfg = a.join("config.resolved.json");
    let ck = a.join("checkpoint.json");
    let out = dir.path().join("e");
    let metrics = |protocol: &str, extra: &[&str]| {
        let mut args = vec![
            "eval",
            "--config",
            arg(&cfg),
            "--checkpoint",
            arg(&ck),
            "--protocol",
            protocol,
        ];
        args.extend_from_slice(&["--out", arg(&out)]);
        args.extend_from_slice(extra);
        let o = gfsvi(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        read_json(&out.join("report.json"))["folds"][0]["metrics"].clone()
    };
    let ood = metrics("ood", &[]);
    let acc = ood["ood_accuracy"].as_f64().unwrap();
    assert!((0.5..=1.0).contains(&acc));
    assert!(ood["ood_threshold"].is_f64());

    let mut gp = sin_config();
    gp["method"] = json!("gp");
    let gp_path = write_config(dir.path(), "gp.json", &gp);
    let w2 = metrics("w2", &["--reference", arg(&gp_path)]);
    assert!(w2["w2"].as_f64().unwrap() >= 0.0);

    let reg = metrics("regression", &[]);
    for key in ["test_expected_ll", "mse", "noise_std"] {
        assert!(reg[key].is_f64(), "{key}");
    }
}

#[test]
fn exact_gp_evaluates_without_checkpoint() {
    let dir = TempDir::new().unwrap();
    let mut gp = sin_config();
    gp["method"] = json!("gp");
    let cfg = write_config(dir.path(), "gp.json", &gp);
    let out = dir.path().join("e");
    let o = gfsvi(&[
        "eval",
        "--config",
        arg(&cfg),
        "--protocol",
        "w2",
        "--reference",
        arg(&cfg),
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let w2 = read_json(&out.join("report.json"))["folds"][0]["metrics"]["w2"]
        .as_f64()
        .unwrap();
    assert!(w2 < 1e-12, "{w2}");
}

#[test]
fn classification_reports_accuracy_and_calibration() {
    let dir = TempDir::new().unwrap();
    let a = train(&dir, &moons_config(), "m");
    let m = &read_json(&a.join("report.json"))["folds"][0]["metrics"];
    for key in ["accuracy", "ece", "mean_entropy", "test_expected_ll"] {
        assert!(m[key].is_f64(), "{key}");
    }
}

#[test]
fn gp_with_classification_data_is_rejected() {
    let dir = TempDir::new().unwrap();
    let mut cfg = moons_config();
    cfg["method"] = json!("gp");
    let path = write_config(dir.path(), "c.json", &cfg);
    assert_eq!(
        gfsvi(&[
            "train",
            "--config",
            arg(&path),
            "--out",
            arg(&dir.path().join("o"))
        ])
        .status
        .code(),
        Some(2)
    );
}

#[test]
fn cv_reports_folds_and_standard_errors() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg["training"]["steps"] = json!(50);
    let path = write_config(dir.path(), "cv.json", &cfg);
    let out = dir.path().join("cv");
    let o = gfsvi(&[
        "cv",
        "--config",
        arg(&path),
        "--folds",
        "5",
        "--jobs",
        "2",
        "--out",
        arg(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = read_json(&out.join("report.json"));
    let folds = report["folds"].as_array().unwrap();
    assert_eq!(folds.len(), 5);
    let vals: Vec<f64> = folds
        .iter()
        .map(|f| f["metrics"]["mse"].as_f64().unwrap())
        .collect();
    let mean = vals.iter().sum::<f64>() / 5.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
    let agg = &report["aggregate"]["mse"];
    assert!((agg["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((agg["se"].as_f64().unwrap() - sd / 5f64.sqrt()).abs() < 1e-12);
    for k in 0..5 {
        assert!(out
            .join(format!("folds/fold_{k}/checkpoint.json"))
            .is_file());
    }
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 5 * 3 + 3 * 2);
    assert!(metrics.lines().any(|l| l.contains(",se,mse,")));

    let serial = dir.path().join("cv1");
    assert!(gfsvi(&[
        "cv",
        "--config",
        arg(&path),
        "--folds",
        "5",
        "--out",
        arg(&serial)
    ])
    .status
    .success());
    assert_eq!(
        fs::read(out.join("report.json")).unwrap(),
        fs::read(serial.join("report.json")).unwrap()
    );
}

#[test]
fn probe_covers_every_size_and_gamma() {
    let dir = TempDir::new().unwrap();
    let cfg = json!({
        "schema_version": 1,
        "prior": { "family": "rbf", "amplitude": 1.0, "lengthscale": 0.25 },
        "rank": 3,
        "ms": [10, 40],
        "gammas": [1e-6, 1e-3, 1e-1],
        "seed": 2
    });
    let path = write_config(dir.path(), "p.json", &cfg);
    let out = dir.path().join("p");
    let o = gfsvi(&["probe-kl", "--config", arg(&path), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(out.join("probe.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 2 * 3);
    for (i, gamma) in [1e-6, 1e-3, 1e-1].iter().enumerate() {
        for (j, m) in [10.0, 40.0].iter().enumerate() {
            let r = &rows[i * 2 + j];
            assert_eq!((r[0], r[1]), (*m, *gamma));
            assert!(r[2].is_finite() && r[3].is_finite() && r[3] >= 0.0);
        }
    }
    // The naive column does not depend on γ.
    assert_eq!(rows[0][2], rows[2][2]);
}

#[test]
fn fit_prior_writes_a_loadable_prior() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg["fit_prior"] = json!({ "batch_size": 20, "steps": 30, "learning_rate": 0.01 });
    let path = write_config(dir.path(), "f.json", &cfg);
    let out = dir.path().join("f");
    let o = gfsvi(&["fit-prior", "--config", arg(&path), "--out", arg(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let prior = read_json(&out.join("prior.json"));
    assert_eq!(prior["family"], "rbf");
    assert!(prior["lengthscale"].as_f64().unwrap() > 0.0);

    cfg["prior"] = json!({ "gp": prior });
    cfg.as_object_mut().unwrap().remove("fit_prior");
    let reuse = write_config(dir.path(), "r.json", &cfg);
    assert!(gfsvi(&[
        "train",
        "--config",
        arg(&reuse),
        "--out",
        arg(&dir.path().join("r"))
    ])
    .status
    .success());
}

#[test]
fn overflowing_training_exits_with_numerical_code() {
    let dir = TempDir::new().unwrap();
    let mut cfg = sin_config();
    cfg["training"]["learning_rate"] = json!(1e200);
    let path = write_config(dir.path(), "c.json", &cfg);
    let o = gfsvi(&[
        "train",
        "--config",
        arg(&path),
        "--out",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(String::from_utf8_lossy(&o.stderr).contains("non-finite"));
}

#[test]
fn mfvi_and_tfsvi_train_from_a_weight_prior() {
    let dir = TempDir::new().unwrap();
    for method in ["mfvi", "tfsvi"] {
        let mut cfg = sin_config();
        cfg["method"] = json!(method);
        cfg["prior"] = json!({ "weight": { "scale": 0.75 } });
        let a = train(&dir, &cfg, method);
        assert!(a.join("checkpoint.json").is_file());
        let ck = read_json(&a.join("checkpoint.json"));
        assert_eq!(ck["method"], method);
    }
    let mut cfg = sin_config();
    cfg["method"] = json!("mfvi");
    let path = write_config(dir.path(), "bad.json", &cfg);
    let o = gfsvi(&[
        "train",
        "--config",
        arg(&path),
        "--out",
        arg(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prior"));
}

#[test]
fn tabular_csv_trains_with_standardization() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("t.csv");
    let mut text = String::from("a,kind,y\n");
    for i in 0..30 {
        let x = i as f64 / 10.0;
        text.push_str(&format!("{x},{},{}\n", ["p", "q"][i % 2], 100.0 + 5.0 * x));
    }
    fs::write(&data, text).unwrap();
    let mut cfg = sin_config();
    cfg["dataset"] =
        json!({ "source": "csv", "path": "t.csv", "target": "y", "categorical": ["kind"] });
    cfg.as_object_mut().unwrap().remove("measurement");
    let a = train(&dir, &cfg, "tab");
    let m = &read_json(&a.join("report.json"))["folds"][0]["metrics"];
    assert!(m["mse"].as_f64().unwrap().is_finite());
    let resolved = read_json(&a.join("config.resolved.json"));
    assert!(Path::new(resolved["dataset"]["path"].as_str().unwrap()).is_absolute());
}
