mod common;

use std::fs;
use std::path::Path;

use common::*;

fn os(p: &Path) -> &std::ffi::OsStr {
    p.as_os_str()
}

fn train(config: &Path, manifest: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train".as_ref(),
        "--config".as_ref(),
        os(config),
        "--manifest".as_ref(),
        os(manifest),
        "--out".as_ref(),
        os(out),
    ];
    args.extend(extra.iter().map(std::ffi::OsStr::new));
    medconv_ok(args)
}

#[test]
fn gen_data_counts_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("phantoms.json");
    write(&cfg, SMALL_PHANTOMS);
    let gen = |out: &str| {
        medconv_ok([
            "gen-data".as_ref(),
            "--config".as_ref(),
            os(&cfg),
            "--out".as_ref(),
            os(&dir.path().join(out)),
            "--n".as_ref(),
            "200".as_ref(),
        ])
    };
    let stdout = gen("a");
    assert!(stdout.contains("normal: 120"), "{stdout}");
    assert!(stdout.contains("osteopenia: 50"), "{stdout}");
    assert!(stdout.contains("osteoporosis: 30"), "{stdout}");
    gen("b");
    let read = |d: &str| fs::read(dir.path().join(d).join("manifest.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let first = |d: &str| fs::read(dir.path().join(d).join("volumes/case_0000.mcvl")).unwrap();
    assert_eq!(first("a"), first("b"));
}

#[test]
fn missing_config_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    for cmd in ["gen-data", "train"] {
        let out = medconv([cmd.as_ref(), "--config".as_ref(), os(&missing), "--out".as_ref(), os(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{cmd}: {}", stderr(&out));
        assert!(stderr(&out).contains("nope.json"), "{cmd}: {}", stderr(&out));
    }
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.json");
    write(&cfg, SMALL_TRAIN);
    let missing_manifest = dir.path().join("absent/manifest.csv");
    let out = medconv([
        "train".as_ref(),
        "--config".as_ref(),
        os(&cfg),
        "--manifest".as_ref(),
        os(&missing_manifest),
        "--out".as_ref(),
        os(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));

    let out = medconv(["train".as_ref(), "--config".as_ref(), os(&cfg), "--batch-size".as_ref(), "0".as_ref()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("batch_size"));

    let unknown = dir.path().join("typo.json");
    write(&unknown, r#"{"epoch": 3}"#);
    let out = medconv(["train".as_ref(), "--config".as_ref(), os(&unknown)]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn diverging_training_exits_with_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 60);
    let cfg = dir.path().join("hot.json");
    write(&cfg, &SMALL_TRAIN.replace(r#""lr": 0.01"#, r#""lr": 1e300"#));
    let out = medconv([
        "train".as_ref(),
        "--config".as_ref(),
        os(&cfg),
        "--manifest".as_ref(),
        os(&manifest),
        "--out".as_ref(),
        os(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let err = stderr(&out);
    assert!(err.contains("epoch") && err.contains("batch") && err.contains("lr"), "{err}");
}

#[test]
fn balce_rejects_a_class_missing_from_train() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 60);
    let text = fs::read_to_string(&manifest).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !(l.contains(",osteoporosis,") && l.ends_with(",train"))).collect();
    let pruned = manifest.with_file_name("pruned.csv");
    fs::write(&pruned, kept.join("\n") + "\n").unwrap();
    let cfg = dir.path().join("train.json");
    write(&cfg, SMALL_TRAIN);
    let out = medconv([
        "train".as_ref(),
        "--config".as_ref(),
        os(&cfg),
        "--manifest".as_ref(),
        os(&pruned),
        "--out".as_ref(),
        os(&dir.path().join("r")),
        "--loss".as_ref(),
        "balce".as_ref(),
    ]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("loss weights"), "{}", stderr(&out));
}

#[test]
fn pipeline_artifacts_eval_sweep_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let manifest = small_dataset(d, 90);
    let cfg = d.join("train.json");
    write(&cfg, SMALL_TRAIN);
    let run_a = d.join("ce");
    let stdout = train(&cfg, &manifest, &run_a, &[]);
    assert!(stdout.starts_with("medconv-custom ["), "{stdout}");
    for f in ["checkpoint.mckp", "train_log.csv", "metrics.csv", "metrics.md", "logits_test.csv", "run.json"] {
        assert!(run_a.join(f).exists(), "missing {f}");
    }
    assert!(!run_a.join("run.lock").exists());

    // Every artifact carries the same hash; cached logits cover the test split.
    let (hash, _) = read_csv(&run_a.join("metrics.csv"));
    let (log_hash, log) = read_csv(&run_a.join("train_log.csv"));
    let (logit_hash, logits) = read_csv(&run_a.join("logits_test.csv"));
    assert_eq!((&log_hash, &logit_hash), (&hash, &hash));
    assert_eq!(log.len(), 2);
    let test_rows = fs::read_to_string(&manifest).unwrap().lines().filter(|l| l.ends_with(",test")).count();
    assert_eq!(logits.len(), test_rows);

    // Identity calibration equals no calibration; the cache is reused.
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--run", run_a.to_str().unwrap()];
        args.extend_from_slice(extra);
        medconv_ok(args)
    };
    let calibrated = eval(&["--tau1", "1", "--tau2", "1"]);
    assert!(calibrated.contains("(cached logits)"), "{calibrated}");
    eval(&["--no-calibration"]);
    let body = |name: &str| {
        let text = fs::read_to_string(run_a.join(name)).unwrap();
        text.split_once('\n').unwrap().1.to_string()
    };
    assert_eq!(body("eval_test_tau1-1_tau2-1.csv"), body("eval_test_uncalibrated.csv"));
    assert_eq!(body("eval_test_tau1-1_tau2-1.csv"), body("metrics.csv"));

    // A fresh model pass reproduces the cached numbers.
    let fresh = eval(&["--manifest", manifest.to_str().unwrap(), "--tau1", "1", "--tau2", "1"]);
    assert!(!fresh.contains("(cached logits)"));
    assert_eq!(body("eval_test_tau1-1_tau2-1.csv"), body("metrics.csv"));

    let (_, rows) = read_csv(&run_a.join("metrics.csv"));
    let acc: f64 = field(&rows[0], "accuracy").parse().unwrap();
    let spec: f64 = field(&rows[0], "specificity").parse().unwrap();
    assert!((spec - (1.0 + acc) / 2.0).abs() < 1e-12);

    // Mismatched model config is named field by field.
    let other = d.join("wide.json");
    write(&other, &SMALL_TRAIN.replace(r#""stem_channels": 2"#, r#""stem_channels": 4"#));
    let out = medconv(["eval", "--run", run_a.to_str().unwrap(), "--config", other.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("stem_channels"), "{}", stderr(&out));

    // Sweeps are deterministic and a single point matches eval.
    let sweep = |mode: &str, grid: &str, out: &str| {
        medconv_ok([
            "sweep",
            "--run",
            run_a.to_str().unwrap(),
            "--mode",
            mode,
            "--grid",
            grid,
            "--out",
            d.join(out).to_str().unwrap(),
        ]);
    };
    sweep("tied", "0.25:2:0.25", "s1");
    sweep("tied", "0.25:2:0.25", "s2");
    let tied = |o: &str| fs::read(d.join(o).join("sweep_test_tied.csv")).unwrap();
    assert_eq!(tied("s1"), tied("s2"));
    let (_, tied_rows) = read_csv(&d.join("s1/sweep_test_tied.csv"));
    assert_eq!(tied_rows.len(), 8);
    sweep("fixed-tau1", "0.5", "s3");
    eval(&["--tau1", "1", "--tau2", "0.5"]);
    let (_, point) = read_csv(&d.join("s3/sweep_test_fixed_tau1.csv"));
    let (_, ev) = read_csv(&run_a.join("eval_test_tau1-1_tau2-0p5.csv"));
    for (s, e) in [("accuracy", "accuracy"), ("sensitivity", "sensitivity"), ("f1", "f1"), ("roc_auc", "roc_auc")] {
        assert_eq!(field(&point[0], s), field(&ev[0], e), "{s}");
    }
    let out = medconv(["sweep", "--run", run_a.to_str().unwrap(), "--grid", ","]);
    assert_eq!(out.status.code(), Some(2));

    // Same config and seed: identical metrics. Different loss: a second row.
    let run_a2 = d.join("ce-again");
    train(&cfg, &manifest, &run_a2, &[]);
    assert_eq!(fs::read(run_a.join("metrics.csv")).unwrap(), fs::read(run_a2.join("metrics.csv")).unwrap());
    let run_b = d.join("balce");
    train(&cfg, &manifest, &run_b, &["--loss", "balce", "--oversample"]);

    let broken = d.join("broken");
    fs::create_dir(&broken).unwrap();
    let report_dir = d.join("report");
    let out = medconv([
        "report",
        run_a.to_str().unwrap(),
        run_a2.to_str().unwrap(),
        run_b.to_str().unwrap(),
        broken.to_str().unwrap(),
        "--out",
        report_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stderr(&out).contains("warning: skipping"), "{}", stderr(&out));
    let table = fs::read_to_string(report_dir.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3, "{table}");
    assert!(lines[0].ends_with("delta_accuracy"));
    assert!(lines[1].starts_with("medconv-custom,"));
    assert!(lines[2].starts_with("medconv-custom+balce+oversample,"));
    assert!(lines[1].ends_with(",0"));
}

#[test]
fn busy_run_directory_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_dataset(dir.path(), 60);
    let cfg = dir.path().join("train.json");
    write(&cfg, SMALL_TRAIN);
    let run = dir.path().join("r");
    fs::create_dir(&run).unwrap();
    fs::write(run.join("run.lock"), "").unwrap();
    let out = medconv([
        "train".as_ref(),
        "--config".as_ref(),
        os(&cfg),
        "--manifest".as_ref(),
        os(&manifest),
        "--out".as_ref(),
        os(&run),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("locked"));
}

#[test]
fn sample_configs_match_the_defaults() {
    use medconv_cli::config::TrainConfig;
    use medconv_core::data::PhantomConfig;
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let phantoms = PhantomConfig::from_json_file(&root.join("phantoms.json")).unwrap();
    assert_eq!(phantoms, PhantomConfig::default());
    let micro = TrainConfig::load(&root.join("micro.json")).unwrap();
    micro.validate().unwrap();
    let defaults = TrainConfig {
        manifest: micro.manifest.clone(),
        out_dir: micro.out_dir.clone(),
        ..TrainConfig::default()
    };
    assert_eq!(micro, defaults);
    let balce = TrainConfig::load(&root.join("micro-balce.json")).unwrap();
    balce.validate().unwrap();
    assert_eq!(balce.run_name(), "medconv-micro+balce+tau2=0.5");
}
