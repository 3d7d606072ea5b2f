use std::fs;
use std::process::Command;

use ppest::harness::*;

fn small(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        trials: 40,
        samples: 100,
        burnin: 150,
        out: out.to_path_buf(),
        ..ExperimentConfig::default()
    }
}

fn read(dir: &std::path::Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap()
}

#[test]
fn fixed_seed_gives_identical_files() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        let cfg = small(dir);
        write_suite_outputs(&run_suite(&cfg).unwrap(), dir).unwrap();
    }
    for name in ["trials.csv", "calibration.csv", "sharpness.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}

#[test]
fn row_counts_and_nesting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let report = run_suite(&cfg).unwrap();
    write_suite_outputs(&report, dir.path()).unwrap();
    let failures: usize = report.calibration.iter().map(|c| c.failures).sum();

    let mut rd = csv::Reader::from_path(dir.path().join("sharpness.csv")).unwrap();
    assert_eq!(rd.headers().unwrap(), vec!["estimator", "trial", "sharpness_m3"]);
    assert_eq!(rd.records().count(), 3 * cfg.trials - failures);

    let mut rd = csv::Reader::from_path(dir.path().join("trials.csv")).unwrap();
    assert_eq!(rd.records().count(), 3 * cfg.trials);

    let mut rd = csv::Reader::from_path(dir.path().join("calibration.csv")).unwrap();
    assert_eq!(
        rd.headers().unwrap(),
        vec!["estimator", "scope", "rho", "coverage", "n"]
    );
    let rows: Vec<csv::StringRecord> = rd.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3 * 4 * cfg.rho_levels.len());
    for group in rows.chunks(cfg.rho_levels.len()) {
        let cov: Vec<f64> = group.iter().map(|r| r[3].parse().unwrap()).collect();
        assert!(cov.windows(2).all(|w| w[0] <= w[1]), "{:?}", group[0]);
        assert!(["joint", "alongtrack", "crosstrack", "altitude"].contains(&&group[0][1]));
    }
}

#[test]
fn results_do_not_depend_on_estimator_selection() {
    let dir = tempfile::tempdir().unwrap();
    let all = run_suite(&small(dir.path())).unwrap();
    let only = run_suite(&ExperimentConfig {
        estimators: vec![EstimatorKind::Mcmc],
        ..small(dir.path())
    })
    .unwrap();
    assert_eq!(
        all.sharpness_of(EstimatorKind::Mcmc),
        only.sharpness_of(EstimatorKind::Mcmc)
    );
}

#[test]
fn config_parsing() {
    let cfg = ExperimentConfig::from_toml_str(
        "seed = 7\nnoise = \"correlated\"\nmodel_noise = \"uncorrelated\"\nestimators = [\"linear\"]\n",
    )
    .unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.noise, NoiseVariant::Correlated);
    assert_eq!(cfg.model_noise, Some(NoiseVariant::Uncorrelated));
    assert_eq!(cfg.estimators, vec![EstimatorKind::Linear]);
    assert_eq!(cfg.trials, 300);
    assert_eq!(
        ExperimentConfig::from_toml_str("").unwrap(),
        ExperimentConfig::default()
    );
    assert!(ExperimentConfig::from_toml_str("no_such_key = 1").is_err());
    assert!(ExperimentConfig::from_toml_str("trials = 0").is_err());
    assert!(ExperimentConfig::from_toml_str("rho_levels = [0.5, 1.0]").is_err());
    // every documented key is a real field
    let text = toml::to_string(&ExperimentConfig::default()).unwrap();
    for line in text.lines().filter(|l| l.contains('=')) {
        let key = line.split('=').next().unwrap().trim();
        assert!(CONFIG_KEYS_HELP.contains(key), "{key} undocumented");
    }
}

#[test]
fn matched_control_is_calibrated_for_linear() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        noise: NoiseVariant::Matched,
        estimators: vec![EstimatorKind::Linear],
        trials: 2000,
        ..small(dir.path())
    };
    let report = run_suite(&cfg).unwrap();
    assert!(report.calibration[0].joint.max_deviation() <= 0.05);
}

#[test]
fn approach_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig {
        approach_runs: 5,
        ..small(dir.path())
    };
    let report = run_approach(&cfg).unwrap();
    assert_eq!(report.tracks.len(), 5);
    assert_eq!(report.tracks[0].times.len(), 65);
    write_approach_outputs(&report, dir.path()).unwrap();
    let text = read(dir.path(), "approach.csv");
    assert!(text.starts_with("t_s,axis,mu,sigma,sharpness_raw,sharpness_filtered\n"));
    assert_eq!(text.lines().count(), 1 + 65 * 3);
}

#[test]
fn benchmark_rows() {
    let cfg = ExperimentConfig {
        bench_ks: vec![10, 20],
        bench_repeats: 3,
        bench_warmup: 1,
        ..ExperimentConfig::default()
    };
    let rows = run_benchmark(&cfg).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.median_ms > 0.0 && r.rel_sigma.is_finite()));
    assert!((linear_r2(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
}

fn cli() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ppest"))
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let st = cli().arg("selftest").status().unwrap();
    assert_eq!(st.code(), Some(0));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "trials = \"many\"").unwrap();
    let st = cli().args(["suite", "--config"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(1));

    // an estimator set that cannot meet the overconfidence check
    let cfg = dir.path().join("c.toml");
    fs::write(
        &cfg,
        "noise = \"correlated\"\nmodel_noise = \"uncorrelated\"\nestimators = [\"linear\"]\ncross_correlation = 0.0\n",
    )
    .unwrap();
    let out = cli()
        .args(["suite", "--trials", "200", "--out"])
        .arg(dir.path())
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(dir.path().join("calibration.csv").exists());

    let help = cli().arg("--help").output().unwrap();
    let text = String::from_utf8(help.stdout).unwrap();
    for key in ["seed", "mixture_sigma_high", "accel_std", THREADS_ENV] {
        assert!(text.contains(key));
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(a.path(), "1"), (b.path(), "3")] {
        let st = cli()
            .env(THREADS_ENV, threads)
            .args(["suite", "--trials", "12", "--seed", "5", "--out"])
            .arg(dir)
            .status()
            .unwrap();
        assert!(st.code() == Some(0) || st.code() == Some(2));
    }
    assert_eq!(read(a.path(), "trials.csv"), read(b.path(), "trials.csv"));
}
