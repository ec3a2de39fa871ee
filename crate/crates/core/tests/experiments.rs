use std::path::Path;

use qsa_core::dynamics::LinearVariant;
use qsa_core::experiments::{
    emit_plotdata, run_config_in, verify_manifest, CamelTracking, Experiment, ExperimentConfig, LinearBiasSweep,
    NamedProbe, RastriginQsgd, RunContext, RunManifest, Solidarity, MANIFEST_FILE, SNAPSHOT_FILE,
};
use qsa_core::QsaError;

fn shipped_configs() -> Vec<std::path::PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn plot_rows(manifest: &RunManifest) -> Vec<Vec<String>> {
    let mut buf = Vec::new();
    emit_plotdata(manifest, &mut buf).unwrap();
    String::from_utf8(buf).unwrap().lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn shipped_configs_parse_and_round_trip() {
    let paths = shipped_configs();
    assert_eq!(paths.len(), 9);
    for p in paths {
        let cfg = ExperimentConfig::load(&p).unwrap();
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(cfg, again, "{}", p.display());
        assert_eq!(p.file_stem().unwrap().to_str().unwrap(), cfg.experiment.kind());
    }
}

#[test]
fn invalid_values_name_the_field() {
    let e = ExperimentConfig::from_toml_str("name = \"x\"\n[experiment]\nkind = \"solidarity\"\nalphas = [0.1, -1.0]\n")
        .unwrap_err();
    match e {
        QsaError::ConfigInvalid(m) => assert!(m.contains("experiment.alphas"), "{m}"),
        other => panic!("{other:?}"),
    }
    let e = ExperimentConfig::from_toml_str("name = \"x\"\n[experiment]\nkind = \"no-such-kind\"\n").unwrap_err();
    assert!(matches!(e, QsaError::ConfigInvalid(_)));
}

#[test]
fn bias_sweep_run_writes_rows_series_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let p = LinearBiasSweep {
        variants: vec![LinearVariant::A],
        alphas: vec![0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.6, 0.9],
        alpha_horizon: 100.0,
        mean_target_horizons: vec![1e3],
        ..LinearBiasSweep::default()
    };
    let cfg = ExperimentConfig::new("sweep", Experiment::LinearBiasSweep(p));
    let m = run_config_in(&cfg, dir.path()).unwrap();

    let csv = std::fs::read_to_string(dir.path().join("bias_A.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,bias_raw,bias_f1,bias_f2,bias_pr");
    assert_eq!(lines.len(), 9);
    assert!(dir.path().join(MANIFEST_FILE).exists());
    let snap = ExperimentConfig::load(&dir.path().join(SNAPSHOT_FILE)).unwrap();
    assert_eq!(snap, cfg);

    let rows = plot_rows(&m);
    assert_eq!(rows[0], ["experiment", "series", "x", "y"]);
    let series: std::collections::BTreeSet<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    for s in ["A:raw", "A:f1", "A:f2", "A:ref_k1_alpha", "A:ref_k2_alpha2"] {
        assert!(series.contains(s), "missing {s}");
    }
    assert!(rows[1..].iter().all(|r| r[0] == "linear-bias-sweep"));
    let loaded = RunManifest::load(&dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.checks, m.checks);
}

#[test]
fn rerun_from_manifest_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::new(
        "rast",
        Experiment::RastriginQsgd(RastriginQsgd {
            replicates: 4,
            steps: 2_000,
            checkpoints: vec![1e3, 2e3],
            ..RastriginQsgd::default()
        }),
    );
    cfg.seed = 11;
    let m = run_config_in(&cfg, dir.path()).unwrap();
    let checks = verify_manifest(&m).unwrap();
    let repro: Vec<_> = checks.iter().filter(|c| c.name.starts_with("reproducible:")).collect();
    assert!(repro.len() >= 4 + 4 + 2);
    assert!(repro.iter().all(|c| c.passed), "{repro:?}");
    assert!(!dir.path().join(".verify").exists());
}

#[test]
fn rastrigin_writes_one_trajectory_per_replicate() {
    let dir = tempfile::tempdir().unwrap();
    let p = RastriginQsgd { replicates: 6, steps: 1_000, checkpoints: vec![500.0, 1000.0], spsa: false, ..RastriginQsgd::default() };
    let m = run_config_in(&ExperimentConfig::new("r", Experiment::RastriginQsgd(p)), dir.path()).unwrap();
    let traj = m.outputs.iter().filter(|o| o.path.starts_with("traj_qsgd_")).count();
    assert_eq!(traj, 6);
    assert!(dir.path().join("covariance.csv").exists());
    // initial conditions land inside the domain and phases inside [-pi/2, pi/2]
    let first = std::fs::read_to_string(dir.path().join("traj_qsgd_r0.csv")).unwrap();
    let row: Vec<f64> = first.lines().nth(1).unwrap().split(',').map(|x| x.parse().unwrap()).collect();
    assert!(row[1].abs() <= 5.12 && row[2].abs() <= 5.12);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let p = RastriginQsgd { replicates: 5, steps: 3_000, checkpoints: vec![3e3], ..RastriginQsgd::default() };
    let ctx = RunContext { seed: 5, full: false };
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(|| p.run(&ctx).unwrap());
    let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(|| p.run(&ctx).unwrap());
    assert_eq!(one, four);
    // and replicate m is the same whether or not others run alongside it
    let fewer = RastriginQsgd { replicates: 2, ..p.clone() }.run(&ctx).unwrap();
    assert_eq!(fewer.qsgd.terminal[..], one.qsgd.terminal[..2]);
}

#[test]
fn tracking_plotdata_has_series_per_coordinate() {
    let dir = tempfile::tempdir().unwrap();
    let p = CamelTracking { probes: vec![NamedProbe::CamelB], horizon: 2_000.0, ..CamelTracking::default() };
    let m = run_config_in(&ExperimentConfig::new("track", Experiment::CamelTracking(p)), dir.path()).unwrap();
    let rows = plot_rows(&m);
    let series: std::collections::BTreeSet<&str> = rows[1..].iter().map(|r| r[1].as_str()).collect();
    for s in ["b:theta_0", "b:theta_1", "b:f1_0", "b:f1_1", "b:f2_0", "b:opt_1"] {
        assert!(series.contains(s), "missing {s}");
    }
}

#[test]
fn solidarity_run_passes_its_check() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::new("s", Experiment::Solidarity(Solidarity { dt: 1e-3, ..Solidarity::default() }));
    let m = run_config_in(&cfg, dir.path()).unwrap();
    assert!(m.all_passed(), "{:?}", m.checks);
    assert_eq!(m.version, env!("CARGO_PKG_VERSION"));
}
