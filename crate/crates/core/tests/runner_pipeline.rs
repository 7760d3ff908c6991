use std::path::{Path, PathBuf};

use smallball::distributions::ScalarLaw;
use smallball::rng::Seed;
use smallball::runner::{parse_rows_csv, run, Experiment, ExperimentConfig, ExperimentResult, Format};
use smallball::slb::{estimate_slb_failure, ScaledLaw};

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "toml"))
        .collect();
    files.sort();
    files
}

#[test]
fn every_shipped_config_runs_and_round_trips() {
    let tmp = std::env::temp_dir().join(format!("smallball-pipeline-{}", std::process::id()));
    let mut seen = std::collections::BTreeSet::new();
    for path in shipped_configs() {
        let mut cfg = ExperimentConfig::from_file(&path, None).unwrap();
        cfg.trials = cfg.trials.min(5);
        seen.insert(cfg.experiment.name());
        let res = run(&cfg).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let (cols, rows) = parse_rows_csv(&res.report(Format::Csv).unwrap()).unwrap();
        assert_eq!(
            (cols, rows),
            (res.columns.clone(), res.rows.clone()),
            "{}",
            path.display()
        );
        let back: ExperimentResult = serde_json::from_str(&res.report(Format::Json).unwrap()).unwrap();
        assert_eq!(back, res);
        let dir = tmp.join(path.file_stem().unwrap());
        for file in res.write_artifacts(&dir).unwrap() {
            let body = std::fs::read_to_string(&file).unwrap();
            assert!(body.contains(smallball::runner::VERSION), "{}", file.display());
        }
    }
    assert_eq!(seen.len(), Experiment::ALL.len());
    let _ = std::fs::remove_dir_all(tmp);
}

#[test]
fn runner_slb_matches_library_estimate() {
    let cfg = ExperimentConfig::from_toml(
        "experiment = \"slb\"\nmaster_seed = 5\ntrials = 400\n[params]\nlaw = { kind = \"student_t\", params = { dof = 5.0 } }\nxi = 0.3\nm = [64]\nell = 4\n",
        None,
    )
    .unwrap();
    let res = run(&cfg).unwrap();
    let lib = estimate_slb_failure(
        &ScaledLaw::new(ScalarLaw::student_t(5.0), 1.0),
        64,
        0.3,
        4,
        400,
        cfg.seed().derive(64),
    )
    .unwrap();
    assert_eq!(res.summary["per_m"][0]["failure_rate"].as_f64().unwrap(), lib.rate);
}

#[test]
fn seeds_change_rows_and_master_seed_is_echoed() {
    let text = |seed: u64| {
        format!("experiment = \"blocks\"\nmaster_seed = {seed}\ntrials = 3\n[params]\nd = 4\nn_samples = 120\nn_blocks = 6\nxi = 0.3\nnet_size = 10\n")
    };
    let a = run(&ExperimentConfig::from_toml(&text(1), None).unwrap()).unwrap();
    let b = run(&ExperimentConfig::from_toml(&text(2), None).unwrap()).unwrap();
    assert_ne!(a.rows_csv().unwrap(), b.rows_csv().unwrap());
    assert!(a.config.contains("master_seed = 1"));
}

#[test]
fn profile_driven_slb_reports_parameters() {
    let cfg = ExperimentConfig::from_toml(
        "experiment = \"slb\"\ntrials = 50\n[params]\nlaw = { kind = \"uniform_sym\" }\nxi = 0.2\nm = [400]\nprofile = { regime = \"bounded\", bound = 1.7320508075688772, l2_norm = 1.0 }\n",
        None,
    )
    .unwrap();
    let res = run(&cfg).unwrap();
    let rec = &res.summary["per_m"][0];
    // ℓ = ⌊m ξ / M²⌋ = ⌊400 · 0.2 / 3⌋, k = m ξ² / M²
    assert_eq!(rec["ell"].as_u64().unwrap(), 26);
    assert!((rec["k"].as_f64().unwrap() - 400.0 * 0.04 / 3.0).abs() < 1e-9);
}

#[test]
fn exclusive_trim_choices_are_enforced() {
    let both =
        "experiment = \"slb\"\n[params]\nlaw = { kind = \"gaussian\" }\nxi = 0.2\nm = [10]\nell = 1\nell_ratio = 0.1\n";
    let err = ExperimentConfig::from_toml(both, None).unwrap_err();
    assert!(err.is_config() && err.to_string().contains("ell"));
    let too_big = "experiment = \"slb\"\n[params]\nlaw = { kind = \"gaussian\" }\nxi = 0.2\nm = [10]\nell = 11\n";
    assert!(ExperimentConfig::from_toml(too_big, None).unwrap_err().is_config());
    let heavy_sv = "experiment = \"sv\"\n[params]\ndims = [2]\naspect = [4.0]\nq = 4.0\nlaw = { kind = \"pareto_sym\", params = { tail_index = 3.0 } }\n";
    let err = ExperimentConfig::from_toml(heavy_sv, None).unwrap_err();
    assert!(err.is_config(), "{err}");
}
