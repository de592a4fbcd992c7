use std::path::Path;
use std::process::{Command, Output};

fn lapwave(dir: &Path, experiment: &str, config: &str, extra: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    std::fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_lapwave"))
        .arg(experiment)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

const SELFTEST: &str = "experiment = \"selftest\"\nseed = 3\n[metric]\nfamily = \"flat\"\nd = 1\n[grid]\nn = 64\nl = 8.0\n";

#[test]
fn selftest_passes_and_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = lapwave(dir.path(), "selftest", SELFTEST, &["--plot"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/selftest.csv")).unwrap();
    assert!(csv.starts_with("experiment,quantity,"));
    assert!(csv.lines().next().unwrap().ends_with("measured,predicted,residual,verdict"));
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.toml")).unwrap();
    for name in ["selftest.csv", "selftest.svg"] {
        assert!(dir.path().join("out").join(name).exists());
        assert!(manifest.contains(&format!("name = \"{name}\"")), "{manifest}");
    }
    assert!(manifest.contains("seed = 3"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = lapwave(dir.path(), "selftest", SELFTEST, &["--seed", "99", "--threads", "1"]);
    assert_eq!(out.status.code(), Some(0));
    let manifest = std::fs::read_to_string(dir.path().join("out/manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 99"));
}

#[test]
fn mu_above_one_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment = \"kss-scan\"\n[metric]\nfamily = \"flat\"\nd = 3\n[grid]\nn = 8\nl = 8.0\n[kss]\nmu = 1.5\n";
    let out = lapwave(dir.path(), "kss-scan", cfg, &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("(0, 1]"));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_keys_and_mismatched_experiments_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = lapwave(dir.path(), "selftest", &format!("{SELFTEST}bogus = 1\n"), &[]);
    assert_eq!(out.status.code(), Some(1));
    let out = lapwave(dir.path(), "kss-scan", SELFTEST, &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn outside_hypothesis_is_labelled_and_inconclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment = \"resolvent-scan\"\n[metric]\nfamily = \"flat\"\nd = 3\n[grid]\nn = 8\nl = 6.0\n[resolvent]\nbeta = 1.0\ngamma = 0.5\nlambdas = [1.0, 2.0, 4.0, 8.0]\n";
    let out = lapwave(dir.path(), "resolvent-scan", cfg, &[]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("out/resolvent_scan.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("outside-hypothesis")), "{csv}");
}

#[test]
fn lifespan_sweep_writes_records() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = "experiment = \"lifespan-sweep\"\n[metric]\nfamily = \"flat\"\nd = 1\n[grid]\nn = 48\nl = 16.0\n[lifespan]\ndeltas = [10.0, 5.0, 2.5, 1.25]\nwidth = 1.0\ncontraction_delta = 0.5\ncontraction_t = 1.0\n";
    let out = lapwave(dir.path(), "lifespan-sweep", cfg, &[]);
    assert!(matches!(out.status.code(), Some(0 | 2 | 3)), "{}", String::from_utf8_lossy(&out.stderr));
    let rec = std::fs::read_to_string(dir.path().join("out/lifespan_records.csv")).unwrap();
    assert_eq!(rec.lines().next().unwrap(), "delta,t_obs,reason,iterations,final_m");
    assert_eq!(rec.lines().count(), 5);
    assert!(dir.path().join("out/picard_contraction.csv").exists());
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = lapwave_cli::config::ExperimentConfig::load(&path).unwrap();
        assert_eq!(path.file_stem().unwrap().to_str().unwrap(), cfg.experiment.name());
        seen += 1;
    }
    assert_eq!(seen, 9);
}
