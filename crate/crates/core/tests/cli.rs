//! The `mfg` binary: outputs, exit codes and replay.

use std::path::{Path, PathBuf};
use std::process::Command;

fn mfg(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_mfg"))
        .args(args)
        .current_dir(env!("CARGO_MANIFEST_DIR"))
        .output()
        .expect("binary runs");
    let text = String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr);
    (out.status.code().unwrap_or(-1), text)
}

fn config(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name).display().to_string()
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

#[test]
fn validate_accepts_shipped_configs() {
    for name in ["portfolio.toml", "indefinite_scalar.toml", "coupled_2x2.toml"] {
        let (code, text) = mfg(&["validate", "--config", &config(name)]);
        assert_eq!(code, 0, "{name}: {text}");
    }
}

#[test]
fn validate_rejects_asymmetric_weight() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(config("coupled_2x2.toml"))
        .unwrap()
        .replace("Q = [[1.0, 0.2], [0.2, 0.5]]", "Q = [[1.0, 0.2], [0.0, 0.5]]");
    let file = dir.path().join("bad.toml");
    std::fs::write(&file, text).unwrap();
    let (code, text) = mfg(&["validate", "--config", &file.display().to_string()]);
    assert_eq!(code, 2, "{text}");
}

#[test]
fn missing_config_is_usage_error() {
    let (code, _) = mfg(&["validate", "--config", "no/such/file.toml"]);
    assert_eq!(code, 1);
}

#[test]
fn riccati_writes_paths_and_reports_positivity_loss() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = mfg(&["riccati", "--config", &config("indefinite_scalar.toml"), "--rho", "--out", &path(dir.path(), "a")]);
    assert_eq!(code, 0, "{text}");
    for f in ["pi.csv", "sigma.csv", "rho.csv", "manifest.json"] {
        assert!(dir.path().join("a").join(f).exists(), "{f}");
    }
    let (code, text) = mfg(&["riccati", "--config", &config("portfolio.toml"), "--sigma", "--out", &path(dir.path(), "b")]);
    assert_eq!(code, 3, "{text}");
    assert!(text.contains("positivity loss"));
}

#[test]
fn simulate_and_replay_are_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let first = path(dir.path(), "first");
    let (code, text) = mfg(&[
        "simulate", "--config", &config("indefinite_scalar.toml"), "--N", "10", "--M", "2", "--seed", "9", "--out", &first,
    ]);
    assert_eq!(code, 0, "{text}");
    let second = path(dir.path(), "second");
    let (code, text) = mfg(&["--threads", "1", "replay", &path(Path::new(&first), "manifest.json"), "--out", &second]);
    assert_eq!(code, 0, "{text}");
    for f in ["averages.csv", "paths.csv", "summary.json"] {
        let a = std::fs::read(PathBuf::from(&first).join(f)).unwrap();
        let b = std::fs::read(PathBuf::from(&second).join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn simulate_uses_closed_form_for_mean_variance_config() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = mfg(&["simulate", "--config", &config("portfolio.toml"), "--N", "3", "--out", &path(dir.path(), "s")]);
    assert_eq!(code, 0, "{text}");
    assert!(text.contains("closed form"));
}

#[test]
fn nash_refuses_single_population_size() {
    let dir = tempfile::tempdir().unwrap();
    let (code, text) = mfg(&["nash", "--config", &config("portfolio.toml"), "--Ns", "50", "--out", &path(dir.path(), "n")]);
    assert_eq!(code, 1, "{text}");
}

#[test]
fn portfolio_smoke_and_bad_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "fig");
    let (code, text) = mfg(&["portfolio", "--N", "2", "--K", "50", "--out", &out]);
    assert_eq!(code, 0, "{text}");
    let state = std::fs::read_to_string(Path::new(&out).join("figure_state.csv")).unwrap();
    assert!(state.starts_with("t,xbar_N,x0"));
    assert_eq!(state.lines().count(), 52);

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let (code, _) = mfg(&["portfolio", "--N", "2", "--K", "50", "--out", &path(&blocker, "sub")]);
    assert_eq!(code, 1);
}

#[test]
fn unknown_subcommand_is_usage_error() {
    assert_eq!(mfg(&["frobnicate"]).0, 1);
}
