//! End-to-end checks of the `kinwealth` binary and its bundles.
//!
//! Golden files: `KINWEALTH_BLESS=1 cargo test -p kinwealth-cli --test cli`
//! rewrites `tests/golden/` from the current build.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinwealth_cli::commands;
use kinwealth_cli::output::read_key_values;
use kinwealth_cli::RunConfig;

const GOLDEN_FILES: &[&str] = &[
    "summary.csv",
    "tailfit.csv",
    "marginal_knowledge.csv",
    "marginal_wealth.csv",
    "profile_W.csv",
    "profile_K.csv",
];

fn kinwealth(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kinwealth"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn golden_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

/// Cells equal as text, or as numbers within a relative 1e-9 (libm
/// differences across platforms may move the last digits).
fn assert_csv_close(path: &Path, expected: &str, actual: &str) {
    let (e, a): (Vec<_>, Vec<_>) = (expected.lines().collect(), actual.lines().collect());
    assert_eq!(e.len(), a.len(), "{}: row count", path.display());
    for (row, (le, la)) in e.iter().zip(&a).enumerate() {
        let (ce, ca): (Vec<_>, Vec<_>) = (le.split(',').collect(), la.split(',').collect());
        assert_eq!(ce.len(), ca.len(), "{}:{}", path.display(), row + 1);
        for (x, y) in ce.iter().zip(&ca) {
            if x == y {
                continue;
            }
            let (x, y): (f64, f64) = match (x.parse(), y.parse()) {
                (Ok(x), Ok(y)) => (x, y),
                _ => panic!("{}:{}: '{x}' vs '{y}'", path.display(), row + 1),
            };
            assert!(
                (x - y).abs() <= 1e-9 * x.abs().max(y.abs()),
                "{}:{}: {x} vs {y}",
                path.display(),
                row + 1
            );
        }
    }
}

#[test]
fn analyze_of_pinned_simulation_matches_golden() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::preset("test1").unwrap();
    cfg.simulation.n_agents = 10_000;
    cfg.seed = 42;
    cfg.output.dir = tmp.path().join("run");
    commands::simulate(&cfg).unwrap();

    let out = tmp.path().join("analysis");
    commands::analyze(&cfg.output.dir.join("snapshot_final.csv"), &cfg.analysis, &out).unwrap();

    let golden = golden_dir();
    let bless = std::env::var_os("KINWEALTH_BLESS").is_some();
    if bless {
        fs::create_dir_all(&golden).unwrap();
    }
    for name in GOLDEN_FILES {
        let actual = fs::read_to_string(out.join(name)).unwrap();
        let path = golden.join(name);
        if bless {
            fs::write(&path, &actual).unwrap();
        } else {
            let expected = fs::read_to_string(&path)
                .unwrap_or_else(|_| panic!("missing {}; run with KINWEALTH_BLESS=1", path.display()));
            assert_csv_close(&path, &expected, &actual);
        }
    }
}

#[test]
fn invalid_gamma_exits_2_naming_the_invariant() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("bad.toml"), "[model.trade]\ngamma = 1.5\n").unwrap();
    let out = kinwealth(&["simulate", "--config", "bad.toml", "--out", "o"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("gamma = 1.5 must lie in (0, 1)"), "{err}");
    assert!(!tmp.path().join("o").exists(), "no bundle on config failure");
}

#[test]
fn config_and_input_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("typo.toml"), "[simulation]\nn_agent = 10\n").unwrap();
    fs::write(p.join("bad.csv"), "x,v\n1.0,2.0\n0.5,abc\n").unwrap();
    for args in [
        &["simulate", "--config", "typo.toml"][..],
        &["simulate", "--preset", "test3"],
        &["fp", "--preset", "test1", "--grid", "200by200"],
        &["fp", "--preset", "test1", "--grid", "4x4"],
        &["analyze", "bad.csv"],
        &["analyze", "missing.csv"],
        &["compare", "nowhere", "nowhere"],
        &["simulate", "--equation", "fp3"],
    ] {
        let out = kinwealth(args, p);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn compare_self_is_zero_and_bin_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let run = |extra: &[&str]| {
        let mut args = vec!["simulate", "--preset", "test1", "--n", "2000"];
        args.extend_from_slice(extra);
        assert!(kinwealth(&args, p).status.success());
    };
    run(&["--out", "x"]);
    let out = kinwealth(&["compare", "x", "x", "--out", "cmp"], p);
    assert!(out.status.success());
    let text = fs::read_to_string(p.join("cmp/comparison.csv")).unwrap();
    assert_eq!(text, String::from_utf8(out.stdout).unwrap());
    for line in text.lines().skip(1) {
        assert!(line.ends_with(",0.0"), "{line}");
    }

    // Default analysis binning adapts to the sample maximum.
    fs::write(p.join("auto.toml"), "[simulation]\nn_agents = 2000\n").unwrap();
    assert!(kinwealth(&["simulate", "--config", "auto.toml", "--out", "y"], p).status.success());
    let out = kinwealth(&["compare", "x", "y"], p);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different bins"));
}

#[test]
fn fp_bundle_conserves_mass_and_echoes_equation() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let out = kinwealth(
        &["fp", "--preset", "test1", "--grid", "40x40", "--equation", "fp2", "--out", "f"],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let echo = RunConfig::from_file(&p.join("f/config.toml")).unwrap();
    assert_eq!(echo.fp.equation, kinwealth_cli::config::EquationChoice::Fp2);
    assert_eq!((echo.fp.nx, echo.fp.nv), (40, 40));

    let diag = fs::read_to_string(p.join("f/fp_diagnostics.csv")).unwrap();
    let masses: Vec<f64> = diag
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(masses.len() > 2);
    for m in &masses {
        assert!((m - masses[0]).abs() <= 1e-10, "{m} vs {}", masses[0]);
    }
    let summary = read_key_values(&p.join("f/summary.csv")).unwrap();
    let min_h = summary.iter().find(|(k, _)| k == "min_h").unwrap().1.unwrap();
    assert!(min_h >= 0.0);
    let field = fs::read_to_string(p.join("f/fp_field.csv")).unwrap();
    assert_eq!(field.lines().count(), 1 + 40 * 40);
}

#[test]
fn sweep_writes_one_bundle_per_point() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    let out = kinwealth(
        &[
            "sweep", "--preset", "test1", "--n", "500", "--out", "sw",
            "--set", "model.trade.gamma=0.05,0.1", "--set", "seed=1,2,3",
        ],
        p,
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(p.join("sw/sweep.csv")).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert!(rows[0].starts_with("point,model.trade.gamma,seed,"));
    assert_eq!(rows.len(), 7);
    assert!(rows[1].starts_with("point_000,0.05,1,"));
    assert!(rows[6].starts_with("point_005,0.1,3,"));
    for i in 0..6 {
        assert!(p.join(format!("sw/point_{i:03}/summary.csv")).exists());
    }

    // An invalid point is rejected before anything runs.
    let out = kinwealth(
        &["sweep", "--preset", "test1", "--out", "bad", "--set", "model.trade.gamma=0.1,1.5"],
        p,
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!p.join("bad/point_000").exists());
}

#[test]
fn echoed_config_reproduces_bundle() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    assert!(kinwealth(&["simulate", "--preset", "test2", "--n", "1500", "--seed", "9", "--out", "a"], p)
        .status
        .success());
    assert!(kinwealth(&["simulate", "--config", "a/config.toml", "--out", "b"], p)
        .status
        .success());
    for name in ["moments.csv", "snapshot_final.csv", "summary.csv", "config.toml"] {
        assert_eq!(
            fs::read(p.join("a").join(name)).unwrap(),
            fs::read(p.join("b").join(name)).unwrap(),
            "{name}"
        );
    }
}
