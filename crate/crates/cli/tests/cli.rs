use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn wavefx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavefx"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/statement_2011.txt")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_then_density() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ou.csv");
    let o = wavefx(&[
        "synth",
        "--kind",
        "ou",
        "--length",
        "20000",
        "--param",
        "theta=1",
        "--param",
        "sigma=0.5",
        "--param",
        "dt=0.01",
        "--output",
        p(&csv),
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() > 20_000);

    let o = wavefx(&[
        "density",
        p(&csv),
        "--scale",
        "0",
        "--dtau",
        "0.01",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let density = std::fs::read_to_string(dir.path().join("density.csv")).unwrap();
    assert_eq!(density.lines().count(), 513);
    assert!(dir.path().join("fit.csv").exists());

    let o = wavefx(&[
        "density",
        p(&csv),
        "--scale",
        "1",
        "--wavelet",
        "db4",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let path = dir.path().join(name);
        let o = wavefx(&[
            "synth",
            "--kind",
            "wiener",
            "--length",
            "500",
            "--param",
            "y0=1",
            "-o",
            p(&path),
            "--seed",
            seed,
        ]);
        assert_eq!(code(&o), 0);
        std::fs::read_to_string(path).unwrap()
    };
    assert_eq!(run("a.csv", "3"), run("b.csv", "3"));
    assert_ne!(run("a.csv", "3"), run("c.csv", "4"));
}

#[test]
fn constant_series_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("flat.csv");
    let o = wavefx(&[
        "synth",
        "--kind",
        "wiener",
        "--length",
        "2000",
        "--param",
        "sigma=0",
        "--param",
        "y0=1",
        "-o",
        p(&csv),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = wavefx(&[
        "density",
        p(&csv),
        "--scale",
        "0",
        "--out-dir",
        p(dir.path()),
    ]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_input_is_a_data_error() {
    let o = wavefx(&["density", "/nonexistent/quotes.csv"]);
    assert_eq!(code(&o), 1);
    let o = wavefx(&["report", "/nonexistent/statement.txt"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn bad_arguments_are_validation_errors() {
    assert_eq!(code(&wavefx(&["synth", "--kind", "brownian"])), 2);
    assert_eq!(
        code(&wavefx(&["synth", "--kind", "ou", "--param", "kappa=1"])),
        2
    );
    assert_eq!(code(&wavefx(&["frobnicate"])), 2);
    assert_eq!(code(&wavefx(&["--help"])), 0);
}

#[test]
fn report_on_fixture() {
    let o = wavefx(&["report", p(&fixture())]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("P/L convention: profit_plus_swap"));
    assert!(text.contains("5 683.62"));
    assert!(text.contains("9 522.25"));

    let o = wavefx(&[
        "report",
        p(&fixture()),
        "--json",
        "--convention",
        "profit_only",
    ]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("profit_only"));

    assert_eq!(
        code(&wavefx(&["report", p(&fixture()), "--convention", "gross"])),
        2
    );
}

#[test]
fn backtest_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&wavefx(&["backtest"])), 2);
    assert_eq!(
        code(&wavefx(&["--config", "/nonexistent/run.conf", "backtest"])),
        1
    );

    let bad = dir.path().join("bad.conf");
    std::fs::write(&bad, "window = \n").unwrap();
    assert_eq!(code(&wavefx(&["--config", p(&bad), "backtest"])), 2);

    std::fs::write(&bad, "bins = 2\n[symbols.eurusd]\nspread = 0.0001\n").unwrap();
    assert_eq!(code(&wavefx(&["--config", p(&bad), "backtest"])), 2);
}

#[test]
fn backtest_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        r#"
synthetic_bars = 700
window = 128
shift_t = 32
bins = 6
order_f = 2
order_g2 = 1
density_points = 128
train_window = 60
state_window = 24

[symbols.eurusd]
spread = 0.0001
synthetic = { kind = "ornstein_uhlenbeck", theta = 0.05, sigma = 0.0004, mu = 1.42, y0 = 1.42, dt = 1.0 }

[symbols.usdchf]
spread = 0.0001
synthetic = { kind = "ornstein_uhlenbeck", theta = 0.05, sigma = 0.0004, mu = 0.89, y0 = 0.89, dt = 1.0 }
"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let o = wavefx(&[
        "--config",
        p(&conf),
        "--out-dir",
        p(&out),
        "--seed",
        "9",
        "backtest",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "statement.txt",
        "report.txt",
        "summary.json",
        "decisions.csv",
        "allocations.csv",
        "equity.csv",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let first = std::fs::read_to_string(out.join("statement.txt")).unwrap();
    let o = wavefx(&[
        "--config",
        p(&conf),
        "--out-dir",
        p(&out),
        "--seed",
        "9",
        "backtest",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(
        std::fs::read_to_string(out.join("statement.txt")).unwrap(),
        first
    );
}
