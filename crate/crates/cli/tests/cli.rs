use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spfnls"));
    c.env_remove("SPFNLS_WORKERS");
    c
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("spfnls-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &[&str] = &["--set", "grid.n_points=512", "--set", "stepper.t_end=1.0"];

#[test]
fn defaults_roundtrip() {
    let o = bin().arg("defaults").output().unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    for section in ["[model]", "[grid]", "[noise]", "[stepper]", "[expand]", "[experiment]", "[linearization]", "[output]"] {
        assert!(text.contains(section), "missing {section}");
    }
    let d = scratch("defaults");
    let p = d.join("c.toml");
    fs::write(&p, &text).unwrap();
    let o = bin().args(["simulate", "--config"]).arg(&p).args(SMALL).arg("--out").arg(&d).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_stationary_and_verified() {
    let d = scratch("sim");
    let o = run(&[&["simulate"], SMALL].concat(), &d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("stationary within 1e-6"), "{}", stdout(&o));
    assert!(stdout(&o).contains("a priori bound held"));
    let summary = fs::read_to_string(d.join("simulate/summary.csv")).unwrap();
    let times: Vec<f64> = summary
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with('t'))
        .map(|l| l.split(',').next().unwrap().parse().unwrap())
        .collect();
    assert_eq!(times.len(), 11);
    assert!(times.windows(2).all(|w| w[1] > w[0]));
    let v = bin().arg("verify").arg(&d).output().unwrap();
    assert!(v.status.success(), "{}", stdout(&v));
    assert!(stdout(&v).contains("2 files verified"));
}

#[test]
fn simulate_noisy_reports_bound() {
    let d = scratch("noisy");
    let o = run(&[&["simulate", "--set", "noise.sigma=0.2", "--seed", "5"], SMALL].concat(), &d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("a priori bound held"), "{}", stdout(&o));
}

#[test]
fn config_errors_exit_2() {
    let d = scratch("bad");
    let o = run(&["simulate", "--set", "model.mu=0.9"], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("mu") && stderr(&o).contains("gamma"), "{}", stderr(&o));
    let o = run(&["simulate", "--set", "model.bogus=1"], &d);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus"));
    let o = run(&["experiment", "nosuch"], &d);
    assert_eq!(o.status.code(), Some(2));
    let o = bin().env("SPFNLS_WORKERS", "0").arg("defaults").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn blowup_exits_3() {
    let d = scratch("blowup");
    let o = run(&[&["simulate", "--set", "stepper.initial_perturbation=1e7"], SMALL].concat(), &d);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn spectrum_second_call_hits_cache() {
    let d = scratch("spectrum");
    let args = ["spectrum", "--set", "grid.n_points=512", "--set", "linearization.fit_decay=false"];
    let first = run(&args, &d);
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("spectral gap b = "));
    let second = run(&args, &d);
    assert!(second.status.success());
    let log = fs::read_to_string(d.join("spectrum/timing.log")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("cache=miss") && lines[1].contains("cache=hit"), "{log}");
    let secs = |l: &str| l.rsplit("seconds=").next().unwrap().parse::<f64>().unwrap();
    assert!(secs(lines[1]) < secs(lines[0]));
    assert!(fs::read_to_string(d.join("spectrum/spectrum.csv")).unwrap().contains("index,re,im,zero_mode"));
}

fn outputs(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v.into_iter().filter(|p| p.is_file()).map(|p| (p.clone(), fs::read(p).unwrap())).collect()
}

#[test]
fn escape_quick_and_reproducible() {
    let d = scratch("escape");
    let args = ["experiment", "escape", "--set", "experiment.n_paths=10", "--set", "experiment.window_length=0.2", "--seed", "9"];
    let start = Instant::now();
    let o = run(&args, &d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let dir = d.join("experiment/escape");
    let first = outputs(&dir);
    assert!(first.iter().any(|(p, _)| p.ends_with("report.txt")));
    assert!(first.iter().any(|(p, _)| p.ends_with("plot.gp")));
    let o = bin().args(args).arg("--out").arg(&d).env("SPFNLS_WORKERS", "3").output().unwrap();
    assert!(o.status.success());
    assert_eq!(first, outputs(&dir));
    assert!(bin().arg("verify").arg(&dir).output().unwrap().status.success());

    let (report, bytes) = first.iter().find(|(p, _)| p.ends_with("report.txt")).unwrap();
    let tampered = String::from_utf8(bytes.clone()).unwrap().replace("study = escape", "study = Escape");
    fs::write(report, tampered).unwrap();
    let v = bin().arg("verify").arg(&dir).output().unwrap();
    assert_eq!(v.status.code(), Some(1));
    assert!(stdout(&v).contains("MISMATCH"));
}

#[test]
fn order_table_layout() {
    let d = scratch("order");
    let o = run(&["experiment", "order", "--set", "experiment.n_paths=4", "--set", "experiment.horizon=0.2", "--set", "experiment.halve_dt=false"], &d);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(d.join("experiment/order/order.csv")).unwrap();
    let body: Vec<&str> = table.lines().filter(|l| !l.starts_with("# ") || l.starts_with("# slope")).collect();
    assert_eq!(body[0], "sigma,median_sup_z,median_sup_zprime");
    assert_eq!(body.len(), 1 + 3 + 2, "{table}");
    assert!(table.contains("# slope_z = ") && table.contains("# slope_zprime = "));
    let resolved = table.lines().find(|l| l.starts_with("# n_paths = ")).unwrap();
    assert_eq!(resolved, "# n_paths = 4");
}
