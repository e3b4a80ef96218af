use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_randflight"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn spectrum_eta(cfg: &str) -> (f64, serde_json::Value) {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", cfg);
    let out = dir.path().join("out");
    let o = run(&["spectrum", "--config", c.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(out.join("spectrum.json"));
    (v["runs"][0]["eta"].as_f64().unwrap(), v)
}

#[test]
fn spectrum_semicircle_and_ms() {
    let (eta, v) = spectrum_eta("seed = 1\n[kernel]\ntype = \"semicircle\"\n[spectral]\ngrid_size = 256\n");
    assert!((eta - 0.569).abs() < 0.005, "{eta}");
    assert_eq!(v["command"], "spectrum");
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(v["versions"]["randflight"], randflight::VERSION);
    let (eta, _) = spectrum_eta("seed = 1\n[kernel]\ntype = \"ms\"\nalpha = 0.5\n[spectral]\ngrid_size = 128\n");
    assert!((eta - 3.0).abs() < 1e-9, "{eta}");
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "bad.toml", "seed = 1\n[kernel]\ntype = \"semicircle\"\nhh = 0.2\n");
    let o = run(&["spectrum", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("unknown field") && err.contains("line 4"), "{err}");
    let c = write(dir.path(), "noseed.json", "{\"kernel\": {\"type\": \"semicircle\"}}");
    let o = run(&["spectrum", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    let o = run(&["simulate", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["tables", "--profile", "quick", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_exit_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "");
    let o = run(&["tables", "--out-dir", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

const SIM: &str = "seed = 99\n[kernel]\ntype = \"semicircle\"\n[schedule]\na = [1e2, 1e3]\n[mc]\nreps = 32\nsamples = 2000\nlags = 8\n";

#[test]
fn simulate_is_byte_identical_across_runs_and_workers() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", SIM);
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "1", "3"].iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let o = run(&["simulate", "--config", c.to_str().unwrap(), "--workers", workers, "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push((std::fs::read(out.join("simulate.csv")).unwrap(), std::fs::read(out.join("simulate.json")).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
    let out = dir.path().join("other");
    let o = run(&["simulate", "--config", c.to_str().unwrap(), "--seed", "100", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(out.join("simulate.csv")).unwrap(), outputs[0].0);
}

#[test]
fn toml_and_json_configs_give_the_same_hash() {
    let dir = tempfile::tempdir().unwrap();
    let t = write(dir.path(), "c.toml", "seed = 4\n[kernel]\ntype = \"flat_bottom\"\nh = 0.5\n");
    let j = write(dir.path(), "c.json", "{\"seed\": 4, \"kernel\": {\"type\": \"flat_bottom\", \"h\": 0.5}}");
    let mut hashes = Vec::new();
    for (i, c) in [t, j].iter().enumerate() {
        let out = dir.path().join(format!("o{i}"));
        let o = run(&["tables", "--config", c.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
        assert!(o.status.success());
        hashes.push(json(out.join("tables.json"))["config_hash"].as_str().unwrap().to_string());
    }
    assert_eq!(hashes[0], hashes[1]);
}

#[test]
fn simulate_semicircle_agrees_with_spectrum() {
    let cfg = "seed = 21\n[kernel]\ntype = \"semicircle\"\n[schedule]\na = [1e2, 1e3, 1e4, 1e5]\n[spectral]\ngrid_size = 512\n[mc]\nreps = 64\nsamples = 40000\nlags = 12\n";
    let (spec, _) = spectrum_eta(cfg);
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", cfg);
    let o = run(&["simulate", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let mc = json(dir.path().join("simulate.json"))["runs"][0]["eta"].as_f64().unwrap();
    assert!((mc / spec - 1.0).abs() < 0.05, "mc {mc} spectral {spec}");
}

#[test]
fn flat_top_sweep_increases() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(
        dir.path(),
        "c.toml",
        "seed = 2\n[kernel]\ntype = \"flat_top\"\nh = 0.0\n[sweep]\nh = [0.0, 0.25, 0.5, 0.75]\n[schedule]\na = [1e2, 1e3, 1e4]\n[mc]\nreps = 32\nsamples = 10000\nlags = 32\n",
    );
    let o = run(&["simulate", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let v = json(dir.path().join("simulate.json"));
    let etas: Vec<f64> = v["runs"].as_array().unwrap().iter().map(|r| r["eta"].as_f64().unwrap()).collect();
    assert_eq!(etas.len(), 4);
    assert!(etas.windows(2).all(|w| w[1] > w[0]), "{etas:?}");
}

#[test]
fn brownian_exit_control() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", "seed = 6\n[exit_time]\nmode = \"brownian\"\nl_over_r = [1e2, 1e3]\nreps = 4000\nd = 0.5\n");
    let o = run(&["exit-time", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(dir.path().join("exit_time.json"));
    let ratio = v["slope_ratio"].as_f64().unwrap();
    assert!((ratio - 1.0).abs() < 0.05, "{ratio}");
    assert_eq!(v["censored_fraction"].as_f64().unwrap(), 0.0);
}

#[test]
fn exit_time_reports_censoring() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", "seed = 6\n[kernel]\ntype = \"semicircle\"\n[exit_time]\nl_over_r = [30.0]\nreps = 1000\nbudget = 20\n");
    let o = run(&["exit-time", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(dir.path().join("exit_time.json"));
    let f = v["censored_fraction"].as_f64().unwrap();
    assert!(f > 0.0 && f < 1.0, "{f}");
    let censored = v["points"][0]["censored"].as_u64().unwrap();
    let csv = std::fs::read_to_string(dir.path().join("exit_time.csv")).unwrap();
    let empty = csv.lines().skip(1).filter(|l| l.split(',').nth(3) == Some("")).count();
    assert_eq!(empty as u64, censored);
}

#[test]
fn correlations_recover_the_shallow_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let c = write(dir.path(), "c.toml", "seed = 8\n[kernel]\ntype = \"semicircle\"\n");
    let o = run(&["correlations", "--config", c.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = json(dir.path().join("correlations.json"));
    let z = v["profile"]["zeta_hat"].as_f64().unwrap();
    let reference = -0.25 * 3f64.ln();
    assert!((z - reference).abs() < 0.01, "{z}");
    let q = v["shallow_expectation"]["value"].as_f64().unwrap();
    assert!((q - reference).abs() < 1e-4, "{q}");
}

#[test]
fn validate_quick_writes_junit() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["validate", "--profile", "quick", "--seed", "1", "--out-dir", dir.path().to_str().unwrap()]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}");
    let xml = std::fs::read_to_string(dir.path().join("validate.xml")).unwrap();
    assert!(xml.starts_with("<?xml") && xml.contains("<testsuites") && xml.contains("failures=\"0\""));
    assert!(std::fs::read_to_string(dir.path().join("validate.txt")).unwrap().contains("quick"));
    let o = run(&["validate", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["validate", "--seed", "1", "--profile", "huge", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
