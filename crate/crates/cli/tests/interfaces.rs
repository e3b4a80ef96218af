//! Column and key layout of every file the plotting scripts read. The
//! scripts depend on these names only, so a change here is a breaking
//! change of the output format.

use randflight_cli::commands::{Command, Invocation};
use std::path::Path;

fn invoke(command: Command, config: Option<&Path>, out: &Path) {
    let inv = Invocation { command, config: config.map(Path::to_path_buf), seed: None, out_dir: out.to_path_buf(), profile: None };
    randflight_cli::run(&inv).unwrap();
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(str::to_string).collect()
}

fn keys(v: &serde_json::Value) -> Vec<String> {
    let mut k: Vec<String> = v.as_object().unwrap().keys().cloned().collect();
    k.sort();
    k
}

fn envelope(v: &serde_json::Value, command: &str) {
    assert_eq!(v["command"], command);
    assert!(v["seed"].is_u64());
    assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    assert!(v["versions"]["randflight"].is_string() && v["versions"]["randflight_cli"].is_string());
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn rows(p: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(p).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn simulation_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.toml");
    std::fs::write(&c, "seed = 3\n[kernel]\ntype = \"middle_wall\"\nh = 0.3\n[schedule]\na = [1e2, 1e3]\n[mc]\nreps = 32\nsamples = 500\nlags = 4\n").unwrap();
    invoke(Command::Simulate, Some(&c), dir.path());
    let csv = dir.path().join("simulate.csv");
    assert_eq!(header(&csv), ["kernel", "a", "rep", "sum_z", "sum_z_trunc", "n_collisions", "exit_time", "seed", "config_hash"]);
    assert_eq!(rows(&csv).len(), 64);
    let v = read_json(&dir.path().join("simulate.json"));
    envelope(&v, "simulate");
    let run = &v["runs"][0];
    assert_eq!(keys(run), ["closed_form", "d0", "estimator", "eta", "eta_se", "extrapolation", "kernel", "points", "warnings"]);
    assert_eq!(keys(&run["points"][0]), ["a", "d_hat", "d_se", "eta_hat", "eta_se", "steps"]);
    assert_eq!(keys(&run["closed_form"]), ["d_over_d0", "eta", "family", "param", "zeta"]);
    let hash = v["config_hash"].as_str().unwrap();
    assert!(rows(&csv).iter().all(|r| &r[8] == hash));
}

#[test]
fn spectrum_file() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.json");
    std::fs::write(&c, "{\"seed\": 3, \"kernel\": {\"type\": \"flat_top\", \"h\": 0.25}, \"spectral\": {\"grid_size\": 128}}").unwrap();
    invoke(Command::Spectrum, Some(&c), dir.path());
    let v = read_json(&dir.path().join("spectrum.json"));
    envelope(&v, "spectrum");
    let run = &v["runs"][0];
    for k in ["kernel", "grid_size", "eigenvalues", "gap", "eta_a", "eta", "uncertainty", "closed_form"] {
        assert!(!run[k].is_null(), "missing {k}");
    }
    let pairs = run["eta_a"].as_array().unwrap();
    assert!(pairs.iter().all(|p| p.as_array().unwrap().len() == 2));
}

#[test]
fn exit_time_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.toml");
    std::fs::write(&c, "seed = 3\n[exit_time]\nmode = \"brownian\"\nl_over_r = [10.0, 20.0]\nreps = 50\nd = 1.0\ndt_fraction = 1e-3\n").unwrap();
    invoke(Command::ExitTime, Some(&c), dir.path());
    let csv = dir.path().join("exit_time.csv");
    assert_eq!(header(&csv), ["kernel", "l_over_r", "rep", "exit_time", "n_collisions", "seed", "config_hash"]);
    assert_eq!(rows(&csv).len(), 100);
    let v = read_json(&dir.path().join("exit_time.json"));
    envelope(&v, "exit-time");
    assert_eq!(keys(&v), ["censored_fraction", "command", "config_hash", "d_reference", "mode", "points", "seed", "slope", "slope_ratio", "slope_se", "versions"]);
    for k in ["l_over_r", "mean", "se", "ci_low", "ci_high", "censored", "predicted", "regressor"] {
        assert!(!v["points"][0][k].is_null(), "missing {k}");
    }
}

#[test]
fn correlation_and_table_files() {
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("c.toml");
    std::fs::write(&c, "seed = 3\n[correlations]\na = 1e6\nj_max = 2\nsamples = 1000\nreps = 8\nq_samples = 1000\n").unwrap();
    invoke(Command::Correlations, Some(&c), dir.path());
    assert_eq!(header(&dir.path().join("correlations.csv")), ["kernel", "lag", "correlation", "correlation_se", "ratio", "config_hash"]);
    assert_eq!(rows(&dir.path().join("correlations.csv")).len(), 3);
    envelope(&read_json(&dir.path().join("correlations.json")), "correlations");

    invoke(Command::Tables, Some(&c), dir.path());
    let t = dir.path().join("tables.csv");
    assert_eq!(header(&t), ["family", "h", "zeta_h", "eta", "d_over_d0", "config_hash"]);
    let mw: Vec<_> = rows(&t).into_iter().filter(|r| &r[0] == "middle_wall").collect();
    assert_eq!(&mw.last().unwrap()[1], "0.5");
    envelope(&read_json(&dir.path().join("tables.json")), "tables");
}
