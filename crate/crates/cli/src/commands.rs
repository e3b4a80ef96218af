//! The six subcommands. Each writes its outputs under the output directory
//! and returns an [`Outcome`]; every JSON report carries the command, the
//! seed, the config hash and the crate versions.

use crate::config::{ExitMode, ExperimentConfig};
use crate::error::{CliError, CliResult};
use randflight::analysis::{self, ClosedForm, Family};
use randflight::flight::{self, ExitTimeReport, McReport, ScalingSchedule};
use randflight::geometry::{CellFamily, CellGeometry};
use randflight::kernels::{KernelKind, KernelSpec};
use randflight::spectral::{self, SpectralReport};
use randflight::validate::{self, Profile};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Spectrum,
    Simulate,
    ExitTime,
    Correlations,
    Validate,
    Tables,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Spectrum => "spectrum",
            Command::Simulate => "simulate",
            Command::ExitTime => "exit-time",
            Command::Correlations => "correlations",
            Command::Validate => "validate",
            Command::Tables => "tables",
        }
    }

    fn needs_config(self) -> bool {
        !matches!(self, Command::Validate | Command::Tables)
    }
}

/// Everything a command needs besides its own settings.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub profile: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// False only when a validation suite ran and failed.
    pub passed: bool,
    pub files: Vec<PathBuf>,
    /// Human-readable summary printed to stdout.
    pub summary: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub randflight: &'static str,
    pub randflight_cli: &'static str,
}

pub fn versions() -> Versions {
    Versions { randflight: randflight::VERSION, randflight_cli: env!("CARGO_PKG_VERSION") }
}

#[derive(Serialize)]
struct Envelope<'a, R: Serialize> {
    command: &'static str,
    seed: u64,
    config_hash: &'a str,
    versions: Versions,
    #[serde(flatten)]
    report: R,
}

struct Context {
    command: Command,
    config: ExperimentConfig,
    hash: String,
    out_dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Context {
    fn seed(&self) -> u64 {
        self.config.seed
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write_json<R: Serialize>(&mut self, name: &str, report: R) -> CliResult<()> {
        let env = Envelope { command: self.command.name(), seed: self.seed(), config_hash: &self.hash, versions: versions(), report };
        let mut text = serde_json::to_string_pretty(&env).map_err(|e| CliError::Numeric(e.to_string()))?;
        text.push('\n');
        self.write_text(name, &text)
    }

    fn write_text(&mut self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| CliError::Numeric(format!("{}: {e}", p.display())))?;
        self.files.push(p);
        Ok(())
    }

    fn write_csv<R: Serialize>(&mut self, name: &str, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
        let p = self.path(name);
        let err = |e: csv::Error| CliError::Numeric(format!("{}: {e}", p.display()));
        let mut w = csv::Writer::from_path(&p).map_err(err)?;
        for r in rows {
            w.serialize(r).map_err(err)?;
        }
        w.flush().map_err(|e| CliError::Numeric(format!("{}: {e}", p.display())))?;
        self.files.push(p);
        Ok(())
    }
}

fn load_config(inv: &Invocation) -> CliResult<ExperimentConfig> {
    let mut cfg = match &inv.config {
        Some(p) => ExperimentConfig::load(p)?,
        None if inv.command.needs_config() => return Err(CliError::Config(format!("`{}` needs --config", inv.command.name()))),
        None => {
            let seed = match (inv.command, inv.seed) {
                (Command::Validate, None) => return Err(CliError::Config("a seed is required: pass --seed or --config".into())),
                (_, s) => s.unwrap_or(0),
            };
            ExperimentConfig::parse(&format!("seed = {seed}\n"), crate::config::Format::Toml)?
        }
    };
    if let Some(s) = inv.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs one command to completion.
pub fn run(inv: &Invocation) -> CliResult<Outcome> {
    if inv.profile.is_some() && inv.command != Command::Validate {
        return Err(CliError::Config("--profile applies to `validate` only".into()));
    }
    let config = load_config(inv)?;
    std::fs::create_dir_all(&inv.out_dir).map_err(|e| CliError::Numeric(format!("{}: {e}", inv.out_dir.display())))?;
    let hash = config.hash();
    let mut ctx = Context { command: inv.command, config, hash, out_dir: inv.out_dir.clone(), files: Vec::new() };
    let (passed, summary) = match inv.command {
        Command::Spectrum => spectrum(&mut ctx)?,
        Command::Simulate => simulate(&mut ctx)?,
        Command::ExitTime => exit_time(&mut ctx)?,
        Command::Correlations => correlations(&mut ctx)?,
        Command::Tables => tables(&mut ctx)?,
        Command::Validate => {
            let profile = Profile::parse(inv.profile.as_deref().unwrap_or("quick"))?;
            run_validate(&mut ctx, profile)?
        }
    };
    Ok(Outcome { passed, files: ctx.files, summary })
}

#[derive(Serialize)]
struct SpectrumRun {
    #[serde(flatten)]
    report: SpectralReport,
    closed_form: Option<ClosedForm>,
}

fn spectrum(ctx: &mut Context) -> CliResult<(bool, String)> {
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    for spec in ctx.config.kernels() {
        let k = spec.build::<f64>()?;
        let report = spectral::run_pipeline(k.as_ref(), &ctx.config.spectral, ctx.seed())?;
        lines.push(format!("{}: eta = {:.6} +/- {:.6}, gap = {:.4}", report.kernel, report.eta, report.uncertainty, report.gap));
        runs.push(SpectrumRun { report, closed_form: analysis::closed_form_for(&spec) });
    }
    #[derive(Serialize)]
    struct Out {
        runs: Vec<SpectrumRun>,
    }
    ctx.write_json("spectrum.json", Out { runs })?;
    Ok((true, lines.join("\n")))
}

/// One line of the simulation CSV.
#[derive(Serialize)]
struct SimRow<'a> {
    kernel: &'a str,
    a: f64,
    rep: usize,
    sum_z: f64,
    sum_z_trunc: f64,
    n_collisions: u64,
    exit_time: Option<f64>,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct SimulateRun {
    #[serde(flatten)]
    report: McReport,
    closed_form: Option<ClosedForm>,
}

fn simulate(ctx: &mut Context) -> CliResult<(bool, String)> {
    let cfg = ctx.config.clone();
    let channel = cfg.channel()?;
    let schedule = ScalingSchedule::new(cfg.schedule.a.clone(), cfg.schedule.t)?;
    let mut runs = Vec::new();
    let mut lines = Vec::new();
    for spec in cfg.kernels() {
        let k = cfg.flight_kernel(&spec)?;
        let report = flight::diffusivity_mc(&k, &channel, &schedule, &cfg.truncation, &cfg.mc, cfg.seed)?;
        lines.push(format!("{}: eta = {:.5} +/- {:.5}, D0 = {:.6}", report.kernel, report.eta, report.eta_se, report.d0));
        runs.push(SimulateRun { report, closed_form: analysis::closed_form_for(&spec) });
    }
    let hash = ctx.hash.clone();
    let rows: Vec<SimRow> = runs
        .iter()
        .flat_map(|r| {
            let h = hash.as_str();
            r.report.reps.iter().map(move |x| SimRow {
                kernel: &r.report.kernel,
                a: x.a,
                rep: x.rep,
                sum_z: x.sum_z,
                sum_z_trunc: x.sum_z_trunc,
                n_collisions: x.n_collisions,
                exit_time: x.exit_time,
                seed: x.seed,
                config_hash: h,
            })
        })
        .collect();
    ctx.write_csv("simulate.csv", rows)?;
    #[derive(Serialize)]
    struct Out {
        runs: Vec<SimulateRun>,
    }
    ctx.write_json("simulate.json", Out { runs })?;
    Ok((true, lines.join("\n")))
}

#[derive(Serialize)]
struct ExitRow<'a> {
    kernel: &'a str,
    l_over_r: f64,
    rep: usize,
    exit_time: Option<f64>,
    n_collisions: u64,
    seed: u64,
    config_hash: &'a str,
}

#[derive(Serialize)]
struct ExitPoint {
    #[serde(flatten)]
    report: ExitTimeReport,
    seed: u64,
    /// `L^2/ln(L/r)` (one transverse dimension) or `L^2` (otherwise).
    regressor: f64,
    predicted: f64,
}

#[derive(Serialize)]
struct ExitSummary {
    mode: ExitMode,
    d_reference: f64,
    points: Vec<ExitPoint>,
    /// Fitted `1/D`.
    slope: f64,
    slope_se: f64,
    /// `slope * d_reference`; one when the asymptotic law holds.
    slope_ratio: f64,
    censored_fraction: f64,
}

fn reference_diffusivity(cfg: &ExperimentConfig) -> CliResult<f64> {
    if let Some(d) = cfg.exit_time.d {
        return Ok(d);
    }
    let c = cfg.channel;
    let closed = analysis::closed_form_for(&cfg.kernel).ok_or_else(|| CliError::Config("no closed form for this kernel: set exit_time.d".into()))?;
    let m = flight::closed_form_moments(c.n, c.k, c.r, &cfg.kernel.measure.build::<f64>()?)?;
    Ok(closed.d_over_d0 * m.d0)
}

fn exit_time(ctx: &mut Context) -> CliResult<(bool, String)> {
    let cfg = ctx.config.clone();
    let spec = &cfg.exit_time;
    let d_ref = reference_diffusivity(&cfg)?;
    let channel = cfg.channel()?;
    let codim = cfg.channel.n - cfg.channel.k;
    let mut points = Vec::new();
    for (i, &lr) in spec.l_over_r.iter().enumerate() {
        let length = lr * cfg.channel.r;
        let seed = cfg.seed.wrapping_add(i as u64);
        let (report, regressor, predicted) = match spec.mode {
            ExitMode::Flight => {
                let k = cfg.flight_kernel(&cfg.kernel)?;
                let r = flight::mean_exit_time(&k, &channel.clone().with_length(length)?, spec.reps, spec.budget, seed)?;
                let x = analysis::predicted_tau(length, cfg.channel.r, 1.0, codim)?;
                (r, x, x / d_ref)
            }
            ExitMode::Brownian => {
                let x = length * length;
                let r = flight::brownian_exit_time(d_ref, length, spec.dt_fraction * x / d_ref, spec.reps, seed)?;
                (r, x, x / d_ref)
            }
        };
        points.push(ExitPoint { report, seed, regressor, predicted });
    }
    let xs: Vec<f64> = points.iter().map(|p| p.regressor).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.report.mean).collect();
    let ses: Vec<f64> = points.iter().map(|p| p.report.se).collect();
    let (slope, slope_se) = analysis::slope_through_origin(&xs, &ys, &ses)?;
    let total: usize = points.iter().map(|p| p.report.reps).sum();
    let censored: usize = points.iter().map(|p| p.report.censored).sum();
    let hash = ctx.hash.clone();
    let rows: Vec<ExitRow> = points
        .iter()
        .flat_map(|p| {
            let h = hash.as_str();
            p.report.times.iter().zip(&p.report.collisions).enumerate().map(move |(rep, (t, n))| ExitRow {
                kernel: &p.report.kernel,
                l_over_r: p.report.l_over_r,
                rep,
                exit_time: *t,
                n_collisions: *n,
                seed: p.seed,
                config_hash: h,
            })
        })
        .collect();
    ctx.write_csv("exit_time.csv", rows)?;
    let mut lines: Vec<String> = points
        .iter()
        .map(|p| format!("L/r = {:e}: tau = {:.4e} +/- {:.2e}, predicted {:.4e}, censored {}", p.report.l_over_r, p.report.mean, p.report.se, p.predicted, p.report.censored))
        .collect();
    let summary = ExitSummary { mode: spec.mode, d_reference: d_ref, points, slope, slope_se, slope_ratio: slope * d_ref, censored_fraction: censored as f64 / total as f64 };
    lines.push(format!("slope = {:.5e} +/- {:.2e}, slope * D = {:.4}", summary.slope, summary.slope_se, summary.slope_ratio));
    ctx.write_json("exit_time.json", summary)?;
    Ok((true, lines.join("\n")))
}

#[derive(Serialize)]
struct LagRow<'a> {
    kernel: &'a str,
    lag: usize,
    correlation: Option<f64>,
    correlation_se: Option<f64>,
    ratio: f64,
    config_hash: &'a str,
}

fn cell_of(spec: &KernelSpec) -> Option<CellGeometry<f64>> {
    match spec.kind {
        KernelKind::Semicircle => Some(CellGeometry::semicircle()),
        KernelKind::FlatBottom => CellGeometry::new(CellFamily::FlatBottom, spec.h?).ok(),
        _ => None,
    }
}

fn correlations(ctx: &mut Context) -> CliResult<(bool, String)> {
    let cfg = ctx.config.clone();
    let c = &cfg.correlations;
    let k = cfg.flight_kernel(&cfg.kernel)?;
    let channel = cfg.channel()?;
    let profile = flight::correlation_profile(&k, &channel, c.a, c.j_max, &c.truncation, c.samples, c.reps, cfg.seed)?;
    let shallow = match cell_of(&cfg.kernel) {
        Some(cell) => Some(flight::shallow_q_expectation(&cell, c.q_phi, c.q_lag, c.q_samples, cfg.seed)?),
        None => None,
    };
    let zeta_reference = analysis::closed_form_for(&cfg.kernel).and_then(|f| f.zeta);
    let label = k.label();
    let hash = ctx.hash.clone();
    let rows: Vec<LagRow> = profile
        .ratios
        .iter()
        .enumerate()
        .map(|(j, &ratio)| LagRow {
            kernel: &label,
            lag: j,
            correlation: if j == 0 { None } else { profile.correlations.get(j - 1).copied() },
            correlation_se: if j == 0 { None } else { profile.correlation_se.get(j - 1).copied() },
            ratio,
            config_hash: &hash,
        })
        .collect();
    ctx.write_csv("correlations.csv", rows)?;
    let mut summary = format!("{label}: zeta_hat = {:.5} +/- {:.5}", profile.zeta_hat, profile.zeta_se);
    if let Some(z) = zeta_reference {
        summary.push_str(&format!(" (closed form {z:.5})"));
    }
    if let Some(q) = &shallow {
        summary.push_str(&format!("\nshallow expectation at phi = {:e}, lag {}: {:.6} +/- {:.1e}", c.q_phi, c.q_lag, q.value, q.se));
    }
    #[derive(Serialize)]
    struct Out {
        kernel: String,
        profile: flight::CorrelationProfile,
        zeta_reference: Option<f64>,
        shallow_expectation: Option<flight::QExpectation>,
    }
    ctx.write_json("correlations.json", Out { kernel: label, profile, zeta_reference, shallow_expectation: shallow })?;
    Ok((true, summary))
}

#[derive(Serialize)]
struct TableLine<'a> {
    family: Family,
    h: f64,
    zeta_h: Option<f64>,
    eta: f64,
    d_over_d0: f64,
    config_hash: &'a str,
}

fn tables(ctx: &mut Context) -> CliResult<(bool, String)> {
    let t = &ctx.config.tables;
    let families: Vec<(Family, Vec<f64>)> = t.families.iter().map(|&f| (f, t.grid.clone().unwrap_or_else(|| analysis::default_grid(f)))).collect();
    let rows = analysis::table(&families)?;
    let hash = ctx.hash.clone();
    let n = rows.len();
    ctx.write_csv(
        "tables.csv",
        rows.iter().map(|r| TableLine { family: r.family, h: r.h, zeta_h: r.zeta_h, eta: r.eta, d_over_d0: r.d_over_d0, config_hash: &hash }),
    )?;
    #[derive(Serialize)]
    struct Out {
        rows: usize,
    }
    ctx.write_json("tables.json", Out { rows: n })?;
    Ok((true, format!("{n} rows written")))
}

fn run_validate(ctx: &mut Context, profile: Profile) -> CliResult<(bool, String)> {
    let report = validate::run_suite(profile, ctx.seed())?;
    ctx.write_text("validate.xml", &report.junit_xml())?;
    let summary = report.summary();
    ctx.write_text("validate.txt", &summary)?;
    let passed = report.passed();
    ctx.write_json("validate.json", &report)?;
    Ok((passed, summary))
}

/// Joins the files of an outcome for display.
pub fn describe(files: &[PathBuf]) -> String {
    files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}
