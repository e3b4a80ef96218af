//! Experiment configuration: one TOML or JSON document per experiment.
//!
//! Both formats deserialize into the same [`ExperimentConfig`]; unknown keys
//! are rejected at every level and `seed` has no default. The config hash is
//! the SHA-256 of the canonical JSON form, so a TOML file and its JSON
//! translation hash identically.

use crate::error::{CliError, CliResult};
use randflight::analysis::Family;
use randflight::flight::{ChannelConfig, FlightKernel, McOptions, TruncationKind, TruncationSpec, MIN_LONG_REPS};
use randflight::kernels::{KernelKind, KernelSpec};
use randflight::spectral::SpectralConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_kernel")]
    pub kernel: KernelSpec,
    #[serde(default)]
    pub channel: ChannelSpec,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub truncation: TruncationSpec,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub spectral: SpectralConfig,
    #[serde(default)]
    pub mc: McOptions,
    #[serde(default)]
    pub exit_time: ExitTimeSpec,
    #[serde(default)]
    pub correlations: CorrelationSpec,
    #[serde(default)]
    pub tables: TablesSpec,
}

fn default_kernel() -> KernelSpec {
    KernelSpec::new(KernelKind::Semicircle)
}

/// Channel `R^k x B^{n-k}(r)`; the surface measure is the kernel's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelSpec {
    pub n: usize,
    pub k: usize,
    pub r: f64,
}

impl Default for ChannelSpec {
    fn default() -> Self {
        ChannelSpec { n: 2, k: 1, r: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSpec {
    pub a: Vec<f64>,
    pub t: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec { a: vec![1e2, 1e3, 1e4, 1e5], t: 1.0 }
    }
}

/// Runs the spectrum or simulate command once per listed value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default)]
    pub h: Option<Vec<f64>>,
    #[serde(default)]
    pub alpha: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitMode {
    Flight,
    /// Brownian motion with the reference diffusivity, as a sanity control.
    Brownian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExitTimeSpec {
    pub mode: ExitMode,
    /// Half-lengths of the channel in units of `r`.
    pub l_over_r: Vec<f64>,
    pub reps: usize,
    /// Collisions after which a trajectory is censored.
    pub budget: u64,
    /// Reference diffusivity; the closed form of the kernel when absent.
    pub d: Option<f64>,
    /// Brownian time step as a fraction of `L^2 / d`.
    pub dt_fraction: f64,
}

impl Default for ExitTimeSpec {
    fn default() -> Self {
        ExitTimeSpec {
            mode: ExitMode::Flight,
            l_over_r: vec![1e2, 1e3, 1e4],
            reps: MIN_LONG_REPS,
            budget: randflight::flight::DEFAULT_STEP_BUDGET,
            d: None,
            dt_fraction: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationSpec {
    pub a: f64,
    pub j_max: usize,
    pub samples: usize,
    pub reps: usize,
    pub truncation: TruncationSpec,
    /// Shallow angle at which the one-lag expectation is evaluated.
    pub q_phi: f64,
    pub q_lag: usize,
    pub q_samples: usize,
}

impl Default for CorrelationSpec {
    fn default() -> Self {
        CorrelationSpec {
            a: 1e8,
            j_max: 4,
            samples: 20_000,
            reps: 32,
            truncation: TruncationSpec::new(TruncationKind::Cone),
            q_phi: 1e-3,
            q_lag: 1,
            q_samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TablesSpec {
    pub families: Vec<Family>,
    /// Parameter grid shared by all families; each family's default grid when absent.
    pub grid: Option<Vec<f64>>,
}

impl Default for TablesSpec {
    fn default() -> Self {
        TablesSpec {
            families: vec![Family::Semicircle, Family::FlatTop, Family::MiddleWall, Family::FlatBottom, Family::Ms, Family::Iid],
            grid: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Toml,
    Json,
}

impl Format {
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("json") => Format::Json,
            _ => Format::Toml,
        }
    }
}

impl ExperimentConfig {
    /// Parses and checks a document. Parse errors carry line and column.
    pub fn parse(text: &str, format: Format) -> CliResult<Self> {
        let cfg: ExperimentConfig = match format {
            Format::Toml => toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?,
            Format::Json => serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?,
        };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, Format::from_path(path)).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Value-level checks that the schema cannot express.
    pub fn check(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        self.kernel.build::<f64>()?;
        self.channel()?;
        randflight::flight::ScalingSchedule::new(self.schedule.a.clone(), self.schedule.t)?;
        self.truncation.validate()?;
        self.correlations.truncation.validate()?;
        if let Some(s) = &self.sweep {
            match (&s.h, &s.alpha) {
                (Some(v), None) | (None, Some(v)) if !v.is_empty() => {}
                _ => return bad("sweep needs exactly one non-empty list, `h` or `alpha`".into()),
            }
        }
        if self.exit_time.l_over_r.iter().any(|&x| !(x >= 10.0)) {
            return bad("exit_time.l_over_r values must be at least 10".into());
        }
        if let Some(d) = self.exit_time.d {
            if !(d > 0.0) {
                return bad(format!("exit_time.d = {d} must be positive"));
            }
        }
        if !(self.exit_time.dt_fraction > 0.0 && self.exit_time.dt_fraction < 1.0) {
            return bad("exit_time.dt_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn channel(&self) -> CliResult<ChannelConfig<f64>> {
        let c = self.channel;
        if !(c.r > 0.0) {
            return Err(CliError::Config(format!("channel.r = {} must be positive", c.r)));
        }
        Ok(ChannelConfig::new(c.n, c.k, c.r, None, self.kernel.measure.build()?)?)
    }

    /// Kernel of the flight: the planar kernel in 2D channels, the diffuse
    /// mixture for `ms` kernels in higher dimension.
    pub fn flight_kernel(&self, spec: &KernelSpec) -> CliResult<FlightKernel<f64>> {
        if self.channel.n == 2 {
            return Ok(FlightKernel::Planar(spec.build()?));
        }
        match (spec.kind, spec.alpha) {
            (KernelKind::Ms, Some(alpha)) => Ok(FlightKernel::Mixture { alpha }),
            _ => Err(CliError::Config(format!("only `ms` kernels run in channels with n = {}", self.channel.n))),
        }
    }

    /// Kernel specifications after applying the sweep, if any.
    pub fn kernels(&self) -> Vec<KernelSpec> {
        match &self.sweep {
            None => vec![self.kernel.clone()],
            Some(s) => {
                if let Some(hs) = &s.h {
                    hs.iter().map(|&h| KernelSpec { h: Some(h), ..self.kernel.clone() }).collect()
                } else {
                    s.alpha.iter().flatten().map(|&a| KernelSpec { alpha: Some(a), ..self.kernel.clone() }).collect()
                }
            }
        }
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
