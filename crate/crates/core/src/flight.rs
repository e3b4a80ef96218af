//! Random flights in a channel `R^k x B^{n-k}` driven by a collision kernel.
//!
//! Chains are simulated without rescaling: the a-scaling enters through the
//! chain length `a h(a) t / E[tau]` and the `1/a^2` normalization of squared
//! sums. Displacements follow `Z(v) = 2r <v,e_n> v_1 / |v_2|^2` and flight times
//! `tau = 2r <v,e_n> / |v_2|^2`; in the plane `Z = 2r cot(phi)`.
//!
//! Every replication owns a stream keyed by its index, so results do not
//! depend on how replications are spread over worker threads.

use crate::geometry::{CellGeometry, MIN_ENTRY_ANGLE};
use crate::kernels::{AngleState, CollisionKernel, KernelRef, MicrostructureKernel, SurfaceMeasure};
use crate::rng::{self, Stream};
use crate::spectral::{eta_extrapolate, EtaExtrapolation};
use crate::stats::{self, KsResult};
use crate::{Error, Real, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// Angles closer than this to the wall are rejected as grazing.
pub const GRAZING_ANGLE: f64 = 1e-12;
/// Collision budget per exit-time trajectory.
pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000_000;
/// Fewest replications accepted by the exit-time and CLT experiments.
pub const MIN_LONG_REPS: usize = 1000;

/// Channel `R^k x B^{n-k}` of radius `r`, optionally cut at `|x| = L`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelConfig<T> {
    pub n: usize,
    pub k: usize,
    pub r: T,
    pub length: Option<T>,
    pub measure: SurfaceMeasure<T>,
}

impl<T: Real> ChannelConfig<T> {
    pub fn new(n: usize, k: usize, r: T, length: Option<T>, measure: SurfaceMeasure<T>) -> Result<Self> {
        if k < 1 || k + 1 > n {
            return Err(Error::Domain(format!("need 1 <= k <= n-1, got n={n}, k={k}")));
        }
        if !(r > T::zero()) {
            return Err(Error::Domain(format!("channel radius must be positive, got {r}")));
        }
        if let Some(l) = length {
            if !(l > r) {
                return Err(Error::Domain(format!("channel half-length {l} must exceed the radius {r}")));
            }
        }
        Ok(ChannelConfig { n, k, r, length, measure })
    }

    /// The 2D strip of radius `r`.
    pub fn planar(r: T, measure: SurfaceMeasure<T>) -> Result<Self> {
        Self::new(2, 1, r, None, measure)
    }

    pub fn with_length(self, l: T) -> Result<Self> {
        Self::new(self.n, self.k, self.r, Some(l), self.measure)
    }

    /// Number of cross-section dimensions `n - k`.
    pub fn codim(&self) -> usize {
        self.n - self.k
    }

    pub fn is_planar(&self) -> bool {
        self.n == 2
    }

    /// Dimensions for which flights can be simulated.
    pub fn check_simulable(&self) -> Result<()> {
        match (self.n, self.k) {
            (2, 1) | (3, 1) | (3, 2) => Ok(()),
            (n, k) => Err(Error::Unsupported(format!("flights are simulated for (n,k) in (2,1), (3,1), (3,2), not ({n},{k})"))),
        }
    }
}

/// Planar displacement `2r cot(phi)` and flight time `2r / (s sin(phi))`.
pub fn planar_displacement<T: Real>(phi: T, speed: T, r: T) -> Result<(T, T)> {
    let d = phi.min(T::PI() - phi);
    if !(d >= T::lit(GRAZING_ANGLE)) {
        return Err(Error::Domain(format!("grazing flight at angle {phi}")));
    }
    let two_r = T::lit(2.0) * r;
    Ok((two_r * phi.cos() / phi.sin(), two_r / (speed * phi.sin())))
}

/// Horizontal displacement (length `k`) and flight time of a velocity whose
/// last component is the inward normal.
pub fn step_displacement<T: Real>(v: &[T], cfg: &ChannelConfig<T>) -> Result<(Vec<T>, T)> {
    if v.len() != cfg.n {
        return Err(Error::Domain(format!("velocity has {} components, channel has {}", v.len(), cfg.n)));
    }
    let vn = v[cfg.n - 1];
    let speed = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
    if !(vn > T::zero()) || vn / speed < T::lit(GRAZING_ANGLE) {
        return Err(Error::Domain("velocity does not point into the channel".into()));
    }
    let cross = v[cfg.k..].iter().fold(T::zero(), |a, &x| a + x * x);
    let tau = T::lit(2.0) * cfg.r * vn / cross;
    Ok((v[..cfg.k].iter().map(|&x| tau * x).collect(), tau))
}

/// Closed-form moments of a single flight under the stationary law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    /// `E[(Z^u)^2] = 8r^2/((n-k)^2-1)` when `n - k >= 2`.
    pub ez2: Option<f64>,
    /// Coefficient of `ln a` in the truncated second moment when `n - k = 1`.
    pub ez2_log_coefficient: Option<f64>,
    pub e_tau: f64,
    /// Baseline diffusivity of i.i.d. velocities.
    pub d0: f64,
}

pub fn closed_form_moments(n: usize, k: usize, r: f64, measure: &SurfaceMeasure<f64>) -> Result<Moments> {
    if k < 1 || k + 1 > n {
        return Err(Error::Domain(format!("need 1 <= k <= n-1, got n={n}, k={k}")));
    }
    if !(r > 0.0) {
        return Err(Error::Domain("channel radius must be positive".into()));
    }
    let c = (n - k) as f64;
    let nf = n as f64;
    let e_tau = match *measure {
        SurfaceMeasure::CosineLaw { speed } => {
            2.0 * r * std::f64::consts::PI.sqrt() / (speed * c) * (ln_gamma((nf + 1.0) / 2.0) - ln_gamma(nf / 2.0)).exp()
        }
        SurfaceMeasure::Maxwellian { beta, mass } => r / c * (2.0 * std::f64::consts::PI * beta * mass).sqrt(),
    };
    // integrating Z^2 against the lifted uniform-ball law gives 8r^2/(c^2-1)
    let (ez2, ez2_log_coefficient) = if n - k >= 2 { (Some(8.0 * r * r / (c * c - 1.0)), None) } else { (None, Some(4.0 * r * r)) };
    let d0 = ez2.or(ez2_log_coefficient).unwrap() / e_tau;
    Ok(Moments { ez2, ez2_log_coefficient, e_tau, d0 })
}

/// `E[cot^2(phi) 1{|cot phi| <= x}]` under `sin(phi)/2`.
pub fn truncated_second_moment(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let p = (1.0 / x).atan();
    -(p / 2.0).tan().ln() - p.cos()
}

/// `h(a) = a / ln a` for `n - k = 1`, `a` otherwise.
pub fn time_scale(a: f64, codim: usize) -> f64 {
    if codim == 1 {
        a / a.ln()
    } else {
        a
    }
}

/// `n_{a,t} = a h(a) t / E[tau]`, rounded.
pub fn chain_length(a: f64, t: f64, codim: usize, e_tau: f64) -> usize {
    (a * time_scale(a, codim) * t / e_tau).round().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSchedule {
    pub a_values: Vec<f64>,
    pub t: f64,
}

impl ScalingSchedule {
    pub fn new(a_values: Vec<f64>, t: f64) -> Result<Self> {
        let s = ScalingSchedule { a_values, t };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.a_values.is_empty() {
            return Err(Error::Domain("schedule needs at least one a value".into()));
        }
        if self.a_values.iter().any(|&a| !(a >= 10.0)) {
            return Err(Error::Domain("a values must be at least 10".into()));
        }
        if self.a_values.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Domain("a values must increase".into()));
        }
        if !(self.t > 0.0) {
            return Err(Error::Domain("time horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Which displacements count toward the truncated sums.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TruncationKind {
    /// `|x| <= a`.
    Standard,
    /// `exp(ln^eta a) < |x| < a / ln^gamma a`.
    Cone,
    /// The cone widened by `3^C(a)` on both sides.
    Widened,
}

/// Truncation of displacements measured in units of the channel width `2r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationSpec {
    pub kind: TruncationKind,
    pub eta_exp: f64,
    pub gamma_exp: f64,
}

impl Default for TruncationSpec {
    fn default() -> Self {
        TruncationSpec { kind: TruncationKind::Standard, eta_exp: 0.5, gamma_exp: 2.0 }
    }
}

/// `C(a) = ceil(log_3 ln a)`, at least 1.
pub fn lag_count(a: f64) -> usize {
    (a.ln().ln() / 3f64.ln()).ceil().max(1.0) as usize
}

impl TruncationSpec {
    pub fn new(kind: TruncationKind) -> Self {
        TruncationSpec { kind, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_exp > 0.0 && self.eta_exp < 1.0) {
            return Err(Error::Domain(format!("eta exponent {} outside (0,1)", self.eta_exp)));
        }
        if !(self.gamma_exp > 1.0) {
            return Err(Error::Domain(format!("gamma exponent {} must exceed 1", self.gamma_exp)));
        }
        Ok(())
    }

    /// Open window `(lo, hi)` on `|x|` (`lo = 0` and `hi` inclusive for the standard kind).
    pub fn window(&self, a: f64) -> (f64, f64) {
        let la = a.ln();
        let lo = la.powf(self.eta_exp).exp();
        let hi = a / la.powf(self.gamma_exp);
        match self.kind {
            TruncationKind::Standard => (0.0, a),
            TruncationKind::Cone => (lo, hi),
            TruncationKind::Widened => {
                let w = 3f64.powi(lag_count(a) as i32);
                (lo / w, hi * w)
            }
        }
    }

    pub fn keeps(&self, x: f64, a: f64) -> bool {
        let x = x.abs();
        let (lo, hi) = self.window(a);
        match self.kind {
            TruncationKind::Standard => x <= hi,
            _ => x > lo && x < hi,
        }
    }

    /// Truncation applied at positive lags in correlation sums: the widened
    /// window for the cone kinds, the same window otherwise.
    pub fn lagged(&self) -> TruncationSpec {
        match self.kind {
            TruncationKind::Standard => *self,
            _ => TruncationSpec { kind: TruncationKind::Widened, ..*self },
        }
    }
}

/// Velocity dynamics at the walls.
#[derive(Debug, Clone)]
pub enum FlightKernel<T: Real> {
    /// A kernel on the planar angle (2D channels).
    Planar(KernelRef<T>),
    /// Diffuse re-emission from the channel measure with probability
    /// `alpha`, velocity kept otherwise (any dimension).
    Mixture { alpha: T },
}

impl<T: Real> FlightKernel<T> {
    pub fn label(&self) -> String {
        match self {
            FlightKernel::Planar(k) => k.label(),
            FlightKernel::Mixture { alpha } => format!("ms(alpha={alpha})"),
        }
    }

    fn check(&self, cfg: &ChannelConfig<T>) -> Result<()> {
        cfg.check_simulable()?;
        match self {
            FlightKernel::Planar(k) => {
                if !cfg.is_planar() {
                    return Err(Error::Unsupported("angle kernels drive planar channels only".into()));
                }
                if k.stationary() != cfg.measure {
                    return Err(Error::Domain(format!(
                        "kernel law {} differs from the channel law {}",
                        k.stationary().label(),
                        cfg.measure.label()
                    )));
                }
                Ok(())
            }
            FlightKernel::Mixture { alpha } => {
                if !(*alpha >= T::zero() && *alpha <= T::one()) {
                    return Err(Error::Domain(format!("alpha {alpha} outside [0,1]")));
                }
                Ok(())
            }
        }
    }
}

/// One flight: component along the first horizontal axis, norm of the
/// horizontal displacement and duration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Leg<T> {
    pub z: T,
    pub norm: T,
    pub tau: T,
}

enum WalkState<T> {
    Planar(AngleState<T>),
    Spatial(Vec<T>),
}

/// Velocity chain started from the stationary law.
struct Walker<'a, T: Real> {
    kernel: &'a FlightKernel<T>,
    cfg: &'a ChannelConfig<T>,
    state: WalkState<T>,
}

impl<'a, T: Real> Walker<'a, T> {
    fn new(kernel: &'a FlightKernel<T>, cfg: &'a ChannelConfig<T>, rng: &mut Stream) -> Self {
        let state = match kernel {
            FlightKernel::Planar(_) => WalkState::Planar(cfg.measure.sample_state(rng)),
            FlightKernel::Mixture { .. } => WalkState::Spatial(spatial_draw(cfg, rng)),
        };
        Walker { kernel, cfg, state }
    }

    fn leg(&self) -> Result<Leg<T>> {
        match &self.state {
            WalkState::Planar(s) => {
                let (z, tau) = planar_displacement(s.phi, s.speed, self.cfg.r)?;
                Ok(Leg { z, norm: z.abs(), tau })
            }
            WalkState::Spatial(v) => {
                let (z, tau) = step_displacement(v, self.cfg)?;
                let norm = z.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
                Ok(Leg { z: z[0], norm, tau })
            }
        }
    }

    fn advance(&mut self, rng: &mut Stream) -> Result<()> {
        match (&mut self.state, self.kernel) {
            (WalkState::Planar(s), FlightKernel::Planar(k)) => {
                *s = k.step(*s, rng)?;
            }
            (WalkState::Spatial(v), FlightKernel::Mixture { alpha }) => {
                let u: T = rng::uniform(rng);
                if u < *alpha {
                    *v = spatial_draw(self.cfg, rng);
                }
            }
            _ => unreachable!("walker state matches its kernel"),
        }
        Ok(())
    }

    fn angle(&self) -> T {
        match &self.state {
            WalkState::Planar(s) => s.phi,
            WalkState::Spatial(v) => {
                let speed = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
                (v[v.len() - 1] / speed).asin()
            }
        }
    }

    fn speed(&self) -> T {
        match &self.state {
            WalkState::Planar(s) => s.speed,
            WalkState::Spatial(v) => v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt(),
        }
    }

    fn horizontal(&self) -> Result<Vec<T>> {
        match &self.state {
            WalkState::Planar(s) => Ok(vec![planar_displacement(s.phi, s.speed, self.cfg.r)?.0]),
            WalkState::Spatial(v) => Ok(step_displacement(v, self.cfg)?.0),
        }
    }
}

/// Stationary velocity away from grazing incidence.
fn spatial_draw<T: Real>(cfg: &ChannelConfig<T>, rng: &mut Stream) -> Vec<T> {
    loop {
        let v = cfg.measure.sample_velocity(cfg.n, rng);
        let speed = v.iter().fold(T::zero(), |a, &x| a + x * x).sqrt();
        if v[cfg.n - 1] / speed > T::lit(MIN_ENTRY_ANGLE) {
            return v;
        }
    }
}

/// A simulated chain with its flights.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightRecord<T> {
    /// Angle between the velocity and the wall after each collision.
    pub angles: Vec<T>,
    pub speeds: Vec<T>,
    /// Horizontal displacement of each flight (`k` components).
    pub displacements: Vec<Vec<T>>,
    pub times: Vec<T>,
    pub exit_time: Option<T>,
}

/// `steps` flights of the chain started from the stationary law.
pub fn simulate_chain<T: Real>(kernel: &FlightKernel<T>, cfg: &ChannelConfig<T>, steps: usize, rng: &mut Stream) -> Result<FlightRecord<T>> {
    if steps == 0 {
        return Err(Error::Domain("at least one step is needed".into()));
    }
    kernel.check(cfg)?;
    let mut w = Walker::new(kernel, cfg, rng);
    let mut rec = FlightRecord { angles: Vec::with_capacity(steps), speeds: Vec::with_capacity(steps), displacements: Vec::with_capacity(steps), times: Vec::with_capacity(steps), exit_time: None };
    for j in 0..steps {
        rec.angles.push(w.angle());
        rec.speeds.push(w.speed());
        rec.displacements.push(w.horizontal()?);
        rec.times.push(w.leg()?.tau);
        if j + 1 < steps {
            w.advance(rng)?;
        }
    }
    Ok(rec)
}

/// How the diffusivity is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Squared truncated sums over chains of length `n_{a,t}`.
    ChainSum,
    /// Lagged correlations of the truncated displacement with the starting
    /// angle drawn from the displacement-weighted law (planar kernels).
    CorrelationSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McOptions {
    pub estimator: Estimator,
    pub reps: usize,
    /// Starting angles per replication (correlation estimator).
    pub samples: usize,
    /// Lags summed per starting angle (correlation estimator).
    pub lags: usize,
    /// Relative standard error above which a warning is attached.
    pub target_rel_error: f64,
}

impl Default for McOptions {
    fn default() -> Self {
        McOptions { estimator: Estimator::CorrelationSum, reps: 64, samples: 40_000, lags: 16, target_rel_error: 0.05 }
    }
}

/// Per-replication output of a diffusivity run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRecord {
    pub a: f64,
    pub rep: usize,
    /// Chain sums: sum of displacements along the first axis. Correlation
    /// sums: sum over starting angles of the untruncated lagged ratios.
    pub sum_z: f64,
    /// Same with the truncation applied.
    pub sum_z_trunc: f64,
    /// Collisions simulated in the replication.
    pub n_collisions: u64,
    pub exit_time: Option<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McPoint {
    pub a: f64,
    pub d_hat: f64,
    pub d_se: f64,
    pub eta_hat: f64,
    pub eta_se: f64,
    /// Chain length (chain sums) or lags per start (correlation sums).
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub kernel: String,
    pub estimator: Estimator,
    pub d0: f64,
    pub points: Vec<McPoint>,
    /// `1/ln a` extrapolation of `eta_hat` (two or more points).
    pub extrapolation: Option<EtaExtrapolation>,
    pub eta: f64,
    pub eta_se: f64,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub reps: Vec<RepRecord>,
}

/// Diffusivity estimates along the schedule. The chain estimator returns
/// `D_a = E[(sum Z_a)^2] / (a^2 t)` literally and `eta_a = D_a / D0`; the
/// correlation estimator targets `eta_a = sum (1+l)/(1-l) Pi_a(dl)` and
/// reports `D_a = eta_a D0`.
pub fn diffusivity_mc<T: Real>(
    kernel: &FlightKernel<T>,
    cfg: &ChannelConfig<T>,
    schedule: &ScalingSchedule,
    trunc: &TruncationSpec,
    opts: &McOptions,
    seed: u64,
) -> Result<McReport> {
    kernel.check(cfg)?;
    schedule.validate()?;
    trunc.validate()?;
    if opts.reps < 32 {
        return Err(Error::Domain(format!("at least 32 replications are needed, got {}", opts.reps)));
    }
    let moments = closed_form_moments(cfg.n, cfg.k, cfg.r.f64(), &cfg.measure.to_f64())?;
    let (points, reps) = match opts.estimator {
        Estimator::ChainSum => chain_sum_points(kernel, cfg, schedule, trunc, opts, &moments, seed)?,
        Estimator::CorrelationSum => correlation_sum_points(kernel, schedule, trunc, opts, &moments, seed)?,
    };
    let mut warnings = Vec::new();
    for p in &points {
        if p.eta_se > opts.target_rel_error * p.eta_hat.abs() {
            warnings.push(format!("a={:e}: relative error {:.3} above target {:.3}; more replications needed", p.a, p.eta_se / p.eta_hat.abs(), opts.target_rel_error));
        }
    }
    let extrapolation = if points.len() >= 2 {
        let e = eta_extrapolate(&points.iter().map(|p| (p.a, p.eta_hat)).collect::<Vec<_>>())?;
        if let Some(w) = &e.warning {
            warnings.push(w.clone());
        }
        Some(e)
    } else {
        None
    };
    let last = points.last().unwrap();
    let (eta, eta_se) = match &extrapolation {
        // intercept error: statistical error of the points scaled by the
        // leverage of the fit, plus the fit residual
        Some(e) => (e.eta, extrapolation_se(&points).hypot(e.uncertainty)),
        None => (last.eta_hat, last.eta_se),
    };
    Ok(McReport { kernel: kernel.label(), estimator: opts.estimator, d0: moments.d0, points, extrapolation, eta, eta_se, warnings, reps })
}

/// Standard error of the `1/ln a` intercept propagated from independent
/// point errors (points sharing samples make this conservative).
fn extrapolation_se(points: &[McPoint]) -> f64 {
    let x: Vec<f64> = points.iter().map(|p| 1.0 / p.a.ln()).collect();
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return points.iter().map(|p| p.eta_se).fold(0.0, f64::max);
    }
    // intercept = sum c_i y_i with c_i = 1/n - mx (x_i - mx)/sxx
    points.iter().zip(&x).map(|(p, xi)| (1.0 / n - mx * (xi - mx) / sxx).powi(2) * p.eta_se.powi(2)).sum::<f64>().sqrt()
}

fn chain_sum_points<T: Real>(
    kernel: &FlightKernel<T>,
    cfg: &ChannelConfig<T>,
    schedule: &ScalingSchedule,
    trunc: &TruncationSpec,
    opts: &McOptions,
    m: &Moments,
    seed: u64,
) -> Result<(Vec<McPoint>, Vec<RepRecord>)> {
    let two_r = 2.0 * cfg.r.f64();
    let mut points = Vec::new();
    let mut records = Vec::new();
    for (ai, &a) in schedule.a_values.iter().enumerate() {
        let steps = chain_length(a, schedule.t, cfg.codim(), m.e_tau);
        let reps: Vec<Result<RepRecord>> = (0..opts.reps)
            .into_par_iter()
            .map(|rep| {
                let index = (ai * opts.reps + rep) as u64;
                let mut rng = rng::stream(seed, "chain_sum", index);
                let mut w = Walker::new(kernel, cfg, &mut rng);
                let (mut s, mut st) = (0.0f64, 0.0f64);
                for j in 0..steps {
                    let leg = w.leg()?;
                    let z = leg.z.f64();
                    s += z;
                    if trunc.keeps(leg.norm.f64() / two_r, a) {
                        st += z;
                    }
                    if j + 1 < steps {
                        w.advance(&mut rng)?;
                    }
                }
                Ok(RepRecord { a, rep, sum_z: s, sum_z_trunc: st, n_collisions: steps as u64, exit_time: None, seed })
            })
            .collect();
        let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;
        let sq: Vec<f64> = reps.iter().map(|r| r.sum_z_trunc * r.sum_z_trunc / (a * a * schedule.t)).collect();
        let s = stats::summary(&sq);
        points.push(McPoint { a, d_hat: s.mean, d_se: s.se, eta_hat: s.mean / m.d0, eta_se: s.se / m.d0, steps });
        records.extend(reps);
    }
    Ok((points, records))
}

/// Angle with density proportional to `cot^2(phi) sin(phi)` on
/// `lo < |cot phi| <= hi`: `u = ln tan(phi/2)` is uniform under
/// `dphi / sin(phi)`, accepted with probability `cos^2(phi)`, then mirrored.
pub fn sample_weighted_angle(lo: f64, hi: f64, rng: &mut Stream) -> f64 {
    let phi_hi = (1.0 / hi).atan();
    let phi_lo = if lo > 0.0 { (1.0 / lo).atan() } else { std::f64::consts::FRAC_PI_2 };
    let (u0, u1) = ((phi_hi / 2.0).tan().ln(), (phi_lo / 2.0).tan().ln());
    loop {
        let u = u0 + (u1 - u0) * rng::uniform::<f64>(rng);
        let phi = 2.0 * u.exp().atan();
        let c = phi.cos();
        if rng::uniform::<f64>(rng) < c * c {
            return if rng::uniform::<f64>(rng) < 0.5 { phi } else { std::f64::consts::PI - phi };
        }
    }
}

fn planar_kernel<T: Real>(kernel: &FlightKernel<T>) -> Result<&KernelRef<T>> {
    match kernel {
        FlightKernel::Planar(k) => Ok(k),
        FlightKernel::Mixture { .. } => Err(Error::Unsupported("the correlation estimator needs a planar angle kernel".into())),
    }
}

fn correlation_sum_points<T: Real>(
    kernel: &FlightKernel<T>,
    schedule: &ScalingSchedule,
    trunc: &TruncationSpec,
    opts: &McOptions,
    m: &Moments,
    seed: u64,
) -> Result<(Vec<McPoint>, Vec<RepRecord>)> {
    let k = planar_kernel(kernel)?;
    if trunc.kind != TruncationKind::Standard {
        return Err(Error::Unsupported("the correlation estimator uses the standard truncation".into()));
    }
    if opts.samples == 0 || opts.lags == 0 {
        return Err(Error::Domain("samples and lags must be positive".into()));
    }
    let a_values = &schedule.a_values;
    let a_max = *a_values.last().unwrap();
    let na = a_values.len();
    // per replication and a: mean over starts of the truncated lagged ratios
    let reps: Vec<Result<(Vec<f64>, Vec<f64>, u64)>> = (0..opts.reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "correlation_sum", rep as u64);
            let mut trunc_sums = vec![0.0f64; na];
            let mut full_sums = vec![0.0f64; na];
            let mut collisions = 0u64;
            for _ in 0..opts.samples {
                let phi0 = sample_weighted_angle(0.0, a_max, &mut rng);
                let x0 = phi0.cos() / phi0.sin();
                let mut s = AngleState::new(T::lit(phi0), k.stationary().sample_speed(&mut rng));
                let mut acc = vec![0.0f64; na];
                let mut full = 0.0f64;
                for _ in 0..opts.lags {
                    s = k.step(s, &mut rng)?;
                    collisions += 1;
                    let x = s.phi.f64().cos() / s.phi.f64().sin();
                    full += x;
                    for (c, &a) in acc.iter_mut().zip(a_values) {
                        if x.abs() <= a {
                            *c += x;
                        }
                    }
                }
                for (i, &a) in a_values.iter().enumerate() {
                    if x0.abs() <= a {
                        trunc_sums[i] += acc[i] / x0;
                        full_sums[i] += full / x0;
                    }
                }
            }
            Ok((trunc_sums, full_sums, collisions))
        })
        .collect();
    let reps = reps.into_iter().collect::<Result<Vec<_>>>()?;
    let m2_max = truncated_second_moment(a_max);
    let mut points = Vec::new();
    let mut records = Vec::new();
    for (i, &a) in a_values.iter().enumerate() {
        let factor = 2.0 * m2_max / truncated_second_moment(a);
        let etas: Vec<f64> = reps.iter().map(|r| 1.0 + factor * r.0[i] / opts.samples as f64).collect();
        let s = stats::summary(&etas);
        points.push(McPoint { a, d_hat: s.mean * m.d0, d_se: s.se * m.d0, eta_hat: s.mean, eta_se: s.se, steps: opts.lags });
        for (rep, r) in reps.iter().enumerate() {
            records.push(RepRecord { a, rep, sum_z: r.1[i], sum_z_trunc: r.0[i], n_collisions: r.2, exit_time: None, seed });
        }
    }
    Ok((points, records))
}

/// Lagged correlations of truncated displacements from a shallow start.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationProfile {
    pub a: f64,
    /// `E[Z_{a,0} Z_{a,j}]` for `j = 1..=j_max`, in units of `4r^2`.
    pub correlations: Vec<f64>,
    pub correlation_se: Vec<f64>,
    /// `E[cot(Theta_j) / cot(Theta_0)]` under the displacement-weighted start (`j = 0..=j_max`).
    pub ratios: Vec<f64>,
    /// Least-squares geometric ratio of consecutive `ratios`.
    pub zeta_hat: f64,
    pub zeta_se: f64,
    /// `C(a)`.
    pub lag_budget: usize,
}

/// Starting angles are drawn with weight `Z^2` inside the truncation window
/// of `a`; positive lags use the widened window. The ratio fit uses
/// `r_{j+1} ~ zeta r_j`.
pub fn correlation_profile<T: Real>(
    kernel: &FlightKernel<T>,
    cfg: &ChannelConfig<T>,
    a: f64,
    j_max: usize,
    trunc: &TruncationSpec,
    samples: usize,
    reps: usize,
    seed: u64,
) -> Result<CorrelationProfile> {
    let k = planar_kernel(kernel)?;
    kernel.check(cfg)?;
    trunc.validate()?;
    if j_max == 0 || reps < 2 || samples == 0 {
        return Err(Error::Domain("need j_max >= 1, reps >= 2 and samples >= 1".into()));
    }
    let budget = lag_count(a);
    if j_max > budget + 3 {
        return Err(Error::Domain(format!("j_max {j_max} exceeds C(a) = {budget} plus margin")));
    }
    let (lo, hi) = trunc.window(a);
    let lagged = trunc.lagged();
    let per_rep: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "correlation_profile", rep as u64);
            let mut sums = vec![0.0f64; j_max + 1];
            for _ in 0..samples {
                let phi0 = sample_weighted_angle(lo, hi, &mut rng);
                let x0 = phi0.cos() / phi0.sin();
                let mut s = AngleState::new(T::lit(phi0), k.stationary().sample_speed(&mut rng));
                sums[0] += 1.0;
                for slot in sums.iter_mut().skip(1) {
                    s = k.step(s, &mut rng)?;
                    let x = s.phi.f64().cos() / s.phi.f64().sin();
                    if lagged.keeps(x, a) {
                        *slot += x / x0;
                    }
                }
            }
            Ok(sums.into_iter().map(|v| v / samples as f64).collect())
        })
        .collect();
    let per_rep = per_rep.into_iter().collect::<Result<Vec<_>>>()?;
    let mean: Vec<f64> = (0..=j_max).map(|j| per_rep.iter().map(|r| r[j]).sum::<f64>() / reps as f64).collect();
    let fit = |r: &[f64]| {
        let num: f64 = (0..j_max).map(|j| r[j + 1] * r[j]).sum();
        let den: f64 = (0..j_max).map(|j| r[j] * r[j]).sum();
        num / den
    };
    let zeta_hat = fit(&mean);
    // jackknife over replications
    let n = reps as f64;
    let jack: Vec<f64> = (0..reps)
        .map(|skip| {
            let r: Vec<f64> = (0..=j_max).map(|j| (mean[j] * n - per_rep[skip][j]) / (n - 1.0)).collect();
            fit(&r)
        })
        .collect();
    let jm = jack.iter().sum::<f64>() / n;
    let zeta_se = ((n - 1.0) / n * jack.iter().map(|v| (v - jm).powi(2)).sum::<f64>()).sqrt();
    let m2 = if lo > 0.0 { truncated_second_moment(hi) - truncated_second_moment(lo) } else { truncated_second_moment(hi) };
    let correlations = mean[1..].iter().map(|r| r * m2).collect();
    let correlation_se = (1..=j_max)
        .map(|j| {
            let s = stats::summary(&per_rep.iter().map(|r| r[j]).collect::<Vec<_>>());
            s.se * m2
        })
        .collect();
    Ok(CorrelationProfile { a, correlations, correlation_se, ratios: mean, zeta_hat, zeta_se, lag_budget: budget })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct QExpectation {
    pub value: f64,
    /// Zero for quadrature.
    pub se: f64,
}

/// `E[q_1 ... q_j | Theta_0 = phi]` with `q_i = cot(Theta_i) / cot(Theta_{i-1})`;
/// the product telescopes to `cot(Theta_j) / cot(phi)`. One lag is integrated
/// against the closed shallow density; more lags are simulated with the
/// cell's exit map.
pub fn shallow_q_expectation(cell: &CellGeometry<f64>, phi: f64, j: usize, samples: usize, seed: u64) -> Result<QExpectation> {
    let threshold = crate::geometry::shallow_threshold(cell)?;
    let d = phi.min(std::f64::consts::PI - phi);
    if !(d > 0.0 && d < threshold) {
        return Err(Error::NotShallow { phi, threshold });
    }
    if j == 0 {
        return Ok(QExpectation { value: 1.0, se: 0.0 });
    }
    let cot0 = phi.cos() / phi.sin();
    if j == 1 {
        let arcs = crate::geometry::shallow_support(cell, d)?;
        let mut total = 0.0;
        for (lo, hi) in arcs {
            // composite rule: the integrand varies on the scale of the arc ends
            let pieces = 8;
            for p in 0..pieces {
                let a = lo + (hi - lo) * p as f64 / pieces as f64;
                let b = lo + (hi - lo) * (p + 1) as f64 / pieces as f64;
                for (x, w) in stats::gauss_legendre_on(32, a, b) {
                    let (psi, wq) = if phi > std::f64::consts::FRAC_PI_2 { (std::f64::consts::PI - x, w) } else { (x, w) };
                    total += wq * crate::geometry::shallow_kernel_density(cell, phi, psi)? * psi.cos() / psi.sin();
                }
            }
        }
        return Ok(QExpectation { value: total / cot0, se: 0.0 });
    }
    if samples < 2 {
        return Err(Error::Domain("nested simulation needs at least two samples".into()));
    }
    let kernel = MicrostructureKernel::new(*cell, SurfaceMeasure::cosine(1.0)?);
    const BATCHES: usize = 64;
    let per = samples.div_ceil(BATCHES);
    let batches: Vec<Result<f64>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, "shallow_q", b as u64);
            let mut acc = 0.0;
            for _ in 0..per {
                let mut s = AngleState::new(phi, 1.0);
                for _ in 0..j {
                    s = kernel.step(s, &mut rng)?;
                }
                acc += s.phi.cos() / s.phi.sin() / cot0;
            }
            Ok(acc / per as f64)
        })
        .collect();
    let batches = batches.into_iter().collect::<Result<Vec<_>>>()?;
    let s = stats::summary(&batches);
    Ok(QExpectation { value: s.mean, se: s.se })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExitTimeReport {
    pub kernel: String,
    pub length: f64,
    pub l_over_r: f64,
    /// Mean over completed trajectories.
    pub mean: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub reps: usize,
    pub censored: usize,
    pub mean_collisions: f64,
    #[serde(skip)]
    pub times: Vec<Option<f64>>,
    #[serde(skip)]
    pub collisions: Vec<u64>,
}

fn exit_report(kernel: String, length: f64, r: f64, times: Vec<Option<f64>>, collisions: Vec<u64>) -> Result<ExitTimeReport> {
    let done: Vec<f64> = times.iter().flatten().copied().collect();
    if done.is_empty() {
        return Err(Error::Numeric("every trajectory was censored".into()));
    }
    let s = stats::summary(&done);
    let reps = times.len();
    Ok(ExitTimeReport {
        kernel,
        length,
        l_over_r: length / r,
        mean: s.mean,
        se: s.se,
        ci_low: s.mean - 1.96 * s.se,
        ci_high: s.mean + 1.96 * s.se,
        reps,
        censored: reps - done.len(),
        mean_collisions: collisions.iter().map(|&c| c as f64).sum::<f64>() / reps as f64,
        times,
        collisions,
    })
}

/// Time for unscaled flights started at the channel midpoint to reach
/// `|x| = L`. The exit instant is interpolated inside the crossing flight;
/// trajectories exceeding `budget` collisions are censored.
pub fn mean_exit_time<T: Real>(kernel: &FlightKernel<T>, cfg: &ChannelConfig<T>, reps: usize, budget: u64, seed: u64) -> Result<ExitTimeReport> {
    kernel.check(cfg)?;
    let l = cfg.length.ok_or_else(|| Error::Domain("exit times need a channel length".into()))?;
    if reps < MIN_LONG_REPS {
        return Err(Error::Domain(format!("exit times need at least {MIN_LONG_REPS} replications, got {reps}")));
    }
    if !(l >= T::lit(10.0) * cfg.r) {
        return Err(Error::Domain("exit times need L/r >= 10".into()));
    }
    let k = cfg.k;
    let lf = l.f64();
    let out: Vec<Result<(Option<f64>, u64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "exit_time", rep as u64);
            let mut w = Walker::new(kernel, cfg, &mut rng);
            let mut t = 0.0f64;
            let mut x = vec![0.0f64; k];
            for n in 0..budget {
                let leg = w.leg()?;
                let tau = leg.tau.f64();
                let z: Vec<f64> = if k == 1 { vec![leg.z.f64()] } else { w.horizontal()?.iter().map(|v| v.f64()).collect() };
                let end: Vec<f64> = x.iter().zip(&z).map(|(a, b)| a + b).collect();
                let end_norm = end.iter().map(|v| v * v).sum::<f64>().sqrt();
                if end_norm >= lf {
                    // smallest f in (0,1] with |x + f z| = L
                    let zz: f64 = z.iter().map(|v| v * v).sum();
                    let xz: f64 = x.iter().zip(&z).map(|(a, b)| a * b).sum();
                    let xx: f64 = x.iter().map(|v| v * v).sum();
                    let disc = (xz * xz - zz * (xx - lf * lf)).max(0.0);
                    let f = ((-xz + disc.sqrt()) / zz).clamp(0.0, 1.0);
                    return Ok((Some(t + f * tau), n + 1));
                }
                x = end;
                t += tau;
                w.advance(&mut rng)?;
            }
            Ok((None, budget))
        })
        .collect();
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let (times, collisions): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    exit_report(kernel.label(), lf, cfg.r.f64(), times, collisions)
}

/// Exit time of a Brownian path with `Var B_t = d t` from `(-L, L)` started
/// at 0, on time steps `dt` with a bridge-crossing correction between steps.
pub fn brownian_exit_time(d: f64, length: f64, dt: f64, reps: usize, seed: u64) -> Result<ExitTimeReport> {
    if !(d > 0.0 && length > 0.0 && dt > 0.0) || reps < 2 {
        return Err(Error::Domain("Brownian control needs positive d, L, dt and two or more replications".into()));
    }
    let sd = (d * dt).sqrt();
    let out: Vec<(Option<f64>, u64)> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "brownian_exit", rep as u64);
            let (mut x, mut t, mut n) = (0.0f64, 0.0f64, 0u64);
            loop {
                let y = x + sd * rng::standard_normal::<f64>(&mut rng);
                n += 1;
                if y.abs() >= length {
                    return (Some(t + dt / 2.0), n);
                }
                // probability that the bridge from x to y touched either barrier
                let up = (-2.0 * (length - x) * (length - y) / (d * dt)).exp();
                let down = (-2.0 * (length + x) * (length + y) / (d * dt)).exp();
                if rng::uniform::<f64>(&mut rng) < up + down {
                    return (Some(t + dt / 2.0), n);
                }
                x = y;
                t += dt;
            }
        })
        .collect();
    let (times, collisions): (Vec<_>, Vec<_>) = out.into_iter().unzip();
    exit_report("brownian".into(), length, 1.0, times, collisions)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowCorrelation {
    pub first: usize,
    pub second: usize,
    pub corr: f64,
    /// `1/sqrt(reps)`.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CltReport {
    pub kernel: String,
    pub a: f64,
    pub t: f64,
    pub steps: usize,
    pub reps: usize,
    /// Variance the sums are standardized with (`t D`).
    pub variance: f64,
    pub ks: KsResult,
    /// Sample standard deviation over the predicted one.
    pub std_ratio: f64,
    pub windows: Vec<WindowCorrelation>,
    /// Largest `|corr| / se` over window pairs.
    pub max_window_score: f64,
    #[serde(skip)]
    pub sums: Vec<f64>,
}

/// Distribution of `a^{-1} sum Z_{a,j}` over `n_{a,t}` steps against
/// `N(0, t d)`, and correlations between increments over disjoint windows.
pub fn clt_check<T: Real>(
    kernel: &FlightKernel<T>,
    cfg: &ChannelConfig<T>,
    a: f64,
    t: f64,
    reps: usize,
    trunc: &TruncationSpec,
    d: f64,
    windows: usize,
    seed: u64,
) -> Result<CltReport> {
    kernel.check(cfg)?;
    trunc.validate()?;
    if reps < MIN_LONG_REPS || windows < 2 || !(d > 0.0) || !(t > 0.0) {
        return Err(Error::Domain(format!("need reps >= {MIN_LONG_REPS}, windows >= 2, d > 0 and t > 0")));
    }
    let m = closed_form_moments(cfg.n, cfg.k, cfg.r.f64(), &cfg.measure.to_f64())?;
    let steps = chain_length(a, t, cfg.codim(), m.e_tau);
    let two_r = 2.0 * cfg.r.f64();
    let per: Vec<Result<Vec<f64>>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "clt", rep as u64);
            let mut w = Walker::new(kernel, cfg, &mut rng);
            let mut inc = vec![0.0f64; windows];
            for j in 0..steps {
                let leg = w.leg()?;
                if trunc.keeps(leg.norm.f64() / two_r, a) {
                    inc[j * windows / steps] += leg.z.f64() / a;
                }
                if j + 1 < steps {
                    w.advance(&mut rng)?;
                }
            }
            Ok(inc)
        })
        .collect();
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let variance = t * d;
    let sums: Vec<f64> = per.iter().map(|v| v.iter().sum()).collect();
    let mut z: Vec<f64> = sums.iter().map(|s| s / variance.sqrt()).collect();
    let ks = stats::ks_one_sample(&mut z, stats::normal_cdf);
    let s = stats::summary(&sums);
    let std_ratio = s.var.sqrt() / variance.sqrt();
    let mut corr = Vec::new();
    for i in 0..windows {
        for j in i + 1..windows {
            let x: Vec<f64> = per.iter().map(|v| v[i]).collect();
            let y: Vec<f64> = per.iter().map(|v| v[j]).collect();
            let (c, se) = stats::correlation(&x, &y);
            corr.push(WindowCorrelation { first: i, second: j, corr: c, se });
        }
    }
    let max_window_score = corr.iter().map(|c| c.corr.abs() / c.se).fold(0.0, f64::max);
    Ok(CltReport { kernel: kernel.label(), a, t, steps, reps, variance, ks, std_ratio, windows: corr, max_window_score, sums })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CollisionCountReport {
    pub a: f64,
    pub t: f64,
    /// `n_{a,t}`.
    pub expected: f64,
    /// Mean of `N_{a,t} / n_{a,t}` over replications.
    pub ratio: f64,
    pub ratio_se: f64,
}

/// Collisions before the unscaled time `a h(a) t`, relative to `n_{a,t}`.
pub fn collision_count_check<T: Real>(kernel: &FlightKernel<T>, cfg: &ChannelConfig<T>, a: f64, t: f64, reps: usize, seed: u64) -> Result<CollisionCountReport> {
    kernel.check(cfg)?;
    if reps < 2 {
        return Err(Error::Domain("at least two replications are needed".into()));
    }
    let m = closed_form_moments(cfg.n, cfg.k, cfg.r.f64(), &cfg.measure.to_f64())?;
    let horizon = a * time_scale(a, cfg.codim()) * t;
    let expected = horizon / m.e_tau;
    let out: Vec<Result<f64>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "collision_count", rep as u64);
            let mut w = Walker::new(kernel, cfg, &mut rng);
            let (mut time, mut count) = (0.0f64, 0u64);
            loop {
                time += w.leg()?.tau.f64();
                if time > horizon {
                    return Ok(count as f64 / expected);
                }
                count += 1;
                w.advance(&mut rng)?;
            }
        })
        .collect();
    let ratios = out.into_iter().collect::<Result<Vec<_>>>()?;
    let s = stats::summary(&ratios);
    Ok(CollisionCountReport { a, t, expected, ratio: s.mean, ratio_se: s.se })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub steps: usize,
    pub big: usize,
    pub small: usize,
    /// Variance of the small-block sum over the variance of the total.
    pub small_fraction: f64,
}

/// Splits each chain into alternating big blocks of `n^beta` and small
/// blocks of `n^alpha` steps and compares the variance carried by the small ones.
#[allow(clippy::too_many_arguments)]
pub fn negligible_block_check<T: Real>(
    kernel: &FlightKernel<T>,
    cfg: &ChannelConfig<T>,
    a: f64,
    t: f64,
    reps: usize,
    trunc: &TruncationSpec,
    exponents: (f64, f64),
    seed: u64,
) -> Result<BlockReport> {
    kernel.check(cfg)?;
    let m = closed_form_moments(cfg.n, cfg.k, cfg.r.f64(), &cfg.measure.to_f64())?;
    let steps = chain_length(a, t, cfg.codim(), m.e_tau);
    let small = (steps as f64).powf(exponents.0).floor().max(1.0) as usize;
    let big = (steps as f64).powf(exponents.1).floor().max(1.0) as usize;
    let two_r = 2.0 * cfg.r.f64();
    let out: Vec<Result<(f64, f64)>> = (0..reps)
        .into_par_iter()
        .map(|rep| {
            let mut rng = rng::stream(seed, "blocks", rep as u64);
            let mut w = Walker::new(kernel, cfg, &mut rng);
            let (mut total, mut in_small) = (0.0f64, 0.0f64);
            for j in 0..steps {
                let leg = w.leg()?;
                if trunc.keeps(leg.norm.f64() / two_r, a) {
                    let z = leg.z.f64() / a;
                    total += z;
                    if j % (big + small) >= big {
                        in_small += z;
                    }
                }
                if j + 1 < steps {
                    w.advance(&mut rng)?;
                }
            }
            Ok((total, in_small))
        })
        .collect();
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let var = |v: Vec<f64>| stats::summary(&v).var;
    let vt = var(out.iter().map(|p| p.0).collect());
    let vs = var(out.iter().map(|p| p.1).collect());
    Ok(BlockReport { steps, big, small, small_fraction: vs / vt })
}

/// Monte Carlo moments of a single flight under the stationary law.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub samples: usize,
    pub ez2: Option<(f64, f64)>,
    /// `E[Z^2 1{|Z| <= 2ra}]` at the requested `a` (mean, se).
    pub ez2_truncated: (f64, f64),
    /// Coefficient of `ln a` from the truncated moments at `a` and `LOG_WINDOW_LOW`.
    pub log_coefficient: Option<(f64, f64)>,
    pub e_tau: (f64, f64),
    pub d0: (f64, f64),
}

/// Lower end of the window used to read off the `ln a` coefficient; the
/// truncated moment is within 0.2% of its asymptote from here on.
pub const LOG_WINDOW_LOW: f64 = 10.0;

pub fn moment_estimates(cfg: &ChannelConfig<f64>, samples: usize, a: f64, seed: u64) -> Result<MomentEstimate> {
    cfg.check_simulable()?;
    if samples < 2 {
        return Err(Error::Domain("at least two samples are needed".into()));
    }
    const BATCHES: usize = 64;
    let per = samples.div_ceil(BATCHES);
    if !(a >= 10.0 * LOG_WINDOW_LOW) {
        return Err(Error::Domain(format!("truncation level {a} must be at least {}", 10.0 * LOG_WINDOW_LOW)));
    }
    let a_low = LOG_WINDOW_LOW;
    let two_r = 2.0 * cfg.r;
    // per batch: sums of (Z_u^2, Z_u^2 truncated at a, Z_u^2 with |Z| in (a_low, a], tau)
    let out: Vec<Result<[f64; 4]>> = (0..BATCHES)
        .into_par_iter()
        .map(|b| {
            let mut rng = rng::stream(seed, "moments", b as u64);
            let mut acc = [0.0f64; 4];
            for _ in 0..per {
                let v = spatial_draw(cfg, &mut rng);
                let (z, tau) = step_displacement(&v, cfg)?;
                let norm = z.iter().map(|x| x * x).sum::<f64>().sqrt() / two_r;
                let zu2 = z[0] * z[0];
                acc[0] += zu2;
                if norm <= a {
                    acc[1] += zu2;
                    if norm > a_low {
                        acc[2] += zu2;
                    }
                }
                acc[3] += tau;
            }
            Ok(acc.map(|x| x / per as f64))
        })
        .collect();
    let out = out.into_iter().collect::<Result<Vec<_>>>()?;
    let col = |i: usize| {
        let s = stats::summary(&out.iter().map(|v| v[i]).collect::<Vec<_>>());
        (s.mean, s.se)
    };
    let e_tau = col(3);
    let (ez2, log_coefficient) = if cfg.codim() >= 2 {
        (Some(col(0)), None)
    } else {
        let (m, se) = col(2);
        let span = (a / a_low).ln();
        (None, Some((m / span, se / span)))
    };
    let second = ez2.or(log_coefficient).unwrap();
    let d0 = second.0 / e_tau.0;
    let d0_se = d0 * ((second.1 / second.0).powi(2) + (e_tau.1 / e_tau.0).powi(2)).sqrt();
    Ok(MomentEstimate { samples: per * BATCHES, ez2, ez2_truncated: col(1), log_coefficient, e_tau, d0: (d0, d0_se) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelKind, KernelSpec, MaxwellSmoluchowski};
    use std::f64::consts::PI;
    use std::sync::Arc;

    fn cosine() -> SurfaceMeasure<f64> {
        SurfaceMeasure::cosine(1.0).unwrap()
    }

    #[test]
    fn displacement_examples() {
        let (z, tau) = planar_displacement(PI / 2.0, 1.0, 1.0).unwrap();
        assert!(z.abs() < 1e-15 && (tau - 2.0).abs() < 1e-15);
        let (z, tau) = planar_displacement(PI / 4.0, 1.0, 1.0).unwrap();
        assert!((z - 2.0).abs() < 1e-14 && (tau - 2.0 * 2f64.sqrt()).abs() < 1e-14);
        assert!(planar_displacement(1e-13, 1.0, 1.0).is_err());
        let cfg = ChannelConfig::planar(1.0, cosine()).unwrap();
        let (zv, tv) = step_displacement(&[(PI / 4.0).cos(), (PI / 4.0).sin()], &cfg).unwrap();
        assert!((zv[0] - 2.0).abs() < 1e-14 && (tv - 2.0 * 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn closed_moments() {
        let m = closed_form_moments(2, 1, 1.0, &cosine()).unwrap();
        assert!((m.d0 - 4.0 / PI).abs() < 1e-14);
        assert!((m.e_tau - PI).abs() < 1e-14);
        let m = closed_form_moments(3, 1, 1.0, &cosine()).unwrap();
        assert!((m.ez2.unwrap() - 8.0 / 3.0).abs() < 1e-14);
        let mx = SurfaceMeasure::maxwellian(2.0, 3.0).unwrap();
        let m = closed_form_moments(2, 1, 1.5, &mx).unwrap();
        assert!((m.e_tau - 1.5 * (2.0 * PI * 6.0).sqrt()).abs() < 1e-12);
        assert!(closed_form_moments(2, 2, 1.0, &cosine()).is_err());
    }

    #[test]
    fn truncated_moment_matches_quadrature() {
        let a: f64 = 50.0;
        let lo = (1.0 / a).atan();
        let q: f64 = stats::gauss_legendre_on(200, lo, PI / 2.0).iter().map(|(x, w)| w * (x.cos() / x.sin()).powi(2) * x.sin()).sum();
        assert!((truncated_second_moment(a) - q).abs() < 1e-10);
    }

    #[test]
    fn truncation_windows() {
        let t = TruncationSpec::new(TruncationKind::Cone);
        let (lo, hi) = t.window(1e8);
        assert!((lo - (1e8f64).ln().sqrt().exp()).abs() < 1e-9);
        assert!((hi - 1e8 / (1e8f64).ln().powi(2)).abs() < 1e-6);
        assert!(t.keeps(100.0, 1e8) && !t.keeps(10.0, 1e8));
        assert_eq!(lag_count(1e8), 3);
        let bad = TruncationSpec { eta_exp: 1.5, ..t };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn record_is_consistent_and_reproducible() {
        let k: KernelRef<f64> = KernelSpec::new(KernelKind::Semicircle).build().unwrap();
        let cfg = ChannelConfig::planar(0.7, cosine()).unwrap();
        let fk = FlightKernel::Planar(k);
        let rec = simulate_chain(&fk, &cfg, 500, &mut rng::stream(3, "t", 0)).unwrap();
        for j in 0..500 {
            let (z, tau) = planar_displacement(rec.angles[j], rec.speeds[j], 0.7).unwrap();
            assert!((z - rec.displacements[j][0]).abs() <= 1e-12 * z.abs().max(1.0));
            assert!((tau - rec.times[j]).abs() <= 1e-12 * tau);
        }
        let again = simulate_chain(&fk, &cfg, 500, &mut rng::stream(3, "t", 0)).unwrap();
        assert_eq!(rec, again);
    }

    #[test]
    fn weighted_angle_law() {
        // P(|cot| <= x) under cot^2 sin weight on |cot| <= a is m2(x)/m2(a)
        let mut rng = rng::stream(1, "w", 0);
        let mut xs: Vec<f64> = (0..20000).map(|_| sample_weighted_angle(0.0, 100.0, &mut rng)).map(|p| (p.cos() / p.sin()).abs()).collect();
        let ks = stats::ks_one_sample(&mut xs, |x| truncated_second_moment(x) / truncated_second_moment(100.0));
        assert!(ks.p_value > 0.001, "{ks:?}");
    }

    #[test]
    fn iid_correlation_estimator_is_one() {
        let k: KernelRef<f64> = Arc::new(MaxwellSmoluchowski::new(1.0, cosine()).unwrap());
        let cfg = ChannelConfig::planar(1.0, cosine()).unwrap();
        let s = ScalingSchedule::new(vec![1e2, 1e4], 1.0).unwrap();
        let opts = McOptions { reps: 32, samples: 2000, lags: 8, ..Default::default() };
        let r = diffusivity_mc(&FlightKernel::Planar(k), &cfg, &s, &TruncationSpec::default(), &opts, 5).unwrap();
        for p in &r.points {
            assert!((p.eta_hat - 1.0).abs() < 4.0 * p.eta_se + 1e-3, "{p:?}");
        }
    }

    #[test]
    fn ms_correlation_estimator_matches_formula() {
        let k: KernelRef<f64> = Arc::new(MaxwellSmoluchowski::new(0.5, cosine()).unwrap());
        let cfg = ChannelConfig::planar(1.0, cosine()).unwrap();
        let s = ScalingSchedule::new(vec![1e3], 1.0).unwrap();
        let opts = McOptions { reps: 32, samples: 1000, lags: 48, ..Default::default() };
        let r = diffusivity_mc(&FlightKernel::Planar(k), &cfg, &s, &TruncationSpec::default(), &opts, 9).unwrap();
        assert!((r.points[0].eta_hat - 3.0).abs() < 4.0 * r.points[0].eta_se, "{:?}", r.points);
    }

    #[test]
    fn brownian_control() {
        let r = brownian_exit_time(2.0, 1.0, 1e-4, 2000, 4).unwrap();
        assert!((r.mean - 0.5).abs() < 4.0 * r.se, "{r:?}");
    }

    #[test]
    fn exit_time_scales_with_speed() {
        let k1: KernelRef<f64> = KernelSpec::new(KernelKind::Semicircle).build().unwrap();
        let cfg1 = ChannelConfig::planar(1.0, cosine()).unwrap().with_length(20.0).unwrap();
        let m2 = SurfaceMeasure::cosine(3.0).unwrap();
        let k2: KernelRef<f64> = Arc::new(crate::kernels::MicrostructureKernel::new(CellGeometry::semicircle(), m2));
        let cfg2 = ChannelConfig::planar(1.0, m2).unwrap().with_length(20.0).unwrap();
        let a = mean_exit_time(&FlightKernel::Planar(k1), &cfg1, 1000, 1_000_000, 2).unwrap();
        let b = mean_exit_time(&FlightKernel::Planar(k2), &cfg2, 1000, 1_000_000, 2).unwrap();
        for (x, y) in a.times.iter().zip(&b.times) {
            let (x, y) = (x.unwrap(), y.unwrap());
            assert!((x - 3.0 * y).abs() < 1e-9 * x);
        }
    }

    #[test]
    fn shallow_q_one_lag() {
        let q = shallow_q_expectation(&CellGeometry::semicircle(), 1e-3, 1, 0, 0).unwrap();
        assert!((q.value + 0.25 * 3f64.ln()).abs() < 1e-4, "{q:?}");
        assert!(shallow_q_expectation(&CellGeometry::semicircle(), 0.5, 1, 0, 0).is_err());
    }

    #[test]
    fn spatial_mixture_chain() {
        let cfg = ChannelConfig::new(3, 2, 1.0, None, cosine()).unwrap();
        let rec = simulate_chain(&FlightKernel::Mixture { alpha: 0.5 }, &cfg, 100, &mut rng::stream(1, "s", 0)).unwrap();
        assert_eq!(rec.displacements[0].len(), 2);
        let planar_on_3d = FlightKernel::Planar(KernelSpec::new(KernelKind::Semicircle).build::<f64>().unwrap());
        assert!(simulate_chain(&planar_on_3d, &cfg, 10, &mut rng::stream(1, "s", 0)).is_err());
    }
}
