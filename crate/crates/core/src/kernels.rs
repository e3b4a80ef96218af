//! Collision operators on post-collision angles.
//!
//! A kernel is a Markov transition rule on [`AngleState`]s together with its
//! declared stationary [`SurfaceMeasure`]. In 2D the angular marginal of both
//! the cosine law and the surface Maxwellian is `sin(phi)/2` on `(0, pi)`; the
//! Maxwellian additionally carries a speed distribution.

use crate::geometry::{self, CellFamily, CellGeometry, CellTracer, EntryState, ExitRecord, MIN_ENTRY_ANGLE};
use crate::rng::{self, Stream};
use crate::stats::{self, KsResult};
use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Debug;
use std::sync::Arc;

pub type KernelRef<T> = Arc<dyn CollisionKernel<T>>;

const MAX_RETRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleState<T> {
    /// Angle from the wall, in `(0, pi)`.
    pub phi: T,
    pub speed: T,
}

impl<T: Real> AngleState<T> {
    pub fn new(phi: T, speed: T) -> Self {
        AngleState { phi, speed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceMeasure<T> {
    /// Knudsen cosine law at fixed speed.
    CosineLaw { speed: T },
    /// Surface Maxwellian `<v,n> exp(-beta M |v|^2 / 2)`.
    Maxwellian { beta: T, mass: T },
}

impl<T: Real> SurfaceMeasure<T> {
    pub fn cosine(speed: T) -> Result<Self> {
        if !(speed > T::zero()) {
            return Err(Error::Domain(format!("speed {speed} must be positive")));
        }
        Ok(SurfaceMeasure::CosineLaw { speed })
    }

    pub fn maxwellian(beta: T, mass: T) -> Result<Self> {
        if !(beta > T::zero() && mass > T::zero()) {
            return Err(Error::Domain(format!("beta={beta}, M={mass} must be positive")));
        }
        Ok(SurfaceMeasure::Maxwellian { beta, mass })
    }

    pub fn to_f64(&self) -> SurfaceMeasure<f64> {
        match *self {
            SurfaceMeasure::CosineLaw { speed } => SurfaceMeasure::CosineLaw { speed: speed.f64() },
            SurfaceMeasure::Maxwellian { beta, mass } => SurfaceMeasure::Maxwellian { beta: beta.f64(), mass: mass.f64() },
        }
    }

    pub fn label(&self) -> String {
        match self {
            SurfaceMeasure::CosineLaw { speed } => format!("cosine(s={speed})"),
            SurfaceMeasure::Maxwellian { beta, mass } => format!("maxwellian(beta={beta},M={mass})"),
        }
    }

    /// Angular density `sin(phi)/2` (both measures in 2D).
    pub fn angle_density(&self, phi: T) -> T {
        phi.sin() / T::lit(2.0)
    }

    pub fn angle_cdf(phi: f64) -> f64 {
        (1.0 - phi.cos()) / 2.0
    }

    /// Speed CDF in 2D (`None` for the cosine law, whose speed is fixed).
    pub fn speed_cdf(&self, s: f64) -> Option<f64> {
        match *self {
            SurfaceMeasure::CosineLaw { .. } => None,
            SurfaceMeasure::Maxwellian { beta, mass } => {
                // density proportional to s^2 exp(-s^2 / (2 sigma^2))
                let sigma = 1.0 / (beta.f64() * mass.f64()).sqrt();
                let x = s / sigma;
                Some(statrs::function::erf::erf(x / 2f64.sqrt()) - (2.0 / std::f64::consts::PI).sqrt() * x * (-x * x / 2.0).exp())
            }
        }
    }

    pub fn sample_speed(&self, rng: &mut Stream) -> T {
        match *self {
            SurfaceMeasure::CosineLaw { speed } => speed,
            SurfaceMeasure::Maxwellian { .. } => {
                let v = self.sample_velocity(2, rng);
                (v[0] * v[0] + v[1] * v[1]).sqrt()
            }
        }
    }

    /// Velocity in `n` dimensions, normal component last.
    pub fn sample_velocity(&self, n: usize, rng: &mut Stream) -> Vec<T> {
        match *self {
            SurfaceMeasure::CosineLaw { speed } => sample_cosine_hemisphere(n, speed, rng),
            SurfaceMeasure::Maxwellian { beta, mass } => sample_surface_maxwellian(n, beta, mass, rng),
        }
    }

    /// Draw of the 2D state.
    pub fn sample_state(&self, rng: &mut Stream) -> AngleState<T> {
        match *self {
            SurfaceMeasure::CosineLaw { speed } => {
                let u: T = rng::uniform(rng);
                let phi = (T::one() - T::lit(2.0) * u).acos();
                AngleState::new(phi.max(T::lit(MIN_ENTRY_ANGLE)).min(T::PI() - T::lit(MIN_ENTRY_ANGLE)), speed)
            }
            SurfaceMeasure::Maxwellian { .. } => {
                let v = self.sample_velocity(2, rng);
                AngleState::new(v[1].atan2(v[0]), (v[0] * v[0] + v[1] * v[1]).sqrt())
            }
        }
    }
}

/// Cosine-law velocity in `n` dimensions: uniform point `x` of the unit
/// `(n-1)`-ball lifted to `s (x, sqrt(1-|x|^2))`.
pub fn sample_cosine_hemisphere<T: Real>(n: usize, s: T, rng: &mut Stream) -> Vec<T> {
    assert!(n >= 2, "dimension must be at least 2");
    let m = n - 1;
    let mut x: Vec<T> = (0..m).map(|_| rng::standard_normal(rng)).collect();
    let norm = x.iter().fold(T::zero(), |a, &v| a + v * v).sqrt();
    let u: T = rng::uniform(rng);
    let radius = u.powf(T::one() / T::lit(m as f64));
    let mut r2 = T::zero();
    for v in x.iter_mut() {
        *v = *v / norm * radius;
        r2 = r2 + *v * *v;
    }
    let vn = (T::one() - r2).max(T::zero()).sqrt();
    let mut out: Vec<T> = x.into_iter().map(|v| v * s).collect();
    out.push(vn * s);
    out
}

/// Surface Maxwellian velocity: Gaussian tangential components with variance
/// `1/(beta M)`, Rayleigh normal component with scale `1/sqrt(beta M)`.
pub fn sample_surface_maxwellian<T: Real>(n: usize, beta: T, mass: T, rng: &mut Stream) -> Vec<T> {
    assert!(n >= 2, "dimension must be at least 2");
    let sigma = T::one() / (beta * mass).sqrt();
    let mut out: Vec<T> = (0..n - 1).map(|_| sigma * rng::standard_normal::<T>(rng)).collect();
    let u: T = rng::uniform_open(rng);
    out.push(sigma * (-T::lit(2.0) * u.ln()).sqrt());
    out
}

/// Transition probabilities of one row over a partition of `(0, pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Row<T> {
    /// Probability of keeping the current angle.
    pub atom: T,
    /// Mass of the remaining (diffuse) part in each cell.
    pub masses: Vec<T>,
}

/// How transition rows are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowMode {
    /// Deterministic quadrature of the exit map (or of the density).
    #[default]
    Quadrature,
    /// Closed shallow-angle density where available, quadrature elsewhere.
    Density,
    /// Histograms of sampled transitions.
    Histogram,
}

/// Resolution used when a row has to be computed numerically.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RowOptions {
    pub mode: RowMode,
    /// Entry positions per row for microstructure kernels.
    pub r_points: usize,
    /// Gauss-Legendre nodes per cell for kernels with a density.
    pub quad_nodes: usize,
    /// Samples per row for kernels known only through their sampler.
    pub samples: usize,
}

impl Default for RowOptions {
    fn default() -> Self {
        RowOptions { mode: RowMode::Quadrature, r_points: 1024, quad_nodes: 4, samples: 100_000 }
    }
}

/// A collision operator.
pub trait CollisionKernel<T: Real>: Send + Sync + Debug {
    fn label(&self) -> String;

    fn stationary(&self) -> SurfaceMeasure<T>;

    /// Draws the post-collision state following `state`.
    fn step(&self, state: AngleState<T>, rng: &mut Stream) -> Result<AngleState<T>>;

    /// Density in `psi` of the diffuse part of the transition from `phi`,
    /// when known in closed form at that point.
    fn density(&self, _phi: T, _psi: T) -> Option<T> {
        None
    }

    /// Probability that the angle is left unchanged.
    fn atom(&self, _phi: T) -> T {
        T::zero()
    }

    /// Transition row over the cells delimited by `edges`.
    fn row(&self, phi: T, edges: &[T], opts: &RowOptions, rng: &mut Stream) -> Result<Row<T>> {
        if self.density(phi, T::FRAC_PI_2()).is_some() {
            density_row(|psi| self.density(phi, psi), self.atom(phi), edges, opts.quad_nodes)
        } else {
            sampled_row(self, phi, edges, opts.samples, rng)
        }
    }
}

fn bin_of<T: Real>(edges: &[T], x: T) -> usize {
    let k = edges.partition_point(|e| *e <= x);
    k.clamp(1, edges.len() - 1) - 1
}

/// Row from a density by Gauss-Legendre quadrature on every cell.
pub fn density_row<T: Real>(density: impl Fn(T) -> Option<T>, atom: T, edges: &[T], nodes: usize) -> Result<Row<T>> {
    let (xs, ws) = stats::gauss_legendre(nodes.max(1));
    let mut masses = Vec::with_capacity(edges.len() - 1);
    for c in edges.windows(2) {
        let (mid, half) = ((c[0] + c[1]) / T::lit(2.0), (c[1] - c[0]) / T::lit(2.0));
        let mut m = T::zero();
        for (x, w) in xs.iter().zip(&ws) {
            let p = density(mid + half * T::lit(*x)).ok_or_else(|| Error::Unsupported("density unavailable on part of the row".into()))?;
            m = m + T::lit(*w) * half * p;
        }
        masses.push(m);
    }
    Ok(Row { atom, masses })
}

/// Histogram row from the sampler; steps that keep the angle count as atom.
pub fn sampled_row<T: Real, K: CollisionKernel<T> + ?Sized>(k: &K, phi: T, edges: &[T], samples: usize, rng: &mut Stream) -> Result<Row<T>> {
    let speed = k.stationary().sample_speed(rng);
    let mut counts = vec![0usize; edges.len() - 1];
    let mut stay = 0usize;
    for _ in 0..samples {
        let next = k.step(AngleState::new(phi, speed), rng)?;
        if next.phi == phi {
            stay += 1;
        } else {
            counts[bin_of(edges, next.phi)] += 1;
        }
    }
    let n = T::lit(samples as f64);
    Ok(Row { atom: T::lit(stay as f64) / n, masses: counts.into_iter().map(|c| T::lit(c as f64) / n).collect() })
}

/// Kernel induced by a wall cell: uniform entry position, deterministic exit.
#[derive(Debug, Clone)]
pub struct MicrostructureKernel<T> {
    cell: CellGeometry<T>,
    tracer: Option<CellTracer<T>>,
    measure: SurfaceMeasure<T>,
}

impl<T: Real> MicrostructureKernel<T> {
    /// Uses closed forms where available and the tracer otherwise.
    pub fn new(cell: CellGeometry<T>, measure: SurfaceMeasure<T>) -> Self {
        let tracer = (cell.family() == CellFamily::FlatBottom && cell.h() > T::zero()).then(|| CellTracer::new(&cell));
        MicrostructureKernel { cell, tracer, measure }
    }

    /// Always traces rays, whatever the family (oracle for tests).
    pub fn traced(cell: CellGeometry<T>, measure: SurfaceMeasure<T>) -> Self {
        MicrostructureKernel { cell, tracer: Some(CellTracer::new(&cell)), measure }
    }

    pub fn cell(&self) -> &CellGeometry<T> {
        &self.cell
    }

    /// Exit angle for a given entry position.
    pub fn exit_angle(&self, phi: T, r: T) -> Result<T> {
        self.exit_record(phi, r).map(|x| x.psi)
    }

    pub fn exit_record(&self, phi: T, r: T) -> Result<ExitRecord<T>> {
        let e = EntryState::new(phi, r);
        match &self.tracer {
            Some(t) => t.trace(e, geometry::DEFAULT_MAX_BOUNCES, false),
            None => self.cell.exit(e),
        }
    }
}

/// Exit of one entry position, tagged by its smooth branch.
#[derive(Debug, Clone, Copy)]
struct Node<T> {
    r: T,
    psi: T,
    bounces: usize,
    atom: bool,
}

impl<T> Node<T> {
    fn same_branch(&self, o: &Node<T>) -> bool {
        self.bounces == o.bounces && self.atom == o.atom
    }
}

/// Bisection stops at a millionth of the node spacing; the remainder is
/// split between the two end exits.
const BRANCH_DEPTH: usize = 20;
const MAX_SMOOTH_JUMP: f64 = 0.5;

/// Adds mass `w` spread uniformly over `[lo, hi]` (a point mass when equal).
fn spread<T: Real>(masses: &mut [T], edges: &[T], a: T, b: T, w: T) {
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let first = bin_of(edges, lo);
    if hi - lo <= T::lit(1e-15) * (T::one() + lo.abs()) {
        masses[first] = masses[first] + w;
        return;
    }
    let last = bin_of(edges, hi);
    for (k, m) in masses.iter_mut().enumerate().take(last + 1).skip(first) {
        let l = edges[k].max(lo);
        let u = edges[k + 1].min(hi);
        if u > l {
            *m = *m + w * (u - l) / (hi - lo);
        }
    }
}

impl<T: Real> CollisionKernel<T> for MicrostructureKernel<T> {
    fn label(&self) -> String {
        self.cell.label()
    }

    fn stationary(&self) -> SurfaceMeasure<T> {
        self.measure
    }

    fn step(&self, state: AngleState<T>, rng: &mut Stream) -> Result<AngleState<T>> {
        let mut last = None;
        for _ in 0..MAX_RETRIES {
            let r: T = rng::uniform(rng);
            match self.exit_angle(state.phi, r) {
                Ok(psi) => return Ok(AngleState::new(psi, state.speed)),
                Err(e @ (Error::OnDiscontinuity { .. } | Error::Grazing | Error::Trapped(_))) => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::Sampling(MAX_RETRIES, last.map(|e| e.to_string()).unwrap_or_default()))
    }

    /// Closed shallow-angle density, where it applies.
    fn density(&self, phi: T, psi: T) -> Option<T> {
        let th = geometry::shallow_threshold(&self.cell).ok()?;
        let d = phi.min(T::PI() - phi);
        (d < th).then(|| geometry::shallow_kernel_density(&self.cell, phi, psi).ok()).flatten()
    }

    fn atom(&self, phi: T) -> T {
        if self.cell.family() == CellFamily::FlatTop {
            self.cell.h()
        } else {
            let _ = phi;
            T::zero()
        }
    }

    /// The exit map is sampled on a uniform grid of entry positions; between
    /// two nodes on the same smooth branch the map is taken as linear, and
    /// intervals that straddle a discontinuity are bisected. Exits equal to
    /// the entry angle (flat pieces) form the atom. In density mode shallow
    /// rows use exact cell masses of the closed density instead.
    fn row(&self, phi: T, edges: &[T], opts: &RowOptions, rng: &mut Stream) -> Result<Row<T>> {
        if opts.mode == RowMode::Histogram {
            return sampled_row(self, phi, edges, opts.samples, rng);
        }
        if opts.mode == RowMode::Density && self.density(phi, T::FRAC_PI_2()).is_some() {
            let masses = edges.windows(2).map(|c| geometry::shallow_kernel_mass(&self.cell, phi, c[0], c[1])).collect::<Result<Vec<T>>>()?;
            return Ok(Row { atom: self.atom(phi), masses });
        }
        // below the smallest resolvable entry angle the map is scale invariant
        let floor = T::lit(2.0 * geometry::MIN_ENTRY_ANGLE);
        let near_pi = phi > T::FRAC_PI_2();
        let d = if near_pi { T::PI() - phi } else { phi };
        let (phi_eval, scale) = if d < floor { (if near_pi { T::PI() - floor } else { floor }, d / floor) } else { (phi, T::one()) };
        let rescale = |psi: T| {
            if scale == T::one() {
                psi
            } else if psi < T::FRAC_PI_2() {
                psi * scale
            } else {
                T::PI() - (T::PI() - psi) * scale
            }
        };
        let tiny = T::lit(1e-12);
        let eval = |r: T| -> Result<Option<Node<T>>> {
            match self.exit_record(phi_eval, r) {
                Ok(x) => Ok(Some(Node { r, psi: x.psi, bounces: x.bounces, atom: (x.psi - phi_eval).abs() < tiny })),
                Err(Error::OnDiscontinuity { .. } | Error::Grazing | Error::Trapped(_)) => Ok(None),
                Err(e) => Err(e),
            }
        };
        // nodes avoid exact discontinuities by small deterministic shifts
        let n = opts.r_points.max(2);
        let h = T::one() / T::lit(n as f64);
        let mut nodes = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let base = (T::lit(k as f64) * h).max(T::lit(1e-12)).min(T::one() - T::lit(1e-12));
            let mut found = None;
            for j in 0..MAX_RETRIES {
                let shift = h * T::lit(1e-9 * (0.45e9f64).powf(j as f64 / (MAX_RETRIES - 1) as f64));
                let r = if j == 0 { base } else if (j % 2 == 1 && k < n) || k == 0 { base + shift } else { base - shift };
                if let Some(node) = eval(r)? {
                    found = Some(node);
                    break;
                }
            }
            nodes.push(found.ok_or_else(|| Error::Sampling(MAX_RETRIES, "row quadrature".into()))?);
        }
        let mut masses = vec![T::zero(); edges.len() - 1];
        let mut atom = T::zero();
        let mut stack = Vec::new();
        for pair in nodes.windows(2) {
            stack.push((pair[0], pair[1], 0usize));
            while let Some((a, b, depth)) = stack.pop() {
                let w = b.r - a.r;
                let smooth = a.same_branch(&b) && (a.psi - b.psi).abs() < T::lit(MAX_SMOOTH_JUMP);
                if smooth {
                    if a.atom {
                        atom = atom + w;
                    } else {
                        spread(&mut masses, edges, rescale(a.psi), rescale(b.psi), w);
                    }
                    continue;
                }
                if depth >= BRANCH_DEPTH {
                    for node in [a, b] {
                        if node.atom {
                            atom = atom + w / T::lit(2.0);
                        } else {
                            let p = rescale(node.psi);
                            spread(&mut masses, edges, p, p, w / T::lit(2.0));
                        }
                    }
                    continue;
                }
                let mid = (a.r + b.r) / T::lit(2.0);
                match eval(mid)? {
                    Some(m) => {
                        stack.push((a, m, depth + 1));
                        stack.push((m, b, depth + 1));
                    }
                    None => {
                        // a discontinuity at the midpoint itself
                        let m = T::lit(1e-3) * (b.r - a.r);
                        match (eval(mid - m)?, eval(mid + m)?) {
                            (Some(l), Some(u)) => {
                                stack.push((a, l, depth + 1));
                                stack.push((u, b, depth + 1));
                                spread(&mut masses, edges, rescale(l.psi), rescale(l.psi), u.r - l.r);
                            }
                            _ => {
                                stack.push((a, b, BRANCH_DEPTH));
                            }
                        }
                    }
                }
            }
        }
        Ok(Row { atom, masses })
    }
}

/// Diffuse re-emission from `measure` with probability `alpha`, specular
/// reflection (angle kept) otherwise.
#[derive(Debug, Clone)]
pub struct MaxwellSmoluchowski<T> {
    alpha: T,
    measure: SurfaceMeasure<T>,
}

impl<T: Real> MaxwellSmoluchowski<T> {
    pub fn new(alpha: T, measure: SurfaceMeasure<T>) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::Domain(format!("alpha={alpha} outside [0,1]")));
        }
        Ok(MaxwellSmoluchowski { alpha, measure })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }
}

impl<T: Real> CollisionKernel<T> for MaxwellSmoluchowski<T> {
    fn label(&self) -> String {
        format!("ms(alpha={})", self.alpha)
    }

    fn stationary(&self) -> SurfaceMeasure<T> {
        self.measure
    }

    fn step(&self, state: AngleState<T>, rng: &mut Stream) -> Result<AngleState<T>> {
        let u: T = rng::uniform(rng);
        if u < self.alpha {
            Ok(self.measure.sample_state(rng))
        } else {
            Ok(state)
        }
    }

    fn density(&self, _phi: T, psi: T) -> Option<T> {
        Some(self.alpha * self.measure.angle_density(psi))
    }

    fn atom(&self, _phi: T) -> T {
        T::one() - self.alpha
    }

    fn row(&self, _phi: T, edges: &[T], _opts: &RowOptions, _rng: &mut Stream) -> Result<Row<T>> {
        let masses = edges.windows(2).map(|c| self.alpha * angle_mass(c[0], c[1])).collect();
        Ok(Row { atom: T::one() - self.alpha, masses })
    }
}

/// Stationary angular mass of `[lo, hi]`, accurate near both ends of `(0, pi)`.
pub fn angle_mass<T: Real>(lo: T, hi: T) -> T {
    let half = T::FRAC_PI_2();
    // (1 - cos x)/2 written as sin^2(x/2) and mirrored past pi/2 to avoid cancellation
    let left = |x: T| (x / T::lit(2.0)).sin().powi(2);
    let right = |x: T| ((T::PI() - x) / T::lit(2.0)).sin().powi(2);
    if lo >= half {
        right(lo) - right(hi)
    } else if hi <= half {
        left(hi) - left(lo)
    } else {
        (T::lit(0.5) - left(lo)) + (T::lit(0.5) - right(hi))
    }
}

/// Keeps the angle with probability `h`, otherwise applies `base`.
#[derive(Debug, Clone)]
pub struct FlatTopKernel<T: Real> {
    h: T,
    base: KernelRef<T>,
}

impl<T: Real> FlatTopKernel<T> {
    pub fn new(h: T, base: KernelRef<T>) -> Result<Self> {
        if !(h >= T::zero() && h < T::one()) {
            return Err(Error::Domain(format!("h={h} outside [0,1)")));
        }
        Ok(FlatTopKernel { h, base })
    }

    pub fn h(&self) -> T {
        self.h
    }
}

impl<T: Real> CollisionKernel<T> for FlatTopKernel<T> {
    fn label(&self) -> String {
        format!("flat_top(h={}; {})", self.h, self.base.label())
    }

    fn stationary(&self) -> SurfaceMeasure<T> {
        self.base.stationary()
    }

    fn step(&self, state: AngleState<T>, rng: &mut Stream) -> Result<AngleState<T>> {
        let u: T = rng::uniform(rng);
        if u < self.h {
            Ok(state)
        } else {
            self.base.step(state, rng)
        }
    }

    fn density(&self, phi: T, psi: T) -> Option<T> {
        self.base.density(phi, psi).map(|d| (T::one() - self.h) * d)
    }

    fn atom(&self, phi: T) -> T {
        self.h + (T::one() - self.h) * self.base.atom(phi)
    }

    fn row(&self, phi: T, edges: &[T], opts: &RowOptions, rng: &mut Stream) -> Result<Row<T>> {
        let b = self.base.row(phi, edges, opts, rng)?;
        let keep = T::one() - self.h;
        Ok(Row { atom: self.h + keep * b.atom, masses: b.masses.into_iter().map(|m| keep * m).collect() })
    }
}

/// Keeps every state (all eigenvalues 1).
#[derive(Debug, Clone)]
pub struct IdentityKernel<T> {
    measure: SurfaceMeasure<T>,
}

impl<T: Real> IdentityKernel<T> {
    pub fn new(measure: SurfaceMeasure<T>) -> Self {
        IdentityKernel { measure }
    }
}

impl<T: Real> CollisionKernel<T> for IdentityKernel<T> {
    fn label(&self) -> String {
        "identity".into()
    }

    fn stationary(&self) -> SurfaceMeasure<T> {
        self.measure
    }

    fn step(&self, state: AngleState<T>, _rng: &mut Stream) -> Result<AngleState<T>> {
        Ok(state)
    }

    fn density(&self, _phi: T, _psi: T) -> Option<T> {
        Some(T::zero())
    }

    fn atom(&self, _phi: T) -> T {
        T::one()
    }
}

/// Proposal of a Metropolis-Hastings kernel.
#[derive(Debug, Clone)]
pub enum Proposal<T: Real> {
    /// Angle uniform on `(0, pi)`, density `1/pi`.
    UniformAngle,
    /// Gaussian step of the given width, folded back into `(0, pi)`.
    RandomWalk { width: T },
    /// Any kernel; its output state (angle and speed) is the proposal.
    Kernel(KernelRef<T>),
}

impl<T: Real> Proposal<T> {
    fn label(&self) -> String {
        match self {
            Proposal::UniformAngle => "uniform".into(),
            Proposal::RandomWalk { width } => format!("random_walk(width={width})"),
            Proposal::Kernel(k) => k.label(),
        }
    }

    fn density(&self, phi: T, psi: T) -> Option<T> {
        match self {
            Proposal::UniformAngle => Some(T::FRAC_1_PI()),
            Proposal::RandomWalk { width } => Some(folded_gaussian(phi, psi, *width)),
            Proposal::Kernel(k) => k.density(phi, psi),
        }
    }
}

/// Density of `phi + width N(0,1)` folded into `(0, pi)` by reflection.
fn folded_gaussian<T: Real>(phi: T, psi: T, width: T) -> T {
    let two_pi = T::PI() * T::lit(2.0);
    let norm = T::one() / (width * two_pi.sqrt());
    let g = |x: T| (-(x * x) / (T::lit(2.0) * width * width)).exp();
    let mut acc = T::zero();
    let reach = (T::lit(8.0) * width / two_pi).ceil().to_i64().unwrap_or(1) + 1;
    for m in -reach..=reach {
        let shift = two_pi * T::lit(m as f64);
        acc = acc + g(psi - phi + shift) + g(-psi - phi + shift);
    }
    acc * norm
}

fn fold_angle<T: Real>(mut x: T) -> T {
    let pi = T::PI();
    let two_pi = pi * T::lit(2.0);
    x = x - (x / two_pi).floor() * two_pi;
    if x > pi {
        x = two_pi - x;
    }
    x
}

/// Acceptance probability of a Metropolis-Hastings kernel.
#[derive(Clone)]
pub enum Acceptance<T> {
    /// `min(1, w(psi) q(psi,phi) / (w(phi) q(phi,psi)))`.
    Ratio,
    Constant(T),
    Custom(Arc<dyn Fn(T, T) -> T + Send + Sync>),
}

impl<T: Debug> Debug for Acceptance<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Acceptance::Ratio => write!(f, "Ratio"),
            Acceptance::Constant(c) => write!(f, "Constant({c:?})"),
            Acceptance::Custom(_) => write!(f, "Custom"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetropolisHastings<T: Real> {
    proposal: Proposal<T>,
    target: SurfaceMeasure<T>,
    acceptance: Acceptance<T>,
}

impl<T: Real> MetropolisHastings<T> {
    /// The ratio acceptance needs a proposal density everywhere.
    pub fn new(proposal: Proposal<T>, target: SurfaceMeasure<T>, acceptance: Acceptance<T>) -> Result<Self> {
        match (&acceptance, &proposal) {
            (Acceptance::Constant(c), _) if !(*c >= T::zero() && *c <= T::one()) => {
                return Err(Error::Construction(format!("constant acceptance {c} outside [0,1]")));
            }
            (Acceptance::Ratio | Acceptance::Custom(_), Proposal::Kernel(k)) => {
                let probe = [T::lit(0.3), T::FRAC_PI_2(), T::lit(2.8)];
                if probe.iter().any(|&a| probe.iter().any(|&b| k.density(a, b).is_none())) {
                    return Err(Error::Construction(format!("proposal {} has no transition density", k.label())));
                }
            }
            (Acceptance::Custom(_), _) | (Acceptance::Ratio, _) | (Acceptance::Constant(_), _) => {}
        }
        if let Proposal::RandomWalk { width } = proposal {
            if !(width > T::zero()) {
                return Err(Error::Construction("random-walk width must be positive".into()));
            }
        }
        Ok(MetropolisHastings { proposal, target, acceptance })
    }

    fn accept_prob(&self, phi: T, psi: T) -> Result<T> {
        let a = match &self.acceptance {
            Acceptance::Constant(c) => *c,
            Acceptance::Custom(f) => f(phi, psi),
            Acceptance::Ratio => {
                let fwd = self.proposal.density(phi, psi).ok_or_else(|| Error::Construction("proposal density missing".into()))?;
                let bwd = self.proposal.density(psi, phi).ok_or_else(|| Error::Construction("proposal density missing".into()))?;
                let num = self.target.angle_density(psi) * bwd;
                let den = self.target.angle_density(phi) * fwd;
                if den <= T::zero() {
                    T::one()
                } else {
                    (num / den).min(T::one())
                }
            }
        };
        if !(a >= T::zero() && a <= T::one()) {
            return Err(Error::Numeric(format!("acceptance {a} outside [0,1]")));
        }
        Ok(a)
    }
}

impl<T: Real> CollisionKernel<T> for MetropolisHastings<T> {
    fn label(&self) -> String {
        format!("mh({}; {:?})", self.proposal.label(), self.acceptance)
    }

    fn stationary(&self) -> SurfaceMeasure<T> {
        self.target
    }

    fn step(&self, state: AngleState<T>, rng: &mut Stream) -> Result<AngleState<T>> {
        let proposed = match &self.proposal {
            Proposal::UniformAngle => {
                let u: T = rng::uniform_open(rng);
                AngleState::new(u * T::PI(), state.speed)
            }
            Proposal::RandomWalk { width } => {
                let z: T = rng::standard_normal(rng);
                AngleState::new(fold_angle(state.phi + *width * z), state.speed)
            }
            Proposal::Kernel(k) => k.step(state, rng)?,
        };
        let a = self.accept_prob(state.phi, proposed.phi)?;
        let u: T = rng::uniform(rng);
        if u < a {
            match &self.proposal {
                Proposal::Kernel(_) => Ok(proposed),
                // thermal targets refresh the speed on acceptance
                _ => Ok(AngleState::new(proposed.phi, match self.target {
                    SurfaceMeasure::CosineLaw { .. } => state.speed,
                    SurfaceMeasure::Maxwellian { .. } => self.target.sample_speed(rng),
                })),
            }
        } else {
            Ok(state)
        }
    }

    fn density(&self, phi: T, psi: T) -> Option<T> {
        let q = self.proposal.density(phi, psi)?;
        Some(q * self.accept_prob(phi, psi).ok()?)
    }

    fn atom(&self, phi: T) -> T {
        match (&self.acceptance, &self.proposal) {
            (Acceptance::Constant(c), Proposal::Kernel(k)) => T::one() - *c + *c * k.atom(phi),
            (Acceptance::Constant(c), _) => T::one() - *c,
            _ => {
                // rejection mass by quadrature of the accepted density
                let pieces = 256;
                let nodes = stats::gauss_legendre(8);
                let mut moved = T::zero();
                for i in 0..pieces {
                    let lo = T::PI() * T::lit(i as f64 / pieces as f64);
                    let hi = T::PI() * T::lit((i + 1) as f64 / pieces as f64);
                    let (mid, half) = ((lo + hi) / T::lit(2.0), (hi - lo) / T::lit(2.0));
                    for (x, w) in nodes.0.iter().zip(&nodes.1) {
                        let psi = mid + half * T::lit(*x);
                        moved = moved + T::lit(*w) * half * self.density(phi, psi).unwrap_or(T::zero());
                    }
                }
                let base = match &self.proposal {
                    Proposal::Kernel(k) => k.atom(phi),
                    _ => T::zero(),
                };
                (T::one() - moved).max(T::zero()).max(base)
            }
        }
    }

    fn row(&self, phi: T, edges: &[T], opts: &RowOptions, rng: &mut Stream) -> Result<Row<T>> {
        match (&self.acceptance, &self.proposal) {
            (Acceptance::Constant(c), Proposal::Kernel(k)) => {
                let b = k.row(phi, edges, opts, rng)?;
                Ok(Row { atom: T::one() - *c + *c * b.atom, masses: b.masses.into_iter().map(|m| *c * m).collect() })
            }
            _ => {
                let mut row = density_row(|psi| self.density(phi, psi), T::zero(), edges, opts.quad_nodes)?;
                let moved = row.masses.iter().fold(T::zero(), |a, &m| a + m);
                row.atom = (T::one() - moved).max(T::zero());
                Ok(row)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationarityReport {
    pub angle: KsResult,
    pub speed: Option<KsResult>,
    /// Smallest p-value over the tested marginals.
    pub p_value: f64,
}

/// One step from the declared stationary measure, compared with it by
/// one-sample KS tests on the angle (and the speed for thermal measures).
pub fn check_stationarity<T: Real>(kernel: &dyn CollisionKernel<T>, n_samples: usize, rng: &mut Stream) -> Result<StationarityReport> {
    if n_samples < 10_000 {
        return Err(Error::Domain("stationarity check needs at least 1e4 samples".into()));
    }
    let nu = kernel.stationary();
    let mut angles = Vec::with_capacity(n_samples);
    let mut speeds = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let x = nu.sample_state(rng);
        let y = kernel.step(x, rng)?;
        angles.push(y.phi.f64());
        speeds.push(y.speed.f64());
    }
    let angle = stats::ks_one_sample(&mut angles, SurfaceMeasure::<f64>::angle_cdf);
    let speed = nu.speed_cdf(1.0).map(|_| stats::ks_one_sample(&mut speeds, |s| nu.speed_cdf(s).unwrap()));
    let p_value = speed.map_or(angle.p_value, |s| s.p_value.min(angle.p_value));
    Ok(StationarityReport { angle, speed, p_value })
}

/// Largest violation `|w(phi) p(phi,psi) - w(psi) p(psi,phi)|` over grid pairs.
pub fn check_detailed_balance<T: Real>(kernel: &dyn CollisionKernel<T>, grid: &[T]) -> Result<T> {
    let nu = kernel.stationary();
    let mut worst = T::zero();
    for (i, &a) in grid.iter().enumerate() {
        for &b in &grid[i + 1..] {
            let (pab, pba) = match (kernel.density(a, b), kernel.density(b, a)) {
                (Some(x), Some(y)) => (x, y),
                _ => return Err(Error::Unsupported(format!("{} has no density on the grid", kernel.label()))),
            };
            let v = (nu.angle_density(a) * pab - nu.angle_density(b) * pba).abs();
            worst = worst.max(v);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DominationReport {
    pub holds: bool,
    /// Largest `P2(v, A\{v}) - P1(v, A\{v})` seen.
    pub max_deficit: f64,
}

/// Whether `k1` moves at least as much mass as `k2` (up to `tol`) into every
/// cell of `edges` from every node, atoms excluded.
pub fn dominates_off_diagonal<T: Real>(
    k1: &dyn CollisionKernel<T>,
    k2: &dyn CollisionKernel<T>,
    edges: &[T],
    nodes: &[T],
    tol: T,
    opts: &RowOptions,
    rng: &mut Stream,
) -> Result<DominationReport> {
    let mut worst = f64::NEG_INFINITY;
    for &v in nodes {
        let r1 = k1.row(v, edges, opts, rng)?;
        let r2 = k2.row(v, edges, opts, rng)?;
        for (a, b) in r1.masses.iter().zip(&r2.masses) {
            worst = worst.max((*b - *a).f64());
        }
    }
    Ok(DominationReport { holds: worst <= tol.f64(), max_deficit: worst })
}

/// Stationary measure block of a kernel specification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MeasureSpec {
    Cosine {
        #[serde(default = "one")]
        s: f64,
    },
    Maxwellian {
        beta: f64,
        #[serde(rename = "M")]
        mass: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Default for MeasureSpec {
    fn default() -> Self {
        MeasureSpec::Cosine { s: 1.0 }
    }
}

impl MeasureSpec {
    pub fn build<T: Real>(&self) -> Result<SurfaceMeasure<T>> {
        match *self {
            MeasureSpec::Cosine { s } => SurfaceMeasure::cosine(T::lit(s)),
            MeasureSpec::Maxwellian { beta, mass } => SurfaceMeasure::maxwellian(T::lit(beta), T::lit(mass)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Semicircle,
    FlatTop,
    MiddleWall,
    FlatBottom,
    Ms,
    Mh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Uniform,
    RandomWalk,
    Semicircle,
}

/// Kernel block of an experiment configuration.
///
/// `acceptance` applies to `mh` only: absent means the ratio rule, a number
/// means a constant acceptance probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSpec {
    #[serde(rename = "type")]
    pub kind: KernelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub measure: MeasureSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposal: Option<ProposalKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acceptance: Option<f64>,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        KernelSpec { kind, h: None, alpha: None, measure: MeasureSpec::default(), proposal: None, width: None, acceptance: None }
    }

    pub fn with_h(mut self, h: f64) -> Self {
        self.h = Some(h);
        self
    }

    pub fn with_alpha(mut self, a: f64) -> Self {
        self.alpha = Some(a);
        self
    }

    fn need(v: Option<f64>, name: &str, kind: KernelKind) -> Result<f64> {
        v.ok_or_else(|| Error::Domain(format!("kernel type {kind:?} requires `{name}`")))
    }

    pub fn build<T: Real>(&self) -> Result<KernelRef<T>> {
        let m = self.measure.build::<T>()?;
        let h = || Self::need(self.h, "h", self.kind).map(T::lit);
        Ok(match self.kind {
            KernelKind::Semicircle => Arc::new(MicrostructureKernel::new(CellGeometry::semicircle(), m)),
            KernelKind::FlatTop => {
                let base: KernelRef<T> = Arc::new(MicrostructureKernel::new(CellGeometry::semicircle(), m));
                Arc::new(FlatTopKernel::new(h()?, base)?)
            }
            KernelKind::MiddleWall => Arc::new(MicrostructureKernel::new(CellGeometry::middle_wall(h()?)?, m)),
            KernelKind::FlatBottom => Arc::new(MicrostructureKernel::new(CellGeometry::flat_bottom(h()?)?, m)),
            KernelKind::Ms => Arc::new(MaxwellSmoluchowski::new(T::lit(Self::need(self.alpha, "alpha", self.kind)?), m)?),
            KernelKind::Mh => {
                let proposal = match self.proposal.unwrap_or(ProposalKind::RandomWalk) {
                    ProposalKind::Uniform => Proposal::UniformAngle,
                    ProposalKind::RandomWalk => Proposal::RandomWalk { width: T::lit(self.width.unwrap_or(0.3)) },
                    ProposalKind::Semicircle => Proposal::Kernel(Arc::new(MicrostructureKernel::new(CellGeometry::semicircle(), m))),
                };
                let acceptance = match self.acceptance {
                    Some(c) => Acceptance::Constant(T::lit(c)),
                    None => Acceptance::Ratio,
                };
                Arc::new(MetropolisHastings::new(proposal, m, acceptance)?)
            }
        })
    }
}
