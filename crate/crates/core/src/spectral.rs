//! Discretized collision operators and the spectral diffusivity.
//!
//! A kernel is discretized on a partition of `(0, pi)` by cell averages
//! (Galerkin / Ulam): `P_ij` is the probability of landing in cell `j` starting
//! from the stationary law restricted to cell `i`. The flux matrix `W P` is
//! symmetrized, stochasticity is restored on the diagonal (which keeps the
//! symmetry), and the symmetric matrix `W^{-1/2} (W P) W^{-1/2}` is diagonalized.
//!
//! The default partition is geometric in the distance to the nearest end of
//! `(0, pi)`: displacements `cot(phi)` diverge at both ends, and the truncated
//! second moment lives on a logarithmic range of angles.

use crate::kernels::{angle_mass, sampled_row, CollisionKernel, RowMode, RowOptions};
use crate::rng;
use crate::stats;
use crate::{Error, Real, Result};
use nalgebra::{DMatrix, RealField, SymmetricEigen};
use num_traits::Float;
use rayon::prelude::*;
use serde::Serialize;

/// Partition of `(0, pi)` into cells.
#[derive(Debug, Clone, PartialEq)]
pub struct AngleGrid<T> {
    pub edges: Vec<T>,
}

impl<T: Real> AngleGrid<T> {
    /// `cells` cells (even), edges `pi/2 * rho^-k` on the left half down to
    /// `min_angle`, mirrored about `pi/2`.
    pub fn geometric(cells: usize, min_angle: T) -> Result<Self> {
        if cells < 4 || cells % 2 == 1 {
            return Err(Error::Domain(format!("geometric grid needs an even cell count >= 4, got {cells}")));
        }
        if !(min_angle > T::zero() && min_angle < T::FRAC_PI_2()) {
            return Err(Error::Domain(format!("min angle {min_angle} outside (0, pi/2)")));
        }
        let half = cells / 2;
        let pi2 = T::FRAC_PI_2();
        let span = (pi2 / min_angle).ln();
        let steps = T::lit((half - 1).max(1) as f64);
        let mut left: Vec<T> = (0..half).map(|k| pi2 * (-(span * T::lit(k as f64) / steps)).exp()).collect();
        left.push(T::zero());
        left.reverse();
        let mut edges = left.clone();
        for e in left.iter().rev().skip(1) {
            edges.push(T::PI() - *e);
        }
        Ok(AngleGrid { edges })
    }

    /// Equal stationary mass per cell.
    pub fn quantile(cells: usize) -> Result<Self> {
        if cells < 2 {
            return Err(Error::Domain("quantile grid needs at least 2 cells".into()));
        }
        let n = T::lit(cells as f64);
        let edges = (0..=cells).map(|k| (T::one() - T::lit(2.0) * T::lit(k as f64) / n).max(-T::one()).min(T::one()).acos()).collect();
        Ok(AngleGrid { edges })
    }

    pub fn cells(&self) -> usize {
        self.edges.len() - 1
    }

    /// Stationary masses of the cells.
    pub fn weights(&self) -> Vec<T> {
        self.edges.windows(2).map(|c| angle_mass(c[0], c[1])).collect()
    }

    pub fn midpoints(&self) -> Vec<T> {
        self.edges.windows(2).map(|c| (c[0] + c[1]) / T::lit(2.0)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Geometric,
    Quantile,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizeOptions {
    pub row: RowOptions,
    /// Gauss-Legendre nodes in the source angle per panel.
    pub sub_nodes: usize,
    /// Maximal number of bisections of a source cell.
    pub max_refine: usize,
    /// L1 agreement between a panel and its halves that stops the bisection.
    pub refine_tol: f64,
    pub seed: u64,
}

impl Default for DiscretizeOptions {
    fn default() -> Self {
        DiscretizeOptions { row: RowOptions::default(), sub_nodes: 4, max_refine: 0, refine_tol: 1e-4, seed: 0 }
    }
}

/// Weighted discretization of a kernel.
#[derive(Debug, Clone)]
pub struct KernelMatrix<T: Real> {
    pub label: String,
    pub edges: Vec<T>,
    pub nodes: Vec<T>,
    /// Stationary mass of each cell.
    pub weights: Vec<T>,
    /// Row-stochastic transition matrix.
    pub entries: DMatrix<T>,
    /// Symmetric flux matrix `W P`.
    pub flux: DMatrix<T>,
    /// Largest `|F_ij - F_ji|` before symmetrization, relative to the largest weight.
    pub asymmetry: f64,
    /// Largest diagonal correction applied to restore unit row sums, relative to the row weight.
    pub diagonal_correction: f64,
    /// Smallest `P_ii`; slightly negative when a row's flux was underresolved.
    pub min_diagonal: f64,
}

impl<T: Real> KernelMatrix<T> {
    pub fn size(&self) -> usize {
        self.weights.len()
    }
}

/// Cell-averaged transition matrix of `kernel` on `grid`.
pub fn discretize_kernel<T: Real>(
    kernel: &dyn CollisionKernel<T>,
    grid: &AngleGrid<T>,
    opts: &DiscretizeOptions,
) -> Result<KernelMatrix<T>> {
    let n = grid.cells();
    if n < 4 {
        return Err(Error::Domain("grid too small".into()));
    }
    let edges = &grid.edges;
    let weights = grid.weights();
    let gl = stats::gauss_legendre(opts.sub_nodes.max(1));
    let adaptive = opts.row.mode != RowMode::Histogram && opts.max_refine > 0;
    let rows: Vec<Result<Vec<T>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng::stream(opts.seed, "discretize", i as u64);
            let mut eval = |lo: T, hi: T, scale: T| -> Result<Panel<T>> {
                let mut acc = vec![T::zero(); n];
                let mut weight = T::zero();
                let (mid, half) = ((lo + hi) / T::lit(2.0), (hi - lo) / T::lit(2.0));
                for (x, w) in gl.0.iter().zip(&gl.1) {
                    let phi = mid + half * T::lit(*x);
                    let wq = T::lit(*w) * half * phi.sin() * scale;
                    let row = match opts.row.mode {
                        RowMode::Histogram => sampled_row(kernel, phi, edges, opts.row.samples, &mut stream)?,
                        _ => kernel.row(phi, edges, &opts.row, &mut stream)?,
                    };
                    for (a, m) in acc.iter_mut().zip(&row.masses) {
                        *a = *a + wq * *m;
                    }
                    acc[i] = acc[i] + wq * row.atom;
                    weight = weight + wq;
                }
                Ok(Panel { acc, weight })
            };
            let mut total = Panel { acc: vec![T::zero(); n], weight: T::zero() };
            let panels = source_panels(edges, i);
            let refine = adaptive && panels.len() == 1;
            for (lo, hi, scale) in panels {
                let whole = eval(lo, hi, scale)?;
                let part = if refine { refine_panel(&mut eval, lo, hi, whole, opts.refine_tol, opts.max_refine)? } else { whole };
                total.add(&part);
            }
            Ok(total.acc.into_iter().map(|v| v / total.weight).collect())
        })
        .collect();
    let mut p = DMatrix::<T>::zeros(n, n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, v) in row?.into_iter().enumerate() {
            p[(i, j)] = v;
        }
    }
    assemble(kernel.label(), grid, weights, p)
}

/// Largest tolerated negative transition probability on the diagonal after
/// the stochastic correction; strongly stretching exit maps leave rows whose
/// symmetrized flux slightly exceeds the cell mass.
pub const NEGATIVE_DIAGONAL_TOL: f64 = 2e-2;

const END_CELL_LEVELS: usize = 512;

/// Stationary-weighted row integral over a piece of a source cell.
struct Panel<T> {
    acc: Vec<T>,
    weight: T,
}

impl<T: Real> Panel<T> {
    fn add(&mut self, o: &Panel<T>) {
        for (a, b) in self.acc.iter_mut().zip(&o.acc) {
            *a = *a + *b;
        }
        self.weight = self.weight + o.weight;
    }

    /// L1 distance between the normalized rows.
    fn distance(&self, o: &Panel<T>) -> T {
        self.acc.iter().zip(&o.acc).fold(T::zero(), |d, (a, b)| d + (*a / self.weight - *b / o.weight).abs())
    }
}

/// Bisects the source interval until the two halves agree with the whole.
fn refine_panel<T: Real>(
    eval: &mut impl FnMut(T, T, T) -> Result<Panel<T>>,
    lo: T,
    hi: T,
    whole: Panel<T>,
    tol: f64,
    depth: usize,
) -> Result<Panel<T>> {
    let mid = (lo + hi) / T::lit(2.0);
    let left = eval(lo, mid, T::one())?;
    let right = eval(mid, hi, T::one())?;
    let mut both = Panel { acc: left.acc.clone(), weight: left.weight };
    both.add(&right);
    if depth <= 1 || whole.distance(&both) <= T::lit(tol) {
        return Ok(both);
    }
    let mut out = refine_panel(eval, lo, mid, left, tol, depth - 1)?;
    out.add(&refine_panel(eval, mid, hi, right, tol, depth - 1)?);
    Ok(out)
}

/// Source intervals `(lo, hi, weight scale)` for cell `i`. The end cells reach
/// down to 0 (or up to pi) and are split geometrically with the ratio of
/// their neighbour, so that their pieces match the resolution of the cells
/// they feed.
fn source_panels<T: Real>(edges: &[T], i: usize) -> Vec<(T, T, T)> {
    let n = edges.len() - 1;
    let pi = T::PI();
    let end = n > 2 && (i == 0 || i == n - 1);
    if !end {
        return vec![(edges[i], edges[i + 1], T::one())];
    }
    // distance to the end of (0, pi) and ratio of the neighbouring cell
    let (outer, ratio) = if i == 0 {
        (edges[1], edges[2] / edges[1])
    } else {
        (pi - edges[n - 1], (pi - edges[n - 2]) / (pi - edges[n - 1]))
    };
    let ratio = ratio.max(T::lit(1.0 + 1e-6));
    let mut out = Vec::new();
    let mut hi = outer;
    for _ in 0..END_CELL_LEVELS {
        let lo = hi / ratio;
        out.push((lo, hi, T::one()));
        hi = lo;
        if hi / outer < T::lit(1e-4) {
            break;
        }
    }
    // the tail below `hi` (relative mass under 1e-8) goes to the innermost piece
    let tail = angle_mass(T::zero(), hi);
    let last = out.len() - 1;
    let (lo, top, _) = out[last];
    out[last].2 = T::one() + tail / angle_mass(lo, top);
    if i == n - 1 {
        for p in &mut out {
            *p = (pi - p.1, pi - p.0, p.2);
        }
    }
    out
}

/// Builds the matrix from raw rows: symmetrizes the flux and restores
/// stochasticity on the diagonal.
pub fn assemble<T: Real>(label: String, grid: &AngleGrid<T>, weights: Vec<T>, raw: DMatrix<T>) -> Result<KernelMatrix<T>> {
    let n = weights.len();
    let mut flux = DMatrix::<T>::zeros(n, n);
    let wmax = weights.iter().fold(T::zero(), |a, &b| a.max(b));
    let mut asym = T::zero();
    for i in 0..n {
        for j in 0..=i {
            let fij = weights[i] * raw[(i, j)];
            let fji = weights[j] * raw[(j, i)];
            asym = asym.max((fij - fji).abs());
            let s = (fij + fji) / T::lit(2.0);
            flux[(i, j)] = s;
            flux[(j, i)] = s;
        }
    }
    let mut worst_fix = T::zero();
    let mut min_diag = T::infinity();
    for i in 0..n {
        let sum = (0..n).fold(T::zero(), |a, j| a + flux[(i, j)]);
        let fix = weights[i] - sum;
        flux[(i, i)] = flux[(i, i)] + fix;
        if weights[i] > T::zero() {
            worst_fix = worst_fix.max((fix / weights[i]).abs());
            min_diag = min_diag.min(flux[(i, i)] / weights[i]);
        }
    }
    if min_diag < -T::lit(NEGATIVE_DIAGONAL_TOL) {
        return Err(Error::Discretization(format!("diagonal {min_diag} after stochastic correction is below -{NEGATIVE_DIAGONAL_TOL}")));
    }
    // 1e-8, or the rounding of an n-term sum when the scalar is coarser
    let row_tol = T::lit(1e-8).max(T::epsilon() * T::lit(4.0 * n as f64));
    let mut entries = DMatrix::<T>::zeros(n, n);
    for i in 0..n {
        if weights[i] <= T::zero() {
            return Err(Error::Discretization(format!("cell {i} has zero stationary mass")));
        }
        for j in 0..n {
            entries[(i, j)] = flux[(i, j)] / weights[i];
        }
        let s = (0..n).fold(T::zero(), |a, j| a + entries[(i, j)]);
        if (s - T::one()).abs() > row_tol {
            return Err(Error::Discretization(format!("row {i} sums to {s}")));
        }
    }
    Ok(KernelMatrix {
        label,
        edges: grid.edges.clone(),
        nodes: grid.midpoints(),
        weights,
        entries,
        flux,
        asymmetry: (asym / wmax).f64(),
        diagonal_correction: worst_fix.f64(),
        min_diagonal: min_diag.f64(),
    })
}

/// Eigen-decomposition of a discretized kernel.
#[derive(Debug, Clone)]
pub struct Decomposition<T: Real> {
    /// Descending.
    pub eigenvalues: Vec<T>,
    /// Columns `u_k`, orthonormal; the eigenvectors of `P` that are orthonormal
    /// in the weighted inner product are `u_k / sqrt(w)`.
    pub vectors: DMatrix<T>,
    pub weights: Vec<T>,
    /// Index of the constant mode.
    pub constant: usize,
}

impl<T: Real> Decomposition<T> {
    /// `k`-th eigenvector of `P`, normalized in the weighted inner product.
    pub fn eigenvector(&self, k: usize) -> Vec<T> {
        (0..self.weights.len()).map(|i| self.vectors[(i, k)] / Float::sqrt(self.weights[i])).collect()
    }
}

pub fn spectrum<T: Real + RealField>(m: &KernelMatrix<T>) -> Result<Decomposition<T>> {
    let n = m.size();
    let sw: Vec<T> = m.weights.iter().map(|w| Float::sqrt(*w)).collect();
    let sym = DMatrix::from_fn(n, n, |i, j| m.flux[(i, j)] / (sw[i] * sw[j]));
    if sym.iter().any(|v| !Float::is_finite(*v)) {
        return Err(Error::Eigen("non-finite entries in the symmetrized matrix".into()));
    }
    let eig = SymmetricEigen::try_new(sym, T::lit(1e-15), 0)
        .ok_or_else(|| Error::Eigen(format!("no convergence for n={n} (asymmetry {:e})", m.asymmetry)))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let eigenvalues: Vec<T> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    // the constant function maps to sqrt(w)
    let mut constant = 0;
    let mut best = T::zero();
    for k in 0..n {
        let o = Float::abs((0..n).fold(T::zero(), |a, i| a + vectors[(i, k)] * sw[i]));
        if o > best {
            best = o;
            constant = k;
        }
    }
    Ok(Decomposition { eigenvalues, vectors, weights: m.weights.clone(), constant })
}

/// `1 - max |lambda|` over the non-constant modes.
pub fn spectral_gap<T: Real>(d: &Decomposition<T>) -> T {
    let m = d
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != d.constant)
        .fold(T::zero(), |a, (_, l)| a.max(Float::abs(*l)));
    T::one() - m
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralMeasure<T> {
    pub eigenvalues: Vec<T>,
    /// Masses in the same order, summing to 1.
    pub masses: Vec<T>,
    pub constant: usize,
}

/// Spectral measure of the observable `z` (values on cells); the constant
/// mode is projected out first.
pub fn spectral_measure<T: Real>(d: &Decomposition<T>, z: &[T]) -> Result<SpectralMeasure<T>> {
    let n = d.weights.len();
    if z.len() != n {
        return Err(Error::Domain(format!("observable has {} values for {n} cells", z.len())));
    }
    let wsum = d.weights.iter().fold(T::zero(), |a, &w| a + w);
    let mean = (0..n).fold(T::zero(), |a, i| a + d.weights[i] * z[i]) / wsum;
    let y: Vec<T> = (0..n).map(|i| Float::sqrt(d.weights[i]) * (z[i] - mean)).collect();
    let norm2 = y.iter().fold(T::zero(), |a, &v| a + v * v);
    if !(norm2 > T::zero()) {
        return Err(Error::ZeroNorm);
    }
    let masses = (0..n)
        .map(|k| {
            let c = (0..n).fold(T::zero(), |a, i| a + d.vectors[(i, k)] * y[i]);
            c * c / norm2
        })
        .collect();
    Ok(SpectralMeasure { eigenvalues: d.eigenvalues.clone(), masses, constant: d.constant })
}

/// `sum m_k (1+lambda_k)/(1-lambda_k)` without the constant mode.
pub fn eta_from_measure<T: Real>(m: &SpectralMeasure<T>) -> Result<T> {
    let mut eta = T::zero();
    for (k, (&l, &w)) in m.eigenvalues.iter().zip(&m.masses).enumerate() {
        if k == m.constant {
            continue;
        }
        if l > T::one() - T::lit(1e-9) {
            if w > T::lit(1e-12) {
                return Err(Error::MassAtUnitEigenvalue { lambda: l.f64(), mass: w.f64() });
            }
            continue;
        }
        eta = eta + w * (T::one() + l) / (T::one() - l);
    }
    Ok(eta)
}

/// Cell averages of `cot(phi) 1{|cot phi| <= a}` under the stationary law
/// (displacement in units of the channel width).
pub fn truncated_displacement<T: Real>(edges: &[T], a: T) -> Vec<T> {
    let cut = (T::one() / a).atan();
    let hi_cut = T::PI() - cut;
    edges
        .windows(2)
        .map(|c| {
            let w = angle_mass(c[0], c[1]);
            let lo = c[0].max(cut);
            let hi = c[1].min(hi_cut);
            if hi <= lo || w <= T::zero() {
                T::zero()
            } else {
                // integral of cot(phi) sin(phi)/2
                (hi.sin() - lo.sin()) / T::lit(2.0) / w
            }
        })
        .collect()
}

/// Truncated spectral diffusivity for the displacement observable.
pub fn eta_truncated<T: Real>(d: &Decomposition<T>, edges: &[T], a: T) -> Result<T> {
    eta_from_measure(&spectral_measure(d, &truncated_displacement(edges, a))?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EtaExtrapolation {
    pub eta: f64,
    /// Standard error of the intercept from the fit residuals.
    pub uncertainty: f64,
    /// Coefficient of `1/ln a`.
    pub slope: f64,
    pub rms_residual: f64,
    /// Intercept of a fit with an extra `1/ln^2 a` term (when 4+ points).
    pub eta_quadratic: Option<f64>,
    pub warning: Option<String>,
}

/// Fits `eta_a = eta + c / ln a` by least squares.
pub fn eta_extrapolate(points: &[(f64, f64)]) -> Result<EtaExtrapolation> {
    if points.len() < 2 {
        return Err(Error::Domain("extrapolation needs at least two points".into()));
    }
    if points.iter().any(|(a, _)| !(*a > 1.0)) {
        return Err(Error::Domain("truncation levels must exceed 1".into()));
    }
    let x: Vec<f64> = points.iter().map(|(a, _)| 1.0 / a.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = stats::linear_fit(&x, &y).ok_or_else(|| Error::Numeric("singular extrapolation fit".into()))?;
    let eta_quadratic = (points.len() >= 4)
        .then(|| {
            let rows: Vec<Vec<f64>> = x.iter().map(|&u| vec![1.0, u, u * u]).collect();
            stats::least_squares(&rows, &y, None).map(|f| f.coef[0])
        })
        .flatten();
    let mut warning = None;
    let scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let diffs: Vec<f64> = y.windows(2).map(|w| w[1] - w[0]).filter(|d| d.abs() > 1e-9 * scale).collect();
    if diffs.windows(2).any(|w| w[0].signum() != w[1].signum()) {
        warning = Some("non-monotone trend in eta_a".to_string());
    } else if fit.rms > 1e-3 * scale {
        warning = Some(format!("fit residual {:.2e} is large", fit.rms));
    }
    Ok(EtaExtrapolation { eta: fit.coef[0], uncertainty: fit.se[0], slope: fit.coef[1], rms_residual: fit.rms, eta_quadratic, warning })
}

/// Settings of the full spectral pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub grid: GridKind,
    pub grid_size: usize,
    pub min_angle: f64,
    pub mode: RowMode,
    pub a_values: Vec<f64>,
    pub r_points: usize,
    pub sub_nodes: usize,
    pub max_refine: usize,
    pub refine_tol: f64,
    pub quad_nodes: usize,
    pub samples: usize,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        SpectralConfig {
            grid: GridKind::Geometric,
            grid_size: 2048,
            min_angle: 1e-9,
            mode: RowMode::Quadrature,
            a_values: vec![1e2, 1e3, 1e4, 1e5, 1e6],
            r_points: 1024,
            sub_nodes: 4,
            max_refine: 0,
            refine_tol: 1e-4,
            quad_nodes: 4,
            samples: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EigenSummary {
    pub top: Vec<f64>,
    pub min: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpectralReport {
    pub kernel: String,
    pub grid_size: usize,
    pub eigenvalues: EigenSummary,
    pub gap: f64,
    pub eta_a: Vec<(f64, f64)>,
    pub eta: f64,
    pub uncertainty: f64,
    pub extrapolation: EtaExtrapolation,
    pub asymmetry: f64,
    pub diagonal_correction: f64,
    pub min_diagonal: f64,
}

impl SpectralConfig {
    pub fn grid<T: Real>(&self) -> Result<AngleGrid<T>> {
        match self.grid {
            GridKind::Geometric => AngleGrid::geometric(self.grid_size, T::lit(self.min_angle)),
            GridKind::Quantile => AngleGrid::quantile(self.grid_size),
        }
    }

    pub fn options(&self, seed: u64) -> DiscretizeOptions {
        DiscretizeOptions {
            row: RowOptions { mode: self.mode, r_points: self.r_points, quad_nodes: self.quad_nodes, samples: self.samples },
            sub_nodes: self.sub_nodes,
            max_refine: self.max_refine,
            refine_tol: self.refine_tol,
            seed,
        }
    }
}

/// Discretize, diagonalize, evaluate `eta_a` on the schedule and extrapolate.
pub fn run_pipeline<T: Real + RealField>(kernel: &dyn CollisionKernel<T>, cfg: &SpectralConfig, seed: u64) -> Result<SpectralReport> {
    if cfg.grid_size < 64 {
        return Err(Error::Domain("grid_size must be at least 64".into()));
    }
    let grid = cfg.grid::<T>()?;
    let m = discretize_kernel(kernel, &grid, &cfg.options(seed))?;
    let d = spectrum(&m)?;
    let mut eta_a = Vec::new();
    for &a in &cfg.a_values {
        eta_a.push((a, eta_truncated(&d, &grid.edges, T::lit(a))?.f64()));
    }
    let extrapolation = eta_extrapolate(&eta_a)?;
    let nonconst: Vec<f64> = d.eigenvalues.iter().enumerate().filter(|(k, _)| *k != d.constant).map(|(_, l)| l.f64()).collect();
    Ok(SpectralReport {
        kernel: kernel.label(),
        grid_size: m.size(),
        eigenvalues: EigenSummary {
            top: d.eigenvalues.iter().take(8).map(|l| l.f64()).collect(),
            min: nonconst.iter().copied().fold(f64::INFINITY, f64::min),
            count: d.eigenvalues.len(),
        },
        gap: spectral_gap(&d).f64(),
        eta: extrapolation.eta,
        uncertainty: extrapolation.uncertainty,
        eta_a,
        extrapolation,
        asymmetry: m.asymmetry,
        diagonal_correction: m.diagonal_correction,
        min_diagonal: m.min_diagonal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{FlatTopKernel, IdentityKernel, KernelKind, KernelSpec, MaxwellSmoluchowski, SurfaceMeasure};
    use std::sync::Arc;

    #[test]
    fn geometric_grid_is_symmetric_and_complete() {
        let g = AngleGrid::<f64>::geometric(64, 1e-6).unwrap();
        assert_eq!(g.cells(), 64);
        assert_eq!(g.edges[0], 0.0);
        assert!((g.edges[64] - std::f64::consts::PI).abs() < 1e-15);
        for k in 0..=64 {
            assert!((g.edges[k] + g.edges[64 - k] - std::f64::consts::PI).abs() < 1e-14);
        }
        assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let q = AngleGrid::<f64>::quantile(10).unwrap();
        for w in q.weights() {
            assert!((w - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn ms_matrix_and_spectrum() {
        let k = MaxwellSmoluchowski::new(0.25, SurfaceMeasure::cosine(1.0).unwrap()).unwrap();
        let g = AngleGrid::geometric(64, 1e-6).unwrap();
        let m = discretize_kernel(&k, &g, &DiscretizeOptions::default()).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                let want = 0.25 * m.weights[j] + if i == j { 0.75 } else { 0.0 };
                assert!((m.entries[(i, j)] - want).abs() < 1e-14);
            }
        }
        let d = spectrum(&m).unwrap();
        assert!((d.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!(d.eigenvalues[1..].iter().all(|l| (l - 0.75).abs() < 1e-12));
        assert!((spectral_gap(&d) - 0.25).abs() < 1e-12);
        let eta = eta_truncated(&d, &g.edges, 1e3).unwrap();
        assert!((eta - (1.75 / 0.25)).abs() < 1e-10);
    }

    #[test]
    fn extrapolation_oracles() {
        let c: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5].iter().map(|&a| (a, 0.7)).collect();
        let e = eta_extrapolate(&c).unwrap();
        assert!((e.eta - 0.7).abs() < 1e-14 && e.uncertainty < 1e-12);
        let s: Vec<(f64, f64)> = [1e2, 1e3, 1e4, 1e5, 1e6].iter().map(|&a: &f64| (a, 0.5 + 1.0 / a.ln())).collect();
        let e = eta_extrapolate(&s).unwrap();
        assert!((e.eta - 0.5).abs() < 1e-3);
        assert!(e.warning.is_none());
        let wobble = vec![(1e2, 0.6), (1e3, 0.5), (1e4, 0.55), (1e5, 0.52)];
        assert!(eta_extrapolate(&wobble).unwrap().warning.is_some());
    }

    #[test]
    fn identity_kernel_has_only_unit_eigenvalues() {
        let k = IdentityKernel::new(SurfaceMeasure::cosine(1.0).unwrap());
        let g = AngleGrid::geometric(64, 1e-6).unwrap();
        let m = discretize_kernel(&k, &g, &DiscretizeOptions::default()).unwrap();
        assert!((m.entries.clone() - DMatrix::<f64>::identity(64, 64)).abs().max() < 1e-14);
        let d = spectrum(&m).unwrap();
        assert!(d.eigenvalues.iter().all(|l| (l - 1.0).abs() < 1e-12));
        assert!(spectral_gap(&d).abs() < 1e-12);
        let err = eta_truncated(&d, &g.edges, 1e3).unwrap_err();
        assert!(matches!(err, Error::MassAtUnitEigenvalue { .. }), "{err}");
    }

    #[test]
    fn semicircle_matrix_invariants_and_eta() {
        let k = KernelSpec::new(KernelKind::Semicircle).build::<f64>().unwrap();
        let cfg = SpectralConfig { grid_size: 256, ..Default::default() };
        let g = cfg.grid::<f64>().unwrap();
        let m = discretize_kernel(k.as_ref(), &g, &cfg.options(1)).unwrap();
        let n = m.size();
        for i in 0..n {
            let row: f64 = (0..n).map(|j| m.entries[(i, j)]).sum();
            assert!((row - 1.0).abs() < 1e-8);
            for j in 0..i {
                let f = m.weights[i] * m.entries[(i, j)] - m.weights[j] * m.entries[(j, i)];
                assert!(f.abs() < 1e-8);
            }
        }
        assert!(m.asymmetry < 5e-3 && m.min_diagonal > -NEGATIVE_DIAGONAL_TOL);
        let d = spectrum(&m).unwrap();
        assert_eq!(d.constant, 0);
        assert!((d.eigenvalues[0] - 1.0).abs() < 1e-10);
        assert!(d.eigenvalues.iter().all(|l| *l <= 1.0 + 1e-10 && *l >= -1.0 - 1e-10));
        let z = truncated_displacement(&g.edges, 1e4);
        let sm = spectral_measure(&d, &z).unwrap();
        assert!((sm.masses.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(sm.masses[sm.constant] < 1e-20);
        let r = run_pipeline(k.as_ref(), &cfg, 1).unwrap();
        let exact = crate::analysis::closed_form_eta(crate::analysis::Family::Semicircle, 0.0).unwrap().eta;
        assert!((r.eta / exact - 1.0).abs() < 0.01, "{} vs {exact}", r.eta);
    }

    #[test]
    fn flat_top_spectrum_is_affine() {
        let base = KernelSpec::new(KernelKind::Semicircle).build::<f64>().unwrap();
        let flat = FlatTopKernel::new(0.25, Arc::clone(&base)).unwrap();
        let g = AngleGrid::geometric(128, 1e-9).unwrap();
        let opts = DiscretizeOptions::default();
        let d0 = spectrum(&discretize_kernel(base.as_ref(), &g, &opts).unwrap()).unwrap();
        let d1 = spectrum(&discretize_kernel(&flat, &g, &opts).unwrap()).unwrap();
        for (a, b) in d0.eigenvalues.iter().zip(&d1.eigenvalues) {
            assert!((0.75 * a + 0.25 - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_precision_pipeline() {
        let k = MaxwellSmoluchowski::new(0.5f32, SurfaceMeasure::cosine(1.0f32).unwrap()).unwrap();
        let g = AngleGrid::<f32>::geometric(64, 1e-5).unwrap();
        let m = discretize_kernel(&k, &g, &DiscretizeOptions::default());
        let d = spectrum(&m.map_err(|e| e.to_string()).unwrap()).unwrap();
        let eta = eta_truncated(&d, &g.edges, 1e3f32).unwrap();
        assert!((eta - 3.0).abs() < 1e-3, "{eta}");
    }

    #[test]
    fn measure_with_synthetic_spectrum() {
        let m = SpectralMeasure { eigenvalues: vec![1.0, 0.5, -0.5], masses: vec![0.0, 0.5, 0.5], constant: 0 };
        assert!((eta_from_measure(&m).unwrap() - (0.5 * 3.0 + 0.5 / 3.0)).abs() < 1e-15);
    }
}
