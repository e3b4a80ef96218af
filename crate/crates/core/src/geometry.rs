//! Billiard dynamics inside one wall cell.
//!
//! Coordinates: the cell has width 1, its opening is the segment `[0,1]` on the
//! line `y = 0` and the relief lies below. A particle enters at `(r, 0)` moving
//! along `(cos phi, -sin phi)`; it leaves moving along `(cos psi, sin psi)`.
//! Both angles are measured from the wall line, in `(0, pi)`.

use crate::{Error, Real, Result};
use serde::{Deserialize, Serialize};

/// Inputs closer than this to a discontinuity of the exit map are rejected.
pub const DISCONTINUITY_TOL: f64 = 1e-12;
/// Normalized discriminant below which a ray-arc contact counts as grazing.
pub const GRAZING_TOL: f64 = 1e-14;
/// Entry angles closer than this to the wall are rejected.
pub const MIN_ENTRY_ANGLE: f64 = 1e-9;
pub const DEFAULT_MAX_BOUNCES: usize = 1_000_000;
/// Shallow-angle threshold of the semicircle (scaled for the flat bottom).
pub const SHALLOW_THRESHOLD: f64 = std::f64::consts::PI / 12.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellFamily {
    Semicircle,
    FlatTop,
    MiddleWall,
    FlatBottom,
}

impl CellFamily {
    pub fn name(self) -> &'static str {
        match self {
            CellFamily::Semicircle => "semicircle",
            CellFamily::FlatTop => "flat_top",
            CellFamily::MiddleWall => "middle_wall",
            CellFamily::FlatBottom => "flat_bottom",
        }
    }
}

/// One period of the wall relief.
///
/// * `FlatTop(h)`: a semicircle of diameter `1-h` centred in the cell, flanked by
///   flat pieces of total length `h` lying on the opening line.
/// * `MiddleWall(h)`: semicircle plus a vertical wall of height `h` (in cell
///   widths) rising from its lowest point, `h <= 1/2`.
/// * `FlatBottom(h)`: two quarter circles of radius `(1-h)/2` joined by a flat
///   floor of length `h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellGeometry<T> {
    family: CellFamily,
    h: T,
}

impl<T: Real> CellGeometry<T> {
    pub fn semicircle() -> Self {
        CellGeometry { family: CellFamily::Semicircle, h: T::zero() }
    }

    pub fn flat_top(h: T) -> Result<Self> {
        Self::new(CellFamily::FlatTop, h)
    }

    pub fn middle_wall(h: T) -> Result<Self> {
        Self::new(CellFamily::MiddleWall, h)
    }

    pub fn flat_bottom(h: T) -> Result<Self> {
        Self::new(CellFamily::FlatBottom, h)
    }

    pub fn new(family: CellFamily, h: T) -> Result<Self> {
        let ok = match family {
            CellFamily::Semicircle => true,
            CellFamily::FlatTop | CellFamily::FlatBottom => h >= T::zero() && h < T::one(),
            CellFamily::MiddleWall => h >= T::zero() && h <= T::lit(0.5),
        };
        if !ok || !h.is_finite() {
            return Err(Error::Domain(format!("parameter h={h} outside the range of {}", family.name())));
        }
        let h = if family == CellFamily::Semicircle { T::zero() } else { h };
        Ok(CellGeometry { family, h })
    }

    pub fn family(&self) -> CellFamily {
        self.family
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn label(&self) -> String {
        match self.family {
            CellFamily::Semicircle => "semicircle".into(),
            f => format!("{}(h={})", f.name(), self.h),
        }
    }

    /// Exit record by the cheapest exact method for the family.
    pub fn exit(&self, entry: EntryState<T>) -> Result<ExitRecord<T>> {
        match self.family {
            CellFamily::Semicircle => semicircle_exit(entry.phi, entry.r),
            CellFamily::FlatTop => flat_top_exit(self.h, entry),
            CellFamily::MiddleWall => middle_wall_exit(self, entry),
            CellFamily::FlatBottom => {
                if self.h == T::zero() {
                    semicircle_exit(entry.phi, entry.r)
                } else {
                    CellTracer::new(self).trace(entry, DEFAULT_MAX_BOUNCES, false)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryState<T> {
    /// Entry position along the opening, in `[0, 1]`.
    pub r: T,
    /// Entry angle from the wall line, in `(0, pi)`.
    pub phi: T,
}

impl<T: Real> EntryState<T> {
    pub fn new(phi: T, r: T) -> Self {
        EntryState { r, phi }
    }

    fn check(&self) -> Result<()> {
        let pi = T::PI();
        let eps = T::lit(MIN_ENTRY_ANGLE);
        if !(self.r >= T::zero() && self.r <= T::one()) {
            return Err(Error::Domain(format!("entry position {} outside [0,1]", self.r)));
        }
        if !(self.phi >= eps && self.phi <= pi - eps) {
            return Err(Error::Domain(format!("entry angle {} outside ({eps}, pi-{eps})", self.phi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExitRecord<T> {
    pub psi: T,
    /// Number of collisions with the cell boundary before exiting.
    pub bounces: usize,
    /// Reflection points, when requested from the tracer.
    pub trace: Option<Vec<[T; 2]>>,
}

impl<T> ExitRecord<T> {
    fn new(psi: T, bounces: usize) -> Self {
        ExitRecord { psi, bounces, trace: None }
    }
}

/// `(phi, r) -> (pi - phi, 1 - r)`: the reflection of the cell about its axis.
pub fn cell_symmetry_conjugate<T: Real>(phi: T, r: T) -> (T, T) {
    (T::PI() - phi, T::one() - r)
}

fn r0<T: Real>(phi: T, n: usize) -> T {
    let nf = T::lit(n as f64);
    let half = T::lit(0.5);
    half - ((nf * T::PI() - phi) / (T::lit(2.0) * nf + T::one())).sin() / (T::lit(2.0) * phi.sin())
}

fn r1<T: Real>(phi: T, n: usize) -> T {
    let nf = T::lit(n as f64);
    let half = T::lit(0.5);
    half + (((nf - T::one()) * T::PI() + phi) / (T::lit(2.0) * nf + T::one())).sin() / (T::lit(2.0) * phi.sin())
}

/// Discontinuities of the semicircle exit map in `(0, 1)` for `phi` in `(0, pi/2]`,
/// sorted increasingly. At most `cap` points from each side of the centre.
pub fn semicircle_discontinuities<T: Real>(phi: T, cap: usize) -> Result<Vec<T>> {
    let pi = T::PI();
    if !(phi > T::zero() && phi <= pi / T::lit(2.0)) {
        return Err(Error::Domain(format!("angle {phi} outside (0, pi/2]")));
    }
    let mut out = Vec::new();
    if phi < pi / T::lit(4.0) {
        // single split point between one and two bounces
        out.push(r1(phi, 1));
        return Ok(out);
    }
    for n in 1..=cap {
        let x = r0(phi, n);
        if x <= T::zero() {
            break;
        }
        out.push(x);
    }
    for n in 1..=cap {
        let x = r1(phi, n);
        if x >= T::one() {
            break;
        }
        out.push(x);
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(out)
}

fn near<T: Real>(r: T, at: T) -> Result<()> {
    if (r - at).abs() < T::lit(DISCONTINUITY_TOL) {
        Err(Error::OnDiscontinuity { r: r.f64(), at: at.f64(), tol: DISCONTINUITY_TOL })
    } else {
        Ok(())
    }
}

/// Closed-form exit angle of the semicircle for `phi` in `(0, pi/2]`.
///
/// The bounce count is read off the discontinuity partition: on the left half
/// `r0(n) < r < r0(n-1)` is equivalent to `n-1 <= (alpha+phi)/(pi-2 alpha) < n`
/// with `alpha = asin((1-2r) sin phi)`, and symmetrically on the right half.
/// `n_hint` overrides the count.
pub fn semicircle_exit_closed_form<T: Real>(phi: T, r: T, n_hint: Option<usize>) -> Result<ExitRecord<T>> {
    let pi = T::PI();
    let two = T::lit(2.0);
    let half = T::lit(0.5);
    if !(phi > T::zero() && phi <= pi / two) {
        return Err(Error::Domain(format!("angle {phi} outside (0, pi/2]")));
    }
    if !(r >= T::zero() && r <= T::one()) {
        return Err(Error::Domain(format!("entry position {r} outside [0,1]")));
    }
    let s = phi.sin();
    let (psi, n) = if r <= half {
        let alpha = ((T::one() - two * r) * s).asin();
        let n = match n_hint {
            Some(n) => n.max(1),
            None => {
                let n = ((alpha + phi) / (pi - two * alpha)).floor().to_usize().unwrap_or(usize::MAX - 1) + 1;
                near(r, r0(phi, n))?;
                if n >= 2 {
                    near(r, r0(phi, n - 1))?;
                }
                n
            }
        };
        (T::lit(n as f64) * (pi - two * alpha) - phi, n)
    } else {
        let alpha = ((two * r - T::one()) * s).asin();
        let n = match n_hint {
            Some(n) => n.max(1),
            None => {
                let n = ((pi - phi + alpha) / (pi - two * alpha)).floor().to_usize().unwrap_or(usize::MAX - 1) + 1;
                near(r, r1(phi, n))?;
                if n >= 2 {
                    near(r, r1(phi, n - 1))?;
                }
                n
            }
        };
        let nf = T::lit(n as f64);
        (two * nf * alpha - (nf - two) * pi - phi, n)
    };
    let tau = two * pi;
    let psi = psi - (psi / tau).floor() * tau;
    Ok(ExitRecord::new(psi, n))
}

/// Semicircle exit for any `phi` in `(0, pi)`, using the conjugation
/// `Psi_phi(r) = pi - Psi_{pi-phi}(1-r)` above `pi/2`.
pub fn semicircle_exit<T: Real>(phi: T, r: T) -> Result<ExitRecord<T>> {
    EntryState::new(phi, r).check()?;
    if phi <= T::FRAC_PI_2() {
        semicircle_exit_closed_form(phi, r, None)
    } else {
        let (p, q) = cell_symmetry_conjugate(phi, r);
        let e = semicircle_exit_closed_form(p, q, None)?;
        Ok(ExitRecord::new(T::PI() - e.psi, e.bounces))
    }
}

fn flat_top_exit<T: Real>(h: T, entry: EntryState<T>) -> Result<ExitRecord<T>> {
    entry.check()?;
    let half_h = h / T::lit(2.0);
    if entry.r < half_h || entry.r > T::one() - half_h {
        return Ok(ExitRecord::new(entry.phi, 1));
    }
    let rr = ((entry.r - half_h) / (T::one() - h)).min(T::one()).max(T::zero());
    semicircle_exit(entry.phi, rr)
}

/// Exit of the middle-wall cell from the semicircle map by unfolding.
///
/// Reflecting in the wall is the same as reflecting the cell about its axis, so
/// the unfolded path is a plain semicircle path. Each crossing of the axis
/// below the wall top is a wall hit; an odd number of them conjugates the exit.
pub fn middle_wall_exit<T: Real>(cell: &CellGeometry<T>, entry: EntryState<T>) -> Result<ExitRecord<T>> {
    if cell.family != CellFamily::MiddleWall {
        return Err(Error::Domain("middle_wall_exit needs a middle-wall cell".into()));
    }
    let base = semicircle_exit(entry.phi, entry.r)?;
    let h = cell.h;
    if h == T::zero() {
        return Ok(base);
    }
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let pi = T::PI();
    let (phi, r) = (entry.phi, entry.r);
    let (dx, dy) = (phi.cos(), -phi.sin());
    let ox = r - half;
    let b = dx * ox;
    let cc = ox * ox - half * half;
    let t1 = -b + (b * b - cc).max(T::zero()).sqrt();
    let (p1x, p1y) = (r + t1 * dx, t1 * dy);
    let beta1 = p1y.atan2(p1x - half);
    let lmom = -ox * phi.sin();
    let sin_a = (two * lmom.abs()).min(T::one());
    let step = pi - two * sin_a.asin();
    let sgn = if lmom >= T::zero() { T::one() } else { -T::one() };

    let y_top = h - half;
    let tol = T::lit(GRAZING_TOL);
    let mut crossings = 0usize;
    let mut cross = |ax: T, ay: T, bx: T, by: T| -> Result<()> {
        let (ua, ub) = (ax - half, bx - half);
        if ua * ub < T::zero() {
            let y = ay + (half - ax) * (by - ay) / (bx - ax);
            if (y - y_top).abs() < tol {
                return Err(Error::Grazing);
            }
            if y < y_top {
                crossings += 1;
            }
        }
        Ok(())
    };
    cross(r, T::zero(), p1x, p1y)?;
    let (mut px, mut py) = (p1x, p1y);
    for k in 1..base.bounces {
        let beta = beta1 + sgn * step * T::lit(k as f64);
        let (qx, qy) = (half + half * beta.cos(), half * beta.sin());
        cross(px, py, qx, qy)?;
        px = qx;
        py = qy;
    }
    // last leg: from the final hit to the opening along the (unfolded) exit direction
    let (ex, ey) = (base.psi.cos(), base.psi.sin());
    let t = if ey > T::zero() { -py / ey } else { T::zero() };
    cross(px, py, px + t * ex, T::zero())?;

    let psi = if crossings % 2 == 1 { pi - base.psi } else { base.psi };
    Ok(ExitRecord::new(psi, base.bounces + crossings))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Wall<T> {
    /// Lower arc of the circle `(cx, 0)` radius `rad`, restricted to `x` in `[xlo, xhi]`.
    Arc { cx: T, rad: T, xlo: T, xhi: T },
    /// Segment from `p` to `q`; `tip` marks a free end (grazing check).
    Segment { p: [T; 2], q: [T; 2], free_end_q: bool },
}

/// Ray tracer for any of the four cell families (flat tops are handled
/// compositionally: the flat pieces reflect on the opening line).
#[derive(Debug, Clone)]
pub struct CellTracer<T> {
    cell: CellGeometry<T>,
    walls: Vec<Wall<T>>,
}

impl<T: Real> CellTracer<T> {
    pub fn new(cell: &CellGeometry<T>) -> Self {
        let half = T::lit(0.5);
        let semi = Wall::Arc { cx: half, rad: half, xlo: T::zero(), xhi: T::one() };
        let walls = match cell.family {
            CellFamily::Semicircle | CellFamily::FlatTop => vec![semi],
            CellFamily::MiddleWall => vec![
                semi,
                Wall::Segment { p: [half, -half], q: [half, cell.h - half], free_end_q: true },
            ],
            CellFamily::FlatBottom => {
                let b = (T::one() - cell.h) / T::lit(2.0);
                let a = (T::one() + cell.h) / T::lit(2.0);
                vec![
                    Wall::Arc { cx: b, rad: b, xlo: T::zero(), xhi: b },
                    Wall::Segment { p: [b, -b], q: [a, -b], free_end_q: false },
                    Wall::Arc { cx: a, rad: b, xlo: a, xhi: T::one() },
                ]
            }
        };
        CellTracer { cell: *cell, walls }
    }

    pub fn cell(&self) -> &CellGeometry<T> {
        &self.cell
    }

    /// Traces the billiard path until it leaves through the opening.
    pub fn trace(&self, entry: EntryState<T>, max_bounces: usize, record: bool) -> Result<ExitRecord<T>> {
        entry.check()?;
        if max_bounces == 0 {
            return Err(Error::Domain("max_bounces must be at least 1".into()));
        }
        if self.cell.family == CellFamily::FlatTop {
            let h = self.cell.h;
            let half_h = h / T::lit(2.0);
            if entry.r < half_h || entry.r > T::one() - half_h {
                let mut e = ExitRecord::new(entry.phi, 1);
                if record {
                    e.trace = Some(vec![[entry.r, T::zero()]]);
                }
                return Ok(e);
            }
            let rr = ((entry.r - half_h) / (T::one() - h)).min(T::one()).max(T::zero());
            let mut e = CellTracer::new(&CellGeometry::semicircle()).trace(EntryState::new(entry.phi, rr), max_bounces, record)?;
            if let Some(tr) = e.trace.as_mut() {
                for p in tr.iter_mut() {
                    p[0] = half_h + p[0] * (T::one() - h);
                    p[1] = p[1] * (T::one() - h);
                }
            }
            return Ok(e);
        }
        let eps = T::lit(1e-13);
        let mut pos = [entry.r, T::zero()];
        let mut dir = [entry.phi.cos(), -entry.phi.sin()];
        let mut last: Option<usize> = None;
        let mut bounces = 0usize;
        let mut points = if record { Some(Vec::new()) } else { None };
        loop {
            let mut best = T::infinity();
            let mut which = None;
            for (i, w) in self.walls.iter().enumerate() {
                if let Some(t) = hit(w, pos, dir, last == Some(i), eps)? {
                    if t < best {
                        best = t;
                        which = Some(i);
                    }
                }
            }
            let t_exit = if dir[1] > T::zero() { -pos[1] / dir[1] } else { T::infinity() };
            match which {
                Some(i) if best < t_exit => {
                    pos = [pos[0] + best * dir[0], pos[1] + best * dir[1]];
                    dir = reflect(&self.walls[i], pos, dir);
                    bounces += 1;
                    last = Some(i);
                    if let Some(p) = points.as_mut() {
                        p.push(pos);
                    }
                    if bounces > max_bounces {
                        return Err(Error::Trapped(max_bounces));
                    }
                }
                _ => {
                    if !t_exit.is_finite() {
                        return Err(Error::Numeric("ray left the cell without crossing the opening".into()));
                    }
                    let psi = dir[1].atan2(dir[0]);
                    return Ok(ExitRecord { psi, bounces, trace: points });
                }
            }
        }
    }
}

/// Convenience wrapper: trace one entry in a fresh tracer.
pub fn trace_cell<T: Real>(cell: &CellGeometry<T>, entry: EntryState<T>, max_bounces: usize) -> Result<ExitRecord<T>> {
    CellTracer::new(cell).trace(entry, max_bounces, false)
}

fn hit<T: Real>(w: &Wall<T>, pos: [T; 2], d: [T; 2], on_it: bool, eps: T) -> Result<Option<T>> {
    match *w {
        Wall::Arc { cx, rad, xlo, xhi } => {
            let ox = [pos[0] - cx, pos[1]];
            let b = d[0] * ox[0] + d[1] * ox[1];
            let cc = ox[0] * ox[0] + ox[1] * ox[1] - rad * rad;
            let disc = b * b - cc;
            let r2 = rad * rad;
            let in_range = |t: T| {
                let x = pos[0] + t * d[0];
                let y = pos[1] + t * d[1];
                let slack = T::lit(1e-12);
                y <= slack && x >= xlo - slack && x <= xhi + slack
            };
            if disc / r2 < -T::lit(GRAZING_TOL) {
                return Ok(None);
            }
            if (disc / r2).abs() <= T::lit(GRAZING_TOL) {
                let t = -b;
                if t > eps && in_range(t) {
                    return Err(Error::Grazing);
                }
                return Ok(None);
            }
            let sq = disc.sqrt();
            // stable pair of roots
            let q = if b > T::zero() { -(b + sq) } else { -b + sq };
            let (ta, tb) = if q == T::zero() { (T::zero(), T::zero()) } else { (q, cc / q) };
            let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
            if !on_it && lo > eps && in_range(lo) {
                return Ok(Some(lo));
            }
            if hi > eps && in_range(hi) {
                return Ok(Some(hi));
            }
            Ok(None)
        }
        Wall::Segment { p, q, free_end_q } => {
            if on_it {
                return Ok(None);
            }
            let e = [q[0] - p[0], q[1] - p[1]];
            let denom = d[0] * e[1] - d[1] * e[0];
            if denom.abs() < T::lit(1e-300).max(T::min_positive_value()) {
                return Ok(None);
            }
            let ap = [p[0] - pos[0], p[1] - pos[1]];
            let t = (ap[0] * e[1] - ap[1] * e[0]) / denom;
            let u = (ap[0] * d[1] - ap[1] * d[0]) / denom;
            if t <= eps || u < T::zero() || u > T::one() {
                return Ok(None);
            }
            if free_end_q && (T::one() - u) < T::lit(DISCONTINUITY_TOL) {
                return Err(Error::Grazing);
            }
            Ok(Some(t))
        }
    }
}

fn reflect<T: Real>(w: &Wall<T>, at: [T; 2], d: [T; 2]) -> [T; 2] {
    let n = match *w {
        Wall::Arc { cx, rad, .. } => [(at[0] - cx) / rad, at[1] / rad],
        Wall::Segment { p, q, .. } => {
            let e = [q[0] - p[0], q[1] - p[1]];
            let l = (e[0] * e[0] + e[1] * e[1]).sqrt();
            [-e[1] / l, e[0] / l]
        }
    };
    let dn = d[0] * n[0] + d[1] * n[1];
    let v = [d[0] - T::lit(2.0) * dn * n[0], d[1] - T::lit(2.0) * dn * n[1]];
    let l = (v[0] * v[0] + v[1] * v[1]).sqrt();
    [v[0] / l, v[1] / l]
}

/// Largest entry angle (or distance of `pi - phi` from `pi`) for which the
/// shallow-angle density of the cell is used.
pub fn shallow_threshold<T: Real>(cell: &CellGeometry<T>) -> Result<T> {
    match cell.family {
        CellFamily::Semicircle => Ok(T::lit(SHALLOW_THRESHOLD)),
        CellFamily::FlatBottom => {
            let c = (T::lit(3.0) + cell.h) / (T::one() - cell.h);
            Ok(T::lit(SHALLOW_THRESHOLD) * T::lit(3.0) / c)
        }
        f => Err(Error::Unsupported(format!("no shallow-angle density for {}", f.name()))),
    }
}

/// Density in `psi` of the exit angle for a shallow entry angle and a uniform
/// entry position. Two support arcs: one bounce near `pi - phi`, two bounces
/// near `phi`. Angles near `pi` are handled by the cell symmetry.
pub fn shallow_kernel_density<T: Real>(cell: &CellGeometry<T>, phi: T, psi: T) -> Result<T> {
    let pi = T::PI();
    let threshold = shallow_threshold(cell)?;
    if phi > pi / T::lit(2.0) {
        return shallow_kernel_density(cell, pi - phi, pi - psi);
    }
    if !(phi > T::zero() && phi < threshold) {
        return Err(Error::NotShallow { phi: phi.f64(), threshold: threshold.f64() });
    }
    let h = cell.h;
    let c = (T::lit(3.0) + h) / (T::one() - h);
    let sin = phi.sin();
    if psi > pi - c * phi && psi < pi - phi / c {
        Ok((T::one() - h) * ((psi + phi - pi) / T::lit(2.0)).cos() / (T::lit(4.0) * sin))
    } else if psi > phi / c && psi < c * phi {
        let f = (T::one() - h) * (T::one() - h) / (T::one() + h);
        Ok(f * ((psi + phi) / T::lit(4.0)).cos() / (T::lit(8.0) * sin))
    } else {
        Ok(T::zero())
    }
}

/// Mass of `[lo, hi]` under the shallow density (exact antiderivative).
pub fn shallow_kernel_mass<T: Real>(cell: &CellGeometry<T>, phi: T, lo: T, hi: T) -> Result<T> {
    let pi = T::PI();
    if phi > pi / T::lit(2.0) {
        return shallow_kernel_mass(cell, pi - phi, pi - hi, pi - lo);
    }
    let [(a1, b1), (a2, b2)] = shallow_support(cell, phi)?;
    let h = cell.h;
    let sin = phi.sin();
    let two = T::lit(2.0);
    let mut m = T::zero();
    let (l, u) = (lo.max(a1), hi.min(b1));
    if u > l {
        // written in the distance to pi so that mirrored edges telescope
        let g = |psi: T| ((phi - (pi - psi)) / two).sin();
        m = m + (T::one() - h) * two * (g(u) - g(l)) / (T::lit(4.0) * sin);
    }
    let (l, u) = (lo.max(a2), hi.min(b2));
    if u > l {
        let f = (T::one() - h) * (T::one() - h) / (T::one() + h);
        let g = |psi: T| ((psi + phi) / T::lit(4.0)).sin();
        m = m + f * T::lit(4.0) * (g(u) - g(l)) / (T::lit(8.0) * sin);
    }
    Ok(m)
}

/// Support arcs `[(lo, hi); 2]` of the shallow density (one-bounce arc first).
pub fn shallow_support<T: Real>(cell: &CellGeometry<T>, phi: T) -> Result<[(T, T); 2]> {
    let pi = T::PI();
    let threshold = shallow_threshold(cell)?;
    if !(phi > T::zero() && phi < threshold) {
        return Err(Error::NotShallow { phi: phi.f64(), threshold: threshold.f64() });
    }
    let c = (T::lit(3.0) + cell.h) / (T::one() - cell.h);
    Ok([(pi - c * phi, pi - phi / c), (phi / c, c * phi)])
}
