//! Closed-form diffusivity references for the shipped wall families, the
//! middle-wall discontinuity check, predicted exit times and the tables
//! emitted by the `tables` command.
//!
//! All values are `f64`; the formulas involve only logarithms and ratios of
//! moderate numbers, so double precision leaves errors near `1e-15`.

use crate::kernels::{KernelKind, KernelSpec};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shallow-angle ratio of the semicircle cell, `-ln(3)/4`.
pub fn semicircle_zeta() -> f64 {
    -0.25 * 3f64.ln()
}

/// `(1 + z) / (1 - z)`.
pub fn eta_from_zeta(z: f64) -> f64 {
    (1.0 + z) / (1.0 - z)
}

/// Shallow ratio of the flat-bottom cell with relative height `h`:
/// `-(1+3h)/4 (1-h)/(1+h) ln((3+h)/(1-h))`, defined on `(-1, 1)`.
pub fn flat_bottom_zeta(h: f64) -> Result<f64> {
    if !(h > -1.0 && h < 1.0) {
        return Err(Error::Domain(format!("flat-bottom height {h} outside (-1,1)")));
    }
    Ok(-(1.0 + 3.0 * h) / 4.0 * (1.0 - h) / (1.0 + h) * ((3.0 + h) / (1.0 - h)).ln())
}

/// Relative height of a flat-bottom cell whose floor sits at offset `l`
/// (negative below the rim) in a cell of radius `r`: `l / (l + 2r)`.
pub fn flat_bottom_h_from_offset(l: f64, r: f64) -> Result<f64> {
    if !(r > 0.0 && l > -r) {
        return Err(Error::Domain(format!("offset {l} must exceed -r = {}", -r)));
    }
    Ok(l / (l + 2.0 * r))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Semicircle,
    FlatTop,
    MiddleWall,
    FlatBottom,
    Ms,
    Iid,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Semicircle => "semicircle",
            Family::FlatTop => "flat_top",
            Family::MiddleWall => "middle_wall",
            Family::FlatBottom => "flat_bottom",
            Family::Ms => "ms",
            Family::Iid => "iid",
        }
    }
}

/// Reference diffusivity of one family member.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClosedForm {
    pub family: Family,
    /// Height `h` or mixing weight `alpha`; zero for parameterless families.
    pub param: f64,
    /// `D / D0`.
    pub eta: f64,
    /// Shallow-angle ratio with `eta = (1+zeta)/(1-zeta)`.
    pub zeta: Option<f64>,
    pub d_over_d0: f64,
}

impl ClosedForm {
    fn from_zeta(family: Family, param: f64, zeta: f64) -> Self {
        let eta = eta_from_zeta(zeta);
        ClosedForm { family, param, eta, zeta: Some(zeta), d_over_d0: eta }
    }
}

/// Evaluates the closed form of `family` at `param`.
pub fn closed_form_eta(family: Family, param: f64) -> Result<ClosedForm> {
    let z0 = semicircle_zeta();
    match family {
        Family::Semicircle => Ok(ClosedForm::from_zeta(family, 0.0, z0)),
        Family::Iid => Ok(ClosedForm::from_zeta(family, 0.0, 0.0)),
        Family::FlatTop => {
            if !(0.0..1.0).contains(&param) {
                return Err(Error::Domain(format!("flat-top height {param} outside [0,1)")));
            }
            // a flat top keeps the angle with probability h, so the shallow
            // ratio mixes 1 and the semicircle ratio
            Ok(ClosedForm::from_zeta(family, param, param + (1.0 - param) * z0))
        }
        Family::MiddleWall => {
            if !(0.0..=0.5).contains(&param) {
                return Err(Error::Domain(format!("middle-wall height {param}: only h < 1/2 and h = 1/2 have a closed form")));
            }
            let z = if param < 0.5 { z0 } else { -z0 };
            Ok(ClosedForm::from_zeta(family, param, z))
        }
        Family::FlatBottom => Ok(ClosedForm::from_zeta(family, param, flat_bottom_zeta(param)?)),
        Family::Ms => {
            if !(param > 0.0 && param <= 1.0) {
                return Err(Error::Domain(format!("mixing weight {param} outside (0,1]")));
            }
            Ok(ClosedForm::from_zeta(family, param, 1.0 - param))
        }
    }
}

/// Closed form matching a kernel specification, when one exists.
pub fn closed_form_for(spec: &KernelSpec) -> Option<ClosedForm> {
    let (family, param) = match spec.kind {
        KernelKind::Semicircle => (Family::Semicircle, 0.0),
        KernelKind::FlatTop => (Family::FlatTop, spec.h?),
        KernelKind::MiddleWall => (Family::MiddleWall, spec.h?),
        KernelKind::FlatBottom => (Family::FlatBottom, spec.h?),
        KernelKind::Ms => (Family::Ms, spec.alpha?),
        KernelKind::Mh => return None,
    };
    closed_form_eta(family, param).ok()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MiddleWallReport {
    pub h_below: f64,
    pub eta_below: f64,
    pub eta_semicircle: f64,
    pub eta_half: f64,
    pub jump_ratio: f64,
    pub predicted_jump: f64,
    pub below_matches_semicircle: bool,
    pub jump_matches: bool,
}

/// Below `h = 1/2` the middle wall leaves the diffusivity of the semicircle
/// unchanged; at `h = 1/2` it jumps by `((1 + ln3/4) / (1 - ln3/4))^2`.
pub fn middle_wall_discontinuity_check(h_below: f64, tol: f64) -> Result<MiddleWallReport> {
    if !(h_below > 0.0 && h_below < 0.5) {
        return Err(Error::Domain(format!("h_below {h_below} outside (0, 1/2)")));
    }
    let below = closed_form_eta(Family::MiddleWall, h_below)?.eta;
    let semi = closed_form_eta(Family::Semicircle, 0.0)?.eta;
    let half = closed_form_eta(Family::MiddleWall, 0.5)?.eta;
    let q = 0.25 * 3f64.ln();
    let predicted = ((1.0 + q) / (1.0 - q)).powi(2);
    let jump = half / below;
    Ok(MiddleWallReport {
        h_below,
        eta_below: below,
        eta_semicircle: semi,
        eta_half: half,
        jump_ratio: jump,
        predicted_jump: predicted,
        below_matches_semicircle: below == semi,
        jump_matches: (jump - predicted).abs() <= tol * predicted,
    })
}

/// Long-channel mean exit time: `L^2 / (D ln(L/r))` when the cross-section
/// has dimension one, `L^2 / D` otherwise.
pub fn predicted_tau(l: f64, r: f64, d: f64, codim: usize) -> Result<f64> {
    if !(r > 0.0 && l > r && d > 0.0) || codim == 0 {
        return Err(Error::Domain(format!("need L > r > 0, D > 0 and n-k >= 1 (L={l}, r={r}, D={d})")));
    }
    Ok(if codim == 1 { l * l / (d * (l / r).ln()) } else { l * l / d })
}

/// Weighted least-squares slope of `y` on `x` through the origin, with
/// weights `1/se^2`, and its standard error.
pub fn slope_through_origin(x: &[f64], y: &[f64], se: &[f64]) -> Result<(f64, f64)> {
    if x.is_empty() || x.len() != y.len() || x.len() != se.len() {
        return Err(Error::Domain("slope fit needs equally long, non-empty inputs".into()));
    }
    let w: Vec<f64> = se.iter().map(|s| if *s > 0.0 { 1.0 / (s * s) } else { 1.0 }).collect();
    let sxx: f64 = x.iter().zip(&w).map(|(x, w)| w * x * x).sum();
    let sxy: f64 = x.iter().zip(y).zip(&w).map(|((x, y), w)| w * x * y).sum();
    if !(sxx > 0.0) {
        return Err(Error::Numeric("degenerate slope fit".into()));
    }
    Ok((sxy / sxx, 1.0 / sxx.sqrt()))
}

/// One line of the reference table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TableRow {
    pub family: Family,
    pub h: f64,
    pub zeta_h: Option<f64>,
    pub eta: f64,
    pub d_over_d0: f64,
}

/// Parameter grids used when no explicit grid is given.
pub fn default_grid(family: Family) -> Vec<f64> {
    match family {
        Family::Semicircle | Family::Iid => vec![0.0],
        Family::FlatTop => vec![0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 0.95],
        Family::MiddleWall => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.45, 0.5],
        Family::FlatBottom => vec![-0.5, -0.25, 0.0, 0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 0.95, 0.99],
        Family::Ms => vec![0.1, 0.25, 0.5, 0.75, 1.0],
    }
}

pub fn table(families: &[(Family, Vec<f64>)]) -> Result<Vec<TableRow>> {
    let mut rows = Vec::new();
    for (family, grid) in families {
        for &h in grid {
            let c = closed_form_eta(*family, h)?;
            rows.push(TableRow { family: *family, h, zeta_h: c.zeta, eta: c.eta, d_over_d0: c.d_over_d0 });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn semicircle_values() {
        let c = closed_form_eta(Family::Semicircle, 0.0).unwrap();
        assert!((c.eta - 0.569054).abs() < 1e-6, "{}", c.eta);
        assert!((c.zeta.unwrap() + 0.274653).abs() < 1e-6);
    }

    #[test]
    fn flat_top_is_the_affine_law() {
        let eta0 = closed_form_eta(Family::Semicircle, 0.0).unwrap().eta;
        for h in [0.25, 0.5, 0.75] {
            let c = closed_form_eta(Family::FlatTop, h).unwrap();
            assert!((c.eta - (eta0 + h) / (1.0 - h)).abs() < 1e-14);
        }
        assert!((closed_form_eta(Family::FlatTop, 0.5).unwrap().eta - 2.138108).abs() < 1e-6);
    }

    #[test]
    fn middle_wall_values_and_domain() {
        let c = closed_form_eta(Family::MiddleWall, 0.5).unwrap();
        assert!((c.eta - 1.757301).abs() < 1e-6, "{}", c.eta);
        assert!(closed_form_eta(Family::MiddleWall, 0.6).is_err());
        let r = middle_wall_discontinuity_check(0.3, 1e-12).unwrap();
        assert!(r.below_matches_semicircle && r.jump_matches);
        assert!((r.jump_ratio - 3.0880).abs() < 1e-3, "{}", r.jump_ratio);
    }

    #[test]
    fn flat_bottom_limits() {
        assert!((flat_bottom_zeta(0.0).unwrap() - semicircle_zeta()).abs() < 1e-15);
        assert!(flat_bottom_zeta(1.0 - 1e-9).unwrap().abs() < 1e-7);
        assert!((closed_form_eta(Family::FlatBottom, 0.75).unwrap().eta - 0.52168).abs() < 1e-4);
        assert!((flat_bottom_h_from_offset(-0.5, 1.0).unwrap() + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ms_and_iid() {
        assert!((closed_form_eta(Family::Ms, 0.5).unwrap().eta - 3.0).abs() < 1e-15);
        assert_eq!(closed_form_eta(Family::Iid, 0.0).unwrap().eta, 1.0);
        assert!(closed_form_eta(Family::Ms, 0.0).is_err());
    }

    #[test]
    fn exit_time_prediction() {
        let t1 = predicted_tau(100.0, 1.0, 0.7, 1).unwrap();
        let t2 = predicted_tau(200.0, 1.0, 0.7, 1).unwrap();
        assert!((t2 / t1 - 4.0 * 100f64.ln() / 200f64.ln()).abs() < 1e-12);
        assert_eq!(predicted_tau(10.0, 1.0, 2.0, 2).unwrap(), 50.0);
        assert!(predicted_tau(0.5, 1.0, 2.0, 1).is_err());
    }

    #[test]
    fn slope_fit() {
        let (b, se) = slope_through_origin(&[1.0, 2.0, 4.0], &[2.0, 4.0, 8.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!((b - 2.0).abs() < 1e-15 && (se - 1.0 / 21f64.sqrt()).abs() < 1e-15);
        let (b, _) = slope_through_origin(&[1.0, 10.0], &[3.0, 20.0], &[1.0, 1e-6]).unwrap();
        assert!((b - 2.0).abs() < 1e-9);
        assert!(slope_through_origin(&[0.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn table_rows() {
        let rows = table(&[(Family::FlatBottom, default_grid(Family::FlatBottom))]).unwrap();
        assert_eq!(rows.len(), default_grid(Family::FlatBottom).len());
        assert!(rows.iter().all(|r| (r.eta - eta_from_zeta(r.zeta_h.unwrap())).abs() < 1e-15));
    }
}
