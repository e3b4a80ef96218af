//! Small statistical toolbox: summaries, Kolmogorov-Smirnov tests, least
//! squares fits and Gauss-Legendre rules. Reporting quantities are `f64`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Unbiased sample variance.
    pub var: f64,
    /// Standard error of the mean.
    pub se: f64,
}

pub fn summary(xs: &[f64]) -> Summary {
    let n = xs.len();
    if n == 0 {
        return Summary { n, mean: f64::NAN, var: f64::NAN, se: f64::NAN };
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Summary { n, mean, var, se: (var / n as f64).sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

fn ks_p(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

/// One-sample test of `data` against a continuous CDF. Sorts `data` in place.
pub fn ks_one_sample(data: &mut [f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    data.sort_by(|a, b| a.total_cmp(b));
    let n = data.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in data.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    KsResult { statistic: d, p_value: ks_p(d, n) }
}

/// Two-sample test. Sorts both inputs in place.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> KsResult {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = a[i].min(b[j]);
        while i < na && a[i] <= x {
            i += 1;
        }
        while j < nb && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na as f64 - j as f64 / nb as f64).abs());
    }
    let n_eff = (na * nb) as f64 / (na + nb) as f64;
    KsResult { statistic: d, p_value: ks_p(d, n_eff) }
}

pub fn normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Pearson correlation with its large-sample standard error `1/sqrt(n)`.
pub fn correlation(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len().min(y.len());
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for k in 0..n {
        let (dx, dy) = (x[k] - mx, y[k] - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    (sxy / (sxx * syy).sqrt(), 1.0 / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LeastSquares {
    pub coef: Vec<f64>,
    /// Standard errors of the coefficients (residual-based; zero for exact fits).
    pub se: Vec<f64>,
    /// Root mean square residual.
    pub rms: f64,
}

/// Weighted least squares on a design matrix given by rows.
pub fn least_squares(rows: &[Vec<f64>], y: &[f64], weights: Option<&[f64]>) -> Option<LeastSquares> {
    let n = rows.len();
    let p = rows.first()?.len();
    if n < p || y.len() != n {
        return None;
    }
    let w = |i: usize| weights.map_or(1.0, |w| w[i]).sqrt();
    let x = DMatrix::from_fn(n, p, |i, j| rows[i][j] * w(i));
    let yv = DVector::from_fn(n, |i, _| y[i] * w(i));
    let svd = x.clone().svd(true, true);
    let beta = svd.solve(&yv, 1e-14).ok()?;
    let resid = &yv - &x * &beta;
    let rss = resid.norm_squared();
    let dof = (n - p).max(1) as f64;
    let s2 = rss / dof;
    let xtx_inv = (x.transpose() * &x).try_inverse()?;
    let se = (0..p).map(|j| (s2 * xtx_inv[(j, j)]).max(0.0).sqrt()).collect();
    Some(LeastSquares { coef: beta.iter().copied().collect(), se, rms: (rss / n as f64).sqrt() })
}

/// Straight-line fit `y = c0 + c1 x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Option<LeastSquares> {
    let rows: Vec<Vec<f64>> = x.iter().map(|&xi| vec![1.0, xi]).collect();
    least_squares(&rows, y, None)
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut xs = vec![0.0; n];
    let mut ws = vec![0.0; n];
    let nf = n as f64;
    for i in 0..(n + 1) / 2 {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { x } else { p1 };
            let pm = if n == 1 { 1.0 } else { p0 };
            dp = nf * (x * pn - pm) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        xs[i] = -x;
        xs[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        ws[i] = w;
        ws[n - 1 - i] = w;
    }
    (xs, ws)
}

/// Gauss-Legendre rule mapped onto `[lo, hi]`.
pub fn gauss_legendre_on(n: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let (xs, ws) = gauss_legendre(n);
    let (c, h) = (0.5 * (lo + hi), 0.5 * (hi - lo));
    xs.iter().zip(&ws).map(|(x, w)| (c + h * x, h * w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        for n in [1, 2, 5, 8, 16] {
            let (x, w) = gauss_legendre(n);
            assert!((w.iter().sum::<f64>() - 2.0).abs() < 1e-13);
            let deg = 2 * n - 1;
            let q: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32 - 1)).sum();
            let exact = if (deg - 1) % 2 == 0 { 2.0 / deg as f64 } else { 0.0 };
            assert!((q - exact).abs() < 1e-12, "n={n}");
        }
        let q: f64 = gauss_legendre_on(12, 0.0, 1.0).iter().map(|(x, w)| w * x.exp()).sum();
        assert!((q - (1f64.exp() - 1.0)).abs() < 1e-14);
    }

    #[test]
    fn kolmogorov_tail_values() {
        // reference values of the limiting distribution
        assert!((kolmogorov_sf(1.36) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_sf(1.63) - 0.0098).abs() < 1e-3);
    }

    #[test]
    fn ks_detects_shift_and_accepts_truth() {
        let mut xs: Vec<f64> = (0..2000).map(|i| (i as f64 + 0.5) / 2000.0).collect();
        assert!(ks_one_sample(&mut xs, |x| x).p_value > 0.99);
        let mut ys: Vec<f64> = xs.iter().map(|x| x * 0.9).collect();
        assert!(ks_one_sample(&mut ys, |x| x.clamp(0.0, 1.0)).p_value < 1e-6);
        let mut a = xs.clone();
        let mut b: Vec<f64> = xs.iter().map(|x| x + 0.2).collect();
        assert!(ks_two_sample(&mut a, &mut b).p_value < 1e-6);
    }

    #[test]
    fn line_fit_recovers_coefficients() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|x| 3.0 - 0.5 * x).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.coef[0] - 3.0).abs() < 1e-12 && (f.coef[1] + 0.5).abs() < 1e-12);
        assert!(f.rms < 1e-12);
    }
}
