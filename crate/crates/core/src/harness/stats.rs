//! Power-law fits, two-sample Kolmogorov–Smirnov distances and binomial
//! confidence intervals.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::ensembles::Estimate;
use crate::{Error, Result};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959964;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerFit {
    pub exponent: f64,
    pub std_error: f64,
    /// 95% interval for the exponent.
    pub ci: (f64, f64),
    pub prefactor: f64,
    pub points: usize,
}

/// Weighted least squares of `log y` on `log x`.
///
/// Each point is `(x, y, se_y)`; the weight is `(y/se_y)²`, the inverse
/// delta-method variance of `log y`. If any standard error is zero the fit is
/// unweighted. The interval uses the residual-scaled covariance and Student's
/// `t` with `n − 2` degrees of freedom.
pub fn fit_power_law(points: &[(f64, f64, f64)]) -> Result<PowerFit> {
    if points.len() < 3 {
        return Err(Error::InvalidParameter(format!("need at least 3 scales, got {}", points.len())));
    }
    for &(x, y, _) in points {
        if !(x > 0.0) {
            return Err(Error::NonPositive(x));
        }
        if !(y > 0.0) {
            return Err(Error::NonPositive(y));
        }
    }
    let weighted = points.iter().all(|p| p.2 > 0.0 && p.2.is_finite());
    let w: Vec<f64> = points.iter().map(|&(_, y, se)| if weighted { (y / se).powi(2) } else { 1.0 }).collect();
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&lx).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(&ly).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&lx).map(|(w, x)| w * (x - mx).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidParameter("scales must not all coincide".into()));
    }
    let sxy: f64 = w.iter().zip(lx.iter().zip(&ly)).map(|(w, (x, y))| w * (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let dof = (points.len() - 2) as f64;
    let rss: f64 = w.iter().zip(lx.iter().zip(&ly)).map(|(w, (x, y))| w * (y - intercept - slope * x).powi(2)).sum();
    let se = (rss / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof).expect("positive dof").inverse_cdf(0.975);
    Ok(PowerFit {
        exponent: slope,
        std_error: se,
        ci: (slope - t * se, slope + t * se),
        prefactor: intercept.exp(),
        points: points.len(),
    })
}

/// Two-sample Kolmogorov–Smirnov distance `sup |F_a − F_b|`.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson(k: usize, n: usize, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let centre = (p + z2 / (2.0 * nf)) / (1.0 + z2 / nf);
    let half = z / (1.0 + z2 / nf) * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

/// Sample mean with its standard error.
pub fn mean_se(xs: &[f64]) -> Estimate {
    Estimate::from_samples(xs)
}

/// Unbiased sample variance with the normal-theory standard error
/// `s²·√(2/(n−1))`.
pub fn variance_se(xs: &[f64]) -> Estimate {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    Estimate { value: v, std_error: v * (2.0 / (n - 1.0)).sqrt() }
}
