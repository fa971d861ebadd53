//! The semi-discrete heat kernel of `½Δ^{!!} + c∇^!_{−1}` on the torus and
//! the associated spatial and space-time heat operators.
//!
//! The operator is circulant, so the kernel is diagonal in Fourier space with
//! eigenvalues `λ_k = N²(cos(2πk/N) − 1) + cN(e^{−2πik/N} − 1)`. Everything is
//! evaluated spectrally: kernels by one inverse FFT, the space-time operator
//! by integrating each Fourier mode exactly over piecewise-constant inputs.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::lattice::SiteField;
use crate::{Error, Result};

/// Equality tolerance for kernel identities.
pub const KERNEL_TOL: f64 = 1e-10;
/// Allowed negative slack for kernel entries.
pub const POSITIVITY_SLACK: f64 = -1e-12;

#[derive(Clone)]
pub struct HeatKernel {
    n: usize,
    drift: f64,
    eigen: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for HeatKernel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HeatKernel").field("n", &self.n).field("drift", &self.drift).finish()
    }
}

/// Translation-invariant kernel `H_{x,y} = g(x − y)` at a fixed time lag.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    g: Vec<f64>,
    /// Largest imaginary residue of the inverse transform.
    pub imag_residue: f64,
}

impl KernelMatrix {
    pub fn n(&self) -> usize {
        self.g.len()
    }

    #[inline]
    pub fn entry(&self, x: usize, y: usize) -> f64 {
        let n = self.n();
        self.g[(x + n - y % n) % n]
    }

    /// `g(z) = H_{x+z, x}`.
    pub fn profile(&self) -> &[f64] {
        &self.g
    }

    pub fn row(&self, x: usize) -> Vec<f64> {
        (0..self.n()).map(|y| self.entry(x, y)).collect()
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        (0..self.n()).map(|x| self.row(x)).collect()
    }
}

impl HeatKernel {
    /// Kernel of `½Δ^{!!} + drift·∇^!_{−1}` on `n` sites.
    pub fn new(n: usize, drift: f64) -> Self {
        assert!(n >= 2, "torus size must be at least 2");
        let mut planner = FftPlanner::new();
        let nf = n as f64;
        let eigen = (0..n)
            .map(|k| {
                let theta = 2.0 * std::f64::consts::PI * k as f64 / nf;
                let shift = Complex64::from_polar(1.0, -theta);
                Complex64::new(nf * nf * (theta.cos() - 1.0), 0.0) + drift * nf * (shift - 1.0)
            })
            .collect();
        Self { n, drift, eigen, forward: planner.plan_fft_forward(n), inverse: planner.plan_fft_inverse(n) }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn drift(&self) -> f64 {
        self.drift
    }

    pub fn eigenvalues(&self) -> &[Complex64] {
        &self.eigen
    }

    fn fft(&self, v: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward.process(&mut buf);
        buf
    }

    /// Inverse transform including the `1/N` normalization; returns the real
    /// part and the largest imaginary residue.
    fn ifft(&self, mut buf: Vec<Complex64>) -> (Vec<f64>, f64) {
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n as f64;
        let imag = buf.iter().fold(0.0f64, |m, z| m.max((z.im * scale).abs()));
        (buf.into_iter().map(|z| z.re * scale).collect(), imag)
    }

    /// `H_{S,T}`; depends only on `T − S`.
    pub fn kernel(&self, s: f64, t: f64) -> Result<KernelMatrix> {
        if t < s {
            return Err(Error::TimeOrder { start: s, end: t });
        }
        let dt = t - s;
        let spec: Vec<Complex64> = self.eigen.iter().map(|&l| (l * dt).exp()).collect();
        let (g, imag_residue) = self.ifft(spec);
        Ok(KernelMatrix { g, imag_residue })
    }

    /// `ℒφ` evaluated directly in real space.
    pub fn generator(&self, phi: &SiteField) -> SiteField {
        let nf = self.n as f64;
        SiteField::from_fn(self.n, |x| {
            let x = x as i64;
            let (c, r, l) = (phi.get(x), phi.get(x + 1), phi.get(x - 1));
            0.5 * nf * nf * (r + l - 2.0 * c) + self.drift * nf * (l - c)
        })
    }

    /// `Σ_y H_{0,T,x,y} φ_y`.
    pub fn heat_op_space(&self, phi: &SiteField, t: f64) -> Result<SiteField> {
        if phi.n() != self.n {
            return Err(Error::SizeMismatch(format!("field of {} sites, kernel of {}", phi.n(), self.n)));
        }
        if t < 0.0 {
            return Err(Error::TimeOrder { start: 0.0, end: t });
        }
        let spec = self.fft(phi.values());
        let out = spec.into_iter().zip(&self.eigen).map(|(v, &l)| v * (l * t).exp()).collect();
        Ok(SiteField::new(self.ifft(out).0))
    }

    pub fn space_time(&self) -> SpaceTimeIntegrator {
        SpaceTimeIntegrator { kernel: self.clone(), state: vec![Complex64::new(0.0, 0.0); self.n], time: 0.0 }
    }

    /// `∫_0^T Σ_y H_{S,T,x,y} φ_{S,y} dS` for `φ` piecewise constant: `pieces`
    /// lists `(duration, field)` in time order and must cover exactly `[0, T]`.
    pub fn heat_op_spacetime(&self, pieces: &[(f64, SiteField)], t: f64) -> Result<SiteField> {
        let total: f64 = pieces.iter().map(|p| p.0).sum();
        if (total - t).abs() > 1e-9 * t.max(1.0) {
            return Err(Error::InvalidParameter(format!("pieces cover [0, {total}], expected [0, {t}]")));
        }
        let mut integ = self.space_time();
        for (dt, phi) in pieces {
            integ.step(phi.values(), *dt)?;
        }
        Ok(integ.value())
    }
}

/// Streaming evaluation of the space-time heat operator: after steps with
/// inputs `φ_j` held on intervals of lengths `Δ_j`, `value()` is the operator
/// at the accumulated time, exactly (mode-by-mode
/// `Û ← e^{Δλ}Û + φ̂(e^{Δλ} − 1)/λ`).
#[derive(Clone, Debug)]
pub struct SpaceTimeIntegrator {
    kernel: HeatKernel,
    state: Vec<Complex64>,
    time: f64,
}

impl SpaceTimeIntegrator {
    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn step(&mut self, phi: &[f64], dt: f64) -> Result<()> {
        if phi.len() != self.kernel.n {
            return Err(Error::SizeMismatch(format!("input of {} sites, kernel of {}", phi.len(), self.kernel.n)));
        }
        if dt < 0.0 {
            return Err(Error::TimeOrder { start: self.time, end: self.time + dt });
        }
        let spec = self.kernel.fft(phi);
        for ((u, f), &l) in self.state.iter_mut().zip(spec).zip(&self.kernel.eigen) {
            let e = (l * dt).exp();
            let weight = if (l * dt).norm() < 1e-8 { Complex64::new(dt, 0.0) * (1.0 + l * dt / 2.0) } else { (e - 1.0) / l };
            *u = e * *u + f * weight;
        }
        self.time += dt;
        Ok(())
    }

    /// Evolves without input (φ ≡ 0) for `dt`.
    pub fn idle(&mut self, dt: f64) {
        for (u, &l) in self.state.iter_mut().zip(&self.kernel.eigen) {
            *u *= (l * dt).exp();
        }
        self.time += dt;
    }

    pub fn value(&self) -> SiteField {
        SiteField::new(self.kernel.ifft(self.state.clone()).0)
    }
}

/// Measured value of one normalized kernel statistic.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct KernelStatistic {
    pub statistic: String,
    pub n: usize,
    pub value: f64,
    pub cap: f64,
    pub pass: bool,
}

/// Grid of lags and caps for [`kernel_property_suite`].
#[derive(Clone, Debug)]
pub struct SuiteRanges {
    /// Lags are `N^{−2}·4^j` up to `max_lag`.
    pub max_lag: f64,
    /// Time increments as fractions of the lag.
    pub time_fractions: Vec<f64>,
    pub cap: f64,
}

impl Default for SuiteRanges {
    fn default() -> Self {
        Self { max_lag: 1.0, time_fractions: vec![0.125, 0.25, 0.5, 1.0], cap: 4.0 }
    }
}

/// Measures the normalized kernel bounds (pointwise size, spatial gradients
/// and their sums, time gradients and their sums) as suprema over lags
/// `O ∈ [N^{−2}, max_lag]`, gradients `ℓ ≤ N O^{1/2}` and increments `t ≤ O`.
pub fn kernel_property_suite(kernel: &HeatKernel, ranges: &SuiteRanges) -> Vec<KernelStatistic> {
    let n = kernel.n();
    let nf = n as f64;
    let mut sup = [0.0f64; 7];
    let mut lag = 1.0 / (nf * nf);
    while lag <= ranges.max_lag * (1.0 + 1e-12) {
        let h = kernel.kernel(0.0, lag).expect("ordered times");
        let g = h.profile();
        let at = |z: i64| g[z.rem_euclid(n as i64) as usize];
        sup[0] = sup[0].max(nf * lag.sqrt() * g.iter().fold(0.0f64, |m, v| m.max(*v)));
        let max_l = ((nf * lag.sqrt()).floor() as i64).clamp(1, n as i64 / 2);
        let mut l = 1;
        while l <= max_l {
            let lf = l as f64;
            let (mut s1, mut sum1, mut s2, mut sum2) = (0.0f64, 0.0, 0.0f64, 0.0);
            for z in 0..n as i64 {
                // gradients in x of H_{x,y} = g(x − y)
                let d1 = (at(z + l) - at(z)).abs();
                let d2 = (at(z + 2 * l) - 2.0 * at(z + l) + at(z)).abs();
                s1 = s1.max(d1);
                sum1 += d1;
                s2 = s2.max(d2);
                sum2 += d2;
            }
            sup[1] = sup[1].max(nf * nf * lag / lf * s1);
            sup[2] = sup[2].max(nf.powi(3) * lag.powf(1.5) / (lf * lf) * s2);
            sup[3] = sup[3].max(nf * lag.sqrt() / lf * sum1);
            sup[4] = sup[4].max(nf * nf * lag / (lf * lf) * sum2);
            l *= 2;
        }
        for &frac in &ranges.time_fractions {
            let t = frac * lag;
            let later = kernel.kernel(0.0, lag + t).expect("ordered times");
            let (mut s, mut sum) = (0.0f64, 0.0);
            for (a, b) in later.profile().iter().zip(g) {
                s = s.max((a - b).abs());
                sum += (a - b).abs();
            }
            sup[5] = sup[5].max(nf * lag.powf(1.5) / t * s);
            sup[6] = sup[6].max(lag / t * sum);
        }
        lag *= 4.0;
    }
    const NAMES: [&str; 7] =
        ["pointwise", "grad_x", "grad_xx", "sum_grad_x", "sum_grad_xx", "grad_t", "sum_grad_t"];
    NAMES
        .iter()
        .zip(sup)
        .map(|(name, value)| KernelStatistic {
            statistic: name.to_string(),
            n,
            value,
            cap: ranges.cap,
            pass: value <= ranges.cap,
        })
        .collect()
}
