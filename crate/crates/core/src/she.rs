//! Continuum stochastic heat equation `∂_T Z = ½ΔZ − b∂_x Z + Zξ` on the unit
//! torus, stepped in mild form: exact spectral transport over `δt` followed by
//! the Itô increment `Z·ΔW` per cell, `ΔW ~ N(0, δt·M)`.
//!
//! The noise enters with `+` rather than `−`; the law is the same.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::dynamics::stream_rng;
use crate::{Error, Result};

/// Explicit-scheme stability constant: `δt ≤ STABILITY·M^{−2}`.
pub const STABILITY: f64 = 0.4;
pub const MAX_HALVINGS: u32 = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheGrid {
    pub m: usize,
    pub dt: f64,
    pub t_end: f64,
    /// Record the field every this many steps (time 0 is always recorded).
    pub record_every: usize,
    pub seed: u64,
}

impl SheGrid {
    /// Largest stable step for `m` cells, shrunk so it divides `t_end`.
    pub fn stable(m: usize, t_end: f64, seed: u64) -> Self {
        let steps = (t_end / (STABILITY / (m * m) as f64)).ceil().max(1.0) as usize;
        Self { m, dt: t_end / steps as f64, t_end, record_every: steps, seed }
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.dt - 1e-9).ceil().max(0.0) as usize
    }

    fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::InvalidParameter(format!("need at least two cells, got {}", self.m)));
        }
        let limit = STABILITY / (self.m * self.m) as f64;
        if !(self.dt > 0.0) || self.dt > limit * (1.0 + 1e-12) {
            return Err(Error::Unstable { dt: self.dt, limit });
        }
        if self.record_every == 0 {
            return Err(Error::InvalidParameter("record_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SheField {
    pub m: usize,
    pub times: Vec<f64>,
    pub z: Vec<Vec<f64>>,
    /// Number of step halvings forced by positivity.
    pub halvings: usize,
}

impl SheField {
    /// Linear interpolation of the last recorded row at `x ∈ T¹` (cell `k`
    /// sits at `k/M`).
    pub fn final_at(&self, x: f64) -> f64 {
        crate::observables::rescale_space(self.z.last().expect("nonempty field"), x)
    }

    /// CSV rows `(replica, t, x, Z)`.
    pub fn write_csv<W: Write>(&self, replica: usize, out: &mut csv::Writer<W>) -> Result<()> {
        for (t, row) in self.times.iter().zip(&self.z) {
            for (k, z) in row.iter().enumerate() {
                out.serialize((replica, t, k as f64 / self.m as f64, z))?;
            }
        }
        Ok(())
    }
}

/// Spectral semigroup of `½Δ − b∂_x` on `M` cells.
#[derive(Clone)]
pub struct Transport {
    m: usize,
    drift: f64,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Transport {
    pub fn new(m: usize, drift: f64) -> Self {
        let mut planner = FftPlanner::new();
        Self { m, drift, forward: planner.plan_fft_forward(m), inverse: planner.plan_fft_inverse(m) }
    }

    fn symbol(&self, k: usize) -> Complex64 {
        let m = self.m as i64;
        let mut freq = k as i64;
        if freq > m / 2 {
            freq -= m;
        }
        let w = 2.0 * PI * freq as f64;
        // the Nyquist mode has no well-defined derivative on a real grid
        let deriv = if 2 * freq.abs() == m { 0.0 } else { w };
        Complex64::new(-0.5 * w * w, -self.drift * deriv)
    }

    pub fn apply(&self, z: &[f64], dt: f64) -> Vec<f64> {
        let mut buf: Vec<Complex64> = z.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward.process(&mut buf);
        for (k, b) in buf.iter_mut().enumerate() {
            *b *= (self.symbol(k) * dt).exp();
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.m as f64;
        buf.iter().map(|c| c.re * scale).collect()
    }
}

/// One mild-form step with prescribed noise; on loss of positivity the step
/// is split in two by Brownian-bridge refinement of `dw`, recursively.
fn step<R: Rng>(
    tr: &Transport,
    z: &[f64],
    dt: f64,
    dw: &[f64],
    depth: u32,
    rng: &mut R,
    halvings: &mut usize,
    t: f64,
) -> Result<Vec<f64>> {
    let mut next = tr.apply(z, dt);
    for ((n, &zi), &w) in next.iter_mut().zip(z).zip(dw) {
        *n += zi * w;
    }
    if next.iter().all(|&v| v > 0.0) {
        return Ok(next);
    }
    if depth >= MAX_HALVINGS {
        return Err(Error::PositivityLost { halvings: depth, t });
    }
    *halvings += 1;
    let m = z.len() as f64;
    let sd = (dt / 4.0 * m).sqrt();
    let first: Vec<f64> = dw.iter().map(|&w| 0.5 * w + sd * rng.sample::<f64, _>(StandardNormal)).collect();
    let second: Vec<f64> = dw.iter().zip(&first).map(|(w, a)| w - a).collect();
    let mid = step(tr, z, dt / 2.0, &first, depth + 1, rng, halvings, t)?;
    step(tr, &mid, dt / 2.0, &second, depth + 1, rng, halvings, t + dt / 2.0)
}

fn sample_init(init: &dyn Fn(f64) -> f64, m: usize) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..m).map(|k| init(k as f64 / m as f64)).collect();
    match z.iter().find(|v| !(**v > 0.0)) {
        Some(&v) => Err(Error::NonPositive(v)),
        None => Ok(z),
    }
}

/// Noise source: `Some(rng)` draws `ΔW`, `None` switches the noise off.
fn solve_with(
    drift: f64,
    init: &dyn Fn(f64) -> f64,
    grid: &SheGrid,
    mut noise: impl FnMut(usize) -> Option<Vec<f64>>,
) -> Result<SheField> {
    grid.validate()?;
    let tr = Transport::new(grid.m, drift);
    let mut z = sample_init(init, grid.m)?;
    let mut bridge = stream_rng(grid.seed, 1);
    let mut field = SheField { m: grid.m, times: vec![0.0], z: vec![z.clone()], halvings: 0 };
    let steps = grid.steps();
    for j in 0..steps {
        let t = j as f64 * grid.dt;
        z = match noise(j) {
            Some(dw) => step(&tr, &z, grid.dt, &dw, 0, &mut bridge, &mut field.halvings, t)?,
            None => tr.apply(&z, grid.dt),
        };
        if (j + 1) % grid.record_every == 0 || j + 1 == steps {
            field.times.push((j + 1) as f64 * grid.dt);
            field.z.push(z.clone());
        }
    }
    Ok(field)
}

/// Solves the equation with drift `b` (operator `½Δ − b∂_x`).
pub fn solve_she(drift: f64, init: &dyn Fn(f64) -> f64, grid: &SheGrid) -> Result<SheField> {
    let mut rng = stream_rng(grid.seed, 0);
    let sd = (grid.dt * grid.m as f64).sqrt();
    solve_with(drift, init, grid, |_| Some((0..grid.m).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()))
}

/// Deterministic transport only (noise off).
pub fn solve_heat_flow(drift: f64, init: &dyn Fn(f64) -> f64, grid: &SheGrid) -> Result<SheField> {
    solve_with(drift, init, grid, |_| None)
}

/// Solves on `grid` and on the refined grid `(2M, δt/4)` driven by the same
/// white noise: each coarse increment is half the sum of the eight fine
/// increments covering its space-time cell.
pub fn solve_she_refined(drift: f64, init: &dyn Fn(f64) -> f64, grid: &SheGrid) -> Result<(SheField, SheField)> {
    grid.validate()?;
    let m = grid.m;
    let fine_grid = SheGrid { m: 2 * m, dt: grid.dt / 4.0, t_end: grid.t_end, record_every: 4 * grid.record_every, seed: grid.seed };
    let mut rng = stream_rng(grid.seed, 0);
    let sd_fine = (fine_grid.dt * fine_grid.m as f64).sqrt();
    let fine_noise: Vec<Vec<f64>> = (0..4 * grid.steps())
        .map(|_| (0..2 * m).map(|_| sd_fine * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    let coarse_noise: Vec<Vec<f64>> = fine_noise
        .chunks(4)
        .map(|block| (0..m).map(|k| 0.5 * block.iter().map(|w| w[2 * k] + w[2 * k + 1]).sum::<f64>()).collect())
        .collect();
    let coarse = solve_with(drift, init, grid, |j| Some(coarse_noise[j].clone()))?;
    let fine = solve_with(drift, init, &fine_grid, |j| Some(fine_noise[j].clone()))?;
    Ok((coarse, fine))
}

/// `h = −log Z` pointwise.
pub fn cole_hopf(z: &[f64]) -> Result<Vec<f64>> {
    z.iter().map(|&v| if v > 0.0 { Ok(-v.ln()) } else { Err(Error::NonPositive(v)) }).collect()
}
