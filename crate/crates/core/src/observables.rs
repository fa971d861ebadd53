//! Height function, Gärtner transform, rescaling, time averages along paths,
//! stopping-time monitors and the exact generator-residual check.
//!
//! Height convention: `h_0 = 2N^{−1/2}·flux[0]` where `flux[0]` counts net
//! leftward crossings of bond `(0,1)`, and `h_x = h_0 + N^{−1/2}Σ_{y=1}^x η_y`.
//! A leftward jump across bond `x` then raises `h_x` by `2N^{−1/2}` and leaves
//! every other site unchanged, so `h_x(T) = h_x(0) + 2N^{−1/2}flux[x](T)`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dynamics::{bond_rates, Trajectory};
use crate::ensembles::{local_density_block, scale_len, ModelFunctionals};
use crate::heat::HeatKernel;
use crate::lattice::{Configuration, SiteField};
use crate::{Error, Result};

/// Height profile of a state with the given crossing count at bond `(0,1)`.
pub fn height_from_state(cfg: &Configuration, flux0: i64) -> Vec<f64> {
    let n = cfg.n();
    let a = 1.0 / (n as f64).sqrt();
    let mut h = Vec::with_capacity(n);
    let mut cur = 2.0 * a * flux0 as f64;
    h.push(cur);
    for x in 1..n {
        cur += a * cfg.spins()[x] as f64;
        h.push(cur);
    }
    h
}

/// Height reconstructed bond by bond: `h_x(0) + 2N^{−1/2}flux[x]`.
pub fn height_from_flux(initial: &[f64], flux: &[i64]) -> Vec<f64> {
    let a = 1.0 / (initial.len() as f64).sqrt();
    initial.iter().zip(flux).map(|(h, &f)| h + 2.0 * a * f as f64).collect()
}

#[derive(Clone, Debug)]
pub struct HeightField {
    pub n: usize,
    pub times: Vec<f64>,
    pub h: Vec<Vec<f64>>,
}

pub fn height_field(traj: &Trajectory) -> Result<HeightField> {
    if traj.fluxes.len() != traj.snapshots.len() {
        return Err(Error::SizeMismatch("trajectory carries no flux counters".into()));
    }
    let h = traj.snapshots.iter().zip(&traj.fluxes).map(|(c, f)| height_from_state(c, f[0])).collect();
    Ok(HeightField { n: traj.n, times: traj.times.clone(), h })
}

/// `log Z = −h + R·T` on the snapshot grid (stored in log space).
#[derive(Clone, Debug)]
pub struct GartnerField {
    pub n: usize,
    pub times: Vec<f64>,
    pub log_z: Vec<Vec<f64>>,
    pub renormalization: f64,
}

impl GartnerField {
    pub fn z(&self, k: usize, x: usize) -> f64 {
        self.log_z[k][x].exp()
    }

    pub fn z_row(&self, k: usize) -> Vec<f64> {
        self.log_z[k].iter().map(|v| v.exp()).collect()
    }
}

pub fn log_gartner(h: &[f64], renormalization: f64, t: f64) -> Vec<f64> {
    h.iter().map(|v| -v + renormalization * t).collect()
}

pub fn gartner_field(traj: &Trajectory, model: &ModelFunctionals) -> Result<GartnerField> {
    let hf = height_field(traj)?;
    let r = model.renormalization(traj.n);
    let log_z = hf.h.iter().zip(&hf.times).map(|(h, &t)| log_gartner(h, r, t)).collect();
    Ok(GartnerField { n: hf.n, times: hf.times, log_z, renormalization: r })
}

/// Replays a logged trajectory and returns the worst deviation of the
/// per-event factor of `Z` at the jump site from `e^{∓2N^{−1/2}}`, together
/// with the worst change at any other site (both should be at rounding
/// level).
pub fn jump_multiplicativity(traj: &Trajectory, model: &ModelFunctionals) -> Result<(f64, f64)> {
    let events = traj.events.as_ref().ok_or_else(|| Error::InvalidParameter("trajectory has no event log".into()))?;
    let n = traj.n;
    let a = 1.0 / (n as f64).sqrt();
    let r = model.renormalization(n);
    let mut cfg = traj.snapshots[0].clone();
    let mut flux0 = traj.fluxes[0][0];
    let (mut worst_site, mut worst_other) = (0.0f64, 0.0f64);
    for ev in events {
        let before = log_gartner(&height_from_state(&cfg, flux0), r, ev.time);
        let x = ev.bond as usize;
        cfg.swap_bond_in_place(x);
        if x == 0 {
            flux0 += if ev.leftward { 1 } else { -1 };
        }
        let after = log_gartner(&height_from_state(&cfg, flux0), r, ev.time);
        let want = if ev.leftward { -2.0 * a } else { 2.0 * a };
        for y in 0..n {
            let ratio = (after[y] - before[y]).exp();
            if y == x {
                worst_site = worst_site.max((ratio / want.exp() - 1.0).abs());
            } else {
                worst_other = worst_other.max((ratio - 1.0).abs());
            }
        }
    }
    Ok((worst_site, worst_other))
}

/// Linear interpolation of lattice values at the continuum point `x ∈ T¹`
/// (node `k` sits at `k/N`).
pub fn rescale_space(values: &[f64], x: f64) -> f64 {
    let n = values.len();
    let u = x.rem_euclid(1.0) * n as f64;
    let i = u.floor() as usize % n;
    let f = u - u.floor();
    (1.0 - f) * values[i] + f * values[(i + 1) % n]
}

/// Samples a lattice field at `m` equispaced continuum points.
pub fn rescale_to_grid(values: &[f64], m: usize) -> Vec<f64> {
    (0..m).map(|j| rescale_space(values, j as f64 / m as f64)).collect()
}

/// A time average along a path sampled on a uniform grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeAverage {
    pub values: Vec<f64>,
    /// First grid index whose averaging window runs past the horizon (the
    /// window is truncated there).
    pub truncated_from: Option<usize>,
}

/// `(1/t_av)∫_0^{t_av} g(S + r) dr` at every grid time `S`, exact for `g`
/// piecewise constant on `[t_j, t_j + dt)`; `t_av = 0` is the identity.
pub fn time_average(samples: &[f64], dt: f64, t_av: f64) -> TimeAverage {
    if t_av <= 0.0 {
        return TimeAverage { values: samples.to_vec(), truncated_from: None };
    }
    let m = samples.len();
    let mut prefix = vec![0.0; m + 1];
    for j in 0..m {
        prefix[j + 1] = prefix[j] + samples[j] * dt;
    }
    // integral of the step function over [0, s]
    let integral = |s: f64| -> f64 {
        let u = (s / dt).max(0.0);
        let j = (u.floor() as usize).min(m);
        if j >= m {
            prefix[m]
        } else {
            prefix[j] + samples[j] * (s - j as f64 * dt)
        }
    };
    let horizon = m as f64 * dt;
    let mut truncated_from = None;
    let values = (0..m)
        .map(|j| {
            let s = j as f64 * dt;
            let end = s + t_av;
            if end > horizon * (1.0 + 1e-12) && truncated_from.is_none() {
                truncated_from = Some(j);
            }
            let end = end.min(horizon);
            (integral(end) - integral(s)) / (end - s).max(f64::MIN_POSITIVE)
        })
        .collect();
    TimeAverage { values, truncated_from }
}

/// `𝔦_t − 𝔦_{t′}` along the path.
pub fn transfer_diff(samples: &[f64], dt: f64, t: f64, t_prime: f64) -> TimeAverage {
    let a = time_average(samples, dt, t);
    let b = time_average(samples, dt, t_prime);
    let truncated_from = match (a.truncated_from, b.truncated_from) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, y) => x.or(y),
    };
    TimeAverage { values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(), truncated_from }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub eps_ap: f64,
    pub eps_rn: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self { eps_ap: 0.1, eps_rn: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub t_ap: f64,
    pub t_rn_time: f64,
    pub t_rn_space: f64,
    pub t_st: f64,
    /// Largest values reached by each statistic divided by its threshold.
    pub ratio_ap: f64,
    pub ratio_time: f64,
    pub ratio_space: f64,
}

/// Time-lag ladder `{k N^{−2+jε}: 1 ≤ k ≤ N^ε, N^{−2+jε} ≤ N^{−1}}` rounded to
/// positive multiples of the grid spacing, deduplicated and sorted.
pub fn time_ladder(n: usize, eps_ap: f64, grid: f64) -> Vec<usize> {
    let nf = n as f64;
    let kmax = (nf.powf(eps_ap) + 1e-9).floor().max(1.0) as usize;
    let mut lags = Vec::new();
    let mut j = 0;
    loop {
        let base = nf.powf(-2.0 + j as f64 * eps_ap);
        if base > 1.0 / nf * (1.0 + 1e-9) {
            break;
        }
        for k in 1..=kmax {
            lags.push(((k as f64 * base / grid).round() as usize).max(1));
        }
        j += 1;
        if eps_ap <= 0.0 {
            break;
        }
    }
    lags.sort_unstable();
    lags.dedup();
    lags
}

/// Streaming evaluation of the three stopping statistics on a uniform grid.
#[derive(Clone, Debug)]
pub struct StoppingMonitor {
    n: usize,
    grid: f64,
    threshold: f64,
    lags: Vec<usize>,
    ell_max: usize,
    z0: Vec<f64>,
    history: VecDeque<Vec<f64>>,
    steps: usize,
    sup_z: f64,
    sup_zinv: f64,
    sup_lag: Vec<f64>,
    sup_space: f64,
    t_ap: Option<f64>,
    t_rn_time: Option<f64>,
    t_rn_space: Option<f64>,
    ratio_ap: f64,
    ratio_time: f64,
    ratio_space: f64,
}

impl StoppingMonitor {
    pub fn new(n: usize, grid: f64, cfg: MonitorConfig) -> Self {
        let lags = time_ladder(n, cfg.eps_ap, grid);
        let ell_max = (((n as f64).powf(0.5 + cfg.eps_rn) - 1e-9).ceil() as usize).clamp(1, n / 2);
        Self {
            n,
            grid,
            threshold: (n as f64).powf(cfg.eps_ap),
            sup_lag: vec![0.0; lags.len()],
            lags,
            ell_max,
            z0: Vec::new(),
            history: VecDeque::new(),
            steps: 0,
            sup_z: 0.0,
            sup_zinv: 0.0,
            sup_space: 0.0,
            t_ap: None,
            t_rn_time: None,
            t_rn_space: None,
            ratio_ap: 0.0,
            ratio_time: 0.0,
            ratio_space: 0.0,
        }
    }

    pub fn lags(&self) -> &[usize] {
        &self.lags
    }

    /// Feeds `Z` at the next grid time (`steps · grid`).
    pub fn observe(&mut self, z: &[f64]) {
        assert_eq!(z.len(), self.n);
        let t = self.steps as f64 * self.grid;
        for &v in z {
            self.sup_z = self.sup_z.max(v.abs());
            self.sup_zinv = self.sup_zinv.max(1.0 / v.abs());
        }
        if self.steps == 0 {
            self.z0 = z.to_vec();
        }
        // time gradients against (t − s) ∨ 0
        for (i, &lag) in self.lags.iter().enumerate() {
            let past = if lag > self.steps {
                &self.z0
            } else if lag <= self.history.len() {
                &self.history[self.history.len() - lag]
            } else {
                &self.z0
            };
            let m = past.iter().zip(z).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            self.sup_lag[i] = self.sup_lag[i].max(m);
        }
        let n = self.n;
        for l in 1..=self.ell_max {
            // |ℓ| and −|ℓ| give the same sup over x
            let m = (0..n).fold(0.0f64, |m, x| m.max((z[(x + l) % n] - z[x]).abs()));
            self.sup_space = self.sup_space.max(m / (l as f64).sqrt());
        }
        let nf = n as f64;
        let bound = self.threshold * (1.0 + self.sup_z * self.sup_z);
        let ap = (self.sup_z + self.sup_zinv) / self.threshold;
        let time_stat = self
            .lags
            .iter()
            .zip(&self.sup_lag)
            .map(|(&lag, &m)| (lag as f64 * self.grid).powf(-0.25) * m)
            .fold(0.0, f64::max);
        let space_stat = nf.sqrt() * self.sup_space;
        self.ratio_ap = self.ratio_ap.max(ap);
        self.ratio_time = self.ratio_time.max(time_stat / bound);
        self.ratio_space = self.ratio_space.max(space_stat / bound);
        if self.t_ap.is_none() && ap >= 1.0 {
            self.t_ap = Some(t.min(1.0));
        }
        if self.t_rn_time.is_none() && time_stat >= bound {
            self.t_rn_time = Some(t.min(1.0));
        }
        if self.t_rn_space.is_none() && space_stat >= bound {
            self.t_rn_space = Some(t.min(1.0));
        }
        self.history.push_back(z.to_vec());
        let keep = self.lags.last().copied().unwrap_or(0);
        while self.history.len() > keep {
            self.history.pop_front();
        }
        self.steps += 1;
    }

    /// First grid time at which any statistic crossed its threshold.
    pub fn stopped_at(&self) -> Option<f64> {
        [self.t_ap, self.t_rn_time, self.t_rn_space].into_iter().flatten().reduce(f64::min)
    }

    pub fn report(&self) -> StoppingReport {
        let t_ap = self.t_ap.unwrap_or(1.0);
        let t_rn_time = self.t_rn_time.unwrap_or(1.0);
        let t_rn_space = self.t_rn_space.unwrap_or(1.0);
        StoppingReport {
            t_ap,
            t_rn_time,
            t_rn_space,
            t_st: t_ap.min(t_rn_time).min(t_rn_space).min(1.0),
            ratio_ap: self.ratio_ap,
            ratio_time: self.ratio_time,
            ratio_space: self.ratio_space,
        }
    }
}

/// Runs the monitors over a recorded field (`z[k]` at time `k·grid`) and
/// returns the report and the stopped field `Y = Z·1(T ≤ t_st)`.
pub fn stopping_monitors(z: &[Vec<f64>], grid: f64, cfg: MonitorConfig) -> (StoppingReport, Vec<Vec<f64>>) {
    let n = z.first().map_or(0, |r| r.len());
    let mut mon = StoppingMonitor::new(n, grid, cfg);
    for row in z {
        mon.observe(row);
    }
    let report = mon.report();
    let y = z
        .iter()
        .enumerate()
        .map(|(k, row)| if k as f64 * grid <= report.t_st + 1e-12 { row.clone() } else { vec![0.0; n] })
        .collect();
    (report, y)
}

/// `A − N^{1/2}(1+L)^{−1}(log Z_{x−L−1} − log Z_x)` with `L = ⌈N^δ⌉`, or
/// `None` when the block wraps the torus.
pub fn density_identity_check(cfg: &Configuration, log_z: &[f64], delta: f64, x: i64) -> Option<f64> {
    let n = cfg.n();
    let len = scale_len(n, delta);
    if len + 1 >= n {
        return None;
    }
    let get = |y: i64| log_z[y.rem_euclid(n as i64) as usize];
    let grad = get(x - len as i64 - 1) - get(x);
    Some(local_density_block(cfg, len, x) - (n as f64).sqrt() / (1 + len) as f64 * grad)
}

/// Generator action `(R + 𝖫)Z_x` at every site, using that only jumps across
/// bond `x` move `Z_x` (by `e^{±2N^{−1/2}}`).
pub fn generator_action(cfg: &Configuration, z: &[f64], model: &ModelFunctionals) -> Result<Vec<f64>> {
    let n = cfg.n();
    let a = 1.0 / (n as f64).sqrt();
    let r = model.renormalization(n);
    let (up, down) = ((2.0 * a).exp_m1(), (-2.0 * a).exp_m1());
    (0..n)
        .map(|x| {
            let (right, left) = bond_rates(cfg, x, model)?;
            Ok(z[x] * (r + right * up + left * down))
        })
        .collect()
}

/// Brute-force generator action: for every bond and direction, apply the
/// jump, rebuild the whole height profile from scratch and accumulate
/// `rate·(Z_after − Z)`.
pub fn generator_action_brute_force(cfg: &Configuration, flux0: i64, t: f64, model: &ModelFunctionals) -> Result<Vec<f64>> {
    let n = cfg.n();
    let r = model.renormalization(n);
    let z_of = |c: &Configuration, f0: i64| -> Vec<f64> {
        log_gartner(&height_from_state(c, f0), r, t).into_iter().map(f64::exp).collect()
    };
    let z = z_of(cfg, flux0);
    let mut out: Vec<f64> = z.iter().map(|v| r * v).collect();
    for y in 0..n {
        let (right, left) = bond_rates(cfg, y, model)?;
        for (rate, delta) in [(right, -1i64), (left, 1)] {
            if rate == 0.0 {
                continue;
            }
            let after = cfg.swap_bond(y);
            let f0 = if y == 0 { flux0 + delta } else { flux0 };
            let z2 = z_of(&after, f0);
            for x in 0..n {
                out[x] += rate * (z2[x] - z[x]);
            }
        }
    }
    Ok(out)
}

/// Remainder of the microscopic stochastic heat equation at one state.
#[derive(Clone, Debug)]
pub struct DriftResidual {
    /// `remainder_x = (R + 𝖫)Z_x − ℒZ_x + N^{1/2}q̄_x Z_x + 𝔰_x Z_x`.
    pub remainder: Vec<f64>,
    pub max_z: f64,
}

impl DriftResidual {
    /// `Σ_x φ(x/N)·remainder_x`.
    pub fn pair(&self, phi: impl Fn(f64) -> f64) -> f64 {
        let n = self.remainder.len() as f64;
        self.remainder.iter().enumerate().map(|(x, r)| phi(x as f64 / n) * r).sum()
    }
}

/// Exact generator action minus the heat-equation terms; `heat` must be the
/// kernel of the model's drift ([`ModelFunctionals::heat_drift`]).
pub fn drift_residual(cfg: &Configuration, z: &[f64], model: &ModelFunctionals, heat: &HeatKernel) -> Result<DriftResidual> {
    let n = cfg.n();
    let action = generator_action(cfg, z, model)?;
    let lz = heat.generator(&SiteField::new(z.to_vec()));
    let sq = (n as f64).sqrt();
    let remainder = (0..n)
        .map(|x| {
            let qb = model.qbar.eval_at(cfg, x as i64);
            let s = model.s.eval_at(cfg, x as i64);
            action[x] - lz.values()[x] + sq * qb * z[x] + s * z[x]
        })
        .collect();
    Ok(DriftResidual { remainder, max_z: z.iter().fold(0.0, |m, v| m.max(v.abs())) })
}
