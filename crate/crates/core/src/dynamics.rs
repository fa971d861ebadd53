//! Exact event-driven simulation of the exclusion process, a coupled
//! two-species simulation, the localization map and initial data.
//!
//! Only discordant bonds carry clocks. They are kept in two indexed sets, one
//! per pattern (`+−` can only jump right, `−+` only left). Within a pattern
//! every bond's rate is bounded by a constant, so events are drawn by
//! thinning: exponential waiting time at the bound rate, a uniform bond of a
//! pattern chosen in proportion to its bound mass, and acceptance with
//! probability `rate / bound`. The environment term moves rates by `O(N)`
//! against an `O(N²)` base, so nearly every proposal is accepted, and no rate
//! table ever needs rebuilding.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::ensembles::ModelFunctionals;
use crate::lattice::{wrap, Configuration, LocalFunctional};
use crate::{Error, Result};

/// Independent generator stream `stream` of the seed `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `N`-dependent rate scales: `N²/2`, `N^{3/2}/2` and `N/2`.
#[derive(Clone, Copy, Debug)]
pub struct RateScales {
    half_n2: f64,
    half_n32: f64,
    half_n: f64,
}

impl RateScales {
    pub fn new(n: usize) -> Self {
        let nf = n as f64;
        Self { half_n2: nf * nf / 2.0, half_n32: nf.powf(1.5) / 2.0, half_n: nf / 2.0 }
    }

    /// Rate of a `+−` bond jumping right given the environment value `d`.
    #[inline]
    pub fn right(&self, d: f64) -> f64 {
        self.half_n2 - self.half_n32 - self.half_n * d
    }

    /// Rate of a `−+` bond jumping left given the environment value `d`.
    #[inline]
    pub fn left(&self, d: f64) -> f64 {
        self.half_n2 + self.half_n32 + self.half_n * d
    }
}

/// `(rate_right, rate_left)` of the bond `(x, x+1)`.
pub fn bond_rates(cfg: &Configuration, x: usize, model: &ModelFunctionals) -> Result<(f64, f64)> {
    let n = cfg.n();
    let scales = RateScales::new(n);
    let (a, b) = (cfg.get(x as i64), cfg.get(x as i64 + 1));
    let d = || model.d.eval_at(cfg, x as i64);
    let rates = match (a, b) {
        (1, -1) => (scales.right(d()), 0.0),
        (-1, 1) => (0.0, scales.left(d())),
        _ => (0.0, 0.0),
    };
    if rates.0 < 0.0 || rates.1 < 0.0 {
        return Err(Error::NegativeRate { n, rate: rates.0.min(rates.1) });
    }
    Ok(rates)
}

/// Insertion/removal/uniform-sampling set of bond indices.
#[derive(Clone, Debug)]
struct BondSet {
    items: Vec<u32>,
    pos: Vec<u32>,
}

const ABSENT: u32 = u32::MAX;

impl BondSet {
    fn new(n: usize) -> Self {
        Self { items: Vec::with_capacity(n), pos: vec![ABSENT; n] }
    }

    #[inline]
    fn len(&self) -> usize {
        self.items.len()
    }

    #[inline]
    fn insert(&mut self, x: usize) {
        if self.pos[x] == ABSENT {
            self.pos[x] = self.items.len() as u32;
            self.items.push(x as u32);
        }
    }

    #[inline]
    fn remove(&mut self, x: usize) {
        let p = self.pos[x];
        if p != ABSENT {
            let last = self.items.pop().unwrap();
            if last as usize != x {
                self.items[p as usize] = last;
                self.pos[last as usize] = p;
            }
            self.pos[x] = ABSENT;
        }
    }

    #[inline]
    fn pick<R: Rng>(&self, rng: &mut R) -> usize {
        self.items[rng.random_range(0..self.items.len())] as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpEvent {
    pub time: f64,
    pub bond: u32,
    /// `true` when a particle crossed the bond from `x+1` to `x`.
    pub leftward: bool,
}

/// Streaming simulator; [`simulate`] wraps it with a snapshot grid.
#[derive(Clone, Debug)]
pub struct Simulator {
    cfg: Configuration,
    flux: Vec<i64>,
    time: f64,
    rng: ChaCha8Rng,
    d: LocalFunctional,
    scales: RateScales,
    right_set: BondSet,
    left_set: BondSet,
    bound_right: f64,
    bound_left: f64,
    events: Option<Vec<JumpEvent>>,
    jumps: u64,
    proposals: u64,
}

impl Simulator {
    pub fn new(model: &ModelFunctionals, init: Configuration, seed: u64, stream: u64) -> Result<Self> {
        let n = init.n();
        if n < 2 {
            return Err(Error::InvalidParameter(format!("torus size {n} < 2")));
        }
        model.check_rates(n)?;
        let scales = RateScales::new(n);
        let mut sim = Self {
            flux: vec![0; n],
            time: 0.0,
            rng: stream_rng(seed, stream),
            d: model.d.clone(),
            bound_right: scales.right(-model.d_sup),
            bound_left: scales.left(model.d_sup),
            scales,
            right_set: BondSet::new(n),
            left_set: BondSet::new(n),
            events: None,
            jumps: 0,
            proposals: 0,
            cfg: init,
        };
        for x in 0..n {
            sim.classify(x);
        }
        Ok(sim)
    }

    /// Records every accepted jump from now on.
    pub fn with_event_log(mut self) -> Self {
        self.events = Some(Vec::new());
        self
    }

    pub fn config(&self) -> &Configuration {
        &self.cfg
    }

    /// Per-bond signed crossing counters, leftward crossings positive.
    pub fn flux(&self) -> &[i64] {
        &self.flux
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn jumps(&self) -> u64 {
        self.jumps
    }

    /// Accepted jumps over proposals so far.
    pub fn acceptance(&self) -> f64 {
        self.jumps as f64 / self.proposals.max(1) as f64
    }

    pub fn events(&self) -> Option<&[JumpEvent]> {
        self.events.as_deref()
    }

    pub fn take_events(&mut self) -> Vec<JumpEvent> {
        self.events.as_mut().map(std::mem::take).unwrap_or_default()
    }

    #[inline]
    fn classify(&mut self, x: usize) {
        let n = self.cfg.n();
        let (a, b) = (self.cfg.spins()[x], self.cfg.spins()[(x + 1) % n]);
        match (a, b) {
            (1, -1) => {
                self.right_set.insert(x);
                self.left_set.remove(x);
            }
            (-1, 1) => {
                self.left_set.insert(x);
                self.right_set.remove(x);
            }
            _ => {
                self.right_set.remove(x);
                self.left_set.remove(x);
            }
        }
    }

    /// Runs the chain up to time `t` (no-op if `t` is not ahead). Returns the
    /// number of accepted jumps.
    pub fn advance_to(&mut self, t: f64) -> u64 {
        let n = self.cfg.n();
        let start = self.jumps;
        while self.time < t {
            let mass_r = self.right_set.len() as f64 * self.bound_right;
            let mass_l = self.left_set.len() as f64 * self.bound_left;
            let total = mass_r + mass_l;
            if total <= 0.0 {
                break;
            }
            let e: f64 = self.rng.sample(Exp1);
            let next = self.time + e / total;
            if next > t {
                break;
            }
            self.time = next;
            self.proposals += 1;
            let rightward = self.rng.random::<f64>() * total < mass_r;
            let (x, rate, bound) = if rightward {
                let x = self.right_set.pick(&mut self.rng);
                (x, self.scales.right(self.d.eval_at(&self.cfg, x as i64)), self.bound_right)
            } else {
                let x = self.left_set.pick(&mut self.rng);
                (x, self.scales.left(self.d.eval_at(&self.cfg, x as i64)), self.bound_left)
            };
            if self.rng.random::<f64>() * bound >= rate {
                continue;
            }
            self.cfg.swap_bond_in_place(x);
            self.flux[x] += if rightward { -1 } else { 1 };
            self.jumps += 1;
            if let Some(ev) = self.events.as_mut() {
                ev.push(JumpEvent { time: self.time, bond: x as u32, leftward: !rightward });
            }
            self.classify((x + n - 1) % n);
            self.classify(x);
            self.classify((x + 1) % n);
        }
        self.time = self.time.max(t);
        self.jumps - start
    }
}

#[derive(Clone, Debug)]
pub struct SimParams {
    pub model: Arc<ModelFunctionals>,
    /// Macroscopic horizon.
    pub t_end: f64,
    /// Spacing of recorded snapshots.
    pub snapshot_dt: f64,
    pub seed: u64,
    /// Generator stream (replica index).
    pub stream: u64,
    pub log_events: bool,
}

/// Default snapshot spacing `N^{−2}⌈N^{1/2}⌉`.
pub fn default_grid(n: usize) -> f64 {
    let nf = n as f64;
    (nf.sqrt() - 1e-9).ceil() / (nf * nf)
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub n: usize,
    pub seed: u64,
    pub stream: u64,
    pub snapshot_dt: f64,
    pub times: Vec<f64>,
    pub snapshots: Vec<Configuration>,
    /// Flux counters at each snapshot.
    pub fluxes: Vec<Vec<i64>>,
    pub events: Option<Vec<JumpEvent>>,
}

/// Number of grid steps of spacing `dt` up to `t_end` (rounding at 1e−9).
pub fn grid_steps(t_end: f64, dt: f64) -> usize {
    (t_end / dt + 1e-9).floor() as usize
}

pub fn simulate(params: &SimParams, init: Configuration) -> Result<Trajectory> {
    if !(params.snapshot_dt > 0.0) {
        return Err(Error::NonPositive(params.snapshot_dt));
    }
    if params.t_end < 0.0 {
        return Err(Error::TimeOrder { start: 0.0, end: params.t_end });
    }
    let n = init.n();
    let mut sim = Simulator::new(&params.model, init, params.seed, params.stream)?;
    if params.log_events {
        sim = sim.with_event_log();
    }
    let steps = grid_steps(params.t_end, params.snapshot_dt);
    let mut traj = Trajectory {
        n,
        seed: params.seed,
        stream: params.stream,
        snapshot_dt: params.snapshot_dt,
        times: vec![0.0],
        snapshots: vec![sim.config().clone()],
        fluxes: vec![sim.flux().to_vec()],
        events: None,
    };
    for k in 1..=steps {
        let t = k as f64 * params.snapshot_dt;
        sim.advance_to(t);
        traj.times.push(t);
        traj.snapshots.push(sim.config().clone());
        traj.fluxes.push(sim.flux().to_vec());
    }
    if params.log_events {
        traj.events = Some(sim.take_events());
    }
    Ok(traj)
}

const MAGIC: &[u8; 4] = b"KPZT";
const FORMAT_VERSION: u32 = 1;

impl Trajectory {
    /// Binary frames: header (magic, version, N, grid, seed, stream, frame
    /// count) then per frame the time, the bit-packed spins (bit set = +1)
    /// and the flux counters, all little-endian.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.snapshot_dt.to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.stream.to_le_bytes())?;
        w.write_all(&(self.snapshots.len() as u64).to_le_bytes())?;
        let mut packed = vec![0u8; self.n.div_ceil(8)];
        for ((t, cfg), flux) in self.times.iter().zip(&self.snapshots).zip(&self.fluxes) {
            w.write_all(&t.to_le_bytes())?;
            packed.fill(0);
            for (x, &s) in cfg.spins().iter().enumerate() {
                if s > 0 {
                    packed[x / 8] |= 1 << (x % 8);
                }
            }
            w.write_all(&packed)?;
            for f in flux {
                w.write_all(&f.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        let bad = |m: &str| Error::InvalidParameter(format!("trajectory file: {m}"));
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != FORMAT_VERSION {
            return Err(bad("unsupported version"));
        }
        let mut u64_ = |r: &mut R| -> Result<u64> {
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let n = u64_(&mut r)? as usize;
        let snapshot_dt = f64::from_bits(u64_(&mut r)?);
        let seed = u64_(&mut r)?;
        let stream = u64_(&mut r)?;
        let frames = u64_(&mut r)? as usize;
        let mut traj = Trajectory {
            n,
            seed,
            stream,
            snapshot_dt,
            times: Vec::with_capacity(frames),
            snapshots: Vec::with_capacity(frames),
            fluxes: Vec::with_capacity(frames),
            events: None,
        };
        let mut packed = vec![0u8; n.div_ceil(8)];
        for _ in 0..frames {
            traj.times.push(f64::from_bits(u64_(&mut r)?));
            r.read_exact(&mut packed)?;
            let spins = (0..n).map(|x| if packed[x / 8] >> (x % 8) & 1 == 1 { 1 } else { -1 }).collect();
            traj.snapshots.push(Configuration::new(spins)?);
            let flux = (0..n).map(|_| u64_(&mut r).map(|v| v as i64)).collect::<Result<Vec<_>>>()?;
            traj.fluxes.push(flux);
        }
        Ok(traj)
    }

    /// Long-format CSV: `time,site,spin,flux`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["time", "site", "spin", "flux"])?;
        for ((t, cfg), flux) in self.times.iter().zip(&self.snapshots).zip(&self.fluxes) {
            for x in 0..self.n {
                out.serialize((t, x, cfg.spins()[x], flux[x]))?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Coupled two-species simulator.
///
/// Every bond carries a shared symmetric clock of rate
/// `s₀ = N²/2 − N^{3/2}/2 − (N/2)max|d|` that swaps both species together,
/// which leaves nonnegative residual rates `(N/2)(max|d| − d)` for `+−` and
/// `N^{3/2} + (N/2)(max|d| + d)` for `−+`. Residual rings use one uniform
/// for both species when they show the same pattern and environment value,
/// and independent uniforms otherwise.
#[derive(Clone, Debug)]
pub struct CoupledSimulator {
    a: Configuration,
    b: Configuration,
    time: f64,
    rng: ChaCha8Rng,
    d: LocalFunctional,
    half_n: f64,
    n32: f64,
    d_sup: f64,
    sym: f64,
    residual_bound: f64,
    discrepancies: usize,
    initial_discrepancies: usize,
    uncoupled: u64,
}

impl CoupledSimulator {
    pub fn new(model: &ModelFunctionals, a: Configuration, b: Configuration, seed: u64, stream: u64) -> Result<Self> {
        if a.n() != b.n() {
            return Err(Error::SizeMismatch(format!("species sizes {} and {}", a.n(), b.n())));
        }
        let n = a.n();
        model.check_rates(n)?;
        let nf = n as f64;
        let n32 = nf.powf(1.5);
        let discrepancies = a.spins().iter().zip(b.spins()).filter(|(x, y)| x != y).count();
        Ok(Self {
            time: 0.0,
            rng: stream_rng(seed, stream),
            d: model.d.clone(),
            half_n: nf / 2.0,
            n32,
            d_sup: model.d_sup,
            sym: nf * nf / 2.0 - n32 / 2.0 - nf / 2.0 * model.d_sup,
            residual_bound: n32 + nf * model.d_sup,
            discrepancies,
            initial_discrepancies: discrepancies,
            uncoupled: 0,
            a,
            b,
        })
    }

    pub fn species(&self) -> (&Configuration, &Configuration) {
        (&self.a, &self.b)
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn discrepancy_count(&self) -> usize {
        self.discrepancies
    }

    pub fn initial_discrepancies(&self) -> usize {
        self.initial_discrepancies
    }

    /// Residual rings at which the species were not coupled and at least one
    /// of them jumped.
    pub fn uncoupled_rings(&self) -> u64 {
        self.uncoupled
    }

    pub fn discrepancy_sites(&self) -> Vec<u32> {
        let (a, b) = (self.a.spins(), self.b.spins());
        (0..a.len()).filter(|&x| a[x] != b[x]).map(|x| x as u32).collect()
    }

    fn residual(&self, cfg: &Configuration, x: usize) -> (i8, f64, f64) {
        let (s, t) = (cfg.get(x as i64), cfg.get(x as i64 + 1));
        if s == t {
            return (0, 0.0, 0.0);
        }
        let d = self.d.eval_at(cfg, x as i64);
        let r = if s > 0 { self.half_n * (self.d_sup - d) } else { self.n32 + self.half_n * (self.d_sup + d) };
        (s, d, r.max(0.0))
    }

    fn swap(&mut self, x: usize, in_a: bool, in_b: bool) {
        let n = self.a.n();
        let y = (x + 1) % n;
        let before = self.mismatch(x) + self.mismatch(y);
        if in_a {
            self.a.swap_bond_in_place(x);
        }
        if in_b {
            self.b.swap_bond_in_place(x);
        }
        let after = self.mismatch(x) + self.mismatch(y);
        self.discrepancies = self.discrepancies + after - before;
    }

    #[inline]
    fn mismatch(&self, x: usize) -> usize {
        (self.a.spins()[x] != self.b.spins()[x]) as usize
    }

    /// Advances to `t`; if `window = Some((lo, hi))` stops early at the first
    /// time a discrepancy sits at a site `x` with `lo ≤ x ≤ hi` (torus
    /// distance from 0 measured signed) and returns that time.
    pub fn advance_to(&mut self, t: f64, window: Option<(i64, i64)>) -> Option<f64> {
        let n = self.a.n();
        let inside = |x: usize| {
            window.is_some_and(|(lo, hi)| {
                let s = if x > n / 2 { x as i64 - n as i64 } else { x as i64 };
                lo <= s && s <= hi
            })
        };
        if let Some(w) = window {
            if (w.0..=w.1).any(|s| self.mismatch(wrap(s, n)) == 1) {
                return Some(self.time);
            }
        }
        let per_bond = self.sym + self.residual_bound;
        let total = per_bond * n as f64;
        loop {
            let e: f64 = self.rng.sample(Exp1);
            let next = self.time + e / total;
            if next > t {
                self.time = t;
                return None;
            }
            self.time = next;
            let x = self.rng.random_range(0..n);
            let u = self.rng.random::<f64>() * per_bond;
            if u < self.sym {
                self.swap(x, true, true);
            } else {
                let (pa, da, ra) = self.residual(&self.a, x);
                let (pb, db, rb) = self.residual(&self.b, x);
                let v = self.rng.random::<f64>() * self.residual_bound;
                let (ja, jb) = if pa == pb && da == db {
                    (v < ra, v < rb)
                } else {
                    let w = self.rng.random::<f64>() * self.residual_bound;
                    let jumps = (v < ra, w < rb);
                    if jumps.0 || jumps.1 {
                        self.uncoupled += 1;
                    }
                    jumps
                };
                if !(ja || jb) {
                    continue;
                }
                self.swap(x, ja, jb);
            }
            let y = (x + 1) % n;
            if (inside(x) && self.mismatch(x) == 1) || (inside(y) && self.mismatch(y) == 1) {
                return Some(self.time);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoupledTrajectory {
    pub a: Trajectory,
    pub b: Trajectory,
    /// Sites where the species differ, per snapshot.
    pub discrepancies: Vec<Vec<u32>>,
    /// Cumulative uncoupled residual rings, per snapshot.
    pub uncoupled_rings: Vec<u64>,
}

pub fn simulate_coupled(params: &SimParams, init_a: Configuration, init_b: Configuration) -> Result<CoupledTrajectory> {
    let n = init_a.n();
    let mut sim = CoupledSimulator::new(&params.model, init_a, init_b, params.seed, params.stream)?;
    let empty = |cfg: &Configuration| Trajectory {
        n,
        seed: params.seed,
        stream: params.stream,
        snapshot_dt: params.snapshot_dt,
        times: vec![0.0],
        snapshots: vec![cfg.clone()],
        // fluxes are not tracked by the coupled simulator
        fluxes: Vec::new(),
        events: None,
    };
    let mut out = CoupledTrajectory {
        a: empty(sim.species().0),
        b: empty(sim.species().1),
        discrepancies: vec![sim.discrepancy_sites()],
        uncoupled_rings: vec![0],
    };
    for k in 1..=grid_steps(params.t_end, params.snapshot_dt) {
        let t = k as f64 * params.snapshot_dt;
        sim.advance_to(t, None);
        for (traj, cfg) in [(&mut out.a, sim.species().0), (&mut out.b, sim.species().1)] {
            traj.times.push(t);
            traj.snapshots.push(cfg.clone());
        }
        out.discrepancies.push(sim.discrepancy_sites());
        out.uncoupled_rings.push(sim.uncoupled_rings());
    }
    Ok(out)
}

/// Result of the localization map.
#[derive(Clone, Debug)]
pub struct Localized {
    pub cfg: Configuration,
    /// Half-width of the kept block `[−L, L]`.
    pub radius: usize,
    /// The block covers the torus, so nothing was replaced.
    pub identity: bool,
}

/// `⌈N^{1+γ}t^{1/2} + N^{3/2+γ}t + N^γ ℓ⌉`.
pub fn localization_radius(n: usize, t: f64, ell: f64, gamma: f64) -> usize {
    let nf = n as f64;
    let g = nf.powf(gamma);
    (g * (nf * t.sqrt() + nf.powf(1.5) * t + ell) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the spins at torus distance ≤ L from 0 and sets all others to +1.
pub fn loc_map(cfg: &Configuration, t: f64, ell: f64, gamma: f64) -> Result<Localized> {
    if !(gamma > 0.0) {
        return Err(Error::NonPositive(gamma));
    }
    let n = cfg.n();
    let radius = localization_radius(n, t, ell, gamma);
    if 2 * radius >= n {
        return Ok(Localized { cfg: cfg.clone(), radius, identity: true });
    }
    let mut out = cfg.clone();
    for x in radius + 1..n - radius {
        out.set(x, 1);
    }
    Ok(Localized { cfg: out, radius, identity: false })
}

/// Initial-data families.
#[derive(Clone)]
pub enum InitialKind {
    /// Uniform over zero-sum configurations.
    StationaryZeroSum,
    /// `η_x = (−1)^x`.
    Flat,
    /// A zero-sum configuration whose height `N^{−1/2}Σ_{y≤x}η_y` follows
    /// `F(x/N) − F(0)`; `F` must be 1-periodic.
    Profile(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for InitialKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::StationaryZeroSum => write!(f, "StationaryZeroSum"),
            Self::Flat => write!(f, "Flat"),
            Self::Profile(_) => write!(f, "Profile(..)"),
        }
    }
}

pub fn sample_initial<R: Rng>(kind: &InitialKind, n: usize, rng: &mut R) -> Result<Configuration> {
    if n % 2 == 1 || n == 0 {
        return Err(Error::OddSize(n));
    }
    let spins = match kind {
        InitialKind::StationaryZeroSum => {
            let mut s: Vec<i8> = (0..n).map(|x| if x < n / 2 { 1 } else { -1 }).collect();
            s.shuffle(rng);
            s
        }
        InitialKind::Flat => return Ok(Configuration::alternating(n)),
        InitialKind::Profile(f) => {
            // Greedy tracking of the target partial sums; the final sum has
            // the parity of N and the target is 0, so it ends at exactly 0.
            let scale = (n as f64).sqrt();
            let f0 = f(0.0);
            let mut sum = 0i64;
            let mut spins = vec![0i8; n];
            for x in 1..=n {
                let target = scale * (f(x as f64 / n as f64) - f0);
                let s: i8 = if (sum as f64) < target { 1 } else { -1 };
                sum += s as i64;
                spins[x % n] = s;
            }
            spins
        }
    };
    let cfg = Configuration::new(spins)?;
    if !cfg.is_zero_sum() {
        return Err(Error::NonZeroSum(cfg.sum()));
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensembles::{ModelChoice, ModelFunctionals};
    use std::collections::HashMap;

    fn model(choice: ModelChoice) -> Arc<ModelFunctionals> {
        Arc::new(ModelFunctionals::new(&choice.functional()).unwrap())
    }

    #[test]
    fn rate_examples() {
        let m = model(ModelChoice::Zero);
        let cfg = Configuration::new(vec![1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, -1, 1, -1, 1, -1]).unwrap();
        assert_eq!(bond_rates(&cfg, 0, &m).unwrap(), (96.0, 0.0));
        assert_eq!(bond_rates(&cfg, 2, &m).unwrap(), (0.0, 0.0));
        assert_eq!(bond_rates(&cfg, 1, &m).unwrap(), (0.0, 160.0));
    }

    #[test]
    fn negative_rate_is_an_error() {
        let m = ModelFunctionals::new(&LocalFunctional::constant(5.0)).unwrap();
        let cfg = Configuration::new(vec![1, -1, 1, -1]).unwrap();
        assert!(matches!(bond_rates(&cfg, 0, &m), Err(Error::NegativeRate { .. })));
        assert!(Simulator::new(&m, cfg, 1, 0).is_err());
    }

    /// All zero-sum states of an n-site torus with their generator rows.
    fn generator(n: usize, m: &ModelFunctionals) -> (Vec<Configuration>, HashMap<Configuration, usize>, Vec<Vec<(usize, f64)>>) {
        let states: Vec<Configuration> = (0u32..1 << n)
            .filter(|b| b.count_ones() as usize == n / 2)
            .map(|b| Configuration::new((0..n).map(|i| if b >> i & 1 == 1 { 1 } else { -1 }).collect()).unwrap())
            .collect();
        let index: HashMap<_, _> = states.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        let rows = states
            .iter()
            .map(|s| {
                let mut row: HashMap<usize, f64> = HashMap::new();
                for x in 0..n {
                    let (r, l) = bond_rates(s, x, m).unwrap();
                    if r + l > 0.0 {
                        *row.entry(index[&s.swap_bond(x)]).or_default() += r + l;
                    }
                }
                row.into_iter().collect()
            })
            .collect();
        (states, index, rows)
    }

    #[test]
    fn uniform_zero_sum_law_is_invariant() {
        for choice in [ModelChoice::Zero, ModelChoice::NextNeighbor { beta: 0.7 }, ModelChoice::Mixed { c: 0.3, beta: -0.4, gamma: 0.6 }] {
            let m = ModelFunctionals::new(&choice.functional()).unwrap();
            let (states, _, rows) = generator(8, &m);
            // uniform π: inflow minus outflow at every state
            let mut balance = vec![0.0; states.len()];
            for (i, row) in rows.iter().enumerate() {
                for &(j, r) in row {
                    balance[j] += r;
                    balance[i] -= r;
                }
            }
            assert!(balance.iter().all(|b| b.abs() < 1e-9), "{choice:?}: {balance:?}");
        }
    }

    #[test]
    fn two_site_chain_spends_half_time_in_each_state() {
        let m = model(ModelChoice::Zero);
        let init = Configuration::new(vec![1, -1]).unwrap();
        let mut sim = Simulator::new(&m, init.clone(), 11, 0).unwrap();
        // batch means of the occupation fraction of the initial state
        let (batches, per, dt) = (200, 200, 0.01);
        let mut fracs = Vec::new();
        for _ in 0..batches {
            let mut inside = 0;
            for _ in 0..per {
                let t = sim.time() + dt;
                sim.advance_to(t);
                inside += (sim.config() == &init) as usize;
            }
            fracs.push(inside as f64 / per as f64);
        }
        let e = crate::ensembles::Estimate::from_samples(&fracs);
        assert!((e.value - 0.5).abs() < 3.0 * e.std_error, "{e:?}");
    }

    #[test]
    fn transition_frequencies_match_generator() {
        for (choice, n) in [(ModelChoice::Zero, 4usize), (ModelChoice::NextNeighbor { beta: 0.5 }, 6)] {
            let m = model(choice);
            let (states, index, rows) = generator(n, &m);
            let mut sim = Simulator::new(&m, states[0].clone(), 3, 0).unwrap().with_event_log();
            sim.advance_to(40000.0 / (n * n) as f64);
            let events = sim.take_events();
            let mut counts = vec![HashMap::<usize, f64>::new(); states.len()];
            let mut cfg = states[0].clone();
            for ev in &events {
                let next = cfg.swap_bond(ev.bond as usize);
                *counts[index[&cfg]].entry(index[&next]).or_default() += 1.0;
                cfg = next;
            }
            assert_eq!(&cfg, sim.config());
            for (i, row) in rows.iter().enumerate() {
                let total_rate: f64 = row.iter().map(|r| r.1).sum();
                let visits: f64 = counts[i].values().sum();
                assert!(visits > 1000.0);
                for &(j, r) in row {
                    let p = r / total_rate;
                    let got = counts[i].get(&j).copied().unwrap_or(0.0) / visits;
                    let se = (p * (1.0 - p) / visits).sqrt();
                    assert!((got - p).abs() < 4.0 * se + 1e-12, "n={n} {i}->{j}: {got} vs {p}");
                }
            }
        }
    }

    #[test]
    fn simulation_is_deterministic_and_conserves() {
        let m = model(ModelChoice::NextNeighbor { beta: 0.5 });
        let mut rng = stream_rng(9, 0);
        let init = sample_initial(&InitialKind::StationaryZeroSum, 32, &mut rng).unwrap();
        let params = SimParams { model: m, t_end: 0.05, snapshot_dt: default_grid(32), seed: 77, stream: 2, log_events: true };
        let a = simulate(&params, init.clone()).unwrap();
        let b = simulate(&params, init).unwrap();
        assert_eq!(a.snapshots, b.snapshots);
        assert_eq!(a.events, b.events);
        assert!(a.snapshots.iter().all(|c| c.sum() == 0));
        // replaying the log reproduces every snapshot and flux vector
        let events = a.events.as_ref().unwrap();
        let mut cfg = a.snapshots[0].clone();
        let mut flux = vec![0i64; 32];
        let mut it = events.iter().peekable();
        for (k, &t) in a.times.iter().enumerate() {
            while let Some(ev) = it.next_if(|e| e.time <= t) {
                let x = ev.bond as usize;
                let (s, u) = (cfg.get(x as i64), cfg.get(x as i64 + 1));
                assert_eq!((s, u), if ev.leftward { (-1, 1) } else { (1, -1) });
                cfg.swap_bond_in_place(x);
                flux[x] += if ev.leftward { 1 } else { -1 };
            }
            assert_eq!(cfg, a.snapshots[k]);
            assert_eq!(flux, a.fluxes[k]);
        }
    }

    #[test]
    fn binary_and_csv_round_trip() {
        let m = model(ModelChoice::Constant { c: 0.5 });
        let params = SimParams { model: m, t_end: 0.01, snapshot_dt: 0.002, seed: 1, stream: 0, log_events: false };
        let traj = simulate(&params, Configuration::alternating(12)).unwrap();
        let mut buf = Vec::new();
        traj.write_binary(&mut buf).unwrap();
        let back = Trajectory::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.snapshots, traj.snapshots);
        assert_eq!(back.fluxes, traj.fluxes);
        assert_eq!(back.times, traj.times);
        assert_eq!((back.n, back.seed, back.snapshot_dt), (12, 1, 0.002));
        let mut csv = Vec::new();
        traj.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 1 + 12 * traj.snapshots.len());
        assert!(text.starts_with("time,site,spin,flux\n0.0,0,1,0"));
    }

    #[test]
    fn coupled_identical_species_stay_identical() {
        let m = model(ModelChoice::Zero);
        let mut rng = stream_rng(4, 0);
        let init = sample_initial(&InitialKind::StationaryZeroSum, 32, &mut rng).unwrap();
        let params = SimParams { model: m, t_end: 0.05, snapshot_dt: 0.005, seed: 4, stream: 0, log_events: false };
        let c = simulate_coupled(&params, init.clone(), init).unwrap();
        assert!(c.discrepancies.iter().all(|d| d.is_empty()));
        assert_eq!(c.a.snapshots, c.b.snapshots);
        assert_ne!(c.a.snapshots[0], *c.a.snapshots.last().unwrap());
    }

    #[test]
    fn coupled_discrepancy_bound() {
        let m = model(ModelChoice::NextNeighbor { beta: 0.8 });
        let mut rng = stream_rng(5, 0);
        for rep in 0..5 {
            let a = sample_initial(&InitialKind::StationaryZeroSum, 64, &mut rng).unwrap();
            let b = loc_map(&a, 0.0, 4.0, 0.1).unwrap().cfg;
            let mut sim = CoupledSimulator::new(&m, a, b, 6, rep).unwrap();
            let d0 = sim.initial_discrepancies();
            for k in 1..=40 {
                sim.advance_to(k as f64 * 2e-4, None);
                assert!(sim.discrepancy_count() as u64 <= d0 as u64 + 2 * sim.uncoupled_rings());
                assert_eq!(sim.discrepancy_count(), sim.discrepancy_sites().len());
            }
        }
    }

    #[test]
    fn coupled_marginals_match_single_species() {
        // mean flux through bond 0 from the coupled species B equals the
        // single-species simulator's within Monte Carlo error
        let m = model(ModelChoice::NextNeighbor { beta: 0.5 });
        let n = 16;
        let (reps, t) = (600, 0.02);
        let stat = |cfg: &Configuration| cfg.spins()[..4].iter().map(|&s| s as f64).sum::<f64>();
        let init_a = Configuration::alternating(n);
        let init_b = Configuration::new((0..n).map(|x| if x < n / 2 { 1 } else { -1 }).collect()).unwrap();
        let mut single = Vec::new();
        let mut coupled = Vec::new();
        for r in 0..reps {
            let mut s = Simulator::new(&m, init_b.clone(), 21, r).unwrap();
            s.advance_to(t);
            single.push(stat(s.config()));
            let mut c = CoupledSimulator::new(&m, init_a.clone(), init_b.clone(), 22, r).unwrap();
            c.advance_to(t, None);
            coupled.push(stat(c.species().1));
        }
        let (a, b) = (crate::ensembles::Estimate::from_samples(&single), crate::ensembles::Estimate::from_samples(&coupled));
        let se = (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 4.0 * se, "{a:?} {b:?}");
    }

    #[test]
    fn localization_examples() {
        let cfg = Configuration::new((0..32).map(|x| if x % 3 == 0 { -1 } else { 1 }).collect()).unwrap();
        let loc = loc_map(&cfg, 0.0, 0.0, 0.01).unwrap();
        assert_eq!(loc.radius, 0);
        assert_eq!(loc.cfg.spins()[0], -1);
        assert!(loc.cfg.spins()[1..].iter().all(|&s| s == 1));
        let n = 32.0f64;
        let want = (n.powf(0.05) * (1.0 + n.powf(-0.5) + 4.0)).ceil() as usize;
        assert_eq!(localization_radius(32, 1.0 / (n * n), 4.0, 0.05), want);
        let l1 = loc_map(&cfg, 1.0 / (n * n), 4.0, 0.05).unwrap();
        let l2 = loc_map(&l1.cfg, 1.0 / (n * n), 4.0, 0.05).unwrap();
        assert_eq!(l1.cfg, l2.cfg);
        for x in 0..32i64 {
            let dist = x.min(32 - x) as usize;
            let keep = dist <= want;
            assert_eq!(l1.cfg.get(x) == cfg.get(x) || !keep, true);
            if !keep {
                assert_eq!(l1.cfg.get(x), 1);
            }
        }
        assert!(loc_map(&cfg, 1.0, 4.0, 0.05).unwrap().identity);
        assert!(loc_map(&cfg, 0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn initial_data() {
        let mut rng = stream_rng(1, 0);
        assert_eq!(sample_initial(&InitialKind::Flat, 4, &mut rng).unwrap().spins(), &[1, -1, 1, -1]);
        assert!(sample_initial(&InitialKind::Flat, 5, &mut rng).is_err());
        for _ in 0..10 {
            assert_eq!(sample_initial(&InitialKind::StationaryZeroSum, 50, &mut rng).unwrap().sum(), 0);
        }
        let f = |u: f64| 0.3 * (2.0 * std::f64::consts::PI * u).sin();
        let n = 256;
        let cfg = sample_initial(&InitialKind::Profile(Arc::new(f)), n, &mut rng).unwrap();
        let mut h = 0.0;
        for x in 1..=n {
            h += cfg.spins()[x % n] as f64 / (n as f64).sqrt();
            // height tracks the profile to one lattice step
            assert!((h - f(x as f64 / n as f64)).abs() <= 1.0 / (n as f64).sqrt() + 1e-12);
        }
    }
}
