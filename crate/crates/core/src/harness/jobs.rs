//! Plain simulation and solver jobs behind the `simulate` and `she` commands.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{replica_stream, worker_pool};
use crate::dynamics::{default_grid, sample_initial, simulate, stream_rng, InitialKind, SimParams};
use crate::ensembles::{ModelChoice, ModelFunctionals};
use crate::observables::gartner_field;
use crate::she::{solve_she, SheGrid};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialData {
    Stationary,
    Flat,
}

fn default_replicas() -> usize {
    1
}

/// `[simulate]` job: trajectories written as binary frames plus CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub n: usize,
    pub model: ModelChoice,
    pub t_end: f64,
    /// Snapshot spacing; defaults to `N^{−2}⌈N^{1/2}⌉`.
    #[serde(default)]
    pub snapshot_dt: Option<f64>,
    pub initial: InitialData,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default)]
    pub log_events: bool,
    pub output: PathBuf,
}

/// Runs the job and returns the files written.
pub fn run_simulate(cfg: &SimulateConfig) -> Result<Vec<PathBuf>> {
    let model = Arc::new(ModelFunctionals::new(&cfg.model.functional())?);
    let dt = cfg.snapshot_dt.unwrap_or_else(|| default_grid(cfg.n));
    let kind = match cfg.initial {
        InitialData::Stationary => InitialKind::StationaryZeroSum,
        InitialData::Flat => InitialKind::Flat,
    };
    std::fs::create_dir_all(&cfg.output)?;
    let pool = worker_pool()?;
    let files = pool.install(|| {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|r| -> Result<Vec<PathBuf>> {
                let stream = replica_stream(cfg.n, r);
                let init = sample_initial(&kind, cfg.n, &mut stream_rng(cfg.seed ^ 1, stream))?;
                let params = SimParams {
                    model: model.clone(),
                    t_end: cfg.t_end,
                    snapshot_dt: dt,
                    seed: cfg.seed,
                    stream,
                    log_events: cfg.log_events,
                };
                let traj = simulate(&params, init)?;
                let bin = cfg.output.join(format!("trajectory_{r:04}.kpzt"));
                let csv_path = cfg.output.join(format!("trajectory_{r:04}.csv"));
                let z_path = cfg.output.join(format!("gartner_{r:04}.csv"));
                traj.write_binary(std::io::BufWriter::new(std::fs::File::create(&bin)?))?;
                traj.write_csv(std::fs::File::create(&csv_path)?)?;
                let g = gartner_field(&traj, &model)?;
                let mut w = csv::Writer::from_path(&z_path)?;
                w.write_record(["time", "site", "log_z"])?;
                for (t, row) in g.times.iter().zip(&g.log_z) {
                    for (x, v) in row.iter().enumerate() {
                        w.serialize((t, x, v))?;
                    }
                }
                w.flush()?;
                Ok(vec![bin, csv_path, z_path])
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(files.into_iter().flatten().collect())
}

/// `[she]` job: replicas of the continuum solver dumped as CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SheConfig {
    pub cells: usize,
    pub t_end: f64,
    /// Drift `b` of `½Δ − b∂_x`; defaults to the model's heat drift.
    #[serde(default)]
    pub drift: Option<f64>,
    #[serde(default)]
    pub model: Option<ModelChoice>,
    /// Number of recorded frames after time 0.
    #[serde(default)]
    pub frames: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub output: PathBuf,
}

pub fn run_she(cfg: &SheConfig) -> Result<PathBuf> {
    let drift = match (cfg.drift, &cfg.model) {
        (Some(b), _) => b,
        (None, Some(m)) => ModelFunctionals::new(&m.functional())?.heat_drift(),
        (None, None) => 0.0,
    };
    let base = SheGrid::stable(cfg.cells, cfg.t_end, 0);
    let steps = base.steps();
    let frames = cfg.frames.unwrap_or(1).clamp(1, steps);
    let grid = SheGrid { record_every: steps.div_ceil(frames), ..base };
    let pool = worker_pool()?;
    let fields = pool.install(|| {
        (0..cfg.replicas)
            .into_par_iter()
            .map(|r| solve_she(drift, &|_| 1.0, &SheGrid { seed: cfg.seed ^ replica_stream(cfg.cells, r), ..grid.clone() }))
            .collect::<Result<Vec<_>>>()
    })?;
    if let Some(parent) = cfg.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(&cfg.output)?;
    w.write_record(["replica", "t", "x", "Z"])?;
    for (r, f) in fields.iter().enumerate() {
        f.write_csv(r, &mut w)?;
    }
    w.flush()?;
    Ok(cfg.output.clone())
}

pub fn load_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    toml::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::InvalidParameter(format!("{}: {e}", path.display())))
}
