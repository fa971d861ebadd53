//! Experiment catalog, TOML configuration, reports and the worker pool.
//!
//! A [`Report`] is a pure function of its [`ExperimentConfig`]: every replica
//! draws from its own seeded stream and results are aggregated in replica
//! order regardless of scheduling.

pub mod experiments;
pub mod jobs;
pub mod stats;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ensembles::ModelChoice;
use crate::observables::MonitorConfig;
use crate::{Error, Result};

pub use experiments::run_experiment;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "KPZLAB_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExperimentId {
    /// Exact identities with no statistical content.
    Identities,
    E1,
    E2,
    E3,
    E4,
    E5,
    E6,
    E7,
    E8,
    E9,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 10] = [
        Self::Identities,
        Self::E1,
        Self::E2,
        Self::E3,
        Self::E4,
        Self::E5,
        Self::E6,
        Self::E7,
        Self::E8,
        Self::E9,
    ];

    pub fn title(self) -> &'static str {
        match self {
            Self::Identities => "exact identities",
            Self::E1 => "stationarity of conditioned Bernoulli data",
            Self::E2 => "generator residual scaling",
            Self::E3 => "Boltzmann-Gibbs decay of the heat-integrated flux",
            Self::E4 => "canonical expectation decay over block lengths",
            Self::E5 => "one-point law against the continuum SHE",
            Self::E6 => "stopping-time monitor fractions",
            Self::E7 => "bridge covariance of the stationary height",
            Self::E8 => "space-time average variance decay",
            Self::E9 => "coupling discrepancy decay",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identities => write!(f, "identities"),
            other => write!(f, "{other:?}"),
        }
    }
}

impl FromStr for ExperimentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|id| id.to_string().eq_ignore_ascii_case(t))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown experiment {s:?}")))
    }
}

/// Experiment-specific knobs; unset fields take the experiment's default.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Macroscopic horizon.
    pub t_end: Option<f64>,
    /// Snapshot spacing in units of `N^{−2}`.
    pub grid: Option<f64>,
    /// Block lengths / numbers of translates.
    pub lengths: Vec<usize>,
    /// Time scales in units of `N^{−2}`.
    pub time_scales: Vec<f64>,
    /// Localization exponents.
    pub gammas: Vec<f64>,
    /// Observation window length.
    pub ell: Option<f64>,
    /// Cells of the continuum solver.
    pub cells: Option<usize>,
    /// Run over the whole example library instead of `model`.
    pub all_models: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: ExperimentId,
    /// Lattice sizes `N`.
    pub sizes: Vec<usize>,
    /// Replicas (or sampled states) per size.
    pub replicas: usize,
    pub model: ModelChoice,
    #[serde(default)]
    pub monitor: MonitorConfig,
    #[serde(default)]
    pub seed: u64,
    /// Directory for `report.json` and the CSV tables.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub params: ExperimentParams,
}

impl ExperimentConfig {
    /// The configuration the acceptance suite runs.
    pub fn defaults(id: ExperimentId) -> Self {
        let nn = ModelChoice::NextNeighbor { beta: 0.5 };
        let mut p = ExperimentParams::default();
        let (sizes, replicas, model) = match id {
            ExperimentId::Identities => (vec![16, 64, 256], 1, nn),
            ExperimentId::E1 => {
                p.t_end = Some(0.05);
                p.all_models = Some(true);
                (vec![128], 200, nn)
            }
            ExperimentId::E2 => (vec![32, 64, 128, 256, 512], 50, ModelChoice::Mixed { c: -0.4, beta: 0.25, gamma: 0.5 }),
            ExperimentId::E3 => (vec![64, 128, 256, 512], 200, nn),
            ExperimentId::E4 => {
                p.lengths = vec![8, 16, 32, 64, 128];
                (vec![512], 2000, nn)
            }
            ExperimentId::E5 => {
                p.t_end = Some(0.5);
                p.cells = Some(64);
                (vec![256], 2000, nn)
            }
            ExperimentId::E6 => {
                p.grid = Some(1.0);
                (vec![64, 128, 256], 100, nn)
            }
            ExperimentId::E7 => {
                p.t_end = Some(0.02);
                (vec![128], 500, nn)
            }
            ExperimentId::E8 => {
                p.lengths = vec![4, 8, 16, 40];
                p.time_scales = vec![2.0, 4.0, 8.0, 20.0];
                (vec![512], 2000, nn)
            }
            ExperimentId::E9 => {
                p.gammas = vec![0.02, 0.05, 0.1];
                p.time_scales = vec![16.0];
                p.ell = Some(4.0);
                (vec![128], 500, nn)
            }
        };
        // With ε_ap = 0.1 the a-priori bound N^{ε_ap} < 2 = ‖Z₀‖ + ‖Z₀^{−1}‖
        // stops every flat run at time 0; N^{0.75} sits near the 99th
        // percentile of sup(Z + Z^{−1}) over [0,1] for the limiting SHE.
        let monitor = match id {
            ExperimentId::E3 | ExperimentId::E6 => MonitorConfig { eps_ap: 0.75, eps_rn: 0.02 },
            _ => MonitorConfig::default(),
        };
        Self { id, sizes, replicas, model, monitor, seed: 20240611, output: None, params: p }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidParameter(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.is_empty() {
            return Err(Error::InvalidParameter("sizes must not be empty".into()));
        }
        if let Some(&n) = self.sizes.iter().find(|&&n| n < 4 || n % 2 == 1) {
            return Err(Error::OddSize(n));
        }
        if self.replicas == 0 {
            return Err(Error::InvalidParameter("replicas must be positive".into()));
        }
        if !(self.monitor.eps_ap > 0.0 && self.monitor.eps_rn > 0.0) {
            return Err(Error::InvalidParameter("monitor exponents must be positive".into()));
        }
        Ok(())
    }
}

/// One asserted statistic with its threshold and sample size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub std_error: Option<f64>,
    pub threshold: String,
    pub samples: usize,
    pub pass: bool,
}

impl Check {
    pub fn new(name: impl Into<String>, value: f64, threshold: impl Into<String>, samples: usize, pass: bool) -> Self {
        Self { name: name.into(), value, std_error: None, threshold: threshold.into(), samples, pass }
    }

    pub fn with_se(mut self, se: f64) -> Self {
        self.std_error = Some(se);
        self
    }
}

/// A CSV-ready table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    /// Numbers, or text for label columns.
    pub rows: Vec<Vec<serde_json::Value>>,
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Self { name: name.into(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.push_cells(row.into_iter().map(serde_json::Value::from).collect());
    }

    pub fn push_cells(&mut self, row: Vec<serde_json::Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    /// Long-format row `(N, seed, statistic, value)`.
    pub fn push_statistic(&mut self, n: usize, seed: usize, statistic: &str, value: f64) {
        self.push_cells(vec![n.into(), seed.into(), statistic.into(), value.into()]);
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| match v {
                serde_json::Value::String(s) => s.clone(),
                serde_json::Value::Number(x) => x.as_f64().map_or_else(|| x.to_string(), |f| f.to_string()),
                other => other.to_string(),
            }))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub crate_version: String,
    pub seed: u64,
    /// How replica streams are derived from the seed.
    pub streams: String,
    pub config: ExperimentConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub id: ExperimentId,
    pub title: String,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
    pub notes: Vec<String>,
    pub provenance: Provenance,
}

impl Report {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        Self {
            id: cfg.id,
            title: cfg.id.title().into(),
            checks: Vec::new(),
            tables: Vec::new(),
            notes: Vec::new(),
            provenance: Provenance {
                crate_version: env!("CARGO_PKG_VERSION").into(),
                seed: cfg.seed,
                streams: "replica r at size N uses stream (N << 32) | r".into(),
                config: cfg.clone(),
            },
        }
    }

    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.pass)
    }

    /// Writes `report.json` and one CSV per table into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        for t in &self.tables {
            t.write_csv(&dir.join(format!("{}.csv", t.name)))?;
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let mut s = format!("{} ({}): {}\n", self.id, self.title, if self.passed() { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let se = c.std_error.map(|e| format!(" ± {e:.3e}")).unwrap_or_default();
            s += &format!(
                "  [{}] {} = {}{} (threshold {}, n = {})\n",
                if c.pass { "ok" } else { "!!" },
                c.name,
                format_value(c.value),
                se,
                c.threshold,
                c.samples
            );
        }
        s
    }
}

fn format_value(v: f64) -> String {
    if v != 0.0 && v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        format!("{v:.6}")
    }
}

/// Finds every `report.json` below `dir`, sorted by experiment.
pub fn collect_reports(dir: &Path) -> Result<Vec<Report>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|f| f == "report.json") {
                out.push(Report::read(&path)?);
            }
        }
    }
    out.sort_by_key(|r| r.id);
    Ok(out)
}

/// Thread pool sized by `KPZLAB_THREADS` (default: all cores).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&t| t > 0)
            .ok_or_else(|| Error::InvalidParameter(format!("{THREADS_ENV}={v:?} is not a positive integer")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))
}

/// Stream index of replica `r` at size `n`.
pub fn replica_stream(n: usize, r: usize) -> u64 {
    ((n as u64) << 32) | r as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in ExperimentId::ALL {
            assert_eq!(id.to_string().parse::<ExperimentId>().unwrap(), id);
        }
        assert_eq!("e3".parse::<ExperimentId>().unwrap(), ExperimentId::E3);
        assert!("E10".parse::<ExperimentId>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        for id in ExperimentId::ALL {
            let cfg = ExperimentConfig::defaults(id);
            assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        }
        let text = r#"
            id = "E3"
            sizes = [64, 128]
            replicas = 10
            model = { kind = "next_neighbor", beta = 0.5 }
            [monitor]
            eps_ap = 0.5
            eps_rn = 0.02
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.sizes, vec![64, 128]);
        assert_eq!(cfg.params, ExperimentParams::default());
        assert!(ExperimentConfig::from_toml(&text.replace("[64, 128]", "[63]")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("bogus = 1\n{text}")).is_err());
        assert!(ExperimentConfig::from_toml(&format!("{text}\nbogus = 1")).is_err());
    }

    #[test]
    fn report_persistence() {
        let cfg = ExperimentConfig::defaults(ExperimentId::E7);
        let mut r = Report::new(&cfg);
        r.checks.push(Check::new("x", 1.0, "<= 2", 5, true).with_se(0.1));
        let mut t = Table::new("cells", &["N", "value"]);
        t.push(vec![128.0, 0.5]);
        r.tables.push(t);
        let dir = tempfile::tempdir().unwrap();
        r.write(&dir.path().join("e7")).unwrap();
        let back = collect_reports(dir.path()).unwrap();
        assert_eq!(back, vec![r.clone()]);
        let csv = std::fs::read_to_string(dir.path().join("e7/cells.csv")).unwrap();
        assert_eq!(csv, "N,value\n128,0.5\n");
        let mut long = Table::new("long", &["N", "seed", "statistic", "value"]);
        long.push_statistic(64, 3, "t_st", 0.25);
        long.write_csv(&dir.path().join("long.csv")).unwrap();
        assert_eq!(std::fs::read_to_string(dir.path().join("long.csv")).unwrap(), "N,seed,statistic,value\n64,3,t_st,0.25\n");
        assert!(r.passed());
        assert!(r.summary().contains("PASS"));
    }
}
