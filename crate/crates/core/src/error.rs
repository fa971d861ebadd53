use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("spin at site {site} is {value}; spins must be +1 or -1")]
    InvalidSpin { site: usize, value: i64 },
    #[error("torus size {0} is odd; zero-sum configurations need an even size")]
    OddSize(usize),
    #[error("spin sum is {0}; a zero-sum configuration is required")]
    NonZeroSum(i64),
    #[error("window of {width} sites exceeds the cap of {cap}")]
    WindowCap { width: usize, cap: usize },
    #[error("functional support {support:?} is not contained in the window {window:?}")]
    SupportOutsideWindow { support: (i64, i64), window: (i64, i64) },
    #[error("canonical hyperplane is empty: density {sigma} on {sites} sites")]
    EmptyHyperplane { sigma: f64, sites: usize },
    #[error("gradient condition fails for the environment functional (residual {residual:.3e})")]
    GradientConditionFails { residual: f64 },
    #[error("negative jump rate {rate:.6e} at N = {n}; the environment is too strong for this size")]
    NegativeRate { n: usize, rate: f64 },
    #[error("translates at stride {stride} overlap a support of width {width}")]
    OverlappingTranslates { stride: usize, width: usize },
    #[error("end time {end} precedes start time {start}")]
    TimeOrder { start: f64, end: f64 },
    #[error("non-positive value {0} where a positive one is required")]
    NonPositive(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("explicit step is unstable: dt = {dt:.3e} exceeds {limit:.3e}")]
    Unstable { dt: f64, limit: f64 },
    #[error("positivity lost after {halvings} step halvings at t = {t}")]
    PositivityLost { halvings: u32, t: f64 },
    #[error("mismatched sizes: {0}")]
    SizeMismatch(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
