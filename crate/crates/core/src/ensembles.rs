//! Grand-canonical and canonical expectations, the model's flux functionals
//! and renormalization constants, density-conditioned expectations across
//! scales, and spatial averaging.
//!
//! Under the product Bernoulli measure of density σ a monomial of `r`
//! distinct spins has mean σ^r, so grand-canonical means are polynomials in
//! σ read off the multilinear coefficients. Under the uniform measure on
//! configurations of `n` sites with `k` plus spins the mean of such a monomial
//! depends only on `r` as well — it is a signed hypergeometric sum — which
//! makes canonical expectations exact for blocks of any length.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_binomial;

use crate::lattice::{check_gradient_condition, Configuration, LocalFunctional, DEFAULT_WINDOW_CAP};
use crate::{Error, Result};

/// A value with its Monte Carlo standard error (zero for exact results).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { value, std_error: 0.0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        Self { value: mean, std_error: (var / n).sqrt() }
    }
}

/// `p(σ) = Σ_k coeffs[k] σ^k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaPolynomial {
    pub coeffs: Vec<f64>,
}

impl SigmaPolynomial {
    pub fn eval(&self, sigma: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * sigma + c)
    }

    pub fn coeff(&self, k: usize) -> f64 {
        self.coeffs.get(k).copied().unwrap_or(0.0)
    }

    pub fn degree(&self) -> usize {
        self.coeffs.iter().rposition(|&c| c != 0.0).unwrap_or(0)
    }
}

/// Sum of coefficients per monomial degree; doubles as the σ-polynomial.
fn degree_profile(f: &LocalFunctional) -> Vec<f64> {
    let mut out = vec![0.0; f.degree() + 1];
    for &(m, c) in f.terms() {
        out[m.count_ones() as usize] += c;
    }
    out
}

pub fn sigma_expectation_poly(f: &LocalFunctional) -> SigmaPolynomial {
    SigmaPolynomial { coeffs: degree_profile(f) }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum EnsembleSpec {
    GrandCanonical { sigma: f64 },
    /// Uniform measure on configurations of the window `[a, b]` with exactly
    /// `plus` plus spins.
    Canonical { window: (i64, i64), plus: usize },
}

impl EnsembleSpec {
    pub fn grand_canonical(sigma: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&sigma) {
            return Err(Error::InvalidParameter(format!("density {sigma} outside [-1, 1]")));
        }
        Ok(Self::GrandCanonical { sigma })
    }

    /// Canonical measure at density σ; `σ·|W|` must be an integer with the
    /// parity of `|W|`.
    pub fn canonical(sigma: f64, window: (i64, i64)) -> Result<Self> {
        let n = window_len(window)?;
        let k2 = sigma * n as f64 + n as f64;
        let k2r = k2.round();
        if (k2 - k2r).abs() > 1e-9 || k2r < 0.0 || k2r > 2.0 * n as f64 || k2r as i64 % 2 != 0 {
            return Err(Error::EmptyHyperplane { sigma, sites: n });
        }
        Ok(Self::Canonical { window, plus: k2r as usize / 2 })
    }

    /// Canonical measure at the achievable density nearest to σ, with the
    /// absolute density snap.
    pub fn canonical_snapped(sigma: f64, window: (i64, i64)) -> Result<(Self, f64)> {
        let n = window_len(window)?;
        let plus = ((sigma.clamp(-1.0, 1.0) + 1.0) * n as f64 / 2.0).round() as usize;
        let spec = Self::Canonical { window, plus: plus.min(n) };
        Ok((spec, (spec.sigma() - sigma).abs()))
    }

    pub fn sigma(&self) -> f64 {
        match *self {
            Self::GrandCanonical { sigma } => sigma,
            Self::Canonical { window, plus } => {
                let n = (window.1 - window.0 + 1) as f64;
                (2.0 * plus as f64 - n) / n
            }
        }
    }
}

fn window_len(window: (i64, i64)) -> Result<usize> {
    if window.1 < window.0 {
        return Err(Error::InvalidParameter(format!("empty window {window:?}")));
    }
    Ok((window.1 - window.0 + 1) as usize)
}

/// How canonical expectations are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum CanonicalMethod {
    /// Enumeration within the window cap, hypergeometric sums beyond it.
    Auto,
    /// Fixed-popcount enumeration of the hyperplane; errors above the cap.
    Enumerate { cap: usize },
    /// Degree-profile hypergeometric sums (exact for any window).
    Hypergeometric,
    MonteCarlo { samples: usize, seed: u64 },
}

/// Exact expectation (grand-canonical polynomial, or canonical via
/// [`CanonicalMethod::Auto`]).
pub fn expect(f: &LocalFunctional, e: &EnsembleSpec) -> Result<f64> {
    expect_with(f, e, CanonicalMethod::Auto).map(|e| e.value)
}

pub fn expect_with(f: &LocalFunctional, e: &EnsembleSpec, method: CanonicalMethod) -> Result<Estimate> {
    match *e {
        EnsembleSpec::GrandCanonical { sigma } => Ok(Estimate::exact(sigma_expectation_poly(f).eval(sigma))),
        EnsembleSpec::Canonical { window, plus } => {
            let n = window_len(window)?;
            if plus > n {
                return Err(Error::EmptyHyperplane { sigma: e.sigma(), sites: n });
            }
            if let Some((a, b)) = f.support() {
                if a < window.0 || b > window.1 {
                    return Err(Error::SupportOutsideWindow { support: (a, b), window });
                }
            }
            match method {
                CanonicalMethod::Auto if n <= DEFAULT_WINDOW_CAP => {
                    Ok(Estimate::exact(enumerate_canonical(f, window, plus)))
                }
                CanonicalMethod::Auto | CanonicalMethod::Hypergeometric => {
                    Ok(Estimate::exact(hypergeometric_canonical(f, n, plus)))
                }
                CanonicalMethod::Enumerate { cap } => {
                    if n > cap {
                        return Err(Error::WindowCap { width: n, cap });
                    }
                    Ok(Estimate::exact(enumerate_canonical(f, window, plus)))
                }
                CanonicalMethod::MonteCarlo { samples, seed } => {
                    let mut rng = crate::dynamics::stream_rng(seed, 0);
                    Ok(sample_canonical(f, window, plus, samples, &mut rng))
                }
            }
        }
    }
}

/// Iterates all `n`-bit masks with exactly `ones` set bits (Gosper's hack).
fn for_each_combination(n: usize, ones: usize, mut visit: impl FnMut(u64)) {
    if ones > n {
        return;
    }
    if ones == 0 {
        visit(0);
        return;
    }
    let limit = 1u64 << n;
    let mut m = (1u64 << ones) - 1;
    while m < limit {
        visit(m);
        let c = m & m.wrapping_neg();
        let r = m + c;
        m = (((r ^ m) >> 2) / c) | r;
    }
}

fn enumerate_canonical(f: &LocalFunctional, window: (i64, i64), plus: usize) -> f64 {
    let n = (window.1 - window.0 + 1) as usize;
    let offset = if f.width() == 0 { 0 } else { (f.lo() - window.0) as u32 };
    let fmask = if f.width() == 0 { 0 } else { (1u64 << f.width()) - 1 };
    let mut total = 0.0;
    let mut count = 0u64;
    for_each_combination(n, n - plus, |minus| {
        total += f.eval_bits((minus >> offset) & fmask);
        count += 1;
    });
    total / count as f64
}

/// Mean of a product of `r` distinct spins under the uniform measure on
/// `n`-site configurations with `k` plus spins: `Σ_m P(m)(−1)^{r−m}`, where
/// `m` (pluses among the `r` sites) is hypergeometric.
pub fn canonical_monomial_mean(r: usize, k: usize, n: usize) -> f64 {
    assert!(r <= n && k <= n);
    if r == 0 {
        return 1.0;
    }
    let (r64, k64, n64) = (r as u64, k as u64, n as u64);
    let lo = (r + k).saturating_sub(n);
    let hi = r.min(k);
    let denom = ln_binomial(n64, k64);
    (lo..=hi)
        .map(|m| {
            let p = (ln_binomial(r64, m as u64) + ln_binomial(n64 - r64, k64 - m as u64) - denom).exp();
            if (r - m) % 2 == 0 {
                p
            } else {
                -p
            }
        })
        .sum()
}

fn hypergeometric_canonical(f: &LocalFunctional, n: usize, plus: usize) -> f64 {
    degree_profile(f)
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0.0)
        .map(|(r, &c)| c * canonical_monomial_mean(r, plus, n))
        .sum()
}

/// Monte Carlo under the canonical measure via partial Fisher–Yates shuffles.
pub fn sample_canonical<R: Rng>(
    f: &LocalFunctional,
    window: (i64, i64),
    plus: usize,
    samples: usize,
    rng: &mut R,
) -> Estimate {
    let n = (window.1 - window.0 + 1) as usize;
    // By exchangeability any f.width() sites of the window share one joint
    // law, so only that many positions are drawn.
    let mut spins: Vec<i8> = (0..n).map(|i| if i < plus { 1 } else { -1 }).collect();
    let xs: Vec<f64> = (0..samples)
        .map(|_| {
            for i in 0..f.width() {
                let j = rng.random_range(i..n);
                spins.swap(i, j);
            }
            let bits = (0..f.width()).fold(0u64, |b, i| if spins[i] < 0 { b | 1 << i } else { b });
            f.eval_bits(bits)
        })
        .collect();
    Estimate::from_samples(&xs)
}

/// Monte Carlo under the product Bernoulli measure of density σ.
pub fn sample_grand_canonical<R: Rng>(f: &LocalFunctional, sigma: f64, samples: usize, rng: &mut R) -> Estimate {
    let p_minus = (1.0 - sigma) / 2.0;
    let xs: Vec<f64> = (0..samples)
        .map(|_| {
            let bits = (0..f.width()).fold(0u64, |b, i| if rng.random::<f64>() < p_minus { b | 1 << i } else { b });
            f.eval_bits(bits)
        })
        .collect();
    Estimate::from_samples(&xs)
}

/// Environment functionals available by name in configurations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelChoice {
    Zero,
    Constant { c: f64 },
    /// `β(η_{−1} + η_2)`
    NextNeighbor { beta: f64 },
    /// `γ(η_{−2} + η_3)`
    Wide { gamma: f64 },
    /// `c + β(η_{−1} + η_2) + γ(η_{−2} + η_3)`
    Mixed { c: f64, beta: f64, gamma: f64 },
    Custom { functional: LocalFunctional },
}

impl ModelChoice {
    pub fn functional(&self) -> LocalFunctional {
        let pair = |a: i64, b: i64, s: f64| LocalFunctional::from_terms([(vec![a], s), (vec![b], s)]);
        match self {
            Self::Zero => LocalFunctional::zero(),
            Self::Constant { c } => LocalFunctional::constant(*c),
            Self::NextNeighbor { beta } => pair(-1, 2, *beta),
            Self::Wide { gamma } => pair(-2, 3, *gamma),
            Self::Mixed { c, beta, gamma } => {
                pair(-1, 2, *beta).add(&pair(-2, 3, *gamma)).add_constant(*c)
            }
            Self::Custom { functional } => functional.clone(),
        }
    }
}

/// The example library used by tests and experiments.
pub fn example_library() -> Vec<ModelChoice> {
    vec![
        ModelChoice::Zero,
        ModelChoice::Constant { c: 0.8 },
        ModelChoice::NextNeighbor { beta: 0.5 },
        ModelChoice::Wide { gamma: 0.3 },
        ModelChoice::Mixed { c: -0.4, beta: 0.25, gamma: 0.5 },
    ]
}

/// The flux functionals and renormalization constants derived from an
/// environment functional `d`.
#[derive(Clone, Debug)]
pub struct ModelFunctionals {
    pub d: LocalFunctional,
    /// Gradient-condition witness: `d(η)(η₁−η₀) = w(τ₁η) − w(η)`.
    pub witness: LocalFunctional,
    /// `½d − ½d·η₀η₁`
    pub q: LocalFunctional,
    /// `q` shifted by `−2ℓ_d`, supported strictly left of 0.
    pub qtilde: LocalFunctional,
    /// `q̃` minus its constant and linear grand-canonical parts.
    pub qbar: LocalFunctional,
    /// `−q̃ · Σ_{y=0}^{2ℓ_d−1} η_{−y}`
    pub stilde: LocalFunctional,
    pub s: LocalFunctional,
    pub ell_d: i64,
    pub dbar: f64,
    pub r21: f64,
    pub r22: f64,
    pub r23: f64,
    /// `max_η |d(η)|`
    pub d_sup: f64,
}

impl ModelFunctionals {
    /// Derives every functional from `d`; fails if the gradient condition
    /// has no solution.
    pub fn new(d: &LocalFunctional) -> Result<Self> {
        let witness = check_gradient_condition(d, DEFAULT_WINDOW_CAP)?;
        let Some(witness) = witness else {
            // A shift-gradient has zero grand-canonical mean at every σ, so the
            // σ-polynomial of d(η₁−η₀) certifies the failure.
            let g = d.mul(&LocalFunctional::spin(1).sub(&LocalFunctional::spin(0)));
            let residual = sigma_expectation_poly(&g).coeffs.iter().map(|c| c.abs()).sum();
            return Err(Error::GradientConditionFails { residual });
        };
        let ell_d = match d.support() {
            None => 1,
            Some((a, b)) => a.abs().max(b.abs()).max(1),
        };
        let eta01 = LocalFunctional::monomial(&[0, 1], 1.0);
        let q = d.scale(0.5).sub(&d.mul(&eta01).scale(0.5));
        let qtilde = q.shift(-2 * ell_d);
        let qt_poly = sigma_expectation_poly(&qtilde);
        let dbar = qt_poly.coeff(1);
        let qbar = qtilde.add_constant(-qt_poly.coeff(0)).sub(&LocalFunctional::spin(0).scale(dbar));
        let block = LocalFunctional::from_terms((0..2 * ell_d).map(|y| (vec![-y], 1.0)));
        let stilde = qtilde.mul(&block).scale(-1.0);
        let r23 = stilde.constant_term();
        let s = stilde.add_constant(-r23);
        Ok(Self {
            d_sup: d.sup_norm(DEFAULT_WINDOW_CAP),
            d: d.clone(),
            witness: witness.w,
            r21: -q.constant_term(),
            r22: dbar / 2.0,
            r23,
            q,
            qtilde,
            qbar,
            stilde,
            s,
            ell_d,
            dbar,
        })
    }

    /// `R = N/2 − 1/24 + N^{1/2}·flux_counterterm() + R22 + R23`.
    pub fn renormalization(&self, n: usize) -> f64 {
        let nf = n as f64;
        nf / 2.0 - 1.0 / 24.0 + nf.sqrt() * self.flux_counterterm() + self.r22 + self.r23
    }

    /// Coefficient of `N^{1/2}` in `R`: the equilibrium flux `E₀q̃ = −R21`.
    ///
    /// The `d`-asymmetry contributes `−N^{1/2}q_x Z_x` to the generator, so
    /// its constant part is cancelled only by `+N^{1/2}E₀q̃`; with `R21`
    /// itself the remainder carries a constant `2N^{1/2}R21`.
    pub fn flux_counterterm(&self) -> f64 {
        -self.r21
    }

    /// Drift coefficient `c` of the heat operator `½Δ^{!!} + c∇^!_{−1}` that
    /// the Gärtner transform of this model solves up to small errors.
    ///
    /// The exact generator action pins `c = −d̄` (with `R22 = +d̄/2`); the
    /// opposite sign leaves an order-`N^{1/2}` non-gradient remainder.
    pub fn heat_drift(&self) -> f64 {
        -self.dbar
    }

    /// Rate positivity `N^{1/2} ≥ 1 + N^{−1/2} max|d|`.
    pub fn check_rates(&self, n: usize) -> Result<()> {
        let nf = n as f64;
        let worst = nf * nf / 2.0 - nf.powf(1.5) / 2.0 * (1.0 + self.d_sup / nf.sqrt());
        if worst < 0.0 {
            return Err(Error::NegativeRate { n, rate: worst });
        }
        Ok(())
    }

    pub fn report(&self) -> ModelReport {
        ModelReport {
            d: self.d.clone(),
            witness: self.witness.clone(),
            ell_d: self.ell_d,
            dbar: self.dbar,
            r21: self.r21,
            r22: self.r22,
            r23: self.r23,
            q_poly: sigma_expectation_poly(&self.q),
            qtilde_poly: sigma_expectation_poly(&self.qtilde),
            qbar_poly: sigma_expectation_poly(&self.qbar),
            s_poly: sigma_expectation_poly(&self.s),
        }
    }
}

/// Builds the model and checks rate positivity at size `n`.
pub fn build_model(d: &LocalFunctional, n: usize) -> Result<ModelFunctionals> {
    let m = ModelFunctionals::new(d)?;
    m.check_rates(n)?;
    Ok(m)
}

/// JSON snapshot of a model's constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelReport {
    pub d: LocalFunctional,
    pub witness: LocalFunctional,
    pub ell_d: i64,
    pub dbar: f64,
    pub r21: f64,
    pub r22: f64,
    pub r23: f64,
    pub q_poly: SigmaPolynomial,
    pub qtilde_poly: SigmaPolynomial,
    pub qbar_poly: SigmaPolynomial,
    pub s_poly: SigmaPolynomial,
}

/// `⌈N^δ⌉`, robust to floating-point noise at exact powers.
pub fn scale_len(n: usize, delta: f64) -> usize {
    ((n as f64).powf(delta) - 1e-9).ceil().max(1.0) as usize
}

/// Mean of `η_{y−w}` over `0 ≤ w ≤ len` (`len + 1` sites).
pub fn local_density_block(cfg: &Configuration, len: usize, y: i64) -> f64 {
    let s: i64 = (0..=len as i64).map(|w| cfg.get(y - w) as i64).sum();
    s as f64 / (len + 1) as f64
}

/// Empirical density over the block `y − [0, ⌈N^δ⌉]`.
pub fn local_density(cfg: &Configuration, delta: f64, y: i64) -> f64 {
    local_density_block(cfg, scale_len(cfg.n(), delta), y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScaleKind {
    /// Canonical expectation of q̄ on the block, conditioned on its density.
    Canonical,
    /// Grand-canonical mean of q̄ at the block density.
    GrandCanonical,
    /// `q̄ − ` canonical expectation.
    Fluctuation,
    /// Difference of canonical expectations at scales δ and δ + ε.
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleValue {
    pub value: f64,
    pub std_error: f64,
    /// Distance between the requested density and the achievable one used.
    pub snap: f64,
}

/// Canonical expectation of `f` (window relative to the block end) over the
/// block `[−len, 0]` at the achievable density nearest to `sigma`.
pub fn canonical_block_expectation(f: &LocalFunctional, len: usize, sigma: f64) -> Result<ScaleValue> {
    let window = (-(len as i64), 0);
    let (spec, snap) = EnsembleSpec::canonical_snapped(sigma, window)?;
    let e = expect_with(f, &spec, CanonicalMethod::Auto)?;
    Ok(ScaleValue { value: e.value, std_error: e.std_error, snap })
}

/// Canonical expectation of `f` given the observed block configuration:
/// the block `y − [0, len]` of `cfg`.
fn observed_canonical(f: &LocalFunctional, cfg: &Configuration, y: i64, len: usize) -> Result<f64> {
    let window = (-(len as i64), 0);
    let plus = (0..=len as i64).filter(|&w| cfg.get(y - w) > 0).count();
    expect(f, &EnsembleSpec::Canonical { window, plus })
}

pub fn scale_expectation(
    kind: ScaleKind,
    model: &ModelFunctionals,
    cfg: &Configuration,
    y: i64,
    delta: f64,
    eps: f64,
) -> Result<ScaleValue> {
    let n = cfg.n();
    let len = scale_len(n, delta);
    let f = &model.qbar;
    let exact = |value| Ok(ScaleValue { value, std_error: 0.0, snap: 0.0 });
    match kind {
        ScaleKind::GrandCanonical => {
            exact(sigma_expectation_poly(f).eval(local_density_block(cfg, len, y)))
        }
        ScaleKind::Canonical => exact(observed_canonical(f, cfg, y, len)?),
        ScaleKind::Fluctuation => exact(f.eval_at(cfg, y) - observed_canonical(f, cfg, y, len)?),
        ScaleKind::Transfer => {
            let upper = scale_len(n, delta + eps);
            exact(observed_canonical(f, cfg, y, len)? - observed_canonical(f, cfg, y, upper)?)
        }
    }
}

/// Spatial and temporal averaging parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingSpec {
    /// Number of spatial translates.
    pub l_av: usize,
    /// Time span of the average in macroscopic units.
    pub t_av: f64,
    /// Distance between consecutive translates.
    pub stride: usize,
    /// Cutoff exponent: averages above `N^{ε} l_av^{−1/2} ‖f‖_∞` are removed.
    pub eps_ap: f64,
}

/// Smallest stride at which translates of `f` have pairwise disjoint supports.
pub fn disjointness_length(f: &LocalFunctional) -> usize {
    f.width().max(1)
}

/// A spatial average split by the cutoff: `average = kept + removed`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialAverage {
    pub average: f64,
    pub kept: f64,
    pub removed: f64,
}

/// Mean of `f(τ_{y − stride·w} η)` over `w = 1..l_av` (`l_av = 0` means `f`
/// at `y` itself), with the cutoff split.
pub fn spatial_average(f: &LocalFunctional, cfg: &Configuration, y: i64, spec: &AveragingSpec) -> Result<SpatialAverage> {
    let width = disjointness_length(f);
    if spec.l_av > 1 && spec.stride < width {
        return Err(Error::OverlappingTranslates { stride: spec.stride, width });
    }
    let average = if spec.l_av == 0 {
        f.eval_at(cfg, y)
    } else {
        let stride = spec.stride as i64;
        (1..=spec.l_av as i64).map(|w| f.eval_at(cfg, y - stride * w)).sum::<f64>() / spec.l_av as f64
    };
    let threshold = (cfg.n() as f64).powf(spec.eps_ap) * (spec.l_av.max(1) as f64).powf(-0.5)
        * f.sup_norm(DEFAULT_WINDOW_CAP);
    let kept = if average.abs() > threshold { 0.0 } else { average };
    Ok(SpatialAverage { average, kept, removed: average - kept })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn lf(terms: &[(&[i64], f64)]) -> LocalFunctional {
        LocalFunctional::from_terms(terms.iter().map(|(s, c)| (s.to_vec(), *c)))
    }

    #[test]
    fn elementary_expectations() {
        let gc = EnsembleSpec::grand_canonical(0.3).unwrap();
        assert!((expect(&LocalFunctional::spin(0), &gc).unwrap() - 0.3).abs() < 1e-15);
        assert!((expect(&lf(&[(&[0, 1], 1.0)]), &gc).unwrap() - 0.09).abs() < 1e-15);
        let can = EnsembleSpec::canonical(0.0, (0, 1)).unwrap();
        assert_eq!(expect(&lf(&[(&[0, 1], 1.0)]), &can).unwrap(), -1.0);
    }

    #[test]
    fn empty_hyperplane_rejected() {
        assert!(matches!(EnsembleSpec::canonical(0.0, (0, 2)), Err(Error::EmptyHyperplane { .. })));
        assert!(matches!(EnsembleSpec::canonical(0.5, (0, 3)), Ok(EnsembleSpec::Canonical { plus: 3, .. })));
        let (spec, snap) = EnsembleSpec::canonical_snapped(0.1, (0, 2)).unwrap();
        assert!((spec.sigma() - 1.0 / 3.0).abs() < 1e-12 && (snap - (1.0 / 3.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn canonical_support_must_fit() {
        let can = EnsembleSpec::canonical(0.0, (0, 3)).unwrap();
        assert!(matches!(expect(&LocalFunctional::spin(5), &can), Err(Error::SupportOutsideWindow { .. })));
    }

    #[test]
    fn gosper_counts() {
        for n in 0..10 {
            for k in 0..=n {
                let mut c = 0u64;
                for_each_combination(n, k, |m| {
                    assert_eq!(m.count_ones() as usize, k);
                    c += 1;
                });
                let want = (ln_binomial(n as u64, k as u64)).exp().round() as u64;
                assert_eq!(c, want);
            }
        }
    }

    #[test]
    fn hypergeometric_matches_enumeration() {
        let f = lf(&[(&[], 0.2), (&[0], 1.0), (&[1, 3], -0.7), (&[0, 2, 5], 0.4), (&[0, 1, 2, 3, 4, 5], 1.3)]);
        for n in 6..=14 {
            for plus in 0..=n {
                let w = (0, n as i64 - 1);
                let spec = EnsembleSpec::Canonical { window: w, plus };
                let e = expect_with(&f, &spec, CanonicalMethod::Enumerate { cap: 22 }).unwrap().value;
                let h = expect_with(&f, &spec, CanonicalMethod::Hypergeometric).unwrap().value;
                assert!((e - h).abs() < 1e-12, "n={n} k={plus}: {e} vs {h}");
            }
        }
    }

    #[test]
    fn canonical_monte_carlo_within_error() {
        let f = lf(&[(&[0, 1], 1.0), (&[2], 0.5)]);
        let spec = EnsembleSpec::Canonical { window: (0, 9), plus: 6 };
        let exact = expect(&f, &spec).unwrap();
        let mc = expect_with(&f, &spec, CanonicalMethod::MonteCarlo { samples: 20_000, seed: 5 }).unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.std_error, "{mc:?} vs {exact}");
    }

    #[test]
    fn canonical_projection_is_hypergeometric_mixture() {
        // Law of the spins on W' ⊂ W under the canonical measure on W equals
        // the mixture over the W' particle count of canonical measures on W'.
        let f = lf(&[(&[1], 0.3), (&[1, 2], -1.0), (&[2, 3, 4], 0.8), (&[1, 4], 0.25)]);
        for n in 5..=12usize {
            for k in 0..=n {
                let w = (0, n as i64 - 1);
                let direct = expect(&f, &EnsembleSpec::Canonical { window: w, plus: k }).unwrap();
                let sub = (1, 4);
                let s = 4usize;
                let denom = ln_binomial(n as u64, k as u64);
                let mut mix = 0.0;
                for m in k.saturating_sub(n - s)..=k.min(s) {
                    let p = (ln_binomial(s as u64, m as u64) + ln_binomial((n - s) as u64, (k - m) as u64) - denom).exp();
                    mix += p * expect(&f, &EnsembleSpec::Canonical { window: sub, plus: m }).unwrap();
                }
                assert!((direct - mix).abs() < 1e-12, "n={n} k={k}");
            }
        }
    }

    #[test]
    fn model_constant_environment() {
        let c = 0.6;
        let m = ModelFunctionals::new(&LocalFunctional::constant(c)).unwrap();
        assert_eq!(m.dbar, 0.0);
        assert!((m.r21 + c / 2.0).abs() < 1e-15);
        assert_eq!(m.r23, 0.0);
        let p = sigma_expectation_poly(&m.q);
        assert!((p.coeff(0) - c / 2.0).abs() < 1e-15 && (p.coeff(2) + c / 2.0).abs() < 1e-15 && p.coeff(1) == 0.0);
    }

    /// Oracle: the monomial expansion of q̃ for β(η_{−1}+η_2) done by hand,
    /// and E_0 s̃ by brute-force enumeration.
    #[test]
    fn model_next_neighbor_environment() {
        let beta = 0.5;
        let m = ModelFunctionals::new(&ModelChoice::NextNeighbor { beta }.functional()).unwrap();
        assert_eq!(m.ell_d, 2);
        // q = β/2 (η_{−1}+η_2)(1 − η_0η_1), shifted by −4.
        let qt = lf(&[(&[-5], beta / 2.0), (&[-2], beta / 2.0), (&[-5, -4, -3], -beta / 2.0), (&[-4, -3, -2], -beta / 2.0)]);
        assert_eq!(m.qtilde, qt);
        assert_eq!(m.dbar, beta);
        assert_eq!(m.r21, 0.0);
        assert!((m.r23 + beta / 2.0).abs() < 1e-15, "{}", m.r23);
        // E_0 s̃ by brute-force enumeration over the 6-site window.
        let mut acc = 0.0;
        for bits in 0u64..64 {
            let cfg = Configuration::new((0..6).map(|i| if bits >> i & 1 == 1 { -1 } else { 1 }).collect()).unwrap();
            acc += m.stilde.eval_at(&cfg, 5); // window [-5,0] → sites 0..5
        }
        assert!((acc / 64.0 - m.r23).abs() < 1e-14);
    }

    #[test]
    fn zero_environment_degenerates() {
        let m = ModelFunctionals::new(&LocalFunctional::zero()).unwrap();
        assert!(m.q.is_zero() && m.qbar.is_zero() && m.s.is_zero());
        assert!((m.renormalization(64) - (32.0 - 1.0 / 24.0)).abs() < 1e-12);
    }

    #[test]
    fn single_spin_environment_rejected() {
        assert!(matches!(ModelFunctionals::new(&LocalFunctional::spin(0)), Err(Error::GradientConditionFails { .. })));
    }

    #[test]
    fn qbar_has_no_constant_or_linear_part() {
        for choice in example_library() {
            let m = ModelFunctionals::new(&choice.functional()).unwrap();
            let p = sigma_expectation_poly(&m.qbar);
            assert!(p.coeff(0).abs() <= 1e-12 && p.coeff(1).abs() <= 1e-12, "{choice:?}");
            assert!(m.qbar.support().is_none_or(|(a, b)| a >= -3 * m.ell_d && b <= 0));
            assert!(m.qtilde.support().is_none_or(|(_, b)| b < 0));
            // the witness makes E_σ[d (η₁−η₀)] vanish identically
            let g = m.d.mul(&LocalFunctional::spin(1).sub(&LocalFunctional::spin(0)));
            assert!(sigma_expectation_poly(&g).coeffs.iter().all(|c| c.abs() < 1e-12));
        }
    }

    #[test]
    fn rate_positivity() {
        let m = ModelFunctionals::new(&LocalFunctional::constant(3.0)).unwrap();
        assert!(m.check_rates(4).is_err());
        assert!(m.check_rates(64).is_ok());
        assert!(build_model(&LocalFunctional::constant(3.0), 16).is_ok());
    }

    #[test]
    fn report_serializes() {
        let m = ModelFunctionals::new(&ModelChoice::NextNeighbor { beta: 0.5 }.functional()).unwrap();
        let v = serde_json::to_value(m.report()).unwrap();
        assert_eq!(v["dbar"], 0.5);
        assert_eq!(v["d"]["support"], serde_json::json!([-1, 2]));
    }

    #[test]
    fn local_density_examples() {
        assert_eq!(local_density(&Configuration::uniform(16, 1), 0.5, 3), 1.0);
        // alternating spins over an odd number of sites
        let flat = Configuration::alternating(16);
        let a = local_density_block(&flat, 4, 4);
        assert!((a - 1.0 / 5.0).abs() < 1e-15);
        let b = local_density_block(&flat, 4, 5);
        assert!((b + 1.0 / 5.0).abs() < 1e-15);
        // whole torus plus the wrapped endpoint counted twice
        let cfg = Configuration::zero_sum(vec![1, -1, -1, 1, 1, -1, 1, -1]).unwrap();
        let direct = (0..=8).map(|w| cfg.get(2 - w) as f64).sum::<f64>() / 9.0;
        assert_eq!(local_density_block(&cfg, 8, 2), direct);
        assert_eq!(direct, cfg.get(2) as f64 / 9.0);
    }

    #[test]
    fn scale_operators() {
        let c = 0.8;
        let m = ModelFunctionals::new(&LocalFunctional::constant(c)).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 64;
        let spins: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
        let cfg = Configuration::new(spins).unwrap();
        for y in [0i64, 7, 33] {
            let delta = 0.5;
            let a = local_density(&cfg, delta, y);
            let gc = scale_expectation(ScaleKind::GrandCanonical, &m, &cfg, y, delta, 0.2).unwrap().value;
            assert!((gc + c / 2.0 * a * a).abs() < 1e-12);
            let can = scale_expectation(ScaleKind::Canonical, &m, &cfg, y, delta, 0.2).unwrap().value;
            let fl = scale_expectation(ScaleKind::Fluctuation, &m, &cfg, y, delta, 0.2).unwrap().value;
            assert!((can + fl - m.qbar.eval_at(&cfg, y)).abs() < 1e-12);
            // telescoping over a ladder of ε-steps
            let eps = 0.1;
            let mut sum = 0.0;
            let mut dlt = 0.4;
            for _ in 0..4 {
                sum += scale_expectation(ScaleKind::Transfer, &m, &cfg, y, dlt, eps).unwrap().value;
                dlt += eps;
            }
            let bottom = scale_expectation(ScaleKind::Canonical, &m, &cfg, y, 0.4, 0.0).unwrap().value;
            let top = scale_expectation(ScaleKind::Canonical, &m, &cfg, y, dlt, 0.0).unwrap().value;
            assert!((sum - (bottom - top)).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_conventions() {
        let cfg = Configuration::alternating(32);
        let c = LocalFunctional::constant(2.5);
        for l_av in [0usize, 1, 5] {
            let spec = AveragingSpec { l_av, t_av: 0.0, stride: 1, eps_ap: 0.1 };
            let a = spatial_average(&c, &cfg, 3, &spec).unwrap();
            assert_eq!(a.average, 2.5);
            assert_eq!(a.kept + a.removed, a.average);
        }
        let f = LocalFunctional::monomial(&[0, 1, 2], 1.0);
        let spec = AveragingSpec { l_av: 4, t_av: 0.0, stride: 2, eps_ap: 0.1 };
        assert!(matches!(spatial_average(&f, &cfg, 0, &spec), Err(Error::OverlappingTranslates { .. })));
        let one = AveragingSpec { l_av: 1, t_av: 0.0, stride: 3, eps_ap: 0.1 };
        assert_eq!(spatial_average(&f, &cfg, 5, &one).unwrap().average, f.eval_at(&cfg, 2));
        // a large average is removed by the cutoff
        let s = LocalFunctional::spin(0);
        let tiny = AveragingSpec { l_av: 16, t_av: 0.0, stride: 2, eps_ap: 0.0 };
        let a = spatial_average(&s, &cfg, 0, &tiny).unwrap();
        assert_eq!(a.average, 1.0);
        assert_eq!((a.kept, a.removed), (0.0, 1.0));
    }

    fn arb_functional() -> impl Strategy<Value = LocalFunctional> {
        prop::collection::vec((prop::collection::vec(-3i64..4, 0..4), -2.0f64..2.0), 1..5)
            .prop_map(LocalFunctional::from_terms)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn grand_canonical_monte_carlo_agrees(f in arb_functional(), sigma_i in -9i32..=9, seed in 0u64..1000) {
            let sigma = sigma_i as f64 / 10.0;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mc = sample_grand_canonical(&f, sigma, 4000, &mut rng);
            let exact = sigma_expectation_poly(&f).eval(sigma);
            prop_assert!((mc.value - exact).abs() <= 4.0 * mc.std_error + 1e-12, "{:?} vs {}", mc, exact);
        }

        #[test]
        fn shift_invariance(f in arb_functional(), k in -20i64..20, sigma in -1.0f64..1.0) {
            let gc = EnsembleSpec::grand_canonical(sigma).unwrap();
            prop_assert_eq!(expect(&f, &gc).unwrap(), expect(&f.shift(k), &gc).unwrap());
        }

        #[test]
        fn sigma_poly_degree_bounded(f in arb_functional()) {
            let p = sigma_expectation_poly(&f);
            prop_assert!(p.degree() <= f.width());
        }
    }
}
