//! Numerical checks for the magnitude and variance inequalities of weight
//! averaging and for the output-norm/output-variance bounds of random
//! fully connected networks.
//!
//! Deterministic inequalities are asserted exactly. Probabilistic ones are
//! estimated by Monte Carlo over seeded streams (one stream per trial, so
//! results do not depend on scheduling) and compared with a one-sided
//! tolerance of three binomial standard errors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::Activation;
use crate::tensor::{
    dot, matvec, sample_gaussian, sample_unit_vector, spectral_norm, stats, stats_of, RngStream, Tensor,
};

/// Power-iteration budget used whenever a bound needs `s₁(W)`.
pub const SPECTRAL_ITERS: usize = 5_000;
pub const SPECTRAL_TOL: f64 = 1e-13;
/// Relative slack for comparisons against a power-iteration estimate of `s₁`,
/// which approaches the true value from below.
pub const CHAIN_REL_SLACK: f64 = 1e-9;

/// One bound-vs-measurement record, the unit of CSV and text output.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub check: String,
    /// Free-form parameter label, e.g. `"tau=2;m=3;N=32"`.
    pub params: String,
    pub bound_value: f64,
    pub empirical: f64,
    pub violation_rate: f64,
    /// Probability with which the bound is guaranteed (1 for exact inequalities).
    pub guaranteed_prob: f64,
    /// Whether the check passed at its tolerance.
    pub holds: bool,
    /// True for inequalities that must never fail; these gate the exit code.
    pub exact: bool,
}

impl BoundReport {
    pub fn holds_rate(&self) -> f64 {
        1.0 - self.violation_rate
    }

    pub fn to_text(&self) -> String {
        format!(
            "{:<22} {:<28} bound={:<14.6e} empirical={:<14.6e} violation_rate={:<8.5} guaranteed={:<8.5} {}{}",
            self.check,
            self.params,
            self.bound_value,
            self.empirical,
            self.violation_rate,
            self.guaranteed_prob,
            if self.holds { "OK" } else { "FAIL" },
            if self.exact { " (exact)" } else { "" },
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundConfig {
    pub tau: f64,
    /// Universal constant in the singular-value tail bound.
    pub c_s: f64,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub sigma_w: f64,
    pub sigma_b: f64,
    pub trials: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            c_s: 1.0,
            depth: 3,
            width: 32,
            activation: Activation::Relu,
            sigma_w: 0.1,
            sigma_b: 0.1,
            trials: 1000,
            seed: 0,
        }
    }
}

impl BoundConfig {
    pub fn lipschitz(&self) -> f64 {
        self.activation.lipschitz()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::domain(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.trials == 0 || self.depth == 0 || self.width == 0 {
            return Err(Error::domain("trials, depth and width must be >= 1"));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_b >= 0.0 && self.c_s >= 0.0) {
            return Err(Error::domain("sigma_w, sigma_b and c_s must be >= 0"));
        }
        Ok(())
    }
}

/// `(1 − 2e^{−τ²})^m`, clamped to `[0, 1]`.
pub fn guaranteed_prob(tau: f64, m: usize) -> f64 {
    (1.0 - 2.0 * (-tau * tau).exp()).max(0.0).powi(m as i32)
}

fn binomial_se(p: f64, n: usize) -> f64 {
    (p * (1.0 - p) / n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Max-norm of an average

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgMaxNorm {
    /// `‖(W₁ + W₂)/2‖_max`.
    pub averaged: f64,
    /// `(‖W₁‖_max + ‖W₂‖_max)/2`.
    pub mean_of_norms: f64,
    /// `max(‖W₁‖_max, ‖W₂‖_max)`.
    pub max_of_norms: f64,
}

impl AvgMaxNorm {
    pub fn holds(&self) -> bool {
        self.averaged <= self.mean_of_norms && self.mean_of_norms <= self.max_of_norms
    }
}

pub fn check_avg_max_norm(w1: &Tensor, w2: &Tensor) -> Result<AvgMaxNorm> {
    let avg = w1.zip_map(w2, "check_avg_max_norm", |a, b| (a + b) / 2.0)?;
    let (m1, m2) = (w1.max_abs(), w2.max_abs());
    Ok(AvgMaxNorm {
        averaged: avg.max_abs(),
        mean_of_norms: (m1 + m2) / 2.0,
        max_of_norms: m1.max(m2),
    })
}

/// Runs [`check_avg_max_norm`] on `pairs` random matrix pairs of random shape,
/// scale and offset. `flip` inverts the inequality (gate self-test only).
pub fn fuzz_avg_max_norm(pairs: usize, seed: u64, flip: bool) -> Result<BoundReport> {
    let mut violations = 0;
    let mut worst_ratio = 0.0_f64;
    let mut rng = RngStream::new(seed, 0xA5A5);
    for _ in 0..pairs {
        let shape = [1 + rng.below(12), 1 + rng.below(12)];
        let s1 = 10f64.powf(rng.uniform(-3.0, 3.0));
        let s2 = 10f64.powf(rng.uniform(-3.0, 3.0));
        let (o1, o2) = (rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0));
        let w1 = sample_gaussian(&mut rng, &shape, o1, s1)?;
        let w2 = sample_gaussian(&mut rng, &shape, o2, s2)?;
        let r = check_avg_max_norm(&w1, &w2)?;
        let ok = if flip { !r.holds() } else { r.holds() };
        if !ok {
            violations += 1;
        }
        if r.max_of_norms > 0.0 {
            worst_ratio = worst_ratio.max(r.averaged / r.max_of_norms);
        }
    }
    Ok(BoundReport {
        check: "avg_max_norm".into(),
        params: format!("pairs={pairs}"),
        bound_value: 1.0,
        empirical: worst_ratio,
        violation_rate: violations as f64 / pairs as f64,
        guaranteed_prob: 1.0,
        holds: violations == 0,
        exact: true,
    })
}

// ---------------------------------------------------------------------------
// Variance of an average

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AvgVariance {
    /// `¼(σ₁² + σ₂²)`.
    pub formula: f64,
    pub max_variance: f64,
    /// Population variance of `(W₁ + W₂)/2` over the sampled entries.
    pub empirical: f64,
    /// Standard error of `empirical` for Gaussian entries.
    pub std_error: f64,
}

impl AvgVariance {
    pub fn inequality_holds(&self) -> bool {
        self.formula <= self.max_variance
    }

    /// `|empirical − formula| ≤ 5 SE`.
    pub fn matches_formula(&self) -> bool {
        (self.empirical - self.formula).abs() <= 5.0 * self.std_error
    }
}

pub fn avg_variance_formula(sigma1_sq: f64, sigma2_sq: f64) -> f64 {
    0.25 * (sigma1_sq + sigma2_sq)
}

/// Compares `¼(σ₁² + σ₂²)` with the variance of the average of two
/// independent Gaussian matrices holding `entries` values each.
pub fn check_avg_variance(sigma1_sq: f64, sigma2_sq: f64, entries: usize, seed: u64) -> Result<AvgVariance> {
    if !(sigma1_sq >= 0.0 && sigma2_sq >= 0.0) {
        return Err(Error::domain("variances must be >= 0"));
    }
    if entries < 2 {
        return Err(Error::domain("need at least 2 entries"));
    }
    let formula = avg_variance_formula(sigma1_sq, sigma2_sq);
    let w1 = sample_gaussian(&mut RngStream::new(seed, 1), &[entries], 0.0, sigma1_sq.sqrt())?;
    let w2 = sample_gaussian(&mut RngStream::new(seed, 2), &[entries], 0.0, sigma2_sq.sqrt())?;
    let avg = w1.zip_map(&w2, "check_avg_variance", |a, b| (a + b) / 2.0)?;
    let empirical = stats(&avg)?.variance;
    Ok(AvgVariance {
        formula,
        max_variance: sigma1_sq.max(sigma2_sq),
        empirical,
        std_error: formula * (2.0 / (entries - 1) as f64).sqrt(),
    })
}

/// Exact check of `¼(σ₁² + σ₂²) ≤ max(σ₁², σ₂²)` on random pairs spanning
/// twelve orders of magnitude.
pub fn fuzz_variance_inequality(pairs: usize, seed: u64) -> BoundReport {
    let mut rng = RngStream::new(seed, 0x5A5A);
    let mut violations = 0;
    let mut worst = 0.0_f64;
    for _ in 0..pairs {
        let a = 10f64.powf(rng.uniform(-6.0, 6.0));
        let b = if rng.below(8) == 0 { 0.0 } else { 10f64.powf(rng.uniform(-6.0, 6.0)) };
        let f = avg_variance_formula(a, b);
        let m = a.max(b);
        if f > m {
            violations += 1;
        }
        if m > 0.0 {
            worst = worst.max(f / m);
        }
    }
    BoundReport {
        check: "avg_variance_ineq".into(),
        params: format!("pairs={pairs}"),
        bound_value: 1.0,
        empirical: worst,
        violation_rate: violations as f64 / pairs as f64,
        guaranteed_prob: 1.0,
        holds: violations == 0,
        exact: true,
    }
}

// ---------------------------------------------------------------------------
// Singular-value tail bound

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lemma1 {
    /// `√N + C_s K_s² (√N + τ)`.
    pub bound: f64,
    /// Largest row L2 norm.
    pub k_s: f64,
    /// `max(rows, cols)`.
    pub n: usize,
    /// Power-iteration estimate of `s₁(W)`.
    pub measured_s1: f64,
}

pub fn lemma1_value(n: usize, k_s: f64, tau: f64, c_s: f64) -> f64 {
    let root_n = (n as f64).sqrt();
    root_n + c_s * k_s * k_s * (root_n + tau)
}

pub fn lemma1_bound(w: &Tensor, tau: f64, c_s: f64) -> Result<Lemma1> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    let n = w.rows().max(w.cols());
    let k_s = w.max_row_norm();
    Ok(Lemma1 {
        bound: lemma1_value(n, k_s, tau, c_s),
        k_s,
        n,
        measured_s1: spectral_norm(w, SPECTRAL_ITERS, SPECTRAL_TOL)?,
    })
}

/// Fraction of `n × n` Gaussian matrices (entry std `sigma`) whose `s₁`
/// stays within the tail bound, against `1 − 2e^{−τ²}`.
pub fn lemma1_monte_carlo(n: usize, sigma: f64, tau: f64, c_s: f64, trials: usize, seed: u64) -> Result<BoundReport> {
    if trials == 0 {
        return Err(Error::domain("trials must be >= 1"));
    }
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let w = sample_gaussian(&mut RngStream::new(seed, t as u64), &[n, n], 0.0, sigma)?;
            lemma1_bound(&w, tau, c_s)
        })
        .collect::<Result<Vec<_>>>()?;
    let violations = results.iter().filter(|r| r.measured_s1 > r.bound).count();
    let p = guaranteed_prob(tau, 1);
    let rate = violations as f64 / trials as f64;
    Ok(BoundReport {
        check: "lemma1".into(),
        params: format!("tau={tau};N={n};sigma={sigma};C_s={c_s}"),
        bound_value: results.iter().map(|r| r.bound).sum::<f64>() / trials as f64,
        empirical: results.iter().map(|r| r.measured_s1).sum::<f64>() / trials as f64,
        violation_rate: rate,
        guaranteed_prob: p,
        holds: 1.0 - rate >= p - 3.0 * binomial_se(p, trials),
        exact: false,
    })
}

// ---------------------------------------------------------------------------
// Output-norm growth

/// One bias-free network evaluated against the output-norm bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Property1Sample {
    pub output_norm: f64,
    /// `(Lλ)^m ‖x‖₂`.
    pub bound: f64,
    pub lambda: f64,
    /// Per layer: `(‖y⁽ˡ⁾‖₂, L · s₁(W⁽ˡ⁾) · ‖y⁽ˡ⁻¹⁾‖₂)`.
    pub chain: Vec<(f64, f64)>,
}

impl Property1Sample {
    pub fn bound_holds(&self) -> bool {
        self.output_norm <= self.bound
    }

    /// The deterministic per-layer Lipschitz chain, up to [`CHAIN_REL_SLACK`].
    pub fn chain_holds(&self) -> bool {
        self.chain
            .iter()
            .all(|&(lhs, rhs)| lhs <= rhs * (1.0 + CHAIN_REL_SLACK))
    }
}

/// Propagates `x` through `y⁽ˡ⁾ = φ(W⁽ˡ⁾ y⁽ˡ⁻¹⁾)` for every layer and records
/// both the probabilistic bound and the per-layer chain. `N` is the largest
/// width (including the input) and `K_s` the largest row norm over all layers.
pub fn property1_sample(weights: &[Tensor], x: &[f64], activation: Activation, tau: f64, c_s: f64) -> Result<Property1Sample> {
    if weights.is_empty() {
        return Err(Error::domain("network needs at least one layer"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::domain(format!("tau must be > 0, got {tau}")));
    }
    let l = activation.lipschitz();
    let n = weights
        .iter()
        .map(|w| w.rows().max(w.cols()))
        .max()
        .unwrap_or(0);
    let k_s = weights.iter().map(Tensor::max_row_norm).fold(0.0, f64::max);
    let lambda = lemma1_value(n, k_s, tau, c_s);
    let x_norm = dot(x, x).sqrt();
    let mut y = x.to_vec();
    let mut chain = Vec::with_capacity(weights.len());
    for w in weights {
        let prev_norm = dot(&y, &y).sqrt();
        let s1 = spectral_norm(w, SPECTRAL_ITERS, SPECTRAL_TOL)?;
        y = matvec(w, &y)?.into_iter().map(|z| activation.apply(z)).collect();
        chain.push((dot(&y, &y).sqrt(), l * s1 * prev_norm));
    }
    Ok(Property1Sample {
        output_norm: dot(&y, &y).sqrt(),
        bound: (l * lambda).powi(weights.len() as i32) * x_norm,
        lambda,
        chain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Property1Report {
    pub trials: usize,
    pub bound_violation_rate: f64,
    pub guaranteed_prob: f64,
    /// `guaranteed_prob − 3·SE`, the pass threshold for the holds-rate.
    pub required_holds_rate: f64,
    pub chain_violations: usize,
    pub mean_bound: f64,
    pub mean_output_norm: f64,
}

impl Property1Report {
    pub fn holds_rate(&self) -> f64 {
        1.0 - self.bound_violation_rate
    }

    pub fn probabilistic_ok(&self) -> bool {
        self.holds_rate() >= self.required_holds_rate
    }

    pub fn reports(&self, cfg: &BoundConfig) -> Vec<BoundReport> {
        let params = format!(
            "tau={};m={};N={};C_s={};{}",
            cfg.tau, cfg.depth, cfg.width, cfg.c_s, cfg.activation
        );
        vec![
            BoundReport {
                check: "property1".into(),
                params: params.clone(),
                bound_value: self.mean_bound,
                empirical: self.mean_output_norm,
                violation_rate: self.bound_violation_rate,
                guaranteed_prob: self.guaranteed_prob,
                holds: self.probabilistic_ok(),
                exact: false,
            },
            BoundReport {
                check: "property1_chain".into(),
                params,
                bound_value: 0.0,
                empirical: self.chain_violations as f64,
                violation_rate: self.chain_violations as f64 / self.trials as f64,
                guaranteed_prob: 1.0,
                holds: self.chain_violations == 0,
                exact: true,
            },
        ]
    }
}

fn random_net(rng: &mut RngStream, depth: usize, width: usize, sigma: f64) -> Result<Vec<Tensor>> {
    (0..depth)
        .map(|_| sample_gaussian(rng, &[width, width], 0.0, sigma))
        .collect()
}

/// `trials` random bias-free `depth × width` networks with `N(0, σ_w²)`
/// weights, each fed a fresh random unit input.
pub fn check_property1(cfg: &BoundConfig) -> Result<Property1Report> {
    cfg.validate()?;
    let samples = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(cfg.seed, t as u64);
            let weights = random_net(&mut rng, cfg.depth, cfg.width, cfg.sigma_w)?;
            let x = sample_unit_vector(&mut rng, cfg.width)?;
            property1_sample(&weights, &x, cfg.activation, cfg.tau, cfg.c_s)
        })
        .collect::<Result<Vec<_>>>()?;
    let trials = samples.len();
    let violations = samples.iter().filter(|s| !s.bound_holds()).count();
    let chain_violations = samples.iter().filter(|s| !s.chain_holds()).count();
    let p = guaranteed_prob(cfg.tau, cfg.depth);
    Ok(Property1Report {
        trials,
        bound_violation_rate: violations as f64 / trials as f64,
        guaranteed_prob: p,
        required_holds_rate: p - 3.0 * binomial_se(p, trials),
        chain_violations,
        mean_bound: samples.iter().map(|s| s.bound).sum::<f64>() / trials as f64,
        mean_output_norm: samples.iter().map(|s| s.output_norm).sum::<f64>() / trials as f64,
    })
}

/// Exact per-layer chain over `nets` random networks with depth drawn from
/// `1..=max_depth` and width from `widths`.
pub fn fuzz_lipschitz_chain(nets: usize, max_depth: usize, widths: &[usize], activation: Activation, seed: u64) -> Result<BoundReport> {
    let violations = (0..nets)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(seed, t as u64);
            let depth = 1 + rng.below(max_depth);
            let width = widths[rng.below(widths.len())];
            let sigma = 10f64.powf(rng.uniform(-1.5, 0.5)) / (width as f64).sqrt();
            let weights = random_net(&mut rng, depth, width, sigma)?;
            let x = sample_unit_vector(&mut rng, width)?;
            Ok(!property1_sample(&weights, &x, activation, 1.0, 1.0)?.chain_holds())
        })
        .collect::<Result<Vec<bool>>>()?
        .into_iter()
        .filter(|&v| v)
        .count();
    Ok(BoundReport {
        check: "lipschitz_chain".into(),
        params: format!("nets={nets};m<={max_depth};N<={};{activation}", widths.iter().max().unwrap_or(&0)),
        bound_value: 0.0,
        empirical: violations as f64,
        violation_rate: violations as f64 / nets as f64,
        guaranteed_prob: 1.0,
        holds: violations == 0,
        exact: true,
    })
}

// ---------------------------------------------------------------------------
// Output-variance growth

/// Right-hand side of the output-variance bound for `M` layers of width `N`,
/// shared weight variance `σ_w²` and bias variance `σ_b²`:
///
/// `‖x‖²(L²N)^M σ_w^{2M} + L²Nσ_b² + L² Σ_{m=1}^{M−1} N σ_b² (L²Nσ_w²)^{M−m}`.
pub fn theorem1_bound(depth: usize, width: usize, lipschitz: f64, sigma_w: f64, sigma_b: f64, x_norm_sq: f64) -> f64 {
    let l2 = lipschitz * lipschitz;
    let n = width as f64;
    let (vw, vb) = (sigma_w * sigma_w, sigma_b * sigma_b);
    let m = depth as i32;
    let weight_term = x_norm_sq * (l2 * n).powi(m) * vw.powi(m);
    let last_bias = l2 * n * vb;
    let inner_bias: f64 = (1..depth)
        .map(|layer| n * vb * (l2 * n * vw).powi((depth - layer) as i32))
        .sum();
    weight_term + last_bias + l2 * inner_bias
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem1Report {
    pub bound: f64,
    /// Sum over output coordinates of the empirical variance.
    pub empirical_sum: f64,
    pub empirical_per_coord: Vec<f64>,
    /// Conservative standard error of `empirical_sum`.
    pub std_error: f64,
    pub x_norm_sq: f64,
}

impl Theorem1Report {
    pub fn holds(&self) -> bool {
        self.empirical_sum <= self.bound
    }

    pub fn report(&self, cfg: &BoundConfig) -> BoundReport {
        BoundReport {
            check: "theorem1".into(),
            params: format!(
                "m={};N={};sw={};sb={};{}",
                cfg.depth, cfg.width, cfg.sigma_w, cfg.sigma_b, cfg.activation
            ),
            bound_value: self.bound,
            empirical: self.empirical_sum,
            violation_rate: if self.holds() { 0.0 } else { 1.0 },
            guaranteed_prob: 1.0,
            holds: self.holds(),
            exact: true,
        }
    }
}

/// Fixes an input `x ~ N(0, I)`, resamples all weights `N(0, σ_w²)` and
/// biases `N(0, σ_b²)` for each trial, and measures the variance of every
/// output coordinate of `y⁽ᴹ⁾ = φ(W⁽ᴹ⁾ … φ(W⁽¹⁾x + b⁽¹⁾) … + b⁽ᴹ⁾)`.
pub fn check_theorem1(cfg: &BoundConfig) -> Result<Theorem1Report> {
    cfg.validate()?;
    let x = sample_gaussian(&mut RngStream::new(cfg.seed, u64::MAX), &[cfg.width], 0.0, 1.0)?.into_data();
    theorem1_at(cfg, &x)
}

pub fn theorem1_at(cfg: &BoundConfig, x: &[f64]) -> Result<Theorem1Report> {
    cfg.validate()?;
    if x.len() != cfg.width {
        return Err(Error::shape("theorem1_at", format!("input {} for width {}", x.len(), cfg.width)));
    }
    let outputs = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = RngStream::new(cfg.seed, t as u64);
            let mut y = x.to_vec();
            for _ in 0..cfg.depth {
                let w = sample_gaussian(&mut rng, &[cfg.width, cfg.width], 0.0, cfg.sigma_w)?;
                let b = sample_gaussian(&mut rng, &[cfg.width], 0.0, cfg.sigma_b)?;
                y = matvec(&w, &y)?
                    .into_iter()
                    .zip(b.data())
                    .map(|(z, bi)| cfg.activation.apply(z + bi))
                    .collect();
            }
            Ok(y)
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let mut per_coord = Vec::with_capacity(cfg.width);
    let mut column = Vec::with_capacity(outputs.len());
    for i in 0..cfg.width {
        column.clear();
        column.extend(outputs.iter().map(|y| y[i]));
        per_coord.push(stats_of(&column)?.variance);
    }
    let empirical_sum: f64 = per_coord.iter().sum();
    let x_norm_sq = dot(x, x);
    let trials = cfg.trials.max(2) as f64;
    Ok(Theorem1Report {
        bound: theorem1_bound(cfg.depth, cfg.width, cfg.lipschitz(), cfg.sigma_w, cfg.sigma_b, x_norm_sq),
        std_error: (2.0 / (trials - 1.0)).sqrt() * empirical_sum,
        empirical_sum,
        empirical_per_coord: per_coord,
        x_norm_sq,
    })
}
