//! Subsampling distributions, rate-of-convergence estimates and the
//! rate-adaptive test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::cell::RefCell;
use std::collections::HashMap;

use crate::engine::{KSResult, KsEngine};
use crate::error::{Error, Result};
use crate::model::{evaluate_moments, Aggregator, Dataset, MomentModel};
use crate::numeric::{ceil_pow, Matrix};
use crate::rng::stream_rng;

/// Sorted sample of statistic draws with right-continuous cdf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalDistribution {
    values: Vec<f64>,
}

impl EmpiricalDistribution {
    pub fn new(mut values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("empirical distribution needs at least one value".into()));
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("NaN in empirical distribution".into()));
        }
        values.sort_by(f64::total_cmp);
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn count(&self) -> usize {
        self.values.len()
    }

    /// Fraction of draws `<= x`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.values.partition_point(|&v| v <= x) as f64 / self.values.len() as f64
    }

    /// `inf { x : cdf(x) >= t }`, clamped to the sample range for `t` outside `(0, 1]`.
    pub fn quantile(&self, t: f64) -> f64 {
        let n = self.values.len();
        let k = ((t * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        self.values[k - 1]
    }

    pub fn scaled(&self, c: f64) -> Self {
        let mut values: Vec<f64> = self.values.iter().map(|v| v * c).collect();
        if c < 0.0 {
            values.reverse();
        }
        Self { values }
    }
}

/// One subsampling run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsamplePlan {
    pub b: usize,
    pub draws: usize,
    /// Center draws at the full-sample statistic.
    pub centered: bool,
    /// `tau_b = b^tau_exponent`.
    pub tau_exponent: f64,
    pub seed: u64,
}

impl SubsamplePlan {
    pub fn new(b: usize, tau_exponent: f64, seed: u64) -> Self {
        Self { b, draws: 1000, centered: false, tau_exponent, seed }
    }
}

/// Tuning for the rate estimates and the adaptive test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RatePlan {
    /// Below this, the estimated-rate pre-test routes to the conservative test.
    pub beta_lower: f64,
    /// Estimated rates are truncated above here.
    pub beta_upper: f64,
    /// Larger block of the rate estimate: `ceil(n^chi1)`.
    pub chi1: f64,
    /// Smaller block of the rate estimate: `ceil(n^chi2)`.
    pub chi2: f64,
    /// Block for the final critical value: `ceil(n^chi3)`.
    pub chi3: f64,
    /// Growing block of the pre-test rate estimate: `ceil(n^chi_a)`.
    pub chi_a: f64,
    /// Fixed block of the pre-test rate estimate.
    pub b1_fixed: usize,
    pub quantiles: Vec<f64>,
    /// Truncate the estimated rate below at 1/2.
    pub floor_half: bool,
    /// Substituted for zero (or negative) quantiles before taking logs.
    pub epsilon_floor: f64,
    pub draws: usize,
    /// Added to the conservative critical value.
    pub conservative_correction: f64,
    /// Use the centered subsampling distribution for the adaptive critical value.
    pub centered_final: bool,
}

impl Default for RatePlan {
    fn default() -> Self {
        Self {
            beta_lower: 0.55,
            beta_upper: 2.0 / 3.0,
            chi1: 0.5,
            chi2: 1.0 / 3.0,
            chi3: 0.5,
            chi_a: 0.5,
            b1_fixed: 5,
            quantiles: vec![0.5, 0.9, 0.95],
            floor_half: true,
            epsilon_floor: 1e-10,
            draws: 1000,
            conservative_correction: 0.001,
            centered_final: false,
        }
    }
}

impl RatePlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Plan(m.into()));
        if !(0.5 <= self.beta_lower && self.beta_lower < self.beta_upper && self.beta_upper < 1.0) {
            return bad("need 1/2 <= beta_lower < beta_upper < 1");
        }
        if !(0.0 < self.chi2 && self.chi2 < self.chi1 && self.chi1 < 1.0) {
            return bad("need 0 < chi2 < chi1 < 1");
        }
        if !(0.0 < self.chi3 && self.chi3 < 1.0) || !(0.0 < self.chi_a && self.chi_a < 1.0) {
            return bad("chi3 and chi_a must lie in (0, 1)");
        }
        if self.quantiles.is_empty() || self.quantiles.iter().any(|&t| !(0.0 < t && t < 1.0)) {
            return bad("quantiles must be a nonempty list in (0, 1)");
        }
        if self.draws == 0 || self.b1_fixed == 0 || !(self.epsilon_floor > 0.0) {
            return bad("draws, b1_fixed and epsilon_floor must be positive");
        }
        Ok(())
    }

    /// `(ceil(n^chi1), ceil(n^chi2))`.
    pub fn rate_blocks(&self, n: usize) -> (usize, usize) {
        (ceil_pow(n, self.chi1), ceil_pow(n, self.chi2))
    }

    /// `(b1_fixed, ceil(n^chi_a))`.
    pub fn pretest_blocks(&self, n: usize) -> (usize, usize) {
        (self.b1_fixed, ceil_pow(n, self.chi_a))
    }

    pub fn final_block(&self, n: usize) -> usize {
        ceil_pow(n, self.chi3)
    }

    fn truncate(&self, beta: f64) -> f64 {
        let b = if self.floor_half { beta.max(0.5) } else { beta };
        b.min(self.beta_upper)
    }
}

/// A rate estimate; `degenerate` flags that some quantile was clamped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateEstimate {
    pub beta: f64,
    pub degenerate: bool,
}

/// `mean_t (log q2(t) - log q1(t)) / (log b1 - log b2)` with quantiles
/// clamped below at `eps`.
pub fn rate_from_quantiles(b1: usize, q1: &[f64], b2: usize, q2: &[f64], eps: f64) -> Result<RateEstimate> {
    if b1 == b2 {
        return Err(Error::Plan(format!("rate estimate needs distinct block sizes, got {b1} twice")));
    }
    if q1.len() != q2.len() || q1.is_empty() {
        return Err(Error::Input("quantile lists must be nonempty and of equal length".into()));
    }
    let denom = (b1 as f64).ln() - (b2 as f64).ln();
    let mut degenerate = false;
    let mut clamp = |q: f64| {
        if q < eps {
            degenerate = true;
            eps
        } else {
            q
        }
    };
    let total: f64 = q1
        .iter()
        .zip(q2)
        .map(|(&a, &b)| (clamp(b).ln() - clamp(a).ln()) / denom)
        .sum();
    Ok(RateEstimate { beta: total / q1.len() as f64, degenerate })
}

/// Which critical value the adaptive test ended up using.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    Adaptive,
    Conservative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub reject: bool,
    /// `S(T_n)`, unscaled.
    pub raw_statistic: f64,
    /// `n^beta_used * S(T_n)`.
    pub statistic: f64,
    pub beta_used: f64,
    pub critical_value: f64,
    pub branch: Branch,
    pub beta_hat: Option<RateEstimate>,
    pub beta_a_hat: Option<RateEstimate>,
}

/// `S(T_S)` on one subsample per draw. Draw `i` uses the rows returned by
/// `rand::seq::index::sample` on `stream_rng(seed, i)`.
pub fn subsample_raw_stats(
    engine: &KsEngine,
    moments: &Matrix,
    s: &Aggregator,
    b: usize,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = engine.n();
    if b == 0 || b >= n {
        return Err(Error::Plan(format!("subsample size {b} must lie in [1, n) with n = {n}")));
    }
    if draws == 0 {
        return Err(Error::Plan("draws must be positive".into()));
    }
    (0..draws)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let rows = rand::seq::index::sample(&mut rng, n, b).into_vec();
            engine.subsample_infima(moments, &rows).map(|v| s.apply(&v))
        })
        .collect()
}

/// Moments of one dataset at one parameter value, with cached subsample
/// draws so that several block sizes and tests share work.
pub struct Sample<'e> {
    engine: &'e KsEngine,
    moments: Matrix,
    s: Aggregator,
    full: KSResult,
    cache: RefCell<HashMap<(usize, usize, u64), Vec<f64>>>,
}

impl<'e> Sample<'e> {
    pub fn new(engine: &'e KsEngine, moments: Matrix, s: Aggregator) -> Result<Self> {
        let full = engine.statistic(&moments)?;
        Ok(Self { engine, moments, s, full, cache: RefCell::new(HashMap::new()) })
    }

    pub fn n(&self) -> usize {
        self.engine.n()
    }

    pub fn full(&self) -> &KSResult {
        &self.full
    }

    pub fn moments(&self) -> &Matrix {
        &self.moments
    }

    pub fn aggregator(&self) -> &Aggregator {
        &self.s
    }

    /// `S(T_n)`.
    pub fn full_stat(&self) -> f64 {
        self.full.aggregate(&self.s)
    }

    fn raw(&self, b: usize, draws: usize, seed: u64) -> Result<Vec<f64>> {
        if let Some(v) = self.cache.borrow().get(&(b, draws, seed)) {
            return Ok(v.clone());
        }
        let v = subsample_raw_stats(self.engine, &self.moments, &self.s, b, draws, seed)?;
        self.cache.borrow_mut().insert((b, draws, seed), v.clone());
        Ok(v)
    }

    pub fn subsample_distribution(&self, plan: &SubsamplePlan) -> Result<EmpiricalDistribution> {
        let raw = self.raw(plan.b, plan.draws, plan.seed)?;
        let center = if plan.centered { self.full_stat() } else { 0.0 };
        let tau = (plan.b as f64).powf(plan.tau_exponent);
        EmpiricalDistribution::new(raw.into_iter().map(|v| tau * (v - center)).collect())
    }

    fn centered_quantiles(&self, b: usize, plan: &RatePlan, seed: u64) -> Result<Vec<f64>> {
        let dist = self.subsample_distribution(&SubsamplePlan {
            b,
            draws: plan.draws,
            centered: true,
            tau_exponent: 0.0,
            seed,
        })?;
        Ok(plan.quantiles.iter().map(|&t| dist.quantile(t)).collect())
    }

    fn rate_between(&self, b1: usize, b2: usize, plan: &RatePlan, seed: u64) -> Result<RateEstimate> {
        let q1 = self.centered_quantiles(b1, plan, seed)?;
        let q2 = self.centered_quantiles(b2, plan, seed)?;
        rate_from_quantiles(b1, &q1, b2, &q2, plan.epsilon_floor)
    }

    /// Rate estimate from blocks `ceil(n^chi1) > ceil(n^chi2)`.
    pub fn estimate_beta(&self, plan: &RatePlan, seed: u64) -> Result<RateEstimate> {
        let (b1, b2) = plan.rate_blocks(self.n());
        if !(b1 > b2 && b2 >= 2) {
            return Err(Error::Plan(format!("need b1 > b2 >= 2, got b1 = {b1}, b2 = {b2}")));
        }
        self.rate_between(b1, b2, plan, seed)
    }

    /// Pre-test rate estimate from a fixed block and `ceil(n^chi_a)`.
    pub fn estimate_beta_a(&self, plan: &RatePlan, seed: u64) -> Result<RateEstimate> {
        let (b1, b2) = plan.pretest_blocks(self.n());
        self.rate_between(b1, b2, plan, seed)
    }

    /// `n^{1/2} S(T_n)` against `max(q_{1-alpha}, 0) + correction` of the
    /// uncentered `b^{1/2}`-scaled subsampling distribution.
    pub fn conservative_test(&self, alpha: f64, plan: &RatePlan, seed: u64) -> Result<TestOutcome> {
        check_alpha(alpha)?;
        let b = plan.final_block(self.n());
        let dist = self.subsample_distribution(&SubsamplePlan {
            b,
            draws: plan.draws,
            centered: false,
            tau_exponent: 0.5,
            seed,
        })?;
        let cv = dist.quantile(1.0 - alpha).max(0.0) + plan.conservative_correction;
        let raw = self.full_stat();
        let stat = (self.n() as f64).sqrt() * raw;
        Ok(TestOutcome {
            reject: stat > cv,
            raw_statistic: raw,
            statistic: stat,
            beta_used: 0.5,
            critical_value: cv,
            branch: Branch::Conservative,
            beta_hat: None,
            beta_a_hat: None,
        })
    }

    /// Subsampling test with a known rate exponent `beta`.
    pub fn fixed_rate_test(&self, alpha: f64, beta: f64, plan: &RatePlan, seed: u64) -> Result<TestOutcome> {
        check_alpha(alpha)?;
        let (stat, cv) = self.rate_critical(alpha, beta, plan, seed)?;
        Ok(TestOutcome {
            reject: stat > cv,
            raw_statistic: self.full_stat(),
            statistic: stat,
            beta_used: beta,
            critical_value: cv,
            branch: Branch::Adaptive,
            beta_hat: None,
            beta_a_hat: None,
        })
    }

    fn rate_critical(&self, alpha: f64, beta: f64, plan: &RatePlan, seed: u64) -> Result<(f64, f64)> {
        let b = plan.final_block(self.n());
        let dist = self.subsample_distribution(&SubsamplePlan {
            b,
            draws: plan.draws,
            centered: plan.centered_final,
            tau_exponent: beta,
            seed,
        })?;
        let stat = (self.n() as f64).powf(beta) * self.full_stat();
        Ok((stat, dist.quantile(1.0 - alpha)))
    }

    /// The truncated rate-adaptive test: route to the conservative test
    /// when the pre-test rate falls below `beta_lower`, otherwise subsample
    /// at the estimated (truncated) rate.
    pub fn adaptive_test(&self, alpha: f64, plan: &RatePlan, seed: u64) -> Result<TestOutcome> {
        check_alpha(alpha)?;
        plan.validate()?;
        let beta_a = self.estimate_beta_a(plan, seed)?;
        if beta_a.beta < plan.beta_lower {
            let mut out = self.conservative_test(alpha, plan, seed)?;
            out.beta_a_hat = Some(beta_a);
            return Ok(out);
        }
        let beta = self.estimate_beta(plan, seed)?;
        let used = plan.truncate(beta.beta);
        let (stat, cv) = self.rate_critical(alpha, used, plan, seed)?;
        Ok(TestOutcome {
            reject: stat > cv,
            raw_statistic: self.full_stat(),
            statistic: stat,
            beta_used: used,
            critical_value: cv,
            branch: Branch::Adaptive,
            beta_hat: Some(beta),
            beta_a_hat: Some(beta_a),
        })
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if 0.0 < alpha && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")))
    }
}

fn prepare<'e, M: MomentModel + ?Sized>(
    engine: &'e KsEngine,
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
) -> Result<Sample<'e>> {
    Sample::new(engine, evaluate_moments(model, data, theta)?, *s)
}

/// Subsampling distribution of `tau_b S(T_S)` (or of
/// `tau_b [S(T_S) - S(T_n)]` when centered). `full_stat` is computed when
/// not supplied.
pub fn subsample_distribution<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    plan: &SubsamplePlan,
    full_stat: Option<f64>,
) -> Result<EmpiricalDistribution> {
    let engine = KsEngine::new(data.x());
    let moments = evaluate_moments(model, data, theta)?;
    let raw = subsample_raw_stats(&engine, &moments, s, plan.b, plan.draws, plan.seed)?;
    let center = if plan.centered {
        match full_stat {
            Some(v) => v,
            None => engine.statistic(&moments)?.aggregate(s),
        }
    } else {
        0.0
    };
    let tau = (plan.b as f64).powf(plan.tau_exponent);
    EmpiricalDistribution::new(raw.into_iter().map(|v| tau * (v - center)).collect())
}

pub fn estimate_beta<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    plan: &RatePlan,
    seed: u64,
) -> Result<RateEstimate> {
    let engine = KsEngine::new(data.x());
    prepare(&engine, model, data, theta, s)?.estimate_beta(plan, seed)
}

pub fn estimate_beta_a<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    plan: &RatePlan,
    seed: u64,
) -> Result<RateEstimate> {
    let engine = KsEngine::new(data.x());
    prepare(&engine, model, data, theta, s)?.estimate_beta_a(plan, seed)
}

pub fn adaptive_test<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    alpha: f64,
    plan: &RatePlan,
    seed: u64,
) -> Result<TestOutcome> {
    let engine = KsEngine::new(data.x());
    prepare(&engine, model, data, theta, s)?.adaptive_test(alpha, plan, seed)
}

pub fn conservative_test<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    alpha: f64,
    plan: &RatePlan,
    seed: u64,
) -> Result<TestOutcome> {
    let engine = KsEngine::new(data.x());
    prepare(&engine, model, data, theta, s)?.conservative_test(alpha, plan, seed)
}
