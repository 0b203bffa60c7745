//! Monte Carlo harness: coverage, confidence-interval endpoints by test
//! inversion, scaled-statistic histograms and local power.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::design::{boundary_theta, generate_design, Design, DesignConfig};
use crate::engine::{smooth_rate, KsEngine};
use crate::error::{Error, Result};
use crate::model::{evaluate_moments, Aggregator, Dataset, MomentModel, UpperBoundModel};
use crate::numeric::{ceil_pow, Matrix};
use crate::plugin::{plugin_test, PluginConfig};
use crate::resampling::{RatePlan, Sample};
use crate::rng::{derive_seed, TAG_SUBSAMPLE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Rate-adaptive subsampling with the estimated exponent.
    Estimated,
    /// `sqrt(n)` subsampling with the `.001` correction.
    Conservative,
    /// Subsampling at the known exponent.
    Infeasible,
    /// Simulated limit law from plug-in estimates.
    Plugin,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Estimated, Method::Conservative, Method::Infeasible, Method::Plugin];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "estimated" => Ok(Method::Estimated),
            "conservative" => Ok(Method::Conservative),
            "infeasible" => Ok(Method::Infeasible),
            "plugin" => Ok(Method::Plugin),
            _ => Err(Error::Input(format!("unknown method {s:?}"))),
        }
    }

    /// Exponent `r` in the local alternative `theta_0 + a n^{-r}` the
    /// method can detect.
    pub fn local_rate(self, d: usize) -> f64 {
        match self {
            Method::Conservative => 1.0 / (d as f64 + 2.0),
            _ => 2.0 / (d as f64 + 4.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CiStrategy {
    /// Test every grid point from the top down.
    Scan,
    /// Skip points whose outcome is implied by the statistic alone.
    #[default]
    Presearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub rate_plan: RatePlan,
    pub plugin: PluginConfig,
    /// Known exponent for the infeasible method; `None` uses the design's.
    pub exact_rate: Option<f64>,
    pub grid_mesh: f64,
    /// Grid covers the boundary plus or minus this.
    pub grid_radius: f64,
    pub ci_strategy: CiStrategy,
    pub aggregator: Aggregator,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            rate_plan: RatePlan::default(),
            plugin: PluginConfig::default(),
            exact_rate: None,
            grid_mesh: 0.01,
            grid_radius: 1.0,
            ci_strategy: CiStrategy::default(),
            aggregator: Aggregator::default(),
        }
    }
}

/// One test decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub reject: bool,
    pub statistic: f64,
    pub critical_value: f64,
    pub beta_used: f64,
}

/// A fitted sample at one parameter value, shared by the methods.
pub struct TestPoint<'a, M: MomentModel + ?Sized> {
    pub model: &'a M,
    pub data: &'a Dataset,
    pub theta: Vec<f64>,
    pub sample: Sample<'a>,
}

impl<'a, M: MomentModel + ?Sized> TestPoint<'a, M> {
    pub fn new(model: &'a M, data: &'a Dataset, engine: &'a KsEngine, theta: &[f64], s: Aggregator) -> Result<Self> {
        let moments = evaluate_moments(model, data, theta)?;
        Ok(Self { model, data, theta: theta.to_vec(), sample: Sample::new(engine, moments, s)? })
    }

    pub fn decide(&self, method: Method, alpha: f64, cfg: &ExperimentConfig, exact_rate: f64, seed: u64) -> Result<Decision> {
        let sub_seed = subsample_seed(seed);
        let out = match method {
            Method::Estimated => self.sample.adaptive_test(alpha, &cfg.rate_plan, sub_seed)?,
            Method::Conservative => self.sample.conservative_test(alpha, &cfg.rate_plan, sub_seed)?,
            Method::Infeasible => self.sample.fixed_rate_test(alpha, exact_rate, &cfg.rate_plan, sub_seed)?,
            Method::Plugin => {
                let p = plugin_test(self.model, self.data, &self.theta, self.sample.aggregator(), alpha, &cfg.plugin, seed)?;
                return Ok(Decision {
                    reject: p.reject,
                    statistic: p.statistic,
                    critical_value: p.critical_value,
                    beta_used: p.beta_used,
                });
            }
        };
        Ok(Decision {
            reject: out.reject,
            statistic: out.statistic,
            critical_value: out.critical_value,
            beta_used: out.beta_used,
        })
    }
}

/// Seed the subsampling methods draw from when a test runs with `seed`.
pub fn subsample_seed(seed: u64) -> u64 {
    derive_seed(seed, TAG_SUBSAMPLE)
}

/// Seed of replication `rep`.
pub fn rep_seed(seed: u64, rep: usize) -> u64 {
    derive_seed(seed, rep as u64)
}

fn rep_data(design: Design, n: usize, seed: u64, rep: usize) -> Result<Dataset> {
    generate_design(&DesignConfig::new(design, n, rep_seed(seed, rep)))
}

fn check_common(n_list: &[usize], alpha_list: &[f64], reps: usize) -> Result<()> {
    if reps == 0 {
        return Err(Error::Parameter("reps must be at least 1".into()));
    }
    if n_list.is_empty() || n_list.iter().any(|&n| n < 10) {
        return Err(Error::Parameter("sample sizes must be at least 10".into()));
    }
    if alpha_list.iter().any(|&a| !(0.0 < a && a < 1.0)) {
        return Err(Error::Parameter("alpha values must lie in (0, 1)".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCell {
    pub n: usize,
    pub method: Method,
    pub alpha: f64,
    /// Fraction of replications not rejecting the boundary parameter.
    pub coverage: f64,
    pub mc_se: f64,
    pub reps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub n: usize,
    pub mean_beta_hat: f64,
    /// Mean of `min(max(beta_hat, 1/2), beta_upper)`.
    pub mean_truncated_beta: f64,
    pub mean_beta_a_hat: f64,
    /// Fraction with `beta_a_hat >= beta_lower` (adaptive branch).
    pub adaptive_frequency: f64,
    pub degenerate_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthCell {
    pub n: usize,
    pub method: Method,
    pub alpha: f64,
    /// Mean of the upper endpoint minus the boundary.
    pub mean_excess: f64,
    pub sd_excess: f64,
    pub reps: usize,
    /// Replications whose interval reached the top of the grid.
    pub unbounded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub design: Design,
    pub boundary: [f64; 2],
    pub n_list: Vec<usize>,
    pub methods: Vec<Method>,
    pub alpha_list: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub coverage: Vec<CoverageCell>,
    pub rates: Vec<RateSummary>,
    pub lengths: Vec<LengthCell>,
    pub wall_time_secs: f64,
}

impl ExperimentReport {
    pub fn coverage_of(&self, n: usize, method: Method, alpha: f64) -> Option<f64> {
        self.coverage
            .iter()
            .find(|c| c.n == n && c.method == method && c.alpha == alpha)
            .map(|c| c.coverage)
    }

    pub fn excess_of(&self, n: usize, method: Method, alpha: f64) -> Option<f64> {
        self.lengths
            .iter()
            .find(|c| c.n == n && c.method == method && c.alpha == alpha)
            .map(|c| c.mean_excess)
    }

    pub fn rates_of(&self, n: usize) -> Option<&RateSummary> {
        self.rates.iter().find(|r| r.n == n)
    }
}

fn exact_rate_for(design: Design, cfg: &ExperimentConfig) -> f64 {
    cfg.exact_rate.unwrap_or(design.exact_rate())
}

struct RepCoverage {
    rejects: Vec<bool>,
    beta_hat: Option<(f64, f64, bool)>,
}

/// Coverage of the boundary parameter (upper inequality only) for each
/// `(n, method, alpha)`; with `Estimated` among the methods the report
/// also summarises the rate estimates.
pub fn coverage_experiment(
    design: Design,
    n_list: &[usize],
    methods: &[Method],
    alpha_list: &[f64],
    reps: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    check_common(n_list, alpha_list, reps)?;
    let start = Instant::now();
    let theta = boundary_theta(design);
    let model = UpperBoundModel::default();
    let beta = exact_rate_for(design, cfg);
    let mut coverage = Vec::new();
    let mut rates = Vec::new();
    for &n in n_list {
        let per_rep: Vec<RepCoverage> = (0..reps)
            .into_par_iter()
            .map(|rep| -> Result<RepCoverage> {
                let data = rep_data(design, n, seed, rep)?;
                let engine = KsEngine::new(data.x());
                let point = TestPoint::new(&model, &data, &engine, &theta, cfg.aggregator)?;
                let rs = rep_seed(seed, rep);
                let mut rejects = Vec::new();
                for &m in methods {
                    for &a in alpha_list {
                        rejects.push(point.decide(m, a, cfg, beta, rs)?.reject);
                    }
                }
                let beta_hat = if methods.contains(&Method::Estimated) {
                    let sub = subsample_seed(rs);
                    let b = point.sample.estimate_beta(&cfg.rate_plan, sub)?;
                    let ba = point.sample.estimate_beta_a(&cfg.rate_plan, sub)?;
                    Some((b.beta, ba.beta, b.degenerate || ba.degenerate))
                } else {
                    None
                };
                Ok(RepCoverage { rejects, beta_hat })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut idx = 0;
        for &m in methods {
            for &a in alpha_list {
                let covered = per_rep.iter().filter(|r| !r.rejects[idx]).count() as f64 / reps as f64;
                coverage.push(CoverageCell {
                    n,
                    method: m,
                    alpha: a,
                    coverage: covered,
                    mc_se: (covered * (1.0 - covered) / reps as f64).sqrt(),
                    reps,
                });
                idx += 1;
            }
        }
        let est: Vec<(f64, f64, bool)> = per_rep.iter().filter_map(|r| r.beta_hat).collect();
        if !est.is_empty() {
            let k = est.len() as f64;
            let plan = &cfg.rate_plan;
            let trunc = |b: f64| {
                let b = if plan.floor_half { b.max(0.5) } else { b };
                b.min(plan.beta_upper)
            };
            rates.push(RateSummary {
                n,
                mean_beta_hat: est.iter().map(|e| e.0).sum::<f64>() / k,
                mean_truncated_beta: est.iter().map(|e| trunc(e.0)).sum::<f64>() / k,
                mean_beta_a_hat: est.iter().map(|e| e.1).sum::<f64>() / k,
                adaptive_frequency: est.iter().filter(|e| e.1 >= plan.beta_lower).count() as f64 / k,
                degenerate_frequency: est.iter().filter(|e| e.2).count() as f64 / k,
            });
        }
    }
    Ok(ExperimentReport {
        design,
        boundary: theta,
        n_list: n_list.to_vec(),
        methods: methods.to_vec(),
        alpha_list: alpha_list.to_vec(),
        reps,
        seed,
        config: cfg.clone(),
        coverage,
        rates,
        lengths: vec![],
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

/// Grid `lo, lo + mesh, ..., hi` for the intercept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub mesh: f64,
}

impl Grid {
    pub fn around(center: f64, radius: f64, mesh: f64) -> Self {
        Self { lo: center - radius, hi: center + radius, mesh }
    }

    pub fn len(&self) -> usize {
        ((self.hi - self.lo) / self.mesh + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn at(&self, k: usize) -> f64 {
        self.lo + k as f64 * self.mesh
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mesh > 0.0) || !(self.hi >= self.lo) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::Parameter(format!("invalid grid {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CiEndpoint {
    /// Largest grid value not rejected.
    pub value: f64,
    pub warning: Option<String>,
    pub tests_run: usize,
}

/// Upper endpoint of the confidence interval for the intercept (slope
/// fixed at `theta2`) from the upper inequality of `data`.
#[allow(clippy::too_many_arguments)]
pub fn ci_upper_endpoint(
    data: &Dataset,
    theta2: f64,
    alpha: f64,
    method: Method,
    grid: &Grid,
    cfg: &ExperimentConfig,
    exact_rate: f64,
    seed: u64,
) -> Result<CiEndpoint> {
    grid.validate()?;
    if data.d() != 1 {
        return Err(Error::Dimension("the intercept interval needs a single regressor".into()));
    }
    let model = UpperBoundModel::default();
    let engine = KsEngine::new(data.x());
    let s = cfg.aggregator;
    let k_top = grid.len() - 1;
    let mut tests_run = 0;
    let mut test = |k: usize| -> Result<bool> {
        tests_run += 1;
        let p = TestPoint::new(&model, data, &engine, &[grid.at(k), theta2], s)?;
        Ok(!p.decide(method, alpha, cfg, exact_rate, seed)?.reject)
    };
    let finish = |k: usize, tests_run: usize| CiEndpoint {
        value: grid.at(k),
        warning: (k == k_top).then(|| format!("top of the grid {} is not rejected; the interval may extend beyond it", grid.hi)),
        tests_run,
    };
    let bracket = || Error::Bracket(format!("every grid point in [{}, {}] is rejected", grid.lo, grid.hi));

    match cfg.ci_strategy {
        CiStrategy::Scan => {
            for k in (0..=k_top).rev() {
                if test(k)? {
                    return Ok(finish(k, tests_run));
                }
            }
            Err(bracket())
        }
        CiStrategy::Presearch => {
            let stat_at = |k: usize| -> Result<f64> {
                let m = evaluate_moments(&model, data, &[grid.at(k), theta2])?;
                Ok(engine.statistic(&m)?.aggregate(&s))
            };
            // S(T_n) is nondecreasing in the intercept; find the last zero.
            let shortcut = method_accepts_zero(method, &cfg.rate_plan);
            let mut last_zero: Option<usize> = None;
            if shortcut && stat_at(0)? == 0.0 {
                let (mut lo, mut hi) = (0usize, k_top + 1);
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if stat_at(mid)? == 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                last_zero = Some(lo);
            }
            let first_tested = last_zero.map_or(0, |k| k + 1);
            let b = ceil_pow(data.n(), cfg.rate_plan.chi3);
            for k in (first_tested..=k_top).rev() {
                if certainly_rejects(method, data, &model, &engine, &[grid.at(k), theta2], b, cfg, exact_rate)? {
                    continue;
                }
                if test(k)? {
                    return Ok(finish(k, tests_run));
                }
            }
            match last_zero {
                Some(k) => Ok(finish(k, tests_run)),
                None => Err(bracket()),
            }
        }
    }
}

/// Whether a zero statistic can never be rejected (critical value >= 0).
fn method_accepts_zero(method: Method, plan: &RatePlan) -> bool {
    match method {
        Method::Conservative | Method::Plugin => true,
        Method::Estimated | Method::Infeasible => !plan.centered_final,
    }
}

/// A sufficient condition for rejection that needs no resampling: every
/// subsample statistic is at most `S(-M)`, `M_j` the mean of the `b` most
/// negative values of component `j`.
#[allow(clippy::too_many_arguments)]
fn certainly_rejects(
    method: Method,
    data: &Dataset,
    model: &UpperBoundModel,
    engine: &KsEngine,
    theta: &[f64],
    b: usize,
    cfg: &ExperimentConfig,
    exact_rate: f64,
) -> Result<bool> {
    let plan = &cfg.rate_plan;
    if plan.centered_final {
        return Ok(false);
    }
    let n = data.n();
    if b >= n {
        return Ok(false);
    }
    let m = evaluate_moments(model, data, theta)?;
    let stat = engine.statistic(&m)?.aggregate(&cfg.aggregator);
    let bound = subsample_bound(&m, b, &cfg.aggregator);
    let ratio = n as f64 / b as f64;
    Ok(match method {
        Method::Conservative => ratio.sqrt() * stat > bound + plan.conservative_correction / (b as f64).sqrt(),
        Method::Infeasible => ratio.powf(exact_rate) * stat > bound,
        Method::Estimated => {
            plan.floor_half && ratio.sqrt() * stat > bound + plan.conservative_correction / (b as f64).sqrt()
        }
        Method::Plugin => false,
    })
}

fn subsample_bound(m: &Matrix, b: usize, s: &Aggregator) -> f64 {
    let v: Vec<f64> = (0..m.cols())
        .map(|j| {
            let mut neg: Vec<f64> = m.col(j).into_iter().map(|x| x.min(0.0)).collect();
            neg.sort_by(f64::total_cmp);
            neg[..b].iter().sum::<f64>() / b as f64
        })
        .collect();
    s.apply(&v)
}

/// Mean excess length of the upper endpoint over the boundary intercept.
pub fn length_experiment(
    design: Design,
    n_list: &[usize],
    methods: &[Method],
    alpha_list: &[f64],
    reps: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport> {
    check_common(n_list, alpha_list, reps)?;
    let start = Instant::now();
    let theta = boundary_theta(design);
    let grid = Grid::around(theta[0], cfg.grid_radius, cfg.grid_mesh);
    let beta = exact_rate_for(design, cfg);
    let mut lengths = Vec::new();
    for &n in n_list {
        let per_rep: Vec<Vec<CiEndpoint>> = (0..reps)
            .into_par_iter()
            .map(|rep| -> Result<Vec<CiEndpoint>> {
                let data = rep_data(design, n, seed, rep)?;
                let mut out = Vec::new();
                for &m in methods {
                    for &a in alpha_list {
                        out.push(ci_upper_endpoint(&data, theta[1], a, m, &grid, cfg, beta, rep_seed(seed, rep))?);
                    }
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut idx = 0;
        for &m in methods {
            for &a in alpha_list {
                let ex: Vec<f64> = per_rep.iter().map(|r| r[idx].value - theta[0]).collect();
                let mean = ex.iter().sum::<f64>() / reps as f64;
                let var = ex.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (reps.max(2) - 1) as f64;
                lengths.push(LengthCell {
                    n,
                    method: m,
                    alpha: a,
                    mean_excess: mean,
                    sd_excess: var.sqrt(),
                    reps,
                    unbounded: per_rep.iter().filter(|r| r[idx].warning.is_some()).count(),
                });
                idx += 1;
            }
        }
    }
    Ok(ExperimentReport {
        design,
        boundary: theta,
        n_list: n_list.to_vec(),
        methods: methods.to_vec(),
        alpha_list: alpha_list.to_vec(),
        reps,
        seed,
        config: cfg.clone(),
        coverage: vec![],
        rates: vec![],
        lengths,
        wall_time_secs: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaledHistogram {
    pub n: usize,
    pub beta: f64,
    /// `n^beta S(T_n)` at the boundary, one per replication.
    pub values: Vec<f64>,
    pub bins: Vec<HistogramBin>,
}

/// Scaled statistics at the boundary parameter, binned on a common range
/// across sample sizes.
pub fn scaled_histogram(
    design: Design,
    n_list: &[usize],
    beta: f64,
    reps: usize,
    seed: u64,
    bins: usize,
) -> Result<Vec<ScaledHistogram>> {
    check_common(n_list, &[], reps)?;
    if bins == 0 {
        return Err(Error::Parameter("need at least one bin".into()));
    }
    let theta = boundary_theta(design);
    let model = UpperBoundModel::default();
    let s = Aggregator::default();
    let mut out = Vec::new();
    for &n in n_list {
        let values = (0..reps)
            .into_par_iter()
            .map(|rep| -> Result<f64> {
                let data = rep_data(design, n, seed, rep)?;
                let m = evaluate_moments(&model, &data, &theta)?;
                let stat = KsEngine::new(data.x()).statistic(&m)?.aggregate(&s);
                Ok((n as f64).powf(beta) * stat)
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(ScaledHistogram { n, beta, values, bins: vec![] });
    }
    let top = out.iter().flat_map(|h| h.values.iter().copied()).fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let width = top / bins as f64;
    for h in &mut out {
        let mut counts = vec![0usize; bins];
        for &v in &h.values {
            counts[((v / width) as usize).min(bins - 1)] += 1;
        }
        h.bins = counts
            .into_iter()
            .enumerate()
            .map(|(i, count)| HistogramBin {
                lo: i as f64 * width,
                hi: (i + 1) as f64 * width,
                count,
                density: count as f64 / (reps as f64 * width),
            })
            .collect();
    }
    Ok(out)
}

/// `n,beta,lo,hi,count,density` rows.
pub fn histogram_csv(hists: &[ScaledHistogram]) -> String {
    let mut out = String::from("n,beta,lo,hi,count,density\n");
    for h in hists {
        for b in &h.bins {
            out.push_str(&format!("{},{},{},{},{},{}\n", h.n, h.beta, b.lo, b.hi, b.count, b.density));
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetScale {
    /// Offsets are distances in the intercept.
    #[default]
    Physical,
    /// Offset `a` means `a n^{-r}` with `r` the method's local rate.
    Local,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerPoint {
    pub offset: f64,
    pub physical_offset: f64,
    pub method: Method,
    pub rejection_rate: f64,
    pub mc_se: f64,
}

/// Rejection rates at the boundary intercept plus each offset.
#[allow(clippy::too_many_arguments)]
pub fn local_power_curve(
    design: Design,
    n: usize,
    alpha: f64,
    offsets: &[f64],
    methods: &[Method],
    scale: OffsetScale,
    reps: usize,
    seed: u64,
    cfg: &ExperimentConfig,
) -> Result<Vec<PowerPoint>> {
    check_common(&[n], &[alpha], reps)?;
    if offsets.iter().any(|o| !o.is_finite()) {
        return Err(Error::Parameter("offsets must be finite".into()));
    }
    let theta = boundary_theta(design);
    let model = UpperBoundModel::default();
    let beta = exact_rate_for(design, cfg);
    let physical = |o: f64, m: Method| match scale {
        OffsetScale::Physical => o,
        OffsetScale::Local => o * (n as f64).powf(-m.local_rate(1)),
    };
    let per_rep: Vec<Vec<bool>> = (0..reps)
        .into_par_iter()
        .map(|rep| -> Result<Vec<bool>> {
            let data = rep_data(design, n, seed, rep)?;
            let engine = KsEngine::new(data.x());
            let mut out = Vec::new();
            for &o in offsets {
                for &m in methods {
                    let t = [theta[0] + physical(o, m), theta[1]];
                    let p = TestPoint::new(&model, &data, &engine, &t, cfg.aggregator)?;
                    out.push(p.decide(m, alpha, cfg, beta, rep_seed(seed, rep))?.reject);
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    let mut idx = 0;
    for &o in offsets {
        for &m in methods {
            let rate = per_rep.iter().filter(|r| r[idx]).count() as f64 / reps as f64;
            out.push(PowerPoint {
                offset: o,
                physical_offset: physical(o, m),
                method: m,
                rejection_rate: rate,
                mc_se: (rate * (1.0 - rate) / reps as f64).sqrt(),
            });
            idx += 1;
        }
    }
    Ok(out)
}

/// Scaled statistic at the design's boundary for one replication; the
/// exponent defaults to the smooth rate.
pub fn boundary_statistic(design: Design, n: usize, seed: u64, beta: Option<f64>) -> Result<f64> {
    let data = generate_design(&DesignConfig::new(design, n, seed))?;
    let m = evaluate_moments(&UpperBoundModel::default(), &data, &boundary_theta(design))?;
    let stat = KsEngine::new(data.x()).statistic(&m)?.aggregate(&Aggregator::default());
    Ok((n as f64).powf(beta.unwrap_or(smooth_rate(1))) * stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.rate_plan.draws = 100;
        cfg.plugin.rate_plan.draws = 100;
        cfg.plugin.zsim.n_sims = 200;
        cfg
    }

    #[test]
    fn grid_geometry() {
        let g = Grid::around(0.1, 1.0, 0.01);
        assert_eq!(g.len(), 201);
        assert!((g.at(100) - 0.1).abs() < 1e-12);
        assert!((g.at(200) - 1.1).abs() < 1e-12);
        assert!(Grid { lo: 1.0, hi: 0.0, mesh: 0.1 }.validate().is_err());
    }

    #[test]
    fn presearch_agrees_with_scan() {
        let cfg = quick_cfg();
        for design in [Design::D1, Design::D2] {
            let theta = boundary_theta(design);
            let grid = Grid::around(theta[0], 1.0, 0.01);
            for rep in 0..4 {
                let data = rep_data(design, 200, 5, rep).unwrap();
                for m in [Method::Estimated, Method::Conservative, Method::Infeasible] {
                    let scan = ci_upper_endpoint(&data, theta[1], 0.05, m, &grid, &ExperimentConfig { ci_strategy: CiStrategy::Scan, ..cfg.clone() }, design.exact_rate(), 9).unwrap();
                    let fast = ci_upper_endpoint(&data, theta[1], 0.05, m, &grid, &cfg, design.exact_rate(), 9).unwrap();
                    assert_eq!(scan.value, fast.value, "{design:?} {m:?} rep {rep}");
                    assert!(fast.tests_run <= scan.tests_run);
                }
            }
        }
    }

    #[test]
    fn endpoint_edge_cases() {
        let cfg = quick_cfg();
        let data = rep_data(Design::D1, 100, 1, 0).unwrap();
        // far below the boundary nothing binds: the top is accepted
        let grid = Grid { lo: -3.0, hi: -2.0, mesh: 0.01 };
        let e = ci_upper_endpoint(&data, 0.1, 0.05, Method::Conservative, &grid, &cfg, 0.6, 1).unwrap();
        assert_eq!(e.value, -2.0);
        assert!(e.warning.is_some());
        // far above it everything is rejected
        let grid = Grid { lo: 3.0, hi: 3.5, mesh: 0.01 };
        let err = ci_upper_endpoint(&data, 0.1, 0.05, Method::Conservative, &grid, &cfg, 0.6, 1).unwrap_err();
        assert!(matches!(err, Error::Bracket(_)));
    }

    #[test]
    fn coverage_report_is_reproducible() {
        let cfg = quick_cfg();
        let methods = [Method::Estimated, Method::Conservative];
        let a = coverage_experiment(Design::D1, &[100], &methods, &[0.05, 0.1], 10, 3, &cfg).unwrap();
        let b = coverage_experiment(Design::D1, &[100], &methods, &[0.05, 0.1], 10, 3, &cfg).unwrap();
        assert_eq!(a.coverage, b.coverage);
        assert_eq!(a.rates, b.rates);
        assert_eq!(a.coverage.len(), 4);
        for c in &a.coverage {
            assert!((0.0..=1.0).contains(&c.coverage));
        }
        let json = serde_json::to_string(&a).unwrap();
        let back: ExperimentReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.coverage, a.coverage);
        assert!(coverage_experiment(Design::D1, &[100], &methods, &[0.05], 0, 3, &cfg).is_err());
    }

    #[test]
    fn histogram_bins_partition_the_values() {
        let h = scaled_histogram(Design::D2, &[100, 200], 0.5, 50, 1, 10).unwrap();
        for x in &h {
            assert_eq!(x.bins.iter().map(|b| b.count).sum::<usize>(), 50);
            let mass: f64 = x.bins.iter().map(|b| b.density * (b.hi - b.lo)).sum();
            assert!((mass - 1.0).abs() < 1e-9);
        }
        let csv = histogram_csv(&h);
        assert_eq!(csv.lines().count(), 21);
    }

    #[test]
    fn power_at_a_distant_alternative() {
        let cfg = quick_cfg();
        let pts = local_power_curve(Design::D1, 500, 0.05, &[0.0, 1.0], &[Method::Conservative], OffsetScale::Physical, 20, 2, &cfg).unwrap();
        assert_eq!(pts[1].rejection_rate, 1.0);
        assert!(pts[0].rejection_rate <= 0.2);
        let local = local_power_curve(Design::D1, 500, 0.05, &[2.0], &[Method::Estimated], OffsetScale::Local, 5, 2, &cfg).unwrap();
        assert!((local[0].physical_offset - 2.0 * 500f64.powf(-0.4)).abs() < 1e-12);
    }
}
