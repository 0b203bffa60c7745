//! Critical values from simulating the limit law with estimated
//! contact-point parameters.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engine::{smooth_rate, KsEngine};
use crate::error::{Error, Result};
use crate::model::{evaluate_moments, Aggregator, Dataset, MomentModel};
use crate::numeric::Matrix;
use crate::pretest::{local_quadratic_fits, run_pretest, KernelSpec, PretestConfig, PretestReport};
use crate::resampling::{RatePlan, Sample};
use crate::rng::{derive_seed, TAG_SIMULATION, TAG_SUBSAMPLE};
use crate::sim::{simulate_z, z_quantile, ContactPointParams, ZSimConfig};

/// Kernel density estimate at `x0`.
pub fn kernel_density(x: &Matrix, x0: &[f64], h: f64, kernel: &KernelSpec) -> f64 {
    let d = x.cols();
    let mut u = vec![0.0; d];
    let mut total = 0.0;
    for i in 0..x.rows() {
        for (k, uk) in u.iter_mut().enumerate() {
            *uk = (x.get(i, k) - x0[k]) / h;
        }
        total += kernel.weight(&u);
    }
    total / (x.rows() as f64 * h.powi(d as i32))
}

fn clip_psd(m: &Matrix) -> Matrix {
    let k = m.rows();
    let eig = DMatrix::from_row_slice(k, k, m.as_slice()).symmetric_eigen();
    let mut lam = eig.eigenvalues.clone();
    lam.iter_mut().for_each(|v| *v = v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&lam) * eig.eigenvectors.transpose();
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            out.set(i, j, 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)]));
        }
    }
    out
}

fn positive_definite(v: &Matrix) -> bool {
    let d = v.rows();
    DMatrix::from_row_slice(d, d, v.as_slice()).symmetric_eigen().eigenvalues.iter().all(|&l| l > 0.0)
}

/// Plug-in parameters at each estimated contact point: density, second
/// moments of the active components and their Hessians, all from local
/// fits at the class anchor.
pub fn plugin_parameters(
    data: &Dataset,
    moments: &Matrix,
    report: &PretestReport,
    kernel: &KernelSpec,
) -> Result<Vec<ContactPointParams>> {
    let h = report.sequences.h;
    let mut out = Vec::new();
    for cp in &report.contact_points {
        let active = &cp.active;
        let mut ys: Vec<Vec<f64>> = active.iter().map(|&j| moments.col(j)).collect();
        let mut pairs = Vec::new();
        for a in 0..active.len() {
            for b in a..active.len() {
                pairs.push((a, b));
                ys.push((0..moments.rows()).map(|i| moments.get(i, active[a]) * moments.get(i, active[b])).collect());
            }
        }
        let refs: Vec<&[f64]> = ys.iter().map(|v| v.as_slice()).collect();
        let fits = local_quadratic_fits(data.x(), &refs, &cp.anchor, h, kernel)?;
        let mut m2 = Matrix::zeros(active.len(), active.len());
        for (idx, &(a, b)) in pairs.iter().enumerate() {
            let v = fits[active.len() + idx].m_hat;
            m2.set(a, b, v);
            m2.set(b, a, v);
        }
        let f_hat = kernel_density(data.x(), &cp.anchor, h, kernel);
        if !(f_hat > 0.0) {
            return Err(Error::Input(format!("zero density estimate at {:?}", cp.anchor)));
        }
        out.push(ContactPointParams::quadratic(
            cp.anchor.clone(),
            f_hat,
            clip_psd(&m2),
            fits[..active.len()].iter().map(|f| f.v_hat.clone()).collect(),
            active.clone(),
        ));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PluginConfig {
    pub pretest: PretestConfig,
    pub zsim: ZSimConfig,
    /// Used for the conservative fallback.
    pub rate_plan: RatePlan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PluginBranch {
    /// Simulated limit-law critical value.
    Plugin,
    /// The pre-test failed; the conservative subsampling test was used.
    Conservative,
    /// No component is close to binding anywhere.
    Slack,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginOutcome {
    pub reject: bool,
    pub branch: PluginBranch,
    pub statistic: f64,
    pub critical_value: f64,
    pub beta_used: f64,
    pub points: Vec<ContactPointParams>,
    pub pretest: PretestReport,
    pub warnings: Vec<String>,
}

/// Smoothness pre-test, then either the simulated critical value at rate
/// `n^{(d+2)/(d+4)}` or the conservative fallback.
pub fn plugin_test<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    s: &Aggregator,
    alpha: f64,
    cfg: &PluginConfig,
    seed: u64,
) -> Result<PluginOutcome> {
    if !(0.0 < alpha && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let report = run_pretest(model, data, theta, &cfg.pretest)?;
    let moments = evaluate_moments(model, data, theta)?;
    let engine = KsEngine::new(data.x());
    let sample = Sample::new(&engine, moments.clone(), *s)?;
    let raw = sample.full_stat();
    let mut warnings = report.warnings.clone();

    let conservative = |report: PretestReport, warnings: Vec<String>| -> Result<PluginOutcome> {
        let out = sample.conservative_test(alpha, &cfg.rate_plan, derive_seed(seed, TAG_SUBSAMPLE))?;
        Ok(PluginOutcome {
            reject: out.reject,
            branch: PluginBranch::Conservative,
            statistic: out.statistic,
            critical_value: out.critical_value,
            beta_used: out.beta_used,
            points: vec![],
            pretest: report,
            warnings,
        })
    };

    let beta = smooth_rate(data.d());
    if report.contact_points.is_empty() {
        return Ok(PluginOutcome {
            reject: false,
            branch: PluginBranch::Slack,
            statistic: (data.n() as f64).powf(beta) * raw,
            critical_value: 0.0,
            beta_used: beta,
            points: vec![],
            pretest: report,
            warnings,
        });
    }
    if !report.passes() {
        return conservative(report, warnings);
    }
    let points = plugin_parameters(data, &moments, &report, &cfg.pretest.kernel)?;
    if points.iter().any(|p| !p.v_hats.iter().all(positive_definite)) {
        warnings.push("an estimated Hessian is not positive definite; using the conservative test".into());
        return conservative(report, warnings);
    }
    let zcfg = ZSimConfig { seed: derive_seed(seed, TAG_SIMULATION), ..cfg.zsim };
    let z = simulate_z(&points, model.d_y(), &zcfg)?;
    warnings.extend(z.warnings);
    let cv = z_quantile(&z.samples, s, 1.0 - alpha)?;
    let stat = (data.n() as f64).powf(beta) * raw;
    Ok(PluginOutcome {
        reject: stat > cv,
        branch: PluginBranch::Plugin,
        statistic: stat,
        critical_value: cv,
        beta_used: beta,
        points,
        pretest: report,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{boundary_theta, d1_upper_curvature, d1_upper_minimizer, generate_design, Design, DesignConfig};
    use crate::model::UpperBoundModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn density_of_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Matrix::column(&(0..20_000).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
        let f = kernel_density(&x, &[0.2], 0.3, &KernelSpec::default());
        assert!((f - 0.5).abs() < 0.03, "{f}");
        // the kernel integrates to one: far from the data the estimate is 0
        assert_eq!(kernel_density(&x, &[5.0], 0.3, &KernelSpec::default()), 0.0);
    }

    #[test]
    fn clipping_keeps_psd_matrices() {
        let m = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
        let c = clip_psd(&m);
        for i in 0..2 {
            for j in 0..2 {
                assert!((c.get(i, j) - m.get(i, j)).abs() < 1e-12);
            }
        }
        let bad = clip_psd(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]));
        assert!(DMatrix::from_row_slice(2, 2, bad.as_slice()).symmetric_eigen().eigenvalues.iter().all(|&l| l > -1e-12));
    }

    #[test]
    fn design_one_parameters_are_close_to_the_truth() {
        let data = generate_design(&DesignConfig::new(Design::D1, 5000, 31)).unwrap();
        let theta = boundary_theta(Design::D1);
        let model = UpperBoundModel::default();
        let report = run_pretest(&model, &data, &theta, &PretestConfig::default()).unwrap();
        let moments = evaluate_moments(&model, &data, &theta).unwrap();
        let pts = plugin_parameters(&data, &moments, &report, &KernelSpec::default()).unwrap();
        assert_eq!(pts.len(), 1);
        let p = &pts[0];
        let xs = d1_upper_minimizer();
        assert!((p.x_k[0] - xs).abs() < 0.1);
        assert!((p.f_hat - 0.5).abs() < 0.05);
        // m = W^H - theta1 - .1x at x*: .945 w.p. p(x*) ~ .1, else U - theta1
        let pm = Design::D1.p_missing(xs);
        let c = theta[0] + 0.1 * xs;
        let m2 = pm * (1.1 - c).powi(2) + (1.0 - pm) * (1.0 / 3.0 + (0.1 * xs - c).powi(2));
        assert!((p.m2_hat.get(0, 0) - m2).abs() < 0.1 * m2, "{} vs {m2}", p.m2_hat.get(0, 0));
        let v = d1_upper_curvature(xs);
        assert!(p.v_hats[0].get(0, 0) > 0.3 * v && p.v_hats[0].get(0, 0) < 2.0 * v);
    }

    #[test]
    fn branches() {
        let model = UpperBoundModel::default();
        let s = Aggregator::default();
        let cfg = PluginConfig { zsim: ZSimConfig { n_sims: 300, ..Default::default() }, ..Default::default() };
        let data = generate_design(&DesignConfig::new(Design::D1, 1000, 41)).unwrap();
        let slack = plugin_test(&model, &data, &[-2.0, 0.1], &s, 0.05, &cfg, 1).unwrap();
        assert_eq!(slack.branch, PluginBranch::Slack);
        assert!(!slack.reject);

        let out = plugin_test(&model, &data, &boundary_theta(Design::D1), &s, 0.05, &cfg, 1).unwrap();
        assert_eq!(out, plugin_test(&model, &data, &boundary_theta(Design::D1), &s, 0.05, &cfg, 1).unwrap());
        if out.branch == PluginBranch::Plugin {
            assert!((out.beta_used - 0.6).abs() < 1e-15);
            assert!(out.critical_value > 0.0);
        }
        let far = plugin_test(&model, &data, &[boundary_theta(Design::D1)[0] + 0.5, 0.1], &s, 0.05, &cfg, 1).unwrap();
        assert!(far.reject);

        let d2 = generate_design(&DesignConfig::new(Design::D2, 1000, 42)).unwrap();
        let out = plugin_test(&model, &d2, &boundary_theta(Design::D2), &s, 0.05, &cfg, 1).unwrap();
        assert_ne!(out.branch, PluginBranch::Slack);
    }
}
