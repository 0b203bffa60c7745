//! The two Monte Carlo designs: interval-censored linear outcomes with
//! covariate-dependent missingness.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::numeric::Matrix;
use crate::rng::{stream_rng, TAG_DATA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Design {
    /// Smooth quartic missingness: a single tangency point.
    D1,
    /// Missingness flat on [.25, .75]: positive-probability contact.
    D2,
}

impl Design {
    pub fn from_index(i: u32) -> Result<Self> {
        match i {
            1 => Ok(Design::D1),
            2 => Ok(Design::D2),
            _ => Err(Error::Input(format!("unknown design {i}; expected 1 or 2"))),
        }
    }

    /// Probability that the latent outcome is missing given `x`.
    pub fn p_missing(self, x: f64) -> f64 {
        match self {
            Design::D1 => {
                let q = (((0.9481 * x + 1.0667) * x - 0.6222) * x - 0.6519) * x + 0.3889;
                q.min(1.0)
            }
            Design::D2 => ((x - 0.5).abs().max(0.25) - 0.15).min(0.7),
        }
    }

    /// Slope held fixed when building intervals for the intercept.
    pub fn theta2(self) -> f64 {
        match self {
            Design::D1 => 0.1,
            Design::D2 => 0.09,
        }
    }

    /// Exponent of the boundary-parameter rate of convergence.
    pub fn exact_rate(self) -> f64 {
        match self {
            Design::D1 => 0.6,
            Design::D2 => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignConfig {
    pub design: Design,
    pub n: usize,
    /// Intercept and slope generating the latent outcome.
    pub theta_star: (f64, f64),
    /// Known support `[w_lo, w_hi]` of the latent outcome.
    pub bounds: (f64, f64),
    pub seed: u64,
}

impl DesignConfig {
    pub fn new(design: Design, n: usize, seed: u64) -> Self {
        Self { design, n, theta_star: (0.0, 0.1), bounds: (-1.1, 1.1), seed }
    }
}

/// Draw a dataset. Row `i` consumes, in order, `X`, `U` and the missingness
/// uniform from the stream `stream_rng(seed, TAG_DATA)`.
pub fn generate_design(cfg: &DesignConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::Input("design needs n >= 1".into()));
    }
    let mut rng = stream_rng(cfg.seed, TAG_DATA);
    let (t1, t2) = cfg.theta_star;
    let (lo, hi) = cfg.bounds;
    let mut x = Vec::with_capacity(cfg.n);
    let mut wl = Vec::with_capacity(cfg.n);
    let mut wh = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let xi: f64 = rng.random_range(-1.0..1.0);
        let u: f64 = rng.random_range(-1.0..1.0);
        let v: f64 = rng.random();
        let w = t1 + t2 * xi + u;
        x.push(xi);
        if v < cfg.design.p_missing(xi) {
            wl.push(lo);
            wh.push(hi);
        } else {
            wl.push(w);
            wh.push(w);
        }
    }
    Dataset::interval(Matrix::column(&x), &wl, &wh)
}

/// Which endpoint's inequality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Upper,
    Lower,
}

/// `E(W^H | x)` under the default latent parameters and bounds.
pub fn mean_upper(design: Design, x: f64) -> f64 {
    let p = design.p_missing(x);
    (1.0 - p) * 0.1 * x + p * 1.1
}

/// `E(W^L | x)`.
pub fn mean_lower(design: Design, x: f64) -> f64 {
    let p = design.p_missing(x);
    (1.0 - p) * 0.1 * x - p * 1.1
}

/// Conditional mean of the moment for `component` at `theta`.
pub fn moment_mean(design: Design, component: Component, theta: (f64, f64), x: f64) -> f64 {
    let line = theta.0 + theta.1 * x;
    match component {
        Component::Upper => mean_upper(design, x) - line,
        Component::Lower => line - mean_lower(design, x),
    }
}

/// Minimize a function on [-1, 1]: dense grid, then golden-section search
/// in the bracket around the best grid point.
pub fn minimize_on_support<F: Fn(f64) -> f64>(f: F) -> (f64, f64) {
    const GRID: usize = 20_000;
    let at = |k: usize| -1.0 + 2.0 * k as f64 / GRID as f64;
    let mut best = 0;
    for k in 1..=GRID {
        if f(at(k)) < f(at(best)) {
            best = k;
        }
    }
    let (mut a, mut b) = (at(best.saturating_sub(1)), at((best + 1).min(GRID)));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..100 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
    }
    let xm = 0.5 * (a + b);
    let (xg, vg) = (at(best), f(at(best)));
    if f(xm) <= vg {
        (xm, f(xm))
    } else {
        (xg, vg)
    }
}

/// Closed-form D1 pieces: `p(x)`, `p'(x)`, `p''(x)` of the quartic (valid
/// where it is below 1).
pub fn d1_quartic(x: f64) -> (f64, f64, f64) {
    let (a, b, c, e, f) = (0.9481, 1.0667, -0.6222, -0.6519, 0.3889);
    let p = (((a * x + b) * x + c) * x + e) * x + f;
    let dp = ((4.0 * a * x + 3.0 * b) * x + 2.0 * c) * x + e;
    let ddp = (12.0 * a * x + 6.0 * b) * x + 2.0 * c;
    (p, dp, ddp)
}

/// Second derivative of `E(W^H | x) - theta2 x` for D1:
/// `p''(x)(1.1 - .1x) - .2 p'(x)`.
pub fn d1_upper_curvature(x: f64) -> f64 {
    let (_, dp, ddp) = d1_quartic(x);
    ddp * (1.1 - 0.1 * x) - 0.2 * dp
}

/// Minimizer of `E(W^H | x) - theta2 x` for D1, by Newton iteration on the
/// analytic first derivative `p'(x)(1.1 - .1x) - .1 p(x)`.
pub fn d1_upper_minimizer() -> f64 {
    let mut x = 0.5;
    for _ in 0..50 {
        let (p, dp, _) = d1_quartic(x);
        let g = dp * (1.1 - 0.1 * x) - 0.1 * p;
        x -= g / d1_upper_curvature(x);
    }
    x
}

/// Boundary of the identified set for the intercept with the slope fixed:
/// the largest intercept satisfying the upper inequality, or the smallest
/// satisfying the lower one.
pub fn true_boundary(design: Design, component: Component, theta2: f64) -> f64 {
    match component {
        Component::Upper => minimize_on_support(|x| mean_upper(design, x) - theta2 * x).1,
        Component::Lower => -minimize_on_support(|x| theta2 * x - mean_lower(design, x)).1,
    }
}

/// A parameter at which both inequalities bind: the largest slope for
/// which the intercept interval is nonempty, with its single intercept.
pub fn two_sided_boundary(design: Design) -> (f64, f64) {
    let gap = |t2: f64| {
        true_boundary(design, Component::Upper, t2) - true_boundary(design, Component::Lower, t2)
    };
    let (mut lo, mut hi) = (design.theta2(), 10.0);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if gap(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t2 = 0.5 * (lo + hi);
    (true_boundary(design, Component::Upper, t2), t2)
}

/// Intercept on the boundary used by the experiments, with the design's
/// fixed slope.
pub fn boundary_theta(design: Design) -> [f64; 2] {
    [true_boundary(design, Component::Upper, design.theta2()), design.theta2()]
}
