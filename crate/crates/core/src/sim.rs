//! Simulation of the limiting distribution from contact-point parameters:
//! set-indexed Gaussian white noise on a lattice plus a deterministic drift.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::OpenBox;
use crate::error::{Error, Result};
use crate::model::Aggregator;
use crate::numeric::Matrix;
use crate::resampling::EmpiricalDistribution;
use crate::rng::{derive_seed, stream_rng, TAG_SIMULATION};

/// Local parameters at one contact point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPointParams {
    pub x_k: Vec<f64>,
    /// Density of `X` at the point.
    pub f_hat: f64,
    /// `E(m_J m_J' | X = x_k)` over the active components.
    pub m2_hat: Matrix,
    /// Hessian of each active component's conditional mean.
    pub v_hats: Vec<Matrix>,
    /// Active components (indices into the moment vector).
    pub active: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Isotropic drift `psi_scale[a] * |x|^gamma` per active component,
    /// replacing the Hessian drift.
    #[serde(default)]
    pub psi_scale: Option<Vec<f64>>,
    /// Local-alternative term added as `shift[a] * vol(box)`.
    #[serde(default)]
    pub linear_shift: Option<Vec<f64>>,
}

fn default_gamma() -> f64 {
    2.0
}

impl ContactPointParams {
    /// Hessian drift with exponent 2.
    pub fn quadratic(x_k: Vec<f64>, f_hat: f64, m2_hat: Matrix, v_hats: Vec<Matrix>, active: Vec<usize>) -> Self {
        Self { x_k, f_hat, m2_hat, v_hats, active, gamma: 2.0, psi_scale: None, linear_shift: None }
    }

    pub fn d(&self) -> usize {
        self.x_k.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d();
        let k = self.active.len();
        if d == 0 || k == 0 {
            return Err(Error::Parameter("contact point needs d >= 1 and a nonempty active set".into()));
        }
        if !(self.f_hat > 0.0) || !self.f_hat.is_finite() {
            return Err(Error::Parameter(format!("density must be positive, got {}", self.f_hat)));
        }
        if self.m2_hat.rows() != k || self.m2_hat.cols() != k {
            return Err(Error::Dimension(format!("m2_hat must be {k} x {k}")));
        }
        if !is_symmetric(&self.m2_hat) {
            return Err(Error::Parameter("m2_hat must be symmetric".into()));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Parameter("gamma must be positive".into()));
        }
        match &self.psi_scale {
            Some(p) if p.len() != k => return Err(Error::Dimension("psi_scale needs one entry per active component".into())),
            Some(_) => {}
            None if self.gamma != 2.0 => {
                return Err(Error::Unsupported(
                    "drift exponent other than 2 needs an isotropic psi_scale; general psi is not supported".into(),
                ))
            }
            None => {
                if self.v_hats.len() != k {
                    return Err(Error::Dimension("v_hats needs one matrix per active component".into()));
                }
                for v in &self.v_hats {
                    if v.rows() != d || v.cols() != d || !is_symmetric(v) {
                        return Err(Error::Parameter(format!("each v_hat must be a symmetric {d} x {d} matrix")));
                    }
                }
            }
        }
        if let Some(s) = &self.linear_shift {
            if s.len() != k {
                return Err(Error::Dimension("linear_shift needs one entry per active component".into()));
            }
        }
        Ok(())
    }
}

fn is_symmetric(m: &Matrix) -> bool {
    let d = m.rows();
    m.cols() == d
        && (0..d).all(|i| {
            (0..i).all(|j| (m.get(i, j) - m.get(j, i)).abs() <= 1e-12 * (1.0 + m.get(i, j).abs()))
        })
}

/// Lattice and replication settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZSimConfig {
    /// Boxes live in the lattice over `[-b, 2b]^d`.
    pub b: f64,
    /// Cells per axis; `None` picks 400 (d = 1) or 40 (d >= 2).
    pub cells_per_axis: Option<usize>,
    pub n_sims: usize,
    pub seed: u64,
    /// In one dimension, shift each lattice minimum by the expected gap
    /// between the discrete and continuous extremes of Brownian motion.
    pub continuity_correction: bool,
}

impl Default for ZSimConfig {
    fn default() -> Self {
        Self { b: 10.0, cells_per_axis: None, n_sims: 2000, seed: 0, continuity_correction: true }
    }
}

/// `-zeta(1/2) / sqrt(2 pi)`: the gap between the minimum of Brownian
/// motion on a lattice of mesh `delta` and its continuous minimum is
/// about this times `sigma sqrt(delta)`.
pub const BROWNIAN_GAP: f64 = 0.582_597_157_939_010_7;

impl ZSimConfig {
    pub fn cells(&self, d: usize) -> usize {
        self.cells_per_axis.unwrap_or(if d == 1 { 400 } else { 40 })
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.b > 0.0) {
            return Err(Error::Parameter("truncation radius must be positive".into()));
        }
        if self.cells(d) < 4 {
            return Err(Error::Parameter("need at least 4 cells per axis".into()));
        }
        if self.n_sims == 0 {
            return Err(Error::Parameter("n_sims must be positive".into()));
        }
        Ok(())
    }
}

/// The cell lattice over `[-b, 2b]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub d: usize,
    pub cells: usize,
    pub lo: f64,
    pub width: f64,
}

impl Lattice {
    pub fn new(d: usize, cfg: &ZSimConfig) -> Self {
        let cells = cfg.cells(d);
        Self { d, cells, lo: -cfg.b, width: 3.0 * cfg.b / cells as f64 }
    }

    pub fn n_cells(&self) -> usize {
        self.cells.pow(self.d as u32)
    }

    pub fn edge(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.width
    }

    /// Multi-index of a flat cell index (last axis fastest).
    fn unflatten(&self, mut c: usize, out: &mut [usize]) {
        for k in (0..self.d).rev() {
            out[k] = c % self.cells;
            c /= self.cells;
        }
    }

    /// Box covering cells `lo[k] .. hi[k]` (exclusive) on each axis.
    pub fn cell_box(&self, lo: &[usize], hi: &[usize]) -> OpenBox {
        OpenBox {
            s: lo.iter().map(|&i| self.edge(i)).collect(),
            t: lo.iter().zip(hi).map(|(&a, &b)| (b.saturating_sub(a)) as f64 * self.width).collect(),
        }
    }

    pub fn cell_volume(&self) -> f64 {
        self.width.powi(self.d as i32)
    }
}

/// `int_box x'Vx dx` from the monomial integrals.
fn quadratic_form_integral(v: &Matrix, b: &OpenBox) -> f64 {
    let d = b.s.len();
    let i0: Vec<f64> = b.t.clone();
    let i1: Vec<f64> = (0..d).map(|i| ((b.s[i] + b.t[i]).powi(2) - b.s[i].powi(2)) / 2.0).collect();
    let i2: Vec<f64> = (0..d).map(|i| ((b.s[i] + b.t[i]).powi(3) - b.s[i].powi(3)) / 3.0).collect();
    let prod_except = |skip: &[usize]| -> f64 {
        (0..d).filter(|k| !skip.contains(k)).map(|k| i0[k]).product()
    };
    let mut total = 0.0;
    for i in 0..d {
        total += v.get(i, i) * i2[i] * prod_except(&[i]);
        for l in 0..d {
            if l != i {
                total += v.get(i, l) * i1[i] * i1[l] * prod_except(&[i, l]);
            }
        }
    }
    total
}

fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    #[allow(clippy::too_many_arguments)]
    fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

/// `int_box |x|^gamma dx` by nested adaptive quadrature; the kink at the
/// origin is placed on a panel edge.
fn isotropic_integral(gamma: f64, b: &OpenBox, tol: f64) -> f64 {
    fn nested(gamma: f64, b: &OpenBox, k: usize, partial: f64, tol: f64) -> f64 {
        let d = b.s.len();
        let (lo, hi) = (b.s[k], b.s[k] + b.t[k]);
        let inner = |x: f64| {
            let p = partial + x * x;
            if k + 1 == d {
                p.powf(gamma / 2.0)
            } else {
                nested(gamma, b, k + 1, p, tol)
            }
        };
        if lo < 0.0 && hi > 0.0 {
            adaptive_simpson(&inner, lo, 0.0, tol / 2.0) + adaptive_simpson(&inner, 0.0, hi, tol / 2.0)
        } else {
            adaptive_simpson(&inner, lo, hi, tol)
        }
    }
    if b.is_empty() {
        return 0.0;
    }
    nested(gamma, b, 0, 0.0, tol)
}

/// Drift `g` of active component `a` (position within `point.active`) on
/// `bx`: `f/2 int x'V_a x dx` for the Hessian drift, `f psi_a int |x|^gamma dx`
/// for the isotropic drift, plus `shift_a vol(bx)` when a local shift is set.
pub fn drift_integral(point: &ContactPointParams, a: usize, bx: &OpenBox) -> Result<f64> {
    point.validate()?;
    if a >= point.active.len() {
        return Err(Error::Dimension(format!("active index {a} out of range")));
    }
    if bx.s.len() != point.d() || bx.t.len() != point.d() {
        return Err(Error::Dimension("box dimension differs from the contact point".into()));
    }
    if bx.t.iter().any(|&t| t < 0.0) {
        return Err(Error::Parameter("box edge lengths must be nonnegative".into()));
    }
    if bx.is_empty() {
        return Ok(0.0);
    }
    let base = match &point.psi_scale {
        None => 0.5 * point.f_hat * quadratic_form_integral(&point.v_hats[a], bx),
        Some(p) => point.f_hat * p[a] * isotropic_integral(point.gamma, bx, 1e-11),
    };
    let vol: f64 = bx.t.iter().product();
    let shift = point.linear_shift.as_ref().map_or(0.0, |s| s[a]);
    Ok(base + shift * vol)
}

/// Factor `A` with `A A' = S`, clipping eigenvalues within `1e-8 trace`
/// below zero. Returns the factor and whether clipping happened.
pub fn psd_factor(s: &Matrix) -> Result<(DMatrix<f64>, bool)> {
    let k = s.rows();
    let m = DMatrix::from_row_slice(k, k, s.as_slice());
    let trace: f64 = (0..k).map(|i| m[(i, i)]).sum();
    let eig = m.symmetric_eigen();
    let tol = 1e-8 * trace.abs().max(f64::MIN_POSITIVE);
    let mut clipped = false;
    let mut root = DMatrix::zeros(k, k);
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam < -tol {
            return Err(Error::Parameter(format!("second-moment matrix is not positive semidefinite (eigenvalue {lam})")));
        }
        if lam < 0.0 {
            clipped = true;
        }
        root[(i, i)] = lam.max(0.0).sqrt();
    }
    Ok((&eig.eigenvectors * root, clipped))
}

/// Cell noise for one draw: `cells x k`, row `c` distributed `N(0, S vol)`.
fn cell_noise<R: Rng>(rng: &mut R, factor: &DMatrix<f64>, n_cells: usize, vol: f64) -> Vec<f64> {
    let k = factor.nrows();
    let sd = vol.sqrt();
    let mut z = vec![0.0; k];
    let mut out = vec![0.0; n_cells * k];
    for c in 0..n_cells {
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        for a in 0..k {
            let mut v = 0.0;
            for b in 0..k {
                v += factor[(a, b)] * z[b];
            }
            out[c * k + a] = sd * v;
        }
    }
    out
}

/// One realization of the set-indexed Gaussian process at a contact point.
#[derive(Debug, Clone)]
pub struct GaussianField {
    pub lattice: Lattice,
    k: usize,
    /// Per component, d-dimensional inclusive prefix sums with a zero
    /// border: `(cells+1)^d` entries.
    prefix: Vec<Vec<f64>>,
    pub clipped: bool,
}

impl GaussianField {
    /// `G_a` over cells `lo[i] .. hi[i]` (exclusive).
    pub fn sum_cells(&self, a: usize, lo: &[usize], hi: &[usize]) -> f64 {
        let d = self.lattice.d;
        let side = self.lattice.cells + 1;
        let p = &self.prefix[a];
        let mut total = 0.0;
        for corner in 0..(1usize << d) {
            let mut idx = 0;
            let mut sign = 1.0;
            let mut empty = false;
            for k in 0..d {
                let use_lo = corner >> k & 1 == 1;
                if hi[k] <= lo[k] {
                    empty = true;
                }
                idx = idx * side + if use_lo { lo[k] } else { hi[k] };
                if use_lo {
                    sign = -sign;
                }
            }
            if empty {
                return 0.0;
            }
            total += sign * p[idx];
        }
        total
    }

    pub fn components(&self) -> usize {
        self.k
    }
}

fn point_rng(seed: u64, point: usize, draw: u64) -> rand_chacha::ChaCha8Rng {
    stream_rng(derive_seed(derive_seed(seed, point as u64), TAG_SIMULATION), draw)
}

/// Draw the field at `point`; draw `i` is the field `simulate_z` uses for
/// its first contact point in simulation `i`.
pub fn simulate_gaussian_field(point: &ContactPointParams, cfg: &ZSimConfig, draw: u64) -> Result<GaussianField> {
    point.validate()?;
    cfg.validate(point.d())?;
    let lattice = Lattice::new(point.d(), cfg);
    let mut sigma = point.m2_hat.clone();
    scale_in_place(&mut sigma, point.f_hat);
    let (factor, clipped) = psd_factor(&sigma)?;
    let k = point.active.len();
    let mut rng = point_rng(cfg.seed, 0, draw);
    let noise = cell_noise(&mut rng, &factor, lattice.n_cells(), lattice.cell_volume());
    let d = lattice.d;
    let side = lattice.cells + 1;
    let mut prefix = vec![vec![0.0; side.pow(d as u32)]; k];
    let mut idx = vec![0usize; d];
    for c in 0..lattice.n_cells() {
        lattice.unflatten(c, &mut idx);
        let flat = idx.iter().fold(0, |acc, &i| acc * side + i + 1);
        for a in 0..k {
            prefix[a][flat] = noise[c * k + a];
        }
    }
    // cumulative sums along each axis
    for axis in 0..d {
        let stride = side.pow((d - 1 - axis) as u32);
        for p in prefix.iter_mut() {
            for flat in 0..p.len() {
                if !(flat / stride).is_multiple_of(side) {
                    p[flat] += p[flat - stride];
                }
            }
        }
    }
    Ok(GaussianField { lattice, k, prefix, clipped })
}

/// Length at which the 1-D quadratic drift `kappa x^2 / 2` over a centred
/// interval matches the noise standard deviation `sqrt(sigma2 * length)`.
fn natural_length(sigma2: f64, kappa: f64) -> f64 {
    if kappa <= 0.0 {
        return f64::INFINITY;
    }
    (3.0 * 2f64.sqrt() * sigma2.sqrt() / kappa).powf(0.4)
}

/// Minimum sum over lattice boxes, the empty box included.
pub fn min_box_sum(values: &[f64], cells: usize, d: usize) -> f64 {
    if d == 1 {
        let mut best = 0.0f64;
        let mut run = 0.0f64;
        for &v in &values[..cells] {
            run = (run + v).min(v);
            best = best.min(run);
        }
        return best;
    }
    let slab = cells.pow(d as u32 - 1);
    let mut best = 0.0f64;
    let mut acc = vec![0.0; slab];
    for lo in 0..cells {
        acc.iter_mut().for_each(|v| *v = 0.0);
        for hi in lo..cells {
            for (a, v) in acc.iter_mut().zip(&values[hi * slab..(hi + 1) * slab]) {
                *a += v;
            }
            best = best.min(min_box_sum(&acc, cells, d - 1));
        }
    }
    best
}

/// Prepared per-point pieces shared by all draws.
struct PointPlan {
    factor: DMatrix<f64>,
    /// Subtracted from each component's lattice minimum.
    correction: Vec<f64>,
    drift: Vec<Vec<f64>>,
    active: Vec<usize>,
    index: usize,
}

/// Simulated draws of the limit variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZSamples {
    /// `n_sims x d_y`; components active at no point are 0.
    pub samples: Matrix,
    pub warnings: Vec<String>,
}

/// Draw `Z`: for active component `j`, the minimum over points activating
/// it of `min_box (G + g)` over lattice boxes (less the continuity
/// correction in one dimension).
pub fn simulate_z(points: &[ContactPointParams], d_y: usize, cfg: &ZSimConfig) -> Result<ZSamples> {
    let first = points.first().ok_or_else(|| Error::Parameter("need at least one contact point".into()))?;
    let d = first.d();
    cfg.validate(d)?;
    let lattice = Lattice::new(d, cfg);
    let mut warnings = Vec::new();
    let mut plans = Vec::new();
    for (k, p) in points.iter().enumerate() {
        p.validate()?;
        if p.d() != d {
            return Err(Error::Dimension("contact points differ in dimension".into()));
        }
        if let Some(&j) = p.active.iter().find(|&&j| j >= d_y) {
            return Err(Error::Dimension(format!("active component {j} out of range for d_y = {d_y}")));
        }
        let mut sigma = p.m2_hat.clone();
        scale_in_place(&mut sigma, p.f_hat);
        let (factor, clipped) = psd_factor(&sigma)?;
        if clipped {
            warnings.push(format!("contact point {k}: clipped negative eigenvalues of the second-moment matrix"));
        }
        let mut idx = vec![0usize; d];
        let drift = (0..p.active.len())
            .map(|a| {
                (0..lattice.n_cells())
                    .map(|c| {
                        lattice.unflatten(c, &mut idx);
                        let hi: Vec<usize> = idx.iter().map(|&i| i + 1).collect();
                        drift_integral(p, a, &lattice.cell_box(&idx, &hi))
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if d == 1 && cfg.continuity_correction {
            for a in 0..p.active.len() {
                let scale = natural_length(sigma.get(a, a), p.f_hat * p.v_hats.get(a).map_or(0.0, |v| v.get(0, 0)));
                if lattice.width > 0.1 * scale {
                    warnings.push(format!(
                        "contact point {k}: cell width {:.3e} is coarse against the drift scale {scale:.3e}; the continuity correction may be inaccurate",
                        lattice.width
                    ));
                }
            }
        }
        let correction = (0..p.active.len())
            .map(|a| {
                if d == 1 && cfg.continuity_correction {
                    // both interval ends are discrete extremes
                    2.0 * BROWNIAN_GAP * (sigma.get(a, a).max(0.0) * lattice.width).sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        plans.push(PointPlan { factor, correction, drift, active: p.active.clone(), index: k });
    }
    let n_cells = lattice.n_cells();
    let vol = lattice.cell_volume();
    let rows: Vec<Vec<f64>> = (0..cfg.n_sims)
        .into_par_iter()
        .map(|i| {
            let mut z = vec![f64::INFINITY; d_y];
            let mut buf = vec![0.0; n_cells];
            for plan in &plans {
                let mut rng = point_rng(cfg.seed, plan.index, i as u64);
                let k = plan.active.len();
                let noise = cell_noise(&mut rng, &plan.factor, n_cells, vol);
                for a in 0..k {
                    for c in 0..n_cells {
                        buf[c] = noise[c * k + a] + plan.drift[a][c];
                    }
                    let v = min_box_sum(&buf, lattice.cells, d) - plan.correction[a];
                    let j = plan.active[a];
                    z[j] = z[j].min(v);
                }
            }
            z.into_iter().map(|v| if v.is_finite() { v } else { 0.0 }).collect()
        })
        .collect();
    let mut samples = Matrix::zeros(cfg.n_sims, d_y);
    for (i, r) in rows.iter().enumerate() {
        samples.row_mut(i).copy_from_slice(r);
    }
    Ok(ZSamples { samples, warnings })
}

fn scale_in_place(m: &mut Matrix, c: f64) {
    for i in 0..m.rows() {
        for v in m.row_mut(i) {
            *v *= c;
        }
    }
}

/// The `q` quantile of `S` applied to each simulated row.
pub fn z_quantile(samples: &Matrix, s: &Aggregator, q: f64) -> Result<f64> {
    if !(0.0 < q && q < 1.0) {
        return Err(Error::Parameter(format!("quantile level must lie in (0, 1), got {q}")));
    }
    let stats: Vec<f64> = (0..samples.rows()).map(|i| s.apply(samples.row(i))).collect();
    Ok(EmpiricalDistribution::new(stats)?.quantile(q))
}

/// `inf_box f int_box (x'V_a x / 2 + shift) dx` for the Hessian drift,
/// by multi-start pattern search over `(s, t)`.
pub fn drift_infimum(point: &ContactPointParams, a: usize, shift: f64) -> Result<f64> {
    point.validate()?;
    if point.psi_scale.is_some() || point.gamma != 2.0 {
        return Err(Error::Unsupported("drift infimum is implemented for the Hessian drift only".into()));
    }
    if a >= point.active.len() {
        return Err(Error::Dimension(format!("active index {a} out of range")));
    }
    if shift >= 0.0 {
        return Ok(0.0);
    }
    let d = point.d();
    let v = &point.v_hats[a];
    let objective = |z: &[f64]| -> f64 {
        let bx = OpenBox { s: z[..d].to_vec(), t: z[d..].iter().map(|t| t.max(0.0)).collect() };
        if bx.is_empty() {
            return 0.0;
        }
        let vol: f64 = bx.t.iter().product();
        point.f_hat * (0.5 * quadratic_form_integral(v, &bx) + shift * vol)
    };
    let lam = {
        let m = DMatrix::from_row_slice(d, d, v.as_slice());
        m.symmetric_eigen().eigenvalues.iter().fold(0.0f64, |acc, &x| acc.max(x.abs()))
    };
    let r0 = (2.0 * -shift / lam.max(1e-300)).sqrt();
    let mut best = 0.0f64;
    for mult in [0.25, 0.5, 1.0, 1.5, 2.0] {
        let r = mult * r0;
        let mut z: Vec<f64> = vec![-r; d].into_iter().chain(vec![2.0 * r; d]).collect();
        let mut val = objective(&z);
        let mut step = r.max(1e-6);
        while step > 1e-13 * r0.max(1.0) {
            let mut improved = false;
            for i in 0..2 * d {
                for dir in [1.0, -1.0] {
                    let mut cand = z.clone();
                    cand[i] += dir * step;
                    let cv = objective(&cand);
                    if cv < val {
                        z = cand;
                        val = cv;
                        improved = true;
                    }
                }
            }
            if !improved {
                step /= 2.0;
            }
        }
        best = best.min(val);
    }
    Ok(best)
}

/// Effect of doubling the truncation radius and halving the cell width on
/// the `q` quantile of `S(Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementReport {
    pub base_quantile: f64,
    pub refined_quantile: f64,
    pub relative_change: f64,
}

pub fn refinement_check(
    points: &[ContactPointParams],
    d_y: usize,
    cfg: &ZSimConfig,
    s: &Aggregator,
    q: f64,
) -> Result<RefinementReport> {
    let d = points.first().map_or(1, |p| p.d());
    let base = z_quantile(&simulate_z(points, d_y, cfg)?.samples, s, q)?;
    let fine = ZSimConfig { b: 2.0 * cfg.b, cells_per_axis: Some(4 * cfg.cells(d)), ..*cfg };
    let refined = z_quantile(&simulate_z(points, d_y, &fine)?.samples, s, q)?;
    Ok(RefinementReport {
        base_quantile: base,
        refined_quantile: refined,
        relative_change: (refined - base).abs() / base.abs().max(f64::MIN_POSITIVE),
    })
}
