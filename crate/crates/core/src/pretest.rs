//! Local quadratic regression, contact-set estimation and the Hessian
//! determinant pre-test.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_moments, Dataset, MomentModel};
use crate::numeric::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Biweight,
    Epanechnikov,
    Triweight,
}

/// Product kernel supported on `[-1, 1]^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct KernelSpec {
    pub kind: KernelKind,
}

impl KernelSpec {
    pub fn new(kind: KernelKind) -> Self {
        Self { kind }
    }

    pub fn univariate(&self, u: f64) -> f64 {
        if u.abs() >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - u * u;
        match self.kind {
            KernelKind::Biweight => 15.0 / 16.0 * s * s,
            KernelKind::Epanechnikov => 0.75 * s,
            KernelKind::Triweight => 35.0 / 32.0 * s * s * s,
        }
    }

    pub fn weight(&self, u: &[f64]) -> f64 {
        let mut w = 1.0;
        for &ui in u {
            w *= self.univariate(ui);
            if w == 0.0 {
                break;
            }
        }
        w
    }
}

/// Local quadratic fit at `x0`: `m(x) ~ m_hat + grad'(x - x0) + (x - x0)'V(x - x0)/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalFit {
    pub x0: Vec<f64>,
    pub h: f64,
    pub m_hat: f64,
    pub grad: Vec<f64>,
    pub v_hat: Matrix,
    pub effective_n: usize,
}

/// `(log n / n)^(1/(d+6))`.
pub fn default_bandwidth(n: usize, d: usize) -> f64 {
    let n = n as f64;
    (n.ln() / n).powf(1.0 / (d as f64 + 6.0))
}

fn design_dim(d: usize) -> usize {
    1 + d + d * (d + 1) / 2
}

fn regressors(u: &[f64], z: &mut Vec<f64>) {
    z.clear();
    z.push(1.0);
    z.extend_from_slice(u);
    for i in 0..u.len() {
        for l in i..u.len() {
            z.push(u[i] * u[l]);
        }
    }
}

/// Fit several responses sharing one design and weight vector.
pub fn local_quadratic_fits(
    x: &Matrix,
    ys: &[&[f64]],
    x0: &[f64],
    h: f64,
    kernel: &KernelSpec,
) -> Result<Vec<LocalFit>> {
    let d = x.cols();
    if x0.len() != d {
        return Err(Error::Dimension(format!("x0 has length {} but x has {d} columns", x0.len())));
    }
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {h}")));
    }
    if ys.iter().any(|y| y.len() != x.rows()) {
        return Err(Error::Dimension("response length differs from row count".into()));
    }
    let p = design_dim(d);
    let mut a = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, ys.len());
    let mut u = vec![0.0; d];
    let mut z = Vec::with_capacity(p);
    let mut effective_n = 0;
    for i in 0..x.rows() {
        let row = x.row(i);
        let mut inside = true;
        for k in 0..d {
            u[k] = (row[k] - x0[k]) / h;
            if u[k].abs() >= 1.0 {
                inside = false;
                break;
            }
        }
        if !inside {
            continue;
        }
        let w = kernel.weight(&u);
        if w == 0.0 {
            continue;
        }
        effective_n += 1;
        regressors(&u, &mut z);
        for r in 0..p {
            let wr = w * z[r];
            for c in r..p {
                a[(r, c)] += wr * z[c];
            }
            for (j, y) in ys.iter().enumerate() {
                rhs[(r, j)] += wr * y[i];
            }
        }
    }
    for r in 0..p {
        for c in 0..r {
            a[(r, c)] = a[(c, r)];
        }
    }
    if effective_n < p {
        return Err(Error::SingularFit { effective_n });
    }
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    if !(min > 1e-12 * max) {
        return Err(Error::SingularFit { effective_n });
    }
    let chol = a.cholesky().ok_or(Error::SingularFit { effective_n })?;
    let coef = chol.solve(&rhs);
    let h2 = h * h;
    Ok((0..ys.len())
        .map(|j| {
            let c: DVector<f64> = coef.column(j).into_owned();
            let grad = (0..d).map(|k| c[1 + k] / h).collect();
            let mut v = Matrix::zeros(d, d);
            let mut idx = 1 + d;
            for i in 0..d {
                for l in i..d {
                    if i == l {
                        v.set(i, i, 2.0 * c[idx] / h2);
                    } else {
                        v.set(i, l, c[idx] / h2);
                        v.set(l, i, c[idx] / h2);
                    }
                    idx += 1;
                }
            }
            LocalFit { x0: x0.to_vec(), h, m_hat: c[0], grad, v_hat: v, effective_n }
        })
        .collect())
}

pub fn local_quadratic_fit(x: &Matrix, y: &[f64], x0: &[f64], h: f64, kernel: &KernelSpec) -> Result<LocalFit> {
    Ok(local_quadratic_fits(x, &[y], x0, h, kernel)?.remove(0))
}

/// Determinant of a small symmetric matrix.
pub fn determinant(m: &Matrix) -> f64 {
    let d = m.rows();
    DMatrix::from_row_slice(d, d, m.as_slice()).determinant()
}

/// Axis-aligned search region with a regular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points_per_axis: usize,
}

impl Region {
    /// Central `1 - 2 trim` of each coordinate.
    pub fn trimmed(x: &Matrix, trim: f64, points_per_axis: usize) -> Result<Self> {
        if !(0.0..0.5).contains(&trim) {
            return Err(Error::Parameter(format!("trim must lie in [0, 0.5), got {trim}")));
        }
        if points_per_axis == 0 {
            return Err(Error::Parameter("region grid needs at least one point".into()));
        }
        let mut lo = Vec::new();
        let mut hi = Vec::new();
        for k in 0..x.cols() {
            let mut c = x.col(k);
            c.sort_by(f64::total_cmp);
            let at = |t: f64| {
                let pos = t * (c.len() - 1) as f64;
                let (i, frac) = (pos.floor() as usize, pos.fract());
                if i + 1 < c.len() {
                    c[i] + frac * (c[i + 1] - c[i])
                } else {
                    c[i]
                }
            };
            lo.push(at(trim));
            hi.push(at(1.0 - trim));
        }
        Ok(Self { lo, hi, points_per_axis })
    }

    pub fn d(&self) -> usize {
        self.lo.len()
    }

    /// Grid points in lexicographic order (last coordinate fastest).
    pub fn grid(&self) -> Vec<Vec<f64>> {
        let k = self.points_per_axis;
        let axis = |a: usize| -> Vec<f64> {
            if k == 1 {
                return vec![0.5 * (self.lo[a] + self.hi[a])];
            }
            (0..k)
                .map(|i| self.lo[a] + (self.hi[a] - self.lo[a]) * i as f64 / (k - 1) as f64)
                .collect()
        };
        let mut out: Vec<Vec<f64>> = vec![vec![]];
        for a in 0..self.d() {
            let ax = axis(a);
            out = out
                .into_iter()
                .flat_map(|p| {
                    ax.iter().map(move |&v| {
                        let mut q = p.clone();
                        q.push(v);
                        q
                    })
                })
                .collect();
        }
        out
    }

    /// Distance from `x` to the nearest face.
    pub fn distance_to_boundary(&self, x: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(k, &v)| (v - self.lo[k]).min(self.hi[k] - v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Tuning for contact-set estimation and the Hessian pre-test. Unset
/// sequences take their defaults for the sample size at hand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretestConfig {
    pub kernel: KernelSpec,
    pub bandwidth: Option<f64>,
    pub a_n: Option<f64>,
    pub b_n: Option<f64>,
    pub epsilon_n: Option<f64>,
    pub trim: f64,
    pub points_per_axis: usize,
}

impl Default for PretestConfig {
    fn default() -> Self {
        Self {
            kernel: KernelSpec::default(),
            bandwidth: None,
            a_n: None,
            b_n: None,
            epsilon_n: None,
            trim: 0.01,
            points_per_axis: 201,
        }
    }
}

/// Resolved sequences for a given `n` and `d`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sequences {
    pub h: f64,
    pub a_n: f64,
    pub b_n: f64,
    /// `max(sqrt(log n / (n h^d)), h^3)`.
    pub r_n: f64,
    pub epsilon_n: f64,
    /// `b_n max(sqrt(log n / (n h^(d+4))), h)`.
    pub hessian_threshold: f64,
}

/// Level-estimation rate `max(sqrt(log n / (n h^d)), h^3)`.
pub fn level_rate(n: usize, d: usize, h: f64) -> f64 {
    let ln = (n as f64).ln();
    (ln / (n as f64 * h.powi(d as i32))).sqrt().max(h.powi(3))
}

/// Hessian-estimation rate `max(sqrt(log n / (n h^(d+4))), h)`.
pub fn hessian_rate(n: usize, d: usize, h: f64) -> f64 {
    let ln = (n as f64).ln();
    (ln / (n as f64 * h.powi(d as i32 + 4))).sqrt().max(h)
}

impl PretestConfig {
    /// Defaults: `h = (log n / n)^(1/(d+6))`, `a_n = log(log n) / 2`,
    /// `b_n = log(n) / 2`, `epsilon_n = (a_n r_n)^(1/4)`.
    pub fn sequences(&self, n: usize, d: usize) -> Result<Sequences> {
        if n < 3 {
            return Err(Error::Input("pre-test needs n >= 3".into()));
        }
        let ln = (n as f64).ln();
        let h = self.bandwidth.unwrap_or_else(|| default_bandwidth(n, d));
        let a_n = self.a_n.unwrap_or(0.5 * ln.ln());
        let b_n = self.b_n.unwrap_or(0.5 * ln);
        if !(h > 0.0 && a_n > 0.0 && b_n > 0.0) {
            return Err(Error::Parameter("h, a_n and b_n must be positive".into()));
        }
        let r_n = level_rate(n, d, h);
        let epsilon_n = self.epsilon_n.unwrap_or((a_n * r_n).powf(0.25));
        if !(epsilon_n > 0.0) {
            return Err(Error::Parameter("epsilon_n must be positive".into()));
        }
        Ok(Sequences { h, a_n, b_n, r_n, epsilon_n, hessian_threshold: b_n * hessian_rate(n, d, h) })
    }
}

/// Fits of every moment component on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFits {
    pub points: Vec<Vec<f64>>,
    /// `fits[g][j]`: component `j` at grid point `g`; `None` where singular.
    pub fits: Vec<Option<Vec<LocalFit>>>,
}

impl GridFits {
    pub fn skipped(&self) -> usize {
        self.fits.iter().filter(|f| f.is_none()).count()
    }
}

pub fn fit_grid(x: &Matrix, moments: &Matrix, points: Vec<Vec<f64>>, h: f64, kernel: &KernelSpec) -> Result<GridFits> {
    let cols: Vec<Vec<f64>> = (0..moments.cols()).map(|j| moments.col(j)).collect();
    let ys: Vec<&[f64]> = cols.iter().map(|c| c.as_slice()).collect();
    let fits = points
        .par_iter()
        .map(|p| match local_quadratic_fits(x, &ys, p, h, kernel) {
            Ok(f) => Ok(Some(f)),
            Err(Error::SingularFit { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GridFits { points, fits })
}

/// Grid points flagged as near-binding for one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub component: usize,
    pub points: Vec<Vec<f64>>,
    pub m_hat: Vec<f64>,
    pub v_hat: Vec<Matrix>,
    /// `min(inf m_hat, 0)` over the fitted grid.
    pub floor: f64,
    pub threshold: f64,
    pub skipped: usize,
}

/// Points with `m_hat_j - min(inf m_hat_j, 0) <= a_n r_n`.
pub fn contact_set_from_fits(fits: &GridFits, j: usize, a_n: f64, r_n: f64) -> ComponentSet {
    let floor = fits
        .fits
        .iter()
        .flatten()
        .map(|f| f[j].m_hat)
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let threshold = a_n * r_n;
    let mut out = ComponentSet {
        component: j,
        points: vec![],
        m_hat: vec![],
        v_hat: vec![],
        floor,
        threshold,
        skipped: fits.skipped(),
    };
    for (p, f) in fits.points.iter().zip(&fits.fits) {
        if let Some(f) = f {
            if f[j].m_hat - floor <= threshold {
                out.points.push(p.clone());
                out.m_hat.push(f[j].m_hat);
                out.v_hat.push(f[j].v_hat.clone());
            }
        }
    }
    out
}

/// Contact-set estimate for component `j` over `region`.
#[allow(clippy::too_many_arguments)]
pub fn estimate_contact_set<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    j: usize,
    region: &Region,
    h: f64,
    kernel: &KernelSpec,
    a_n: f64,
) -> Result<ComponentSet> {
    if j >= model.d_y() {
        return Err(Error::Dimension(format!("component {j} out of range for d_y = {}", model.d_y())));
    }
    let moments = evaluate_moments(model, data, theta)?;
    let fits = fit_grid(data.x(), &moments, region.grid(), h, kernel)?;
    Ok(contact_set_from_fits(&fits, j, a_n, level_rate(data.n(), data.d(), h)))
}

/// Estimated contact points and their active components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactSetEstimate {
    /// One ball centre per class; pairwise more than `2 epsilon_n` apart.
    pub points: Vec<Vec<f64>>,
    /// Per class, the flagged grid point with the smallest fitted mean.
    pub anchors: Vec<Vec<f64>>,
    /// Active components per class, ascending.
    pub active_sets: Vec<Vec<usize>>,
    pub epsilon_n: f64,
}

impl ContactSetEstimate {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn lex(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    a.len().cmp(&b.len())
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    let mut i = i;
    while parent[i] != r {
        let next = parent[i];
        parent[i] = r;
        i = next;
    }
    r
}

/// (component, centre, covered (point, m_hat))
type Ball = (usize, Vec<f64>, Vec<(Vec<f64>, f64)>);

/// Greedy `epsilon_n`-ball cover of each component's set, then classes of
/// balls connected through intersecting balls.
pub fn discretize_contact_points(sets: &[ComponentSet], epsilon_n: f64) -> Result<ContactSetEstimate> {
    if !(epsilon_n > 0.0) {
        return Err(Error::Parameter(format!("epsilon_n must be positive, got {epsilon_n}")));
    }
    let mut balls: Vec<Ball> = Vec::new();
    let mut sorted_sets: Vec<&ComponentSet> = sets.iter().collect();
    sorted_sets.sort_by_key(|s| s.component);
    for set in sorted_sets {
        let mut pts: Vec<(Vec<f64>, f64)> = set.points.iter().cloned().zip(set.m_hat.iter().copied()).collect();
        pts.sort_by(|a, b| lex(&a.0, &b.0).then(a.1.total_cmp(&b.1)));
        let first = balls.len();
        for (p, m) in pts {
            match balls[first..].iter_mut().find(|b| dist(&b.1, &p) <= epsilon_n) {
                Some(b) => b.2.push((p, m)),
                None => balls.push((set.component, p.clone(), vec![(p, m)])),
            }
        }
    }
    let mut parent: Vec<usize> = (0..balls.len()).collect();
    for a in 0..balls.len() {
        for b in a + 1..balls.len() {
            if dist(&balls[a].1, &balls[b].1) <= 2.0 * epsilon_n {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                if ra != rb {
                    parent[ra.max(rb)] = ra.min(rb);
                }
            }
        }
    }
    let mut classes: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..balls.len() {
        let r = find(&mut parent, i);
        match classes.iter_mut().find(|c| c.0 == r) {
            Some(c) => c.1.push(i),
            None => classes.push((r, vec![i])),
        }
    }
    let mut out: Vec<(Vec<f64>, Vec<f64>, Vec<usize>)> = classes
        .into_iter()
        .map(|(_, members)| {
            let mut anchor: Option<(&Vec<f64>, f64)> = None;
            for &i in &members {
                for (p, m) in &balls[i].2 {
                    let better = match anchor {
                        None => true,
                        Some((q, v)) => *m < v || (*m == v && lex(p, q).is_lt()),
                    };
                    if better {
                        anchor = Some((p, *m));
                    }
                }
            }
            let anchor = anchor.expect("nonempty ball").0.clone();
            let centre = members
                .iter()
                .map(|&i| &balls[i].1)
                .min_by(|a, b| dist(a, &anchor).total_cmp(&dist(b, &anchor)).then(lex(a, b)))
                .expect("nonempty class")
                .clone();
            let mut active: Vec<usize> = members.iter().map(|&i| balls[i].0).collect();
            active.sort_unstable();
            active.dedup();
            (centre, anchor, active)
        })
        .collect();
    out.sort_by(|a, b| lex(&a.0, &b.0));
    Ok(ContactSetEstimate {
        points: out.iter().map(|c| c.0.clone()).collect(),
        anchors: out.iter().map(|c| c.1.clone()).collect(),
        active_sets: out.into_iter().map(|c| c.2).collect(),
        epsilon_n,
    })
}

/// Per-component Hessian pre-test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianPretest {
    pub pass: Vec<bool>,
    /// `inf det V_hat - threshold`; `None` for an empty (slack) set.
    pub margin: Vec<Option<f64>>,
    pub min_det: Vec<Option<f64>>,
    pub threshold: f64,
}

impl HessianPretest {
    pub fn all_pass(&self) -> bool {
        self.pass.iter().all(|&p| p)
    }
}

/// Pass component `j` iff `inf det V_hat_j` over its set exceeds
/// `b_n max(sqrt(log n / (n h^(d+4))), h)`. Empty sets pass.
pub fn hessian_pretest(sets: &[ComponentSet], b_n: f64, h: f64, n: usize, d: usize) -> HessianPretest {
    let threshold = b_n * hessian_rate(n, d, h);
    let mut out = HessianPretest { pass: vec![], margin: vec![], min_det: vec![], threshold };
    for set in sets {
        let det = set.v_hat.iter().map(determinant).fold(None, |m: Option<f64>, v| {
            Some(m.map_or(v, |m| m.min(v)))
        });
        out.pass.push(det.is_none_or(|v| v > threshold));
        out.margin.push(det.map(|v| v - threshold));
        out.min_det.push(det);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: usize,
    pub flagged: usize,
    pub pass: bool,
    pub margin: Option<f64>,
    pub min_det: Option<f64>,
    pub floor: f64,
    pub skipped_fits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPointReport {
    pub x: Vec<f64>,
    pub anchor: Vec<f64>,
    pub active: Vec<usize>,
    /// `V_hat_j` at the anchor, one per active component.
    pub hessians: Vec<Matrix>,
}

/// Everything the smoothness pre-test computed, ready for JSON output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretestReport {
    pub n: usize,
    pub d: usize,
    pub sequences: Sequences,
    pub region: Region,
    pub components: Vec<ComponentReport>,
    pub contact_points: Vec<ContactPointReport>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub sets: Vec<ComponentSet>,
    #[serde(skip)]
    pub estimate: Option<ContactSetEstimate>,
    #[serde(skip)]
    pub pretest: Option<HessianPretest>,
}

impl PretestReport {
    pub fn passes(&self) -> bool {
        self.components.iter().all(|c| c.pass)
    }

    pub fn estimate(&self) -> &ContactSetEstimate {
        self.estimate.as_ref().expect("estimate present after run_pretest")
    }
}

/// Fit every component on the region grid, estimate contact sets and
/// points, and run the Hessian pre-test.
pub fn run_pretest<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
    cfg: &PretestConfig,
) -> Result<PretestReport> {
    let (n, d) = (data.n(), data.d());
    let seq = cfg.sequences(n, d)?;
    let region = Region::trimmed(data.x(), cfg.trim, cfg.points_per_axis)?;
    let moments = evaluate_moments(model, data, theta)?;
    let fits = fit_grid(data.x(), &moments, region.grid(), seq.h, &cfg.kernel)?;
    let sets: Vec<ComponentSet> = (0..moments.cols())
        .map(|j| contact_set_from_fits(&fits, j, seq.a_n, seq.r_n))
        .collect();
    let estimate = discretize_contact_points(&sets, seq.epsilon_n)?;
    let pretest = hessian_pretest(&sets, seq.b_n, seq.h, n, d);
    let mut warnings = Vec::new();
    if fits.skipped() > 0 {
        warnings.push(format!("{} grid points skipped: singular local fit", fits.skipped()));
    }
    let mut contact_points = Vec::new();
    for ((x, anchor), active) in estimate.points.iter().zip(&estimate.anchors).zip(&estimate.active_sets) {
        if region.distance_to_boundary(anchor) < seq.h {
            warnings.push(format!("contact point {anchor:?} lies within h = {:.4} of the region boundary", seq.h));
        }
        let g = fits.points.iter().position(|p| p == anchor).expect("anchor is a grid point");
        let at = fits.fits[g].as_ref().expect("anchor has a fit");
        contact_points.push(ContactPointReport {
            x: x.clone(),
            anchor: anchor.clone(),
            active: active.clone(),
            hessians: active.iter().map(|&j| at[j].v_hat.clone()).collect(),
        });
    }
    let components = sets
        .iter()
        .enumerate()
        .map(|(j, s)| ComponentReport {
            component: j,
            flagged: s.points.len(),
            pass: pretest.pass[j],
            margin: pretest.margin[j],
            min_det: pretest.min_det[j],
            floor: s.floor,
            skipped_fits: s.skipped,
        })
        .collect();
    Ok(PretestReport {
        n,
        d,
        sequences: seq,
        region,
        components,
        contact_points,
        warnings,
        sets,
        estimate: Some(estimate),
        pretest: Some(pretest),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{boundary_theta, d1_upper_curvature, d1_upper_minimizer, generate_design, two_sided_boundary, Design, DesignConfig};
    use crate::model::{IntervalMeanModel, UpperBoundModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_x(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_row_major(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn quadratic_is_fit_exactly() {
        let x = uniform_x(200, 1, 1);
        let x0 = 0.1;
        let y: Vec<f64> = (0..200)
            .map(|i| {
                let u = x.get(i, 0) - x0;
                1.0 + 2.0 * u + 3.0 * u * u
            })
            .collect();
        for kind in [KernelKind::Biweight, KernelKind::Epanechnikov, KernelKind::Triweight] {
            for h in [0.2, 0.5, 3.0] {
                let f = local_quadratic_fit(&x, &y, &[x0], h, &KernelSpec::new(kind)).unwrap();
                assert!((f.m_hat - 1.0).abs() < 1e-8);
                assert!((f.grad[0] - 2.0).abs() < 1e-8);
                assert!((f.v_hat.get(0, 0) - 6.0).abs() < 1e-8);
            }
        }
        let c = vec![4.5; 200];
        let f = local_quadratic_fit(&x, &c, &[0.0], 0.4, &KernelSpec::default()).unwrap();
        assert!((f.m_hat - 4.5).abs() < 1e-10 && f.grad[0].abs() < 1e-9 && f.v_hat.get(0, 0).abs() < 1e-7);
    }

    #[test]
    fn quadratic_is_fit_exactly_in_two_dimensions() {
        let x = uniform_x(400, 2, 2);
        let x0 = [0.1, -0.2];
        // m = 1 + x1 - 2 x2 + (2 u1^2 + 2 u1 u2 + 4 u2^2)/2 around x0
        let v = [[2.0, 1.0], [1.0, 4.0]];
        let y: Vec<f64> = (0..400)
            .map(|i| {
                let u = [x.get(i, 0) - x0[0], x.get(i, 1) - x0[1]];
                let q: f64 = (0..2).map(|a| (0..2).map(|b| u[a] * v[a][b] * u[b]).sum::<f64>()).sum();
                1.0 + u[0] - 2.0 * u[1] + 0.5 * q
            })
            .collect();
        let f = local_quadratic_fit(&x, &y, &x0, 0.7, &KernelSpec::default()).unwrap();
        assert!((f.m_hat - 1.0).abs() < 1e-8);
        assert!((f.grad[0] - 1.0).abs() < 1e-8 && (f.grad[1] + 2.0).abs() < 1e-8);
        for a in 0..2 {
            for b in 0..2 {
                assert!((f.v_hat.get(a, b) - v[a][b]).abs() < 1e-8);
            }
        }
        assert!((determinant(&f.v_hat) - 7.0).abs() < 1e-7);
    }

    #[test]
    fn too_few_points_is_singular() {
        let x = Matrix::column(&[0.0, 0.1, 5.0]);
        let err = local_quadratic_fit(&x, &[1.0, 2.0, 3.0], &[0.0], 0.5, &KernelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::SingularFit { effective_n: 2 }));
        // duplicated abscissae: enough points, rank 1
        let x = Matrix::column(&[0.0; 10]);
        let err = local_quadratic_fit(&x, &[1.0; 10], &[0.0], 0.5, &KernelSpec::default()).unwrap_err();
        assert!(matches!(err, Error::SingularFit { effective_n: 10 }));
    }

    proptest! {
        #[test]
        fn fits_are_translation_equivariant(c in -5.0f64..5.0, seed in 0u64..1000) {
            let x = uniform_x(150, 1, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let y: Vec<f64> = (0..150).map(|_| rng.random::<f64>()).collect();
            let shifted = Matrix::column(&x.col(0).iter().map(|v| v + c).collect::<Vec<_>>());
            let k = KernelSpec::default();
            let a = local_quadratic_fit(&x, &y, &[0.0], 0.6, &k).unwrap();
            let b = local_quadratic_fit(&shifted, &y, &[c], 0.6, &k).unwrap();
            prop_assert!((a.m_hat - b.m_hat).abs() < 1e-8);
            prop_assert!((a.v_hat.get(0, 0) - b.v_hat.get(0, 0)).abs() < 1e-6);
        }

        #[test]
        fn far_points_do_not_change_a_fit(far in 2.0f64..100.0, yv in -10.0f64..10.0) {
            let x = uniform_x(100, 1, 3);
            let y: Vec<f64> = x.col(0).iter().map(|v| v.sin()).collect();
            let k = KernelSpec::default();
            let a = local_quadratic_fit(&x, &y, &[0.0], 0.5, &k).unwrap();
            let mut xs = x.col(0);
            xs.push(far);
            let mut ys = y.clone();
            ys.push(yv);
            let b = local_quadratic_fit(&Matrix::column(&xs), &ys, &[0.0], 0.5, &k).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn discretization_ignores_input_order(perm_seed in 0u64..1000) {
            let pts: Vec<Vec<f64>> = [0.0, 0.05, 0.1, 0.9, 0.95, 2.0].iter().map(|&v| vec![v]).collect();
            let m: Vec<f64> = vec![0.3, 0.1, 0.2, 0.0, 0.4, 0.5];
            let set = ComponentSet { component: 0, points: pts.clone(), m_hat: m.clone(), v_hat: vec![], floor: 0.0, threshold: 1.0, skipped: 0 };
            let mut idx: Vec<usize> = (0..pts.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let shuffled = ComponentSet {
                points: idx.iter().map(|&i| pts[i].clone()).collect(),
                m_hat: idx.iter().map(|&i| m[i]).collect(),
                ..set.clone()
            };
            let a = discretize_contact_points(&[set], 0.2).unwrap();
            let b = discretize_contact_points(&[shuffled], 0.2).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn larger_a_n_never_shrinks_the_set(a in 0.01f64..5.0, extra in 0.0f64..5.0) {
            let data = generate_design(&DesignConfig::new(Design::D1, 400, 5)).unwrap();
            let moments = evaluate_moments(&UpperBoundModel::default(), &data, &boundary_theta(Design::D1)).unwrap();
            let region = Region::trimmed(data.x(), 0.01, 41).unwrap();
            let fits = fit_grid(data.x(), &moments, region.grid(), 0.5, &KernelSpec::default()).unwrap();
            let small = contact_set_from_fits(&fits, 0, a, 0.05);
            let big = contact_set_from_fits(&fits, 0, a + extra, 0.05);
            for p in &small.points {
                prop_assert!(big.points.contains(p));
            }
        }
    }

    #[test]
    fn bandwidth_formula() {
        assert_eq!(default_bandwidth(1, 1), 0.0);
        assert!((default_bandwidth(1000, 1) - 0.49129).abs() < 1e-5);
        let mut prev = f64::INFINITY;
        for n in 3..2000 {
            let h = default_bandwidth(n, 2);
            assert!(h < prev);
            prev = h;
        }
    }

    #[test]
    fn slack_moment_has_empty_set_and_passes() {
        let x = uniform_x(300, 1, 4);
        let y = vec![1.0; 300];
        let m = Matrix::column(&y);
        let region = Region::trimmed(&x, 0.01, 51).unwrap();
        let fits = fit_grid(&x, &m, region.grid(), 0.5, &KernelSpec::default()).unwrap();
        let set = contact_set_from_fits(&fits, 0, 1.0, 0.05);
        assert!(set.points.is_empty());
        let pre = hessian_pretest(&[set], 1.0, 0.5, 300, 1);
        assert!(pre.pass[0] && pre.margin[0].is_none());
    }

    #[test]
    fn discretization_examples() {
        let one = |j: usize, p: f64| ComponentSet {
            component: j,
            points: vec![vec![p]],
            m_hat: vec![0.0],
            v_hat: vec![],
            floor: 0.0,
            threshold: 0.0,
            skipped: 0,
        };
        let est = discretize_contact_points(&[one(0, 0.3), one(1, 0.3)], 0.1).unwrap();
        assert_eq!(est.len(), 1);
        assert_eq!(est.active_sets[0], vec![0, 1]);
        let est = discretize_contact_points(&[one(0, 0.0), one(1, 0.3)], 0.1).unwrap();
        assert_eq!(est.len(), 2);
        assert_eq!(est.active_sets, vec![vec![0], vec![1]]);
        assert!(discretize_contact_points(&[], 0.1).unwrap().is_empty());
        assert!(discretize_contact_points(&[], 0.0).is_err());
    }

    #[test]
    fn singular_hessian_fails() {
        // m = x1^2 + x2^4 near 0: second derivative in x2 vanishes
        let x = uniform_x(3000, 2, 6);
        let y: Vec<f64> = (0..3000).map(|i| x.get(i, 0).powi(2) + x.get(i, 1).powi(4)).collect();
        let f = local_quadratic_fit(&x, &y, &[0.0, 0.0], 0.3, &KernelSpec::default()).unwrap();
        assert!((f.v_hat.get(0, 0) - 2.0).abs() < 0.1);
        assert!(determinant(&f.v_hat) < 0.5);
        let set = ComponentSet {
            component: 0,
            points: vec![vec![0.0, 0.0]],
            m_hat: vec![f.m_hat],
            v_hat: vec![f.v_hat.clone()],
            floor: 0.0,
            threshold: 0.0,
            skipped: 0,
        };
        assert!(!hessian_pretest(&[set], 0.5 * 3000f64.ln(), 0.3, 3000, 2).pass[0]);

        let quad = ComponentSet {
            component: 0,
            points: vec![vec![0.0]],
            m_hat: vec![0.0],
            v_hat: vec![Matrix::from_rows(&[vec![6.0]])],
            floor: 0.0,
            threshold: 0.0,
            skipped: 0,
        };
        assert!(hessian_pretest(&[quad], 0.01, 0.3, 3000, 1).pass[0]);
    }

    #[test]
    fn design_one_curvature_at_the_minimizer_on_average() {
        let xs = d1_upper_minimizer();
        let truth = d1_upper_curvature(xs);
        let h = default_bandwidth(5000, 1);
        let reps = 20;
        let mut total = 0.0;
        for seed in 0..reps {
            let data = generate_design(&DesignConfig::new(Design::D1, 5000, 100 + seed)).unwrap();
            let moments = evaluate_moments(&UpperBoundModel::default(), &data, &boundary_theta(Design::D1)).unwrap();
            let f = local_quadratic_fit(data.x(), &moments.col(0), &[xs], h, &KernelSpec::default()).unwrap();
            total += f.v_hat.get(0, 0);
        }
        let mean = total / reps as f64;
        assert!((mean - truth).abs() < 0.25 * truth, "{mean} vs {truth}");
    }

    #[test]
    fn design_pretests() {
        let data = generate_design(&DesignConfig::new(Design::D1, 5000, 22)).unwrap();
        let r = run_pretest(&UpperBoundModel::default(), &data, &boundary_theta(Design::D1), &PretestConfig::default()).unwrap();
        assert_eq!(r.estimate().len(), 1);
        assert!((r.estimate().points[0][0] - d1_upper_minimizer()).abs() < r.sequences.epsilon_n);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("contact_points"));

        let data = generate_design(&DesignConfig::new(Design::D2, 5000, 23)).unwrap();
        let r = run_pretest(&UpperBoundModel::default(), &data, &boundary_theta(Design::D2), &PretestConfig::default()).unwrap();
        let set = &r.sets[0];
        assert!(set.points.iter().any(|p| (0.3..0.7).contains(&p[0])));
    }

    #[test]
    fn two_sided_boundary_gives_two_points() {
        let theta = two_sided_boundary(Design::D1);
        let data = generate_design(&DesignConfig::new(Design::D1, 5000, 24)).unwrap();
        let r = run_pretest(&IntervalMeanModel::default(), &data, &[theta.0, theta.1], &PretestConfig::default()).unwrap();
        let est = r.estimate();
        assert_eq!(est.len(), 2, "{est:?}");
        let mut all: Vec<usize> = est.active_sets.concat();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1]);
        assert!(est.active_sets.iter().all(|a| a.len() == 1));
    }
}
