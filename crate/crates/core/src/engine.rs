//! Exact computation of the box-indexed infimum
//! `T_n = inf_{s,t} E_n m(W_i, theta) 1{s < X_i < s + t}`, per component.
//!
//! The empirical objective only changes when a face of the box crosses a
//! data coordinate, so the infimum over open boxes equals the minimum over
//! closed boxes whose faces sit on observed coordinates (plus the empty box,
//! which attains zero). Points that tie in a coordinate cannot be separated
//! in that coordinate and are handled as one block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{evaluate_moments, Aggregator, Dataset, MomentModel};
use crate::numeric::{exact_sum, Matrix};

/// Default cap on `n` for the exact search when `d >= 2`.
pub const DEFAULT_BOX_CAP: usize = 400;

/// The open box `{x : s < x < s + t}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenBox {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
}

impl OpenBox {
    /// A box selecting nothing (`t = 0`).
    pub fn empty(d: usize) -> Self {
        Self { s: vec![0.0; d], t: vec![0.0; d] }
    }

    pub fn is_empty(&self) -> bool {
        self.t.iter().any(|&t| t <= 0.0)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.s.iter().zip(&self.t))
            .all(|(&xi, (&s, &t))| s < xi && xi < s + t)
    }

    /// `(1/n) sum_{i: X_i in box} y_i`, summed exactly.
    pub fn mean_over(&self, x: &Matrix, y: &[f64]) -> f64 {
        let n = x.rows() as f64;
        exact_sum((0..x.rows()).filter(|&i| self.contains(x.row(i))).map(|i| y[i])) / n
    }
}

/// Componentwise infima of the box-indexed sample moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSResult {
    /// One value per moment component, each `<= 0`.
    pub inf_values: Vec<f64>,
    pub argmin_boxes: Vec<OpenBox>,
    pub n: usize,
    /// Exponent used when the statistic is reported in scaled form.
    pub scaling_exponent: f64,
}

impl KSResult {
    /// `S(T_n)`.
    pub fn aggregate(&self, s: &Aggregator) -> f64 {
        s.apply(&self.inf_values)
    }
}

/// `(d + 2) / (d + 4)`, the exponent under quadratic tangency.
pub fn smooth_rate(d: usize) -> f64 {
    (d as f64 + 2.0) / (d as f64 + 4.0)
}

/// `(d + gamma) / (d + 2 gamma)`.
pub fn shape_rate(d: usize, gamma: f64) -> f64 {
    (d as f64 + gamma) / (d as f64 + 2.0 * gamma)
}

/// Lexicographically smallest `(lo, hi)` block run with the most negative
/// sum, or `None` when no run is negative.
fn min_run(sums: &[f64]) -> Option<(usize, usize)> {
    let m = sums.len();
    if m == 0 {
        return None;
    }
    let mut prefix = Vec::with_capacity(m + 1);
    prefix.push(0.0);
    let mut acc = 0.0;
    for &v in sums {
        acc += v;
        prefix.push(acc);
    }
    // suffix[k] = (min prefix[k..=m], earliest index attaining it)
    let mut suffix = vec![(f64::INFINITY, m); m + 2];
    for k in (1..=m).rev() {
        suffix[k] = if prefix[k] <= suffix[k + 1].0 { (prefix[k], k) } else { suffix[k + 1] };
    }
    let mut best = 0.0;
    let mut arg = None;
    for i in 0..m {
        let (v, j) = suffix[i + 1];
        let c = v - prefix[i];
        if c < best {
            best = c;
            arg = Some((i, j - 1));
        }
    }
    arg
}

/// Boundary of an open interval that isolates distinct values `lo..=hi`.
fn isolate(values: &[f64], lo: usize, hi: usize) -> (f64, f64) {
    let s = if lo == 0 { values[0] - 1.0 } else { 0.5 * (values[lo - 1] + values[lo]) };
    let e = if hi + 1 == values.len() {
        values[hi] + 1.0
    } else {
        0.5 * (values[hi] + values[hi + 1])
    };
    (s, e - s)
}

/// Exact one-dimensional infimum. `x` must be sorted ascending; equal `x`
/// values form one block. Returns `min(0, min_run sum / n)` and an open
/// interval containing exactly the minimizing points.
pub fn min_interval_1d(x: &[f64], y: &[f64]) -> Result<(f64, OpenBox)> {
    if x.len() != y.len() {
        return Err(Error::Input(format!("x has {} values but y has {}", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(Error::Input("empty sample".into()));
    }
    if x.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Input("x must be sorted ascending".into()));
    }
    let mut values = Vec::new();
    let mut starts = Vec::new();
    let mut sums = Vec::new();
    for (i, (&xi, &yi)) in x.iter().zip(y).enumerate() {
        if values.last() == Some(&xi) {
            *sums.last_mut().unwrap() += yi;
        } else {
            values.push(xi);
            starts.push(i);
            sums.push(yi);
        }
    }
    starts.push(x.len());
    match min_run(&sums) {
        None => Ok((0.0, OpenBox::empty(1))),
        Some((lo, hi)) => {
            let value = exact_sum(y[starts[lo]..starts[hi + 1]].iter().copied()) / x.len() as f64;
            let (s, t) = isolate(&values, lo, hi);
            Ok((value.min(0.0), OpenBox { s: vec![s], t: vec![t] }))
        }
    }
}

/// Distinct sorted values of column `k` and each row's rank among them.
fn ranks_of(x: &Matrix, k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut vals = x.col(k);
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let rank = (0..x.rows())
        .map(|i| vals.partition_point(|&v| v < x.get(i, k)))
        .collect();
    (vals, rank)
}

struct BoxSearch<'a> {
    d: usize,
    y: &'a [f64],
    rank: Vec<Vec<usize>>,
    best_sum: f64,
    best: Option<Vec<(usize, usize)>>,
    cur: Vec<(usize, usize)>,
}

impl BoxSearch<'_> {
    /// Points are grouped by their rank in `dim`; returns (rank, points) groups.
    fn groups(&self, dim: usize, pts: &[usize]) -> Vec<(usize, Vec<usize>)> {
        let mut sorted = pts.to_vec();
        sorted.sort_by_key(|&i| (self.rank[dim][i], i));
        let mut out: Vec<(usize, Vec<usize>)> = Vec::new();
        for i in sorted {
            let r = self.rank[dim][i];
            match out.last_mut() {
                Some((rr, g)) if *rr == r => g.push(i),
                _ => out.push((r, vec![i])),
            }
        }
        out
    }

    fn search(&mut self, dim: usize, pts: &[usize]) {
        let last = self.d - 1;
        let groups = self.groups(dim, pts);
        for a in 0..groups.len() {
            let mut subset: Vec<usize> = Vec::new();
            for b in a..groups.len() {
                if dim + 1 == last {
                    for &i in &groups[b].1 {
                        let key = (self.rank[last][i], i);
                        let pos = subset.partition_point(|&j| (self.rank[last][j], j) < key);
                        subset.insert(pos, i);
                    }
                } else {
                    subset.extend_from_slice(&groups[b].1);
                }
                self.cur[dim] = (groups[a].0, groups[b].0);
                if dim + 1 == last {
                    self.scan_last(&subset);
                } else {
                    self.search(dim + 1, &subset);
                }
            }
        }
    }

    /// `pts` sorted by rank in the last dimension.
    fn scan_last(&mut self, pts: &[usize]) {
        let last = self.d - 1;
        let mut block_rank: Vec<usize> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for &i in pts {
            let r = self.rank[last][i];
            if block_rank.last() == Some(&r) {
                *sums.last_mut().unwrap() += self.y[i];
            } else {
                block_rank.push(r);
                sums.push(self.y[i]);
            }
        }
        if let Some((lo, hi)) = min_run(&sums) {
            let total: f64 = sums[lo..=hi].iter().sum();
            if total < self.best_sum {
                self.best_sum = total;
                let mut b = self.cur.clone();
                b[last] = (block_rank[lo], block_rank[hi]);
                self.best = Some(b);
            }
        }
    }
}

/// Exact infimum over boxes in any dimension by enumerating closed boxes
/// with faces on data coordinates. Refuses `n > cap` when `d >= 2`.
pub fn min_box_exact(x: &Matrix, y: &[f64], cap: usize) -> Result<(f64, OpenBox)> {
    let (n, d) = (x.rows(), x.cols());
    if y.len() != n {
        return Err(Error::Input(format!("x has {n} rows but y has {} values", y.len())));
    }
    if n == 0 || d == 0 {
        return Err(Error::Input("empty sample".into()));
    }
    if d == 1 {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x.get(a, 0).total_cmp(&x.get(b, 0)).then(a.cmp(&b)));
        let xs: Vec<f64> = order.iter().map(|&i| x.get(i, 0)).collect();
        let ys: Vec<f64> = order.iter().map(|&i| y[i]).collect();
        return min_interval_1d(&xs, &ys);
    }
    if n > cap {
        return Err(Error::SizeCap { n, cap, d });
    }
    let (values, rank): (Vec<_>, Vec<_>) = (0..d).map(|k| ranks_of(x, k)).unzip();
    let mut search = BoxSearch {
        d,
        y,
        rank,
        best_sum: 0.0,
        best: None,
        cur: vec![(0, 0); d],
    };
    let all: Vec<usize> = (0..n).collect();
    search.search(0, &all);
    match search.best {
        None => Ok((0.0, OpenBox::empty(d))),
        Some(b) => {
            let inside = |i: usize| (0..d).all(|k| (b[k].0..=b[k].1).contains(&search.rank[k][i]));
            let value = exact_sum((0..n).filter(|&i| inside(i)).map(|i| y[i])) / n as f64;
            let (s, t) = (0..d).map(|k| isolate(&values[k], b[k].0, b[k].1)).unzip();
            Ok((value.min(0.0), OpenBox { s, t }))
        }
    }
}

/// One-dimensional design sorted once, reused across parameter values and
/// subsamples.
#[derive(Debug, Clone)]
struct SortedLine {
    order: Vec<usize>,
    rank: Vec<usize>,
    /// Block id of each rank position (tied x share a block).
    block_of_rank: Vec<usize>,
    values: Vec<f64>,
}

impl SortedLine {
    fn new(x: &Matrix) -> Self {
        let n = x.rows();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| x.get(a, 0).total_cmp(&x.get(b, 0)).then(a.cmp(&b)));
        let mut rank = vec![0; n];
        let mut block_of_rank = Vec::with_capacity(n);
        let mut values: Vec<f64> = Vec::new();
        for (r, &i) in order.iter().enumerate() {
            rank[i] = r;
            let v = x.get(i, 0);
            if values.last() != Some(&v) {
                values.push(v);
            }
            block_of_rank.push(values.len() - 1);
        }
        Self { order, rank, block_of_rank, values }
    }

    /// Infimum and witness for the rows listed in `ranks` (sorted ascending),
    /// normalized by `ranks.len()`.
    fn infimum(&self, ranks: &[usize], y: impl Fn(usize) -> f64) -> (f64, Option<(usize, usize)>) {
        let mut starts = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        let mut blocks = Vec::new();
        for (p, &r) in ranks.iter().enumerate() {
            let b = self.block_of_rank[r];
            let v = y(self.order[r]);
            if blocks.last() == Some(&b) {
                *sums.last_mut().unwrap() += v;
            } else {
                blocks.push(b);
                starts.push(p);
                sums.push(v);
            }
        }
        starts.push(ranks.len());
        match min_run(&sums) {
            None => (0.0, None),
            Some((lo, hi)) => {
                let vals = ranks[starts[lo]..starts[hi + 1]].iter().map(|&r| y(self.order[r]));
                let value = (exact_sum(vals) / ranks.len() as f64).min(0.0);
                (value, Some((blocks[lo], blocks[hi])))
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Layout {
    Line(SortedLine),
    Boxes(Matrix),
}

/// Statistic engine bound to one design matrix `x`.
#[derive(Debug, Clone)]
pub struct KsEngine {
    layout: Layout,
    n: usize,
    d: usize,
    cap: usize,
}

impl KsEngine {
    pub fn new(x: &Matrix) -> Self {
        Self::with_cap(x, DEFAULT_BOX_CAP)
    }

    pub fn with_cap(x: &Matrix, cap: usize) -> Self {
        let layout = if x.cols() == 1 {
            Layout::Line(SortedLine::new(x))
        } else {
            Layout::Boxes(x.clone())
        };
        Self { layout, n: x.rows(), d: x.cols(), cap }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    /// Full-sample infima of every column of `moments`.
    pub fn statistic(&self, moments: &Matrix) -> Result<KSResult> {
        if moments.rows() != self.n {
            return Err(Error::Dimension(format!(
                "moments have {} rows, design has {}",
                moments.rows(),
                self.n
            )));
        }
        let mut inf_values = Vec::with_capacity(moments.cols());
        let mut argmin_boxes = Vec::with_capacity(moments.cols());
        for j in 0..moments.cols() {
            let (v, b) = match &self.layout {
                Layout::Line(line) => {
                    let ranks: Vec<usize> = (0..self.n).collect();
                    let (v, run) = line.infimum(&ranks, |i| moments.get(i, j));
                    let b = run.map_or_else(
                        || OpenBox::empty(1),
                        |(lo, hi)| {
                            let (s, t) = isolate(&line.values, lo, hi);
                            OpenBox { s: vec![s], t: vec![t] }
                        },
                    );
                    (v, b)
                }
                Layout::Boxes(x) => min_box_exact(x, &moments.col(j), self.cap)?,
            };
            inf_values.push(v);
            argmin_boxes.push(b);
        }
        Ok(KSResult { inf_values, argmin_boxes, n: self.n, scaling_exponent: smooth_rate(self.d) })
    }

    /// Infima on the subsample `rows` (original row indices), normalized by
    /// the subsample size.
    pub fn subsample_infima(&self, moments: &Matrix, rows: &[usize]) -> Result<Vec<f64>> {
        match &self.layout {
            Layout::Line(line) => {
                let mut ranks: Vec<usize> = rows.iter().map(|&i| line.rank[i]).collect();
                ranks.sort_unstable();
                Ok((0..moments.cols())
                    .map(|j| line.infimum(&ranks, |i| moments.get(i, j)).0)
                    .collect())
            }
            Layout::Boxes(x) => {
                let sx = x.select_rows(rows);
                (0..moments.cols())
                    .map(|j| {
                        let y: Vec<f64> = rows.iter().map(|&i| moments.get(i, j)).collect();
                        min_box_exact(&sx, &y, self.cap).map(|r| r.0)
                    })
                    .collect()
            }
        }
    }
}

/// `T_n(theta)` for a model and dataset.
pub fn ks_statistic<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
) -> Result<KSResult> {
    let moments = evaluate_moments(model, data, theta)?;
    KsEngine::new(data.x()).statistic(&moments)
}

/// `n^beta * S(T_n)`.
pub fn scaled_statistic(result: &KSResult, s: &Aggregator, beta: f64) -> f64 {
    (result.n as f64).powf(beta) * result.aggregate(s)
}
