//! Datasets, moment functions and the aggregator `S`.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Matrix;

/// Observations: `x` holds the conditioning variables (n x d), `w` the raw
/// outcome columns the moment model reads (n x p).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    x: Matrix,
    w: Matrix,
    w_names: Vec<String>,
}

impl Dataset {
    /// `x` entries must be finite. `w` entries may be infinite (interval
    /// endpoints carrying no information); NaN is rejected.
    pub fn new(x: Matrix, w: Matrix, w_names: Vec<String>) -> Result<Self> {
        if x.rows() == 0 {
            return Err(Error::Input("dataset has no rows".into()));
        }
        if x.cols() == 0 {
            return Err(Error::Input("dataset has no conditioning variables".into()));
        }
        if x.rows() != w.rows() {
            return Err(Error::Dimension(format!(
                "x has {} rows but w has {}",
                x.rows(),
                w.rows()
            )));
        }
        if w_names.len() != w.cols() {
            return Err(Error::Dimension(format!(
                "{} names for {} w columns",
                w_names.len(),
                w.cols()
            )));
        }
        if let Some(v) = x.as_slice().iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite conditioning value {v}")));
        }
        if w.as_slice().iter().any(|v| v.is_nan()) {
            return Err(Error::Input("NaN outcome value".into()));
        }
        Ok(Self { x, w, w_names })
    }

    /// Interval data with columns named `wl` and `wh`.
    pub fn interval(x: Matrix, wl: &[f64], wh: &[f64]) -> Result<Self> {
        if wl.len() != wh.len() {
            return Err(Error::Dimension("wl and wh lengths differ".into()));
        }
        let w = Matrix::from_row_major(
            wl.len(),
            2,
            wl.iter().zip(wh).flat_map(|(&l, &h)| [l, h]).collect(),
        );
        Self::new(x, w, vec!["wl".into(), "wh".into()])
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }

    pub fn w_column(&self, name: &str) -> Option<usize> {
        self.w_names.iter().position(|c| c == name)
    }

    /// Rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            w: self.w.select_rows(idx),
            w_names: self.w_names.clone(),
        }
    }
}

/// Which CSV columns play which role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub x: Vec<String>,
    pub wl: String,
    pub wh: String,
}

impl Default for ColumnRoles {
    fn default() -> Self {
        Self { x: vec!["x".into()], wl: "wl".into(), wh: "wh".into() }
    }
}

/// Reads interval data from a headed CSV. Empty `wl` cells become -inf and
/// empty `wh` cells +inf.
pub fn read_interval_csv<R: std::io::Read>(reader: R, roles: &ColumnRoles) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let find = |name: &str| {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Input(format!("column '{name}' not found in CSV header")))
    };
    let x_cols = roles.x.iter().map(|c| find(c)).collect::<Result<Vec<_>>>()?;
    if x_cols.is_empty() {
        return Err(Error::Input("no x columns configured".into()));
    }
    let (wl_col, wh_col) = (find(&roles.wl)?, find(&roles.wh)?);

    let parse = |s: &str, line: u64, empty: f64| -> Result<f64> {
        if s.is_empty() {
            return Ok(empty);
        }
        s.parse::<f64>()
            .map_err(|_| Error::Input(format!("line {line}: cannot parse '{s}' as a number")))
    };

    let mut x = Vec::new();
    let (mut wl, mut wh) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        for &c in &x_cols {
            let s = rec.get(c).unwrap_or("");
            if s.is_empty() {
                return Err(Error::Input(format!("line {line}: empty x value")));
            }
            x.push(parse(s, line, f64::NAN)?);
        }
        wl.push(parse(rec.get(wl_col).unwrap_or(""), line, f64::NEG_INFINITY)?);
        wh.push(parse(rec.get(wh_col).unwrap_or(""), line, f64::INFINITY)?);
    }
    if wl.is_empty() {
        return Err(Error::Input("CSV has no data rows".into()));
    }
    let x = Matrix::from_row_major(wl.len(), x_cols.len(), x);
    Dataset::interval(x, &wl, &wh)
}

pub fn read_interval_csv_path(path: &Path, roles: &ColumnRoles) -> Result<Dataset> {
    let f = std::fs::File::open(path)?;
    read_interval_csv(f, roles)
}

/// A vector of conditional moment functions `m(W, theta)`; the null
/// hypothesis is `E[m(W, theta) | X] >= 0`.
pub trait MomentModel: Send + Sync {
    /// Number of moment components.
    fn d_y(&self) -> usize;

    /// Length of `theta` for conditioning variables of dimension `d`.
    fn n_params(&self, d: usize) -> usize;

    /// Almost-sure bound on `|m_j|`; `f64::INFINITY` when not known.
    fn bound(&self) -> f64;

    /// Writes `m(w, theta)` into `out` (length `d_y`).
    fn evaluate(&self, x: &[f64], w: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Which outcome columns hold the interval endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntervalColumns {
    pub wl: usize,
    pub wh: usize,
    /// Prepend a constant to `x` in the index `x'theta`.
    pub intercept: bool,
}

impl Default for IntervalColumns {
    fn default() -> Self {
        Self { wl: 0, wh: 1, intercept: true }
    }
}

fn linear_index(x: &[f64], theta: &[f64], intercept: bool) -> f64 {
    if intercept {
        theta[0] + x.iter().zip(&theta[1..]).map(|(a, b)| a * b).sum::<f64>()
    } else {
        x.iter().zip(theta).map(|(a, b)| a * b).sum()
    }
}

/// Interval mean regression: `m = (W^H - x'theta, x'theta - W^L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMeanModel {
    pub columns: IntervalColumns,
    /// Known bound on |m|; rows exceeding it are rejected.
    pub bound: f64,
}

impl IntervalMeanModel {
    pub fn new(columns: IntervalColumns) -> Self {
        Self { columns, bound: f64::INFINITY }
    }

    pub fn with_bound(mut self, bound: f64) -> Self {
        self.bound = bound;
        self
    }
}

impl Default for IntervalMeanModel {
    fn default() -> Self {
        Self::new(IntervalColumns::default())
    }
}

impl MomentModel for IntervalMeanModel {
    fn d_y(&self) -> usize {
        2
    }

    fn n_params(&self, d: usize) -> usize {
        d + usize::from(self.columns.intercept)
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn evaluate(&self, x: &[f64], w: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let (lo, hi) = (w[self.columns.wl], w[self.columns.wh]);
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Input(
                "interval mean model needs finite endpoints; infinite rows violate the moment bound".into(),
            ));
        }
        let idx = linear_index(x, theta, self.columns.intercept);
        out[0] = hi - idx;
        out[1] = idx - lo;
        Ok(())
    }
}

/// Interval median regression:
/// `m = (1{x'theta <= W^H} - 1/2, 1/2 - 1{x'theta <= W^L})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct IntervalMedianModel {
    pub columns: IntervalColumns,
}

impl IntervalMedianModel {
    pub fn new(columns: IntervalColumns) -> Self {
        Self { columns }
    }
}

impl MomentModel for IntervalMedianModel {
    fn d_y(&self) -> usize {
        2
    }

    fn n_params(&self, d: usize) -> usize {
        d + usize::from(self.columns.intercept)
    }

    fn bound(&self) -> f64 {
        0.5
    }

    fn evaluate(&self, x: &[f64], w: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let idx = linear_index(x, theta, self.columns.intercept);
        let ind = |b: bool| if b { 1.0 } else { 0.0 };
        out[0] = ind(idx <= w[self.columns.wh]) - 0.5;
        out[1] = 0.5 - ind(idx <= w[self.columns.wl]);
        Ok(())
    }
}

type MomentFn = dyn Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync;

/// User-supplied moment function.
pub struct CallbackModel {
    d_y: usize,
    n_params: usize,
    bound: f64,
    f: Box<MomentFn>,
}

impl CallbackModel {
    pub fn new<F>(d_y: usize, n_params: usize, bound: f64, f: F) -> Self
    where
        F: Fn(&[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self { d_y, n_params, bound, f: Box::new(f) }
    }
}

impl fmt::Debug for CallbackModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CallbackModel")
            .field("d_y", &self.d_y)
            .field("n_params", &self.n_params)
            .field("bound", &self.bound)
            .finish_non_exhaustive()
    }
}

impl MomentModel for CallbackModel {
    fn d_y(&self) -> usize {
        self.d_y
    }

    fn n_params(&self, _d: usize) -> usize {
        self.n_params
    }

    fn bound(&self) -> f64 {
        self.bound
    }

    fn evaluate(&self, x: &[f64], w: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        (self.f)(x, w, theta, out);
        Ok(())
    }
}

/// Only the `W^H` component of the interval mean model; the harness builds
/// its confidence intervals from this single inequality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct UpperBoundModel {
    pub columns: IntervalColumns,
}

impl MomentModel for UpperBoundModel {
    fn d_y(&self) -> usize {
        1
    }

    fn n_params(&self, d: usize) -> usize {
        d + usize::from(self.columns.intercept)
    }

    fn bound(&self) -> f64 {
        f64::INFINITY
    }

    fn evaluate(&self, x: &[f64], w: &[f64], theta: &[f64], out: &mut [f64]) -> Result<()> {
        let hi = w[self.columns.wh];
        if !hi.is_finite() {
            return Err(Error::Input("upper-bound model needs a finite W^H".into()));
        }
        out[0] = hi - linear_index(x, theta, self.columns.intercept);
        Ok(())
    }
}

/// `m(W_i, theta)` for every row, as an n x d_y matrix.
pub fn evaluate_moments<M: MomentModel + ?Sized>(
    model: &M,
    data: &Dataset,
    theta: &[f64],
) -> Result<Matrix> {
    let expected = model.n_params(data.d());
    if theta.len() != expected {
        return Err(Error::ParameterArity { expected, got: theta.len() });
    }
    let d_y = model.d_y();
    let bound = model.bound();
    let mut out = Matrix::zeros(data.n(), d_y);
    for i in 0..data.n() {
        let row = out.row_mut(i);
        model.evaluate(data.x().row(i), data.w().row(i), theta, row)?;
        for &v in row.iter() {
            if !v.is_finite() {
                return Err(Error::Input(format!("row {i}: non-finite moment value")));
            }
            if v.abs() > bound {
                return Err(Error::Input(format!(
                    "row {i}: |m| = {} exceeds the model bound {bound}",
                    v.abs()
                )));
            }
        }
    }
    Ok(out)
}

/// The map `S` from the vector of infima to a nonnegative statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Aggregator {
    /// `max_k |min(v_k, 0)|`.
    #[default]
    NegSupNorm,
    /// `(sum_k |min(v_k, 0)|^p)^(1/p)`.
    NegPNorm { p: f64 },
}

impl Aggregator {
    pub fn apply(&self, v: &[f64]) -> f64 {
        let neg = v.iter().map(|&x| (-x).max(0.0));
        match *self {
            Aggregator::NegSupNorm => neg.fold(0.0, f64::max),
            Aggregator::NegPNorm { p } => neg.map(|x| x.powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

/// `S(v)`.
pub fn aggregate(s: &Aggregator, v: &[f64]) -> f64 {
    s.apply(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_row(x: f64, wl: f64, wh: f64) -> Dataset {
        Dataset::interval(Matrix::column(&[x]), &[wl], &[wh]).unwrap()
    }

    #[test]
    fn mean_model_substitution() {
        let data = one_row(0.5, 0.0, 1.1);
        let m = evaluate_moments(&IntervalMeanModel::default(), &data, &[1.05, 0.1]).unwrap();
        assert!((m.get(0, 0) - 0.0).abs() < 1e-12);
        assert!((m.get(0, 1) - 1.10).abs() < 1e-12);
    }

    #[test]
    fn median_model_indicators() {
        let data = one_row(2.0, 1.0, 3.0);
        let m = evaluate_moments(&IntervalMedianModel::default(), &data, &[0.0, 1.0]).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn median_model_accepts_infinite_endpoints() {
        let data = one_row(0.0, f64::NEG_INFINITY, f64::INFINITY);
        let m = evaluate_moments(&IntervalMedianModel::default(), &data, &[0.0, 1.0]).unwrap();
        assert_eq!(m.row(0), &[0.5, 0.5]);
    }

    #[test]
    fn mean_model_rejects_infinite_rows() {
        let data = one_row(0.0, 0.0, f64::INFINITY);
        let err = evaluate_moments(&IntervalMeanModel::default(), &data, &[0.0, 1.0]);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn arity_is_checked() {
        let data = one_row(0.0, 0.0, 1.0);
        let err = evaluate_moments(&IntervalMeanModel::default(), &data, &[0.0]);
        assert!(matches!(err, Err(Error::ParameterArity { expected: 2, got: 1 })));
        let no_icpt = IntervalMeanModel::new(IntervalColumns { intercept: false, ..Default::default() });
        assert!(evaluate_moments(&no_icpt, &data, &[0.3]).is_ok());
    }

    #[test]
    fn bound_is_enforced() {
        let data = one_row(0.0, 0.0, 5.0);
        let model = IntervalMeanModel::default().with_bound(2.0);
        assert!(evaluate_moments(&model, &data, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn callback_model_is_evaluated_per_row() {
        let model = CallbackModel::new(1, 1, 10.0, |x, w, th, out| out[0] = w[0] - th[0] * x[0]);
        let data = Dataset::new(
            Matrix::column(&[1.0, 2.0]),
            Matrix::column(&[3.0, 3.0]),
            vec!["y".into()],
        )
        .unwrap();
        let m = evaluate_moments(&model, &data, &[1.0]).unwrap();
        assert_eq!(m.col(0), vec![2.0, 1.0]);
    }

    #[test]
    fn aggregator_examples() {
        let s = Aggregator::default();
        assert_eq!(s.apply(&[-0.2, 0.3]), 0.2);
        assert_eq!(s.apply(&[0.0, 0.0]), 0.0);
        assert_eq!(s.apply(&[-3.0, -6.0]), 3.0 * s.apply(&[-1.0, -2.0]));
        let p2 = Aggregator::NegPNorm { p: 2.0 };
        assert!((p2.apply(&[-3.0, -4.0, 1.0]) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn csv_roles_and_missing_cells() {
        let text = "id,x,lo,hi\n1,0.5,0.1,0.9\n2,-0.2,,0.4\n3,0.3,0.2,\n";
        let roles = ColumnRoles { x: vec!["x".into()], wl: "lo".into(), wh: "hi".into() };
        let data = read_interval_csv(text.as_bytes(), &roles).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.w().row(1), &[f64::NEG_INFINITY, 0.4]);
        assert_eq!(data.w().row(2), &[0.2, f64::INFINITY]);
        let bad = ColumnRoles { x: vec!["nope".into()], ..roles };
        assert!(read_interval_csv(text.as_bytes(), &bad).is_err());
    }

    proptest! {
        #[test]
        fn aggregators_are_positively_homogeneous(
            v in prop::collection::vec(-1.0f64..1.0, 1..5),
            a in 0.0f64..10.0,
            p in 1.0f64..4.0,
        ) {
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            for s in [Aggregator::NegSupNorm, Aggregator::NegPNorm { p }] {
                prop_assert!((s.apply(&scaled) - a * s.apply(&v)).abs() < 1e-12);
                prop_assert!(s.apply(&v) >= 0.0);
            }
            let pos: Vec<f64> = v.iter().map(|x| x.abs()).collect();
            prop_assert_eq!(Aggregator::NegSupNorm.apply(&pos), 0.0);
        }

        #[test]
        fn mean_moments_sum_to_interval_width(
            rows in prop::collection::vec((-1.0f64..1.0, -2.0f64..0.0, 0.0f64..2.0), 1..20),
            t0 in -2.0f64..2.0,
            t1 in -2.0f64..2.0,
        ) {
            let x: Vec<f64> = rows.iter().map(|r| r.0).collect();
            let wl: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let wh: Vec<f64> = rows.iter().map(|r| r.2).collect();
            let data = Dataset::interval(Matrix::column(&x), &wl, &wh).unwrap();
            let m = evaluate_moments(&IntervalMeanModel::default(), &data, &[t0, t1]).unwrap();
            for i in 0..data.n() {
                prop_assert!((m.get(i, 0) + m.get(i, 1) - (wh[i] - wl[i])).abs() < 1e-12);
            }
            // Row permutation equivariance.
            let perm: Vec<usize> = (0..data.n()).rev().collect();
            let mp = evaluate_moments(&IntervalMeanModel::default(), &data.subset(&perm), &[t0, t1]).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(mp.row(k), m.row(i));
            }
        }
    }
}
