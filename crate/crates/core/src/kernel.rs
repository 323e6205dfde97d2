//! Tensor-product Sobolev kernels on `[0,1]^d`, pooled designs and Gram
//! spectra.
//!
//! The one-dimensional kernel is the reproducing kernel of the second-order
//! Sobolev space `W^{2,2}[0,1]` written with scaled Bernoulli polynomials:
//!
//! `K(s,t) = 1 + k1(s)k1(t) + k2(s)k2(t) - k4(|s-t|)`
//!
//! where `k1(t) = t - 1/2`, `k2(t) = (k1² - 1/12)/2` and
//! `k4(t) = (k1⁴ - k1²/2 + 7/240)/24`.

use std::collections::HashMap;

use faer::Mat;
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

fn k1(t: f64) -> f64 {
    t - 0.5
}

fn k2(t: f64) -> f64 {
    let a = k1(t);
    (a * a - 1.0 / 12.0) / 2.0
}

fn k4(t: f64) -> f64 {
    let a = k1(t);
    let a2 = a * a;
    (a2 * a2 - a2 / 2.0 + 7.0 / 240.0) / 24.0
}

#[inline]
pub(crate) fn sobolev_1d_unchecked(s: f64, t: f64) -> f64 {
    1.0 + k1(s) * k1(t) + k2(s) * k2(t) - k4((s - t).abs())
}

fn check_unit(v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Domain(format!("kernel argument {v} outside [0,1]")))
    }
}

/// Second-order Sobolev kernel on `[0,1]`.
pub fn sobolev_kernel_1d(s: f64, t: f64) -> Result<f64> {
    check_unit(s)?;
    check_unit(t)?;
    Ok(sobolev_1d_unchecked(s, t))
}

/// Product of one-dimensional kernels over coordinates.
pub fn tensor_kernel(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "points of dimension {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut acc = 1.0;
    for (&s, &t) in x.iter().zip(y) {
        acc *= sobolev_kernel_1d(s, t)?;
    }
    Ok(acc)
}

/// Which of the two samples a design row came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sample {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RowOrigin {
    pub sample: Sample,
    /// Row index in the original (unscaled) input matrix of that sample.
    pub index: usize,
}

/// Per-column affine map onto `[0,1]`, fitted on pooled covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    ranges: Vec<(f64, f64)>,
}

impl MinMaxScaler {
    pub fn fit<'a, I>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DMatrix<f64>>,
    {
        let mut ranges: Option<Vec<(f64, f64)>> = None;
        for block in blocks {
            let r = ranges.get_or_insert_with(|| {
                vec![(f64::INFINITY, f64::NEG_INFINITY); block.ncols()]
            });
            if r.len() != block.ncols() {
                return Err(Error::Shape(format!(
                    "covariate blocks with {} and {} columns",
                    r.len(),
                    block.ncols()
                )));
            }
            for (j, col) in block.column_iter().enumerate() {
                for &v in col.iter() {
                    if !v.is_finite() {
                        return Err(Error::Input(format!("non-finite covariate in column {j}")));
                    }
                    r[j].0 = r[j].0.min(v);
                    r[j].1 = r[j].1.max(v);
                }
            }
        }
        let ranges = ranges.ok_or_else(|| Error::Input("no covariate blocks".into()))?;
        if ranges.is_empty() {
            return Err(Error::Shape("covariates have zero columns".into()));
        }
        for (column, &(lo, hi)) in ranges.iter().enumerate() {
            if lo > hi {
                return Err(Error::Input("empty covariate matrix".into()));
            }
            if hi <= lo {
                return Err(Error::DegenerateScale { column });
            }
        }
        Ok(Self { ranges })
    }

    pub fn ranges(&self) -> &[(f64, f64)] {
        &self.ranges
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    /// Maps one raw row into the unit cube. Values outside the fitted range
    /// are clamped so that kernel evaluation stays defined.
    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(&self.ranges)
            .map(|(&v, &(lo, hi))| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "scaler fitted on {} columns, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            let (lo, hi) = self.ranges[j];
            ((x[(i, j)] - lo) / (hi - lo)).clamp(0.0, 1.0)
        }))
    }
}

/// Distinct pooled covariate rows scaled into `[0,1]^d`.
#[derive(Debug, Clone)]
pub struct ScaledDesign {
    /// `n × d`, one distinct row per design point.
    pub points: DMatrix<f64>,
    pub scaler: MinMaxScaler,
    /// Every original row that collapsed onto each design row.
    pub origins: Vec<Vec<RowOrigin>>,
    /// Design row of each original A row.
    pub a_rows: Vec<usize>,
    /// Design row of each original B row.
    pub b_rows: Vec<usize>,
}

impl ScaledDesign {
    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.points.row(i).iter().copied().collect()
    }
}

/// Pooled min–max scaling of the two covariate matrices with exact
/// deduplication of the scaled rows.
pub fn minmax_scale(raw_a: &DMatrix<f64>, raw_b: &DMatrix<f64>) -> Result<ScaledDesign> {
    if raw_a.nrows() == 0 || raw_b.nrows() == 0 {
        return Err(Error::Input("both covariate matrices must be nonempty".into()));
    }
    if raw_a.ncols() != raw_b.ncols() {
        return Err(Error::Shape(format!(
            "sample A has {} columns, sample B has {}",
            raw_a.ncols(),
            raw_b.ncols()
        )));
    }
    let scaler = MinMaxScaler::fit([raw_a, raw_b])?;
    let d = scaler.dim();

    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut origins: Vec<Vec<RowOrigin>> = Vec::new();
    let mut place = |row: Vec<f64>, origin: RowOrigin| -> usize {
        // +0.0 and -0.0 cannot both occur after scaling into [0,1]
        let key: Vec<u64> = row.iter().map(|v| v.to_bits()).collect();
        let next = rows.len();
        let slot = *index.entry(key).or_insert(next);
        if slot == next {
            rows.push(row);
            origins.push(vec![origin]);
        } else {
            origins[slot].push(origin);
        }
        slot
    };

    let mut a_rows = Vec::with_capacity(raw_a.nrows());
    for i in 0..raw_a.nrows() {
        let raw: Vec<f64> = raw_a.row(i).iter().copied().collect();
        a_rows.push(place(
            scaler.transform_row(&raw),
            RowOrigin { sample: Sample::A, index: i },
        ));
    }
    let mut b_rows = Vec::with_capacity(raw_b.nrows());
    for i in 0..raw_b.nrows() {
        let raw: Vec<f64> = raw_b.row(i).iter().copied().collect();
        b_rows.push(place(
            scaler.transform_row(&raw),
            RowOrigin { sample: Sample::B, index: i },
        ));
    }

    let points = DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]);
    Ok(ScaledDesign {
        points,
        scaler,
        origins,
        a_rows,
        b_rows,
    })
}

/// Kernel matrix between the rows of two point sets in `[0,1]^d`.
///
/// Entries are accumulated dimension by dimension in the same order as
/// [`tensor_kernel`], so results are bit-identical to pointwise evaluation.
pub fn cross_gram(left: &DMatrix<f64>, right: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if left.ncols() != right.ncols() {
        return Err(Error::Shape(format!(
            "point sets of dimension {} and {}",
            left.ncols(),
            right.ncols()
        )));
    }
    for v in left.iter().chain(right.iter()) {
        check_unit(*v)?;
    }
    let mut out = DMatrix::from_element(left.nrows(), right.nrows(), 1.0);
    for k in 0..left.ncols() {
        for j in 0..right.nrows() {
            let t = right[(j, k)];
            for i in 0..left.nrows() {
                out[(i, j)] *= sobolev_1d_unchecked(left[(i, k)], t);
            }
        }
    }
    Ok(out)
}

/// Symmetric Gram matrix of a point set; the upper triangle is a mirror of
/// the lower one so `M == Mᵀ` holds exactly.
pub fn gram_of_points(points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    for v in points.iter() {
        check_unit(*v)?;
    }
    let n = points.nrows();
    let mut out = DMatrix::from_element(n, n, 1.0);
    for k in 0..points.ncols() {
        for j in 0..n {
            let t = points[(j, k)];
            for i in j..n {
                out[(i, j)] *= sobolev_1d_unchecked(points[(i, k)], t);
            }
        }
    }
    for j in 0..n {
        for i in (j + 1)..n {
            out[(j, i)] = out[(i, j)];
        }
    }
    Ok(out)
}

pub fn gram_matrix(design: &ScaledDesign) -> Result<DMatrix<f64>> {
    gram_of_points(&design.points)
}

/// Positive part of a symmetric eigendecomposition, `M ≈ P1 diag(Q1) P1ᵀ`.
#[derive(Debug, Clone)]
pub struct GramSpectrum {
    /// `n × m` with orthonormal columns.
    pub p1: DMatrix<f64>,
    /// `m` positive eigenvalues, nonincreasing.
    pub q1: DVector<f64>,
    pub recon_error: f64,
}

impl GramSpectrum {
    pub fn rank(&self) -> usize {
        self.q1.len()
    }

    pub fn n(&self) -> usize {
        self.p1.nrows()
    }
}

pub const DEFAULT_CUTOFF_RATIO: f64 = 1e-12;

pub(crate) fn to_faer(m: &DMatrix<f64>) -> Mat<f64> {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::Shape(format!("{}×{} matrix is not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::Shape(format!("matrix not symmetric at ({i},{j})")));
            }
        }
    }
    Ok(())
}

/// Keeps eigenpairs whose eigenvalue exceeds `cutoff_ratio` times the largest.
pub fn eigendecompose(m: &DMatrix<f64>, cutoff_ratio: f64) -> Result<GramSpectrum> {
    check_symmetric(m)?;
    if !(cutoff_ratio >= 0.0 && cutoff_ratio < 1.0) {
        return Err(Error::Config(format!("cutoff ratio {cutoff_ratio} outside [0,1)")));
    }
    let n = m.nrows();
    if n == 0 {
        return Err(Error::DegenerateSpectrum("empty matrix".into()));
    }
    let fm = to_faer(m);
    let evd = fm
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let values = evd.S().column_vector();
    let vectors = evd.U();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let largest = values[order[0]];
    if !(largest > 0.0) {
        return Err(Error::DegenerateSpectrum(format!(
            "largest eigenvalue {largest} is not positive"
        )));
    }
    let threshold = cutoff_ratio * largest;
    let kept: Vec<usize> = order.into_iter().filter(|&k| values[k] > threshold).collect();
    let rank = kept.len();

    let p1f = Mat::<f64>::from_fn(n, rank, |i, c| vectors[(i, kept[c])]);
    let scaled = Mat::<f64>::from_fn(n, rank, |i, c| p1f[(i, c)] * values[kept[c]]);
    let recon = &scaled * p1f.transpose();
    let mut sq = 0.0;
    for j in 0..n {
        for i in 0..n {
            let r = recon[(i, j)] - m[(i, j)];
            sq += r * r;
        }
    }

    Ok(GramSpectrum {
        p1: DMatrix::from_fn(n, rank, |i, c| p1f[(i, c)]),
        q1: DVector::from_iterator(rank, kept.iter().map(|&k| values[k])),
        recon_error: sq.sqrt(),
    })
}

/// Dense symmetric eigenvalues in nonincreasing order.
#[cfg(test)]
pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    let evd = to_faer(m)
        .self_adjoint_eigen(faer::Side::Lower)
        .map_err(|e| Error::Numeric(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let mut v: Vec<f64> = (0..m.nrows()).map(|i| s[i]).collect();
    v.sort_by(|a, b| b.total_cmp(a));
    Ok(v)
}
