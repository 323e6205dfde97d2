//! Kernel ridge regression in the Sobolev RKHS, used as the outcome model.
//!
//! The response mean is removed before fitting and added back on
//! prediction, so constants are reproduced exactly:
//! `m̂(x) = ȳ + Σ_j α_j K(x_j, x)` with `α = (M + nρI)⁻¹ (y − ȳ)`.

use faer::linalg::solvers::Solve;
use faer::Mat;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kernel::{self, MinMaxScaler};

/// Per-column map of raw covariates into `[0,1]` before the kernel.
#[derive(Debug, Clone, PartialEq)]
pub enum FeatureMap {
    MinMax(MinMaxScaler),
    Quantile(QuantileMap),
}

impl FeatureMap {
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            FeatureMap::MinMax(s) => s.transform(x),
            FeatureMap::Quantile(q) => q.transform(x),
        }
    }
}

/// Pooled empirical distribution function of each column, interpolated
/// linearly between distinct values and rescaled onto `[0,1]`. Tied values
/// share their mid-rank.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantileMap {
    /// Per column: distinct values ascending, with their levels in `[0,1]`.
    knots: Vec<Vec<(f64, f64)>>,
}

impl QuantileMap {
    pub fn fit<'a, I>(blocks: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a DMatrix<f64>>,
    {
        let blocks: Vec<&DMatrix<f64>> = blocks.into_iter().collect();
        let d = blocks.first().ok_or_else(|| Error::Input("no covariate blocks".into()))?.ncols();
        if d == 0 {
            return Err(Error::Shape("covariates have zero columns".into()));
        }
        if let Some(b) = blocks.iter().find(|b| b.ncols() != d) {
            return Err(Error::Shape(format!("covariate blocks with {d} and {} columns", b.ncols())));
        }
        let mut knots = Vec::with_capacity(d);
        for j in 0..d {
            let mut pool: Vec<f64> = blocks.iter().flat_map(|b| b.column(j).iter().copied().collect::<Vec<_>>()).collect();
            if let Some(v) = pool.iter().find(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite covariate {v} in column {j}")));
            }
            pool.sort_by(f64::total_cmp);
            let mut col: Vec<(f64, f64)> = Vec::new();
            let mut start = 0;
            while start < pool.len() {
                let end = pool.partition_point(|&p| p <= pool[start]);
                col.push((pool[start], (start + end - 1) as f64 / 2.0));
                start = end;
            }
            if col.len() < 2 {
                return Err(Error::DegenerateScale { column: j });
            }
            let (lo, hi) = (col[0].1, col[col.len() - 1].1);
            for knot in &mut col {
                knot.1 = (knot.1 - lo) / (hi - lo);
            }
            knots.push(col);
        }
        Ok(Self { knots })
    }

    pub fn dim(&self) -> usize {
        self.knots.len()
    }

    fn level(col: &[(f64, f64)], v: f64) -> f64 {
        let k = col.partition_point(|&(u, _)| u <= v);
        if k == 0 {
            return 0.0;
        }
        if k == col.len() {
            return 1.0;
        }
        let (u0, l0) = col[k - 1];
        let (u1, l1) = col[k];
        l0 + (l1 - l0) * (v - u0) / (u1 - u0)
    }

    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(Error::Shape(format!(
                "map fitted on {} columns, got {}",
                self.dim(),
                x.ncols()
            )));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| Self::level(&self.knots[j], x[(i, j)])))
    }
}

/// Fitted kernel ridge predictor.
#[derive(Debug, Clone)]
pub struct KernelRidge {
    map: FeatureMap,
    points: DMatrix<f64>,
    alpha: DVector<f64>,
    offset: f64,
    pub ridge: f64,
    /// Mean squared held-out error for each grid value, in grid order.
    pub cv_errors: Vec<(f64, f64)>,
}

impl KernelRidge {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let scaled = self.map.transform(x)?;
        let k = kernel::cross_gram(&scaled, &self.points)?;
        Ok((k * &self.alpha).add_scalar(self.offset))
    }

    pub fn training_size(&self) -> usize {
        self.points.nrows()
    }
}

/// Default ridge grid, log-spaced on `[1e-9, 1e-1]`.
pub fn default_ridge_grid() -> Vec<f64> {
    (0..9).map(|k| 10f64.powi(-9 + k)).collect()
}

fn ridge_solve(gram: &DMatrix<f64>, rows: &[usize], y: &[f64], ridge: f64) -> Result<DVector<f64>> {
    let n = rows.len();
    let shift = n as f64 * ridge;
    let a = Mat::<f64>::from_fn(n, n, |i, j| {
        gram[(rows[i], rows[j])] + if i == j { shift } else { 0.0 }
    });
    let rhs = Mat::<f64>::from_fn(n, 1, |i, _| y[i]);
    let llt = a
        .llt(faer::Side::Lower)
        .map_err(|_| Error::Numeric(format!("kernel system not positive definite at ridge {ridge}")))?;
    let sol = llt.solve(&rhs);
    let out = DVector::from_fn(n, |i, _| sol[(i, 0)]);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite kernel ridge solution at ridge {ridge}")));
    }
    Ok(out)
}

/// Fits with a scaler fitted on `x` itself.
pub fn kernel_ridge_fit(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge_grid: &[f64],
    folds: usize,
    seed: u64,
) -> Result<KernelRidge> {
    let scaler = MinMaxScaler::fit([x])?;
    kernel_ridge_fit_mapped(x, y, ridge_grid, folds, seed, FeatureMap::MinMax(scaler))
}

/// Fits with a caller-supplied feature map, e.g. one fitted on both samples
/// so that predictions on the other sample stay inside the fitted cube.
pub fn kernel_ridge_fit_mapped(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    ridge_grid: &[f64],
    folds: usize,
    seed: u64,
    map: FeatureMap,
) -> Result<KernelRidge> {
    let n = x.nrows();
    if y.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} responses", y.len())));
    }
    if folds < 2 || n < folds {
        return Err(Error::Config(format!("cannot run {folds}-fold CV on {n} rows")));
    }
    if ridge_grid.is_empty() || ridge_grid.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
        return Err(Error::Config("ridge grid must be nonempty and positive".into()));
    }
    let mut grid = ridge_grid.to_vec();
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let points = map.transform(x)?;
    let gram = kernel::gram_of_points(&points)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let fold_of = {
        let mut f = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            f[i] = pos % folds;
        }
        f
    };

    let mut cv_errors = Vec::with_capacity(grid.len());
    for &ridge in &grid {
        let mut sse = 0.0;
        for f in 0..folds {
            let (held, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            let mean = train.iter().map(|&i| y[i]).sum::<f64>() / train.len() as f64;
            let centred: Vec<f64> = train.iter().map(|&i| y[i] - mean).collect();
            let alpha = ridge_solve(&gram, &train, &centred, ridge)?;
            for &h in &held {
                let pred = mean
                    + train
                        .iter()
                        .zip(alpha.iter())
                        .map(|(&t, &a)| gram[(h, t)] * a)
                        .sum::<f64>();
                sse += (y[h] - pred).powi(2);
            }
        }
        cv_errors.push((ridge, sse / n as f64));
    }
    let ridge = cv_errors
        .iter()
        .fold((f64::NAN, f64::INFINITY), |best, &(r, e)| if e < best.1 { (r, e) } else { best })
        .0;

    let all: Vec<usize> = (0..n).collect();
    let offset = y.mean();
    let centred: Vec<f64> = y.iter().map(|v| v - offset).collect();
    let alpha = ridge_solve(&gram, &all, &centred, ridge)?;
    Ok(KernelRidge {
        map,
        points,
        alpha,
        offset,
        ridge,
        cv_errors,
    })
}
