//! Parametric regressions used by the competing estimators. Every fit
//! prepends an intercept column.

use nalgebra::{DMatrix, DVector};

use crate::data::TwoSampleData;
use crate::error::{Error, Result};

pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] })
}

pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Linear predictor `[1, x]·coef` for every row of `x`.
pub fn linear_predict(x: &DMatrix<f64>, coef: &DVector<f64>) -> Result<DVector<f64>> {
    if coef.len() != x.ncols() + 1 {
        return Err(Error::Shape(format!(
            "{} coefficients for {} covariates plus intercept",
            coef.len(),
            x.ncols()
        )));
    }
    Ok(DVector::from_fn(x.nrows(), |i, _| {
        coef[0] + (0..x.ncols()).map(|j| x[(i, j)] * coef[j + 1]).sum::<f64>()
    }))
}

/// Ordinary least squares with intercept.
pub fn ols(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows but {} responses", x.nrows(), y.len())));
    }
    let design = with_intercept(x);
    if design.nrows() < design.ncols() {
        return Err(Error::Singular("fewer rows than coefficients".into()));
    }
    let svd = design.svd(true, true);
    let smax = svd.singular_values.max();
    if svd.singular_values.min() <= 1e-10 * smax {
        return Err(Error::Singular("collinear regression design".into()));
    }
    svd.solve(y, 0.0).map_err(|e| Error::Singular(e.to_string()))
}

const LOGISTIC_TOL: f64 = 1e-8;
const LOGISTIC_MAX_ITER: usize = 50;
const SEPARATION_BOUND: f64 = 30.0;

/// Logistic regression by Newton–Raphson, optionally with observation
/// weights in the likelihood.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    labels: &[u8],
    weights: Option<&[f64]>,
) -> Result<DVector<f64>> {
    let n = x.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} labels", labels.len())));
    }
    if let Some(w) = weights {
        if w.len() != n {
            return Err(Error::Shape(format!("{n} rows but {} weights", w.len())));
        }
        if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
            return Err(Error::Input("logistic weights must be nonnegative".into()));
        }
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Input("labels must be 0 or 1".into()));
    }
    if labels.iter().all(|&l| l == labels[0]) {
        return Err(Error::Separation("all labels are identical".into()));
    }
    let design = with_intercept(x);
    let p = design.ncols();
    let weight = |i: usize| weights.map_or(1.0, |w| w[i]);

    let mut coef = DVector::zeros(p);
    for _ in 0..LOGISTIC_MAX_ITER {
        let mut score = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = design.row(i);
            let eta = row.dot(&coef.transpose());
            let mu = expit(eta);
            let wi = weight(i);
            let resid = wi * (f64::from(labels[i]) - mu);
            let var = wi * mu * (1.0 - mu);
            for a in 0..p {
                score[a] += resid * row[a];
                for b in 0..=a {
                    info[(a, b)] += var * row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                info[(b, a)] = info[(a, b)];
            }
        }
        if score.amax() < LOGISTIC_TOL {
            return Ok(coef);
        }
        let step = info
            .cholesky()
            .map(|c| c.solve(&score))
            .ok_or_else(|| Error::Separation("singular information matrix".into()))?;
        coef += &step;
        if coef.amax() > SEPARATION_BOUND {
            return Err(Error::Separation(format!(
                "coefficient magnitude {} exceeds {SEPARATION_BOUND}",
                coef.amax()
            )));
        }
        if step.amax() < 1e-13 * (1.0 + coef.amax()) {
            return Ok(coef);
        }
    }
    Err(Error::Separation(format!(
        "Newton–Raphson did not converge in {LOGISTIC_MAX_ITER} iterations"
    )))
}

/// `Σ_A x_i − Σ_B d_B,i·expit(x_iᵀθ)·x_i` with intercept-augmented rows.
pub fn dr_estimating_equation(data: &TwoSampleData, theta: &DVector<f64>) -> DVector<f64> {
    let xa = with_intercept(&data.x_a);
    let xb = with_intercept(&data.x_b);
    let mut u = DVector::zeros(xa.ncols());
    for i in 0..xa.nrows() {
        u += xa.row(i).transpose();
    }
    for i in 0..xb.nrows() {
        let row = xb.row(i);
        let p = expit(row.dot(&theta.transpose()));
        u -= data.d_b[i] * p * row.transpose();
    }
    u
}

/// Newton solve of the pseudo-likelihood calibration equation for a
/// logistic selection model of sample A.
pub fn dr_theta(data: &TwoSampleData, tol: f64, max_iter: usize) -> Result<DVector<f64>> {
    let xa = with_intercept(&data.x_a);
    let xb = with_intercept(&data.x_b);
    let p = xa.ncols();
    let scale: f64 = (0..xa.nrows()).map(|i| xa.row(i).amax()).sum();

    let eval = |theta: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut u = DVector::zeros(p);
        let mut jac = DMatrix::zeros(p, p);
        for i in 0..xa.nrows() {
            u += xa.row(i).transpose();
        }
        for i in 0..xb.nrows() {
            let row = xb.row(i);
            let pr = expit(row.dot(&theta.transpose()));
            let d = data.d_b[i];
            u -= d * pr * row.transpose();
            let v = d * pr * (1.0 - pr);
            for a in 0..p {
                for b in 0..p {
                    jac[(a, b)] -= v * row[a] * row[b];
                }
            }
        }
        (u, jac)
    };

    let share = (data.n_a() as f64 / data.estimated_pop_size()).clamp(1e-6, 1.0 - 1e-6);
    let mut theta = DVector::zeros(p);
    theta[0] = logit(share);
    let (mut u, mut jac) = eval(&theta);
    for _ in 0..max_iter {
        if u.amax() < tol * scale {
            return Ok(theta);
        }
        let neg = -&jac;
        let step = neg
            .cholesky()
            .map(|c| c.solve(&u))
            .ok_or_else(|| Error::Singular("pseudo-likelihood Jacobian is singular".into()))?;
        // step halving on the residual norm keeps Newton from overshooting
        let mut t = 1.0;
        let current = u.norm();
        loop {
            let cand = &theta + t * &step;
            let (cu, cj) = eval(&cand);
            if cu.norm() < current || t < 1e-8 {
                theta = cand;
                u = cu;
                jac = cj;
                break;
            }
            t *= 0.5;
        }
    }
    if u.amax() < tol * scale {
        return Ok(theta);
    }
    Err(Error::Convergence(format!(
        "pseudo-likelihood residual {} after {max_iter} iterations",
        u.amax()
    )))
}
