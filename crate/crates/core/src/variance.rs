//! Plug-in and bootstrap variance estimators, and normal-theory intervals.

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::calibrate::{CalibrationConfig, CalibrationProblem, PreparedDesign, SolverOptions};
use crate::data::TwoSampleData;
use crate::error::{Error, Result};
use crate::rng::substream;

#[derive(Debug, Clone, Default, Serialize)]
pub struct VarianceResult {
    pub variance: f64,
    pub design_part: Option<f64>,
    pub residual_part: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub replicates: Vec<f64>,
    /// Bootstrap replicates discarded after a solver failure.
    pub dropped: usize,
    /// Bootstrap design weights drawn negative.
    pub negative_weights: usize,
}

/// Outcome-noise input of the plug-in estimator.
#[derive(Debug, Clone)]
pub enum ResidualVariance {
    /// A single `σ̂²` shared by all A units.
    Homoscedastic(f64),
    /// Per-unit squared residuals on A.
    PerPoint(Vec<f64>),
}

/// Sample variance of A-residuals with divisor `n − 1`.
pub fn residual_sample_variance(residuals: &[f64]) -> f64 {
    let n = residuals.len() as f64;
    if residuals.len() < 2 {
        return 0.0;
    }
    let mean = pairwise_sum(residuals) / n;
    let sq: Vec<f64> = residuals.iter().map(|r| (r - mean).powi(2)).collect();
    pairwise_sum(&sq) / (n - 1.0)
}

/// Plug-in variance of the calibrated estimator under Poisson sampling of B:
/// `N⁻² Σ_B d²(1 − 1/d) m̂² + N⁻² Σ_A ŵ² σ̂²`.
pub fn plugin_variance_poisson(
    data: &TwoSampleData,
    m_hat_b: &DVector<f64>,
    weights: &[f64],
    residual: &ResidualVariance,
) -> Result<VarianceResult> {
    if m_hat_b.len() != data.n_b() {
        return Err(Error::Shape(format!(
            "{} predictions for {} B units",
            m_hat_b.len(),
            data.n_b()
        )));
    }
    if weights.len() != data.n_a() {
        return Err(Error::Shape(format!(
            "{} weights for {} A units",
            weights.len(),
            data.n_a()
        )));
    }
    if let Some(i) = data.d_b.iter().position(|&d| d < 1.0) {
        return Err(Error::Input(format!(
            "design weight {} < 1 at B row {i} implies an inclusion probability above 1",
            data.d_b[i]
        )));
    }
    let n2 = data.pop_size * data.pop_size;
    let design_terms: Vec<f64> = data
        .d_b
        .iter()
        .zip(m_hat_b.iter())
        .map(|(&d, &m)| d * d * (1.0 - 1.0 / d) * m * m)
        .collect();
    let design_part = pairwise_sum(&design_terms) / n2;

    let residual_terms: Vec<f64> = match residual {
        ResidualVariance::Homoscedastic(s2) => {
            if !(*s2 >= 0.0) {
                return Err(Error::Input(format!("residual variance {s2} is negative")));
            }
            weights.iter().map(|w| w * w * s2).collect()
        }
        ResidualVariance::PerPoint(r2) => {
            if r2.len() != weights.len() {
                return Err(Error::Shape("one squared residual per A unit required".into()));
            }
            weights.iter().zip(r2).map(|(w, e)| w * w * e).collect()
        }
    };
    let residual_part = pairwise_sum(&residual_terms) / n2;
    Ok(VarianceResult {
        variance: design_part + residual_part,
        design_part: Some(design_part),
        residual_part: Some(residual_part),
        ..Default::default()
    })
}

/// Draws one set of bootstrap design weights `d* ~ N(d, d(d − 1))`, and
/// counts the negative draws. Draws are not truncated, so the bootstrap
/// weights keep the mean `d` and variance `(1 − π)/π²`.
pub fn draw_bootstrap_weights(d_b: &DVector<f64>, seed: u64, replicate: u64) -> (DVector<f64>, usize) {
    let mut rng = substream(seed, replicate);
    let draws = d_b.map(|d| {
        // (1 − π)/π² with π = 1/d
        let sd = (d * (d - 1.0)).max(0.0).sqrt();
        if sd > 0.0 {
            Normal::new(d, sd).expect("finite parameters").sample(&mut rng)
        } else {
            d
        }
    });
    let negative = draws.iter().filter(|&&d| d < 0.0).count();
    (draws, negative)
}

/// Outcome-model predictions on both samples, for the calibrated form.
#[derive(Debug, Clone, Copy)]
pub struct OutcomePredictions<'a> {
    pub on_a: &'a DVector<f64>,
    pub on_b: &'a DVector<f64>,
}

/// Bootstrap variance of a calibration estimator: the HT form when
/// `outcome` is `None`, otherwise the calibrated form with fixed
/// predictions. Only the B design weights are perturbed; λ's, bounds and
/// the uniform start are reused.
pub fn bootstrap_variance(
    data: &TwoSampleData,
    prepared: &PreparedDesign,
    config: CalibrationConfig,
    solver: SolverOptions,
    outcome: Option<OutcomePredictions<'_>>,
    reps: usize,
    seed: u64,
) -> Result<VarianceResult> {
    if let Some(o) = outcome {
        if o.on_a.len() != data.n_a() || o.on_b.len() != data.n_b() {
            return Err(Error::Shape("one prediction per sampled unit required".into()));
        }
    }
    if reps < 2 {
        return Err(Error::Config(format!("bootstrap needs at least 2 replicates, got {reps}")));
    }
    let pop = data.pop_size;
    let outcomes: Vec<(Option<f64>, usize)> = (0..reps)
        .into_par_iter()
        .map(|b| {
            let (d_star, negative) = draw_bootstrap_weights(&data.d_b, seed, b as u64);
            let estimate = (|| -> Result<f64> {
                let problem = CalibrationProblem::with_signed_weights(
                    &prepared.spectrum,
                    prepared.design.a_rows.clone(),
                    prepared.design.b_rows.clone(),
                    d_star.iter().copied().collect(),
                    pop,
                    config,
                )?;
                let init = DVector::from_element(problem.n_a(), 1.0);
                let sol = crate::calibrate::solve_weights(&problem, &init, solver)?;
                let mut terms: Vec<f64> = match outcome {
                    None => sol.weights.iter().zip(data.y_a.iter()).map(|(w, y)| w * y).collect(),
                    Some(o) => sol
                        .weights
                        .iter()
                        .zip(data.y_a.iter().zip(o.on_a.iter()))
                        .map(|(w, (y, m))| w * (y - m))
                        .collect(),
                };
                if let Some(o) = outcome {
                    terms.extend(d_star.iter().zip(o.on_b.iter()).map(|(d, m)| d * m));
                }
                Ok(pairwise_sum(&terms) / pop)
            })();
            match estimate {
                Ok(v) if v.is_finite() => (Some(v), negative),
                Ok(_) | Err(_) => (None, negative),
            }
        })
        .collect();

    let negative_weights: usize = outcomes.iter().map(|o| o.1).sum();
    if negative_weights > 0 {
        log::debug!("{negative_weights} bootstrap design weights drawn negative");
    }
    let replicates: Vec<f64> = outcomes.iter().filter_map(|o| o.0).collect();
    let dropped = reps - replicates.len();
    if dropped * 10 > reps {
        return Err(Error::Numeric(format!(
            "{dropped} of {reps} bootstrap replicates failed"
        )));
    }
    if dropped > 0 {
        log::warn!("{dropped} bootstrap replicates dropped after solver failure");
    }
    if replicates.len() < 2 {
        return Err(Error::Numeric("fewer than two usable bootstrap replicates".into()));
    }
    Ok(VarianceResult {
        variance: residual_sample_variance(&replicates),
        replicates,
        dropped,
        negative_weights,
        ..Default::default()
    })
}

/// Pairwise (cascade) summation.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 16 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Standard normal quantile (Wichura's AS 241, about 1e-16 relative).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Config(format!("probability {p} outside (0,1)")));
    }
    // coefficients in ascending powers
    const A: [f64; 8] = [
        3.387132872796366608, 133.14166789178437745, 1971.5909503065514427, 13731.693765509461125,
        45921.953931549871457, 67265.770927008700853, 33430.575583588128105, 2509.0809287301226727,
    ];
    const B: [f64; 8] = [
        1.0, 42.313330701600911252, 687.1870074920579083, 5394.1960214247511077,
        21213.794301586595867, 39307.89580009271061, 28729.085735721942674, 5226.495278852545925,
    ];
    const C: [f64; 8] = [
        1.42343711074968357734, 4.6303378461565452959, 5.7694972214606914055, 3.64784832476320460504,
        1.27045825245236838258, 0.24178072517745061177, 0.0227238449892691845833, 7.7454501427834140764e-4,
    ];
    const D: [f64; 8] = [
        1.0, 2.05319162663775882187, 1.6763848301838038494, 0.68976733498510000455,
        0.14810397642748007459, 0.0151986665636164571966, 5.475938084995344946e-4, 1.05075007164441684324e-9,
    ];
    const E: [f64; 8] = [
        6.6579046435011037772, 5.4637849111641143699, 1.7848265399172913358, 0.29656057182850489123,
        0.026532189526576123093, 0.0012426609473880784386, 2.71155556874348757815e-5, 2.01033439929228813265e-7,
    ];
    const F: [f64; 8] = [
        1.0, 0.59983220655588793769, 0.13692988092273580531, 0.0148753612908506148525,
        7.868691311456132591e-4, 1.8463183175100546818e-5, 1.4215117583164458887e-7, 2.04426310338993978564e-15,
    ];
    let horner = |c: &[f64; 8], x: f64| c.iter().rev().fold(0.0, |acc, &k| acc * x + k);

    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return Ok(q * horner(&A, r) / horner(&B, r));
    }
    let r = (-(if q < 0.0 { p } else { 1.0 - p }).ln()).sqrt();
    let val = if r <= 5.0 {
        horner(&C, r - 1.6) / horner(&D, r - 1.6)
    } else {
        horner(&E, r - 5.0) / horner(&F, r - 5.0)
    };
    Ok(if q < 0.0 { -val } else { val })
}


/// Two-sided normal interval `estimate ± z_{(1+level)/2}·√variance`.
pub fn confidence_interval(estimate: f64, variance: f64, level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("confidence level {level} outside (0,1)")));
    }
    if !(variance >= 0.0) {
        return Err(Error::Input(format!("variance {variance} is negative")));
    }
    let z = normal_quantile(0.5 * (1.0 + level))?;
    let half = z * variance.sqrt();
    Ok((estimate - half, estimate + half))
}
