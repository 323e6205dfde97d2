//! Point estimators of the population mean: the naive mean, quasi-
//! randomization (EV1/EV2), doubly robust (DR1/DR2), the KL-calibrated HT
//! estimator, the L2 balancing estimator (BSS) and the calibrated estimator
//! with a kernel ridge outcome model (Prop).

pub mod krr;
pub mod regression;

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::calibrate::{cross_validate, default_lambda_grid, CvOptions};
use crate::calibrate::{
    calibrate_weights, CalibrationConfig, KlSign, Penalty, PreparedDesign, SolverOptions,
    WeightSolution,
};
use crate::error::{Error, Result};
use crate::kernel::DEFAULT_CUTOFF_RATIO;
use crate::variance::{
    bootstrap_variance, confidence_interval, pairwise_sum, plugin_variance_poisson,
    residual_sample_variance, OutcomePredictions, ResidualVariance,
};

pub use crate::data::TwoSampleData;
pub use krr::{
    default_ridge_grid, kernel_ridge_fit, kernel_ridge_fit_mapped, FeatureMap, KernelRidge, QuantileMap,
};
pub use regression::{dr_theta, fit_logistic};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Nsm,
    Ev1,
    Ev2,
    Dr1,
    Dr2,
    HtKl,
    Bss,
    Prop,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Nsm,
        Method::Ev1,
        Method::Ev2,
        Method::Dr1,
        Method::Dr2,
        Method::HtKl,
        Method::Bss,
        Method::Prop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Nsm => "nsm",
            Method::Ev1 => "ev1",
            Method::Ev2 => "ev2",
            Method::Dr1 => "dr1",
            Method::Dr2 => "dr2",
            Method::HtKl => "ht_kl",
            Method::Bss => "bss",
            Method::Prop => "prop",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// Penalty parameters: fixed, or selected by cross-validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LambdaChoice {
    Fixed { lambda1: f64, lambda2: f64 },
    /// `λ_k = c_k / n_B`, following the rate `λ ≍ n_B⁻¹`.
    Scaled { c1: f64, c2: f64 },
    Auto,
}

/// Default `(c1, c2)` for [`LambdaChoice::Scaled`].
pub const DEFAULT_LAMBDA_SCALE: (f64, f64) = (1.0, 1e-2);

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum VarianceMode {
    None,
    Plugin,
    Bootstrap { reps: usize },
}

/// Covariate map of the outcome model, fitted on both samples pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeFeatures {
    /// Pooled empirical distribution function of each covariate.
    #[default]
    Quantile,
    /// The calibration design's min–max scaling.
    MinMax,
}

#[derive(Debug, Clone)]
pub struct EstimatorConfig {
    pub lambdas: LambdaChoice,
    pub kl_sign: KlSign,
    pub xi1: f64,
    pub xi2: f64,
    /// `C_N` in the L2 problem's upper bound `min(ξ2, C_N)`.
    pub bss_cap: Option<f64>,
    pub solver: SolverOptions,
    pub cutoff_ratio: f64,
    pub cv_folds: usize,
    pub ridge_grid: Vec<f64>,
    pub outcome_features: OutcomeFeatures,
    pub variance: VarianceMode,
    pub level: f64,
    pub seed: u64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            lambdas: LambdaChoice::Auto,
            kl_sign: KlSign::default(),
            xi1: CalibrationConfig::DEFAULT_XI1,
            xi2: CalibrationConfig::DEFAULT_XI2,
            bss_cap: None,
            solver: SolverOptions::default(),
            cutoff_ratio: DEFAULT_CUTOFF_RATIO,
            cv_folds: 5,
            ridge_grid: default_ridge_grid(),
            outcome_features: OutcomeFeatures::default(),
            variance: VarianceMode::Plugin,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Solver and model metadata attached to a result.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Diagnostics {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub converged: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub degenerate_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stalled: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ridge: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub design_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual_variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_dropped: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bootstrap_negative_weights: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clipped_weights: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub method: Method,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci: Option<[f64; 2]>,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl EstimateResult {
    fn point(method: Method, estimate: f64, elapsed: Duration) -> Self {
        Self {
            method,
            estimate,
            variance: None,
            ci: None,
            seconds: elapsed.as_secs_f64(),
            diagnostics: None,
        }
    }
}

/// `N⁻¹ Σ_A ŵ_i y_i`.
pub fn ht_estimate(data: &TwoSampleData, weights: &[f64]) -> f64 {
    let terms: Vec<f64> = weights.iter().zip(data.y_a.iter()).map(|(w, y)| w * y).collect();
    pairwise_sum(&terms) / data.pop_size
}

/// `N⁻¹ Σ_B d_i m̂(x_i) + N⁻¹ Σ_A ŵ_i (y_i − m̂(x_i))`.
pub fn calibrated_estimate(
    data: &TwoSampleData,
    weights: &[f64],
    m_a: &DVector<f64>,
    m_b: &DVector<f64>,
) -> f64 {
    let mut terms: Vec<f64> = weights
        .iter()
        .zip(data.y_a.iter().zip(m_a.iter()))
        .map(|(w, (y, m))| w * (y - m))
        .collect();
    terms.extend(data.d_b.iter().zip(m_b.iter()).map(|(d, m)| d * m));
    pairwise_sum(&terms) / data.pop_size
}

pub fn nsm(data: &TwoSampleData) -> Result<EstimateResult> {
    let start = Instant::now();
    if data.n_a() == 0 {
        return Err(Error::Input("sample A is empty".into()));
    }
    let y: Vec<f64> = data.y_a.iter().copied().collect();
    let est = pairwise_sum(&y) / y.len() as f64;
    Ok(EstimateResult::point(Method::Nsm, est, start.elapsed()))
}

/// Boundary at which a fitted membership probability is treated as 0.
const ODDS_LIMIT: f64 = 1e-12;

/// Quasi-randomization weights on A, and the number of regression-predicted
/// design weights clipped to 1. With `p̂_i` the fitted probability that a
/// pooled unit comes from A, the weight is `d̃_i·(1 − p̂_i)/p̂_i`, since
/// `π_A/π_B = P(A | x, pooled)/P(B | x, pooled)`.
pub fn ev_weights(data: &TwoSampleData) -> Result<(Vec<f64>, usize)> {
    let coef = regression::ols(&data.x_b, &data.d_b)?;
    let d_tilde = regression::linear_predict(&data.x_a, &coef)?;
    let mut clipped = 0;
    let d_tilde: Vec<f64> = d_tilde
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                clipped += 1;
                1.0
            } else {
                d
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!("{clipped} predicted design weights were nonpositive and set to 1");
    }

    let pooled = nalgebra::DMatrix::from_fn(data.n_a() + data.n_b(), data.dim(), |i, j| {
        if i < data.n_a() {
            data.x_a[(i, j)]
        } else {
            data.x_b[(i - data.n_a(), j)]
        }
    });
    let labels: Vec<u8> = (0..pooled.nrows()).map(|i| u8::from(i < data.n_a())).collect();
    let beta = fit_logistic(&pooled, &labels, None)?;
    let eta = regression::linear_predict(&data.x_a, &beta)?;
    let p: Vec<f64> = eta.iter().map(|&t| regression::expit(t)).collect();
    let overflow = p.iter().filter(|&&q| q <= ODDS_LIMIT).count();
    if overflow > 0 {
        return Err(Error::OddsOverflow { count: overflow });
    }
    let w = d_tilde
        .iter()
        .zip(&p)
        .map(|(d, q)| d * (1.0 - q) / q)
        .collect();
    Ok((w, clipped))
}

pub fn ev_estimator(data: &TwoSampleData, version: u8) -> Result<EstimateResult> {
    let start = Instant::now();
    let method = match version {
        1 => Method::Ev1,
        2 => Method::Ev2,
        v => return Err(Error::Config(format!("EV version must be 1 or 2, got {v}"))),
    };
    let (w, clipped) = ev_weights(data)?;
    let terms: Vec<f64> = w.iter().zip(data.y_a.iter()).map(|(w, y)| w * y).collect();
    let total = pairwise_sum(&terms);
    let est = if version == 1 {
        total / data.pop_size
    } else {
        total / pairwise_sum(&w)
    };
    let mut out = EstimateResult::point(method, est, start.elapsed());
    if clipped > 0 {
        out.diagnostics = Some(Diagnostics { clipped_weights: Some(clipped), ..Default::default() });
    }
    Ok(out)
}

pub fn dr_estimator(data: &TwoSampleData, version: u8) -> Result<EstimateResult> {
    let start = Instant::now();
    let method = match version {
        1 => Method::Dr1,
        2 => Method::Dr2,
        v => return Err(Error::Config(format!("DR version must be 1 or 2, got {v}"))),
    };
    let theta = dr_theta(data, 1e-8, 50)?;
    let inv_pi: Vec<f64> = regression::linear_predict(&data.x_a, &theta)?
        .iter()
        .map(|&t| 1.0 / regression::expit(t))
        .collect();
    let coef = regression::ols(&data.x_a, &data.y_a)?;
    let m_a = regression::linear_predict(&data.x_a, &coef)?;
    let m_b = regression::linear_predict(&data.x_b, &coef)?;
    let mut terms: Vec<f64> = inv_pi
        .iter()
        .zip(data.y_a.iter().zip(m_a.iter()))
        .map(|(w, (y, m))| w * (y - m))
        .collect();
    terms.extend(data.d_b.iter().zip(m_b.iter()).map(|(d, m)| d * m));
    let denom = if version == 1 { data.pop_size } else { pairwise_sum(&inv_pi) };
    Ok(EstimateResult::point(method, pairwise_sum(&terms) / denom, start.elapsed()))
}

#[derive(Debug, Clone)]
struct Timed<T> {
    value: T,
    elapsed: Duration,
}

#[derive(Debug, Clone)]
struct OutcomeFit {
    model: KernelRidge,
    on_a: DVector<f64>,
    on_b: DVector<f64>,
}

#[derive(Debug, Clone)]
struct Calibrated {
    config: CalibrationConfig,
    solution: WeightSolution,
}

/// Timings of the shared components; a solve includes any λ selection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct ComponentSeconds {
    pub design: Option<f64>,
    pub kl_solve: Option<f64>,
    pub l2_solve: Option<f64>,
    pub outcome_model: Option<f64>,
}

/// Lazily shared work for running several estimators on one data set.
/// Each method's reported time includes every shared component it uses.
pub struct EstimationContext<'a> {
    data: &'a TwoSampleData,
    config: EstimatorConfig,
    prepared: OnceCell<Timed<PreparedDesign>>,
    kl: OnceCell<Timed<Calibrated>>,
    l2: OnceCell<Timed<Calibrated>>,
    outcome: OnceCell<Timed<OutcomeFit>>,
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<Timed<T>> {
    let start = Instant::now();
    let value = f()?;
    Ok(Timed { value, elapsed: start.elapsed() })
}

fn cached<'c, T>(cell: &'c OnceCell<Timed<T>>, f: impl FnOnce() -> Result<Timed<T>>) -> Result<&'c Timed<T>> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = f()?;
    Ok(cell.get_or_init(|| v))
}

impl<'a> EstimationContext<'a> {
    pub fn new(data: &'a TwoSampleData, config: EstimatorConfig) -> Self {
        Self {
            data,
            config,
            prepared: OnceCell::new(),
            kl: OnceCell::new(),
            l2: OnceCell::new(),
            outcome: OnceCell::new(),
        }
    }

    pub fn data(&self) -> &TwoSampleData {
        self.data
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn kl_penalty(&self) -> Penalty {
        Penalty::Kl(self.config.kl_sign)
    }

    fn prepared(&self) -> Result<&Timed<PreparedDesign>> {
        cached(&self.prepared, || timed(|| PreparedDesign::new(self.data, self.config.cutoff_ratio)))
    }

    pub fn prepared_design(&self) -> Result<&PreparedDesign> {
        Ok(&self.prepared()?.value)
    }

    fn calibration_config(&self, penalty: Penalty) -> Result<CalibrationConfig> {
        let cap = match penalty {
            Penalty::L2 => self.config.bss_cap,
            Penalty::Kl(_) => None,
        };
        let (lambda1, lambda2) = match self.config.lambdas {
            LambdaChoice::Fixed { lambda1, lambda2 } => (lambda1, lambda2),
            LambdaChoice::Scaled { c1, c2 } => {
                let nb = self.data.n_b() as f64;
                (c1 / nb, c2 / nb)
            }
            LambdaChoice::Auto => {
                let grid = default_lambda_grid(self.data.n_b());
                let options = CvOptions {
                    folds: self.config.cv_folds,
                    seed: self.config.seed,
                    penalty,
                    xi1: self.config.xi1,
                    xi2: self.config.xi2,
                    cap,
                    solver: self.config.solver,
                    cutoff_ratio: self.config.cutoff_ratio,
                };
                let sel = cross_validate(self.data, &grid, &grid, &options)?;
                (sel.lambda1, sel.lambda2)
            }
        };
        let config = CalibrationConfig {
            lambda1,
            lambda2,
            penalty,
            xi1: self.config.xi1,
            xi2: self.config.xi2,
            cap,
        };
        config.validate()?;
        Ok(config)
    }

    fn calibrated(&self, penalty: Penalty) -> Result<&Timed<Calibrated>> {
        let cell = match penalty {
            Penalty::Kl(_) => &self.kl,
            Penalty::L2 => &self.l2,
        };
        cached(cell, || {
            let prepared = self.prepared()?;
            let t = timed(|| {
                let config = self.calibration_config(penalty)?;
                let solution = calibrate_weights(&prepared.value, self.data, config, self.config.solver)?;
                if !solution.converged && !solution.stalled {
                    log::warn!(
                        "{} solve stopped after {} iterations with projected gradient {:.3e}",
                        match penalty {
                            Penalty::Kl(_) => "KL",
                            Penalty::L2 => "L2",
                        },
                        solution.iterations,
                        solution.grad_norm
                    );
                }
                Ok(Calibrated { config, solution })
            })?;
            Ok(t)
        })
    }

    /// KL-penalized weight solution (shared by HT_KL and Prop).
    pub fn kl_solution(&self) -> Result<(&CalibrationConfig, &WeightSolution)> {
        let c = &self.calibrated(self.kl_penalty())?.value;
        Ok((&c.config, &c.solution))
    }

    /// L2-penalized weight solution used by BSS.
    pub fn l2_solution(&self) -> Result<(&CalibrationConfig, &WeightSolution)> {
        let c = &self.calibrated(Penalty::L2)?.value;
        Ok((&c.config, &c.solution))
    }

    fn outcome(&self) -> Result<&Timed<OutcomeFit>> {
        cached(&self.outcome, || {
            timed(|| {
                let map = match self.config.outcome_features {
                    OutcomeFeatures::Quantile => {
                        FeatureMap::Quantile(QuantileMap::fit([&self.data.x_a, &self.data.x_b])?)
                    }
                    OutcomeFeatures::MinMax => {
                        FeatureMap::MinMax(self.prepared()?.value.design.scaler.clone())
                    }
                };
                let model = kernel_ridge_fit_mapped(
                    &self.data.x_a,
                    &self.data.y_a,
                    &self.config.ridge_grid,
                    self.config.cv_folds,
                    self.config.seed,
                    map,
                )?;
                let on_a = model.predict(&self.data.x_a)?;
                let on_b = model.predict(&self.data.x_b)?;
                Ok(OutcomeFit { model, on_a, on_b })
            })
        })
    }

    /// Wall time of each shared component computed so far.
    pub fn component_seconds(&self) -> ComponentSeconds {
        let secs = |d: Option<Duration>| d.map(|d| d.as_secs_f64());
        ComponentSeconds {
            design: secs(self.prepared.get().map(|t| t.elapsed)),
            kl_solve: secs(self.kl.get().map(|t| t.elapsed)),
            l2_solve: secs(self.l2.get().map(|t| t.elapsed)),
            outcome_model: secs(self.outcome.get().map(|t| t.elapsed)),
        }
    }

    /// Outcome-model predictions on A and B.
    pub fn outcome_predictions(&self) -> Result<(&DVector<f64>, &DVector<f64>)> {
        let o = &self.outcome()?.value;
        Ok((&o.on_a, &o.on_b))
    }

    pub fn run(&self, method: Method) -> Result<EstimateResult> {
        match method {
            Method::Nsm => nsm(self.data),
            Method::Ev1 => ev_estimator(self.data, 1),
            Method::Ev2 => ev_estimator(self.data, 2),
            Method::Dr1 => dr_estimator(self.data, 1),
            Method::Dr2 => dr_estimator(self.data, 2),
            Method::HtKl => self.ht_kl(),
            Method::Bss => self.calibrated_form(Method::Bss, Penalty::L2),
            Method::Prop => self.calibrated_form(Method::Prop, self.kl_penalty()),
        }
    }

    fn solution_diagnostics(&self, cal: &Calibrated) -> Result<Diagnostics> {
        let s = &cal.solution;
        Ok(Diagnostics {
            lambda1: Some(cal.config.lambda1),
            lambda2: Some(cal.config.lambda2),
            iterations: Some(s.iterations),
            converged: Some(s.converged),
            grad_norm: Some(s.grad_norm),
            inner_value: Some(s.inner_value),
            degenerate_steps: Some(s.degenerate_steps),
            stalled: Some(s.stalled),
            rank: Some(self.prepared()?.value.spectrum.rank()),
            ..Default::default()
        })
    }

    fn ht_kl(&self) -> Result<EstimateResult> {
        let start = Instant::now();
        let prepared = self.prepared()?;
        let cal = self.calibrated(self.kl_penalty())?;
        let estimate = ht_estimate(self.data, &cal.value.solution.weights);
        let mut diagnostics = self.solution_diagnostics(&cal.value)?;
        let mut variance = None;
        if let VarianceMode::Bootstrap { reps } = self.config.variance {
            let v = bootstrap_variance(
                self.data,
                &prepared.value,
                cal.value.config,
                self.config.solver,
                None,
                reps,
                self.config.seed,
            )?;
            diagnostics.bootstrap_dropped = Some(v.dropped);
            diagnostics.bootstrap_negative_weights = Some(v.negative_weights);
            variance = Some(v.variance);
        }
        let own = start.elapsed().saturating_sub(prepared.elapsed + cal.elapsed);
        self.finish(Method::HtKl, estimate, variance, own + prepared.elapsed + cal.elapsed, diagnostics)
    }

    fn calibrated_form(&self, method: Method, penalty: Penalty) -> Result<EstimateResult> {
        let start = Instant::now();
        let prepared = self.prepared()?;
        let cal = self.calibrated(penalty)?;
        let outcome = self.outcome()?;
        let (on_a, on_b) = (&outcome.value.on_a, &outcome.value.on_b);
        let weights = &cal.value.solution.weights;
        let estimate = calibrated_estimate(self.data, weights, on_a, on_b);
        let mut diagnostics = self.solution_diagnostics(&cal.value)?;
        diagnostics.ridge = Some(outcome.value.model.ridge);
        let variance = match self.config.variance {
            VarianceMode::None => None,
            VarianceMode::Plugin => {
                let residuals: Vec<f64> =
                    self.data.y_a.iter().zip(on_a.iter()).map(|(y, m)| y - m).collect();
                let s2 = residual_sample_variance(&residuals);
                let v = plugin_variance_poisson(self.data, on_b, weights, &ResidualVariance::Homoscedastic(s2))?;
                diagnostics.design_variance = v.design_part;
                diagnostics.residual_variance = v.residual_part;
                Some(v.variance)
            }
            VarianceMode::Bootstrap { reps } => {
                let v = bootstrap_variance(
                    self.data,
                    &prepared.value,
                    cal.value.config,
                    self.config.solver,
                    Some(OutcomePredictions { on_a, on_b }),
                    reps,
                    self.config.seed,
                )?;
                diagnostics.bootstrap_dropped = Some(v.dropped);
                diagnostics.bootstrap_negative_weights = Some(v.negative_weights);
                Some(v.variance)
            }
        };
        let shared = prepared.elapsed + cal.elapsed + outcome.elapsed;
        let own = start.elapsed().saturating_sub(shared);
        self.finish(method, estimate, variance, own + shared, diagnostics)
    }

    fn finish(
        &self,
        method: Method,
        estimate: f64,
        variance: Option<f64>,
        elapsed: Duration,
        diagnostics: Diagnostics,
    ) -> Result<EstimateResult> {
        if !estimate.is_finite() {
            return Err(Error::Numeric(format!("{method} estimate is not finite")));
        }
        let ci = match variance {
            Some(v) => {
                let (lo, hi) = confidence_interval(estimate, v, self.config.level)?;
                Some([lo, hi])
            }
            None => None,
        };
        Ok(EstimateResult {
            method,
            estimate,
            variance,
            ci,
            seconds: elapsed.as_secs_f64(),
            diagnostics: Some(diagnostics),
        })
    }
}

pub fn ht_kl(data: &TwoSampleData, config: EstimatorConfig) -> Result<EstimateResult> {
    EstimationContext::new(data, config).run(Method::HtKl)
}

pub fn bss(data: &TwoSampleData, config: EstimatorConfig) -> Result<EstimateResult> {
    EstimationContext::new(data, config).run(Method::Bss)
}

pub fn prop(data: &TwoSampleData, config: EstimatorConfig) -> Result<EstimateResult> {
    EstimationContext::new(data, config).run(Method::Prop)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64, n_a: usize, n_b: usize) -> TwoSampleData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x_a = DMatrix::from_fn(n_a, 2, |_, _| rng.gen_range(0.0..1.0));
        let y_a = DVector::from_fn(n_a, |i, _| 1.0 + x_a[(i, 0)] + 0.5 * x_a[(i, 1)] + rng.gen_range(-0.1..0.1));
        let x_b = DMatrix::from_fn(n_b, 2, |_, _| rng.gen_range(0.0..1.0));
        let d_b = DVector::from_fn(n_b, |_, _| rng.gen_range(5.0..15.0));
        TwoSampleData::new(x_a, y_a, x_b, d_b, None).unwrap()
    }

    fn fixed(l1: f64, l2: f64) -> EstimatorConfig {
        EstimatorConfig {
            lambdas: LambdaChoice::Fixed { lambda1: l1, lambda2: l2 },
            ..Default::default()
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert_eq!("HT-KL".parse::<Method>().unwrap(), Method::HtKl);
        assert!("gam".parse::<Method>().is_err());
    }

    #[test]
    fn nsm_is_the_sample_mean() {
        let mut data = toy(1, 3, 3);
        data.y_a = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(nsm(&data).unwrap().estimate, 2.0);
        data.y_a = DVector::from_element(3, 7.5);
        assert_eq!(nsm(&data).unwrap().estimate, 7.5);
    }

    #[test]
    fn ht_form_with_uniform_ratios_is_the_sample_mean() {
        let data = toy(2, 20, 10);
        let w = vec![data.pop_size / 20.0; 20];
        assert_relative_eq!(ht_estimate(&data, &w), data.y_a.mean(), max_relative = 1e-13);
    }

    #[test]
    fn calibrated_form_special_cases() {
        let data = toy(3, 15, 8);
        let w: Vec<f64> = (0..15).map(|i| 1.0 + i as f64).collect();
        let zero_a = DVector::zeros(15);
        let zero_b = DVector::zeros(8);
        assert_relative_eq!(
            calibrated_estimate(&data, &w, &zero_a, &zero_b),
            ht_estimate(&data, &w),
            max_relative = 1e-14
        );
        let m_b = DVector::from_fn(8, |i, _| i as f64);
        let exact = data.with_responses(DVector::from_fn(15, |i, _| 0.3 * i as f64)).unwrap();
        let m_a = exact.y_a.clone();
        let expect = data.d_b.dot(&m_b) / data.pop_size;
        assert_relative_eq!(calibrated_estimate(&exact, &w, &m_a, &m_b), expect, max_relative = 1e-13);
    }

    #[test]
    fn ratio_forms_are_scale_invariant() {
        let data = toy(4, 60, 40);
        let (w, _) = ev_weights(&data).unwrap();
        let ratio = |w: &[f64]| w.iter().zip(data.y_a.iter()).map(|(a, b)| a * b).sum::<f64>() / w.iter().sum::<f64>();
        let scaled: Vec<f64> = w.iter().map(|v| v * 37.5).collect();
        assert_relative_eq!(ratio(&w), ratio(&scaled), max_relative = 1e-12);
        assert_relative_eq!(ev_estimator(&data, 2).unwrap().estimate, ratio(&w), max_relative = 1e-12);
    }

    #[test]
    fn dr_with_exact_outcome_model_reduces_to_b_prediction() {
        let data = toy(5, 80, 50);
        let y = DVector::from_fn(80, |i, _| 2.0 - data.x_a[(i, 0)] + 3.0 * data.x_a[(i, 1)]);
        let exact = data.with_responses(y).unwrap();
        let expect = (0..50)
            .map(|i| data.d_b[i] * (2.0 - data.x_b[(i, 0)] + 3.0 * data.x_b[(i, 1)]))
            .sum::<f64>()
            / data.pop_size;
        assert_relative_eq!(dr_estimator(&exact, 1).unwrap().estimate, expect, max_relative = 1e-9);
    }

    #[test]
    fn versions_outside_range_are_rejected() {
        let data = toy(6, 10, 10);
        assert!(ev_estimator(&data, 3).is_err());
        assert!(dr_estimator(&data, 0).is_err());
    }

    #[test]
    fn context_runs_all_methods_and_shares_work() {
        let data = toy(7, 60, 30);
        let ctx = EstimationContext::new(&data, fixed(1e-4, 1e-4));
        for m in Method::ALL {
            let r = ctx.run(m).unwrap();
            assert!(r.estimate.is_finite(), "{m}");
            assert!(r.seconds >= 0.0);
            if let Some([lo, hi]) = r.ci {
                assert!(lo <= r.estimate && r.estimate <= hi);
            }
        }
        let prop = ctx.run(Method::Prop).unwrap();
        assert!(prop.variance.unwrap() >= 0.0);
        let (_, sol) = ctx.kl_solution().unwrap();
        assert_relative_eq!(
            ctx.run(Method::HtKl).unwrap().estimate,
            ht_estimate(&data, &sol.weights),
            max_relative = 1e-14
        );
        for w in &sol.weights {
            assert!(*w >= 1.0);
        }
    }

    #[test]
    fn affine_responses_give_affine_estimates() {
        let data = toy(8, 50, 30);
        let moved = data.with_responses(data.y_a.map(|y| 3.0 * y - 2.0)).unwrap();
        let base = EstimationContext::new(&data, fixed(1e-4, 1e-4));
        let other = EstimationContext::new(&moved, fixed(1e-4, 1e-4));
        let (_, sol) = base.kl_solution().unwrap();
        // the calibrated forms reuse x-only weights; the outcome model is refit
        let a = ht_estimate(&data, &sol.weights);
        let b = ht_estimate(&moved, &sol.weights);
        let wsum: f64 = sol.weights.iter().sum::<f64>() / data.pop_size;
        assert_relative_eq!(b, 3.0 * a - 2.0 * wsum, max_relative = 1e-12);
        // N defaults to Σ d_B here, so the B-side shift is exact
        for m in [Method::Nsm, Method::Ev2, Method::Dr1, Method::Bss, Method::Prop] {
            let ea = base.run(m).unwrap().estimate;
            let eb = other.run(m).unwrap().estimate;
            assert_relative_eq!(eb, 3.0 * ea - 2.0, max_relative = 1e-8);
        }
    }
}
