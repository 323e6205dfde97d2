//! Finite-population generators, Poisson/Bernoulli sample draws and the
//! Monte Carlo comparison harness.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TwoSampleData;
use crate::error::{Error, Result};
use crate::estimators::regression::expit;
use crate::estimators::{
    EstimationContext, EstimatorConfig, LambdaChoice, Method, VarianceMode, DEFAULT_LAMBDA_SCALE,
};
use crate::rng::substream;
use crate::variance::pairwise_sum;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setup {
    Linear,
    Nonlinear,
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setup::Linear => "linear",
            Setup::Nonlinear => "nonlinear",
        })
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "linear" => Ok(Setup::Linear),
            "nonlinear" => Ok(Setup::Nonlinear),
            other => Err(Error::Config(format!("unknown setup `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PopulationSpec {
    pub setup: Setup,
    pub pop_size: usize,
    pub n_a0: f64,
    pub n_b0: f64,
    pub seed: u64,
}

impl PopulationSpec {
    pub fn new(setup: Setup, pop_size: usize, n_a0: f64, n_b0: f64, seed: u64) -> Result<Self> {
        let spec = Self { setup, pop_size, n_a0, n_b0, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n_b0 > 0.0 && self.n_b0 < self.n_a0 && self.n_a0 < self.pop_size as f64) {
            return Err(Error::Config(format!(
                "need 0 < n_B0 < n_A0 < N, got n_B0 = {}, n_A0 = {}, N = {}",
                self.n_b0, self.n_a0, self.pop_size
            )));
        }
        Ok(())
    }
}

/// Population with its true mean function and sampling probabilities.
#[derive(Debug, Clone)]
pub struct FinitePopulation {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub m: DVector<f64>,
    pub pi_a: DVector<f64>,
    pub pi_b: DVector<f64>,
    pub ybar: f64,
}

impl FinitePopulation {
    pub fn size(&self) -> usize {
        self.y.len()
    }
}

/// Standard normal restricted to `[lo, hi]` by rejection.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    assert!(lo < hi, "empty truncation interval");
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if (lo..=hi).contains(&z) {
            return z;
        }
    }
}

/// Beta(3,3) as a ratio of Gamma(3) draws.
pub fn beta33<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let g = Gamma::new(3.0, 1.0).expect("valid shape");
    loop {
        let a = g.sample(rng);
        let b = g.sample(rng);
        let v = a / (a + b);
        if v > 0.0 && v < 1.0 {
            return v;
        }
    }
}

/// Scales `g` so that it sums to `total`; any value at or above `limit`
/// is an error rather than being clamped.
fn scale_to_total(g: &[f64], total: f64, limit: f64, strict: bool, what: &str) -> Result<DVector<f64>> {
    let sum = pairwise_sum(g);
    let p = DVector::from_iterator(g.len(), g.iter().map(|v| v * total / sum));
    let over = p.iter().filter(|&&v| if strict { v >= limit } else { v > limit }).count();
    if over > 0 {
        log::warn!("{over} {what} probabilities exceed 1 after scaling");
        return Err(Error::RescaleOverflow { count: over });
    }
    Ok(p)
}

pub fn gen_population(spec: &PopulationSpec) -> Result<FinitePopulation> {
    gen_population_with(spec, &mut substream(spec.seed, 0))
}

pub fn gen_population_with<R: Rng + ?Sized>(spec: &PopulationSpec, rng: &mut R) -> Result<FinitePopulation> {
    spec.validate()?;
    let n = spec.pop_size;
    let mut x = DMatrix::zeros(n, 2);
    let mut m = DVector::zeros(n);
    let mut y = DVector::zeros(n);
    let mut select = vec![0.0; n];
    match spec.setup {
        Setup::Linear => {
            let noise = Normal::new(0.0, 1.0).expect("valid sd");
            for i in 0..n {
                let z1 = 2.0 * (beta33(rng) - 0.5);
                let z2 = 2.0 * (beta33(rng) - 0.5);
                let (x1, x2) = (z1, 0.3 * z1 + z2);
                x[(i, 0)] = x1;
                x[(i, 1)] = x2;
                m[i] = 10.0 + 2.0 * x1 + 2.0 * x2;
                y[i] = m[i] + noise.sample(rng);
            }
            let m_min = m.min();
            for i in 0..n {
                select[i] = m[i] - m_min + 0.25;
            }
        }
        Setup::Nonlinear => {
            let noise = Normal::new(0.0, 0.5).expect("valid sd");
            for i in 0..n {
                let z1 = truncated_normal(rng, -3.0, 3.0);
                let z2 = truncated_normal(rng, -3.0, 3.0);
                x[(i, 0)] = z1.abs() * (-z1).exp();
                x[(i, 1)] = z2.abs() * z2.exp();
                m[i] = 3.0 + 2.0 * z1 + z2;
                y[i] = m[i] + noise.sample(rng);
                select[i] = expit(1.0 - 0.8 * z1 - 0.8 * z2);
            }
        }
    }
    let pi_a = scale_to_total(&select, spec.n_a0, 1.0, true, "selection")?;
    let m_min = m.min();
    let g_b: Vec<f64> = m.iter().map(|v| (v - m_min + 2.0).ln()).collect();
    let pi_b = scale_to_total(&g_b, spec.n_b0, 1.0, false, "inclusion")?;
    let ybar = pairwise_sum(y.as_slice()) / n as f64;
    Ok(FinitePopulation { x, y, m, pi_a, pi_b, ybar })
}

const MAX_REDRAWS: usize = 10;

pub fn draw_samples(pop: &FinitePopulation, seed: u64) -> Result<TwoSampleData> {
    draw_samples_with(pop, &mut substream(seed, 1))
}

/// Independent Bernoulli selection into A and Poisson sampling into B,
/// redrawing when either sample has fewer than two units.
pub fn draw_samples_with<R: Rng + ?Sized>(pop: &FinitePopulation, rng: &mut R) -> Result<TwoSampleData> {
    let n = pop.size();
    for _ in 0..MAX_REDRAWS {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for i in 0..n {
            if rng.gen::<f64>() < pop.pi_a[i] {
                a.push(i);
            }
            if rng.gen::<f64>() < pop.pi_b[i] {
                b.push(i);
            }
        }
        if a.len() < 2 || b.len() < 2 {
            continue;
        }
        let d = pop.x.ncols();
        let x_a = DMatrix::from_fn(a.len(), d, |r, c| pop.x[(a[r], c)]);
        let y_a = DVector::from_fn(a.len(), |r, _| pop.y[a[r]]);
        let x_b = DMatrix::from_fn(b.len(), d, |r, c| pop.x[(b[r], c)]);
        let d_b = DVector::from_fn(b.len(), |r, _| 1.0 / pop.pi_b[b[r]]);
        return TwoSampleData::new(x_a, y_a, x_b, d_b, Some(n as f64));
    }
    Err(Error::Numeric(format!("sample A or B had fewer than two units in {MAX_REDRAWS} draws")))
}

#[derive(Debug, Clone)]
pub struct MonteCarloOptions {
    pub spec: PopulationSpec,
    pub methods: Vec<Method>,
    pub reps: usize,
    /// Bootstrap replicates for the HT_KL variance, if any.
    pub bootstrap_reps: Option<usize>,
    pub estimator: EstimatorConfig,
}

impl MonteCarloOptions {
    /// Scaled default λ's, plug-in variances and no bootstrap.
    pub fn new(spec: PopulationSpec, methods: Vec<Method>, reps: usize) -> Self {
        let estimator = EstimatorConfig {
            lambdas: LambdaChoice::Scaled { c1: DEFAULT_LAMBDA_SCALE.0, c2: DEFAULT_LAMBDA_SCALE.1 },
            seed: spec.seed,
            ..EstimatorConfig::default()
        };
        Self { spec, methods, reps, bootstrap_reps: None, estimator }
    }
}

/// One method on one Monte Carlo replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub method: Method,
    pub n_a: usize,
    pub n_b: usize,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub bias: Option<f64>,
    pub variance: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub covered: Option<bool>,
    /// Wall time; left out of serialized records so that output depends on
    /// the seed alone.
    #[serde(skip_serializing, default)]
    pub seconds: Option<f64>,
    pub error: Option<String>,
}

/// Per-method aggregate over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub replicates: usize,
    pub failures: usize,
    /// More than 5% of replicates failed.
    pub flagged: bool,
    pub mean_bias: f64,
    /// Monte Carlo standard error of the mean bias.
    pub mc_se: f64,
    pub standardized_bias: f64,
    pub rmse: f64,
    pub coverage: Option<f64>,
    pub mean_variance: Option<f64>,
    /// Sample variance of the estimation errors across replicates.
    pub error_variance: f64,
    /// `(mean variance estimate − error variance)/error variance`.
    pub variance_relative_bias: Option<f64>,
    pub mean_seconds: f64,
}

/// Population draw, samples and all methods for replicate `rep`.
pub fn run_replicate(options: &MonteCarloOptions, rep: usize) -> Vec<ReplicateRecord> {
    let mut rng = substream(options.spec.seed, rep as u64);
    let setup = gen_population_with(&options.spec, &mut rng)
        .and_then(|pop| draw_samples_with(&pop, &mut rng).map(|d| (pop.ybar, d)));
    let (truth, data) = match setup {
        Ok(v) => v,
        Err(e) => {
            return options
                .methods
                .iter()
                .map(|&method| failed(rep, method, f64::NAN, 0, 0, &e))
                .collect();
        }
    };
    let mut config = options.estimator.clone();
    config.seed = options.estimator.seed.wrapping_add(rep as u64);
    let plain = EstimationContext::new(&data, config.clone());
    let boot_ctx = options.bootstrap_reps.map(|reps| {
        EstimationContext::new(&data, EstimatorConfig { variance: VarianceMode::Bootstrap { reps }, ..config })
    });
    options
        .methods
        .iter()
        .map(|&method| {
            let result = match (&boot_ctx, method) {
                (Some(ctx), Method::HtKl) => ctx.run(method),
                _ => plain.run(method),
            };
            match result {
                Ok(r) => {
                    let covered = r.ci.map(|[lo, hi]| lo <= truth && truth <= hi);
                    ReplicateRecord {
                        replicate: rep,
                        method,
                        n_a: data.n_a(),
                        n_b: data.n_b(),
                        truth,
                        estimate: Some(r.estimate),
                        bias: Some(r.estimate - truth),
                        variance: r.variance,
                        ci_low: r.ci.map(|c| c[0]),
                        ci_high: r.ci.map(|c| c[1]),
                        covered,
                        seconds: Some(r.seconds),
                        error: None,
                    }
                }
                Err(e) => {
                    log::warn!("replicate {rep}: {method} failed: {e}");
                    failed(rep, method, truth, data.n_a(), data.n_b(), &e)
                }
            }
        })
        .collect()
}

fn failed(rep: usize, method: Method, truth: f64, n_a: usize, n_b: usize, e: &Error) -> ReplicateRecord {
    ReplicateRecord {
        replicate: rep,
        method,
        n_a,
        n_b,
        truth,
        estimate: None,
        bias: None,
        variance: None,
        ci_low: None,
        ci_high: None,
        covered: None,
        seconds: None,
        error: Some(e.to_string()),
    }
}

/// Runs all replicates; records are ordered by replicate, then by the
/// order of `options.methods`.
pub fn monte_carlo(options: &MonteCarloOptions) -> Result<Vec<ReplicateRecord>> {
    if options.reps == 0 {
        return Err(Error::Config("at least one Monte Carlo replicate is required".into()));
    }
    if options.methods.is_empty() {
        return Err(Error::Config("no methods selected".into()));
    }
    options.spec.validate()?;
    let per_rep: Vec<Vec<ReplicateRecord>> =
        (0..options.reps).into_par_iter().map(|rep| run_replicate(options, rep)).collect();
    Ok(per_rep.into_iter().flatten().collect())
}

fn sample_variance(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return f64::NAN;
    }
    let mean = pairwise_sum(v) / v.len() as f64;
    let sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    pairwise_sum(&sq) / (v.len() - 1) as f64
}

pub fn summarize(records: &[ReplicateRecord], methods: &[Method]) -> Vec<MethodSummary> {
    methods
        .iter()
        .map(|&method| {
            let rows: Vec<&ReplicateRecord> = records.iter().filter(|r| r.method == method).collect();
            let ok: Vec<&ReplicateRecord> = rows.iter().copied().filter(|r| r.bias.is_some()).collect();
            let bias: Vec<f64> = ok.iter().filter_map(|r| r.bias).collect();
            let k = bias.len() as f64;
            let mean_bias = pairwise_sum(&bias) / k;
            let error_variance = sample_variance(&bias);
            let mc_se = (error_variance / k).sqrt();
            let sq: Vec<f64> = bias.iter().map(|b| b * b).collect();
            let covered: Vec<bool> = ok.iter().filter_map(|r| r.covered).collect();
            let coverage = (!covered.is_empty())
                .then(|| covered.iter().filter(|&&c| c).count() as f64 / covered.len() as f64);
            let vars: Vec<f64> = ok.iter().filter_map(|r| r.variance).collect();
            let mean_variance = (!vars.is_empty()).then(|| pairwise_sum(&vars) / vars.len() as f64);
            let secs: Vec<f64> = ok.iter().filter_map(|r| r.seconds).collect();
            let failures = rows.len() - ok.len();
            MethodSummary {
                method,
                replicates: rows.len(),
                failures,
                flagged: failures * 20 > rows.len(),
                mean_bias,
                mc_se,
                standardized_bias: mean_bias / mc_se,
                rmse: (pairwise_sum(&sq) / k).sqrt(),
                coverage,
                mean_variance,
                error_variance,
                variance_relative_bias: mean_variance.map(|v| (v - error_variance) / error_variance),
                mean_seconds: pairwise_sum(&secs) / secs.len().max(1) as f64,
            }
        })
        .collect()
}

/// Writes records as CSV with a header row.
pub fn write_records<W: std::io::Write>(records: &[ReplicateRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec(setup: Setup, n: usize, seed: u64) -> PopulationSpec {
        PopulationSpec::new(setup, n, n as f64 / 5.0, n as f64 / 50.0, seed).unwrap()
    }

    #[test]
    fn probabilities_hit_their_totals() {
        for setup in [Setup::Linear, Setup::Nonlinear] {
            let pop = gen_population(&spec(setup, 5000, 3)).unwrap();
            assert!((pop.pi_a.sum() - 1000.0).abs() < 1e-6);
            assert!((pop.pi_b.sum() - 100.0).abs() < 1e-6);
            assert!(pop.pi_a.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!(pop.pi_b.iter().all(|&p| p > 0.0 && p <= 1.0));
            assert_relative_eq!(pop.ybar, pop.y.mean(), max_relative = 1e-14);
        }
    }

    #[test]
    fn nonlinear_selection_is_a_scaled_expit() {
        let pop = gen_population(&spec(Setup::Nonlinear, 2000, 5)).unwrap();
        let mut rng = substream(5, 0);
        let mut total = 0.0;
        let mut first = 0.0;
        for i in 0..2000 {
            let z1 = truncated_normal(&mut rng, -3.0, 3.0);
            let z2 = truncated_normal(&mut rng, -3.0, 3.0);
            let _: f64 = Normal::new(0.0, 0.5).unwrap().sample(&mut rng);
            let e = expit(1.0 - 0.8 * z1 - 0.8 * z2);
            if i == 0 {
                first = e;
            }
            total += e;
        }
        let c_a = total / 400.0;
        assert_relative_eq!(pop.pi_a[0] * c_a, first, max_relative = 1e-12);
    }

    #[test]
    fn linear_covariate_is_centred() {
        let pop = gen_population(&spec(Setup::Linear, 20000, 11)).unwrap();
        let x1 = pop.x.column(0);
        let mean = x1.mean();
        let sd = (x1.map(|v| (v - mean).powi(2)).sum() / 19999.0).sqrt();
        assert!(mean.abs() < 4.0 / (20000f64).sqrt() * sd);
    }

    #[test]
    fn overflow_is_reported() {
        let s = PopulationSpec { setup: Setup::Linear, pop_size: 100, n_a0: 99.0, n_b0: 10.0, seed: 1 };
        assert!(matches!(gen_population(&s), Err(Error::RescaleOverflow { count }) if count > 0));
    }

    #[test]
    fn spec_ordering_is_enforced() {
        assert!(PopulationSpec::new(Setup::Linear, 100, 10.0, 20.0, 0).is_err());
        assert!(PopulationSpec::new(Setup::Linear, 100, 200.0, 20.0, 0).is_err());
    }

    #[test]
    fn certain_selection_takes_everyone() {
        let mut pop = gen_population(&spec(Setup::Linear, 200, 2)).unwrap();
        pop.pi_a.fill(1.0);
        let data = draw_samples(&pop, 9).unwrap();
        assert_eq!(data.n_a(), 200);
        assert_eq!(data.y_a, pop.y);
        assert_eq!(data, draw_samples(&pop, 9).unwrap());
    }

    #[test]
    fn truncated_normal_moments() {
        let mut rng = substream(1, 0);
        let v: Vec<f64> = (0..100_000).map(|_| truncated_normal(&mut rng, -3.0, 3.0)).collect();
        assert!(v.iter().all(|x| (-3.0..=3.0).contains(x)));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt();
        assert!(mean.abs() < 0.02);
        // sd² = 1 − 2·3·φ(3)/(2Φ(3) − 1)
        let phi3 = (-4.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mass = 0.997_300_203_936_739_8;
        let target = (1.0 - 6.0 * phi3 / mass).sqrt();
        assert!((sd / target - 1.0).abs() < 0.02, "{sd} vs {target}");
    }

    #[test]
    fn beta33_moments() {
        let mut rng = substream(2, 0);
        let v: Vec<f64> = (0..100_000).map(|_| beta33(&mut rng)).collect();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        assert!((mean - 0.5).abs() < 0.01);
        assert!((var * 28.0 - 1.0).abs() < 0.03);
    }
}
