//! Penalized min–max calibration of density ratios on sample `A`.
//!
//! For a candidate ratio vector `γ = (r_i)_{i∈A}` the pooled discrepancy
//! vector is `w(γ)`, with `1 + (N/n_A − 1)·r_i` on A rows and `−d_B,i` on B
//! rows. Writing the Gram matrix as `P1 diag(Q1) P1ᵀ`, the supremum over the
//! RKHS reduces to the largest eigenvalue of
//!
//! `B(γ) = (n/N²)·v·vᵀ − n·λ1·Q1⁻¹`,   `v = P1ᵀ w(γ)`,
//!
//! which is diagonal plus rank one and is solved through the secular
//! equation. The outer problem minimizes that eigenvalue plus a weight
//! penalty over the box `[ξ1, ξ2]^{n_A}` by projected gradient descent.

mod cv;
mod secular;

pub use cv::{cross_validate, default_lambda_grid, CvOptions, CvSelection};
pub use secular::{secular_max_eig, top_eigenpair, TopEigen};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::TwoSampleData;
use crate::error::{Error, Result};
use crate::kernel::{self, GramSpectrum, ScaledDesign};

/// Direction of the KL weight penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlSign {
    /// Minimize `λ_max − λ2·Q_A(γ)`.
    #[default]
    AsWritten,
    /// Minimize `λ_max + λ2·Q_A(γ)`.
    Reversed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Penalty {
    Kl(KlSign),
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub penalty: Penalty,
    pub xi1: f64,
    pub xi2: f64,
    /// Extra upper cap on the ratios (`C_N`), applied as `min(ξ2, C_N)`.
    pub cap: Option<f64>,
}

impl CalibrationConfig {
    pub const DEFAULT_XI1: f64 = 1e-8;
    pub const DEFAULT_XI2: f64 = 1e8;

    pub fn new(lambda1: f64, lambda2: f64, penalty: Penalty) -> Self {
        Self {
            lambda1,
            lambda2,
            penalty,
            xi1: Self::DEFAULT_XI1,
            xi2: Self::DEFAULT_XI2,
            cap: None,
        }
    }

    pub fn upper_bound(&self) -> f64 {
        match self.cap {
            Some(c) => self.xi2.min(c),
            None => self.xi2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1.is_finite()) {
            return Err(Error::Config(format!("lambda1 must be positive, got {}", self.lambda1)));
        }
        if !(self.lambda2 >= 0.0 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!("lambda2 must be nonnegative, got {}", self.lambda2)));
        }
        let upper = self.upper_bound();
        if !(self.xi1 > 0.0 && self.xi1 <= 1.0 && upper >= 1.0 && upper.is_finite()) {
            return Err(Error::Config(format!(
                "bounds must satisfy 0 < xi1 <= 1 <= min(xi2, cap), got [{}, {}]",
                self.xi1, upper
            )));
        }
        Ok(())
    }
}

/// Stopping rule of the projected-gradient solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol: f64,
    pub initial_step: StepRule,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6, initial_step: StepRule::BarzilaiBorwein }
    }
}

/// Trial step at the start of each Armijo line search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepRule {
    /// Always start from 1.
    Unit,
    /// Alternating Barzilai–Borwein steps from the last accepted move,
    /// starting from 1.
    #[default]
    BarzilaiBorwein,
}

/// One calibration instance over a fixed Gram spectrum.
#[derive(Debug, Clone)]
pub struct CalibrationProblem<'a> {
    spectrum: &'a GramSpectrum,
    a_rows: Vec<usize>,
    b_rows: Vec<usize>,
    d_b: Vec<f64>,
    pop_size: f64,
    config: CalibrationConfig,
    /// `w(γ)` at `γ = 0`.
    base: DVector<f64>,
    /// Diagonal `−n·λ1/Q1_k`, nonincreasing.
    diag: Vec<f64>,
}

/// Largest eigenpair of the inner matrix.
#[derive(Debug, Clone)]
pub struct InnerValue {
    pub lambda_max: f64,
    pub beta: DVector<f64>,
    pub gap: f64,
    /// `v = P1ᵀ w(γ)`.
    pub v: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub inner: f64,
    /// Signed penalty contribution, `value = inner + penalty_term`.
    pub penalty_term: f64,
    /// Top eigenvalue nearly repeated; the gradient is a subgradient.
    pub degenerate: bool,
}

impl<'a> CalibrationProblem<'a> {
    pub fn new(
        spectrum: &'a GramSpectrum,
        a_rows: Vec<usize>,
        b_rows: Vec<usize>,
        d_b: Vec<f64>,
        pop_size: f64,
        config: CalibrationConfig,
    ) -> Result<Self> {
        if d_b.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Input("design weights must be positive".into()));
        }
        Self::with_signed_weights(spectrum, a_rows, b_rows, d_b, pop_size, config)
    }

    /// As [`CalibrationProblem::new`] but accepting any finite B weights,
    /// as produced by normal bootstrap draws.
    pub fn with_signed_weights(
        spectrum: &'a GramSpectrum,
        a_rows: Vec<usize>,
        b_rows: Vec<usize>,
        d_b: Vec<f64>,
        pop_size: f64,
        config: CalibrationConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = spectrum.n();
        if spectrum.rank() == 0 {
            return Err(Error::DegenerateSpectrum("rank-zero spectrum".into()));
        }
        if a_rows.is_empty() {
            return Err(Error::Input("sample A is empty".into()));
        }
        if b_rows.len() != d_b.len() {
            return Err(Error::Shape(format!(
                "{} B rows but {} design weights",
                b_rows.len(),
                d_b.len()
            )));
        }
        if let Some(&r) = a_rows.iter().chain(&b_rows).find(|&&r| r >= n) {
            return Err(Error::Shape(format!("design row {r} out of range for n = {n}")));
        }
        if d_b.iter().any(|d| !d.is_finite()) {
            return Err(Error::Input("design weights must be finite".into()));
        }
        if !(pop_size.is_finite() && pop_size >= a_rows.len() as f64) {
            return Err(Error::Input(format!(
                "population size {pop_size} is smaller than n_A = {}",
                a_rows.len()
            )));
        }

        let mut base = DVector::zeros(n);
        for &r in &a_rows {
            base[r] += 1.0;
        }
        for (&r, &d) in b_rows.iter().zip(&d_b) {
            base[r] -= d;
        }
        let nf = n as f64;
        let diag = spectrum.q1.iter().map(|&q| -nf * config.lambda1 / q).collect();
        Ok(Self {
            spectrum,
            a_rows,
            b_rows,
            d_b,
            pop_size,
            config,
            base,
            diag,
        })
    }

    /// Builds the problem for a full two-sample data set on a prepared design.
    pub fn from_data(
        prepared: &'a PreparedDesign,
        data: &TwoSampleData,
        config: CalibrationConfig,
    ) -> Result<Self> {
        Self::new(
            &prepared.spectrum,
            prepared.design.a_rows.clone(),
            prepared.design.b_rows.clone(),
            data.d_b.iter().copied().collect(),
            data.pop_size,
            config,
        )
    }

    pub fn n(&self) -> usize {
        self.spectrum.n()
    }

    pub fn n_a(&self) -> usize {
        self.a_rows.len()
    }

    pub fn pop_size(&self) -> f64 {
        self.pop_size
    }

    pub fn config(&self) -> &CalibrationConfig {
        &self.config
    }

    pub fn a_rows(&self) -> &[usize] {
        &self.a_rows
    }

    pub fn b_rows(&self) -> &[usize] {
        &self.b_rows
    }

    pub fn d_b(&self) -> &[f64] {
        &self.d_b
    }

    pub fn spectrum(&self) -> &GramSpectrum {
        self.spectrum
    }

    /// `N/n_A − 1`.
    pub fn ratio_scale(&self) -> f64 {
        self.pop_size / self.n_a() as f64 - 1.0
    }

    /// `n/N²`.
    pub fn rho(&self) -> f64 {
        self.n() as f64 / (self.pop_size * self.pop_size)
    }

    /// Diagonal of `−n·λ1·Q1⁻¹`.
    pub fn penalty_diagonal(&self) -> &[f64] {
        &self.diag
    }

    pub fn weights_from_ratios(&self, gamma: &DVector<f64>) -> DVector<f64> {
        let c = self.ratio_scale();
        gamma.map(|r| 1.0 + c * r)
    }

    fn check_len(&self, gamma: &DVector<f64>) -> Result<()> {
        if gamma.len() != self.n_a() {
            return Err(Error::Shape(format!(
                "gamma has {} entries, expected n_A = {}",
                gamma.len(),
                self.n_a()
            )));
        }
        Ok(())
    }

    /// Pooled discrepancy vector `w(γ)`; rows carrying several tags receive
    /// the sum of their contributions.
    pub fn discrepancy_vector(&self, gamma: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_len(gamma)?;
        let c = self.ratio_scale();
        let mut w = self.base.clone();
        for (&row, &r) in self.a_rows.iter().zip(gamma.iter()) {
            w[row] += c * r;
        }
        Ok(w)
    }

    /// Largest eigenvalue and unit eigenvector of `B(γ)`.
    pub fn inner_value(&self, gamma: &DVector<f64>) -> Result<InnerValue> {
        let w = self.discrepancy_vector(gamma)?;
        let v = self.spectrum.p1.tr_mul(&w);
        let top = top_eigenpair(&self.diag, v.as_slice(), self.rho())?;
        Ok(InnerValue {
            lambda_max: top.value,
            beta: top.vector,
            gap: top.gap,
            v,
        })
    }

    pub fn penalty_value(&self, gamma: &DVector<f64>) -> Result<f64> {
        match self.config.penalty {
            Penalty::Kl(_) => kl_penalty(gamma),
            Penalty::L2 => Ok(l2_penalty(gamma, self.pop_size)),
        }
    }

    /// Objective value alone, with the top eigenpair needed to finish the
    /// gradient.
    fn objective_value(&self, gamma: &DVector<f64>) -> Result<(f64, InnerValue)> {
        let inner = self.inner_value(gamma)?;
        let sign = match self.config.penalty {
            Penalty::Kl(KlSign::AsWritten) => -1.0,
            Penalty::Kl(KlSign::Reversed) | Penalty::L2 => 1.0,
        };
        let value = inner.lambda_max + sign * self.config.lambda2 * self.penalty_value(gamma)?;
        Ok((value, inner))
    }

    /// Objective value and gradient with respect to `γ`.
    pub fn objective_and_grad(&self, gamma: &DVector<f64>) -> Result<ObjectiveEval> {
        let inner = self.inner_value(gamma)?;
        self.eval_with_inner(gamma, inner)
    }

    fn eval_with_inner(&self, gamma: &DVector<f64>, inner: InnerValue) -> Result<ObjectiveEval> {
        let c = self.ratio_scale();
        let rho = self.rho();
        let lambda2 = self.config.lambda2;
        let n_a = self.n_a() as f64;

        // ∂λ_max/∂r_j = 2ρ (vᵀβ) (P1 β)_{row(j)} · c
        let p_beta = &self.spectrum.p1 * &inner.beta;
        let coef = 2.0 * rho * inner.v.dot(&inner.beta) * c;
        let mut grad = DVector::from_iterator(
            self.n_a(),
            self.a_rows.iter().map(|&row| coef * p_beta[row]),
        );

        let penalty_term = match self.config.penalty {
            Penalty::Kl(sign) => {
                let s = match sign {
                    KlSign::AsWritten => -1.0,
                    KlSign::Reversed => 1.0,
                };
                let q = kl_penalty(gamma)?;
                for (g, &r) in grad.iter_mut().zip(gamma.iter()) {
                    *g += s * lambda2 * r.ln() / n_a;
                }
                s * lambda2 * q
            }
            Penalty::L2 => {
                let q = l2_penalty(gamma, self.pop_size);
                for (g, &r) in grad.iter_mut().zip(gamma.iter()) {
                    *g += 2.0 * lambda2 * c * (1.0 + c * r) / n_a;
                }
                lambda2 * q
            }
        };

        let degenerate = inner.gap < 1e-10 * inner.lambda_max.abs();
        Ok(ObjectiveEval {
            value: inner.lambda_max + penalty_term,
            grad,
            inner: inner.lambda_max,
            penalty_term,
            degenerate,
        })
    }

    fn project(&self, x: &mut DVector<f64>) {
        let (lo, hi) = (self.config.xi1, self.config.upper_bound());
        for r in x.iter_mut() {
            *r = r.clamp(lo, hi);
        }
    }

    fn projected_gradient_norm(&self, x: &DVector<f64>, grad: &DVector<f64>) -> f64 {
        let mut step = x - grad;
        self.project(&mut step);
        (step - x).amax()
    }
}

/// Sample KL penalty `Q_A(γ) = n_A⁻¹ Σ r_i (log r_i − 1) + 1`.
pub fn kl_penalty(gamma: &DVector<f64>) -> Result<f64> {
    if gamma.is_empty() {
        return Err(Error::Input("empty ratio vector".into()));
    }
    let mut s = 0.0;
    for &r in gamma.iter() {
        if !(r > 0.0) {
            return Err(Error::Domain(format!("KL penalty needs positive ratios, got {r}")));
        }
        s += r * (r.ln() - 1.0);
    }
    Ok(s / gamma.len() as f64 + 1.0)
}

/// L2 weight penalty `Q_2(γ) = n_A⁻¹ Σ {1 + (N/n_A − 1) r_i}²`.
pub fn l2_penalty(gamma: &DVector<f64>, pop_size: f64) -> f64 {
    let n_a = gamma.len() as f64;
    let c = pop_size / n_a - 1.0;
    gamma.iter().map(|&r| (1.0 + c * r).powi(2)).sum::<f64>() / n_a
}

/// Fitted ratios, weights and solver diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct WeightSolution {
    pub gamma: Vec<f64>,
    pub weights: Vec<f64>,
    pub inner_value: f64,
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    /// Iterations at which the top eigenvalue was nearly repeated.
    pub degenerate_steps: usize,
    /// Stopped early: the line search found no decrease along the
    /// (sub)gradient, or the objective stopped decreasing.
    pub stalled: bool,
}

impl WeightSolution {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().expect("trace holds the initial value")
    }
}

const ARMIJO_SLOPE: f64 = 1e-4;
const ARMIJO_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
const BB_MIN_STEP: f64 = 1e-10;
const BB_MAX_STEP: f64 = 1e12;

const STAGNATION_WINDOW: usize = 20;

/// Decrease over the last `STAGNATION_WINDOW` iterations is below
/// `tol²·max(1, |f|)`. Near a repeated top eigenvalue the objective has a kink
/// and the gradient norm need not vanish at the minimizer.
fn stagnated(trace: &[f64], tol: f64) -> bool {
    if trace.len() <= STAGNATION_WINDOW {
        return false;
    }
    let last = trace[trace.len() - 1];
    let earlier = trace[trace.len() - 1 - STAGNATION_WINDOW];
    earlier - last <= tol * tol * last.abs().max(1.0)
}

/// Projected gradient descent with Armijo backtracking on the ratio box.
pub fn solve_weights(
    problem: &CalibrationProblem<'_>,
    init: &DVector<f64>,
    options: SolverOptions,
) -> Result<WeightSolution> {
    problem.check_len(init)?;
    let (lo, hi) = (problem.config.xi1, problem.config.upper_bound());
    if init.iter().any(|&r| !(r >= lo && r <= hi)) {
        return Err(Error::Contract(format!("initial ratios must lie in [{lo}, {hi}]")));
    }
    let mut x = init.clone();
    let mut eval = problem
        .objective_and_grad(&x)
        .map_err(|e| Error::Init(e.to_string()))?;
    if !eval.value.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Init(format!("objective {} at the initial point", eval.value)));
    }

    let mut trace = vec![eval.value];
    let mut converged = false;
    let mut iterations = 0;
    let mut degenerate_steps = usize::from(eval.degenerate);
    let mut grad_norm = problem.projected_gradient_norm(&x, &eval.grad);

    let mut trial_step = 1.0;
    let mut stalled = false;
    while iterations < options.max_iter {
        if grad_norm < options.tol {
            converged = true;
            break;
        }
        let mut accepted = None;
        let mut step = trial_step;
        // a failed search from a Barzilai–Borwein step is retried from 1
        for start in [trial_step, 1.0] {
            step = start;
            for _ in 0..MAX_BACKTRACKS {
                let mut trial = &x - step * &eval.grad;
                problem.project(&mut trial);
                let decrease = eval.grad.dot(&(&trial - &x));
                if decrease == 0.0 {
                    break;
                }
                if let Ok((value, inner)) = problem.objective_value(&trial) {
                    if value.is_finite() && value <= eval.value + ARMIJO_SLOPE * decrease {
                        accepted = Some((trial, inner));
                        break;
                    }
                }
                step *= ARMIJO_SHRINK;
            }
            if accepted.is_some() || start == 1.0 {
                break;
            }
        }
        let Some((trial, inner)) = accepted else {
            log::debug!("line search stalled after {iterations} iterations");
            stalled = true;
            break;
        };
        let next = problem.eval_with_inner(&trial, inner)?;
        iterations += 1;
        if options.initial_step == StepRule::BarzilaiBorwein {
            let s_k = &trial - &x;
            let y_k = &next.grad - &eval.grad;
            let sy = s_k.dot(&y_k);
            trial_step = if sy > 0.0 {
                let bb = if iterations % 2 == 1 { s_k.norm_squared() / sy } else { sy / y_k.norm_squared() };
                bb.clamp(BB_MIN_STEP, BB_MAX_STEP)
            } else {
                (2.0 * step).min(BB_MAX_STEP)
            };
        }
        x = trial;
        eval = next;
        degenerate_steps += usize::from(eval.degenerate);
        trace.push(eval.value);
        grad_norm = problem.projected_gradient_norm(&x, &eval.grad);
        if stagnated(&trace, options.tol) {
            log::debug!("objective stagnated after {iterations} iterations");
            stalled = true;
            break;
        }
    }
    if !converged && iterations > 0 && grad_norm < options.tol {
        converged = true;
    }

    let weights = problem.weights_from_ratios(&x);
    Ok(WeightSolution {
        gamma: x.iter().copied().collect(),
        weights: weights.iter().copied().collect(),
        inner_value: eval.inner,
        objective_trace: trace,
        iterations,
        converged,
        grad_norm,
        degenerate_steps,
        stalled,
    })
}

/// Scaled pooled design together with its Gram spectrum.
#[derive(Debug, Clone)]
pub struct PreparedDesign {
    pub design: ScaledDesign,
    pub spectrum: GramSpectrum,
}

impl PreparedDesign {
    pub fn new(data: &TwoSampleData, cutoff_ratio: f64) -> Result<Self> {
        let design = kernel::minmax_scale(&data.x_a, &data.x_b)?;
        let gram = kernel::gram_matrix(&design)?;
        let spectrum = kernel::eigendecompose(&gram, cutoff_ratio)?;
        Ok(Self { design, spectrum })
    }
}

/// Solves the calibration problem for a data set from the uniform start.
pub fn calibrate_weights(
    prepared: &PreparedDesign,
    data: &TwoSampleData,
    config: CalibrationConfig,
    options: SolverOptions,
) -> Result<WeightSolution> {
    let problem = CalibrationProblem::from_data(prepared, data, config)?;
    let init = DVector::from_element(problem.n_a(), 1.0);
    solve_weights(&problem, &init, options)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem_parts(seed: u64, n_a: usize, n_b: usize) -> (GramSpectrum, Vec<f64>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_a + n_b;
        let pts = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
        let gram = kernel::gram_of_points(&pts).unwrap();
        let spectrum = kernel::eigendecompose(&gram, 1e-12).unwrap();
        let d_b: Vec<f64> = (0..n_b).map(|_| rng.gen_range(2.0..8.0)).collect();
        let pop: f64 = d_b.iter().sum();
        (spectrum, d_b, pop)
    }

    fn problem<'a>(
        spec: &'a GramSpectrum,
        d_b: &[f64],
        pop: f64,
        n_a: usize,
        config: CalibrationConfig,
    ) -> CalibrationProblem<'a> {
        let n_b = d_b.len();
        CalibrationProblem::new(
            spec,
            (0..n_a).collect(),
            (n_a..n_a + n_b).collect(),
            d_b.to_vec(),
            pop,
            config,
        )
        .unwrap()
    }

    #[test]
    fn discrepancy_entries() {
        let (spec, d_b, pop) = random_problem_parts(1, 4, 3);
        let cfg = CalibrationConfig::new(1e-3, 0.0, Penalty::Kl(KlSign::AsWritten));
        let p = problem(&spec, &d_b, pop, 4, cfg);
        let w = p.discrepancy_vector(&DVector::zeros(4)).unwrap();
        for i in 0..4 {
            assert_eq!(w[i], 1.0);
        }
        for j in 0..3 {
            assert_eq!(w[4 + j], -d_b[j]);
        }
        let gamma = DVector::from_vec(vec![0.5, 1.0, 2.0, 3.0]);
        let w = p.discrepancy_vector(&gamma).unwrap();
        let c = pop / 4.0 - 1.0;
        for i in 0..4 {
            assert_relative_eq!(w[i], 1.0 + c * gamma[i], epsilon = 1e-14);
        }
        assert!(matches!(p.discrepancy_vector(&DVector::zeros(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn discrepancy_with_unit_scale() {
        let (spec, d_b, _) = random_problem_parts(2, 4, 3);
        let cfg = CalibrationConfig::new(1e-3, 0.0, Penalty::Kl(KlSign::AsWritten));
        let p = problem(&spec, &d_b, 4.0, 4, cfg);
        let w = p.discrepancy_vector(&DVector::from_element(4, 1.0)).unwrap();
        assert!(w.rows(0, 4).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn shared_row_sums_both_contributions() {
        let pts = DMatrix::from_row_slice(3, 1, &[0.0, 0.5, 1.0]);
        let spec = kernel::eigendecompose(&kernel::gram_of_points(&pts).unwrap(), 1e-12).unwrap();
        let cfg = CalibrationConfig::new(1e-3, 0.0, Penalty::L2);
        let p = CalibrationProblem::new(&spec, vec![0, 1], vec![1, 2], vec![3.0, 5.0], 8.0, cfg)
            .unwrap();
        let w = p.discrepancy_vector(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_relative_eq!(w[1], 1.0 + 3.0 * 2.0 - 3.0);
        assert_relative_eq!(w[2], -5.0);
    }

    #[test]
    fn inner_value_matches_dense() {
        let (spec, d_b, pop) = random_problem_parts(3, 5, 3);
        let cfg = CalibrationConfig::new(1e-2, 0.0, Penalty::Kl(KlSign::AsWritten));
        let p = problem(&spec, &d_b, pop, 5, cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gamma = DVector::from_fn(5, |_, _| rng.gen_range(0.2..3.0));
        let iv = p.inner_value(&gamma).unwrap();
        let m = spec.rank();
        let n = p.n() as f64;
        let dense = DMatrix::from_fn(m, m, |i, j| {
            p.rho() * iv.v[i] * iv.v[j] - if i == j { n * 1e-2 / spec.q1[i] } else { 0.0 }
        });
        let top = kernel::symmetric_eigenvalues(&dense).unwrap()[0];
        assert_relative_eq!(iv.lambda_max, top, max_relative = 1e-10);
        // Rayleigh bound over random unit vectors
        for _ in 0..200 {
            let b = DVector::from_fn(m, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let q = (b.transpose() * &dense * &b)[(0, 0)];
            assert!(q <= iv.lambda_max + 1e-10);
        }
    }

    #[test]
    fn penalties() {
        let ones = DVector::from_element(5, 1.0);
        assert_relative_eq!(kl_penalty(&ones).unwrap(), 0.0, epsilon = 1e-15);
        let e = DVector::from_element(3, std::f64::consts::E);
        assert_relative_eq!(kl_penalty(&e).unwrap(), 1.0, epsilon = 1e-15);
        assert!(matches!(kl_penalty(&DVector::from_vec(vec![1.0, 0.0])), Err(Error::Domain(_))));

        let g = DVector::from_vec(vec![0.3, 2.0, 7.0]);
        assert_relative_eq!(l2_penalty(&g, 3.0), 1.0);
        assert_relative_eq!(l2_penalty(&ones, 10.0), 4.0);
        let direct = (0.3f64 * (0.3f64.ln() - 1.0) + 2.0 * (2f64.ln() - 1.0) + 7.0 * (7f64.ln() - 1.0)) / 3.0 + 1.0;
        assert_relative_eq!(kl_penalty(&g).unwrap(), direct, epsilon = 1e-14);
    }

    #[test]
    fn zero_lambda2_and_unit_ratios() {
        let (spec, d_b, pop) = random_problem_parts(4, 6, 4);
        let gamma = DVector::from_fn(6, |i, _| 0.5 + 0.3 * i as f64);
        let p0 = problem(&spec, &d_b, pop, 6, CalibrationConfig::new(1e-2, 0.0, Penalty::L2));
        let ev = p0.objective_and_grad(&gamma).unwrap();
        assert_eq!(ev.value, p0.inner_value(&gamma).unwrap().lambda_max);

        let pk = problem(&spec, &d_b, pop, 6, CalibrationConfig::new(1e-2, 0.7, Penalty::Kl(KlSign::AsWritten)));
        let ones = DVector::from_element(6, 1.0);
        let ev = pk.objective_and_grad(&ones).unwrap();
        assert_relative_eq!(ev.penalty_term, 0.0, epsilon = 1e-15);
        let pk0 = problem(&spec, &d_b, pop, 6, CalibrationConfig::new(1e-2, 0.0, Penalty::Kl(KlSign::AsWritten)));
        let ev0 = pk0.objective_and_grad(&ones).unwrap();
        assert_eq!(ev.grad, ev0.grad);
    }

    #[test]
    fn max_iter_zero_returns_init() {
        let (spec, d_b, pop) = random_problem_parts(5, 6, 4);
        let p = problem(&spec, &d_b, pop, 6, CalibrationConfig::new(1e-2, 1e-2, Penalty::Kl(KlSign::AsWritten)));
        let init = DVector::from_element(6, 1.0);
        let sol = solve_weights(&p, &init, SolverOptions { max_iter: 0, ..Default::default() }).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.gamma, vec![1.0; 6]);
        assert_eq!(sol.objective_trace.len(), 1);
    }

    #[test]
    fn init_outside_box_is_rejected() {
        let (spec, d_b, pop) = random_problem_parts(6, 3, 3);
        let mut cfg = CalibrationConfig::new(1e-2, 1e-2, Penalty::L2);
        cfg.xi2 = 5.0;
        let p = problem(&spec, &d_b, pop, 3, cfg);
        let bad = DVector::from_element(3, 6.0);
        assert!(solve_weights(&p, &bad, SolverOptions::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(CalibrationConfig::new(0.0, 1.0, Penalty::L2).validate().is_err());
        assert!(CalibrationConfig::new(1.0, -1.0, Penalty::L2).validate().is_err());
        let mut c = CalibrationConfig::new(1.0, 1.0, Penalty::L2);
        c.cap = Some(0.5);
        assert!(c.validate().is_err());
        c.cap = Some(3.0);
        assert_eq!(c.upper_bound(), 3.0);
    }

    #[test]
    fn population_smaller_than_sample_rejected() {
        let (spec, d_b, _) = random_problem_parts(7, 4, 3);
        let r = CalibrationProblem::new(
            &spec,
            (0..4).collect(),
            (4..7).collect(),
            d_b,
            3.0,
            CalibrationConfig::new(1e-2, 0.0, Penalty::L2),
        );
        assert!(matches!(r, Err(Error::Input(_))));
    }
}
