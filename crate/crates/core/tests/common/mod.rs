#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rkhs_calib::calibrate::{
    secular_max_eig, solve_weights, top_eigenpair, CalibrationConfig, CalibrationProblem, KlSign,
    Penalty, PreparedDesign, SolverOptions, StepRule,
};
use rkhs_calib::kernel::{eigendecompose, gram_of_points};
use rkhs_calib::TwoSampleData;

pub type Check = Result<String, String>;

fn dense_top(d: &[f64], v: &[f64], rho: f64) -> (f64, DVector<f64>) {
    let vv = DVector::from_column_slice(v);
    let mat = DMatrix::from_diagonal(&DVector::from_column_slice(d)) + rho * &vv * vv.transpose();
    let eig = SymmetricEigen::new(mat);
    let k = eig.eigenvalues.imax();
    (eig.eigenvalues[k], eig.eigenvectors.column(k).into_owned())
}

fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let m = rng.gen_range(1..40);
    let mut d: Vec<f64> = (0..m).map(|_| -rng.gen_range(0.0..5.0f64).exp()).collect();
    if m > 3 && rng.gen_bool(0.3) {
        d[1] = d[0];
    }
    d.sort_by(|a, b| b.total_cmp(a));
    let v: Vec<f64> = (0..m)
        .map(|_| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(-3.0..3.0) })
        .collect();
    let rho = rng.gen_range(-3.0..2.0f64).exp();
    (d, v, rho)
}

/// Secular root and eigenvector against a dense symmetric eigensolver.
pub fn secular_suite(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;
    for case in 0..instances {
        let (d, v, rho) = random_instance(&mut rng);
        let got = secular_max_eig(&d, &v, rho).map_err(|e| format!("case {case}: {e}"))?;
        let (want, want_vec) = dense_top(&d, &v, rho);
        let rel = (got - want).abs() / want.abs().max(1e-300);
        worst = worst.max(rel);
        if rel >= 1e-10 {
            return Err(format!("case {case}: {got} vs {want} (rel {rel:e})"));
        }
        let pair = top_eigenpair(&d, &v, rho).map_err(|e| format!("case {case}: {e}"))?;
        if (pair.vector.norm() - 1.0).abs() >= 1e-10 {
            return Err(format!("case {case}: eigenvector not normalized"));
        }
        if pair.gap > 1e-6 * want.abs() {
            let align = pair.vector.dot(&want_vec).abs();
            if (align - 1.0).abs() >= 1e-8 {
                return Err(format!("case {case}: eigenvector alignment {align}"));
            }
        }
    }
    Ok(format!("{instances} instances, max relative error {worst:.1e}"))
}

pub fn random_data(seed: u64, n_a: usize, n_b: usize) -> TwoSampleData {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x_a = DMatrix::from_fn(n_a, 2, |_, _| rng.gen_range(0.0..1.0));
    let y_a = DVector::from_fn(n_a, |i, _| 1.0 + x_a[(i, 0)] + rng.gen_range(-0.1..0.1));
    let x_b = DMatrix::from_fn(n_b, 2, |_, _| rng.gen_range(0.0..1.0));
    let d_b = DVector::from_fn(n_b, |_, _| rng.gen_range(2.0..10.0));
    let pop: f64 = d_b.sum();
    TwoSampleData::new(x_a, y_a, x_b, d_b, Some(pop)).unwrap()
}

/// Solver on a three-unit problem against an exhaustive 0.1-resolution grid.
pub fn grid_suite() -> Check {
    let data = random_data(7, 3, 3);
    let prepared = PreparedDesign::new(&data, 1e-12).map_err(|e| e.to_string())?;
    let mut worst = f64::NEG_INFINITY;
    for penalty in [Penalty::Kl(KlSign::Reversed), Penalty::L2] {
        let mut config = CalibrationConfig::new(0.05, 0.01, penalty);
        config.xi1 = 0.1;
        config.xi2 = 3.0;
        let problem = CalibrationProblem::from_data(&prepared, &data, config).map_err(|e| e.to_string())?;
        let options = SolverOptions { max_iter: 5000, tol: 1e-10, initial_step: StepRule::BarzilaiBorwein };
        let sol = solve_weights(&problem, &DVector::from_element(3, 1.0), options).map_err(|e| e.to_string())?;
        let best = sol.final_objective();

        let levels: Vec<f64> = (1..=30).map(|k| k as f64 / 10.0).collect();
        let mut grid_min = f64::INFINITY;
        for &a in &levels {
            for &b in &levels {
                for &c in &levels {
                    let g = DVector::from_vec(vec![a, b, c]);
                    let value = problem.objective_and_grad(&g).map_err(|e| e.to_string())?.value;
                    grid_min = grid_min.min(value);
                }
            }
        }
        worst = worst.max(best - grid_min);
        if best - grid_min > 1e-6 {
            return Err(format!("{penalty:?}: solver {best} vs grid {grid_min}"));
        }
        if !sol.gamma.iter().all(|&r| (0.1..=3.0).contains(&r)) {
            return Err(format!("{penalty:?}: ratios left the box"));
        }
    }
    Ok(format!("solver minus grid minimum at most {worst:.1e}"))
}

/// Analytic gradients against central differences at random interior points.
pub fn gradient_suite(points: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for penalty in [Penalty::Kl(KlSign::AsWritten), Penalty::L2] {
        let mut checked = 0;
        let mut attempt = 0;
        while checked < points {
            attempt += 1;
            if attempt >= 10 * points as u64 + 100 {
                return Err(format!("{penalty:?}: too many degenerate draws"));
            }
            let data = random_data(1000 + attempt, 8, 6);
            let prepared = PreparedDesign::new(&data, 1e-12).map_err(|e| e.to_string())?;
            let config =
                CalibrationConfig::new(rng.gen_range(1e-3..1e-1), rng.gen_range(1e-3..1e-1), penalty);
            let problem = CalibrationProblem::from_data(&prepared, &data, config).map_err(|e| e.to_string())?;
            let gamma = DVector::from_fn(problem.n_a(), |_, _| rng.gen_range(0.5..2.0));
            let value = |g: &DVector<f64>| problem.objective_and_grad(g).map(|e| e.value);
            let eval = problem.objective_and_grad(&gamma).map_err(|e| e.to_string())?;
            if eval.degenerate {
                continue;
            }
            let mut fd = DVector::zeros(gamma.len());
            for j in 0..gamma.len() {
                let h = 1e-5 * gamma[j];
                let mut up = gamma.clone();
                up[j] += h;
                let mut down = gamma.clone();
                down[j] -= h;
                fd[j] = (value(&up).map_err(|e| e.to_string())? - value(&down).map_err(|e| e.to_string())?)
                    / (2.0 * h);
            }
            let rel = (&eval.grad - &fd).norm() / eval.grad.norm();
            worst = worst.max(rel);
            if rel >= 1e-5 {
                return Err(format!("{penalty:?} attempt {attempt}: relative error {rel:e}"));
            }
            checked += 1;
        }
    }
    Ok(format!("{points} points per penalty, max relative error {worst:.1e}"))
}

fn random_points(rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = rng.gen_range(2..=30);
    let d = rng.gen_range(1..=3);
    DMatrix::from_fn(n, d, |_, _| rng.gen_range(0.0..=1.0))
}

/// Exact symmetry and positive semidefiniteness of random Gram matrices.
pub fn gram_suite(designs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let mut worst = f64::INFINITY;
    for design in 0..designs {
        let points = random_points(&mut rng);
        let gram = gram_of_points(&points).map_err(|e| e.to_string())?;
        let n = gram.nrows();
        for i in 0..n {
            for j in 0..n {
                if gram[(i, j)] != gram[(j, i)] {
                    return Err(format!("design {design}: asymmetric at ({i},{j})"));
                }
            }
        }
        let trace = gram.trace();
        let min = SymmetricEigen::new(gram).eigenvalues.min();
        worst = worst.min(min / trace);
        if min < -1e-10 * trace {
            return Err(format!("design {design}: min eigenvalue {min:e}, trace {trace}"));
        }
    }
    Ok(format!("{designs} designs, min eigenvalue over trace {worst:.1e}"))
}

/// Truncated eigendecomposition reconstructs the Gram matrix within its bound.
pub fn spectrum_suite(designs: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(71);
    let mut worst = 0.0f64;
    for design in 0..designs {
        let points = random_points(&mut rng);
        let gram = gram_of_points(&points).map_err(|e| e.to_string())?;
        let spec = eigendecompose(&gram, 1e-12).map_err(|e| e.to_string())?;
        let sum_q: f64 = spec.q1.iter().sum();
        worst = worst.max(spec.recon_error / sum_q);
        if spec.recon_error > 1e-8 * sum_q {
            return Err(format!("design {design}: reconstruction error {:e}", spec.recon_error));
        }
        let rebuilt = &spec.p1 * DMatrix::from_diagonal(&spec.q1) * spec.p1.transpose();
        let direct = (&rebuilt - &gram).norm();
        if (direct - spec.recon_error).abs() > 1e-10 * sum_q {
            return Err(format!("design {design}: reported error {} vs direct {direct}", spec.recon_error));
        }
        let gram_tp = spec.p1.transpose() * &spec.p1;
        if (gram_tp - DMatrix::identity(spec.rank(), spec.rank())).amax() >= 1e-10 {
            return Err(format!("design {design}: eigenvectors not orthonormal"));
        }
        if !spec.q1.iter().all(|&q| q > 0.0) || !spec.q1.as_slice().windows(2).all(|w| w[0] >= w[1]) {
            return Err(format!("design {design}: eigenvalues not positive and sorted"));
        }
    }
    Ok(format!("{designs} designs, max reconstruction error over trace {worst:.1e}"))
}
