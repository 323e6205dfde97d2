mod common;

use common::random_data;
use nalgebra::DVector;
use rkhs_calib::calibrate::{
    solve_weights, CalibrationConfig, CalibrationProblem, KlSign, Penalty, PreparedDesign, SolverOptions,
    StepRule,
};

#[test]
fn secular_root_matches_dense_eigensolver() {
    common::secular_suite(200).unwrap();
}

#[test]
fn analytic_gradient_matches_central_differences() {
    common::gradient_suite(20).unwrap();
}

#[test]
fn tiny_problem_beats_exhaustive_grid() {
    common::grid_suite().unwrap();
}

#[test]
fn objective_trace_is_monotone() {
    for (seed, penalty) in [(3, Penalty::Kl(KlSign::AsWritten)), (4, Penalty::L2), (5, Penalty::Kl(KlSign::Reversed))] {
        let data = random_data(seed, 40, 25);
        let prepared = PreparedDesign::new(&data, 1e-12).unwrap();
        let config = CalibrationConfig::new(1e-3, 1e-3, penalty);
        let problem = CalibrationProblem::from_data(&prepared, &data, config).unwrap();
        for rule in [StepRule::Unit, StepRule::BarzilaiBorwein] {
            let options = SolverOptions { max_iter: 300, tol: 1e-8, initial_step: rule };
            let sol = solve_weights(&problem, &DVector::from_element(problem.n_a(), 1.0), options).unwrap();
            assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0]), "{penalty:?} {rule:?}");
            assert!(sol.weights.iter().all(|&w| w >= 1.0));
        }
    }
}

#[test]
fn huge_lambda1_pushes_kl_ratios_to_the_faces() {
    let data = random_data(11, 20, 10);
    let prepared = PreparedDesign::new(&data, 1e-12).unwrap();
    let config = CalibrationConfig::new(1e6, 0.1, Penalty::Kl(KlSign::AsWritten));
    let problem = CalibrationProblem::from_data(&prepared, &data, config).unwrap();
    let init = DVector::from_element(problem.n_a(), 1.0);
    let options = SolverOptions { tol: 1e-12, ..SolverOptions::default() };
    let sol = solve_weights(&problem, &init, options).unwrap();
    let initial = problem.objective_and_grad(&init).unwrap().value;
    let last = problem.objective_and_grad(&DVector::from_vec(sol.gamma.clone())).unwrap().value;
    assert!(last <= initial);
    assert!((last - sol.final_objective()).abs() <= 1e-12 * last.abs().max(1.0));
    assert!(sol.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    let moved = sol.gamma.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    assert!(moved > 1.0, "ratios stayed near 1 (max move {moved})");
}

