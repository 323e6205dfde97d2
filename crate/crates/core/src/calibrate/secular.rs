//! Largest eigenpair of `diag(d) + rho·v·vᵀ` through the secular equation
//! `1 + rho·Σ vᵢ²/(dᵢ − λ) = 0`.
//!
//! Roots are located in coordinates shifted to the nearest pole so that
//! `λ − dⱼ` is never formed by cancellation.

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Top eigenpair of a diagonal-plus-rank-one matrix.
#[derive(Debug, Clone)]
pub struct TopEigen {
    pub value: f64,
    /// Unit eigenvector with `vᵀ·vector ≥ 0`.
    pub vector: DVector<f64>,
    /// Distance to the second largest eigenvalue (`+∞` when `m = 1`).
    pub gap: f64,
}

fn validate(d: &[f64], v: &[f64], rho: f64) -> Result<()> {
    if d.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} diagonal entries but {} vector entries",
            d.len(),
            v.len()
        )));
    }
    if d.is_empty() {
        return Err(Error::DegenerateSpectrum("rank-zero spectrum".into()));
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::Contract(format!("rho must be positive, got {rho}")));
    }
    if d.iter().chain(v).any(|x| !x.is_finite()) {
        return Err(Error::Contract("non-finite secular data".into()));
    }
    if d.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Contract("diagonal must be nonincreasing".into()));
    }
    Ok(())
}

/// `τ ↦ τ·(1 + rho Σ vᵢ²/(δᵢ − τ))` with `δᵢ = dᵢ − d_pole`, written so that the
/// pole's own term is the constant `−rho·v_pole²`. Returns value and slope.
fn shifted_secular(tau: f64, pole: usize, delta: &[f64], v2: &[f64], rho: f64) -> (f64, f64) {
    let mut s = 0.0;
    let mut ds = 0.0;
    for (i, (&di, &wi)) in delta.iter().zip(v2).enumerate() {
        if i == pole || wi == 0.0 {
            continue;
        }
        let den = tau - di;
        s += wi / den;
        ds += -di * wi / (den * den);
    }
    // φ(τ) = τ − rho·v_p² − rho·τ·Σ vᵢ²/(τ − δᵢ)
    let phi = tau - rho * v2[pole] - rho * tau * s;
    let dphi = 1.0 - rho * ds;
    (phi, dphi)
}

/// Root of the secular function to the right of the largest active pole.
/// Returns `τ = λ − d_pole > 0`.
fn top_root(pole: usize, delta: &[f64], v2: &[f64], rho: f64) -> f64 {
    let norm2: f64 = v2.iter().sum();
    let mut lo = 0.0_f64;
    let mut hi = rho * norm2;
    let mut x = hi;
    for _ in 0..300 {
        let (phi, dphi) = shifted_secular(x, pole, delta, v2, rho);
        if phi == 0.0 {
            return x;
        }
        if phi < 0.0 {
            lo = lo.max(x);
        } else {
            hi = hi.min(x);
        }
        if hi - lo <= 2.0 * f64::EPSILON * hi {
            break;
        }
        let newton = if dphi > 0.0 { x - phi / dphi } else { f64::NAN };
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if next == x {
            break;
        }
        x = next;
    }
    x
}

/// Root of the secular function strictly between two consecutive distinct
/// active poles `d_lower < d_upper`, returned in absolute coordinates.
fn interior_root(d: &[f64], v2: &[f64], rho: f64, d_lower: f64, d_upper: f64) -> f64 {
    let f = |lambda: f64| {
        let mut s = 1.0;
        for (&di, &wi) in d.iter().zip(v2) {
            if wi != 0.0 {
                s += rho * wi / (di - lambda);
            }
        }
        s
    };
    let (mut lo, mut hi) = (d_lower, d_upper);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Largest eigenvalue of `diag(d) + rho·v·vᵀ` for nonincreasing `d`.
pub fn secular_max_eig(d: &[f64], v: &[f64], rho: f64) -> Result<f64> {
    Ok(top_eigenpair(d, v, rho)?.value)
}

/// Largest eigenpair of `diag(d) + rho·v·vᵀ`, including the spectral gap.
pub fn top_eigenpair(d: &[f64], v: &[f64], rho: f64) -> Result<TopEigen> {
    validate(d, v, rho)?;
    let m = d.len();
    let v2: Vec<f64> = v.iter().map(|x| x * x).collect();
    let first_active = v2.iter().position(|&w| w != 0.0);

    let Some(pole) = first_active else {
        let mut vector = DVector::zeros(m);
        vector[0] = 1.0;
        let gap = if m > 1 { d[0] - d[1] } else { f64::INFINITY };
        return Ok(TopEigen { value: d[0], vector, gap });
    };

    let delta: Vec<f64> = d.iter().map(|&di| di - d[pole]).collect();
    let tau = top_root(pole, &delta, &v2, rho);
    let root = d[pole] + tau;

    // Poles above the first active one carry zero weight and are eigenvalues.
    if pole > 0 && d[0] > root {
        let mut vector = DVector::zeros(m);
        vector[0] = 1.0;
        let second = if m > 1 && d[1] > root { d[1] } else { root };
        return Ok(TopEigen { value: d[0], vector, gap: d[0] - second });
    }

    let mut vector = DVector::zeros(m);
    for i in 0..m {
        if v2[i] != 0.0 {
            vector[i] = v[i] / (tau - delta[i]);
        }
    }
    let nrm = vector.norm();
    vector /= nrm;
    if vector.dot(&DVector::from_column_slice(v)) < 0.0 {
        vector.neg_mut();
    }

    // Second eigenvalue: the largest of the deflated poles, a repeated active
    // pole, or the secular root below the top active pole.
    let mut second = f64::NEG_INFINITY;
    for i in 0..m {
        if v2[i] == 0.0 {
            second = second.max(d[i]);
        }
    }
    let repeated = (pole + 1..m).any(|i| v2[i] != 0.0 && d[i] == d[pole]);
    if repeated {
        second = second.max(d[pole]);
    }
    if let Some(next) = (pole + 1..m).find(|&i| v2[i] != 0.0 && d[i] < d[pole]) {
        second = second.max(interior_root(d, &v2, rho, d[next], d[pole]));
    }
    let gap = if second.is_finite() { root - second } else { f64::INFINITY };

    Ok(TopEigen { value: root, vector, gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_top(d: &[f64], v: &[f64], rho: f64) -> Vec<f64> {
        let m = d.len();
        let mat = DMatrix::from_fn(m, m, |i, j| {
            rho * v[i] * v[j] + if i == j { d[i] } else { 0.0 }
        });
        let mut ev: Vec<f64> = mat.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn axis_cases() {
        assert_relative_eq!(secular_max_eig(&[-1.0, -2.0], &[0.0, 1.0], 3.0).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(secular_max_eig(&[-1.0, -2.0], &[1.0, 0.0], 1.0).unwrap(), 0.0, epsilon = 1e-14);
        // deflated top pole dominates
        let t = top_eigenpair(&[-1.0, -2.0], &[0.0, 0.5], 1.0).unwrap();
        assert_eq!(t.value, -1.0);
        assert_eq!(t.vector[0], 1.0);
        // second eigenvalue is −2 + 0.25
        assert_relative_eq!(t.gap, 0.75, epsilon = 1e-14);
    }

    #[test]
    fn zero_vector_returns_first_axis() {
        let t = top_eigenpair(&[-0.5, -3.0, -4.0], &[0.0; 3], 2.0).unwrap();
        assert_eq!(t.value, -0.5);
        assert_eq!(t.vector.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(t.gap, 2.5);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(secular_max_eig(&[-2.0, -1.0], &[1.0, 1.0], 1.0), Err(Error::Contract(_))));
        assert!(matches!(secular_max_eig(&[-1.0], &[1.0], 0.0), Err(Error::Contract(_))));
        assert!(matches!(secular_max_eig(&[-1.0], &[1.0, 2.0], 1.0), Err(Error::Shape(_))));
        assert!(matches!(secular_max_eig(&[], &[], 1.0), Err(Error::DegenerateSpectrum(_))));
    }

    #[test]
    fn repeated_poles() {
        let d = [-1.0, -1.0, -3.0];
        let v = [0.3, 0.4, 1.0];
        let dense = dense_top(&d, &v, 0.7);
        let t = top_eigenpair(&d, &v, 0.7).unwrap();
        assert_relative_eq!(t.value, dense[0], max_relative = 1e-12);
        assert_relative_eq!(t.gap, dense[0] - dense[1], max_relative = 1e-9);
    }

    #[test]
    fn random_instances_match_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let m = rng.gen_range(1..=20);
            let mut d: Vec<f64> = (0..m).map(|_| -rng.gen_range(0.01..10.0)).collect();
            d.sort_by(|a, b| b.total_cmp(a));
            let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let rho = rng.gen_range(0.05..5.0);
            let dense = dense_top(&d, &v, rho);
            let t = top_eigenpair(&d, &v, rho).unwrap();
            assert!((t.value - dense[0]).abs() <= 1e-10 * dense[0].abs().max(1.0));
            // eigen-residual of the returned vector
            let mut res = 0.0_f64;
            let proj: f64 = v.iter().zip(t.vector.iter()).map(|(a, b)| a * b).sum();
            for i in 0..m {
                let bi = d[i] * t.vector[i] + rho * v[i] * proj - t.value * t.vector[i];
                res = res.max(bi.abs());
            }
            assert!(res < 1e-9, "residual {res}");
            if m > 1 {
                assert!((t.gap - (dense[0] - dense[1])).abs() < 1e-8 * (1.0 + dense[0].abs()));
            }
        }
    }

    #[test]
    fn tiny_leading_component_is_accurate() {
        let d = [-1e-4, -1e-2, -1.0];
        let v = [1e-9, 3.0, 2.0];
        let t = top_eigenpair(&d, &v, 1e-3).unwrap();
        let dense = dense_top(&d, &v, 1e-3);
        assert_relative_eq!(t.value, dense[0], max_relative = 1e-10);
    }
}
