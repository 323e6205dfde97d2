use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A non-probability sample `A` with responses and a reference probability
/// sample `B` with design weights `d_B = 1/π_B`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoSampleData {
    pub x_a: DMatrix<f64>,
    pub y_a: DVector<f64>,
    pub x_b: DMatrix<f64>,
    pub d_b: DVector<f64>,
    /// Population size; `Σ d_B` when not supplied.
    pub pop_size: f64,
    pub pop_size_known: bool,
}

impl TwoSampleData {
    pub fn new(
        x_a: DMatrix<f64>,
        y_a: DVector<f64>,
        x_b: DMatrix<f64>,
        d_b: DVector<f64>,
        pop_size: Option<f64>,
    ) -> Result<Self> {
        if x_a.nrows() != y_a.len() {
            return Err(Error::Shape(format!(
                "sample A has {} covariate rows but {} responses",
                x_a.nrows(),
                y_a.len()
            )));
        }
        if x_b.nrows() != d_b.len() {
            return Err(Error::Shape(format!(
                "sample B has {} covariate rows but {} design weights",
                x_b.nrows(),
                d_b.len()
            )));
        }
        if x_a.ncols() != x_b.ncols() {
            return Err(Error::Shape(format!(
                "sample A has {} covariates, sample B has {}",
                x_a.ncols(),
                x_b.ncols()
            )));
        }
        if x_a.nrows() < 2 || x_b.nrows() < 2 {
            return Err(Error::Input("both samples need at least two rows".into()));
        }
        if x_a.iter().chain(y_a.iter()).chain(x_b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite value in sample data".into()));
        }
        if let Some(i) = d_b.iter().position(|&d| !(d > 0.0 && d.is_finite())) {
            return Err(Error::Input(format!(
                "design weight {} at B row {i} is not positive",
                d_b[i]
            )));
        }
        let (pop_size, pop_size_known) = match pop_size {
            Some(n) if n > 0.0 && n.is_finite() => (n, true),
            Some(n) => return Err(Error::Input(format!("population size {n} is not positive"))),
            None => (d_b.sum(), false),
        };
        Ok(Self {
            x_a,
            y_a,
            x_b,
            d_b,
            pop_size,
            pop_size_known,
        })
    }

    pub fn n_a(&self) -> usize {
        self.y_a.len()
    }

    pub fn n_b(&self) -> usize {
        self.d_b.len()
    }

    pub fn dim(&self) -> usize {
        self.x_a.ncols()
    }

    /// Horvitz–Thompson population-size estimate `Σ d_B`.
    pub fn estimated_pop_size(&self) -> f64 {
        self.d_b.sum()
    }

    /// Same samples with responses replaced.
    pub fn with_responses(&self, y_a: DVector<f64>) -> Result<Self> {
        let n = self.pop_size_known.then_some(self.pop_size);
        Self::new(self.x_a.clone(), y_a, self.x_b.clone(), self.d_b.clone(), n)
    }

    /// Same samples with B design weights replaced; a defaulted population
    /// size is kept fixed rather than re-estimated.
    pub fn with_design_weights(&self, d_b: DVector<f64>) -> Result<Self> {
        let mut out = Self::new(
            self.x_a.clone(),
            self.y_a.clone(),
            self.x_b.clone(),
            d_b,
            Some(self.pop_size),
        )?;
        out.pop_size_known = self.pop_size_known;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>, DVector<f64>) {
        (
            DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DMatrix::from_row_slice(2, 1, &[0.5, 0.7]),
            DVector::from_vec(vec![3.0, 4.0]),
        )
    }

    #[test]
    fn estimated_population_size() {
        let (xa, ya, xb, db) = tiny();
        let d = TwoSampleData::new(xa, ya, xb, db, None).unwrap();
        assert_eq!(d.pop_size, 7.0);
        assert!(!d.pop_size_known);
    }

    #[test]
    fn validation() {
        let (xa, ya, xb, _) = tiny();
        let bad = DVector::from_vec(vec![3.0, 0.0]);
        assert!(TwoSampleData::new(xa.clone(), ya.clone(), xb.clone(), bad, None).is_err());
        let short = DVector::from_vec(vec![1.0]);
        assert!(matches!(
            TwoSampleData::new(xa, short, xb, DVector::from_vec(vec![1.0, 1.0]), None),
            Err(Error::Shape(_))
        ));
    }
}
