//! Fixed-effect Gaussian local model fitted by maximum likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::check_full_rank;
use crate::error::{Error, Result};

/// Smallest admissible residual variance; anything below is floored and the
/// fit is flagged degenerate.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// `y = intercept + betas . x + e`, `e ~ N(0, sigma2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedGaussian {
    pub intercept: f64,
    pub betas: Vec<f64>,
    pub sigma2: f64,
    /// Maximized log-likelihood (ML, so `sigma2` divides by `n`).
    pub loglik: f64,
    /// Free parameters: coefficients plus one variance.
    pub n_params: usize,
    /// True when the residual variance hit [`VARIANCE_FLOOR`].
    pub degenerate: bool,
}

impl FixedGaussian {
    pub fn mean(&self, x: &[f64]) -> f64 {
        self.intercept + self.betas.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
}

/// Fits the model by least squares. `x` must not contain an intercept
/// column; one is added internally. `names` label the columns of `x` for
/// rank-deficiency reporting.
pub fn fit_ols(y: &[f64], x: &DMatrix<f64>, names: &[String]) -> Result<FixedGaussian> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.nrows(),
        });
    }
    let p = x.ncols() + 1;
    if n <= p {
        return Err(Error::TooFewRows { n, p });
    }
    let design = {
        let mut d = DMatrix::zeros(n, p);
        d.column_mut(0).fill(1.0);
        d.view_mut((0, 1), (n, x.ncols())).copy_from(x);
        d
    };
    check_full_rank(&design, names)?;

    let yv = DVector::from_column_slice(y);
    // Least squares through the thin QR factorization: R beta = Q' y.
    let qr = design.clone().qr();
    let rhs = qr.q().transpose() * &yv;
    let coef = qr
        .r()
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::invalid("least-squares solve failed"))?;

    let residuals = &yv - &design * &coef;
    let rss: f64 = residuals.iter().map(|r| r * r).sum();
    let mut sigma2 = rss / n as f64;
    let degenerate = sigma2 < VARIANCE_FLOOR;
    if degenerate {
        sigma2 = VARIANCE_FLOOR;
    }
    let loglik = gaussian_ml_loglik(n, sigma2, rss);

    Ok(FixedGaussian {
        intercept: coef[0],
        betas: coef.as_slice()[1..].to_vec(),
        sigma2,
        loglik,
        n_params: p + 1,
        degenerate,
    })
}

/// Gaussian log-likelihood at the ML variance: when `sigma2 = rss/n` this is
/// `-n/2 (log(2 pi sigma2) + 1)`; kept general so floored variances still
/// get an honest value.
fn gaussian_ml_loglik(n: usize, sigma2: f64, rss: f64) -> f64 {
    let n = n as f64;
    -0.5 * (n * (2.0 * std::f64::consts::PI * sigma2).ln() + rss / sigma2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn design(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_row_slice(
            rows.len(),
            rows[0].len(),
            &rows.iter().flat_map(|r| r.iter().copied()).collect::<Vec<_>>(),
        )
    }

    #[test]
    fn recovers_exact_line_with_floored_variance() {
        // y = 1 + 2x exactly.
        let x = design(&[&[0.0], &[1.0], &[2.0], &[3.0]]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let fit = fit_ols(&y, &x, &["x".into()]).unwrap();
        assert_relative_eq!(fit.intercept, 1.0, epsilon = 1e-9);
        assert_relative_eq!(fit.betas[0], 2.0, epsilon = 1e-9);
        assert!(fit.degenerate);
        assert_eq!(fit.sigma2, VARIANCE_FLOOR);
        assert_eq!(fit.n_params, 3);
    }

    #[test]
    fn matches_hand_computed_simple_regression() {
        // Oracle: closed-form simple linear regression on five points.
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let ys = [2.1, 3.9, 6.2, 8.1, 9.8];
        let xbar = xs.iter().sum::<f64>() / 5.0;
        let ybar = ys.iter().sum::<f64>() / 5.0;
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xbar) * (y - ybar)).sum();
        let sxx: f64 = xs.iter().map(|x| (x - xbar) * (x - xbar)).sum();
        let slope = sxy / sxx;
        let intercept = ybar - slope * xbar;
        let rss: f64 = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| (y - intercept - slope * x).powi(2))
            .sum();
        let sigma2 = rss / 5.0;
        let loglik = -2.5 * ((2.0 * std::f64::consts::PI * sigma2).ln() + 1.0);

        let x = design(&[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0]]);
        let fit = fit_ols(&ys, &x, &["x".into()]).unwrap();
        assert_relative_eq!(fit.intercept, intercept, max_relative = 1e-10);
        assert_relative_eq!(fit.betas[0], slope, max_relative = 1e-10);
        assert_relative_eq!(fit.sigma2, sigma2, max_relative = 1e-10);
        assert_relative_eq!(fit.loglik, loglik, max_relative = 1e-10);
    }

    #[test]
    fn intercept_only_model() {
        let x = DMatrix::zeros(4, 0);
        let y = [1.0, 2.0, 3.0, 6.0];
        let fit = fit_ols(&y, &x, &[]).unwrap();
        assert_relative_eq!(fit.intercept, 3.0, epsilon = 1e-12);
        assert!(fit.betas.is_empty());
        // ML variance divides by n, not n-1.
        let rss = 4.0 + 1.0 + 0.0 + 9.0;
        assert_relative_eq!(fit.sigma2, rss / 4.0, epsilon = 1e-12);
        assert_eq!(fit.n_params, 2);
    }

    #[test]
    fn duplicated_column_reports_alias() {
        let x = design(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0], &[4.0, 4.0], &[5.0, 5.0]]);
        let y = [1.0, 2.0, 3.0, 4.0, 5.0];
        let err = fit_ols(&y, &x, &["a".into(), "a_copy".into()]).unwrap_err();
        match err {
            Error::RankDeficient { aliased } => assert_eq!(aliased, ["a_copy"]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let x = design(&[&[1.0], &[2.0]]);
        let y = [1.0, 2.0];
        assert!(matches!(
            fit_ols(&y, &x, &["x".into()]),
            Err(Error::TooFewRows { .. })
        ));
    }
}
