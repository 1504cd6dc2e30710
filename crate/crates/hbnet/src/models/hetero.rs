//! Heteroscedastic mixed model: random intercept per cluster, residual
//! variance scaling with a power of the fitted mean.
//!
//! Per row `r` in cluster `j`:
//! `y_r = x_r' beta + b_j + e_r`, `b_j ~ N(0, sigma2_b)`,
//! `e_r ~ N(0, sigma2 * |nu_r|^(2 theta_j))`, where `nu_r` is the fitted
//! mean of the row. Estimation alternates three steps: a weighted
//! random-intercept ML fit at the current weights, an update of the fitted
//! means, and a per-cluster one-dimensional search over `theta_j`. The
//! iteration starts from the exact homoscedastic fit and only ever keeps
//! states whose marginal likelihood improves, so the final fit can never
//! score below the homoscedastic restriction.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::lme::{conditional_modes, optimize_lambda, LmeData};
use super::ols::VARIANCE_FLOOR;
use super::{check_full_rank, Grouping};
use crate::error::{Error, Result};

/// Fitted means may not come this close to zero: the power variance
/// `|nu|^(2 theta)` has no usable limit there.
pub const NU_FLOOR: f64 = 1e-8;

/// Search range for each cluster's variance exponent.
const THETA_RANGE: (f64, f64) = (-3.0, 3.0);

const MAX_OUTER: usize = 50;
const OUTER_TOL: f64 = 1e-6;

/// A fitted heteroscedastic random-intercept model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeteroMixedGaussian {
    pub intercept: f64,
    pub betas: Vec<f64>,
    /// Variance of the random intercepts.
    pub sigma2_b: f64,
    /// Conditional modes of the random intercepts, one per cluster level.
    pub re_intercepts: Vec<f64>,
    /// Base residual variance (at `|nu| = 1`).
    pub sigma2: f64,
    /// Per-cluster variance exponents.
    pub theta: Vec<f64>,
    pub cluster_levels: Vec<String>,
    /// Marginal log-likelihood under the final weights.
    pub loglik: f64,
    /// Fixed effects + sigma2_b + sigma2 + one theta per cluster.
    pub n_params: usize,
    pub converged: bool,
    pub degenerate: bool,
}

impl HeteroMixedGaussian {
    /// Conditional mean and standard deviation given parent values and an
    /// optional cluster label. Unknown labels use zero random effects and a
    /// zero exponent.
    pub fn mean_sd(&self, parents: &[f64], cluster: Option<&str>) -> (f64, f64) {
        let mut mean = self.intercept;
        for (b, x) in self.betas.iter().zip(parents) {
            mean += b * x;
        }
        let (b, theta) = match cluster.and_then(|c| {
            self.cluster_levels.iter().position(|l| l == c)
        }) {
            Some(i) => (self.re_intercepts[i], self.theta[i]),
            None => (0.0, 0.0),
        };
        mean += b;
        let sd = self.sigma2.sqrt() * mean.abs().powf(theta);
        (mean, sd)
    }
}

#[derive(Clone)]
struct State {
    beta: DVector<f64>,
    sigma2: f64,
    sigma2_b: f64,
    b: Vec<f64>,
    theta: Vec<f64>,
    /// Exact marginal `-2 loglik` under the weights this state was fitted
    /// with.
    deviance: f64,
    /// Whether the inner covariance optimization converged for this state.
    fit_converged: bool,
}

/// Exact marginal `-2 loglik` of the model at the given parameters, fitted
/// means and exponents, computed from the rank-one structure of each
/// cluster's covariance.
fn marginal_deviance(
    y: &[f64],
    design: &DMatrix<f64>,
    rows_per_level: &[Vec<usize>],
    beta: &DVector<f64>,
    sigma2: f64,
    sigma2_b: f64,
    theta: &[f64],
    nu: &[f64],
) -> f64 {
    let n = y.len() as f64;
    let mut dev = n * (2.0 * std::f64::consts::PI).ln();
    for (j, rows) in rows_per_level.iter().enumerate() {
        dev += cluster_deviance_term(y, design, rows, beta, sigma2, sigma2_b, theta[j], nu);
    }
    dev
}

/// One cluster's contribution to the marginal deviance, excluding the
/// `n_j log(2 pi)` constant shared by all exponents.
fn cluster_deviance_term(
    y: &[f64],
    design: &DMatrix<f64>,
    rows: &[usize],
    beta: &DVector<f64>,
    sigma2: f64,
    sigma2_b: f64,
    theta: f64,
    nu: &[f64],
) -> f64 {
    let mut logdet = 0.0;
    let mut s = 0.0;
    let mut t = 0.0;
    let mut quad = 0.0;
    for &r in rows {
        let v = sigma2 * (2.0 * theta * nu[r].abs().ln()).exp();
        let e = y[r] - design.row(r).transpose().dot(beta);
        logdet += v.ln();
        s += 1.0 / v;
        t += e / v;
        quad += e * e / v;
    }
    let denom = 1.0 + sigma2_b * s;
    logdet + denom.ln() + quad - sigma2_b * t * t / denom
}

struct WeightedFit {
    beta: DVector<f64>,
    sigma2: f64,
    sigma2_b: f64,
    b: Vec<f64>,
    /// Marginal deviance in the original (unweighted) scale.
    deviance: f64,
    converged: bool,
}

/// Random-intercept ML fit of `y ~ design` under fixed per-row variance
/// weights. Scaling every row by `1/sqrt(w_r)` turns the model into a
/// homoscedastic one whose random-effect column is `1/sqrt(w_r)`; the change
/// of variables adds `sum(log w_r)` to the deviance.
fn weighted_random_intercept_fit(
    y: &[f64],
    design: &DMatrix<f64>,
    codes: &[usize],
    clusters: usize,
    weights: &[f64],
) -> Result<WeightedFit> {
    let n = y.len();
    let p = design.ncols();
    let mut ys = vec![0.0; n];
    let mut xs = DMatrix::zeros(n, p);
    let mut zs = DMatrix::zeros(n, 1);
    let mut log_jacobian = 0.0;
    for r in 0..n {
        let scale = 1.0 / weights[r].sqrt();
        ys[r] = y[r] * scale;
        for c in 0..p {
            xs[(r, c)] = design[(r, c)] * scale;
        }
        zs[(r, 0)] = scale;
        log_jacobian += weights[r].ln();
    }
    let data = LmeData::new(&ys, &xs, &zs, codes, clusters);
    let opt = optimize_lambda(&data)?;
    let sigma2 = opt.eval.pwrss / n as f64;
    let lambda = opt.lambda[(0, 0)];
    let b: Vec<f64> = conditional_modes(&data, &opt.lambda, &opt.eval.beta)
        .iter()
        .map(|m| m[0])
        .collect();
    Ok(WeightedFit {
        beta: opt.eval.beta,
        sigma2,
        sigma2_b: sigma2 * lambda * lambda,
        b,
        deviance: opt.eval.deviance + log_jacobian,
        converged: opt.converged,
    })
}

/// Fits the heteroscedastic model. `x` carries the design covariates
/// without an intercept column; `names` label them for error reporting.
pub fn fit_lme_hetero(
    y: &[f64],
    x: &DMatrix<f64>,
    names: &[String],
    grouping: &Grouping,
) -> Result<HeteroMixedGaussian> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: x.nrows(),
        });
    }
    if grouping.codes.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            got: grouping.codes.len(),
        });
    }
    let clusters = grouping.count();
    if clusters < 2 {
        return Err(Error::TooFewClusters(clusters));
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
    let rows_per_level = grouping.rows_per_level();

    // Homoscedastic starting point: the exact theta = 0 fit.
    let base = weighted_random_intercept_fit(y, &design, &grouping.codes, clusters, &vec![1.0; n])?;
    let mut current = State {
        beta: base.beta,
        sigma2: base.sigma2,
        sigma2_b: base.sigma2_b,
        b: base.b,
        theta: vec![0.0; clusters],
        deviance: base.deviance,
        fit_converged: base.converged,
    };
    let mut best = current.clone();
    let mut converged = false;

    for _outer in 0..MAX_OUTER {
        // Fitted means under the current parameters.
        let mut nu = vec![0.0; n];
        for r in 0..n {
            nu[r] = design.row(r).transpose().dot(&current.beta) + current.b[grouping.codes[r]];
            if nu[r].abs() < NU_FLOOR {
                return Err(Error::VarianceCovariateNearZero {
                    row: r,
                    value: nu[r].abs(),
                });
            }
        }

        // Per-cluster exponent search at the current parameters. Keeping the
        // incumbent exponent whenever it beats every candidate makes this
        // step monotone in the exact marginal deviance.
        let mut theta = current.theta.clone();
        for (j, rows) in rows_per_level.iter().enumerate() {
            let objective = |th: f64| {
                cluster_deviance_term(
                    y,
                    &design,
                    rows,
                    &current.beta,
                    current.sigma2,
                    current.sigma2_b,
                    th,
                    &nu,
                )
            };
            let mut best_theta = current.theta[j];
            let mut best_value = objective(best_theta);
            let mut th = THETA_RANGE.0;
            while th <= THETA_RANGE.1 + 1e-12 {
                let v = objective(th);
                if v < best_value {
                    best_value = v;
                    best_theta = th;
                }
                th += 0.05;
            }
            let (mut lo, mut hi) = (
                (best_theta - 0.05).max(THETA_RANGE.0),
                (best_theta + 0.05).min(THETA_RANGE.1),
            );
            let phi = (5f64.sqrt() - 1.0) / 2.0;
            for _ in 0..60 {
                let a = hi - phi * (hi - lo);
                let b = lo + phi * (hi - lo);
                if objective(a) < objective(b) {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            let refined = 0.5 * (lo + hi);
            if objective(refined) < best_value {
                best_theta = refined;
            }
            theta[j] = best_theta;
        }

        // Refit the regression under the weights implied by (theta, nu).
        let weights: Vec<f64> = (0..n)
            .map(|r| (2.0 * theta[grouping.codes[r]] * nu[r].abs().ln()).exp())
            .collect();
        let refit = weighted_random_intercept_fit(y, &design, &grouping.codes, clusters, &weights)?;
        let next = State {
            beta: refit.beta,
            sigma2: refit.sigma2,
            sigma2_b: refit.sigma2_b,
            b: refit.b,
            theta,
            deviance: refit.deviance,
            fit_converged: refit.converged,
        };
        let change = (current.deviance - next.deviance).abs() / (next.deviance.abs() + 1.0);
        if next.deviance < best.deviance {
            best = next.clone();
        }
        current = next;
        if change < OUTER_TOL {
            converged = true;
            break;
        }
    }

    let mut sigma2 = best.sigma2;
    let degenerate = sigma2 < VARIANCE_FLOOR;
    let loglik = if degenerate {
        sigma2 = VARIANCE_FLOOR;
        // Recompute honestly at the floored variance and the state's own
        // fitted means.
        let mut nu = vec![0.0; n];
        for r in 0..n {
            nu[r] = design.row(r).transpose().dot(&best.beta) + best.b[grouping.codes[r]];
        }
        -0.5 * marginal_deviance(
            y,
            &design,
            &rows_per_level,
            &best.beta,
            sigma2,
            best.sigma2_b,
            &best.theta,
            &nu,
        )
    } else {
        -0.5 * best.deviance
    };

    Ok(HeteroMixedGaussian {
        intercept: best.beta[0],
        betas: best.beta.as_slice()[1..].to_vec(),
        sigma2_b: best.sigma2_b,
        re_intercepts: best.b,
        sigma2,
        theta: best.theta,
        cluster_levels: grouping.levels.clone(),
        loglik,
        n_params: p + 1 + 1 + clusters,
        converged: converged && best.fit_converged,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    fn grouping(codes: &[usize], j: usize) -> Grouping {
        Grouping {
            levels: (0..j).map(|g| format!("c{g}")).collect(),
            codes: codes.to_vec(),
        }
    }

    /// Independent oracle: profiled deviance of the homoscedastic
    /// random-intercept model, evaluated on a dense grid over the variance
    /// ratio using only scalar algebra on the rank-one cluster covariance.
    fn intercept_only_oracle_loglik(
        y: &[f64],
        design: &DMatrix<f64>,
        codes: &[usize],
        clusters: usize,
    ) -> f64 {
        let n = y.len();
        let p = design.ncols();
        let dev = |l2: f64| -> f64 {
            let mut xtvx = DMatrix::<f64>::zeros(p, p);
            let mut xtvy = DVector::<f64>::zeros(p);
            let mut ytvy = 0.0;
            let mut logdet = 0.0;
            for j in 0..clusters {
                let rows: Vec<usize> = (0..n).filter(|&r| codes[r] == j).collect();
                let nj = rows.len() as f64;
                let shrink = l2 / (1.0 + nj * l2);
                logdet += (1.0 + nj * l2).ln();
                let mut x_sum = DVector::<f64>::zeros(p);
                let mut y_sum = 0.0;
                for &r in &rows {
                    let xr = design.row(r).transpose();
                    xtvx += &xr * xr.transpose();
                    xtvy += &xr * y[r];
                    ytvy += y[r] * y[r];
                    x_sum += xr;
                    y_sum += y[r];
                }
                xtvx -= &x_sum * x_sum.transpose() * shrink;
                xtvy -= &x_sum * y_sum * shrink;
                ytvy -= y_sum * y_sum * shrink;
            }
            let beta = xtvx.lu().solve(&xtvy).unwrap();
            let r2 = ytvy - beta.dot(&xtvy);
            logdet + n as f64 * (1.0 + (2.0 * std::f64::consts::PI * r2 / n as f64).ln())
        };
        let mut best = f64::INFINITY;
        let mut l2 = 0.0;
        while l2 <= 30.0 {
            best = best.min(dev(l2));
            l2 += 1e-3;
        }
        -0.5 * best
    }

    fn hetero_data(
        theta_true: &[f64],
        rows_per_cluster: usize,
        seed: u64,
    ) -> (Vec<f64>, DMatrix<f64>, Vec<usize>) {
        let j = theta_true.len();
        let n = j * rows_per_cluster;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut y = Vec::with_capacity(n);
        let mut xcol = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        for c in 0..j {
            let b: f64 = std.sample(&mut rng) * 0.3;
            for _ in 0..rows_per_cluster {
                let x: f64 = 1.0 + 2.0 * rng.random::<f64>();
                let mean = 2.0 + b + 1.5 * x;
                let sd = 0.2 * mean.abs().powf(theta_true[c]);
                y.push(mean + std.sample(&mut rng) * sd);
                xcol.push(x);
                codes.push(c);
            }
        }
        (y, DMatrix::from_column_slice(n, 1, &xcol), codes)
    }

    #[test]
    fn homoscedastic_fit_matches_grid_oracle() {
        // The weighted fitter at unit weights must agree with an
        // independently coded profiled-deviance grid search.
        let (y, x, codes) = hetero_data(&[0.0, 0.0, 0.0, 0.0], 60, 5);
        let n = y.len();
        let design = {
            let mut d = DMatrix::zeros(n, 2);
            d.column_mut(0).fill(1.0);
            d.column_mut(1).copy_from(&x.column(0));
            d
        };
        let fit = weighted_random_intercept_fit(&y, &design, &codes, 4, &vec![1.0; n]).unwrap();
        let oracle = intercept_only_oracle_loglik(&y, &design, &codes, 4);
        assert_relative_eq!(-0.5 * fit.deviance, oracle, max_relative = 1e-6);
    }

    #[test]
    fn never_scores_below_homoscedastic_restriction() {
        for seed in 0..6 {
            let theta_true = [0.0, 0.5, 0.0, 0.5, 0.5];
            let (y, x, codes) = hetero_data(&theta_true, 50, seed);
            let fit = fit_lme_hetero(&y, &x, &["x".to_string()], &grouping(&codes, 5)).unwrap();
            let n = y.len();
            let design = {
                let mut d = DMatrix::zeros(n, 2);
                d.column_mut(0).fill(1.0);
                d.column_mut(1).copy_from(&x.column(0));
                d
            };
            let restricted = intercept_only_oracle_loglik(&y, &design, &codes, 5);
            assert!(
                fit.loglik >= restricted - 1e-6,
                "seed {seed}: hetero {} < restricted {}",
                fit.loglik,
                restricted
            );
        }
    }

    #[test]
    fn recovers_exponent_sign_and_ordering() {
        let theta_true = [0.0, 0.5, 0.0, 0.5, 0.5];
        let (y, x, codes) = hetero_data(&theta_true, 400, 17);
        let fit = fit_lme_hetero(&y, &x, &["x".to_string()], &grouping(&codes, 5)).unwrap();
        let mean_heterosc: f64 = [1usize, 3, 4].iter().map(|&j| fit.theta[j]).sum::<f64>() / 3.0;
        let mean_homosc: f64 = [0usize, 2].iter().map(|&j| fit.theta[j]).sum::<f64>() / 2.0;
        assert!(
            mean_heterosc > mean_homosc + 0.15,
            "ordering lost: hetero {mean_heterosc} vs homo {mean_homosc} ({:?})",
            fit.theta
        );
        for &j in &[1usize, 3, 4] {
            assert!(fit.theta[j] > 0.0, "cluster {j}: theta {}", fit.theta[j]);
        }
        // Slope estimate survives the variance modelling.
        assert!((fit.betas[0] - 1.5).abs() < 0.1);
        assert_eq!(fit.n_params, 2 + 1 + 1 + 5);
    }

    #[test]
    fn fitted_means_at_zero_are_rejected() {
        // Two clusters of (-1, 1): every fitted mean is exactly zero.
        let y = vec![-1.0, 1.0, -1.0, 1.0];
        let x = DMatrix::zeros(4, 0);
        let err = fit_lme_hetero(&y, &x, &[], &grouping(&[0, 0, 1, 1], 2)).unwrap_err();
        assert!(matches!(err, Error::VarianceCovariateNearZero { .. }));
    }

    #[test]
    fn mean_sd_power_formula() {
        let model = HeteroMixedGaussian {
            intercept: 1.0,
            betas: vec![1.0],
            sigma2_b: 0.1,
            re_intercepts: vec![0.0, 0.5],
            sigma2: 1.0,
            theta: vec![0.5, 0.0],
            cluster_levels: vec!["a".into(), "b".into()],
            loglik: 0.0,
            n_params: 5,
            converged: true,
            degenerate: false,
        };
        // Cluster a: mean 1 + 3 = 4, sd = 1 * 4^0.5 = 2.
        let (mean, sd) = model.mean_sd(&[3.0], Some("a"));
        assert_relative_eq!(mean, 4.0);
        assert_relative_eq!(sd, 2.0);
        // Cluster b: intercept shifted, exponent zero.
        let (mean, sd) = model.mean_sd(&[3.0], Some("b"));
        assert_relative_eq!(mean, 4.5);
        assert_relative_eq!(sd, 1.0);
        // Unknown cluster: population prediction, exponent zero.
        let (mean, sd) = model.mean_sd(&[3.0], Some("zzz"));
        assert_relative_eq!(mean, 4.0);
        assert_relative_eq!(sd, 1.0);
    }

    #[test]
    fn serde_round_trip() {
        let (y, x, codes) = hetero_data(&[0.0, 0.5], 40, 2);
        let fit = fit_lme_hetero(&y, &x, &["x".to_string()], &grouping(&codes, 2)).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: HeteroMixedGaussian = serde_json::from_str(&json).unwrap();
        assert_eq!(fit, back);
    }
}
