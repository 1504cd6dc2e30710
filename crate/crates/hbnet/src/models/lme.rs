//! Gaussian linear mixed-effect model fitted by maximum (marginal)
//! likelihood.
//!
//! For each cluster `j`, `y_j = X_j beta + Z_j b_j + e_j` with
//! `b_j ~ N(0, Sigma)` and `e_j ~ N(0, sigma2 I)`. The covariance is
//! parameterized as `Sigma = sigma2 * Lambda Lambda'` with `Lambda` lower
//! triangular, so `beta` and `sigma2` profile out of the likelihood and the
//! optimizer only searches the entries of `Lambda`. Per-cluster inverses go
//! through the Woodbury identity on cross-products, which keeps an
//! evaluation linear in the number of rows.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::nelder_mead::{self, Options};
use super::ols::VARIANCE_FLOOR;
use super::{check_full_rank, Grouping};
use crate::error::{Error, Result};

/// A fitted random-intercept/random-slope Gaussian model. The random-effect
/// dimension is `q = 1 + betas.len()`: one intercept deviation plus one
/// slope deviation per design covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedGaussian {
    pub intercept: f64,
    pub betas: Vec<f64>,
    /// Random-effect covariance, row-major lower triangle of the `q x q`
    /// matrix: `[s00, s10, s11, s20, s21, s22, ...]`.
    pub re_cov: Vec<f64>,
    /// Conditional modes of the random effects, one row of length `q` per
    /// cluster level (intercept deviation first, then slope deviations).
    pub re_modes: Vec<Vec<f64>>,
    /// Residual variance (ML).
    pub sigma2: f64,
    pub cluster_levels: Vec<String>,
    pub loglik: f64,
    /// Fixed effects + distinct covariance entries + residual variance.
    pub n_params: usize,
    pub converged: bool,
    /// True when the fitted covariance factor is (numerically) rank
    /// deficient, i.e. the fit sits on the boundary of the parameter space.
    pub singular: bool,
    /// True when the residual variance hit its floor.
    pub degenerate: bool,
}

impl MixedGaussian {
    pub fn q(&self) -> usize {
        1 + self.betas.len()
    }

    /// Dense symmetric covariance matrix of the random effects.
    pub fn re_cov_matrix(&self) -> DMatrix<f64> {
        lower_triangle_to_matrix(&self.re_cov, self.q())
    }

    /// Conditional mean given parent values and an optional cluster label;
    /// unknown labels use zero random effects.
    pub fn mean(&self, parents: &[f64], cluster: Option<&str>) -> f64 {
        let mut mean = self.intercept;
        for (b, x) in self.betas.iter().zip(parents) {
            mean += b * x;
        }
        if let Some(idx) = cluster.and_then(|c| self.cluster_levels.iter().position(|l| l == c)) {
            let modes = &self.re_modes[idx];
            mean += modes[0];
            for (m, x) in modes[1..].iter().zip(parents) {
                mean += m * x;
            }
        }
        mean
    }
}

pub(crate) fn lower_triangle_to_matrix(tri: &[f64], q: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(q, q);
    let mut idx = 0;
    for i in 0..q {
        for j in 0..=i {
            m[(i, j)] = tri[idx];
            m[(j, i)] = tri[idx];
            idx += 1;
        }
    }
    m
}

fn matrix_lower_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let mut tri = Vec::with_capacity(m.nrows() * (m.nrows() + 1) / 2);
    for i in 0..m.nrows() {
        for j in 0..=i {
            tri.push(m[(i, j)]);
        }
    }
    tri
}

/// Per-cluster cross-products: everything an evaluation needs, independent
/// of the covariance parameters.
pub(crate) struct LmeData {
    pub n: usize,
    pub q: usize,
    ztz: Vec<DMatrix<f64>>,
    ztx: Vec<DMatrix<f64>>,
    zty: Vec<DVector<f64>>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

impl LmeData {
    /// `x` is the full fixed-effect design (leading intercept column), `z`
    /// the random-effect design; `codes[r]` is the cluster of row `r`.
    pub fn new(
        y: &[f64],
        x: &DMatrix<f64>,
        z: &DMatrix<f64>,
        codes: &[usize],
        clusters: usize,
    ) -> Self {
        let n = y.len();
        let p = x.ncols();
        let q = z.ncols();
        let mut data = LmeData {
            n,
            q,
            ztz: vec![DMatrix::zeros(q, q); clusters],
            ztx: vec![DMatrix::zeros(q, p); clusters],
            zty: vec![DVector::zeros(q); clusters],
            xtx: DMatrix::zeros(p, p),
            xty: DVector::zeros(p),
            yty: 0.0,
        };
        for r in 0..n {
            let j = codes[r];
            for a in 0..q {
                let za = z[(r, a)];
                for b in 0..q {
                    data.ztz[j][(a, b)] += za * z[(r, b)];
                }
                for b in 0..p {
                    data.ztx[j][(a, b)] += za * x[(r, b)];
                }
                data.zty[j][a] += za * y[r];
            }
            for a in 0..p {
                let xa = x[(r, a)];
                for b in 0..p {
                    data.xtx[(a, b)] += xa * x[(r, b)];
                }
                data.xty[a] += xa * y[r];
            }
            data.yty += y[r] * y[r];
        }
        data
    }
}

/// One evaluation of the profiled deviance at a fixed covariance factor.
pub(crate) struct LmeEval {
    /// `-2 loglik` at the profiled `beta` and `sigma2`.
    pub deviance: f64,
    pub beta: DVector<f64>,
    /// Minimized generalized residual sum of squares.
    pub pwrss: f64,
    /// `sum_j log det(Lambda' Z_j' Z_j Lambda + I)`.
    pub logdet: f64,
}

/// Profiled deviance at `lambda`; `None` when a factorization fails.
pub(crate) fn evaluate_lambda(data: &LmeData, lambda: &DMatrix<f64>) -> Option<LmeEval> {
    let mut logdet = 0.0;
    let mut xtvx = data.xtx.clone();
    let mut xtvy = data.xty.clone();
    let mut ytvy = data.yty;
    for j in 0..data.ztz.len() {
        // A_j = Lambda' Z_j'Z_j Lambda + I, always positive definite.
        let lt_ztz = lambda.transpose() * &data.ztz[j];
        let mut a = &lt_ztz * lambda;
        for d in 0..data.q {
            a[(d, d)] += 1.0;
        }
        let chol = Cholesky::new(a)?;
        logdet += 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();

        let w = lambda.transpose() * &data.ztx[j]; // q x p
        let v = lambda.transpose() * &data.zty[j]; // q
        let aw = chol.solve(&w);
        let av = chol.solve(&v);
        xtvx -= w.transpose() * &aw;
        xtvy -= w.transpose() * &av;
        ytvy -= v.dot(&av);
    }
    let chol_x = Cholesky::new(xtvx)?;
    let beta = chol_x.solve(&xtvy);
    let pwrss = (ytvy - beta.dot(&xtvy)).max(1e-300);
    let n = data.n as f64;
    let deviance = logdet + n * (1.0 + (2.0 * std::f64::consts::PI * pwrss / n).ln());
    Some(LmeEval {
        deviance,
        beta,
        pwrss,
        logdet,
    })
}

/// Conditional modes `b_j = Lambda u_j` at the given factor and fixed
/// effects.
pub(crate) fn conditional_modes(
    data: &LmeData,
    lambda: &DMatrix<f64>,
    beta: &DVector<f64>,
) -> Vec<DVector<f64>> {
    (0..data.ztz.len())
        .map(|j| {
            let lt_ztz = lambda.transpose() * &data.ztz[j];
            let mut a = &lt_ztz * lambda;
            for d in 0..data.q {
                a[(d, d)] += 1.0;
            }
            let rhs = lambda.transpose() * (&data.zty[j] - &data.ztx[j] * beta);
            let u = Cholesky::new(a)
                .expect("positive definite by construction")
                .solve(&rhs);
            lambda * u
        })
        .collect()
}

fn theta_to_lambda(theta: &[f64], q: usize) -> DMatrix<f64> {
    let mut lambda = DMatrix::zeros(q, q);
    let mut idx = 0;
    for i in 0..q {
        for j in 0..=i {
            lambda[(i, j)] = theta[idx];
            idx += 1;
        }
    }
    lambda
}

pub(crate) struct OptimizedLambda {
    pub lambda: DMatrix<f64>,
    pub eval: LmeEval,
    pub converged: bool,
    pub singular: bool,
}

/// Minimizes the profiled deviance over the lower-triangular factor,
/// starting from the identity. The boundary `Lambda = 0` (which reproduces
/// the fixed-effect fit exactly) is always evaluated as well and kept when
/// it is at least as good, so the mixed fit can never score below its nested
/// fixed-effect counterpart.
pub(crate) fn optimize_lambda(data: &LmeData) -> Result<OptimizedLambda> {
    let q = data.q;
    let dim = q * (q + 1) / 2;
    let mut theta0 = vec![0.0; dim];
    let mut lower = vec![None; dim];
    {
        let mut idx = 0;
        for i in 0..q {
            for j in 0..=i {
                if i == j {
                    theta0[idx] = 1.0;
                    lower[idx] = Some(0.0);
                }
                idx += 1;
            }
        }
    }
    let objective = |theta: &[f64]| {
        let lambda = theta_to_lambda(theta, q);
        evaluate_lambda(data, &lambda).map_or(f64::INFINITY, |e| e.deviance)
    };
    let outcome = nelder_mead::minimize(objective, &theta0, &lower, &Options::default());

    let zero = DMatrix::zeros(q, q);
    let boundary = evaluate_lambda(data, &zero)
        .ok_or_else(|| Error::invalid("deviance evaluation failed at the boundary"))?;
    let best_lambda = theta_to_lambda(&outcome.x, q);
    let interior = evaluate_lambda(data, &best_lambda);

    let (lambda, eval, converged) = match interior {
        Some(eval) if eval.deviance < boundary.deviance => (best_lambda, eval, outcome.converged),
        _ => (zero, boundary, true),
    };
    let singular = (0..q).any(|d| lambda[(d, d)].abs() < 1e-4);
    Ok(OptimizedLambda {
        lambda,
        eval,
        converged,
        singular,
    })
}

/// Fits the mixed model. `x` carries the design covariates without an
/// intercept column (one is added, and every covariate also gets a random
/// slope); `names` label those covariates for error reporting.
pub fn fit_lme(
    y: &[f64],
    x: &DMatrix<f64>,
    names: &[String],
    grouping: &Grouping,
) -> Result<MixedGaussian> {
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
    let j = grouping.count();
    if j < 2 {
        return Err(Error::TooFewClusters(j));
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

    let data = LmeData::new(y, &design, &design, &grouping.codes, j);
    let opt = optimize_lambda(&data)?;

    let q = data.q;
    let mut sigma2 = opt.eval.pwrss / n as f64;
    let degenerate = sigma2 < VARIANCE_FLOOR;
    if degenerate {
        sigma2 = VARIANCE_FLOOR;
    }
    let loglik = -0.5
        * (n as f64 * (2.0 * std::f64::consts::PI * sigma2).ln()
            + opt.eval.logdet
            + opt.eval.pwrss / sigma2);
    let re_cov_matrix = &opt.lambda * opt.lambda.transpose() * sigma2;
    let modes = conditional_modes(&data, &opt.lambda, &opt.eval.beta);

    Ok(MixedGaussian {
        intercept: opt.eval.beta[0],
        betas: opt.eval.beta.as_slice()[1..].to_vec(),
        re_cov: matrix_lower_triangle(&re_cov_matrix),
        re_modes: modes.iter().map(|m| m.as_slice().to_vec()).collect(),
        sigma2,
        cluster_levels: grouping.levels.clone(),
        loglik,
        n_params: p + q * (q + 1) / 2 + 1,
        converged: opt.converged,
        singular: opt.singular,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::fit_ols;
    use approx::assert_relative_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::Normal;

    /// Balanced one-way layout: J groups of m rows, intercept-only design.
    fn balanced_one_way(j: usize, m: usize, mu: f64, sd_b: f64, sd_e: f64, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut y = Vec::with_capacity(j * m);
        let mut codes = Vec::with_capacity(j * m);
        for g in 0..j {
            let b: f64 = std.sample(&mut rng) * sd_b;
            for _ in 0..m {
                y.push(mu + b + std.sample(&mut rng) * sd_e);
                codes.push(g);
            }
        }
        (y, codes)
    }

    fn grouping(codes: &[usize], j: usize) -> Grouping {
        Grouping {
            levels: (0..j).map(|g| format!("g{g}")).collect(),
            codes: codes.to_vec(),
        }
    }

    /// Independent oracle for the balanced intercept-only case: the profiled
    /// deviance reduces to a one-dimensional function of `lambda^2`, minimized
    /// here by dense grid search plus golden-section refinement.
    fn oracle_deviance(y: &[f64], codes: &[usize], j: usize, m: usize) -> f64 {
        let n = (j * m) as f64;
        let grand = y.iter().sum::<f64>() / n;
        let mut group_means = vec![0.0; j];
        for (v, &c) in y.iter().zip(codes) {
            group_means[c] += v / m as f64;
        }
        let ssb: f64 = group_means.iter().map(|gm| m as f64 * (gm - grand).powi(2)).sum();
        let ssw: f64 = y
            .iter()
            .zip(codes)
            .map(|(v, &c)| (v - group_means[c]).powi(2))
            .sum();
        let dev = |l2: f64| {
            let r2 = ssw + ssb / (1.0 + m as f64 * l2);
            j as f64 * (1.0 + m as f64 * l2).ln()
                + n * (1.0 + (2.0 * std::f64::consts::PI * r2 / n).ln())
        };
        let mut best = (0.0, dev(0.0));
        let mut l2 = 0.0;
        while l2 <= 25.0 {
            let d = dev(l2);
            if d < best.1 {
                best = (l2, d);
            }
            l2 += 1e-3;
        }
        // Golden-section refinement around the grid minimum.
        let (mut lo, mut hi) = ((best.0 - 2e-3).max(0.0), best.0 + 2e-3);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if dev(a) < dev(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        dev(0.5 * (lo + hi)).min(best.1)
    }

    #[test]
    fn matches_balanced_one_way_oracle() {
        for seed in 0..5 {
            let (j, m) = (12, 8);
            let (y, codes) = balanced_one_way(j, m, 5.0, 1.5, 0.7, seed);
            let fit = fit_lme(&y, &DMatrix::zeros(y.len(), 0), &[], &grouping(&codes, j)).unwrap();
            let oracle = oracle_deviance(&y, &codes, j, m);
            let fitted_dev = -2.0 * fit.loglik;
            assert_relative_eq!(fitted_dev, oracle, max_relative = 1e-6);
            assert!(fit.converged);
        }
    }

    #[test]
    fn never_scores_below_fixed_effect_fit() {
        for seed in 0..10 {
            // Half the seeds have real group structure, half none at all.
            let sd_b = if seed % 2 == 0 { 1.0 } else { 0.0 };
            let (y, codes) = balanced_one_way(6, 10, 1.0, sd_b, 1.0, 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = DMatrix::from_fn(y.len(), 1, |_, _| rng.random::<f64>() * 4.0 - 2.0);
            let y2: Vec<f64> = y
                .iter()
                .zip(x.column(0).iter())
                .map(|(v, xv)| v + 0.5 * xv)
                .collect();
            let names = vec!["x".to_string()];
            let mixed = fit_lme(&y2, &x, &names, &grouping(&codes, 6)).unwrap();
            let fixed = fit_ols(&y2, &x, &names).unwrap();
            assert!(
                mixed.loglik >= fixed.loglik - 1e-6,
                "seed {seed}: mixed {} < fixed {}",
                mixed.loglik,
                fixed.loglik
            );
        }
    }

    #[test]
    fn modes_match_scalar_shrinkage_identity() {
        // For a random intercept model, the conditional mode of group j is
        // (m s2b / (m s2b + s2)) * (group mean - fitted intercept); this
        // re-derives the modes through a formula the fitter never uses.
        let (j, m) = (8, 16);
        let (y, codes) = balanced_one_way(j, m, 2.0, 2.0, 1.0, 42);
        let fit = fit_lme(&y, &DMatrix::zeros(y.len(), 0), &[], &grouping(&codes, j)).unwrap();
        let s2b = fit.re_cov[0];
        let shrink = m as f64 * s2b / (m as f64 * s2b + fit.sigma2);
        let mut group_means = vec![0.0; j];
        for (v, &c) in y.iter().zip(&codes) {
            group_means[c] += v / m as f64;
        }
        for (g, gm) in group_means.iter().enumerate() {
            let expected = shrink * (gm - fit.intercept);
            assert_relative_eq!(fit.re_modes[g][0], expected, max_relative = 1e-5);
        }
    }

    #[test]
    fn zero_group_variance_lands_on_boundary() {
        // Group means are equalized exactly, so the between-group variance
        // component sits on the boundary: singular fit, loglik ties OLS.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let std = Normal::new(0.0, 1.0).unwrap();
        let mut y: Vec<f64> = (0..120).map(|_| 3.0 + std.sample(&mut rng)).collect();
        let codes: Vec<usize> = (0..120).map(|r| r % 6).collect();
        for g in 0..6 {
            let rows: Vec<usize> = (0..120).filter(|&r| codes[r] == g).collect();
            let mean = rows.iter().map(|&r| y[r]).sum::<f64>() / rows.len() as f64;
            for &r in &rows {
                y[r] += 3.0 - mean;
            }
        }
        let fit = fit_lme(&y, &DMatrix::zeros(120, 0), &[], &grouping(&codes, 6)).unwrap();
        let ols = fit_ols(&y, &DMatrix::zeros(120, 0), &[]).unwrap();
        assert!(fit.loglik >= ols.loglik - 1e-6);
        assert!((fit.loglik - ols.loglik).abs() < 1e-4);
        assert!(fit.re_cov[0] < 1e-4);
        assert!(fit.singular);
    }

    #[test]
    fn fitted_deviance_not_above_true_parameter_deviance() {
        // With random slopes: the optimum must be at least as good as the
        // generating parameters.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let std = Normal::new(0.0, 1.0).unwrap();
        let (j, m) = (10, 20);
        let n = j * m;
        let mut y = Vec::with_capacity(n);
        let mut codes = Vec::with_capacity(n);
        let mut xcol = Vec::with_capacity(n);
        for g in 0..j {
            let b0: f64 = std.sample(&mut rng) * 1.0;
            let b1: f64 = std.sample(&mut rng) * 0.5;
            for _ in 0..m {
                let x: f64 = std.sample(&mut rng) * 2.0;
                y.push(1.0 + b0 + (2.0 + b1) * x + std.sample(&mut rng) * 0.6);
                codes.push(g);
                xcol.push(x);
            }
        }
        let x = DMatrix::from_column_slice(n, 1, &xcol);
        let fit = fit_lme(&y, &x, &["x".to_string()], &grouping(&codes, j)).unwrap();

        // Deviance at the generating factor (sigma known up to profiling).
        let design = {
            let mut d = DMatrix::zeros(n, 2);
            d.column_mut(0).fill(1.0);
            d.column_mut(1).copy_from_slice(&xcol);
            d
        };
        let data = LmeData::new(&y, &design, &design, &codes, j);
        let true_lambda =
            DMatrix::from_row_slice(2, 2, &[1.0 / 0.6, 0.0, 0.0, 0.5 / 0.6]);
        let at_truth = evaluate_lambda(&data, &true_lambda).unwrap();
        assert!(-2.0 * fit.loglik <= at_truth.deviance + 1e-6);
        // Slope estimate should be near 2.
        assert!((fit.betas[0] - 2.0).abs() < 0.3);
        assert_eq!(fit.n_params, 2 + 3 + 1);
        assert_eq!(fit.re_modes.len(), j);
        assert_eq!(fit.re_modes[0].len(), 2);
    }

    #[test]
    fn covariance_is_positive_semidefinite() {
        let (y, codes) = balanced_one_way(5, 6, 0.0, 0.8, 1.0, 3);
        let fit = fit_lme(&y, &DMatrix::zeros(y.len(), 0), &[], &grouping(&codes, 5)).unwrap();
        let eig = fit.re_cov_matrix().symmetric_eigen();
        assert!(eig.eigenvalues.iter().all(|&v| v >= -1e-12));
    }

    #[test]
    fn needs_two_clusters() {
        let y = vec![1.0, 2.0, 3.0];
        let g = Grouping {
            levels: vec!["only".into()],
            codes: vec![0, 0, 0],
        };
        assert!(matches!(
            fit_lme(&y, &DMatrix::zeros(3, 0), &[], &g),
            Err(Error::TooFewClusters(1))
        ));
    }

    #[test]
    fn serde_round_trip() {
        let (y, codes) = balanced_one_way(4, 5, 1.0, 0.5, 0.4, 11);
        let fit = fit_lme(&y, &DMatrix::zeros(y.len(), 0), &[], &grouping(&codes, 4)).unwrap();
        let json = serde_json::to_string(&fit).unwrap();
        let back: MixedGaussian = serde_json::from_str(&json).unwrap();
        assert_eq!(fit, back);
    }
}
