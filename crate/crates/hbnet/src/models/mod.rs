//! Local conditional distributions attached to network nodes.
//!
//! Four families: a multinomial root for the cluster variable, a fixed-effect
//! Gaussian, a mixed-effect Gaussian with a random intercept and random
//! slopes per cluster, and a heteroscedastic variant whose residual variance
//! scales with a power of the fitted mean. All continuous fits maximize the
//! exact (marginal) likelihood, so BIC scores are comparable across families.

mod hetero;
mod lme;
pub mod nelder_mead;
mod ols;

pub use hetero::{fit_lme_hetero, HeteroMixedGaussian};
pub use lme::{fit_lme, MixedGaussian};
pub use ols::{fit_ols, FixedGaussian, VARIANCE_FLOOR};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cluster membership of each row: `codes[r]` indexes `levels`. Only levels
/// that actually occur are kept.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Grouping {
    pub levels: Vec<String>,
    pub codes: Vec<usize>,
}

impl Grouping {
    /// Builds a grouping from a discrete column, compacting the level table
    /// to the levels that occur.
    pub fn from_column(levels: &[String], codes: &[u32]) -> Result<Self> {
        let mut used = vec![false; levels.len()];
        for &c in codes {
            used[c as usize] = true;
        }
        let mut remap = vec![usize::MAX; levels.len()];
        let mut kept = Vec::new();
        for (i, level) in levels.iter().enumerate() {
            if used[i] {
                remap[i] = kept.len();
                kept.push(level.clone());
            }
        }
        if kept.is_empty() {
            return Err(Error::invalid("grouping over an empty column"));
        }
        Ok(Grouping {
            levels: kept,
            codes: codes.iter().map(|&c| remap[c as usize]).collect(),
        })
    }

    /// Number of clusters.
    pub fn count(&self) -> usize {
        self.levels.len()
    }

    /// Row indices of each cluster, in level order.
    pub fn rows_per_level(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.levels.len()];
        for (r, &c) in self.codes.iter().enumerate() {
            rows[c].push(r);
        }
        rows
    }
}

/// Categorical distribution over the observed levels of a discrete root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multinomial {
    pub levels: Vec<String>,
    pub probs: Vec<f64>,
    pub loglik: f64,
    /// Free parameters: level probabilities minus the sum constraint.
    pub n_params: usize,
}

impl Multinomial {
    /// Probability of `level`; `None` for levels never observed.
    pub fn prob(&self, level: &str) -> Option<f64> {
        self.levels
            .iter()
            .position(|l| l == level)
            .map(|i| self.probs[i])
    }
}

/// Fits the empirical category frequencies of a discrete column. Levels with
/// zero observations are dropped.
pub fn fit_multinomial(levels: &[String], codes: &[u32]) -> Result<Multinomial> {
    if codes.is_empty() {
        return Err(Error::invalid("multinomial fit needs at least one row"));
    }
    let grouping = Grouping::from_column(levels, codes)?;
    let n = codes.len() as f64;
    let mut counts = vec![0usize; grouping.count()];
    for &c in &grouping.codes {
        counts[c] += 1;
    }
    let probs: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
    let loglik = counts
        .iter()
        .zip(&probs)
        .map(|(&c, &p)| c as f64 * p.ln())
        .sum();
    Ok(Multinomial {
        n_params: grouping.count() - 1,
        levels: grouping.levels,
        probs,
        loglik,
    })
}

/// The local distribution of one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LocalModel {
    MultinomialRoot(Multinomial),
    FixedGaussian(FixedGaussian),
    MixedGaussian(MixedGaussian),
    HeteroMixedGaussian(HeteroMixedGaussian),
}

impl LocalModel {
    pub fn loglik(&self) -> f64 {
        match self {
            LocalModel::MultinomialRoot(m) => m.loglik,
            LocalModel::FixedGaussian(m) => m.loglik,
            LocalModel::MixedGaussian(m) => m.loglik,
            LocalModel::HeteroMixedGaussian(m) => m.loglik,
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            LocalModel::MultinomialRoot(m) => m.n_params,
            LocalModel::FixedGaussian(m) => m.n_params,
            LocalModel::MixedGaussian(m) => m.n_params,
            LocalModel::HeteroMixedGaussian(m) => m.n_params,
        }
    }

    /// True when an iterative fitter stopped on its budget rather than on
    /// its convergence rule.
    pub fn converged(&self) -> bool {
        match self {
            LocalModel::MultinomialRoot(_) | LocalModel::FixedGaussian(_) => true,
            LocalModel::MixedGaussian(m) => m.converged,
            LocalModel::HeteroMixedGaussian(m) => m.converged,
        }
    }
}

/// BIC contribution of one node: `loglik - n_params/2 * log(n)`. Larger is
/// better; the network score is the sum over nodes.
pub fn node_bic(model: &LocalModel, n: usize) -> f64 {
    model.loglik() - model.n_params() as f64 / 2.0 * (n as f64).ln()
}

/// Conditional mean and standard deviation of a continuous node given its
/// continuous parent values (in design order) and, for mixed families, the
/// cluster label. Unknown cluster labels fall back to zero random effects
/// (and exponent zero for the heteroscedastic family).
pub fn predict_row(
    model: &LocalModel,
    parents: &[f64],
    cluster: Option<&str>,
) -> Result<(f64, f64)> {
    let check_len = |expected: usize| -> Result<()> {
        if parents.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: parents.len(),
            });
        }
        Ok(())
    };
    match model {
        LocalModel::MultinomialRoot(_) => Err(Error::invalid(
            "a discrete root has no numeric mean/sd prediction",
        )),
        LocalModel::FixedGaussian(m) => {
            check_len(m.betas.len())?;
            Ok((m.mean(parents), m.sigma2.sqrt()))
        }
        LocalModel::MixedGaussian(m) => {
            check_len(m.betas.len())?;
            Ok((m.mean(parents, cluster), m.sigma2.sqrt()))
        }
        LocalModel::HeteroMixedGaussian(m) => {
            check_len(m.betas.len())?;
            Ok(m.mean_sd(parents, cluster))
        }
    }
}

/// log N(x | mean, sd^2).
pub(crate) fn gaussian_logpdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// Errors unless the columns of `design` are linearly independent, reporting
/// the aliased columns by name. `names` label the columns after the leading
/// intercept. Uses twice-iterated Gram-Schmidt, flagging any column whose
/// residual against the earlier columns is numerically zero.
pub(crate) fn check_full_rank(design: &DMatrix<f64>, names: &[String]) -> Result<()> {
    let mut basis: Vec<nalgebra::DVector<f64>> = Vec::new();
    let mut aliased = Vec::new();
    for j in 0..design.ncols() {
        let mut v = design.column(j).clone_owned();
        let norm0 = v.norm();
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&v);
                v -= b * c;
            }
        }
        let tol = 1e-8 * norm0.max(1.0);
        if v.norm() <= tol {
            aliased.push(if j == 0 {
                "(intercept)".to_string()
            } else {
                names
                    .get(j - 1)
                    .cloned()
                    .unwrap_or_else(|| format!("column {j}"))
            });
        } else {
            let norm = v.norm();
            basis.push(v / norm);
        }
    }
    if aliased.is_empty() {
        Ok(())
    } else {
        Err(Error::RankDeficient { aliased })
    }
}
