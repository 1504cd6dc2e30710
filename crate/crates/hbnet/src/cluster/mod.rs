//! Synthesis of the discrete cluster variable: pooled regression residuals,
//! per-group residual statistics, Ward clustering of the standardized
//! (mean, sd) features, and assignment of unseen groups to the nearest
//! fitted centroid.

mod ward;

pub use ward::{cut_tree, ward_linkage, Dendrogram, Merge};

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Column, ColumnKind, ColumnRole, ColumnSpec, Dataset, GroupKey};
use crate::error::{Error, Result};
use crate::models::fit_ols;

/// Residual summary of one row group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStats {
    pub group: GroupKey,
    pub mean: f64,
    pub sd: f64,
    pub count: usize,
}

/// Pooled ordinary-least-squares regression of the target on every other
/// continuous column (no grouping). Used to produce the residuals whose
/// per-group statistics drive clustering, and to place unseen groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledRegression {
    pub target: String,
    /// Covariate column names, in schema order.
    pub covariates: Vec<String>,
    pub intercept: f64,
    pub betas: Vec<f64>,
}

impl PooledRegression {
    /// Residuals `y - yhat` of `ds` under this regression, in row order.
    pub fn residuals(&self, ds: &Dataset) -> Result<Vec<f64>> {
        let y = ds.continuous(&self.target)?;
        let columns: Vec<&[f64]> = self
            .covariates
            .iter()
            .map(|c| ds.continuous(c))
            .collect::<Result<_>>()?;
        Ok((0..ds.n())
            .map(|r| {
                let mut fitted = self.intercept;
                for (beta, col) in self.betas.iter().zip(&columns) {
                    fitted += beta * col[r];
                }
                y[r] - fitted
            })
            .collect())
    }
}

/// Fits the pooled regression of `target` on all other continuous columns.
pub fn fit_pooled_regression(ds: &Dataset, target: &str) -> Result<PooledRegression> {
    let spec = ds.schema().spec(target)?;
    if spec.kind != ColumnKind::Continuous {
        return Err(Error::NotContinuous(target.to_string()));
    }
    let covariates: Vec<String> = ds
        .schema()
        .columns()
        .iter()
        .filter(|s| s.kind == ColumnKind::Continuous && s.name != target)
        .map(|s| s.name.clone())
        .collect();
    if covariates.is_empty() {
        return Err(Error::invalid(
            "pooled regression needs at least one continuous covariate besides the target",
        ));
    }
    let y = ds.continuous(target)?;
    let mut x = DMatrix::zeros(ds.n(), covariates.len());
    for (c, name) in covariates.iter().enumerate() {
        x.column_mut(c).copy_from_slice(ds.continuous(name)?);
    }
    let fit = fit_ols(y, &x, &covariates)?;
    Ok(PooledRegression {
        target: target.to_string(),
        covariates,
        intercept: fit.intercept,
        betas: fit.betas,
    })
}

/// Residuals of the pooled regression of `target` on all other continuous
/// columns.
pub fn pooled_residuals(ds: &Dataset, target: &str) -> Result<Vec<f64>> {
    fit_pooled_regression(ds, target)?.residuals(ds)
}

/// Per-group mean and standard deviation (n−1 denominator; 0 for
/// singletons) of a residual vector, one entry per group in key order.
pub fn group_stats(residuals: &[f64], ds: &Dataset) -> Result<Vec<ResidualStats>> {
    if residuals.len() != ds.n() {
        return Err(Error::LengthMismatch {
            expected: ds.n(),
            got: residuals.len(),
        });
    }
    let groups = ds.group_rows()?;
    Ok(groups
        .into_iter()
        .map(|(group, rows)| {
            let count = rows.len();
            let mean = rows.iter().map(|&r| residuals[r]).sum::<f64>() / count as f64;
            let sd = if count < 2 {
                0.0
            } else {
                let ss: f64 = rows.iter().map(|&r| (residuals[r] - mean).powi(2)).sum();
                (ss / (count - 1) as f64).sqrt()
            };
            ResidualStats {
                group,
                mean,
                sd,
                count,
            }
        })
        .collect())
}

/// Mean silhouette score of a labelled point set under Euclidean distance.
/// Points in singleton clusters contribute 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[u32]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            got: labels.len(),
        });
    }
    let distinct: std::collections::BTreeSet<u32> = labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::SingleCluster);
    }
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut total = 0.0;
    for (i, point) in points.iter().enumerate() {
        let own = labels[i];
        let own_size = labels.iter().filter(|&&l| l == own).count();
        if own_size == 1 {
            continue; // contributes 0
        }
        let a = points
            .iter()
            .enumerate()
            .filter(|(j, _)| labels[*j] == own && *j != i)
            .map(|(_, q)| dist(point, q))
            .sum::<f64>()
            / (own_size - 1) as f64;
        let b = distinct
            .iter()
            .filter(|&&l| l != own)
            .map(|&l| {
                let members: Vec<&Vec<f64>> = points
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| labels[*j] == l)
                    .map(|(_, q)| q)
                    .collect();
                members.iter().map(|q| dist(point, q)).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// How the number of clusters is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSelection {
    /// Maximize the mean silhouette over `k in 2..=min(100, G-1)`.
    Auto,
    Fixed(usize),
}

/// The fitted clustering pipeline: regression, feature standardization,
/// merge tree, chosen cut, and per-group assignments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub regression: PooledRegression,
    /// Means of the raw (mean, sd) features over groups.
    pub feature_mean: [f64; 2],
    /// Standard deviations of the raw features (1 where constant).
    pub feature_sd: [f64; 2],
    pub dendrogram: Dendrogram,
    /// Mean silhouette per candidate k (empty when k was fixed).
    pub silhouette_by_k: Vec<(usize, f64)>,
    pub k: usize,
    /// Centroids of the standardized features, indexed by `label - 1`.
    pub centroids: Vec<[f64; 2]>,
    /// JSON object keys must be strings, so this map serializes as a list
    /// of `(group key, label)` pairs.
    #[serde(with = "assignment_pairs")]
    pub assignments: BTreeMap<GroupKey, u32>,
}

mod assignment_pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::data::GroupKey;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<GroupKey, u32>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter().collect::<Vec<_>>().serialize(ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<GroupKey, u32>, D::Error> {
        let pairs: Vec<(GroupKey, u32)> = Vec::deserialize(de)?;
        Ok(pairs.into_iter().collect())
    }
}

impl ClusterModel {
    fn standardize(&self, stats: &ResidualStats) -> [f64; 2] {
        [
            (stats.mean - self.feature_mean[0]) / self.feature_sd[0],
            (stats.sd - self.feature_mean[1]) / self.feature_sd[1],
        ]
    }

    fn nearest_centroid(&self, feature: [f64; 2]) -> u32 {
        let mut best = (f64::INFINITY, 0u32);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = (feature[0] - c[0]).powi(2) + (feature[1] - c[1]).powi(2);
            if d < best.0 {
                best = (d, i as u32 + 1);
            }
        }
        best.1
    }
}

/// Runs the full cluster-synthesis pipeline on `ds`: pooled regression on
/// the schema's target, per-group residual statistics, z-scored features,
/// Ward linkage, and the cut chosen by `selection`.
pub fn derive_clusters(ds: &Dataset, selection: KSelection) -> Result<ClusterModel> {
    let target = ds.schema().target().name.clone();
    let regression = fit_pooled_regression(ds, &target)?;
    let residuals = regression.residuals(ds)?;
    let stats = group_stats(&residuals, ds)?;
    let g = stats.len();
    if g < 2 {
        return Err(Error::TooFewGroups(g));
    }

    let raw: Vec<[f64; 2]> = stats.iter().map(|s| [s.mean, s.sd]).collect();
    let mut feature_mean = [0.0; 2];
    let mut feature_sd = [0.0; 2];
    for d in 0..2 {
        feature_mean[d] = raw.iter().map(|f| f[d]).sum::<f64>() / g as f64;
        let ss: f64 = raw.iter().map(|f| (f[d] - feature_mean[d]).powi(2)).sum();
        let sd = (ss / (g - 1) as f64).sqrt();
        feature_sd[d] = if sd > 0.0 { sd } else { 1.0 };
    }
    let points: Vec<Vec<f64>> = raw
        .iter()
        .map(|f| {
            vec![
                (f[0] - feature_mean[0]) / feature_sd[0],
                (f[1] - feature_mean[1]) / feature_sd[1],
            ]
        })
        .collect();

    let dendrogram = ward_linkage(&points)?;
    let mut silhouette_by_k = Vec::new();
    let k = match selection {
        KSelection::Fixed(k) => {
            if k == 0 || k > g {
                return Err(Error::CutOutOfRange { k, leaves: g });
            }
            k
        }
        KSelection::Auto => {
            let upper = 100.min(g - 1);
            if upper < 2 {
                2 // two groups: the only nontrivial cut
            } else {
                let mut best = (2usize, f64::NEG_INFINITY);
                for k in 2..=upper {
                    let labels = cut_tree(&dendrogram, k)?;
                    let score = silhouette(&points, &labels)?;
                    silhouette_by_k.push((k, score));
                    if score > best.1 {
                        best = (k, score);
                    }
                }
                best.0
            }
        }
    };
    let labels = cut_tree(&dendrogram, k)?;

    let mut centroids = vec![[0.0; 2]; k];
    let mut sizes = vec![0usize; k];
    for (point, &label) in points.iter().zip(&labels) {
        let idx = (label - 1) as usize;
        centroids[idx][0] += point[0];
        centroids[idx][1] += point[1];
        sizes[idx] += 1;
    }
    for (c, &s) in centroids.iter_mut().zip(&sizes) {
        c[0] /= s as f64;
        c[1] /= s as f64;
    }
    let assignments = stats
        .iter()
        .zip(&labels)
        .map(|(s, &l)| (s.group.clone(), l))
        .collect();

    Ok(ClusterModel {
        regression,
        feature_mean,
        feature_sd,
        dendrogram,
        silhouette_by_k,
        k,
        centroids,
        assignments,
    })
}

/// Assigns each group of `ds` (typically held-out data) to the nearest
/// fitted centroid, using residual features computed with the *fitted*
/// regression — nothing is re-estimated on `ds`.
pub fn assign_to_nearest(model: &ClusterModel, ds: &Dataset) -> Result<BTreeMap<GroupKey, u32>> {
    let residuals = model.regression.residuals(ds)?;
    let stats = group_stats(&residuals, ds)?;
    Ok(stats
        .iter()
        .map(|s| (s.group.clone(), model.nearest_centroid(model.standardize(s))))
        .collect())
}

/// Appends a discrete cluster column (role `Cluster`) mapping each row's
/// group through `assignments`. The level table always carries `1..=k`, so
/// train and test datasets stay code-compatible.
pub fn apply_cluster_column(
    ds: &Dataset,
    assignments: &BTreeMap<GroupKey, u32>,
    k: usize,
    name: &str,
) -> Result<Dataset> {
    let mut levels: Vec<String> = (1..=k as u32).map(|l| l.to_string()).collect();
    levels.sort();
    let position: BTreeMap<&str, u32> = levels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.as_str(), i as u32))
        .collect();
    let mut codes = Vec::with_capacity(ds.n());
    for row in 0..ds.n() {
        let group = ds.group_of(row)?;
        let label = assignments
            .get(&group)
            .ok_or_else(|| Error::invalid(format!("group {group} has no cluster assignment")))?;
        codes.push(position[label.to_string().as_str()]);
    }
    ds.with_column(
        ColumnSpec {
            name: name.to_string(),
            kind: ColumnKind::Discrete,
            role: ColumnRole::Cluster,
        },
        Column::Discrete { levels, codes },
    )
}
