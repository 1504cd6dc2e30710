//! Synthetic data generation from a known hierarchical network, so that
//! learning and inference can be tested against ground truth.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Column, ColumnKind, ColumnRole, ColumnSpec, Dataset, Schema};
use crate::error::{Error, Result};
use crate::graph::Dag;
use crate::network::{Family, NodeRole};

/// Default rows per synthetic group (the group-key granularity).
pub const DEFAULT_ROWS_PER_GROUP: usize = 25;

fn default_rows_per_group() -> usize {
    DEFAULT_ROWS_PER_GROUP
}

/// Generating parameters of one continuous node. `betas` align with the
/// node's non-cluster parents sorted by name (the same design order the
/// learner uses). A node with `re_cov` draws a correlated random intercept
/// and slopes per cluster; one with `sigma2_b` draws a random intercept and
/// scales its noise as `sqrt(sigma2) * |mean|^theta_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeParams {
    #[serde(default)]
    pub intercept: f64,
    #[serde(default)]
    pub betas: Vec<f64>,
    #[serde(default)]
    pub sigma2: f64,
    /// Row-major lower triangle of the random-effect covariance
    /// (dimension `1 + betas.len()`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub re_cov: Option<Vec<f64>>,
    /// Random-intercept variance of the heteroscedastic family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2_b: Option<f64>,
    /// Per-cluster variance exponents of the heteroscedastic family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta: Option<Vec<f64>>,
}

/// A ground-truth generating network: structure, per-node roles and
/// parameters, and the cluster distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    /// Node declaration order (drives topological tie-breaks downstream).
    pub nodes: Vec<String>,
    /// Arcs as `[parent, child]` pairs.
    pub arcs: Vec<(String, String)>,
    /// Dataset role of each node: exactly one `cluster` and one `target`.
    pub column_roles: BTreeMap<String, ColumnRole>,
    /// Parameters for every non-cluster node.
    pub params: BTreeMap<String, NodeParams>,
    /// Marginal cluster probabilities; the length defines the number of
    /// cluster levels.
    pub cluster_probs: Vec<f64>,
    /// Rows per synthetic group when labelling the group-key column.
    #[serde(default = "default_rows_per_group")]
    pub rows_per_group: usize,
}

impl NetSpec {
    /// The structure as a DAG (validates acyclicity).
    pub fn dag(&self) -> Result<Dag> {
        let mut dag = Dag::new(self.nodes.clone())?;
        for (parent, child) in &self.arcs {
            if !dag.try_add_arc(parent, child)? {
                return Err(Error::invalid(format!(
                    "generating arcs are cyclic at {parent}->{child}"
                )));
            }
        }
        Ok(dag)
    }

    /// Number of cluster levels.
    pub fn n_clusters(&self) -> usize {
        self.cluster_probs.len()
    }

    /// The cluster node's name.
    pub fn cluster_node(&self) -> Result<&str> {
        let mut found = None;
        for (name, role) in &self.column_roles {
            if *role == ColumnRole::Cluster {
                if found.is_some() {
                    return Err(Error::Schema("more than one cluster node".into()));
                }
                found = Some(name.as_str());
            }
        }
        found.ok_or_else(|| Error::Schema("no cluster node in the generating spec".into()))
    }

    /// The target node's name.
    pub fn target_node(&self) -> Result<&str> {
        self.column_roles
            .iter()
            .find(|(_, r)| **r == ColumnRole::Target)
            .map(|(n, _)| n.as_str())
            .ok_or_else(|| Error::Schema("no target node in the generating spec".into()))
    }

    /// Cluster level labels, `c1..cJ`.
    pub fn cluster_levels(&self) -> Vec<String> {
        (1..=self.n_clusters()).map(|j| format!("c{j}")).collect()
    }

    /// Family implied by a node's parameters: correlated random effects
    /// give the mixed family, a scalar intercept variance plus exponents
    /// give the heteroscedastic family, neither gives the fixed family.
    pub fn family_of(&self, node: &str) -> Result<Family> {
        if self.cluster_node().is_ok_and(|c| c == node) {
            return Ok(Family::MultinomialRoot);
        }
        let p = self
            .params
            .get(node)
            .ok_or_else(|| Error::UnknownNode(node.to_string()))?;
        Ok(match (&p.re_cov, &p.sigma2_b) {
            (Some(_), None) => Family::MixedGaussian,
            (None, Some(_)) => Family::HeteroMixedGaussian,
            (None, None) => Family::FixedGaussian,
            (Some(_), Some(_)) => {
                return Err(Error::Schema(format!(
                    "node {node} declares both correlated and scalar random effects"
                )))
            }
        })
    }

    /// Node roles for learning on generated data: families as implied by
    /// the parameters, cluster parents forced for the mixed families.
    pub fn roles(&self) -> Result<Vec<NodeRole>> {
        self.nodes
            .iter()
            .map(|name| {
                let family = self.family_of(name)?;
                Ok(NodeRole {
                    node: name.clone(),
                    forced_cluster_parent: family.is_mixed(),
                    family,
                })
            })
            .collect()
    }

    /// Design parents of a node: non-cluster parents sorted by name.
    fn design_parents<'a>(&self, dag: &'a Dag, node: &str, cluster: &str) -> Vec<&'a str> {
        let mut parents: Vec<&str> = dag
            .parents_of(node)
            .expect("node exists")
            .into_iter()
            .filter(|p| *p != cluster)
            .collect();
        parents.sort_unstable();
        parents
    }

    /// Full structural validation.
    pub fn validate(&self) -> Result<()> {
        let dag = self.dag()?;
        let cluster = self.cluster_node()?.to_string();
        self.target_node()?;
        if self.nodes.iter().any(|n| n == "group") {
            return Err(Error::Schema(
                "node name 'group' collides with the synthetic group-key column".into(),
            ));
        }
        for name in &self.nodes {
            if !self.column_roles.contains_key(name) {
                return Err(Error::Schema(format!("node {name} has no column role")));
            }
        }
        for name in self.column_roles.keys() {
            if !self.nodes.contains(name) {
                return Err(Error::UnknownNode(name.clone()));
            }
        }
        let j = self.n_clusters();
        if j == 0 {
            return Err(Error::Schema("cluster_probs is empty".into()));
        }
        if self.cluster_probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Schema("cluster probabilities must be >= 0".into()));
        }
        let total: f64 = self.cluster_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Schema(format!(
                "cluster probabilities sum to {total}, expected 1"
            )));
        }
        if self.rows_per_group == 0 {
            return Err(Error::Schema("rows_per_group must be >= 1".into()));
        }
        if !dag.parents_of(&cluster)?.is_empty() {
            return Err(Error::Schema("the cluster node must be a root".into()));
        }
        for name in &self.nodes {
            if *name == cluster {
                continue;
            }
            let family = self.family_of(name)?;
            let params = &self.params[name];
            let design = self.design_parents(&dag, name, &cluster);
            if params.betas.len() != design.len() {
                return Err(Error::LengthMismatch {
                    expected: design.len(),
                    got: params.betas.len(),
                });
            }
            if !(params.sigma2 >= 0.0) {
                return Err(Error::Schema(format!("node {name}: sigma2 must be >= 0")));
            }
            let has_cluster_parent = dag.parents_of(name)?.contains(&cluster.as_str());
            if has_cluster_parent != family.is_mixed() {
                return Err(Error::Schema(format!(
                    "node {name}: a cluster arc must accompany exactly the random-effect families"
                )));
            }
            match family {
                Family::MixedGaussian => {
                    let q = 1 + params.betas.len();
                    let tri = params.re_cov.as_ref().unwrap();
                    if tri.len() != q * (q + 1) / 2 {
                        return Err(Error::LengthMismatch {
                            expected: q * (q + 1) / 2,
                            got: tri.len(),
                        });
                    }
                    re_cov_sqrt(tri, q)?;
                    if params.theta.is_some() {
                        return Err(Error::Schema(format!(
                            "node {name}: exponents require the scalar random-intercept family"
                        )));
                    }
                }
                Family::HeteroMixedGaussian => {
                    if !(params.sigma2_b.unwrap() >= 0.0) {
                        return Err(Error::Schema(format!(
                            "node {name}: sigma2_b must be >= 0"
                        )));
                    }
                    let theta = params.theta.as_ref().ok_or_else(|| {
                        Error::Schema(format!("node {name}: missing per-cluster exponents"))
                    })?;
                    if theta.len() != j {
                        return Err(Error::LengthMismatch {
                            expected: j,
                            got: theta.len(),
                        });
                    }
                }
                Family::FixedGaussian => {
                    if params.theta.is_some() {
                        return Err(Error::Schema(format!(
                            "node {name}: exponents require a random intercept"
                        )));
                    }
                }
                Family::MultinomialRoot => unreachable!("cluster handled above"),
            }
        }
        Ok(())
    }

    /// Schema of generated datasets: the nodes in declaration order plus a
    /// trailing `group` key column.
    pub fn schema(&self) -> Result<Schema> {
        let mut specs = Vec::with_capacity(self.nodes.len() + 1);
        for name in &self.nodes {
            let role = self.column_roles[name];
            let kind = if role == ColumnRole::Cluster {
                ColumnKind::Discrete
            } else {
                ColumnKind::Continuous
            };
            specs.push(ColumnSpec {
                name: name.clone(),
                kind,
                role,
            });
        }
        specs.push(ColumnSpec {
            name: "group".into(),
            kind: ColumnKind::Discrete,
            role: ColumnRole::GroupKey,
        });
        Schema::new(specs)
    }
}

/// Matrix square root of a PSD covariance given as a row-major lower
/// triangle: eigendecomposition with negative eigenvalues clamped to zero.
/// Errors when the matrix is materially non-PSD.
fn re_cov_sqrt(tri: &[f64], q: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(q, q);
    let mut k = 0;
    for i in 0..q {
        for j in 0..=i {
            m[(i, j)] = tri[k];
            m[(j, i)] = tri[k];
            k += 1;
        }
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let eig = m.symmetric_eigen();
    let mut root = DMatrix::zeros(q, q);
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-9 * scale {
            return Err(Error::Schema(
                "random-effect covariance is not positive semidefinite".into(),
            ));
        }
        let s = lambda.max(0.0).sqrt();
        for r in 0..q {
            root[(r, idx)] = eig.eigenvectors[(r, idx)] * s;
        }
    }
    Ok(root)
}

/// Generates `n_per_cluster[j]` rows for each cluster level `j` by
/// ancestral sampling in topological order. Random effects are drawn once
/// per cluster per generation; rows inside a cluster share them. The
/// group-key column chunks each cluster's rows into groups of
/// `rows_per_group`.
pub fn generate(spec: &NetSpec, n_per_cluster: &[usize], seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let j = spec.n_clusters();
    if n_per_cluster.len() != j {
        return Err(Error::LengthMismatch {
            expected: j,
            got: n_per_cluster.len(),
        });
    }
    let dag = spec.dag()?;
    let cluster = spec.cluster_node()?.to_string();
    let topo: Vec<String> = dag
        .topological_order()
        .into_iter()
        .map(String::from)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random effects per cluster, drawn up front in (topo node, cluster)
    // order. Mixed nodes get a q-vector, hetero nodes a scalar intercept.
    let mut effects: BTreeMap<&str, Vec<DVector<f64>>> = BTreeMap::new();
    for name in &topo {
        if *name == cluster {
            continue;
        }
        let params = &spec.params[name];
        match spec.family_of(name)? {
            Family::MixedGaussian => {
                let q = 1 + params.betas.len();
                let root = re_cov_sqrt(params.re_cov.as_ref().unwrap(), q)?;
                let draws = (0..j)
                    .map(|_| {
                        let z = DVector::from_fn(q, |_, _| rng.sample::<f64, _>(StandardNormal));
                        &root * z
                    })
                    .collect();
                effects.insert(name, draws);
            }
            Family::HeteroMixedGaussian => {
                let sd = params.sigma2_b.unwrap().sqrt();
                let draws = (0..j)
                    .map(|_| {
                        DVector::from_element(
                            1,
                            sd * rng.sample::<f64, _>(StandardNormal),
                        )
                    })
                    .collect();
                effects.insert(name, draws);
            }
            _ => {}
        }
    }

    let n_total: usize = n_per_cluster.iter().sum();
    let mut values: BTreeMap<&str, Vec<f64>> = topo
        .iter()
        .filter(|n| **n != cluster)
        .map(|n| (n.as_str(), Vec::with_capacity(n_total)))
        .collect();
    let mut cluster_codes: Vec<u32> = Vec::with_capacity(n_total);
    let mut group_levels: Vec<String> = Vec::new();
    let mut group_codes: Vec<u32> = Vec::with_capacity(n_total);

    for (cluster_idx, &n_rows) in n_per_cluster.iter().enumerate() {
        for row_in_cluster in 0..n_rows {
            cluster_codes.push(cluster_idx as u32);
            let group_in_cluster = row_in_cluster / spec.rows_per_group;
            if row_in_cluster % spec.rows_per_group == 0 {
                group_levels.push(format!("g{}_{}", cluster_idx + 1, group_in_cluster + 1));
            }
            group_codes.push((group_levels.len() - 1) as u32);
            let mut row: BTreeMap<&str, f64> = BTreeMap::new();
            for name in &topo {
                if *name == cluster {
                    continue;
                }
                let params = &spec.params[name];
                let design = spec.design_parents(&dag, name, &cluster);
                let mut mean = params.intercept;
                for (k, parent) in design.iter().enumerate() {
                    mean += params.betas[k] * row[parent];
                }
                let sd;
                match spec.family_of(name)? {
                    Family::MixedGaussian => {
                        let b = &effects[name.as_str()][cluster_idx];
                        mean += b[0];
                        for (k, parent) in design.iter().enumerate() {
                            mean += b[k + 1] * row[parent];
                        }
                        sd = params.sigma2.sqrt();
                    }
                    Family::HeteroMixedGaussian => {
                        mean += effects[name.as_str()][cluster_idx][0];
                        let theta = params.theta.as_ref().unwrap()[cluster_idx];
                        sd = params.sigma2.sqrt() * mean.abs().powf(theta);
                    }
                    _ => sd = params.sigma2.sqrt(),
                }
                let value = mean + sd * rng.sample::<f64, _>(StandardNormal);
                row.insert(name, value);
            }
            for (name, value) in row {
                values.get_mut(name).unwrap().push(value);
            }
        }
    }

    let schema = spec.schema()?;
    let mut columns = Vec::with_capacity(schema.len());
    for col_spec in schema.columns() {
        if col_spec.name == "group" {
            columns.push(Column::Discrete {
                levels: group_levels.clone(),
                codes: group_codes.clone(),
            });
        } else if col_spec.name == cluster {
            columns.push(Column::Discrete {
                levels: spec.cluster_levels(),
                codes: cluster_codes.clone(),
            });
        } else {
            columns.push(Column::Continuous(values[col_spec.name.as_str()].clone()));
        }
    }
    Dataset::new(schema, columns)
}

/// A 6-node demonstration network: two exogenous drivers, two intermediate
/// nodes with cluster-specific random effects, and a heteroscedastic target
/// depending on both intermediates — each node drawn from the family the
/// learner fits for its role. Strong coefficients relative to the noise, so
/// structure learning can recover the skeleton.
pub fn demo_spec(n_clusters: usize) -> NetSpec {
    let uniform = 1.0 / n_clusters as f64;
    let mut column_roles = BTreeMap::new();
    column_roles.insert("cluster".to_string(), ColumnRole::Cluster);
    column_roles.insert("w1".to_string(), ColumnRole::Weather);
    column_roles.insert("w2".to_string(), ColumnRole::Weather);
    column_roles.insert("p1".to_string(), ColumnRole::Phenological);
    column_roles.insert("p2".to_string(), ColumnRole::Phenological);
    column_roles.insert("y".to_string(), ColumnRole::Target);
    let mut params = BTreeMap::new();
    params.insert(
        "w1".to_string(),
        NodeParams {
            intercept: 0.0,
            betas: vec![],
            sigma2: 1.0,
            re_cov: None,
            sigma2_b: None,
            theta: None,
        },
    );
    params.insert(
        "w2".to_string(),
        NodeParams {
            intercept: 0.0,
            betas: vec![],
            sigma2: 1.0,
            re_cov: None,
            sigma2_b: None,
            theta: None,
        },
    );
    params.insert(
        "p1".to_string(),
        NodeParams {
            intercept: 1.0,
            // Design order: [w1].
            betas: vec![1.5],
            sigma2: 0.25,
            // q=2 lower triangle: var(b0)=1, cov=0, var(b1)=0.04.
            re_cov: Some(vec![1.0, 0.0, 0.04]),
            sigma2_b: None,
            theta: None,
        },
    );
    params.insert(
        "p2".to_string(),
        NodeParams {
            intercept: -1.0,
            // Design order: [p1, w2].
            betas: vec![0.8, 1.2],
            sigma2: 0.25,
            re_cov: Some(vec![1.0, 0.0, 0.04, 0.0, 0.0, 0.04]),
            sigma2_b: None,
            theta: None,
        },
    );
    params.insert(
        "y".to_string(),
        NodeParams {
            // Far from zero so relative-error metrics stay stable.
            intercept: 20.0,
            // Design order: [p1, p2].
            betas: vec![1.2, 1.0],
            sigma2: 0.25,
            re_cov: None,
            // Random intercept plus a mild power-of-the-mean variance that
            // alternates in sign across clusters.
            sigma2_b: Some(1.0),
            theta: Some(
                (0..n_clusters)
                    .map(|g| if g % 2 == 0 { 0.1 } else { -0.1 })
                    .collect(),
            ),
        },
    );
    NetSpec {
        nodes: vec![
            "cluster".into(),
            "w1".into(),
            "w2".into(),
            "p1".into(),
            "p2".into(),
            "y".into(),
        ],
        arcs: vec![
            ("w1".into(), "p1".into()),
            ("p1".into(), "p2".into()),
            ("w2".into(), "p2".into()),
            ("p1".into(), "y".into()),
            ("p2".into(), "y".into()),
            ("cluster".into(), "p1".into()),
            ("cluster".into(), "p2".into()),
            ("cluster".into(), "y".into()),
        ],
        column_roles,
        params,
        cluster_probs: vec![uniform; n_clusters],
        rows_per_group: DEFAULT_ROWS_PER_GROUP,
    }
}
