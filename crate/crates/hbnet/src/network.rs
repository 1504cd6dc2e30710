//! Node roles and the fitted network container produced by structure search
//! and consumed by inference.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ColumnKind, ColumnRole, Schema};
use crate::error::{Error, Result};
use crate::graph::Dag;
use crate::models::LocalModel;

/// The distribution family fitted at a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    /// Categorical root; the cluster variable.
    MultinomialRoot,
    /// Gaussian with fixed effects only.
    FixedGaussian,
    /// Gaussian with a per-cluster random intercept and slopes.
    MixedGaussian,
    /// Mixed Gaussian whose residual sd scales with a power of the mean.
    HeteroMixedGaussian,
}

impl Family {
    pub fn is_mixed(self) -> bool {
        matches!(self, Family::MixedGaussian | Family::HeteroMixedGaussian)
    }
}

/// How one node is modelled during search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRole {
    pub node: String,
    pub family: Family,
    /// True when the cluster variable is a mandatory parent (mixed
    /// families); such arcs are whitelisted automatically.
    pub forced_cluster_parent: bool,
}

/// Derives the standard role assignment from a schema: the target is
/// heteroscedastic mixed, phenological columns are mixed, weather columns
/// are fixed, and the cluster column is the multinomial root.
pub fn roles_from_schema(schema: &Schema) -> Result<Vec<NodeRole>> {
    let cluster = schema
        .cluster()
        .ok_or_else(|| Error::Schema("no cluster column; derive or supply labels first".into()))?;
    let mut roles = Vec::new();
    for spec in schema.node_columns() {
        let (family, forced) = match spec.role {
            ColumnRole::Target => (Family::HeteroMixedGaussian, true),
            ColumnRole::Phenological => (Family::MixedGaussian, true),
            ColumnRole::Weather => (Family::FixedGaussian, false),
            ColumnRole::Cluster => (Family::MultinomialRoot, false),
            ColumnRole::GroupKey => unreachable!("group keys are not node columns"),
        };
        roles.push(NodeRole {
            node: spec.name.clone(),
            family,
            forced_cluster_parent: forced,
        });
    }
    debug_assert!(roles.iter().any(|r| r.node == cluster.name));
    Ok(roles)
}

/// The complete-pooling baseline: every mixed family is downgraded to a
/// fixed-effect Gaussian, so cluster membership no longer informs any
/// continuous node.
pub fn baseline_roles(roles: &[NodeRole]) -> Vec<NodeRole> {
    roles
        .iter()
        .map(|r| NodeRole {
            node: r.node.clone(),
            family: if r.family.is_mixed() {
                Family::FixedGaussian
            } else {
                r.family
            },
            forced_cluster_parent: false,
        })
        .collect()
}

/// Checks the role invariants against the schema: one multinomial root on
/// the cluster column, the heteroscedastic family only on the target,
/// forced cluster parents exactly on the mixed families, and every role
/// naming a node column of the right kind.
pub fn validate_roles(roles: &[NodeRole], schema: &Schema) -> Result<()> {
    let mut seen_root = 0usize;
    for role in roles {
        let spec = schema.spec(&role.node)?;
        match role.family {
            Family::MultinomialRoot => {
                seen_root += 1;
                if spec.kind != ColumnKind::Discrete || spec.role != ColumnRole::Cluster {
                    return Err(Error::Schema(format!(
                        "multinomial root {} must be the discrete cluster column",
                        role.node
                    )));
                }
            }
            Family::HeteroMixedGaussian => {
                if spec.role != ColumnRole::Target {
                    return Err(Error::Schema(format!(
                        "heteroscedastic family is reserved for the target, not {}",
                        role.node
                    )));
                }
            }
            Family::FixedGaussian | Family::MixedGaussian => {
                if spec.kind != ColumnKind::Continuous {
                    return Err(Error::Schema(format!(
                        "Gaussian family on discrete column {}",
                        role.node
                    )));
                }
            }
        }
        if role.forced_cluster_parent != role.family.is_mixed() {
            return Err(Error::Schema(format!(
                "node {}: forced cluster parent must accompany exactly the mixed families",
                role.node
            )));
        }
    }
    if seen_root != 1 {
        return Err(Error::Schema(format!(
            "expected exactly one multinomial root, found {seen_root}"
        )));
    }
    let mut names: Vec<&str> = roles.iter().map(|r| r.node.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != roles.len() {
        return Err(Error::Schema("duplicate node in role list".into()));
    }
    Ok(())
}

/// One node of a fitted network. `parents` are name-sorted; the design
/// covariates of `model` follow the same order with the cluster parent
/// skipped (it acts as the grouping factor instead).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNode {
    pub role: ColumnRole,
    pub parents: Vec<String>,
    pub score: f64,
    pub model: LocalModel,
}

/// A learned structure with fitted local models; the unit serialized as
/// `model.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedNetwork {
    pub target: String,
    pub cluster: String,
    /// Rows the network was fitted on.
    pub n: usize,
    /// Network score: the sum of per-node scores.
    pub score: f64,
    /// Node declaration order; drives topological tie-breaks.
    pub node_order: Vec<String>,
    pub nodes: BTreeMap<String, FittedNode>,
}

impl FittedNetwork {
    /// Rebuilds the DAG from the stored parent sets.
    pub fn dag(&self) -> Result<Dag> {
        let mut dag = Dag::new(self.node_order.clone())?;
        for name in &self.node_order {
            let node = self
                .nodes
                .get(name)
                .ok_or_else(|| Error::UnknownNode(name.clone()))?;
            for parent in &node.parents {
                if !dag.try_add_arc(parent, name)? {
                    return Err(Error::invalid(format!(
                        "stored parents are cyclic at {parent}->{name}"
                    )));
                }
            }
        }
        Ok(dag)
    }

    pub fn node(&self, name: &str) -> Result<&FittedNode> {
        self.nodes
            .get(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    /// Cluster levels carried by the multinomial root.
    pub fn cluster_levels(&self) -> Result<&[String]> {
        match &self.node(&self.cluster)?.model {
            LocalModel::MultinomialRoot(m) => Ok(&m.levels),
            _ => Err(Error::invalid("cluster node is not a multinomial root")),
        }
    }

    /// Non-cluster parents in design order (name-sorted).
    pub fn design_parents(&self, name: &str) -> Result<Vec<&str>> {
        Ok(self
            .node(name)?
            .parents
            .iter()
            .filter(|p| **p != self.cluster)
            .map(|p| p.as_str())
            .collect())
    }

    /// Deterministic pretty JSON rendering.
    pub fn to_json(&self) -> Result<String> {
        let mut out = serde_json::to_string_pretty(self)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
