//! Hill-climbing structure search over the decomposable per-node score,
//! with a fit cache and the stepwise parent-elimination audit.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use nalgebra::DMatrix;

use crate::data::{ColumnKind, Dataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::graph::{ConstraintSet, Dag, Move, MoveKind, MoveOutcome};
use crate::models::{
    fit_lme, fit_lme_hetero, fit_multinomial, fit_ols, node_bic, Grouping, LocalModel,
};
use crate::network::{validate_roles, Family, FittedNetwork, FittedNode, NodeRole};

/// Score differences at or below this resolution count as ties; candidate
/// moves tied for the best difference resolve lexicographically by
/// (move kind, parent, child).
pub const SCORE_EPS: f64 = 1e-9;

/// Default cap on the number of non-cluster parents per node.
pub const DEFAULT_MAX_PARENTS: usize = 8;

/// Search budget and limits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SearchConfig {
    /// Maximum non-cluster parents per node.
    pub max_parents: usize,
    /// Safety cap on accepted moves; the search normally stops on its own.
    pub max_iter: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            max_parents: DEFAULT_MAX_PARENTS,
            max_iter: 500,
        }
    }
}

/// One accepted move in the search trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub iteration: usize,
    pub mv: Move,
    pub delta: f64,
    /// Network score after applying the move.
    pub total: f64,
}

/// A fitted local model together with its score.
#[derive(Debug, Clone)]
pub struct ScoredFit {
    pub score: f64,
    pub model: LocalModel,
}

/// Memo of (node, sorted parent set) -> fitted model and score. The fitters
/// are deterministic, so a hit is bit-identical to a fresh fit; concurrent
/// fits of the same key are idempotent (first insert wins).
#[derive(Debug, Default)]
pub struct ScoreCache {
    entries: Mutex<HashMap<(String, Vec<String>), ScoredFit>>,
    fits: AtomicUsize,
    hits: AtomicUsize,
}

impl ScoreCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of actual model fits performed.
    pub fn fit_count(&self) -> usize {
        self.fits.load(Ordering::Relaxed)
    }

    /// Number of lookups answered from the cache.
    pub fn hit_count(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    fn get_or_fit(
        &self,
        node: &str,
        parents: &[String],
        fit: impl FnOnce() -> Result<ScoredFit>,
    ) -> Result<ScoredFit> {
        let key = (node.to_string(), parents.to_vec());
        if let Some(entry) = self.entries.lock().unwrap().get(&key) {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(entry.clone());
        }
        let fitted = fit()?;
        self.fits.fetch_add(1, Ordering::Relaxed);
        let mut entries = self.entries.lock().unwrap();
        let entry = entries.entry(key).or_insert(fitted);
        Ok(entry.clone())
    }
}

/// One-hot encodes a discrete column, dropping the first level; returns the
/// indicator columns and their `name=level` labels.
pub(crate) fn one_hot_columns(
    name: &str,
    levels: &[String],
    codes: &[u32],
) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut cols = Vec::new();
    let mut labels = Vec::new();
    for (i, level) in levels.iter().enumerate().skip(1) {
        cols.push(
            codes
                .iter()
                .map(|&c| if c as usize == i { 1.0 } else { 0.0 })
                .collect(),
        );
        labels.push(format!("{name}={level}"));
    }
    (cols, labels)
}

/// Assembles the regression design for `node` from its sorted non-cluster
/// parents: continuous parents contribute one column each, discrete parents
/// are one-hot encoded with the first level dropped.
fn design_for(
    ds: &Dataset,
    parents: &[String],
    cluster: &str,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut cols: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for parent in parents {
        if parent == cluster {
            continue;
        }
        match ds.schema().spec(parent)?.kind {
            ColumnKind::Continuous => {
                cols.push(ds.continuous(parent)?.to_vec());
                names.push(parent.clone());
            }
            ColumnKind::Discrete => {
                let (levels, codes) = ds.discrete(parent)?;
                let (one_hot, labels) = one_hot_columns(parent, levels, codes);
                cols.extend(one_hot);
                names.extend(labels);
            }
        }
    }
    let n = ds.n();
    let x = DMatrix::from_fn(n, cols.len(), |r, c| cols[c][r]);
    Ok((x, names))
}

/// Context shared by every scoring call of one search.
struct Scorer<'a> {
    ds: &'a Dataset,
    roles: BTreeMap<&'a str, &'a NodeRole>,
    cluster: String,
    grouping: Grouping,
    cache: &'a ScoreCache,
}

impl<'a> Scorer<'a> {
    fn new(ds: &'a Dataset, roles: &'a [NodeRole], cache: &'a ScoreCache) -> Result<Self> {
        validate_roles(roles, ds.schema())?;
        let cluster = roles
            .iter()
            .find(|r| r.family == Family::MultinomialRoot)
            .expect("validated: exactly one root")
            .node
            .clone();
        let (levels, codes) = ds.discrete(&cluster)?;
        let grouping = Grouping::from_column(levels, codes)?;
        Ok(Scorer {
            ds,
            roles: roles.iter().map(|r| (r.node.as_str(), r)).collect(),
            cluster,
            grouping,
            cache,
        })
    }

    fn role(&self, node: &str) -> Result<&NodeRole> {
        self.roles
            .get(node)
            .copied()
            .ok_or_else(|| Error::UnknownNode(node.to_string()))
    }

    /// Sorted-parents scored fit for `node`, cached.
    fn fitted(&self, node: &str, parents: &[String]) -> Result<ScoredFit> {
        let mut sorted = parents.to_vec();
        sorted.sort_unstable();
        let role = self.role(node)?;
        self.cache.get_or_fit(node, &sorted, || {
            let model = self.fit_family(role.family, node, &sorted)?;
            let score = node_bic(&model, self.ds.n());
            Ok(ScoredFit { score, model })
        })
    }

    fn fit_family(&self, family: Family, node: &str, parents: &[String]) -> Result<LocalModel> {
        match family {
            Family::MultinomialRoot => {
                if !parents.is_empty() {
                    return Err(Error::invalid(format!(
                        "the discrete root {node} cannot have parents"
                    )));
                }
                let (levels, codes) = self.ds.discrete(node)?;
                Ok(LocalModel::MultinomialRoot(fit_multinomial(levels, codes)?))
            }
            Family::FixedGaussian => {
                let y = self.ds.continuous(node)?;
                let (x, names) = design_for(self.ds, parents, &self.cluster)?;
                Ok(LocalModel::FixedGaussian(fit_ols(y, &x, &names)?))
            }
            Family::MixedGaussian => {
                let y = self.ds.continuous(node)?;
                let (x, names) = design_for(self.ds, parents, &self.cluster)?;
                Ok(LocalModel::MixedGaussian(fit_lme(
                    y,
                    &x,
                    &names,
                    &self.grouping,
                )?))
            }
            Family::HeteroMixedGaussian => {
                let y = self.ds.continuous(node)?;
                let (x, names) = design_for(self.ds, parents, &self.cluster)?;
                Ok(LocalModel::HeteroMixedGaussian(fit_lme_hetero(
                    y,
                    &x,
                    &names,
                    &self.grouping,
                )?))
            }
        }
    }
}

/// Fits `node` given `parents` and returns its score contribution,
/// consulting (and filling) the cache.
pub fn score_node(
    node: &str,
    parents: &[String],
    ds: &Dataset,
    roles: &[NodeRole],
    cache: &ScoreCache,
) -> Result<f64> {
    let scorer = Scorer::new(ds, roles, cache)?;
    Ok(scorer.fitted(node, parents)?.score)
}

/// Builds the automatic constraints implied by the roles: the cluster root
/// has no parents, arcs from the root into fixed-effect (weather) nodes are
/// forbidden, and arcs from the root into each forced-cluster-parent node
/// are forced.
pub fn auto_constraints(roles: &[NodeRole]) -> Result<ConstraintSet> {
    let cluster = roles
        .iter()
        .find(|r| r.family == Family::MultinomialRoot)
        .ok_or_else(|| Error::Schema("no multinomial root among the roles".into()))?
        .node
        .clone();
    let mut blacklist = Vec::new();
    let mut whitelist = Vec::new();
    for role in roles {
        if role.node == cluster {
            continue;
        }
        blacklist.push((role.node.clone(), cluster.clone()));
        if role.forced_cluster_parent {
            whitelist.push((cluster.clone(), role.node.clone()));
        } else {
            blacklist.push((cluster.clone(), role.node.clone()));
        }
    }
    ConstraintSet::new(blacklist, whitelist)
}

fn non_cluster_parent_count(dag: &Dag, node: &str, cluster: &str) -> usize {
    dag.parents_of(node)
        .map(|ps| ps.iter().filter(|p| **p != cluster).count())
        .unwrap_or(0)
}

struct ScoredMove {
    dag: Dag,
    delta: f64,
    rescored: Vec<(String, f64)>,
}

/// Steepest-ascent hill climbing. Every iteration scores all legal
/// add/delete/reverse moves (in parallel), applies the single best strictly
/// improving one, and stops when none improves. Candidate fits that fail
/// (e.g. a collinear design) disqualify their move rather than aborting the
/// search.
pub fn hill_climb(
    ds: &Dataset,
    roles: &[NodeRole],
    user_constraints: &ConstraintSet,
    config: &SearchConfig,
) -> Result<(Dag, FittedNetwork, Vec<TraceStep>)> {
    let cache = ScoreCache::new();
    let scorer = Scorer::new(ds, roles, &cache)?;
    let constraints = auto_constraints(roles)?.merged(user_constraints)?;

    // Node order follows the schema; whitelisted arcs seed the graph.
    let node_names: Vec<String> = ds
        .schema()
        .node_columns()
        .iter()
        .map(|s| s.name.clone())
        .collect();
    let mut dag = Dag::new(node_names.clone())?;
    for (p, c) in constraints.whitelist() {
        if !dag.try_add_arc(p, c)? {
            return Err(Error::CyclicWhitelist);
        }
    }

    let mut scores: BTreeMap<String, f64> = BTreeMap::new();
    for node in &node_names {
        let parents: Vec<String> = dag
            .parents_of(node)?
            .iter()
            .map(|s| s.to_string())
            .collect();
        scores.insert(node.clone(), scorer.fitted(node, &parents)?.score);
    }
    let mut total: f64 = scores.values().sum();
    let mut trace: Vec<TraceStep> = Vec::new();

    for iteration in 1..=config.max_iter {
        let candidates = enumerate_moves(&dag, &scorer.cluster, config.max_parents);
        let results = exec::map_slice(&candidates, |mv| {
            evaluate_move(mv, &dag, &constraints, &scorer, &scores)
        });
        let mut best: Option<(usize, f64)> = None;
        for (i, result) in results.iter().enumerate() {
            if let Some(scored) = result {
                let improves = match best {
                    None => scored.delta > SCORE_EPS,
                    Some((_, best_delta)) => scored.delta > best_delta + SCORE_EPS,
                };
                if improves {
                    best = Some((i, scored.delta));
                }
            }
        }
        let Some((chosen, _)) = best else { break };
        let scored = results.into_iter().nth(chosen).flatten().unwrap();
        dag = scored.dag;
        for (node, score) in scored.rescored {
            scores.insert(node, score);
        }
        total += scored.delta;
        trace.push(TraceStep {
            iteration,
            mv: candidates[chosen].clone(),
            delta: scored.delta,
            total,
        });
    }

    let network = assemble_network(ds, &scorer, &dag, &scores, total)?;
    Ok((dag, network, trace))
}

/// All structurally plausible moves in lexicographic (kind, parent, child)
/// order; constraint and cycle legality is decided during evaluation.
fn enumerate_moves(dag: &Dag, cluster: &str, max_parents: usize) -> Vec<Move> {
    let mut sorted_names: Vec<&str> = dag.node_names().iter().map(|s| s.as_str()).collect();
    sorted_names.sort_unstable();
    let mut moves = Vec::new();
    for &p in &sorted_names {
        for &c in &sorted_names {
            if p != c
                && !dag.has_arc(p, c)
                && (p == cluster || non_cluster_parent_count(dag, c, cluster) < max_parents)
            {
                moves.push(Move::add(p, c));
            }
        }
    }
    let arcs = dag.arcs();
    for (p, c) in &arcs {
        moves.push(Move::delete(p.clone(), c.clone()));
    }
    for (p, c) in &arcs {
        // Reversal gives `p` the new parent `c`.
        if c == cluster || non_cluster_parent_count(dag, p, cluster) < max_parents {
            moves.push(Move::reverse(p.clone(), c.clone()));
        }
    }
    moves
}

/// Scores one candidate move: `None` when the move is rejected by the
/// constraints, would create a cycle, or its refit fails.
fn evaluate_move(
    mv: &Move,
    dag: &Dag,
    constraints: &ConstraintSet,
    scorer: &Scorer<'_>,
    scores: &BTreeMap<String, f64>,
) -> Option<ScoredMove> {
    let outcome = dag.apply_move(mv, constraints).ok()?;
    let MoveOutcome::Accepted(next) = outcome else {
        return None;
    };
    let affected: Vec<&String> = match mv.kind {
        MoveKind::Add | MoveKind::Delete => vec![&mv.child],
        MoveKind::Reverse => vec![&mv.child, &mv.parent],
    };
    let mut delta = 0.0;
    let mut rescored = Vec::with_capacity(affected.len());
    for node in affected {
        let parents: Vec<String> = next
            .parents_of(node)
            .ok()?
            .iter()
            .map(|s| s.to_string())
            .collect();
        let fit = scorer.fitted(node, &parents).ok()?;
        delta += fit.score - scores[node.as_str()];
        rescored.push((node.clone(), fit.score));
    }
    Some(ScoredMove {
        dag: next,
        delta,
        rescored,
    })
}

fn assemble_network(
    ds: &Dataset,
    scorer: &Scorer<'_>,
    dag: &Dag,
    scores: &BTreeMap<String, f64>,
    total: f64,
) -> Result<FittedNetwork> {
    let mut nodes = BTreeMap::new();
    for name in dag.node_names() {
        let mut parents: Vec<String> = dag
            .parents_of(name)?
            .iter()
            .map(|s| s.to_string())
            .collect();
        parents.sort_unstable();
        let fit = scorer.fitted(name, &parents)?;
        nodes.insert(
            name.clone(),
            FittedNode {
                role: ds.schema().spec(name)?.role,
                parents,
                score: scores[name],
                model: fit.model,
            },
        );
    }
    Ok(FittedNetwork {
        target: ds.schema().target().name.clone(),
        cluster: scorer.cluster.clone(),
        n: ds.n(),
        score: total,
        node_order: dag.node_names().to_vec(),
        nodes,
    })
}

/// One row of a parent-elimination audit.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EliminationRow {
    /// `None` for the full parent set.
    pub removed: Option<String>,
    pub loglik: f64,
    pub n_params: usize,
    /// Maximization convention: `loglik - n_params/2 * ln n` (larger is
    /// better).
    pub score: f64,
    /// Minimization convention: `-2 loglik + n_params * ln n` (smaller is
    /// better); equal to `-2 * score`.
    pub bic_classic: f64,
}

/// The audit tables for one node: the fit under its own (possibly mixed)
/// family, and the companion with random effects stripped.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EliminationAudit {
    pub with_random_effects: Vec<EliminationRow>,
    pub without_random_effects: Vec<EliminationRow>,
}

/// Refits `node` with the full parent set and with each non-cluster parent
/// removed one at a time (not sequentially). The companion table downgrades
/// the family to a fixed-effect Gaussian, quantifying what the random
/// effects buy.
pub fn backward_eliminate(
    node: &str,
    parents: &[String],
    ds: &Dataset,
    roles: &[NodeRole],
) -> Result<EliminationAudit> {
    let cache = ScoreCache::new();
    let scorer = Scorer::new(ds, roles, &cache)?;
    let family = scorer.role(node)?.family;
    if family == Family::MultinomialRoot {
        return Err(Error::invalid(
            "parent elimination applies to continuous nodes",
        ));
    }
    let downgraded = Family::FixedGaussian;
    let mut sorted = parents.to_vec();
    sorted.sort_unstable();

    let removable: Vec<Option<String>> = std::iter::once(None)
        .chain(
            sorted
                .iter()
                .filter(|p| **p != scorer.cluster)
                .map(|p| Some(p.clone())),
        )
        .collect();
    let table = |fam: Family| -> Result<Vec<EliminationRow>> {
        removable
            .iter()
            .map(|removed| {
                let kept: Vec<String> = sorted
                    .iter()
                    .filter(|p| Some(*p) != removed.as_ref())
                    .cloned()
                    .collect();
                let model = scorer.fit_family(fam, node, &kept)?;
                let loglik = model.loglik();
                let n_params = model.n_params();
                let score = node_bic(&model, ds.n());
                Ok(EliminationRow {
                    removed: removed.clone(),
                    loglik,
                    n_params,
                    score,
                    bic_classic: -2.0 * score,
                })
            })
            .collect()
    };
    Ok(EliminationAudit {
        with_random_effects: table(family)?,
        without_random_effects: table(downgraded)?,
    })
}
