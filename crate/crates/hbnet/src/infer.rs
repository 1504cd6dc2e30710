//! Likelihood-weighting inference over a fitted network: prediction with
//! credible quantiles, per-row imputation, two-stage cascade prediction,
//! and weighted kernel-density intervals.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ColumnKind, ColumnRole, Dataset};
use crate::error::{Error, Result};
use crate::exec;
use crate::models::{gaussian_logpdf, predict_row, LocalModel};
use crate::network::FittedNetwork;

/// Minimum effective sample size for a KDE interval.
pub const MIN_KDE_ESS: f64 = 10.0;

/// Number of abscissae in a KDE density grid.
pub const KDE_GRID_POINTS: usize = 512;

/// An observed value fixed during inference.
#[derive(Debug, Clone, PartialEq)]
pub enum EvidenceValue {
    Continuous(f64),
    Discrete(String),
}

/// Node -> observed value map.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Evidence {
    values: BTreeMap<String, EvidenceValue>,
}

impl Evidence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, node: impl Into<String>, value: EvidenceValue) -> Self {
        self.values.insert(node.into(), value);
        self
    }

    pub fn with_continuous(self, node: impl Into<String>, value: f64) -> Self {
        self.with(node, EvidenceValue::Continuous(value))
    }

    pub fn with_discrete(self, node: impl Into<String>, level: impl Into<String>) -> Self {
        self.with(node, EvidenceValue::Discrete(level.into()))
    }

    pub fn insert(&mut self, node: impl Into<String>, value: EvidenceValue) {
        self.values.insert(node.into(), value);
    }

    pub fn remove(&mut self, node: &str) -> Option<EvidenceValue> {
        self.values.remove(node)
    }

    pub fn get(&self, node: &str) -> Option<&EvidenceValue> {
        self.values.get(node)
    }

    pub fn contains(&self, node: &str) -> bool {
        self.values.contains_key(node)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &EvidenceValue)> {
        self.values.iter()
    }

    /// Checks that every evidence node exists in the network and the value
    /// type matches the node's model.
    fn validate(&self, net: &FittedNetwork) -> Result<()> {
        for (name, value) in &self.values {
            let node = net.node(name)?;
            let discrete = matches!(node.model, LocalModel::MultinomialRoot(_));
            match value {
                EvidenceValue::Continuous(v) if !v.is_finite() => {
                    return Err(Error::NonFinite(format!("evidence for {name}")));
                }
                EvidenceValue::Continuous(_) if discrete => {
                    return Err(Error::invalid(format!(
                        "node {name} is discrete; evidence must be a level label"
                    )));
                }
                EvidenceValue::Discrete(_) if !discrete => {
                    return Err(Error::invalid(format!(
                        "node {name} is continuous; evidence must be a number"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Importance-weighted draws of one query node.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    pub values: Vec<f64>,
    /// Nonnegative importance weights, rescaled so the largest is 1.
    pub weights: Vec<f64>,
    /// `(sum w)^2 / sum w^2`.
    pub ess: f64,
}

/// Point prediction with credible quantiles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub mean: f64,
    pub q10: f64,
    pub q50: f64,
    pub q90: f64,
    pub ess: f64,
}

/// Whether imputation fixes the row's cluster label as evidence or lets it
/// be sampled from the root's distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClusterPolicy {
    #[default]
    Observed,
    Marginal,
}

/// Ancestral sampling with evidence nodes fixed and weighted by their local
/// density. Particle `i` draws from stream `i` of the seeded generator, so
/// results do not depend on the parallel schedule.
pub fn likelihood_weighting(
    net: &FittedNetwork,
    evidence: &Evidence,
    query: &str,
    n_particles: usize,
    seed: u64,
) -> Result<WeightedSample> {
    if n_particles == 0 {
        return Err(Error::invalid("need at least one particle"));
    }
    if evidence.contains(query) {
        return Err(Error::invalid(format!(
            "query node {query} is already evidence"
        )));
    }
    evidence.validate(net)?;
    let query_node = net.node(query)?;
    if matches!(query_node.model, LocalModel::MultinomialRoot(_)) {
        return Err(Error::invalid(
            "the discrete root cannot be queried for a numeric posterior",
        ));
    }

    let dag = net.dag()?;
    let topo: Vec<String> = dag
        .topological_order()
        .into_iter()
        .map(|s| s.to_string())
        .collect();
    // Per-node plan: fitted node and its design parents, resolved once.
    struct Plan<'a> {
        name: &'a str,
        node: &'a crate::network::FittedNode,
        design_parents: Vec<&'a str>,
        is_cluster: bool,
    }
    let plans: Vec<Plan<'_>> = topo
        .iter()
        .map(|name| {
            let node = net.node(name)?;
            Ok(Plan {
                name: name.as_str(),
                node,
                design_parents: net.design_parents(name)?,
                is_cluster: *name == net.cluster,
            })
        })
        .collect::<Result<_>>()?;

    let draws: Vec<Result<(f64, f64)>> = exec::map_range(n_particles, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut log_weight = 0.0f64;
        let mut state: BTreeMap<&str, f64> = BTreeMap::new();
        let mut cluster_level: Option<&str> = None;
        for plan in &plans {
            if plan.is_cluster {
                let LocalModel::MultinomialRoot(root) = &plan.node.model else {
                    return Err(Error::invalid("cluster node is not a multinomial root"));
                };
                match evidence.get(plan.name) {
                    Some(EvidenceValue::Discrete(level)) => {
                        cluster_level = Some(level.as_str());
                        match root.prob(level) {
                            Some(p) => log_weight += p.ln(),
                            None => log_weight = f64::NEG_INFINITY,
                        }
                    }
                    _ => {
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut chosen = root.levels.len() - 1;
                        for (k, p) in root.probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                chosen = k;
                                break;
                            }
                        }
                        cluster_level = Some(root.levels[chosen].as_str());
                    }
                }
                continue;
            }
            let parent_values: Vec<f64> = plan
                .design_parents
                .iter()
                .map(|p| state[*p])
                .collect();
            let (mean, sd) = predict_row(&plan.node.model, &parent_values, cluster_level)?;
            let value = match evidence.get(plan.name) {
                Some(EvidenceValue::Continuous(v)) => {
                    log_weight += gaussian_logpdf(*v, mean, sd.max(f64::MIN_POSITIVE));
                    *v
                }
                _ => {
                    let z: f64 = rng.sample(StandardNormal);
                    mean + sd * z
                }
            };
            state.insert(plan.name, value);
        }
        Ok((state[query], log_weight))
    });

    let mut values = Vec::with_capacity(n_particles);
    let mut log_weights = Vec::with_capacity(n_particles);
    for draw in draws {
        let (v, lw) = draw?;
        values.push(v);
        log_weights.push(lw);
    }
    let max_lw = log_weights
        .iter()
        .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max_lw.is_finite() {
        return Err(Error::ZeroWeight);
    }
    let weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - max_lw).exp()).collect();
    let sum: f64 = weights.iter().sum();
    let sum_sq: f64 = weights.iter().map(|w| w * w).sum();
    Ok(WeightedSample {
        values,
        weights,
        ess: sum * sum / sum_sq,
    })
}

impl WeightedSample {
    /// Weighted mean of the sample.
    pub fn mean(&self) -> f64 {
        let sum: f64 = self.weights.iter().sum();
        self.values
            .iter()
            .zip(&self.weights)
            .map(|(v, w)| v * w)
            .sum::<f64>()
            / sum
    }

    /// Weighted quantile; see [`weighted_quantile`].
    pub fn quantile(&self, p: f64) -> f64 {
        weighted_quantile(&self.values, &self.weights, p)
    }
}

/// Weighted quantile by interpolation on the sorted sample. Each sorted
/// point `i` (cumulative weight `C_i`, own weight `w_i`, total `S`) sits at
/// probability `(C_i - w_i) / (S - w_i)`; with equal weights this is the
/// standard type-7 rule. Zero-weight points are ignored.
pub fn weighted_quantile(values: &[f64], weights: &[f64], p: f64) -> f64 {
    assert_eq!(values.len(), weights.len());
    let mut order: Vec<usize> = (0..values.len()).filter(|&i| weights[i] > 0.0).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    assert!(!order.is_empty(), "no positive-weight points");
    if order.len() == 1 {
        return values[order[0]];
    }
    let total: f64 = order.iter().map(|&i| weights[i]).sum();
    let mut cum = 0.0;
    let mut grid: Vec<(f64, f64)> = Vec::with_capacity(order.len());
    for &i in &order {
        let w = weights[i];
        let below = cum;
        cum += w;
        let prob = below / (total - w);
        grid.push((prob.min(1.0), values[i]));
    }
    let p = p.clamp(0.0, 1.0);
    if p <= grid[0].0 {
        return grid[0].1;
    }
    for win in grid.windows(2) {
        let (p0, v0) = win[0];
        let (p1, v1) = win[1];
        if p <= p1 {
            if p1 <= p0 {
                return v1;
            }
            let t = (p - p0) / (p1 - p0);
            return v0 + t * (v1 - v0);
        }
    }
    grid.last().unwrap().1
}

/// Weighted mean and 10/50/90% quantiles of the query's posterior.
pub fn predict(
    net: &FittedNetwork,
    evidence: &Evidence,
    query: &str,
    n_particles: usize,
    seed: u64,
) -> Result<Prediction> {
    let sample = likelihood_weighting(net, evidence, query, n_particles, seed)?;
    Ok(Prediction {
        mean: sample.mean(),
        q10: sample.quantile(0.1),
        q50: sample.quantile(0.5),
        q90: sample.quantile(0.9),
        ess: sample.ess,
    })
}

/// Builds the evidence for one dataset row from every network column except
/// `skip`; the cluster column is included or dropped per `policy`.
fn row_evidence(
    net: &FittedNetwork,
    ds: &Dataset,
    row: usize,
    skip: &str,
    policy: ClusterPolicy,
) -> Result<Evidence> {
    let mut evidence = Evidence::new();
    for spec in ds.schema().node_columns() {
        if spec.name == skip || !net.nodes.contains_key(&spec.name) {
            continue;
        }
        if spec.role == ColumnRole::Cluster && policy == ClusterPolicy::Marginal {
            continue;
        }
        match spec.kind {
            ColumnKind::Continuous => {
                let v = ds.continuous(&spec.name)?[row];
                evidence.insert(&spec.name, EvidenceValue::Continuous(v));
            }
            ColumnKind::Discrete => {
                let label = ds.label(&spec.name, row)?;
                evidence.insert(&spec.name, EvidenceValue::Discrete(label.to_string()));
            }
        }
    }
    Ok(evidence)
}

/// Imputes `target` for every row of `ds` given all its other columns as
/// evidence, returning the full posterior summary per row. Every row uses
/// the same particle streams, so permuting the rows permutes the output.
pub fn impute_detailed(
    net: &FittedNetwork,
    ds: &Dataset,
    target: &str,
    n_particles: usize,
    seed: u64,
    policy: ClusterPolicy,
) -> Result<Vec<Prediction>> {
    net.node(target)?;
    ds.schema().spec(target)?;
    let results: Vec<Result<Prediction>> = exec::map_range(ds.n(), |row| {
        let evidence = row_evidence(net, ds, row, target, policy)?;
        predict(net, &evidence, target, n_particles, seed)
    });
    let mut out = Vec::with_capacity(ds.n());
    let mut zero_rows = Vec::new();
    for (row, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => out.push(v),
            Err(Error::ZeroWeight) => zero_rows.push(row),
            Err(e) => return Err(e),
        }
    }
    if !zero_rows.is_empty() {
        return Err(Error::ZeroWeightRows { rows: zero_rows });
    }
    Ok(out)
}

/// [`impute_detailed`] reduced to the posterior means.
pub fn impute(
    net: &FittedNetwork,
    ds: &Dataset,
    target: &str,
    n_particles: usize,
    seed: u64,
    policy: ClusterPolicy,
) -> Result<Vec<f64>> {
    Ok(impute_detailed(net, ds, target, n_particles, seed, policy)?
        .into_iter()
        .map(|p| p.mean)
        .collect())
}

/// Two-stage prediction of the target. Stage 1 walks the phenological
/// nodes in topological order, predicting each from the available values
/// restricted to its Markov blanket and adding the point prediction to the
/// pool. Stage 2 predicts the target from the original evidence plus all
/// stage-1 point predictions.
pub fn predict_cascade(
    net: &FittedNetwork,
    evidence: &Evidence,
    n_particles: usize,
    seed: u64,
) -> Result<Prediction> {
    evidence.validate(net)?;
    for (name, _) in evidence.iter() {
        let role = net.node(name)?.role;
        if role == ColumnRole::Target || role == ColumnRole::Phenological {
            return Err(Error::invalid(format!(
                "cascade evidence must exclude the target and phenological nodes, got {name}"
            )));
        }
    }
    let dag = net.dag()?;
    let mut available = evidence.clone();
    for name in dag.topological_order() {
        if net.node(name)?.role != ColumnRole::Phenological {
            continue;
        }
        let blanket = dag.markov_blanket(name)?;
        let mut stage_evidence = Evidence::new();
        for member in blanket {
            if let Some(v) = available.get(member) {
                stage_evidence.insert(member, v.clone());
            }
        }
        let stage = predict(net, &stage_evidence, name, n_particles, seed)?;
        available.insert(name, EvidenceValue::Continuous(stage.mean));
    }
    predict(net, &available, &net.target, n_particles, seed)
}

/// A density grid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub density: f64,
}

/// An equal-tailed credible interval plus the weighted KDE it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeInterval {
    pub lo: f64,
    pub hi: f64,
    /// Silverman bandwidth actually used; 0 for a degenerate sample.
    pub bandwidth: f64,
    /// Empty when the sample is degenerate (zero spread).
    pub grid: Vec<GridPoint>,
}

/// Weighted Gaussian KDE with Silverman's bandwidth on the weighted sample
/// (effective sample size in place of n). The interval itself is read from
/// the weighted quantiles, the density grid is for plotting.
pub fn kde_interval(sample: &WeightedSample, coverage: f64) -> Result<KdeInterval> {
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(Error::invalid("coverage must lie strictly inside (0, 1)"));
    }
    if sample.ess < MIN_KDE_ESS {
        return Err(Error::LowEss {
            ess: sample.ess,
            min: MIN_KDE_ESS,
        });
    }
    let tail = (1.0 - coverage) / 2.0;
    let lo = sample.quantile(tail);
    let hi = sample.quantile(1.0 - tail);

    let total: f64 = sample.weights.iter().sum();
    let (min_v, max_v) = sample
        .values
        .iter()
        .zip(&sample.weights)
        .filter(|(_, w)| **w > 0.0)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (v, _)| {
            (lo.min(*v), hi.max(*v))
        });
    let mean = sample.mean();
    let var = sample
        .values
        .iter()
        .zip(&sample.weights)
        .map(|(v, w)| w * (v - mean) * (v - mean))
        .sum::<f64>()
        / total;
    let sd = var.max(0.0).sqrt();
    let iqr = sample.quantile(0.75) - sample.quantile(0.25);
    let scale = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let bandwidth = 0.9 * scale * sample.ess.powf(-0.2);
    if max_v <= min_v || !(bandwidth > 0.0) || !bandwidth.is_finite() {
        // Degenerate (constant) sample: point interval, no grid.
        return Ok(KdeInterval {
            lo,
            hi,
            bandwidth: 0.0,
            grid: Vec::new(),
        });
    }
    let start = min_v - 3.0 * bandwidth;
    let end = max_v + 3.0 * bandwidth;
    let step = (end - start) / (KDE_GRID_POINTS - 1) as f64;
    let norm = 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * bandwidth * total);
    let grid: Vec<GridPoint> = exec::map_range(KDE_GRID_POINTS, |k| {
        let x = start + step * k as f64;
        let density = norm
            * sample
                .values
                .iter()
                .zip(&sample.weights)
                .map(|(v, w)| {
                    let z = (x - v) / bandwidth;
                    w * (-0.5 * z * z).exp()
                })
                .sum::<f64>();
        GridPoint { x, density }
    });
    Ok(KdeInterval {
        lo,
        hi,
        bandwidth,
        grid,
    })
}
