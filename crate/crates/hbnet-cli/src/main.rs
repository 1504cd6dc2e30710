//! Command-line front end for the hierarchical network pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/model error. All primary
//! outputs are files and byte-identical across reruns with the same inputs
//! and seed; logging goes to stderr only.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hbnet::cluster::{apply_cluster_column, derive_clusters, KSelection};
use hbnet::data::{load_csv, load_schema, save_csv, save_schema, GroupKey, Schema};
use hbnet::error::{Error, Result};
use hbnet::eval::{
    built_in_scenarios, cross_validate_detailed, dm_test, run_scenarios, CvArtifacts, CvConfig,
    DmLoss, Scenario,
};
use hbnet::graph::ConstraintSet;
use hbnet::infer::{
    impute_detailed, kde_interval, predict, ClusterPolicy, Evidence, EvidenceValue, Prediction,
    WeightedSample,
};
use hbnet::models::LocalModel;
use hbnet::network::{baseline_roles, roles_from_schema, FittedNetwork};
use hbnet::search::{backward_eliminate, hill_climb, SearchConfig};
use hbnet::synth::{generate, NetSpec};

#[derive(Parser)]
#[command(
    name = "hbnet",
    version,
    about = "Learn and query conditional Gaussian networks on hierarchical tabular data"
)]
struct Cli {
    /// Worker threads (default: all cores); 1 forces sequential execution.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    threads: Option<u64>,
    /// Emit machine-readable JSON log lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a known generating network.
    Simulate(SimulateArgs),
    /// Derive the cluster variable from per-group residual statistics.
    Cluster(ClusterArgs),
    /// Learn the network structure and local models.
    Learn(LearnArgs),
    /// Predict a node's posterior given evidence.
    Predict(PredictArgs),
    /// Impute one column for every row of a dataset.
    Impute(ImputeArgs),
    /// Score evidence scenarios on a test dataset.
    Scenarios(ScenariosArgs),
    /// Hold-out cross-validation of the full pipeline.
    Cv(CvArgs),
    /// Merge result CSV files into one summary JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Generating-network JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Rows per cluster level, comma separated (one entry per level).
    #[arg(long, value_delimiter = ',', required = true)]
    n_per_cluster: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop the generating cluster column, leaving membership latent (the
    /// input the cluster/learn pipeline expects to recover it from).
    #[arg(long)]
    hide_cluster: bool,
    /// Output data CSV.
    #[arg(long)]
    out: PathBuf,
    /// Optional schema manifest for the generated data.
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Number of clusters, or `auto` for silhouette selection.
    #[arg(long, default_value = "auto", value_parser = parse_clusters)]
    clusters: KSelection,
    /// Per-group labels CSV (group keys + cluster).
    #[arg(long)]
    out_labels: PathBuf,
    /// Full fitted clustering model as JSON.
    #[arg(long)]
    out_model: Option<PathBuf>,
    /// Merge tree as a JSON list.
    #[arg(long)]
    out_dendrogram: Option<PathBuf>,
    /// Silhouette score per candidate k (empty table when k was fixed).
    #[arg(long)]
    out_silhouette: Option<PathBuf>,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Per-group cluster labels CSV (from `cluster`); required unless the
    /// schema already carries a cluster column.
    #[arg(long)]
    clusters_from: Option<PathBuf>,
    /// Constraints JSON: {"blacklist": [[parent, child], ...], "whitelist": [...]}.
    #[arg(long)]
    constraints: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    max_parents: usize,
    /// Downgrade random-effect families to plain regressions.
    #[arg(long)]
    baseline: bool,
    /// Accepted for interface uniformity; structure learning is
    /// deterministic and draws no randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fitted network JSON.
    #[arg(long)]
    out: PathBuf,
    /// Structure in DOT format.
    #[arg(long)]
    out_dot: Option<PathBuf>,
    /// Arc list CSV.
    #[arg(long)]
    out_arcs: Option<PathBuf>,
    /// Accepted-move trace CSV.
    #[arg(long)]
    out_trace: Option<PathBuf>,
    /// Per-node score table CSV.
    #[arg(long)]
    out_scores: Option<PathBuf>,
    /// Emit a parent-elimination audit for this node.
    #[arg(long)]
    audit: Option<String>,
    /// Audit output JSON (defaults next to --out).
    #[arg(long, requires = "audit")]
    audit_out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Evidence as a JSON object (one query), JSON array of objects, or a
    /// CSV whose columns are evidence nodes (one query per row).
    #[arg(long)]
    evidence: PathBuf,
    /// Query node (default: the model's target).
    #[arg(long)]
    query: Option<String>,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV: row, mean, q10, q50, q90, ess.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ImputeArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// Column to impute (default: the model's target).
    #[arg(long)]
    target: Option<String>,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Treat each row's cluster label as observed or marginalize it out.
    #[arg(long, value_enum, default_value_t = ClusterEvidenceArg::Observed)]
    cluster_evidence: ClusterEvidenceArg,
    /// Output CSV: row, mean, q10, q50, q90, ess.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScenariosArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    /// `builtin` for the 32-scenario table, or a JSON file of
    /// {id, evidence_nodes} objects.
    #[arg(long, default_value = "builtin")]
    table: String,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ClusterEvidenceArg::Observed)]
    cluster_evidence: ClusterEvidenceArg,
    /// Output CSV: scenario, mape, rows.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    reps: u64,
    /// Fraction of groups held out per replicate.
    #[arg(long, default_value_t = 0.2)]
    fraction: f64,
    #[arg(long, default_value = "auto", value_parser = parse_clusters)]
    clusters: KSelection,
    #[arg(long, default_value_t = 1000, value_parser = clap::value_parser!(u64).range(1..))]
    particles: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    max_parents: usize,
    #[arg(long)]
    constraints: Option<PathBuf>,
    /// `builtin` or a JSON scenario table to score per replicate.
    #[arg(long)]
    scenarios: Option<String>,
    #[arg(long, value_enum, default_value_t = ClusterEvidenceArg::Observed)]
    cluster_evidence: ClusterEvidenceArg,
    /// Also run the complete-pooling baseline and compare its per-row
    /// errors (two-sided, absolute loss).
    #[arg(long)]
    compare_baseline: bool,
    /// Directory for cv_report.csv, scenario_mape.csv, dm_test.csv and
    /// kde_rep<k>.csv.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSV files to merge.
    #[arg(long, required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Summary JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ClusterEvidenceArg {
    Observed,
    Marginal,
}

impl From<ClusterEvidenceArg> for ClusterPolicy {
    fn from(value: ClusterEvidenceArg) -> Self {
        match value {
            ClusterEvidenceArg::Observed => ClusterPolicy::Observed,
            ClusterEvidenceArg::Marginal => ClusterPolicy::Marginal,
        }
    }
}

fn parse_clusters(text: &str) -> std::result::Result<KSelection, String> {
    if text.eq_ignore_ascii_case("auto") {
        return Ok(KSelection::Auto);
    }
    match text.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(KSelection::Fixed(k)),
        _ => Err(format!("expected 'auto' or a positive integer, got '{text}'")),
    }
}

/// Stderr logger; one line per event, plain or JSON.
#[derive(Clone, Copy)]
struct Log {
    json: bool,
}

impl Log {
    fn event(&self, event: &str, fields: &[(&str, String)]) {
        if self.json {
            let mut map = serde_json::Map::new();
            map.insert("event".into(), event.into());
            for (k, v) in fields {
                map.insert((*k).into(), v.as_str().into());
            }
            eprintln!("{}", serde_json::Value::Object(map));
        } else {
            let mut line = format!("[hbnet] {event}");
            for (k, v) in fields {
                line.push_str(&format!(" {k}={v}"));
            }
            eprintln!("{line}");
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            return match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{err}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{err}");
                    ExitCode::from(1)
                }
            };
        }
    };
    let log = Log {
        json: cli.json_logs,
    };
    let result = match cli.threads {
        Some(t) => hbnet::exec::run_with_threads(t as usize, move || run(cli.command, log)),
        None => run(cli.command, log),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            log.event("error", &[("message", err.to_string())]);
            ExitCode::from(2)
        }
    }
}

fn run(command: Command, log: Log) -> Result<()> {
    match command {
        Command::Simulate(args) => cmd_simulate(args, log),
        Command::Cluster(args) => cmd_cluster(args, log),
        Command::Learn(args) => cmd_learn(args, log),
        Command::Predict(args) => cmd_predict(args, log),
        Command::Impute(args) => cmd_impute(args, log),
        Command::Scenarios(args) => cmd_scenarios(args, log),
        Command::Cv(args) => cmd_cv(args, log),
        Command::Report(args) => cmd_report(args, log),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_pretty_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_csv_rows(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    writer.write_record(header)?;
    for row in rows {
        writer.write_record(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn cmd_simulate(args: SimulateArgs, log: Log) -> Result<()> {
    let spec: NetSpec = read_json(&args.spec)?;
    let mut ds = generate(&spec, &args.n_per_cluster, args.seed)?;
    if args.hide_cluster {
        ds = ds.without_column(spec.cluster_node()?)?;
    }
    save_csv(&ds, &args.out)?;
    if let Some(schema_out) = &args.schema_out {
        save_schema(ds.schema(), schema_out)?;
    }
    log.event(
        "simulated",
        &[
            ("rows", ds.n().to_string()),
            ("clusters", spec.n_clusters().to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_cluster(args: ClusterArgs, log: Log) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let load = load_csv(&args.data, &schema)?;
    if load.dropped_rows > 0 {
        log.event(
            "dropped_incomplete_rows",
            &[("count", load.dropped_rows.to_string())],
        );
    }
    let model = derive_clusters(&load.dataset, args.clusters)?;

    let key_names: Vec<String> = schema
        .group_keys()
        .iter()
        .map(|s| s.name.clone())
        .collect();
    let mut header: Vec<&str> = key_names.iter().map(String::as_str).collect();
    header.push("cluster");
    let rows: Vec<Vec<String>> = model
        .assignments
        .iter()
        .map(|(group, label)| {
            let mut row = group.0.clone();
            row.push(label.to_string());
            row
        })
        .collect();
    write_csv_rows(&args.out_labels, &header, &rows)?;

    if let Some(path) = &args.out_model {
        write_pretty_json(&model, path)?;
    }
    if let Some(path) = &args.out_dendrogram {
        write_pretty_json(&model.dendrogram, path)?;
    }
    if let Some(path) = &args.out_silhouette {
        let rows: Vec<Vec<String>> = model
            .silhouette_by_k
            .iter()
            .map(|(k, s)| vec![k.to_string(), fmt(*s)])
            .collect();
        write_csv_rows(path, &["k", "silhouette"], &rows)?;
    }
    log.event(
        "clustered",
        &[
            ("groups", model.assignments.len().to_string()),
            ("k", model.k.to_string()),
        ],
    );
    Ok(())
}

/// Reads a per-group labels CSV (the `cluster` subcommand's output) and
/// returns the assignment map plus the number of clusters.
fn load_label_assignments(
    path: &Path,
    schema: &Schema,
) -> Result<(BTreeMap<GroupKey, u32>, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut key_positions = Vec::new();
    for spec in schema.group_keys() {
        let pos = headers
            .iter()
            .position(|h| *h == spec.name)
            .ok_or_else(|| {
                Error::invalid(format!("labels file lacks group-key column {}", spec.name))
            })?;
        key_positions.push(pos);
    }
    let cluster_pos = headers
        .iter()
        .position(|h| h == "cluster")
        .ok_or_else(|| Error::invalid("labels file lacks a 'cluster' column"))?;
    let mut assignments = BTreeMap::new();
    let mut k = 0usize;
    for record in reader.records() {
        let record = record?;
        let parts: Vec<String> = key_positions
            .iter()
            .map(|&p| record.get(p).unwrap_or("").trim().to_string())
            .collect();
        let label: u32 = record
            .get(cluster_pos)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::invalid("cluster labels must be positive integers"))?;
        k = k.max(label as usize);
        assignments.insert(GroupKey(parts), label);
    }
    if assignments.is_empty() {
        return Err(Error::invalid("labels file has no rows"));
    }
    Ok((assignments, k))
}

fn cmd_learn(args: LearnArgs, log: Log) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let load = load_csv(&args.data, &schema)?;
    if load.dropped_rows > 0 {
        log.event(
            "dropped_incomplete_rows",
            &[("count", load.dropped_rows.to_string())],
        );
    }
    let ds = match (&args.clusters_from, schema.cluster()) {
        (Some(path), None) => {
            let (assignments, k) = load_label_assignments(path, &schema)?;
            apply_cluster_column(&load.dataset, &assignments, k, "cluster")?
        }
        (None, Some(_)) => load.dataset,
        (Some(_), Some(spec)) => {
            return Err(Error::Schema(format!(
                "schema already has cluster column {}; drop --clusters-from",
                spec.name
            )))
        }
        (None, None) => {
            return Err(Error::Schema(
                "no cluster column; run `cluster` first and pass --clusters-from".into(),
            ))
        }
    };

    let mut roles = roles_from_schema(ds.schema())?;
    if args.baseline {
        roles = baseline_roles(&roles);
    }
    let constraints = match &args.constraints {
        Some(path) => load_constraints(path)?,
        None => ConstraintSet::default(),
    };
    let config = SearchConfig {
        max_parents: args.max_parents,
        ..SearchConfig::default()
    };
    let (dag, net, trace) = hill_climb(&ds, &roles, &constraints, &config)?;
    net.save(&args.out)?;

    if let Some(path) = &args.out_dot {
        fs::write(path, dag.to_dot()).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.out_arcs {
        fs::write(path, dag.arcs_csv()).map_err(|e| Error::io(path, e))?;
    }
    if let Some(path) = &args.out_trace {
        let rows: Vec<Vec<String>> = trace
            .iter()
            .map(|step| {
                vec![
                    step.iteration.to_string(),
                    step.mv.kind.to_string(),
                    step.mv.parent.clone(),
                    step.mv.child.clone(),
                    fmt(step.delta),
                    fmt(step.total),
                ]
            })
            .collect();
        write_csv_rows(
            path,
            &["iteration", "move", "parent", "child", "delta", "total"],
            &rows,
        )?;
    }
    if let Some(path) = &args.out_scores {
        let rows: Vec<Vec<String>> = net
            .nodes
            .iter()
            .map(|(name, node)| {
                vec![
                    name.clone(),
                    node.parents.join(" "),
                    fmt(node.score),
                    fmt(-2.0 * node.score),
                ]
            })
            .collect();
        write_csv_rows(path, &["node", "parents", "score", "bic"], &rows)?;
    }
    if let Some(node) = &args.audit {
        let parents = net.node(node)?.parents.clone();
        let audit = backward_eliminate(node, &parents, &ds, &roles)?;
        let out = args
            .audit_out
            .clone()
            .unwrap_or_else(|| args.out.with_extension("audit.json"));
        write_pretty_json(&audit, &out)?;
        log.event("audited", &[("node", node.clone())]);
    }
    log.event(
        "learned",
        &[
            ("arcs", dag.arc_count().to_string()),
            ("score", fmt(net.score)),
            ("moves", trace.len().to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    Ok(())
}

fn load_constraints(path: &Path) -> Result<ConstraintSet> {
    #[derive(serde::Deserialize)]
    struct File {
        #[serde(default)]
        blacklist: Vec<(String, String)>,
        #[serde(default)]
        whitelist: Vec<(String, String)>,
    }
    let file: File = read_json(path)?;
    ConstraintSet::new(file.blacklist, file.whitelist)
}

/// Types a raw evidence cell against the node's local model.
fn typed_evidence(net: &FittedNetwork, node: &str, text: &str) -> Result<EvidenceValue> {
    let discrete = matches!(net.node(node)?.model, LocalModel::MultinomialRoot(_));
    if discrete {
        Ok(EvidenceValue::Discrete(text.to_string()))
    } else {
        text.trim()
            .parse::<f64>()
            .map(EvidenceValue::Continuous)
            .map_err(|_| Error::invalid(format!("evidence for {node} is not a number: '{text}'")))
    }
}

fn evidence_from_json_object(
    net: &FittedNetwork,
    map: &serde_json::Map<String, serde_json::Value>,
) -> Result<Evidence> {
    let mut evidence = Evidence::new();
    for (node, value) in map {
        let v = match value {
            serde_json::Value::Number(n) => EvidenceValue::Continuous(
                n.as_f64()
                    .ok_or_else(|| Error::invalid(format!("evidence for {node} overflows")))?,
            ),
            serde_json::Value::String(s) => typed_evidence(net, node, s)?,
            other => {
                return Err(Error::invalid(format!(
                    "evidence for {node} must be a number or string, got {other}"
                )))
            }
        };
        evidence.insert(node, v);
    }
    Ok(evidence)
}

/// Loads evidence rows from a JSON object/array or a CSV table.
fn load_evidence_rows(path: &Path, net: &FittedNetwork) -> Result<Vec<Evidence>> {
    let is_json = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("json"))
        .unwrap_or(false);
    if is_json {
        let value: serde_json::Value = read_json(path)?;
        return match value {
            serde_json::Value::Object(map) => Ok(vec![evidence_from_json_object(net, &map)?]),
            serde_json::Value::Array(items) => items
                .into_iter()
                .map(|item| match item {
                    serde_json::Value::Object(map) => evidence_from_json_object(net, &map),
                    other => Err(Error::invalid(format!(
                        "evidence array entries must be objects, got {other}"
                    ))),
                })
                .collect(),
            other => Err(Error::invalid(format!(
                "evidence JSON must be an object or array, got {other}"
            ))),
        };
    }
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let mut evidence = Evidence::new();
        for (i, node) in headers.iter().enumerate() {
            let cell = record.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                continue;
            }
            evidence.insert(node, typed_evidence(net, node, cell)?);
        }
        rows.push(evidence);
    }
    if rows.is_empty() {
        return Err(Error::invalid("evidence file has no rows"));
    }
    Ok(rows)
}

fn prediction_rows(predictions: &[Prediction]) -> Vec<Vec<String>> {
    predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            vec![
                i.to_string(),
                fmt(p.mean),
                fmt(p.q10),
                fmt(p.q50),
                fmt(p.q90),
                fmt(p.ess),
            ]
        })
        .collect()
}

const PREDICTION_HEADER: [&str; 6] = ["row", "mean", "q10", "q50", "q90", "ess"];

fn cmd_predict(args: PredictArgs, log: Log) -> Result<()> {
    let net = FittedNetwork::load(&args.model)?;
    let query = args.query.clone().unwrap_or_else(|| net.target.clone());
    let evidence_rows = load_evidence_rows(&args.evidence, &net)?;
    let mut predictions = Vec::with_capacity(evidence_rows.len());
    for evidence in &evidence_rows {
        predictions.push(predict(
            &net,
            evidence,
            &query,
            args.particles as usize,
            args.seed,
        )?);
    }
    write_csv_rows(&args.out, &PREDICTION_HEADER, &prediction_rows(&predictions))?;
    log.event(
        "predicted",
        &[
            ("query", query),
            ("rows", predictions.len().to_string()),
            ("out", args.out.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_impute(args: ImputeArgs, log: Log) -> Result<()> {
    let net = FittedNetwork::load(&args.model)?;
    let schema = load_schema(&args.schema)?;
    let load = load_csv(&args.data, &schema)?;
    let target = args.target.clone().unwrap_or_else(|| net.target.clone());
    let predictions = impute_detailed(
        &net,
        &load.dataset,
        &target,
        args.particles as usize,
        args.seed,
        args.cluster_evidence.into(),
    )?;
    write_csv_rows(&args.out, &PREDICTION_HEADER, &prediction_rows(&predictions))?;
    log.event(
        "imputed",
        &[
            ("target", target),
            ("rows", predictions.len().to_string()),
        ],
    );
    Ok(())
}

fn load_scenario_table(spec: &str) -> Result<Vec<Scenario>> {
    if spec.eq_ignore_ascii_case("builtin") {
        Ok(built_in_scenarios())
    } else {
        read_json(Path::new(spec))
    }
}

fn cmd_scenarios(args: ScenariosArgs, log: Log) -> Result<()> {
    let net = FittedNetwork::load(&args.model)?;
    let schema = load_schema(&args.schema)?;
    let load = load_csv(&args.data, &schema)?;
    let table = load_scenario_table(&args.table)?;
    let results = run_scenarios(
        &net,
        &load.dataset,
        &table,
        args.particles as usize,
        args.seed,
        args.cluster_evidence.into(),
    )?;
    let rows: Vec<Vec<String>> = results
        .iter()
        .map(|r| {
            vec![
                r.scenario.to_string(),
                fmt(r.mape),
                r.rows.to_string(),
            ]
        })
        .collect();
    write_csv_rows(&args.out, &["scenario", "mape", "rows"], &rows)?;
    log.event("scenarios_scored", &[("count", results.len().to_string())]);
    Ok(())
}

/// Writes the per-replicate KDE of the hold-out predictions; skipped with a
/// log line when the replicate has too few rows for a density.
fn write_prediction_kde(dir: &Path, artifact: &CvArtifacts, log: Log) -> Result<()> {
    let n = artifact.predictions.len();
    let sample = WeightedSample {
        values: artifact.predictions.clone(),
        weights: vec![1.0; n],
        ess: n as f64,
    };
    let path = dir.join(format!("kde_rep{}.csv", artifact.replicate));
    match kde_interval(&sample, 0.8) {
        Ok(kde) => {
            let rows: Vec<Vec<String>> = kde
                .grid
                .iter()
                .map(|p| vec![fmt(p.x), fmt(p.density)])
                .collect();
            write_csv_rows(&path, &["x", "density"], &rows)
        }
        Err(Error::LowEss { .. }) => {
            log.event(
                "kde_skipped",
                &[
                    ("replicate", artifact.replicate.to_string()),
                    ("reason", "too few hold-out rows".into()),
                ],
            );
            Ok(())
        }
        Err(e) => Err(e),
    }
}

fn cmd_cv(args: CvArgs, log: Log) -> Result<()> {
    let schema = load_schema(&args.schema)?;
    let load = load_csv(&args.data, &schema)?;
    if load.dropped_rows > 0 {
        log.event(
            "dropped_incomplete_rows",
            &[("count", load.dropped_rows.to_string())],
        );
    }
    let constraints = match &args.constraints {
        Some(path) => load_constraints(path)?,
        None => ConstraintSet::default(),
    };
    let scenarios = match &args.scenarios {
        Some(spec) => load_scenario_table(spec)?,
        None => Vec::new(),
    };
    let config = CvConfig {
        reps: args.reps as usize,
        fraction: args.fraction,
        n_particles: args.particles as usize,
        seed: args.seed,
        k: args.clusters,
        search: SearchConfig {
            max_parents: args.max_parents,
            ..SearchConfig::default()
        },
        policy: args.cluster_evidence.into(),
        baseline: false,
        cluster_name: "cluster".into(),
        scenarios,
    };
    fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;

    let artifacts = cross_validate_detailed(&load.dataset, &constraints, &config)?;
    let report_rows: Vec<Vec<String>> = artifacts
        .iter()
        .map(|a| {
            vec![
                a.replicate.to_string(),
                fmt(a.report.mape),
                fmt(a.report.correlation),
            ]
        })
        .collect();
    write_csv_rows(
        &args.out_dir.join("cv_report.csv"),
        &["replicate", "mape", "correlation"],
        &report_rows,
    )?;

    if !config.scenarios.is_empty() {
        let mut rows = Vec::new();
        for a in &artifacts {
            for (scenario, mape) in &a.report.per_scenario {
                rows.push(vec![
                    a.replicate.to_string(),
                    scenario.to_string(),
                    fmt(*mape),
                ]);
            }
        }
        write_csv_rows(
            &args.out_dir.join("scenario_mape.csv"),
            &["replicate", "scenario", "mape"],
            &rows,
        )?;
    }

    for artifact in &artifacts {
        write_prediction_kde(&args.out_dir, artifact, log)?;
    }

    if args.compare_baseline {
        let baseline_config = CvConfig {
            baseline: true,
            ..config.clone()
        };
        let baseline = cross_validate_detailed(&load.dataset, &constraints, &baseline_config)?;
        let rows: Vec<Vec<String>> = baseline
            .iter()
            .map(|a| {
                vec![
                    a.replicate.to_string(),
                    fmt(a.report.mape),
                    fmt(a.report.correlation),
                ]
            })
            .collect();
        write_csv_rows(
            &args.out_dir.join("baseline_report.csv"),
            &["replicate", "mape", "correlation"],
            &rows,
        )?;

        let mut dm_rows = Vec::new();
        for (a, b) in artifacts.iter().zip(&baseline) {
            let errors_a: Vec<f64> = a
                .actuals
                .iter()
                .zip(&a.predictions)
                .map(|(y, p)| y - p)
                .collect();
            let errors_b: Vec<f64> = b
                .actuals
                .iter()
                .zip(&b.predictions)
                .map(|(y, p)| y - p)
                .collect();
            match dm_test(&errors_a, &errors_b, DmLoss::Absolute) {
                Ok((statistic, p_value)) => dm_rows.push(vec![
                    a.replicate.to_string(),
                    fmt(statistic),
                    fmt(p_value),
                ]),
                Err(e) => log.event(
                    "dm_skipped",
                    &[
                        ("replicate", a.replicate.to_string()),
                        ("reason", e.to_string()),
                    ],
                ),
            }
        }
        write_csv_rows(
            &args.out_dir.join("dm_test.csv"),
            &["replicate", "statistic", "p_value"],
            &dm_rows,
        )?;
    }

    let mean_mape =
        artifacts.iter().map(|a| a.report.mape).sum::<f64>() / artifacts.len() as f64;
    log.event(
        "cross_validated",
        &[
            ("replicates", artifacts.len().to_string()),
            ("mean_mape", fmt(mean_mape)),
            ("out_dir", args.out_dir.display().to_string()),
        ],
    );
    Ok(())
}

fn cmd_report(args: ReportArgs, log: Log) -> Result<()> {
    let mut files = BTreeMap::new();
    for path in &args.inputs {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid(format!("bad input path {}", path.display())))?
            .to_string();
        if files.contains_key(&stem) {
            return Err(Error::invalid(format!("duplicate input name {stem}")));
        }
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let mut row = serde_json::Map::new();
            for (i, name) in headers.iter().enumerate() {
                let cell = record.get(i).unwrap_or("");
                let value = if let Ok(v) = cell.parse::<i64>() {
                    serde_json::Value::Number(v.into())
                } else if let Ok(v) = cell.parse::<f64>() {
                    serde_json::Number::from_f64(v)
                        .map(serde_json::Value::Number)
                        .unwrap_or_else(|| serde_json::Value::String(cell.to_string()))
                } else {
                    serde_json::Value::String(cell.to_string())
                };
                row.insert(name.clone(), value);
            }
            rows.push(serde_json::Value::Object(row));
        }
        files.insert(
            stem,
            serde_json::json!({
                "path": path.display().to_string(),
                "columns": headers,
                "rows": rows,
            }),
        );
    }
    let summary = serde_json::json!({ "files": files });
    write_pretty_json(&summary, &args.out)?;
    log.event("reported", &[("files", args.inputs.len().to_string())]);
    Ok(())
}
