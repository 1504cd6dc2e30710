//! End-to-end tests of the `hbnet` binary: exit codes, the full
//! simulate → cluster → learn → query pipeline, and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hbnet::network::FittedNetwork;
use hbnet::synth::demo_spec;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_hbnet");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn path_str(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Writes the three-cluster demo generating network to `dir/spec.json`.
fn write_demo_spec(dir: &Path) -> PathBuf {
    let spec = demo_spec(3);
    let path = dir.join("spec.json");
    fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
    path
}

/// Runs simulate (cluster hidden) + cluster + learn in `dir` and returns
/// the model path.
fn build_model(dir: &Path, seed: &str) -> PathBuf {
    let spec = write_demo_spec(dir);
    let data = dir.join("data.csv");
    let schema = dir.join("schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "60,60,60",
        "--seed",
        seed,
        "--hide-cluster",
        "--out",
        path_str(&data),
        "--schema-out",
        path_str(&schema),
    ]);
    let labels = dir.join("labels.csv");
    run_ok(&[
        "cluster",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters",
        "3",
        "--out-labels",
        path_str(&labels),
    ]);
    let model = dir.join("model.json");
    run_ok(&[
        "learn",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters-from",
        path_str(&labels),
        "--out",
        path_str(&model),
    ]);
    model
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

fn line_count(path: &Path) -> usize {
    read(path).lines().count()
}

#[test]
fn version_and_help_exit_zero_on_stdout() {
    let version = run(&["--version"]);
    assert_eq!(exit_code(&version), 0);
    assert!(String::from_utf8_lossy(&version.stdout).contains("hbnet"));
    assert!(version.stderr.is_empty());

    let help = run(&["--help"]);
    assert_eq!(exit_code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    for sub in [
        "simulate",
        "cluster",
        "learn",
        "predict",
        "impute",
        "scenarios",
        "cv",
        "report",
    ] {
        assert!(text.contains(sub), "help lacks subcommand {sub}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let unknown = run(&["--definitely-not-a-flag"]);
    assert_eq!(exit_code(&unknown), 1);
    assert!(!unknown.stderr.is_empty());

    let bad_sub = run(&["frobnicate"]);
    assert_eq!(exit_code(&bad_sub), 1);

    let missing_required = run(&["predict"]);
    assert_eq!(exit_code(&missing_required), 1);

    let bad_value = run(&[
        "cluster",
        "--data",
        "x.csv",
        "--schema",
        "x.json",
        "--clusters",
        "zero",
        "--out-labels",
        "y.csv",
    ]);
    assert_eq!(exit_code(&bad_value), 1);
}

#[test]
fn data_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = run(&[
        "cluster",
        "--data",
        path_str(&dir.path().join("absent.csv")),
        "--schema",
        path_str(&dir.path().join("absent.json")),
        "--out-labels",
        path_str(&dir.path().join("labels.csv")),
    ]);
    assert_eq!(exit_code(&missing), 2);
    assert!(!missing.stderr.is_empty());
    assert!(missing.stdout.is_empty());
}

#[test]
fn learn_requires_exactly_one_cluster_source() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = write_demo_spec(d);

    // Latent membership: learn without --clusters-from is a data error.
    let hidden = d.join("hidden.csv");
    let hidden_schema = d.join("hidden_schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "30,30,30",
        "--seed",
        "1",
        "--hide-cluster",
        "--out",
        path_str(&hidden),
        "--schema-out",
        path_str(&hidden_schema),
    ]);
    let out = run(&[
        "learn",
        "--data",
        path_str(&hidden),
        "--schema",
        path_str(&hidden_schema),
        "--out",
        path_str(&d.join("model.json")),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("cluster"));

    // A schema that already carries the cluster column learns directly...
    let full = d.join("full.csv");
    let full_schema = d.join("full_schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "30,30,30",
        "--seed",
        "1",
        "--out",
        path_str(&full),
        "--schema-out",
        path_str(&full_schema),
    ]);
    run_ok(&[
        "learn",
        "--data",
        path_str(&full),
        "--schema",
        path_str(&full_schema),
        "--out",
        path_str(&d.join("direct.json")),
    ]);

    // ...and then refuses a second cluster source.
    let labels = d.join("labels.csv");
    fs::write(&labels, "group,cluster\ng1_1,1\n").unwrap();
    let conflict = run(&[
        "learn",
        "--data",
        path_str(&full),
        "--schema",
        path_str(&full_schema),
        "--clusters-from",
        path_str(&labels),
        "--out",
        path_str(&d.join("conflict.json")),
    ]);
    assert_eq!(exit_code(&conflict), 2);
}

#[test]
fn pipeline_end_to_end() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = write_demo_spec(d);
    let data = d.join("data.csv");
    let schema = d.join("schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "60,60,60",
        "--seed",
        "11",
        "--hide-cluster",
        "--out",
        path_str(&data),
        "--schema-out",
        path_str(&schema),
    ]);
    // 180 rows + header; columns in schema order ending with the group key.
    assert_eq!(line_count(&data), 181);
    let header = read(&data).lines().next().unwrap().to_string();
    assert!(header.ends_with(",group"));

    let labels = d.join("labels.csv");
    let dendrogram = d.join("dendrogram.json");
    let silhouette = d.join("silhouette.csv");
    let cluster_model = d.join("cluster_model.json");
    run_ok(&[
        "cluster",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters",
        "3",
        "--out-labels",
        path_str(&labels),
        "--out-model",
        path_str(&cluster_model),
        "--out-dendrogram",
        path_str(&dendrogram),
        "--out-silhouette",
        path_str(&silhouette),
    ]);
    // 60 rows per cluster chunk into groups of 25 -> 3 groups x 3 clusters.
    assert_eq!(line_count(&labels), 10);
    assert_eq!(read(&labels).lines().next().unwrap(), "group,cluster");
    // Fixed k records no silhouette sweep: header only.
    assert_eq!(line_count(&silhouette), 1);
    let dend: serde_json::Value = serde_json::from_str(&read(&dendrogram)).unwrap();
    assert!(dend.is_object() || dend.is_array());
    assert!(read(&cluster_model).contains("assignments"));

    let model = d.join("model.json");
    let dot = d.join("net.dot");
    let arcs = d.join("arcs.csv");
    let trace = d.join("trace.csv");
    let scores = d.join("scores.csv");
    let audit = d.join("audit.json");
    run_ok(&[
        "learn",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters-from",
        path_str(&labels),
        "--out",
        path_str(&model),
        "--out-dot",
        path_str(&dot),
        "--out-arcs",
        path_str(&arcs),
        "--out-trace",
        path_str(&trace),
        "--out-scores",
        path_str(&scores),
        "--audit",
        "y",
        "--audit-out",
        path_str(&audit),
    ]);
    let net = FittedNetwork::load(&model).unwrap();
    assert_eq!(net.target, "y");
    assert!(net.nodes.contains_key("cluster"));
    assert!(read(&dot).starts_with("digraph"));
    assert_eq!(read(&arcs).lines().next().unwrap(), "parent,child");
    assert!(line_count(&arcs) > 1, "no arcs learned");
    assert_eq!(
        read(&trace).lines().next().unwrap(),
        "iteration,move,parent,child,delta,total"
    );
    // One score row per node (6 network nodes incl. the cluster).
    assert_eq!(line_count(&scores), 7);
    let audit_json: serde_json::Value = serde_json::from_str(&read(&audit)).unwrap();
    assert!(!audit_json["with_random_effects"]
        .as_array()
        .unwrap()
        .is_empty());
    assert!(!audit_json["without_random_effects"]
        .as_array()
        .unwrap()
        .is_empty());

    // Evidence as one JSON object.
    let ev_obj = d.join("ev.json");
    fs::write(&ev_obj, r#"{"w1": 0.3, "cluster": "1"}"#).unwrap();
    let pred1 = d.join("pred1.csv");
    run_ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--evidence",
        path_str(&ev_obj),
        "--particles",
        "500",
        "--seed",
        "3",
        "--out",
        path_str(&pred1),
    ]);
    assert_eq!(
        read(&pred1).lines().next().unwrap(),
        "row,mean,q10,q50,q90,ess"
    );
    assert_eq!(line_count(&pred1), 2);
    let cells: Vec<f64> = read(&pred1)
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|c| c.parse().unwrap())
        .collect();
    let (mean, q10, q50, q90, ess) = (cells[1], cells[2], cells[3], cells[4], cells[5]);
    assert!(q10 <= q50 && q50 <= q90, "quantiles out of order");
    assert!(mean.is_finite() && ess > 1.0);

    // Evidence as a CSV with two query rows.
    let ev_csv = d.join("ev.csv");
    fs::write(&ev_csv, "w1,cluster\n0.3,1\n1.5,2\n").unwrap();
    let pred2 = d.join("pred2.csv");
    run_ok(&[
        "predict",
        "--model",
        path_str(&model),
        "--evidence",
        path_str(&ev_csv),
        "--particles",
        "500",
        "--seed",
        "3",
        "--out",
        path_str(&pred2),
    ]);
    assert_eq!(line_count(&pred2), 3);
    // The first query row matches the JSON-object run bit for bit.
    assert_eq!(
        read(&pred1).lines().nth(1).unwrap(),
        read(&pred2).lines().nth(1).unwrap()
    );

    // Impute the target for every dataset row.
    let imputed = d.join("imputed.csv");
    run_ok(&[
        "impute",
        "--model",
        path_str(&model),
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--particles",
        "300",
        "--seed",
        "5",
        "--out",
        path_str(&imputed),
    ]);
    assert_eq!(line_count(&imputed), 181);

    // Scenario table over this net's own columns; the simulated data has no
    // cluster column, so the cluster is marginalized out.
    let table = d.join("table.json");
    fs::write(
        &table,
        r#"[{"id": 1, "evidence_nodes": ["w1", "w2"]},
            {"id": 2, "evidence_nodes": ["w1", "w2", "p1", "p2"]}]"#,
    )
    .unwrap();
    let scen = d.join("scenarios.csv");
    run_ok(&[
        "scenarios",
        "--model",
        path_str(&model),
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--table",
        path_str(&table),
        "--particles",
        "300",
        "--seed",
        "7",
        "--cluster-evidence",
        "marginal",
        "--out",
        path_str(&scen),
    ]);
    let scen_text = read(&scen);
    let mut lines = scen_text.lines();
    assert_eq!(lines.next().unwrap(), "scenario,mape,rows");
    let row1: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row2: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!((row1[0], row1[2]), ("1", "180"));
    assert_eq!((row2[0], row2[2]), ("2", "180"));
    let mape1: f64 = row1[1].parse().unwrap();
    let mape2: f64 = row2[1].parse().unwrap();
    // Seeing both plant intermediaries should beat weather-only evidence.
    assert!(
        mape2 < mape1,
        "richer evidence did not help: {mape2} !< {mape1}"
    );

    // Merge two result tables into one summary JSON.
    let summary = d.join("summary.json");
    run_ok(&[
        "report",
        "--inputs",
        path_str(&scen),
        "--inputs",
        path_str(&pred2),
        "--out",
        path_str(&summary),
    ]);
    let merged: serde_json::Value = serde_json::from_str(&read(&summary)).unwrap();
    let files = merged["files"].as_object().unwrap();
    assert!(files.contains_key("scenarios") && files.contains_key("pred2"));
    assert_eq!(
        files["scenarios"]["columns"],
        serde_json::json!(["scenario", "mape", "rows"])
    );
    assert_eq!(files["scenarios"]["rows"].as_array().unwrap().len(), 2);
    assert_eq!(files["scenarios"]["rows"][0]["rows"], 180);
}

#[test]
fn reruns_are_byte_identical() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let model_a = build_model(a.path(), "42");
    let model_b = build_model(b.path(), "42");

    for name in ["data.csv", "labels.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name} differs between reruns"
        );
    }
    assert_eq!(
        fs::read(&model_a).unwrap(),
        fs::read(&model_b).unwrap(),
        "model JSON differs between reruns"
    );

    let ev = a.path().join("ev.json");
    fs::write(&ev, r#"{"w1": -0.7, "cluster": "2"}"#).unwrap();
    let pred_a = a.path().join("pred_a.csv");
    let pred_b = a.path().join("pred_b.csv");
    for out in [&pred_a, &pred_b] {
        run_ok(&[
            "predict",
            "--model",
            path_str(&model_a),
            "--evidence",
            path_str(&ev),
            "--particles",
            "400",
            "--seed",
            "9",
            "--out",
            path_str(out),
        ]);
    }
    assert_eq!(fs::read(&pred_a).unwrap(), fs::read(&pred_b).unwrap());

    // A different seed must actually change the posterior sample.
    let pred_c = a.path().join("pred_c.csv");
    run_ok(&[
        "predict",
        "--model",
        path_str(&model_a),
        "--evidence",
        path_str(&ev),
        "--particles",
        "400",
        "--seed",
        "10",
        "--out",
        path_str(&pred_c),
    ]);
    assert_ne!(fs::read(&pred_a).unwrap(), fs::read(&pred_c).unwrap());
}

#[test]
fn sequential_run_matches_parallel() {
    let par = TempDir::new().unwrap();
    let seq = TempDir::new().unwrap();
    let model_par = build_model(par.path(), "8");

    // Rebuild with --threads 1 (forced sequential) and compare artifacts.
    let spec = write_demo_spec(seq.path());
    let data = seq.path().join("data.csv");
    let schema = seq.path().join("schema.json");
    run_ok(&[
        "--threads",
        "1",
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "60,60,60",
        "--seed",
        "8",
        "--hide-cluster",
        "--out",
        path_str(&data),
        "--schema-out",
        path_str(&schema),
    ]);
    let labels = seq.path().join("labels.csv");
    run_ok(&[
        "--threads",
        "1",
        "cluster",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters",
        "3",
        "--out-labels",
        path_str(&labels),
    ]);
    let model_seq = seq.path().join("model.json");
    run_ok(&[
        "--threads",
        "1",
        "learn",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters-from",
        path_str(&labels),
        "--out",
        path_str(&model_seq),
    ]);
    assert_eq!(
        fs::read(&model_par).unwrap(),
        fs::read(&model_seq).unwrap(),
        "parallel and sequential runs disagree"
    );
}

#[test]
fn constraints_blacklist_is_respected() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = write_demo_spec(d);
    let data = d.join("data.csv");
    let schema = d.join("schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "60,60,60",
        "--seed",
        "2",
        "--hide-cluster",
        "--out",
        path_str(&data),
        "--schema-out",
        path_str(&schema),
    ]);
    let labels = d.join("labels.csv");
    run_ok(&[
        "cluster",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters",
        "3",
        "--out-labels",
        path_str(&labels),
    ]);

    // Forbid every arc into the target: y must end up parentless (the
    // cluster arc into y is auto-whitelisted, so keep it allowed).
    let constraints = d.join("constraints.json");
    fs::write(
        &constraints,
        r#"{"blacklist": [["w1","y"],["w2","y"],["p1","y"],["p2","y"]]}"#,
    )
    .unwrap();
    let arcs = d.join("arcs.csv");
    run_ok(&[
        "learn",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--clusters-from",
        path_str(&labels),
        "--constraints",
        path_str(&constraints),
        "--out",
        path_str(&d.join("model.json")),
        "--out-arcs",
        path_str(&arcs),
    ]);
    for line in read(&arcs).lines().skip(1) {
        let (parent, child) = line.split_once(',').unwrap();
        if child == "y" {
            assert_eq!(parent, "cluster", "blacklisted arc {line} was learned");
        }
    }
}

#[test]
fn cv_writes_reports_and_densities() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let spec = write_demo_spec(d);
    let data = d.join("data.csv");
    let schema = d.join("schema.json");
    run_ok(&[
        "simulate",
        "--spec",
        path_str(&spec),
        "--n-per-cluster",
        "75,75,75",
        "--seed",
        "21",
        "--hide-cluster",
        "--out",
        path_str(&data),
        "--schema-out",
        path_str(&schema),
    ]);
    let table = d.join("table.json");
    fs::write(&table, r#"[{"id": 1, "evidence_nodes": ["w1", "w2"]}]"#).unwrap();
    let out_dir = d.join("cv");
    run_ok(&[
        "cv",
        "--data",
        path_str(&data),
        "--schema",
        path_str(&schema),
        "--reps",
        "2",
        "--fraction",
        "0.25",
        "--clusters",
        "3",
        "--particles",
        "200",
        "--seed",
        "4",
        "--scenarios",
        path_str(&table),
        "--compare-baseline",
        "--out-dir",
        path_str(&out_dir),
    ]);

    let report = out_dir.join("cv_report.csv");
    assert_eq!(
        read(&report).lines().next().unwrap(),
        "replicate,mape,correlation"
    );
    assert_eq!(line_count(&report), 3);
    for line in read(&report).lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let mape: f64 = cells[1].parse().unwrap();
        let corr: f64 = cells[2].parse().unwrap();
        assert!(mape >= 0.0 && mape < 1.0, "implausible hold-out MAPE {mape}");
        assert!(corr > 0.0, "negative hold-out correlation {corr}");
    }

    let scen = out_dir.join("scenario_mape.csv");
    assert_eq!(
        read(&scen).lines().next().unwrap(),
        "replicate,scenario,mape"
    );
    assert_eq!(line_count(&scen), 3);

    let baseline = out_dir.join("baseline_report.csv");
    assert_eq!(line_count(&baseline), 3);

    let dm = out_dir.join("dm_test.csv");
    assert_eq!(
        read(&dm).lines().next().unwrap(),
        "replicate,statistic,p_value"
    );
    for line in read(&dm).lines().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        let p: f64 = cells[2].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }

    for rep in 0..2 {
        let kde = out_dir.join(format!("kde_rep{rep}.csv"));
        assert!(kde.exists(), "missing {}", kde.display());
        assert_eq!(read(&kde).lines().next().unwrap(), "x,density");
        assert_eq!(line_count(&kde), 513);
    }
}
