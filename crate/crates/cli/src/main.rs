use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cpath::blackbox::{serve, ForestConfig, RandomForest};
use cpath::export::{export_dot, export_paths_json};
use cpath::featgraph::format_edge_list;
use cpath::importance::{ImportanceMethod, ImportanceVector, StationaryConfig};
use cpath::metrics::{coverage, top_features, ExplanationScores, InfidelityForm, ScoreSource};
use cpath::pipeline::{
    evaluate, load_data, run_explain, EvalConfig, ExplainReport, Explainer, GraphSource, Metric, ModelSource,
    RunConfig, RunStatus,
};
use cpath::simgen::{simulate, Scenario, SimConfig, SimOutput};
use cpath::{CounterfactualPolicy, Error};

const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_EMPTY: u8 = 4;

#[derive(Parser)]
#[command(name = "cpath", version, about = "Global feature importance from counterfactual paths")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample counterfactual paths against a model and write an importance report.
    Explain(ExplainArgs),
    /// Generate a synthetic benchmark dataset.
    Simulate(SimulateArgs),
    /// Score an explainer over several seeds.
    Evaluate(EvaluateArgs),
    /// Simulate, train, explain and score coverage in one go.
    Pipeline(PipelineArgs),
    /// Train the built-in forest and dump it as JSON.
    Train(TrainArgs),
    /// Answer the line protocol on stdin/stdout with a dumped forest.
    Serve {
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Args, Clone)]
struct ForestArgs {
    #[arg(long, default_value_t = 500)]
    trees: usize,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    #[arg(long, default_value_t = 1)]
    min_leaf: usize,
}

impl ForestArgs {
    fn config(&self, seed: u64) -> ForestConfig {
        ForestConfig {
            n_trees: self.trees,
            max_depth: self.max_depth,
            mtry: self.mtry,
            min_leaf: self.min_leaf,
            seed,
        }
    }
}

#[derive(Args, Clone)]
struct WalkArgs {
    /// `stochastic` or `threshold:<kappa>`.
    #[arg(long, default_value = "stochastic")]
    policy: CounterfactualPolicy,
    #[arg(long, default_value_t = 1000)]
    n_iter: usize,
    /// Maximum path length.
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// Stop after this many stored paths.
    #[arg(long)]
    max_paths: Option<usize>,
    /// `fraction`, `adjacent` or `stationary`.
    #[arg(long, default_value = "fraction", value_parser = parse_method)]
    method: ImportanceMethod,
}

fn parse_method(s: &str) -> Result<ImportanceMethod, String> {
    match s {
        "fraction" => Ok(ImportanceMethod::Fraction),
        "adjacent" => Ok(ImportanceMethod::Adjacent),
        "stationary" => Ok(ImportanceMethod::Stationary),
        other => Err(format!("unknown importance method {other:?}")),
    }
}

#[derive(Args)]
struct ExplainArgs {
    /// Input CSV with a header row.
    #[arg(long, required_unless_present = "replay")]
    data: Option<PathBuf>,
    /// Label column; used for training and dropped from the features.
    #[arg(long, default_value = "y")]
    labels: String,
    /// Forest dumped by `cpath train`.
    #[arg(long, conflicts_with = "external")]
    model: Option<PathBuf>,
    /// Knowledge graph as a `source,target` edge list of column names.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 0.01)]
    damping: f64,
    #[arg(long, default_value_t = 10.0)]
    handshake_timeout: f64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dot: Option<PathBuf>,
    #[arg(long)]
    paths_out: Option<PathBuf>,
    /// Re-run the configuration recorded in an earlier report.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// External model command, after `--`.
    #[arg(last = true)]
    external: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// cond-dep-1, cond-dep-2, correlation, cond-indep or barabasi.
    #[arg(long)]
    scenario: Scenario,
    #[arg(long, default_value_t = 2)]
    noise: usize,
    #[arg(long, default_value_t = 100)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Graph size for the barabasi scenario.
    #[arg(long, default_value_t = 20)]
    vertices: usize,
    /// Edges per new vertex for the barabasi scenario.
    #[arg(long, default_value_t = 1)]
    m: usize,
    #[arg(long)]
    out: PathBuf,
    /// Edge list of the feature graph (barabasi only).
    #[arg(long)]
    graph_out: Option<PathBuf>,
    /// Sidecar naming the signal features; defaults to `<out>.signal.json`.
    #[arg(long)]
    signal_out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    labels: String,
    /// cpath, pfi or gini.
    #[arg(long, default_value = "cpath")]
    explainer: Explainer,
    /// correlation, coverage, sensitivity:<n> or infidelity.
    #[arg(long, default_value = "correlation")]
    metric: Metric,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Signal features as comma-separated column names, for coverage.
    #[arg(long, value_delimiter = ',', conflicts_with = "signal_file")]
    signal: Vec<String>,
    /// Sidecar written by `cpath simulate`.
    #[arg(long)]
    signal_file: Option<PathBuf>,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long, default_value_t = 5)]
    pfi_repeats: usize,
    /// Subsets (sensitivity) or perturbation draws (infidelity) per value.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    /// Use the unsquared bracket form of infidelity.
    #[arg(long)]
    literal_infidelity: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    #[arg(long, default_value = "cond-dep-1")]
    scenario: Scenario,
    #[arg(long, default_value_t = 2)]
    noise: usize,
    #[arg(long, default_value_t = 100)]
    rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    walk: WalkArgs,
    #[command(flatten)]
    forest: ForestArgs,
    /// Output directory; created when missing.
    #[arg(long)]
    dir: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "y")]
    labels: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    forest: ForestArgs,
    #[arg(long)]
    out: PathBuf,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match (&e, e.root()) {
            (_, Error::NoCounterfactuals) => EXIT_EMPTY,
            (_, Error::Protocol(_) | Error::Timeout(_) | Error::ColumnCountMismatch { .. }) => EXIT_MODEL,
            (Error::Stage { stage: "model", .. }, _) => EXIT_MODEL,
            _ => EXIT_CONFIG,
        };
        let message = match e {
            Error::Stage { .. } => e.to_string(),
            other => format!("run: {other}"),
        };
        Failure { code, message }
    }
}

fn fail(code: u8, stage: &str, msg: impl std::fmt::Display) -> Failure {
    Failure {
        code,
        message: format!("{stage}: {msg}"),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| fail(EXIT_CONFIG, "write-output", format_args!("{}: {e}", path.display())))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(p) => write_file(p, text),
        None => {
            let mut stdout = io::stdout().lock();
            stdout
                .write_all(text.as_bytes())
                .and_then(|_| stdout.write_all(b"\n"))
                .map_err(|e| fail(EXIT_CONFIG, "write-output", e))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(f) = configure_threads() {
        eprintln!("error: {}", f.message);
        return ExitCode::from(f.code);
    }
    let result = match cli.command {
        Command::Explain(a) => cmd_explain(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Pipeline(a) => cmd_pipeline(a),
        Command::Train(a) => cmd_train(a),
        Command::Serve { model } => cmd_serve(&model),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Honors `CPATH_THREADS`; 0 or unset lets rayon decide.
fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CPATH_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| fail(EXIT_CONFIG, "config", format_args!("CPATH_THREADS={raw:?} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| fail(EXIT_CONFIG, "config", e))?;
    }
    Ok(())
}

fn explain_config(a: &ExplainArgs) -> Result<RunConfig, Failure> {
    if let Some(path) = &a.replay {
        let text = fs::read_to_string(path).map_err(|e| fail(EXIT_CONFIG, "replay", format_args!("{}: {e}", path.display())))?;
        let report = ExplainReport::from_json(&text).map_err(|e| Failure::from(e.in_stage("replay")))?;
        return Ok(report.provenance.config);
    }
    let data = a.data.clone().expect("clap enforces --data without --replay");
    let model = if !a.external.is_empty() {
        ModelSource::External {
            command: a.external.clone(),
            handshake_timeout_secs: a.handshake_timeout,
        }
    } else if let Some(path) = &a.model {
        ModelSource::ForestJson { path: path.clone() }
    } else {
        ModelSource::Train {
            forest: a.forest.config(a.seed),
        }
    };
    Ok(RunConfig {
        data,
        has_header: true,
        label_column: Some(a.labels.clone()),
        model,
        graph: match &a.graph {
            Some(path) => GraphSource::Knowledge { path: path.clone() },
            None => GraphSource::Complete,
        },
        policy: a.walk.policy,
        n_iter: a.walk.n_iter,
        k: a.walk.k,
        seed: a.seed,
        max_paths: a.walk.max_paths,
        stationary: StationaryConfig {
            damping: a.damping,
            ..StationaryConfig::default()
        },
        method: a.walk.method,
        threads: None,
    })
}

fn cmd_explain(a: ExplainArgs) -> Result<u8, Failure> {
    let config = explain_config(&a)?;
    let run = run_explain(&config)?;
    if let Some(path) = &a.replay {
        let text = fs::read_to_string(path).unwrap_or_default();
        if let Ok(old) = ExplainReport::from_json(&text) {
            if old.provenance.data_sha256 != run.report.provenance.data_sha256 {
                eprintln!("warning: replay: data file changed since the original run");
            }
        }
    }
    emit(a.out.as_deref(), &run.report.to_json()?)?;
    let names = run.report.features.clone();
    if let Some(path) = &a.dot {
        let importance = run.explanation.fraction.clone().unwrap_or(ImportanceVector {
            scores: vec![0.0; names.len()],
            method: ImportanceMethod::Fraction,
        });
        write_file(path, &export_dot(&run.explanation.matrix, &importance, &names)?)?;
    }
    if let Some(path) = &a.paths_out {
        write_file(path, &export_paths_json(&run.explanation.paths, &names)?)?;
    }
    if run.report.status == RunStatus::Empty {
        for d in &run.report.diagnostics {
            eprintln!("paths: {d}");
        }
        return Ok(EXIT_EMPTY);
    }
    Ok(0)
}

fn sidecar(sim: &SimOutput, scenario: Scenario, seed: u64) -> serde_json::Value {
    let names = sim.dataset.names();
    json!({
        "scenario": scenario.name(),
        "seed": seed,
        "label_column": "y",
        "signal_features": sim.signal_features.iter().map(|&i| names[i].clone()).collect::<Vec<_>>(),
        "signal_indices": sim.signal_features,
    })
}

fn default_sidecar(out: &Path) -> PathBuf {
    out.with_extension("signal.json")
}

fn cmd_simulate(a: SimulateArgs) -> Result<u8, Failure> {
    let config = SimConfig {
        scenario: a.scenario,
        n_rows: a.rows,
        n_noise: a.noise,
        seed: a.seed,
        n_vertices: a.vertices,
        m: a.m,
    };
    let sim = simulate(&config).map_err(|e| e.in_stage("simulate"))?;
    sim.dataset.save_csv(&a.out, Some(("y", &sim.labels)))?;
    let signal_path = a.signal_out.clone().unwrap_or_else(|| default_sidecar(&a.out));
    write_file(&signal_path, &serde_json::to_string_pretty(&sidecar(&sim, a.scenario, a.seed)).expect("plain json"))?;
    if let Some(path) = &a.graph_out {
        match &sim.graph {
            Some(g) => write_file(path, &format_edge_list(g, sim.dataset.names()))?,
            None => return Err(fail(EXIT_CONFIG, "simulate", "--graph-out needs the barabasi scenario")),
        }
    }
    Ok(0)
}

fn signal_indices(names: &[String], wanted: &[String]) -> Result<Vec<usize>, Failure> {
    wanted
        .iter()
        .map(|w| {
            names
                .iter()
                .position(|n| n == w)
                .ok_or_else(|| fail(EXIT_CONFIG, "evaluate", format_args!("unknown signal feature {w:?}")))
        })
        .collect()
}

fn read_sidecar(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| fail(EXIT_CONFIG, "evaluate", format_args!("{}: {e}", path.display())))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| fail(EXIT_CONFIG, "evaluate", e))?;
    value["signal_features"]
        .as_array()
        .and_then(|a| a.iter().map(|v| v.as_str().map(String::from)).collect())
        .ok_or_else(|| fail(EXIT_CONFIG, "evaluate", "sidecar lacks signal_features"))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<u8, Failure> {
    let (data, labels) = load_data(&a.data, true, Some(&a.labels)).map_err(|e| e.in_stage("load-data"))?;
    let labels = labels.ok_or_else(|| fail(EXIT_CONFIG, "load-data", format_args!("label column {:?} not found", a.labels)))?;
    let wanted = match &a.signal_file {
        Some(path) => read_sidecar(path)?,
        None => a.signal.clone(),
    };
    let signal = if wanted.is_empty() {
        None
    } else {
        Some(signal_indices(data.names(), &wanted)?)
    };
    let config = EvalConfig {
        forest: a.forest.config(a.seed),
        policy: a.walk.policy,
        n_iter: a.walk.n_iter,
        k: a.walk.k,
        method: a.walk.method,
        pfi_repeats: a.pfi_repeats,
        signal,
        metric_samples: a.samples,
        infidelity_sigma: a.sigma,
        infidelity_form: if a.literal_infidelity {
            InfidelityForm::Literal
        } else {
            InfidelityForm::Squared
        },
        ..EvalConfig::new(a.explainer, a.metric, a.repeats, a.seed)
    };
    let report = evaluate(&data, &labels, &config)?;
    emit(a.out.as_deref(), &serde_json::to_string_pretty(&report).expect("plain json"))?;
    match &report.summary {
        Some(s) => {
            eprintln!("{} {}: {}", report.explainer, report.metric, s.table);
            Ok(0)
        }
        None => Err(fail(EXIT_EMPTY, "evaluate", "metric undefined for every seed")),
    }
}

fn cmd_pipeline(a: PipelineArgs) -> Result<u8, Failure> {
    fs::create_dir_all(&a.dir).map_err(|e| fail(EXIT_CONFIG, "write-output", format_args!("{}: {e}", a.dir.display())))?;
    let data_path = a.dir.join("data.csv");
    let sim = simulate(&SimConfig {
        n_rows: a.rows,
        ..SimConfig::new(a.scenario, a.noise, a.seed)
    })
    .map_err(|e| e.in_stage("simulate"))?;
    sim.dataset.save_csv(&data_path, Some(("y", &sim.labels)))?;
    write_file(
        &a.dir.join("data.signal.json"),
        &serde_json::to_string_pretty(&sidecar(&sim, a.scenario, a.seed)).expect("plain json"),
    )?;
    let mut graph = GraphSource::Complete;
    if let Some(g) = &sim.graph {
        let path = a.dir.join("graph.csv");
        write_file(&path, &format_edge_list(g, sim.dataset.names()))?;
        graph = GraphSource::Knowledge { path };
    }
    let config = RunConfig {
        graph,
        policy: a.walk.policy,
        n_iter: a.walk.n_iter,
        k: a.walk.k,
        max_paths: a.walk.max_paths,
        method: a.walk.method,
        ..RunConfig::new(&data_path, ModelSource::Train { forest: a.forest.config(a.seed) }, a.seed)
    };
    let run = run_explain(&config)?;
    if let Some(forest) = run.model.as_forest() {
        write_file(&a.dir.join("forest.json"), &forest.to_json()?)?;
    }
    write_file(&a.dir.join("report.json"), &run.report.to_json()?)?;
    let names = run.report.features.clone();
    write_file(&a.dir.join("paths.json"), &export_paths_json(&run.explanation.paths, &names)?)?;
    if run.report.status == RunStatus::Empty {
        eprintln!("paths: no counterfactual path found; see report.json");
        return Ok(EXIT_EMPTY);
    }
    let scores = run.explanation.scores(config.method).expect("paths exist").to_vec();
    write_file(
        &a.dir.join("report.dot"),
        &export_dot(
            &run.explanation.matrix,
            &ImportanceVector {
                scores: scores.clone(),
                method: config.method,
            },
            &names,
        )?,
    )?;
    let cpath_cov = coverage(&ExplanationScores::new(scores.clone(), ScoreSource::CpathFraction)?, &sim.signal_features)?;
    let gini_cov = match run.model.as_forest() {
        Some(f) => Some(coverage(&ExplanationScores::new(f.gini_importance().scores, ScoreSource::Gini)?, &sim.signal_features)?),
        None => None,
    };
    let top: Vec<&str> = top_features(&scores, sim.signal_features.len())
        .into_iter()
        .map(|i| names[i].as_str())
        .collect();
    let summary = json!({
        "scenario": a.scenario.name(),
        "seed": a.seed,
        "paths": run.report.paths.count,
        "top_features": top,
        "signal_features": sim.signal_features.iter().map(|&i| names[i].clone()).collect::<Vec<_>>(),
        "coverage": { "cpath": cpath_cov, "gini": gini_cov },
    });
    let text = serde_json::to_string_pretty(&summary).expect("plain json");
    write_file(&a.dir.join("summary.json"), &text)?;
    println!("{text}");
    Ok(0)
}

fn cmd_train(a: TrainArgs) -> Result<u8, Failure> {
    let (data, labels) = load_data(&a.data, true, Some(&a.labels)).map_err(|e| e.in_stage("load-data"))?;
    let labels = labels.ok_or_else(|| fail(EXIT_CONFIG, "load-data", format_args!("label column {:?} not found", a.labels)))?;
    let forest = RandomForest::train(&data, &labels, &a.forest.config(a.seed)).map_err(|e| e.in_stage("model"))?;
    write_file(&a.out, &forest.to_json()?)?;
    Ok(0)
}

fn cmd_serve(model: &Path) -> Result<u8, Failure> {
    let text = fs::read_to_string(model).map_err(|e| fail(EXIT_MODEL, "model", format_args!("{}: {e}", model.display())))?;
    let forest = RandomForest::from_json(&text).map_err(|e| e.in_stage("model"))?;
    let stdin = io::stdin();
    serve(&forest, BufReader::new(stdin.lock()), io::stdout().lock()).map_err(|e| e.in_stage("serve"))?;
    Ok(0)
}
