//! End-to-end runs: load data, obtain a model, sample paths, score features,
//! and assemble replayable reports.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blackbox::{BlackBoxModel, Classifier, ExternalOptions, ForestConfig, RandomForest};
use crate::error::{Error, Result};
use crate::export::MatrixDoc;
use crate::featgraph::{load_knowledge_graph, FeatureGraph};
use crate::importance::{
    build_transition_matrix, importance_adjacent, importance_fraction, importance_stationary, ImportanceMethod,
    ImportanceVector, StationaryConfig, StationaryImportance, TransitionMatrix,
};
use crate::metrics::{
    coverage, infidelity, pfi, rank_correlation, sensitivity_n, ExplanationScores, InfidelityConfig,
    InfidelityForm, Perturbation, ScoreSource,
};
use crate::pathgen::{generate_paths, PathGenConfig, PathSet};
use crate::policy::CounterfactualPolicy;
use crate::tabular::{load_csv, Dataset, LabelVector};

pub const REPORT_SCHEMA: &str = "cpath-report/1";
pub const EVAL_SCHEMA: &str = "cpath-eval/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSource {
    /// Fit the built-in forest on the run's data and labels.
    Train { forest: ForestConfig },
    /// Load a forest dumped by `RandomForest::to_json`.
    ForestJson { path: PathBuf },
    /// Spawn a child process speaking the line protocol.
    External {
        command: Vec<String>,
        #[serde(default = "default_handshake_secs")]
        handshake_timeout_secs: f64,
    },
}

fn default_handshake_secs() -> f64 {
    10.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GraphSource {
    Complete,
    /// Edge list of column names.
    Knowledge { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: PathBuf,
    #[serde(default = "default_header")]
    pub has_header: bool,
    /// Column holding class labels. It is split off when present in the file.
    pub label_column: Option<String>,
    pub model: ModelSource,
    pub graph: GraphSource,
    #[serde(default)]
    pub policy: CounterfactualPolicy,
    pub n_iter: usize,
    pub k: usize,
    pub seed: u64,
    /// Stop after this many stored paths.
    #[serde(default)]
    pub max_paths: Option<usize>,
    #[serde(default)]
    pub stationary: StationaryConfig,
    /// Method used for the report's ranking.
    #[serde(default = "default_method")]
    pub method: ImportanceMethod,
    /// Worker threads; results do not depend on it, so it is left out of
    /// the report.
    #[serde(skip)]
    pub threads: Option<usize>,
}

fn default_header() -> bool {
    true
}

fn default_method() -> ImportanceMethod {
    ImportanceMethod::Fraction
}

impl RunConfig {
    pub fn new(data: impl Into<PathBuf>, model: ModelSource, seed: u64) -> Self {
        RunConfig {
            data: data.into(),
            has_header: true,
            label_column: Some("y".into()),
            model,
            graph: GraphSource::Complete,
            policy: CounterfactualPolicy::Stochastic,
            n_iter: 1000,
            k: 4,
            seed,
            max_paths: None,
            stationary: StationaryConfig::default(),
            method: ImportanceMethod::Fraction,
            threads: None,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    fn path_config(&self) -> PathGenConfig {
        PathGenConfig {
            n_iter: self.n_iter,
            k: self.k,
            seed: self.seed,
            threads: self.threads,
            max_paths: self.max_paths,
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Loads features and, when the label column exists in the file, labels.
pub fn load_data(path: &Path, has_header: bool, label_column: Option<&str>) -> Result<(Dataset, Option<LabelVector>)> {
    match label_column {
        Some(name) if has_header => match load_csv(path, true, Some(name)) {
            Err(Error::UnknownColumn(_)) => load_csv(path, true, None),
            other => other,
        },
        other => load_csv(path, has_header, other),
    }
}

pub fn load_model(source: &ModelSource, data: &Dataset, labels: Option<&LabelVector>) -> Result<BlackBoxModel> {
    match source {
        ModelSource::Train { forest } => {
            let labels = labels.ok_or_else(|| {
                Error::InvalidConfig("training the built-in forest requires a label column".into())
            })?;
            Ok(BlackBoxModel::Forest(RandomForest::train(data, labels, forest)?))
        }
        ModelSource::ForestJson { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Ok(BlackBoxModel::Forest(RandomForest::from_json(&text)?))
        }
        ModelSource::External {
            command,
            handshake_timeout_secs,
        } => {
            if !(handshake_timeout_secs.is_finite() && *handshake_timeout_secs > 0.0) {
                return Err(Error::InvalidConfig("handshake timeout must be positive".into()));
            }
            let options = ExternalOptions {
                handshake_timeout: Duration::from_secs_f64(*handshake_timeout_secs),
                ..ExternalOptions::default()
            };
            BlackBoxModel::spawn_external(command, options)
        }
    }
}

pub fn load_graph(source: &GraphSource, data: &Dataset) -> Result<FeatureGraph> {
    match source {
        GraphSource::Complete => FeatureGraph::complete(data.n_features()),
        GraphSource::Knowledge { path } => load_knowledge_graph(path, data.names()),
    }
}

/// Paths, matrix and importance scores of one run. Scores are `None` when
/// no path was stored.
#[derive(Debug, Clone)]
pub struct Explanation {
    pub paths: PathSet,
    pub matrix: TransitionMatrix,
    pub fraction: Option<ImportanceVector>,
    pub adjacent: Option<ImportanceVector>,
    pub stationary: Option<StationaryImportance>,
}

impl Explanation {
    pub fn scores(&self, method: ImportanceMethod) -> Option<&[f64]> {
        match method {
            ImportanceMethod::Fraction => self.fraction.as_ref().map(|v| v.scores.as_slice()),
            ImportanceMethod::Adjacent => self.adjacent.as_ref().map(|v| v.scores.as_slice()),
            ImportanceMethod::Stationary => self.stationary.as_ref().map(|s| s.importance.scores.as_slice()),
        }
    }
}

/// Samples paths against an in-memory model and scores features.
pub fn explain(
    model: &dyn Classifier,
    data: &Dataset,
    graph: &FeatureGraph,
    policy: &CounterfactualPolicy,
    paths: &PathGenConfig,
    stationary: &StationaryConfig,
) -> Result<Explanation> {
    let paths = generate_paths(model, data, policy, graph, paths).map_err(|e| e.in_stage("paths"))?;
    let matrix = build_transition_matrix(&paths).map_err(|e| e.in_stage("transition-matrix"))?;
    if matrix.is_zero() {
        return Ok(Explanation {
            paths,
            matrix,
            fraction: None,
            adjacent: None,
            stationary: None,
        });
    }
    let fraction = importance_fraction(&matrix).map_err(|e| e.in_stage("importance"))?;
    let adjacent = importance_adjacent(&matrix).map_err(|e| e.in_stage("importance"))?;
    let stationary = importance_stationary(&matrix, stationary).map_err(|e| e.in_stage("importance"))?;
    Ok(Explanation {
        paths,
        matrix,
        fraction: Some(fraction),
        adjacent: Some(adjacent),
        stationary: Some(stationary),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    /// No counterfactual path was stored.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
    pub data_sha256: String,
    pub model_fingerprint: String,
    pub config: RunConfig,
    /// Seconds since the Unix epoch; the only field that varies between
    /// replays.
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSummary {
    pub count: usize,
    pub n_iter: usize,
    pub untriggered: usize,
    /// Entry `i` counts stored paths of length `i + 1`.
    pub length_histogram: Vec<usize>,
    pub mean_final_swap: Option<f64>,
}

impl PathSummary {
    pub fn of(paths: &PathSet) -> Self {
        let mut length_histogram = vec![0; paths.k];
        for p in &paths.paths {
            if let Some(slot) = p.len().checked_sub(1).and_then(|i| length_histogram.get_mut(i)) {
                *slot += 1;
            }
        }
        let finals: Vec<f64> = paths.paths.iter().filter_map(|p| p.final_swap()).collect();
        PathSummary {
            count: paths.len(),
            n_iter: paths.n_iter,
            untriggered: paths.untriggered,
            length_histogram,
            mean_final_swap: (!finals.is_empty()).then(|| finals.iter().sum::<f64>() / finals.len() as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryBlock {
    pub scores: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceBlock {
    pub fraction: Option<Vec<f64>>,
    pub adjacent: Option<Vec<f64>>,
    pub stationary: Option<StationaryBlock>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainReport {
    pub schema: String,
    pub status: RunStatus,
    pub features: Vec<String>,
    pub importance: ImportanceBlock,
    /// Feature names ordered by the configured method, most important first.
    pub ranking: Vec<String>,
    pub transition_matrix: MatrixDoc,
    pub paths: PathSummary,
    pub provenance: Provenance,
    pub diagnostics: Vec<String>,
}

impl ExplainReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let report: ExplainReport = serde_json::from_str(text)?;
        if report.schema != REPORT_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported report schema {:?}, expected {REPORT_SCHEMA:?}",
                report.schema
            )));
        }
        Ok(report)
    }
}

/// Everything produced by [`run_explain`].
#[derive(Debug)]
pub struct ExplainRun {
    pub report: ExplainReport,
    pub explanation: Explanation,
    pub model: BlackBoxModel,
}

/// Ranks feature indices by descending score; ties go to the lower index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    crate::metrics::top_features(scores, scores.len())
}

pub fn run_explain(config: &RunConfig) -> Result<ExplainRun> {
    let bytes = std::fs::read(&config.data)
        .map_err(|e| Error::io(&config.data, e))
        .map_err(|e| e.in_stage("load-data"))?;
    let (data, labels) = load_data(&config.data, config.has_header, config.label_column.as_deref())
        .map_err(|e| e.in_stage("load-data"))?;
    let model = load_model(&config.model, &data, labels.as_ref()).map_err(|e| e.in_stage("model"))?;
    let graph = load_graph(&config.graph, &data).map_err(|e| e.in_stage("graph"))?;
    let explanation = explain(
        &model,
        &data,
        &graph,
        &config.policy,
        &config.path_config(),
        &config.stationary,
    )?;

    let mut diagnostics = Vec::new();
    let status = if explanation.paths.is_empty() {
        diagnostics.push(format!(
            "no counterfactual path in {} iterations (policy {}, k {}); importance is undefined",
            config.n_iter, config.policy, config.k
        ));
        RunStatus::Empty
    } else {
        RunStatus::Ok
    };
    if let Some(s) = &explanation.stationary {
        diagnostics.push(format!(
            "stationary power iteration: {} iterations, residual {:e}",
            s.iterations, s.residual
        ));
    }
    let names = data.names().to_vec();
    let ranking = explanation
        .scores(config.method)
        .map(|s| ranking(s).into_iter().map(|i| names[i].clone()).collect())
        .unwrap_or_default();
    let report = ExplainReport {
        schema: REPORT_SCHEMA.into(),
        status,
        importance: ImportanceBlock {
            fraction: explanation.fraction.as_ref().map(|v| v.scores.clone()),
            adjacent: explanation.adjacent.as_ref().map(|v| v.scores.clone()),
            stationary: explanation.stationary.as_ref().map(|s| StationaryBlock {
                scores: s.importance.scores.clone(),
                residual: s.residual,
                iterations: s.iterations,
            }),
        },
        ranking,
        transition_matrix: MatrixDoc::new(&explanation.matrix, &names)?,
        paths: PathSummary::of(&explanation.paths),
        provenance: Provenance {
            seed: config.seed,
            config_hash: config.hash()?,
            data_sha256: sha256_hex(&bytes),
            model_fingerprint: model.fingerprint().map_err(|e| e.in_stage("model"))?,
            config: config.clone(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        },
        features: names,
        diagnostics,
    };
    Ok(ExplainRun {
        report,
        explanation,
        model,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Explainer {
    Cpath,
    Pfi,
    Gini,
}

impl FromStr for Explainer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpath" => Ok(Explainer::Cpath),
            "pfi" => Ok(Explainer::Pfi),
            "gini" => Ok(Explainer::Gini),
            other => Err(Error::InvalidConfig(format!("unknown explainer {other:?}"))),
        }
    }
}

impl fmt::Display for Explainer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Explainer::Cpath => "cpath",
            Explainer::Pfi => "pfi",
            Explainer::Gini => "gini",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum Metric {
    /// Spearman correlation with the forest's Gini importance.
    Correlation,
    Coverage,
    Sensitivity { n: usize },
    Infidelity,
}

impl FromStr for Metric {
    type Err = Error;

    /// `correlation`, `coverage`, `sensitivity:<n>` or `infidelity`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlation" => Ok(Metric::Correlation),
            "coverage" => Ok(Metric::Coverage),
            "infidelity" => Ok(Metric::Infidelity),
            other => match other.strip_prefix("sensitivity:") {
                Some(n) => n
                    .parse()
                    .map(|n| Metric::Sensitivity { n })
                    .map_err(|_| Error::InvalidConfig(format!("bad subset size {n:?}"))),
                None => Err(Error::InvalidConfig(format!("unknown metric {other:?}"))),
            },
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::Correlation => f.write_str("correlation"),
            Metric::Coverage => f.write_str("coverage"),
            Metric::Sensitivity { n } => write!(f, "sensitivity:{n}"),
            Metric::Infidelity => f.write_str("infidelity"),
        }
    }
}

/// Settings of a multi-seed evaluation. Repeat `r` uses seed `seed + r`
/// for the forest, the explainer and the metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub explainer: Explainer,
    pub metric: Metric,
    pub repeats: usize,
    pub seed: u64,
    pub forest: ForestConfig,
    pub policy: CounterfactualPolicy,
    pub n_iter: usize,
    pub k: usize,
    pub method: ImportanceMethod,
    pub pfi_repeats: usize,
    /// Planted features for the coverage metric.
    pub signal: Option<Vec<usize>>,
    /// Subsets drawn per sensitivity-n value.
    pub metric_samples: usize,
    pub infidelity_sigma: f64,
    pub infidelity_form: InfidelityForm,
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl EvalConfig {
    pub fn new(explainer: Explainer, metric: Metric, repeats: usize, seed: u64) -> Self {
        EvalConfig {
            explainer,
            metric,
            repeats,
            seed,
            forest: ForestConfig::default(),
            policy: CounterfactualPolicy::Stochastic,
            n_iter: 1000,
            k: 4,
            method: ImportanceMethod::Fraction,
            pfi_repeats: 5,
            signal: None,
            metric_samples: 100,
            infidelity_sigma: 1.0,
            infidelity_form: InfidelityForm::Squared,
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedValue {
    pub seed: u64,
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// `min/mean/max` with two decimals.
    pub table: String,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Some(Summary {
            min,
            mean,
            max,
            table: format!("{min:.2}/{mean:.2}/{max:.2}"),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema: String,
    pub explainer: Explainer,
    pub metric: Metric,
    pub per_seed: Vec<SeedValue>,
    pub summary: Option<Summary>,
    pub config: EvalConfig,
}

/// Importance scores of `explainer` for a trained forest.
pub fn explainer_scores(
    explainer: Explainer,
    forest: &RandomForest,
    data: &Dataset,
    labels: &LabelVector,
    config: &EvalConfig,
    seed: u64,
) -> Result<ExplanationScores> {
    match explainer {
        Explainer::Gini => ExplanationScores::new(forest.gini_importance().scores, ScoreSource::Gini),
        Explainer::Pfi => pfi(forest, data, labels, config.pfi_repeats, seed),
        Explainer::Cpath => {
            let graph = FeatureGraph::complete(data.n_features())?;
            let paths = PathGenConfig {
                n_iter: config.n_iter,
                k: config.k,
                seed,
                threads: config.threads,
                max_paths: None,
            };
            let e = explain(forest, data, &graph, &config.policy, &paths, &StationaryConfig::default())?;
            let scores = e.scores(config.method).ok_or(Error::NoCounterfactuals)?;
            let source = match config.method {
                ImportanceMethod::Stationary => ScoreSource::CpathStationary,
                _ => ScoreSource::CpathFraction,
            };
            ExplanationScores::new(scores.to_vec(), source)
        }
    }
}

fn evaluate_once(data: &Dataset, labels: &LabelVector, config: &EvalConfig, seed: u64) -> Result<f64> {
    let forest = RandomForest::train(data, labels, &config.forest.clone().with_seed(seed))
        .map_err(|e| e.in_stage("model"))?;
    let scores =
        explainer_scores(config.explainer, &forest, data, labels, config, seed).map_err(|e| e.in_stage("explain"))?;
    let value = match config.metric {
        Metric::Correlation => {
            let gini = ExplanationScores::new(forest.gini_importance().scores, ScoreSource::Gini)?;
            rank_correlation(&scores, &gini)
        }
        Metric::Coverage => {
            let signal = config
                .signal
                .as_ref()
                .ok_or_else(|| Error::InvalidConfig("coverage needs the signal features".into()))?;
            coverage(&scores, signal)
        }
        Metric::Sensitivity { n } => sensitivity_n(&forest, data, &scores, n, config.metric_samples, seed),
        Metric::Infidelity => infidelity(
            &forest,
            data,
            &scores,
            &InfidelityConfig {
                perturbation: Perturbation::GaussianNoise {
                    sigma: config.infidelity_sigma,
                },
                n_samples: config.metric_samples,
                seed,
                form: config.infidelity_form,
            },
        )
        .map(|est| est.value),
    };
    value.map_err(|e| e.in_stage("metric"))
}

/// Runs `repeats` train/explain/score rounds. Rounds whose explainer or
/// metric is undefined (no paths, constant scores) are kept as `None`
/// with a note; configuration errors abort.
pub fn evaluate(data: &Dataset, labels: &LabelVector, config: &EvalConfig) -> Result<EvalReport> {
    if config.repeats == 0 {
        return Err(Error::InvalidConfig("repeats must be at least 1".into()).in_stage("evaluate"));
    }
    let mut per_seed = Vec::with_capacity(config.repeats);
    for r in 0..config.repeats {
        let seed = config.seed.wrapping_add(r as u64);
        match evaluate_once(data, labels, config, seed) {
            Ok(v) => per_seed.push(SeedValue {
                seed,
                value: Some(v),
                note: None,
            }),
            Err(e) if matches!(e.root(), Error::NoCounterfactuals | Error::UndefinedCorrelation(_)) => {
                per_seed.push(SeedValue {
                    seed,
                    value: None,
                    note: Some(e.to_string()),
                })
            }
            Err(e) => return Err(e),
        }
    }
    let values: Vec<f64> = per_seed.iter().filter_map(|s| s.value).collect();
    Ok(EvalReport {
        schema: EVAL_SCHEMA.into(),
        explainer: config.explainer,
        metric: config.metric,
        summary: Summary::of(&values),
        per_seed,
        config: config.clone(),
    })
}
