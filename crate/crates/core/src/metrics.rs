//! Scoring explanations: a permutation-importance baseline, agreement with a
//! reference ranking, recovery of planted features, and two perturbation
//! faithfulness measures.

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::blackbox::{check_width, Classifier};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::tabular::{Dataset, LabelVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSource {
    CpathFraction,
    CpathStationary,
    Pfi,
    Gini,
    External,
}

/// A global attribution vector, one finite score per feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationScores {
    pub scores: Vec<f64>,
    pub source: ScoreSource,
}

impl ExplanationScores {
    pub fn new(scores: Vec<f64>, source: ScoreSource) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidConfig("explanation scores must be finite".into()));
        }
        Ok(ExplanationScores { scores, source })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

fn accuracy(pred: &LabelVector, truth: &LabelVector) -> Result<f64> {
    pred.agreement(truth)
}

/// Permutation feature importance: mean accuracy drop over `n_repeats`
/// shuffles of each column. Feature `j` draws from substream `j` of `seed`.
pub fn pfi(
    model: &dyn Classifier,
    data: &Dataset,
    labels: &LabelVector,
    n_repeats: usize,
    seed: u64,
) -> Result<ExplanationScores> {
    if n_repeats == 0 {
        return Err(Error::InvalidConfig("n_repeats must be at least 1".into()));
    }
    if labels.len() != data.n_rows() {
        return Err(Error::LengthMismatch {
            left: labels.len(),
            right: data.n_rows(),
        });
    }
    check_width(model, data)?;
    let baseline = accuracy(&model.predict(data)?, labels)?;
    let mut scores = Vec::with_capacity(data.n_features());
    for j in 0..data.n_features() {
        let mut rng = substream(seed, j as u64);
        let mut drop = 0.0;
        for _ in 0..n_repeats {
            let permuted = data.permute_column(j, &mut rng)?;
            drop += baseline - accuracy(&model.predict(&permuted)?, labels)?;
        }
        scores.push(drop / n_repeats as f64);
    }
    ExplanationScores::new(scores, ScoreSource::Pfi)
}

/// Ranks starting at 1; tied values share their average rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

/// Pearson correlation; undefined when either series is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "need at least two points, got {}",
            a.len()
        )));
    }
    let constant = |v: &[f64]| v.iter().all(|x| *x == v[0]);
    if constant(a) || constant(b) {
        return Err(Error::UndefinedCorrelation(format!(
            "constant series (left {}, right {})",
            constant(a),
            constant(b)
        )));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation(format!(
            "zero variance (left {saa:e}, right {sbb:e})"
        )));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman rank correlation with average ranks for ties.
pub fn rank_correlation(a: &ExplanationScores, b: &ExplanationScores) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two features".into()));
    }
    pearson(&average_ranks(&a.scores), &average_ranks(&b.scores))
}

/// Indices of the `m` highest scores; ties go to the lower index.
pub fn top_features(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Share of the planted features found among the top-`m` scores, where
/// `m` is the number of planted features.
pub fn coverage(scores: &ExplanationScores, signal: &[usize]) -> Result<f64> {
    if signal.is_empty() {
        return Err(Error::InvalidConfig("signal feature set is empty".into()));
    }
    if let Some(&bad) = signal.iter().find(|&&s| s >= scores.len()) {
        return Err(Error::FeatureOutOfRange {
            index: bad,
            p: scores.len(),
        });
    }
    let top = top_features(&scores.scores, signal.len());
    let hits = top.iter().filter(|t| signal.contains(t)).count();
    Ok(hits as f64 / signal.len() as f64)
}

/// The two series behind a sensitivity-n value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySeries {
    pub subsets: Vec<Vec<usize>>,
    pub attribution_sums: Vec<f64>,
    pub output_drops: Vec<f64>,
}

/// Draws `n_samples` random feature subsets of size `n_subset` and, for
/// each, pairs the summed attribution with the drop in the share of rows
/// still predicted as their original class once the subset's columns are
/// permuted.
pub fn sensitivity_series(
    model: &dyn Classifier,
    data: &Dataset,
    scores: &ExplanationScores,
    n_subset: usize,
    n_samples: usize,
    seed: u64,
) -> Result<SensitivitySeries> {
    let p = data.n_features();
    if scores.len() != p {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: p,
        });
    }
    if n_subset == 0 || n_subset > p {
        return Err(Error::InvalidConfig(format!("subset size {n_subset} outside 1..={p}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    check_width(model, data)?;
    let original = model.predict(data)?;
    let mut series = SensitivitySeries {
        subsets: Vec::with_capacity(n_samples),
        attribution_sums: Vec::with_capacity(n_samples),
        output_drops: Vec::with_capacity(n_samples),
    };
    for s in 0..n_samples {
        let mut rng = substream(seed, s as u64);
        let mut subset = index::sample(&mut rng, p, n_subset).into_vec();
        subset.sort_unstable();
        let mut work = data.clone();
        for &j in &subset {
            work.permute_column_in_place(j, &mut rng)?;
        }
        let kept = original.agreement(&model.predict(&work)?)?;
        series.attribution_sums.push(subset.iter().map(|&j| scores.scores[j]).sum());
        series.output_drops.push(1.0 - kept);
        series.subsets.push(subset);
    }
    Ok(series)
}

/// Pearson correlation of [`sensitivity_series`].
pub fn sensitivity_n(
    model: &dyn Classifier,
    data: &Dataset,
    scores: &ExplanationScores,
    n_subset: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let series = sensitivity_series(model, data, scores, n_subset, n_samples, seed)?;
    pearson(&series.attribution_sums, &series.output_drops).map_err(|e| match e {
        Error::UndefinedCorrelation(msg) => Error::UndefinedCorrelation(format!(
            "sensitivity-{n_subset} over {n_samples} subsets: {msg}"
        )),
        other => other,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    /// `I ~ Normal(0, sigma²)` per feature.
    GaussianNoise { sigma: f64 },
    /// `I = x − baseline`, i.e. the input is replaced by the baseline.
    BaselineReplace { baseline: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfidelityForm {
    /// `(Iᵀφ − (f(x) − f(x − I)))²`
    #[default]
    Squared,
    /// `Iᵀφ − (f(x) − f(x − I))²`, bracketed literally.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfidelityConfig {
    pub perturbation: Perturbation,
    pub n_samples: usize,
    pub seed: u64,
    #[serde(default)]
    pub form: InfidelityForm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfidelityEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_terms: usize,
}

/// Monte Carlo infidelity of a global attribution vector broadcast to every
/// row. `f` is the model's score for each row's originally predicted class.
pub fn infidelity(
    model: &dyn Classifier,
    data: &Dataset,
    scores: &ExplanationScores,
    config: &InfidelityConfig,
) -> Result<InfidelityEstimate> {
    let p = data.n_features();
    let n = data.n_rows();
    if scores.len() != p {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: p,
        });
    }
    if config.n_samples == 0 {
        return Err(Error::InvalidConfig("n_samples must be at least 1".into()));
    }
    let noise = match &config.perturbation {
        Perturbation::GaussianNoise { sigma } => {
            if !(*sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidConfig(format!("sigma {sigma} must be positive")));
            }
            Some(Normal::new(0.0, *sigma).expect("positive sigma"))
        }
        Perturbation::BaselineReplace { baseline } => {
            if baseline.len() != p {
                return Err(Error::LengthMismatch {
                    left: baseline.len(),
                    right: p,
                });
            }
            None
        }
    };
    check_width(model, data)?;
    let classes = model.predict(data)?;
    let f_x = model.class_scores(data, classes.labels())?;

    let mut terms = Vec::with_capacity(n * config.n_samples);
    for s in 0..config.n_samples {
        let mut rng = substream(config.seed, s as u64);
        // perturbation I, column-major like the dataset
        let shift: Vec<Vec<f64>> = (0..p)
            .map(|j| match (&noise, &config.perturbation) {
                (Some(normal), _) => (0..n).map(|_| normal.sample(&mut rng)).collect(),
                (None, Perturbation::BaselineReplace { baseline }) => {
                    data.column(j).iter().map(|x| x - baseline[j]).collect()
                }
                (None, Perturbation::GaussianNoise { .. }) => unreachable!("noise is set for gaussian"),
            })
            .collect();
        let perturbed = Dataset::from_columns(
            data.names().to_vec(),
            (0..p)
                .map(|j| data.column(j).iter().zip(&shift[j]).map(|(x, d)| x - d).collect())
                .collect(),
        )?;
        let f_pert = model.class_scores(&perturbed, classes.labels())?;
        for i in 0..n {
            let predicted: f64 = (0..p).map(|j| shift[j][i] * scores.scores[j]).sum();
            let actual = f_x[i] - f_pert[i];
            terms.push(match config.form {
                InfidelityForm::Squared => (predicted - actual).powi(2),
                InfidelityForm::Literal => predicted - actual.powi(2),
            });
        }
    }
    let count = terms.len() as f64;
    let value = terms.iter().sum::<f64>() / count;
    let var = if terms.len() > 1 {
        terms.iter().map(|t| (t - value).powi(2)).sum::<f64>() / (count - 1.0)
    } else {
        0.0
    };
    Ok(InfidelityEstimate {
        value,
        std_error: (var / count).sqrt(),
        n_terms: terms.len(),
    })
}
