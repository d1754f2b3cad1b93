use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};

use cpath::blackbox::Classifier;
use cpath::metrics::{
    infidelity, pfi, sensitivity_series, ExplanationScores, InfidelityConfig, InfidelityForm, Perturbation,
    ScoreSource,
};
use cpath::rng::seeded;
use cpath::simgen::{simulate, Scenario, SimConfig};
use cpath::{Dataset, ForestConfig, LabelVector, RandomForest, Result};

/// Always predicts class 2 with score `0.5 + w·x`, clamped to `[0, 1]`.
struct LinearVote(Vec<f64>);

impl LinearVote {
    fn score(&self, data: &Dataset, row: usize) -> f64 {
        let z: f64 = self.0.iter().enumerate().map(|(j, w)| w * data.value(row, j)).sum();
        (0.5 + z).clamp(0.0, 1.0)
    }
}

impl Classifier for LinearVote {
    fn n_classes(&self) -> u32 {
        2
    }
    fn n_features(&self) -> Option<usize> {
        Some(self.0.len())
    }
    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        LabelVector::new(vec![2; data.n_rows()], 2)
    }
    fn class_scores(&self, data: &Dataset, classes: &[u32]) -> Result<Vec<f64>> {
        Ok(classes
            .iter()
            .enumerate()
            .map(|(row, &c)| {
                let s = self.score(data, row);
                if c == 2 {
                    s
                } else {
                    1.0 - s
                }
            })
            .collect())
    }
}

/// Smooth nonlinear score `S(x₁ + x₂² − x₃)` for class 2.
struct Curved;

impl Curved {
    fn score(&self, x: &[f64]) -> f64 {
        1.0 / (1.0 + (-(x[0] + x[1] * x[1] - x[2])).exp())
    }
}

impl Classifier for Curved {
    fn n_classes(&self) -> u32 {
        2
    }
    fn n_features(&self) -> Option<usize> {
        Some(3)
    }
    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        LabelVector::new(vec![2; data.n_rows()], 2)
    }
    fn class_scores(&self, data: &Dataset, _classes: &[u32]) -> Result<Vec<f64>> {
        Ok((0..data.n_rows()).map(|i| self.score(&data.row(i))).collect())
    }
}

fn small_grid(p: usize, n: usize, scale: f64) -> Dataset {
    let cols = (0..p)
        .map(|j| (0..n).map(|i| scale * (((i * 7 + j * 3) % 11) as f64 - 5.0) / 5.0).collect())
        .collect();
    Dataset::from_columns(Dataset::default_names(p), cols).unwrap()
}

fn gaussian(sigma: f64, n_samples: usize) -> InfidelityConfig {
    InfidelityConfig {
        perturbation: Perturbation::GaussianNoise { sigma },
        n_samples,
        seed: 5,
        form: InfidelityForm::Squared,
    }
}

#[test]
fn exact_linear_surrogate_has_vanishing_infidelity() {
    let w = vec![0.02, -0.03, 0.01];
    let model = LinearVote(w.clone());
    let data = small_grid(3, 40, 1.0);
    let phi = ExplanationScores::new(w, ScoreSource::External).unwrap();
    let mut last = f64::INFINITY;
    for sigma in [1.0, 0.1, 0.01] {
        let est = infidelity(&model, &data, &phi, &gaussian(sigma, 50)).unwrap();
        assert!(est.value <= last + 1e-18);
        last = est.value;
    }
    assert!(last < 1e-20, "{last}");
}

#[test]
fn zero_attribution_reduces_to_output_variance() {
    let model = LinearVote(vec![0.05, 0.0]);
    let data = small_grid(2, 30, 1.0);
    let zero = ExplanationScores::new(vec![0.0, 0.0], ScoreSource::External).unwrap();
    let sigma = 0.5;
    let est = infidelity(&model, &data, &zero, &gaussian(sigma, 400)).unwrap();
    // unclamped: f(x) − f(x − I) = 0.05·I₁, so E[·²] = 0.0025·σ²
    let closed = 0.0025 * sigma * sigma;
    assert!((est.value - closed).abs() < 4.0 * est.std_error + 1e-6, "{} vs {closed}", est.value);
}

#[test]
fn infidelity_standard_error_shrinks_with_samples() {
    let data = small_grid(3, 20, 1.0);
    let phi = ExplanationScores::new(vec![0.1, 0.0, -0.1], ScoreSource::External).unwrap();
    let few = infidelity(&Curved, &data, &phi, &gaussian(0.5, 10)).unwrap();
    let many = infidelity(&Curved, &data, &phi, &gaussian(0.5, 160)).unwrap();
    assert!(many.std_error < few.std_error / 2.0);
    assert!(few.value >= 0.0 && many.value >= 0.0);
    assert_eq!(many, infidelity(&Curved, &data, &phi, &gaussian(0.5, 160)).unwrap());
}

/// Least-squares fit of `f(x) − f(x − I)` on `I` over fresh perturbations.
fn least_squares_attribution(data: &Dataset, sigma: f64, draws: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, sigma).unwrap();
    let mut rng = seeded(1234);
    let p = data.n_features();
    let mut design = Vec::new();
    let mut target = Vec::new();
    for _ in 0..draws {
        for i in 0..data.n_rows() {
            let x = data.row(i);
            let shift: Vec<f64> = (0..p).map(|_| normal.sample(&mut rng)).collect();
            let moved: Vec<f64> = x.iter().zip(&shift).map(|(a, b)| a - b).collect();
            design.extend_from_slice(&shift);
            target.push(Curved.score(&x) - Curved.score(&moved));
        }
    }
    let a = DMatrix::from_row_slice(target.len(), p, &design);
    let b = DVector::from_vec(target);
    let solution = (a.transpose() * &a).lu().solve(&(a.transpose() * b)).unwrap();
    solution.iter().copied().collect()
}

#[test]
fn better_local_fit_has_lower_infidelity() {
    let data = small_grid(3, 25, 0.8);
    let sigma = 0.3;
    let fitted = least_squares_attribution(&data, sigma, 400);
    let cfg = gaussian(sigma, 200);
    let best = infidelity(&Curved, &data, &ExplanationScores::new(fitted.clone(), ScoreSource::External).unwrap(), &cfg)
        .unwrap();
    for offset in [[0.1, 0.0, 0.0], [0.0, -0.1, 0.05], [0.05, 0.05, 0.05]] {
        let worse: Vec<f64> = fitted.iter().zip(offset).map(|(a, b)| a + b).collect();
        let other = infidelity(&Curved, &data, &ExplanationScores::new(worse, ScoreSource::External).unwrap(), &cfg)
            .unwrap();
        assert!(best.value <= other.value, "{} > {}", best.value, other.value);
    }
}

#[test]
fn pfi_of_unsplit_feature_is_exactly_zero_for_the_forest() {
    let sim = simulate(&SimConfig::new(Scenario::CondDep1, 1, 2)).unwrap();
    let mut cols: Vec<Vec<f64>> = (0..3).map(|j| sim.dataset.column(j).to_vec()).collect();
    cols[2] = vec![1.5; sim.dataset.n_rows()];
    let data = Dataset::from_columns(Dataset::default_names(3), cols).unwrap();
    let forest = RandomForest::train(
        &data,
        &sim.labels,
        &ForestConfig {
            n_trees: 60,
            ..ForestConfig::default()
        },
    )
    .unwrap();
    assert_eq!(forest.gini_importance().scores[2], 0.0);
    let imp = pfi(&forest, &data, &sim.labels, 10, 3).unwrap();
    assert_eq!(imp.scores[2], 0.0);
    assert!(imp.scores[0] > 0.0);
}

/// Predicts class 2 when `x₁ > 0`.
struct SignOfFirst;

impl Classifier for SignOfFirst {
    fn n_classes(&self) -> u32 {
        2
    }
    fn n_features(&self) -> Option<usize> {
        None
    }
    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        LabelVector::new(data.column(0).iter().map(|&v| if v > 0.0 { 2 } else { 1 }).collect(), 2)
    }
}

#[test]
fn sensitivity_one_separates_the_signal_feature() {
    let data = small_grid(5, 200, 1.0);
    let scores = ExplanationScores::new(vec![0.6, 0.1, 0.1, 0.1, 0.1], ScoreSource::External).unwrap();
    let series = sensitivity_series(&SignOfFirst, &data, &scores, 1, 60, 2).unwrap();
    for (subset, drop) in series.subsets.iter().zip(&series.output_drops) {
        if subset == &[0] {
            assert!(*drop > 0.2);
        } else {
            assert_eq!(*drop, 0.0);
        }
    }
    let r = cpath::metrics::pearson(&series.attribution_sums, &series.output_drops).unwrap();
    assert!(r > 0.9, "{r}");
}
