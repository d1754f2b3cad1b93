//! The prediction oracle being explained.

pub mod external;
pub mod forest;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tabular::{Dataset, LabelVector};

pub use external::{serve, ExternalModel, ExternalOptions, HELLO};
pub use forest::{gini_impurity, DecisionTree, ForestConfig, GiniImportance, RandomForest};

/// Anything that maps a dataset to class labels in `1..=g`.
///
/// Implementations must be pure: the same dataset always yields the same
/// labels.
pub trait Classifier: Send + Sync {
    fn n_classes(&self) -> u32;

    /// Expected column count, when the model knows it.
    fn n_features(&self) -> Option<usize>;

    fn predict(&self, data: &Dataset) -> Result<LabelVector>;

    /// Score of `classes[row]` for each row, in `[0, 1]`. Models without a
    /// graded output answer 1 when the predicted label matches, 0 otherwise.
    fn class_scores(&self, data: &Dataset, classes: &[u32]) -> Result<Vec<f64>> {
        let pred = self.predict(data)?;
        if classes.len() != pred.len() {
            return Err(Error::LengthMismatch {
                left: classes.len(),
                right: pred.len(),
            });
        }
        Ok(pred
            .labels()
            .iter()
            .zip(classes)
            .map(|(p, c)| if p == c { 1.0 } else { 0.0 })
            .collect())
    }
}

impl Classifier for RandomForest {
    fn n_classes(&self) -> u32 {
        RandomForest::n_classes(self)
    }

    fn n_features(&self) -> Option<usize> {
        Some(RandomForest::n_features(self))
    }

    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        RandomForest::predict(self, data)
    }

    fn class_scores(&self, data: &Dataset, classes: &[u32]) -> Result<Vec<f64>> {
        self.vote_fractions(data, classes)
    }
}

/// Either the built-in forest or a child-process model.
#[derive(Debug)]
pub enum BlackBoxModel {
    Forest(RandomForest),
    External(ExternalModel),
}

impl BlackBoxModel {
    pub fn spawn_external(command: &[String], options: ExternalOptions) -> Result<Self> {
        ExternalModel::spawn(command, options).map(BlackBoxModel::External)
    }

    pub fn as_forest(&self) -> Option<&RandomForest> {
        match self {
            BlackBoxModel::Forest(f) => Some(f),
            BlackBoxModel::External(_) => None,
        }
    }

    /// Gini importance of the built-in forest; external models have none.
    pub fn gini_importance(&self) -> Result<GiniImportance> {
        match self {
            BlackBoxModel::Forest(f) => Ok(f.gini_importance()),
            BlackBoxModel::External(_) => Err(Error::Unsupported(
                "gini importance requires the built-in forest".into(),
            )),
        }
    }

    /// SHA-256 over the forest dump, or over the external command line.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = match self {
            BlackBoxModel::Forest(f) => f.to_json()?.into_bytes(),
            BlackBoxModel::External(m) => m.command().join("\u{0}").into_bytes(),
        };
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    fn inner(&self) -> &dyn Classifier {
        match self {
            BlackBoxModel::Forest(f) => f,
            BlackBoxModel::External(m) => m,
        }
    }
}

impl Classifier for BlackBoxModel {
    fn n_classes(&self) -> u32 {
        self.inner().n_classes()
    }

    fn n_features(&self) -> Option<usize> {
        self.inner().n_features()
    }

    fn predict(&self, data: &Dataset) -> Result<LabelVector> {
        self.inner().predict(data)
    }

    fn class_scores(&self, data: &Dataset, classes: &[u32]) -> Result<Vec<f64>> {
        self.inner().class_scores(data, classes)
    }
}

/// Checks a dataset's width against the model when the model knows it.
pub(crate) fn check_width(model: &dyn Classifier, data: &Dataset) -> Result<()> {
    match model.n_features() {
        Some(p) if p != data.n_features() => Err(Error::ColumnCountMismatch {
            expected: p,
            found: data.n_features(),
        }),
        _ => Ok(()),
    }
}
