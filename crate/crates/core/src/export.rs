//! DOT and JSON artifacts.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{ImportanceVector, TransitionMatrix};
use crate::pathgen::{CounterfactualPath, PathSet};

pub const PATHS_SCHEMA: &str = "cpath-paths/1";
pub const MATRIX_SCHEMA: &str = "cpath-matrix/1";

fn check_names(p: usize, names: &[String]) -> Result<()> {
    if names.len() != p {
        return Err(Error::LengthMismatch {
            left: names.len(),
            right: p,
        });
    }
    Ok(())
}

fn dot_escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// Directed graph of the non-zero entries of `t`. Nodes are listed by
/// index and labelled `name (score)`; edges are sorted by (source, target)
/// and labelled with their integer weight.
pub fn export_dot(t: &TransitionMatrix, importance: &ImportanceVector, names: &[String]) -> Result<String> {
    check_names(t.p(), names)?;
    if importance.scores.len() != t.p() {
        return Err(Error::LengthMismatch {
            left: importance.scores.len(),
            right: t.p(),
        });
    }
    let mut out = String::from("digraph cpath {\n");
    for (i, name) in names.iter().enumerate() {
        let _ = writeln!(
            out,
            "  n{i} [label=\"{} ({:.3})\"];",
            dot_escape(name),
            importance.scores[i]
        );
    }
    for (from, to, w) in t.arcs() {
        let _ = writeln!(out, "  n{from} -> n{to} [label=\"{w}\", weight={w}];");
    }
    out.push_str("}\n");
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct PathsDoc {
    schema: String,
    k: usize,
    n_iter: usize,
    #[serde(default)]
    untriggered: usize,
    features: Vec<String>,
    paths: Vec<PathEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PathEntry {
    vertices: Vec<usize>,
    /// The same vertices by column name, for external tools.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    features: Vec<String>,
    swap_trace: Vec<f64>,
}

/// Serializes a path set with floats written losslessly.
pub fn export_paths_json(paths: &PathSet, names: &[String]) -> Result<String> {
    check_names(paths.n_features, names)?;
    let mut entries = Vec::with_capacity(paths.len());
    for path in &paths.paths {
        if let Some(&bad) = path.vertices.iter().find(|&&v| v >= names.len()) {
            return Err(Error::FeatureOutOfRange {
                index: bad,
                p: names.len(),
            });
        }
        entries.push(PathEntry {
            vertices: path.vertices.clone(),
            features: path.vertices.iter().map(|&v| names[v].clone()).collect(),
            swap_trace: path.swap_trace.clone(),
        });
    }
    let doc = PathsDoc {
        schema: PATHS_SCHEMA.into(),
        k: paths.k,
        n_iter: paths.n_iter,
        untriggered: paths.untriggered,
        features: names.to_vec(),
        paths: entries,
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

/// Inverse of [`export_paths_json`]; returns the path set and the feature
/// names.
pub fn parse_paths_json(text: &str) -> Result<(PathSet, Vec<String>)> {
    let doc: PathsDoc = serde_json::from_str(text)?;
    if doc.schema != PATHS_SCHEMA {
        return Err(Error::InvalidConfig(format!(
            "unsupported paths schema {:?}, expected {PATHS_SCHEMA:?}",
            doc.schema
        )));
    }
    let p = doc.features.len();
    let mut paths = Vec::with_capacity(doc.paths.len());
    for entry in doc.paths {
        if entry.vertices.len() != entry.swap_trace.len() {
            return Err(Error::LengthMismatch {
                left: entry.vertices.len(),
                right: entry.swap_trace.len(),
            });
        }
        if let Some(&bad) = entry.vertices.iter().find(|&&v| v >= p) {
            return Err(Error::FeatureOutOfRange { index: bad, p });
        }
        paths.push(CounterfactualPath {
            vertices: entry.vertices,
            swap_trace: entry.swap_trace,
            triggered: true,
        });
    }
    Ok((
        PathSet {
            paths,
            n_iter: doc.n_iter,
            k: doc.k,
            n_features: p,
            untriggered: doc.untriggered,
        },
        doc.features,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDoc {
    pub schema: String,
    pub k: usize,
    pub features: Vec<String>,
    pub weights: Vec<Vec<u64>>,
}

impl MatrixDoc {
    pub fn new(t: &TransitionMatrix, names: &[String]) -> Result<Self> {
        check_names(t.p(), names)?;
        Ok(MatrixDoc {
            schema: MATRIX_SCHEMA.into(),
            k: t.k(),
            features: names.to_vec(),
            weights: t.rows(),
        })
    }

    pub fn to_matrix(&self) -> Result<TransitionMatrix> {
        if self.schema != MATRIX_SCHEMA {
            return Err(Error::InvalidConfig(format!(
                "unsupported matrix schema {:?}, expected {MATRIX_SCHEMA:?}",
                self.schema
            )));
        }
        check_names(self.weights.len(), &self.features)?;
        TransitionMatrix::from_rows(&self.weights, self.k)
    }
}

pub fn export_matrix_json(t: &TransitionMatrix, names: &[String]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&MatrixDoc::new(t, names)?)?)
}
