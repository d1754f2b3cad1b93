//! Tabular data: the feature matrix, class labels, CSV I/O and the
//! column-permutation primitive every explainer is built on.

use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// An `n × p` matrix of finite floats with named columns.
///
/// Values are stored column-major since perturbations act on whole columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    n_rows: usize,
}

impl Dataset {
    /// Builds a dataset from row-major values.
    pub fn from_rows(names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let p = names.len();
        let mut columns = vec![Vec::with_capacity(rows.len()); p];
        for (i, row) in rows.iter().enumerate() {
            if row.len() != p {
                return Err(Error::RaggedRow {
                    row: i,
                    found: row.len(),
                    expected: p,
                });
            }
            for (col, &v) in columns.iter_mut().zip(row) {
                col.push(v);
            }
        }
        Self::from_columns(names, columns)
    }

    /// Builds a dataset from column-major values.
    pub fn from_columns(names: Vec<String>, columns: Vec<Vec<f64>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::InvalidDataset("at least one column is required".into()));
        }
        if names.len() != columns.len() {
            return Err(Error::LengthMismatch {
                left: names.len(),
                right: columns.len(),
            });
        }
        let mut seen = HashSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(Error::InvalidDataset("column names must be non-empty".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateColumn(name.clone()));
            }
        }
        let n_rows = columns[0].len();
        if n_rows == 0 {
            return Err(Error::InvalidDataset("at least one row is required".into()));
        }
        for (name, col) in names.iter().zip(&columns) {
            if col.len() != n_rows {
                return Err(Error::InvalidDataset(format!(
                    "column {name:?} has {} rows, expected {n_rows}",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    row,
                    column: name.clone(),
                });
            }
        }
        Ok(Dataset {
            names,
            columns,
            n_rows,
        })
    }

    /// Default column names `x1..xp`.
    pub fn default_names(p: usize) -> Vec<String> {
        (1..=p).map(|i| format!("x{i}")).collect()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.columns[j]
    }

    #[inline]
    pub fn value(&self, row: usize, j: usize) -> f64 {
        self.columns[j][row]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[row]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn check_feature(&self, j: usize) -> Result<()> {
        if j >= self.n_features() {
            return Err(Error::FeatureOutOfRange {
                index: j,
                p: self.n_features(),
            });
        }
        Ok(())
    }

    /// Returns a copy with column `j` replaced by a uniformly random
    /// permutation of its entries. `self` is left untouched.
    pub fn permute_column<R: Rng + ?Sized>(&self, j: usize, rng: &mut R) -> Result<Dataset> {
        let mut out = self.clone();
        out.permute_column_in_place(j, rng)?;
        Ok(out)
    }

    /// Fisher–Yates shuffle of column `j` on a working copy.
    pub fn permute_column_in_place<R: Rng + ?Sized>(&mut self, j: usize, rng: &mut R) -> Result<()> {
        self.check_feature(j)?;
        self.columns[j].shuffle(rng);
        Ok(())
    }

    /// Overwrites column `j`; values must be finite and of length `n`.
    pub fn set_column(&mut self, j: usize, values: Vec<f64>) -> Result<()> {
        self.check_feature(j)?;
        if values.len() != self.n_rows {
            return Err(Error::LengthMismatch {
                left: values.len(),
                right: self.n_rows,
            });
        }
        if let Some(row) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue {
                row,
                column: self.names[j].clone(),
            });
        }
        self.columns[j] = values;
        Ok(())
    }

    /// Dataset restricted to the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Dataset> {
        let columns = self
            .columns
            .iter()
            .map(|c| rows.iter().map(|&r| c[r]).collect())
            .collect();
        Dataset::from_columns(self.names.clone(), columns)
    }

    /// Dataset restricted to the given columns, in the given order.
    pub fn select_columns(&self, cols: &[usize]) -> Result<Dataset> {
        for &j in cols {
            self.check_feature(j)?;
        }
        Dataset::from_columns(
            cols.iter().map(|&j| self.names[j].clone()).collect(),
            cols.iter().map(|&j| self.columns[j].clone()).collect(),
        )
    }

    /// Same values under new column names.
    pub fn with_names(&self, names: Vec<String>) -> Result<Dataset> {
        Dataset::from_columns(names, self.columns.clone())
    }

    /// Writes the dataset (and optionally a label column) as CSV with a
    /// header row. Floats use the shortest representation that parses back
    /// to the identical value.
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<(&str, &LabelVector)>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.names.iter().map(String::as_str).collect();
        if let Some((name, l)) = labels {
            if l.len() != self.n_rows {
                return Err(Error::LengthMismatch {
                    left: l.len(),
                    right: self.n_rows,
                });
            }
            header.push(name);
        }
        w.write_record(&header).map_err(csv_err)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows {
            record.clear();
            record.extend(self.columns.iter().map(|c| c[i].to_string()));
            if let Some((_, l)) = labels {
                record.push(l.labels()[i].to_string());
            }
            w.write_record(&record).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::Csv(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, labels: Option<(&str, &LabelVector)>) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file), labels)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Class labels in `1..=g`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<u32>,
    n_classes: u32,
}

impl LabelVector {
    pub fn new(labels: Vec<u32>, n_classes: u32) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidLabels(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidLabels("empty label vector".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l == 0 || l > n_classes) {
            return Err(Error::InvalidLabels(format!(
                "label {bad} outside 1..={n_classes}"
            )));
        }
        Ok(LabelVector { labels, n_classes })
    }

    /// Remaps arbitrary integer codes to `1..=g`, preserving their sorted
    /// order. Fails when fewer than two distinct codes are present.
    pub fn from_codes(codes: &[i64]) -> Result<Self> {
        let distinct: BTreeSet<i64> = codes.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::SingleClass);
        }
        let lookup: Vec<i64> = distinct.into_iter().collect();
        let labels = codes
            .iter()
            .map(|c| lookup.binary_search(c).expect("code is present") as u32 + 1)
            .collect();
        LabelVector::new(labels, lookup.len() as u32)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn n_classes(&self) -> u32 {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Result<LabelVector> {
        LabelVector::new(rows.iter().map(|&r| self.labels[r]).collect(), self.n_classes)
    }

    /// Fraction of positions where both vectors agree.
    pub fn agreement(&self, other: &LabelVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        let same = self
            .labels
            .iter()
            .zip(&other.labels)
            .filter(|(a, b)| a == b)
            .count();
        Ok(same as f64 / self.len() as f64)
    }
}

/// Reads a numeric CSV file. When `label_column` is given it is split off
/// and remapped to contiguous class ids; all other columns become features
/// in file order. Without a header, columns are named `x1..xp`.
pub fn load_csv(
    path: &Path,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<(Dataset, Option<LabelVector>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, has_header, label_column)
}

/// [`load_csv`] over any reader.
pub fn read_csv<R: std::io::Read>(
    input: R,
    has_header: bool,
    label_column: Option<&str>,
) -> Result<(Dataset, Option<LabelVector>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut records = reader.records();

    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<String>> = Vec::new();
    if has_header {
        match records.next() {
            Some(rec) => names = Some(rec.map_err(csv_err)?.iter().map(str::to_owned).collect()),
            None => return Err(Error::InvalidDataset("empty file".into())),
        }
    }
    for rec in records {
        let rec = rec.map_err(csv_err)?;
        if rec.len() == 1 && rec.get(0) == Some("") {
            continue;
        }
        rows.push(rec.iter().map(str::to_owned).collect());
    }
    let width = match (&names, rows.first()) {
        (Some(n), _) => n.len(),
        (None, Some(r)) => r.len(),
        (None, None) => return Err(Error::InvalidDataset("empty file".into())),
    };
    let names = names.unwrap_or_else(|| Dataset::default_names(width));
    let mut seen = HashSet::new();
    for n in &names {
        if !seen.insert(n.as_str()) {
            return Err(Error::DuplicateColumn(n.clone()));
        }
    }
    let label_idx = match label_column {
        Some(l) => Some(
            names
                .iter()
                .position(|n| n == l)
                .ok_or_else(|| Error::UnknownColumn(l.to_owned()))?,
        ),
        None => None,
    };

    let mut columns: Vec<Vec<f64>> = vec![Vec::with_capacity(rows.len()); width];
    let mut codes = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        if row.len() != width {
            return Err(Error::RaggedRow {
                row: i,
                found: row.len(),
                expected: width,
            });
        }
        for (j, cell) in row.iter().enumerate() {
            let value: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                row: i,
                column: names[j].clone(),
                value: cell.clone(),
            })?;
            if !value.is_finite() {
                return Err(Error::NonFiniteValue {
                    row: i,
                    column: names[j].clone(),
                });
            }
            if Some(j) == label_idx {
                if value.fract() != 0.0 || value.abs() > i64::MAX as f64 {
                    return Err(Error::InvalidLabels(format!(
                        "label {cell:?} at row {i} is not an integer code"
                    )));
                }
                codes.push(value as i64);
            } else {
                columns[j].push(value);
            }
        }
    }

    let (feature_names, feature_columns): (Vec<String>, Vec<Vec<f64>>) = names
        .into_iter()
        .zip(columns)
        .enumerate()
        .filter(|(j, _)| Some(*j) != label_idx)
        .map(|(_, nc)| nc)
        .unzip();
    let dataset = Dataset::from_columns(feature_names, feature_columns)?;
    let labels = match label_idx {
        Some(_) => Some(LabelVector::from_codes(&codes)?),
        None => None,
    };
    Ok((dataset, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn names(ns: &[&str]) -> Vec<String> {
        ns.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_small_csv() {
        let (d, l) = read_csv("a,b\n1,2\n3,4\n5,6".as_bytes(), true, None).unwrap();
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.names(), &names(&["a", "b"]));
        assert_eq!(d.column(1), &[2.0, 4.0, 6.0]);
        assert!(l.is_none());
    }

    #[test]
    fn remaps_label_codes() {
        let (d, l) = read_csv("a,y\n1,0\n2,1\n3,0".as_bytes(), true, Some("y")).unwrap();
        let l = l.unwrap();
        assert_eq!(d.n_features(), 1);
        assert_eq!(l.n_classes(), 2);
        assert_eq!(l.labels(), &[1, 2, 1]);

        let (_, l) = read_csv("y,a\n-3,1\n7,2\n10,3".as_bytes(), true, Some("y")).unwrap();
        assert_eq!(l.unwrap().labels(), &[1, 2, 3]);
    }

    #[test]
    fn headerless_columns_get_default_names() {
        let (d, l) = read_csv("1,2,0\n3,4,1".as_bytes(), false, Some("x3")).unwrap();
        assert_eq!(d.names(), &names(&["x1", "x2"]));
        assert_eq!(l.unwrap().labels(), &[1, 2]);
    }

    #[test]
    fn rejects_bad_input() {
        let err = read_csv("a,b\n1,abc".as_bytes(), true, None).unwrap_err();
        assert!(matches!(err, Error::NonNumericCell { ref value, .. } if value == "abc"));
        let err = read_csv("a,b\n1,2\n3".as_bytes(), true, None).unwrap_err();
        assert!(matches!(err, Error::RaggedRow { row: 1, .. }));
        let err = read_csv("a,b\n1,NaN".as_bytes(), true, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }));
        let err = read_csv("a,b\n1,inf".as_bytes(), true, None).unwrap_err();
        assert!(matches!(err, Error::NonFiniteValue { .. }));
        let err = read_csv("a,a\n1,2".as_bytes(), true, None).unwrap_err();
        assert!(matches!(err, Error::DuplicateColumn(_)));
        let err = read_csv("a,y\n1,1\n2,1".as_bytes(), true, Some("y")).unwrap_err();
        assert!(matches!(err, Error::SingleClass));
        let err = read_csv("a,y\n1,0.5\n2,1".as_bytes(), true, Some("y")).unwrap_err();
        assert!(matches!(err, Error::InvalidLabels(_)));
        let err = read_csv("a,b\n1,2".as_bytes(), true, Some("z")).unwrap_err();
        assert!(matches!(err, Error::UnknownColumn(_)));
        let err = load_csv(Path::new("/nonexistent/file.csv"), true, None).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn single_row_permutation_is_identity() {
        let d = Dataset::from_rows(names(&["a", "b"]), &[vec![1.0, 2.0]]).unwrap();
        let mut rng = seeded(3);
        for j in 0..2 {
            assert_eq!(d.permute_column(j, &mut rng).unwrap(), d);
        }
    }

    #[test]
    fn permutation_is_seed_deterministic() {
        let d = Dataset::from_columns(names(&["a"]), vec![vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let a = d.permute_column(0, &mut seeded(42)).unwrap();
        let b = d.permute_column(0, &mut seeded(42)).unwrap();
        assert_eq!(
            a.column(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.column(0).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn permute_rejects_bad_index() {
        let d = Dataset::from_columns(names(&["a"]), vec![vec![1.0]]).unwrap();
        assert!(matches!(
            d.permute_column(1, &mut seeded(0)),
            Err(Error::FeatureOutOfRange { index: 1, p: 1 })
        ));
    }

    proptest! {
        #[test]
        fn permute_preserves_multiset_and_other_columns(
            rows in prop::collection::vec(prop::collection::vec(-1e6f64..1e6, 3), 1..40),
            j in 0usize..3,
            seed in any::<u64>(),
        ) {
            let d = Dataset::from_rows(names(&["a", "b", "c"]), &rows).unwrap();
            let out = d.permute_column(j, &mut seeded(seed)).unwrap();
            for c in 0..3 {
                if c == j {
                    let mut x = d.column(c).to_vec();
                    let mut y = out.column(c).to_vec();
                    x.sort_by(f64::total_cmp);
                    y.sort_by(f64::total_cmp);
                    prop_assert_eq!(x, y);
                } else {
                    prop_assert_eq!(d.column(c), out.column(c));
                }
            }
        }

        #[test]
        fn csv_round_trip(
            rows in prop::collection::vec(prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 2), 1..20),
        ) {
            let d = Dataset::from_rows(names(&["a", "b"]), &rows).unwrap();
            let mut buf = Vec::new();
            d.write_csv(&mut buf, None).unwrap();
            let (back, _) = read_csv(buf.as_slice(), true, None).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
