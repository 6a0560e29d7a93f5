use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A binary target column and the cell value mapped to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetColumn {
    pub column: String,
    pub positive: String,
}

/// A categorical column expanded into one indicator per listed category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CategoricalColumn {
    pub column: String,
    pub categories: Vec<String>,
}

/// Column mapping for a tabular dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    pub label: TargetColumn,
    pub sensitive: TargetColumn,
    /// Numeric feature columns.
    #[serde(default)]
    pub features: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalColumn>,
}

impl Schema {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Schema> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn width(&self) -> usize {
        self.features.len() + self.categorical.iter().map(|c| c.categories.len()).sum::<usize>()
    }
}

/// Non-fatal findings while ingesting a file.
#[derive(Clone, Debug, PartialEq)]
pub enum LoadWarning {
    /// A constant column, emitted as all zeros.
    ConstantColumn(String),
    /// A data row with an empty cell was dropped (1-based data row).
    RowRejected(usize),
}

fn missing(cell: &str) -> bool {
    cell.is_empty() || cell == "?"
}

/// Reads a headed CSV file and encodes it per `schema`.
///
/// Labels and sensitive values are 1 exactly when the trimmed cell equals the
/// declared positive value. Numeric columns and categorical indicators are
/// standardized to zero mean and unit population variance.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<(Dataset, Vec<LoadWarning>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let position: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h, i)).collect();
    let col = |name: &str| {
        position
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let label_col = col(&schema.label.column)?;
    let sensitive_col = col(&schema.sensitive.column)?;
    let numeric_cols = schema
        .features
        .iter()
        .map(|f| col(f))
        .collect::<Result<Vec<_>>>()?;
    let categorical_cols = schema
        .categorical
        .iter()
        .map(|c| col(&c.column))
        .collect::<Result<Vec<_>>>()?;

    let width = schema.width();
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); width];
    let mut labels = Vec::new();
    let mut sensitive = Vec::new();
    let mut warnings = Vec::new();

    for (r, record) in reader.records().enumerate() {
        let row = r + 1;
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");
        let used = [label_col, sensitive_col]
            .into_iter()
            .chain(numeric_cols.iter().copied())
            .chain(categorical_cols.iter().copied());
        if used.into_iter().any(|i| missing(cell(i))) {
            warnings.push(LoadWarning::RowRejected(row));
            continue;
        }
        let mut values = Vec::with_capacity(width);
        for (name, &i) in schema.features.iter().zip(&numeric_cols) {
            let v: f64 = cell(i).parse().map_err(|_| Error::Parse {
                row,
                msg: format!("column '{name}' has non-numeric value '{}'", cell(i)),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    msg: format!("column '{name}' is not finite"),
                });
            }
            values.push(v);
        }
        for (cat, &i) in schema.categorical.iter().zip(&categorical_cols) {
            let value = cell(i);
            let hit = cat.categories.iter().position(|c| c == value).ok_or_else(|| Error::Parse {
                row,
                msg: format!("column '{}' has undeclared category '{value}'", cat.column),
            })?;
            values.extend((0..cat.categories.len()).map(|j| if j == hit { 1.0 } else { 0.0 }));
        }
        for (column, v) in columns.iter_mut().zip(values) {
            column.push(v);
        }
        labels.push(u8::from(cell(label_col) == schema.label.positive));
        sensitive.push(u8::from(cell(sensitive_col) == schema.sensitive.positive));
    }

    let n = labels.len();
    if n == 0 {
        return Err(Error::Schema("no usable data rows".into()));
    }
    let names: Vec<String> = schema
        .features
        .iter()
        .cloned()
        .chain(schema.categorical.iter().flat_map(|c| {
            c.categories.iter().map(move |v| format!("{}={v}", c.column))
        }))
        .collect();
    for (column, name) in columns.iter_mut().zip(&names) {
        if !standardize(column) {
            log::warn!("feature column '{name}' is constant; emitted as zeros");
            warnings.push(LoadWarning::ConstantColumn(name.clone()));
        }
    }

    let mut data = vec![0.0; n * width];
    for (j, column) in columns.iter().enumerate() {
        for (i, v) in column.iter().enumerate() {
            data[i * width + j] = *v;
        }
    }
    Ok((Dataset::new(Tensor::matrix(n, width, data)?, labels, sensitive)?, warnings))
}

/// Standardizes in place; returns false (and zeroes the column) when it is
/// constant.
fn standardize(column: &mut [f64]) -> bool {
    let n = column.len() as f64;
    let mean = column.iter().sum::<f64>() / n;
    let var = column.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if var <= f64::EPSILON * mean.abs().max(1.0) {
        column.iter_mut().for_each(|v| *v = 0.0);
        return false;
    }
    let sd = var.sqrt();
    column.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema() -> Schema {
        serde_json::from_str(
            r#"{
                "label": {"column": "y", "positive": "yes"},
                "sensitive": {"column": "sex", "positive": "F"},
                "features": ["x"],
                "categorical": [{"column": "job", "categories": ["a", "b"]}]
            }"#,
        )
        .unwrap()
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn binarizes_and_standardizes() {
        let f = write("x,y,sex,job\n1,yes,F,a\n2,no,M,b\n3,no,F,a\n4,yes,M,b\n");
        let (ds, warnings) = load_csv(f.path(), &schema()).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(ds.labels(), &[1, 0, 0, 1]);
        assert_eq!(ds.sensitive(), &[1, 0, 1, 0]);
        assert_eq!(ds.dim(), 3);
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|i| ds.features().row(i)[j]).collect();
            let mean = col.iter().sum::<f64>() / 4.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() <= 1e-9);
            assert!((var - 1.0).abs() <= 1e-9);
        }
        // [1,2,3,4] -> (v - 2.5) / sqrt(1.25)
        let expected = (1.0 - 2.5) / 1.25f64.sqrt();
        assert!((ds.features().row(0)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn missing_sensitive_column_is_schema_error() {
        let f = write("x,y,job\n1,yes,a\n");
        let err = load_csv(f.path(), &schema()).unwrap_err();
        assert!(matches!(&err, Error::Schema(m) if m.contains("sex")), "{err}");
    }

    #[test]
    fn non_numeric_feature_reports_row() {
        let f = write("x,y,sex,job\n1,yes,F,a\noops,no,M,b\n");
        match load_csv(f.path(), &schema()).unwrap_err() {
            Error::Parse { row, .. } => assert_eq!(row, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn constant_column_warns_and_zeroes() {
        let f = write("x,y,sex,job\n5,yes,F,a\n5,no,M,b\n5,no,F,a\n");
        let (ds, warnings) = load_csv(f.path(), &schema()).unwrap();
        assert!(warnings.contains(&LoadWarning::ConstantColumn("x".into())));
        assert!((0..3).all(|i| ds.features().row(i)[0] == 0.0));
    }

    #[test]
    fn rows_with_missing_cells_are_rejected() {
        let f = write("x,y,sex,job\n1,yes,F,a\n,no,M,b\n3,no,M,?\n4,yes,M,b\n");
        let (ds, warnings) = load_csv(f.path(), &schema()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(warnings, vec![LoadWarning::RowRejected(2), LoadWarning::RowRejected(3)]);
    }
}
