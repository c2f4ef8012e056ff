//! Covariate encoding.
//!
//! Continuous columns are standardized to mean 0, sd 1 (population sd, i.e.
//! divisor `n`); binary columns pass through as 0/1; categorical columns are
//! one-hot encoded with the first observed level dropped as reference. The
//! resulting [`EncodingReport`] records every per-column transform so new
//! points can be encoded identically at prediction time.
//!
//! Standardizing before any distance computation is what makes a single GP
//! range parameter meaningful across covariate dimensions, and it puts two
//! distinct categories at Euclidean distance sqrt(2) pre-scaling.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw covariate column.
#[derive(Debug, Clone)]
pub struct RawColumn {
    pub name: String,
    pub values: ColumnValues,
}

#[derive(Debug, Clone)]
pub enum ColumnValues {
    Continuous(Vec<f64>),
    /// 0/1 values.
    Binary(Vec<u8>),
    /// Arbitrary level labels.
    Categorical(Vec<String>),
}

impl ColumnValues {
    pub fn len(&self) -> usize {
        match self {
            ColumnValues::Continuous(v) => v.len(),
            ColumnValues::Binary(v) => v.len(),
            ColumnValues::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A raw covariate table; all columns must share the same length.
#[derive(Debug, Clone, Default)]
pub struct RawTable {
    pub columns: Vec<RawColumn>,
}

impl RawTable {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, |c| c.values.len())
    }
}

/// Per-column transform recorded by [`encode_covariates`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ColumnTransform {
    Continuous { name: String, mean: f64, sd: f64 },
    Binary { name: String },
    /// `levels[0]` is the dropped reference level; the remaining levels map
    /// to indicator columns in order.
    Categorical { name: String, levels: Vec<String> },
}

impl ColumnTransform {
    pub fn name(&self) -> &str {
        match self {
            ColumnTransform::Continuous { name, .. } => name,
            ColumnTransform::Binary { name } => name,
            ColumnTransform::Categorical { name, .. } => name,
        }
    }

    /// Number of encoded columns this transform produces.
    pub fn width(&self) -> usize {
        match self {
            ColumnTransform::Continuous { .. } | ColumnTransform::Binary { .. } => 1,
            ColumnTransform::Categorical { levels, .. } => levels.len() - 1,
        }
    }
}

/// Recorded encoding of a training table; serializable for chain persistence
/// and reusable on new points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingReport {
    pub transforms: Vec<ColumnTransform>,
}

impl EncodingReport {
    /// Total encoded dimension.
    pub fn encoded_width(&self) -> usize {
        self.transforms.iter().map(|t| t.width()).sum()
    }

    /// Names of the encoded columns, in output order.
    pub fn encoded_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for t in &self.transforms {
            match t {
                ColumnTransform::Continuous { name, .. } | ColumnTransform::Binary { name } => {
                    names.push(name.clone())
                }
                ColumnTransform::Categorical { name, levels } => {
                    for level in &levels[1..] {
                        names.push(format!("{name}={level}"));
                    }
                }
            }
        }
        names
    }
}

/// Encodes a raw table, returning the encoded matrix and the transform report.
pub fn encode_covariates(table: &RawTable) -> Result<(DMatrix<f64>, EncodingReport)> {
    let n = table.n_rows();
    if n == 0 {
        return Err(Error::Encoding("table has no rows".to_string()));
    }
    let mut transforms = Vec::with_capacity(table.columns.len());
    let mut cols: Vec<Vec<f64>> = Vec::new();

    for col in &table.columns {
        if col.values.len() != n {
            return Err(Error::Encoding(format!(
                "column '{}' has {} rows, expected {n}",
                col.name,
                col.values.len()
            )));
        }
        match &col.values {
            ColumnValues::Continuous(v) => {
                let mean = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
                let sd = var.sqrt();
                if sd <= 0.0 {
                    return Err(Error::Encoding(format!(
                        "column '{}' has zero variance; cannot standardize",
                        col.name
                    )));
                }
                cols.push(v.iter().map(|x| (x - mean) / sd).collect());
                transforms.push(ColumnTransform::Continuous {
                    name: col.name.clone(),
                    mean,
                    sd,
                });
            }
            ColumnValues::Binary(v) => {
                if let Some(bad) = v.iter().find(|&&b| b > 1) {
                    return Err(Error::Encoding(format!(
                        "column '{}' contains non-binary value {bad}",
                        col.name
                    )));
                }
                cols.push(v.iter().map(|&b| b as f64).collect());
                transforms.push(ColumnTransform::Binary {
                    name: col.name.clone(),
                });
            }
            ColumnValues::Categorical(v) => {
                let mut levels: Vec<String> = Vec::new();
                for label in v {
                    if !levels.contains(label) {
                        levels.push(label.clone());
                    }
                }
                levels.sort();
                if levels.len() < 2 {
                    return Err(Error::Encoding(format!(
                        "categorical column '{}' has a single level; cannot encode",
                        col.name
                    )));
                }
                for level in &levels[1..] {
                    cols.push(v.iter().map(|label| f64::from(label == level)).collect());
                }
                transforms.push(ColumnTransform::Categorical {
                    name: col.name.clone(),
                    levels,
                });
            }
        }
    }

    let p = cols.len();
    let mut x = DMatrix::zeros(n, p);
    for (k, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[(i, k)] = v;
        }
    }
    Ok((x, EncodingReport { transforms }))
}

/// Encodes new rows with a training-time report. Column order must match the
/// report; an unseen categorical level is an error.
pub fn encode_with_report(report: &EncodingReport, table: &RawTable) -> Result<DMatrix<f64>> {
    let n = table.n_rows();
    if table.columns.len() != report.transforms.len() {
        return Err(Error::Encoding(format!(
            "expected {} covariate columns, got {}",
            report.transforms.len(),
            table.columns.len()
        )));
    }
    let mut cols: Vec<Vec<f64>> = Vec::new();
    for (col, transform) in table.columns.iter().zip(&report.transforms) {
        if col.name != transform.name() {
            return Err(Error::Encoding(format!(
                "column '{}' does not match trained column '{}'",
                col.name,
                transform.name()
            )));
        }
        match (&col.values, transform) {
            (ColumnValues::Continuous(v), ColumnTransform::Continuous { mean, sd, .. }) => {
                cols.push(v.iter().map(|x| (x - mean) / sd).collect());
            }
            (ColumnValues::Binary(v), ColumnTransform::Binary { .. }) => {
                cols.push(v.iter().map(|&b| b as f64).collect());
            }
            (ColumnValues::Categorical(v), ColumnTransform::Categorical { name, levels }) => {
                for label in v {
                    if !levels.contains(label) {
                        return Err(Error::Encoding(format!(
                            "unseen level '{label}' in column '{name}'"
                        )));
                    }
                }
                for level in &levels[1..] {
                    cols.push(v.iter().map(|label| f64::from(label == level)).collect());
                }
            }
            _ => {
                return Err(Error::Encoding(format!(
                    "column '{}' has a different type than at training time",
                    col.name
                )));
            }
        }
    }
    let p = cols.len();
    let mut x = DMatrix::zeros(n, p);
    for (k, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            x[(i, k)] = v;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn standardizes_with_population_sd() {
        let table = RawTable {
            columns: vec![RawColumn {
                name: "a".to_string(),
                values: ColumnValues::Continuous(vec![1.0, 2.0, 3.0]),
            }],
        };
        let (x, _) = encode_covariates(&table).unwrap();
        // sd = sqrt(2/3); (1-2)/sd = -1.2247...
        assert_relative_eq!(x[(0, 0)], -1.224744871391589, epsilon = 1e-12);
        assert_relative_eq!(x[(1, 0)], 0.0, epsilon = 1e-12);
        assert_relative_eq!(x[(2, 0)], 1.224744871391589, epsilon = 1e-12);
    }

    #[test]
    fn zero_variance_column_errors() {
        let table = RawTable {
            columns: vec![RawColumn {
                name: "a".to_string(),
                values: ColumnValues::Continuous(vec![3.0, 3.0, 3.0]),
            }],
        };
        let err = encode_covariates(&table).unwrap_err();
        assert!(err.to_string().contains("zero variance"));
    }

    #[test]
    fn three_level_categorical_yields_two_indicators() {
        let table = RawTable {
            columns: vec![RawColumn {
                name: "c".to_string(),
                values: ColumnValues::Categorical(
                    ["1", "2", "3", "2"].iter().map(|s| s.to_string()).collect(),
                ),
            }],
        };
        let (x, report) = encode_covariates(&table).unwrap();
        assert_eq!(x.ncols(), 2);
        assert_eq!(report.encoded_width(), 2);
        assert_eq!(report.encoded_names(), vec!["c=2", "c=3"]);
        // rows: level 1 -> (0,0); 2 -> (1,0); 3 -> (0,1)
        assert_eq!((x[(0, 0)], x[(0, 1)]), (0.0, 0.0));
        assert_eq!((x[(1, 0)], x[(1, 1)]), (1.0, 0.0));
        assert_eq!((x[(2, 0)], x[(2, 1)]), (0.0, 1.0));
        assert_eq!((x[(3, 0)], x[(3, 1)]), (1.0, 0.0));
    }

    #[test]
    fn unseen_level_at_predict_time_errors() {
        let train = RawTable {
            columns: vec![RawColumn {
                name: "c".to_string(),
                values: ColumnValues::Categorical(
                    ["a", "b"].iter().map(|s| s.to_string()).collect(),
                ),
            }],
        };
        let (_, report) = encode_covariates(&train).unwrap();
        let test = RawTable {
            columns: vec![RawColumn {
                name: "c".to_string(),
                values: ColumnValues::Categorical(vec!["z".to_string()]),
            }],
        };
        let err = encode_with_report(&report, &test).unwrap_err();
        assert!(err.to_string().contains("unseen level"));
    }

    #[test]
    fn report_round_trips_through_json() {
        let table = RawTable {
            columns: vec![
                RawColumn {
                    name: "a".to_string(),
                    values: ColumnValues::Continuous(vec![0.0, 1.0, 4.0]),
                },
                RawColumn {
                    name: "b".to_string(),
                    values: ColumnValues::Binary(vec![0, 1, 1]),
                },
                RawColumn {
                    name: "c".to_string(),
                    values: ColumnValues::Categorical(
                        ["x", "y", "z"].iter().map(|s| s.to_string()).collect(),
                    ),
                },
            ],
        };
        let (_, report) = encode_covariates(&table).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        let back: EncodingReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
    }

    #[test]
    fn training_and_report_encodings_agree() {
        let table = RawTable {
            columns: vec![
                RawColumn {
                    name: "a".to_string(),
                    values: ColumnValues::Continuous(vec![0.0, 1.0, 4.0, -2.0]),
                },
                RawColumn {
                    name: "c".to_string(),
                    values: ColumnValues::Categorical(
                        ["x", "y", "z", "y"].iter().map(|s| s.to_string()).collect(),
                    ),
                },
            ],
        };
        let (x, report) = encode_covariates(&table).unwrap();
        let x2 = encode_with_report(&report, &table).unwrap();
        assert_eq!(x, x2);
    }
}
