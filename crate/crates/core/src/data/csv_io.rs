use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Arm, ExperimentTable};
use crate::error::{Error, Result};

/// Maps CSV columns onto table roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub response: String,
    pub treatment: String,
    #[serde(default)]
    pub features: Vec<String>,
    /// Raw treatment value that marks the treated arm. When absent the two
    /// values must be numeric and the larger one is taken as treatment.
    #[serde(default)]
    pub treatment_label: Option<String>,
    /// Treatment-assignment probability; defaults to the observed treated share.
    #[serde(default)]
    pub q: Option<f64>,
}

impl Schema {
    pub fn new(response: &str, treatment: &str, features: &[&str]) -> Self {
        Schema {
            response: response.into(),
            treatment: treatment.into(),
            features: features.iter().map(|f| f.to_string()).collect(),
            treatment_label: None,
            q: None,
        }
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    raw.trim()
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::NonNumeric {
            row,
            column: column.to_string(),
            value: raw.to_string(),
        })
}

/// Reads a UTF-8 CSV with a header row. Row order is preserved.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema) -> Result<ExperimentTable> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header = reader.headers()?.clone();
    let locate = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::UnknownColumn(name.to_string()))
    };
    let y_col = locate(&schema.response)?;
    let d_col = locate(&schema.treatment)?;
    let x_cols = schema.features.iter().map(|f| locate(f)).collect::<Result<Vec<_>>>()?;

    let mut y = Vec::new();
    let mut raw_d = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |c: usize| record.get(c).unwrap_or("");
        y.push(parse_cell(field(y_col), row, &schema.response)?);
        raw_d.push(field(d_col).trim().to_string());
        for (&c, name) in x_cols.iter().zip(&schema.features) {
            x_rows.push(parse_cell(field(c), row, name)?);
        }
    }

    let levels: BTreeSet<&str> = raw_d.iter().map(String::as_str).collect();
    if levels.len() != 2 {
        return Err(Error::TreatmentCardinality {
            column: schema.treatment.clone(),
            found: levels.len(),
        });
    }
    let treated_level = match &schema.treatment_label {
        Some(label) => {
            if !levels.contains(label.as_str()) {
                return Err(Error::InvalidParameter(format!(
                    "treatment label `{label}` does not occur in column `{}`",
                    schema.treatment
                )));
            }
            label.clone()
        }
        None => {
            let numeric: Vec<(f64, &str)> = levels
                .iter()
                .map(|l| l.parse::<f64>().map(|v| (v, *l)))
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| {
                    Error::InvalidParameter(format!(
                        "treatment column `{}` is not numeric; set treatment_label",
                        schema.treatment
                    ))
                })?;
            let top = numeric.iter().max_by(|a, b| a.0.total_cmp(&b.0)).unwrap();
            top.1.to_string()
        }
    };
    let arms: Vec<Arm> = raw_d
        .iter()
        .map(|d| if *d == treated_level { Arm::Treatment } else { Arm::Control })
        .collect();

    let n = y.len();
    let x = DMatrix::from_row_slice(n, x_cols.len(), &x_rows);
    let q = match schema.q {
        Some(q) => q,
        None => arms.iter().filter(|a| **a == Arm::Treatment).count() as f64 / n as f64,
    };
    ExperimentTable::new(y, arms, x, schema.features.clone(), q)
}

/// Writes a numeric matrix as CSV with the given header. Floats use the
/// shortest representation that parses back to the same value.
pub fn write_csv<W: Write>(out: W, header: &[String], columns: &[&[f64]]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header)?;
    let rows = columns.first().map_or(0, |c| c.len());
    let mut record = Vec::with_capacity(columns.len());
    for r in 0..rows {
        record.clear();
        record.extend(columns.iter().map(|c| format!("{}", c[r])));
        writer.write_record(&record)?;
    }
    writer.flush().map_err(|source| Error::Io {
        path: "<csv output>".into(),
        source,
    })?;
    Ok(())
}
