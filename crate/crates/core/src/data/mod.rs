//! Experiment data: the columnar table, CSV ingestion, quintile-indicator
//! feature expansion and a synthetic digital-experiment generator.

mod csv_io;
mod expansion;
mod synth;

pub use csv_io::{load_csv, write_csv, Schema};
pub use expansion::{apply_expansion, build_expansion, ExpansionPlan, Indicator, VariableExpansion};
pub use synth::{generate_synthetic, Latent, SpikePoint, SynthConfig, SynthTruth, SyntheticExperiment};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Control,
    Treatment,
}

impl Arm {
    pub fn indicator(self) -> f64 {
        match self {
            Arm::Control => 0.0,
            Arm::Treatment => 1.0,
        }
    }
}

/// n units with a response, an arm label and p covariates. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentTable {
    y: Vec<f64>,
    arms: Vec<Arm>,
    x: DMatrix<f64>,
    feature_names: Vec<String>,
    q: f64,
}

impl ExperimentTable {
    pub fn new(y: Vec<f64>, arms: Vec<Arm>, x: DMatrix<f64>, feature_names: Vec<String>, q: f64) -> Result<Self> {
        let n = y.len();
        if arms.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: arms.len() });
        }
        if x.nrows() != n {
            return Err(Error::LengthMismatch { expected: n, got: x.nrows() });
        }
        if feature_names.len() != x.ncols() {
            return Err(Error::LengthMismatch {
                expected: x.ncols(),
                got: feature_names.len(),
            });
        }
        if !(q > 0.0 && q < 1.0) {
            return Err(Error::InvalidParameter(format!("treatment probability q = {q} must lie in (0, 1)")));
        }
        if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("table contains non-finite values".into()));
        }
        Ok(ExperimentTable {
            y,
            arms,
            x,
            feature_names,
            q,
        })
    }

    /// Same table with an all-ones `intercept` column prepended.
    pub fn with_intercept(&self) -> ExperimentTable {
        let n = self.n();
        let x = self.x.clone().insert_column(0, 1.0);
        debug_assert_eq!(x.nrows(), n);
        let mut names = Vec::with_capacity(self.p() + 1);
        names.push("intercept".to_string());
        names.extend(self.feature_names.iter().cloned());
        ExperimentTable { x, feature_names: names, ..self.clone() }
    }

    /// Same units and responses with a different covariate matrix.
    pub fn with_features(&self, x: DMatrix<f64>, feature_names: Vec<String>) -> Result<ExperimentTable> {
        ExperimentTable::new(self.y.clone(), self.arms.clone(), x, feature_names, self.q)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn arms(&self) -> &[Arm] {
        &self.arms
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn q(&self) -> f64 {
        self.q
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Index of the first covariate column that is identically one.
    pub fn intercept_column(&self) -> Option<usize> {
        (0..self.p()).find(|&j| self.x.column(j).iter().all(|&v| v == 1.0))
    }

    pub fn arm_rows(&self, arm: Arm) -> Vec<usize> {
        self.arms
            .iter()
            .enumerate()
            .filter(|(_, a)| **a == arm)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn arm_count(&self, arm: Arm) -> usize {
        self.arms.iter().filter(|a| **a == arm).count()
    }

    pub fn arm_y(&self, arm: Arm) -> Vec<f64> {
        self.arm_rows(arm).into_iter().map(|i| self.y[i]).collect()
    }

    pub fn arm_x(&self, arm: Arm) -> DMatrix<f64> {
        select_rows(&self.x, &self.arm_rows(arm))
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    /// Sub-table of the given rows, in the given order.
    pub fn subset(&self, rows: &[usize]) -> ExperimentTable {
        ExperimentTable {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            arms: rows.iter().map(|&i| self.arms[i]).collect(),
            x: select_rows(&self.x, rows),
            feature_names: self.feature_names.clone(),
            q: self.q,
        }
    }
}

pub(crate) fn select_rows(x: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), x.ncols(), |r, c| x[(rows[r], c)])
}
