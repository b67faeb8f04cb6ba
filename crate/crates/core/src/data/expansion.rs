//! Positive-quintile indicator expansion of raw covariates.
//!
//! Every raw variable yields indicators for `x > 0` and for `x >= t_k`, where
//! t_k is the k-th percentile (k = 20, 40, 60, 80) of the variable's positive
//! sample values. Percentiles are order statistics: with m sorted positive
//! values, t_k is the value at 1-based position ceil(k m / 100).
//!
//! Indicators that pick out the same sample rows are collapsed. Equal
//! percentiles merge into one. When the smallest percentile equals the
//! smallest positive value, `x > 0` and `x >= t` coincide on the sample; the
//! pair keeps the `>= t` form unless it is the variable's only indicator, in
//! which case the variable is a plain presence flag and keeps `> 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PERCENTILES: [usize; 4] = [20, 40, 60, 80];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indicator {
    pub threshold: f64,
    /// `x > threshold` when true, `x >= threshold` otherwise.
    pub strict: bool,
    pub label: String,
}

impl Indicator {
    pub fn matches(&self, value: f64) -> bool {
        if self.strict {
            value > self.threshold
        } else {
            value >= self.threshold
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableExpansion {
    pub variable: String,
    pub indicators: Vec<Indicator>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionPlan {
    pub variables: Vec<VariableExpansion>,
}

impl ExpansionPlan {
    pub fn n_indicators(&self) -> usize {
        self.variables.iter().map(|v| v.indicators.len()).sum()
    }
}

fn order_statistic_percentile(sorted: &[f64], k: usize) -> f64 {
    let m = sorted.len();
    let pos = (k * m).div_ceil(100).max(1);
    sorted[pos - 1]
}

fn expand_variable(name: &str, values: impl Iterator<Item = f64>) -> VariableExpansion {
    let mut positive: Vec<f64> = values.filter(|v| *v > 0.0).collect();
    if positive.is_empty() {
        return VariableExpansion {
            variable: name.to_string(),
            indicators: Vec::new(),
        };
    }
    positive.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = PERCENTILES
        .iter()
        .map(|&k| order_statistic_percentile(&positive, k))
        .collect();
    thresholds.dedup();

    let at_least = |t: f64| Indicator {
        threshold: t,
        strict: false,
        label: format!("{name}>={t}"),
    };
    let presence = Indicator {
        threshold: 0.0,
        strict: true,
        label: format!("{name}>0"),
    };
    let indicators = if thresholds[0] == positive[0] {
        if thresholds.len() == 1 {
            vec![presence]
        } else {
            thresholds.into_iter().map(at_least).collect()
        }
    } else {
        std::iter::once(presence).chain(thresholds.into_iter().map(at_least)).collect()
    };
    VariableExpansion {
        variable: name.to_string(),
        indicators,
    }
}

/// Builds the indicator plan for every column of `x_raw`.
pub fn build_expansion(x_raw: &DMatrix<f64>, names: &[String]) -> Result<ExpansionPlan> {
    if names.len() != x_raw.ncols() {
        return Err(Error::LengthMismatch {
            expected: x_raw.ncols(),
            got: names.len(),
        });
    }
    let variables = names
        .iter()
        .enumerate()
        .map(|(j, name)| expand_variable(name, x_raw.column(j).iter().copied()))
        .collect();
    Ok(ExpansionPlan { variables })
}

/// Evaluates the plan's indicators on `x_raw`, optionally prepending an
/// all-ones intercept column. Returns the binary matrix and its column names.
pub fn apply_expansion(
    x_raw: &DMatrix<f64>,
    plan: &ExpansionPlan,
    with_intercept: bool,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    if plan.variables.len() != x_raw.ncols() {
        return Err(Error::LengthMismatch {
            expected: plan.variables.len(),
            got: x_raw.ncols(),
        });
    }
    let offset = usize::from(with_intercept);
    let p = offset + plan.n_indicators();
    let n = x_raw.nrows();
    let mut out = DMatrix::zeros(n, p);
    let mut names = Vec::with_capacity(p);
    if with_intercept {
        out.column_mut(0).fill(1.0);
        names.push("intercept".to_string());
    }
    let mut col = offset;
    for (j, var) in plan.variables.iter().enumerate() {
        for ind in &var.indicators {
            for i in 0..n {
                if ind.matches(x_raw[(i, j)]) {
                    out[(i, col)] = 1.0;
                }
            }
            names.push(ind.label.clone());
            col += 1;
        }
    }
    Ok((out, names))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn column(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(values.len(), 1, values)
    }

    fn thresholds(plan: &ExpansionPlan) -> Vec<(f64, bool)> {
        plan.variables[0].indicators.iter().map(|i| (i.threshold, i.strict)).collect()
    }

    #[test]
    fn seven_value_column() {
        let x = column(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let plan = build_expansion(&x, &["v".into()]).unwrap();
        assert_eq!(thresholds(&plan), vec![(1.0, false), (2.0, false), (3.0, false), (4.0, false)]);
        assert_eq!(plan.variables[0].indicators[0].label, "v>=1");
    }

    #[test]
    fn all_zero_column() {
        let plan = build_expansion(&column(&[0.0; 6]), &["z".into()]).unwrap();
        assert!(plan.variables[0].indicators.is_empty());
    }

    #[test]
    fn binary_column_is_presence_flag() {
        let plan = build_expansion(&column(&[0.0, 1.0, 1.0, 0.0, 1.0]), &["b".into()]).unwrap();
        assert_eq!(thresholds(&plan), vec![(0.0, true)]);
        assert_eq!(plan.variables[0].indicators[0].label, "b>0");
    }

    #[test]
    fn presence_kept_when_distinct() {
        // 10 positive values; 20th percentile is the 2nd smallest, so >0 differs from >= t20
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.5).collect();
        let plan = build_expansion(&column(&vals), &["c".into()]).unwrap();
        let t = thresholds(&plan);
        assert_eq!(t[0], (0.0, true));
        assert_eq!(t.len(), 5);
    }

    #[test]
    fn apply_boundaries_and_intercept() {
        let x = column(&[0.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let plan = build_expansion(&x, &["v".into()]).unwrap();
        let (out, names) = apply_expansion(&column(&[5.0, 2.0, 0.0]), &plan, true).unwrap();
        assert_eq!(out.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0; 5]);
        // exactly at threshold 2 is included
        assert_eq!(out.row(1).iter().copied().collect::<Vec<_>>(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.row(2).iter().copied().collect::<Vec<_>>(), vec![1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(names[0], "intercept");

        let presence = build_expansion(&column(&[0.0, 1.0]), &["b".into()]).unwrap();
        let (out, _) = apply_expansion(&column(&[0.0]), &presence, false).unwrap();
        assert_eq!(out[(0, 0)], 0.0);
    }

    #[test]
    fn column_count_mismatch() {
        let plan = build_expansion(&column(&[1.0, 2.0]), &["a".into()]).unwrap();
        let wide = DMatrix::zeros(2, 2);
        assert!(apply_expansion(&wide, &plan, false).is_err());
    }

    proptest! {
        #[test]
        fn thresholds_increase_and_columns_are_monotone(
            values in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..50.0, (0u8..5).prop_map(f64::from)], 1..60)
        ) {
            let x = column(&values);
            let plan = build_expansion(&x, &["v".into()]).unwrap();
            let inds = &plan.variables[0].indicators;
            prop_assert!(inds.len() <= 5);
            for pair in inds.windows(2) {
                prop_assert!(pair[0].threshold < pair[1].threshold);
            }
            let (out, _) = apply_expansion(&x, &plan, false).unwrap();
            prop_assert!(out.iter().all(|v| *v == 0.0 || *v == 1.0));
            // larger raw value never switches an indicator off
            for c in 0..out.ncols() {
                for a in 0..values.len() {
                    for b in 0..values.len() {
                        if values[a] <= values[b] {
                            prop_assert!(out[(a, c)] <= out[(b, c)]);
                        }
                    }
                }
            }
            // no two indicators induce the same sample column
            for c1 in 0..out.ncols() {
                for c2 in (c1 + 1)..out.ncols() {
                    prop_assert_ne!(out.column(c1), out.column(c2));
                }
            }
        }
    }
}
