//! Bayesian forests: one population CART fit per posterior weight draw.
//!
//! For treatment effects each draw b fits one tree per arm, with the arms'
//! weights taken from independent substreams, and averages the differenced
//! predictions with full-sample weights from a third substream of draw b.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cart::{fit_tree, tot_transform, TreeConfig, TreeData, TreeModel};
use crate::data::{Arm, ExperimentTable};
use crate::dgp::{self, sample_multinomial_weights, sample_weights, PosteriorMoments, SeedSpec, WeightKind, WeightVector};
use crate::error::{Error, Result};

/// Default number of trees.
pub const DEFAULT_TREES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeModel>,
    pub weights_kind: WeightKind,
    pub config: TreeConfig,
    pub seed: SeedSpec,
}

/// Weights of draw b over n units.
pub fn draw_weights(kind: WeightKind, n: usize, seed: SeedSpec, b: u64) -> WeightVector {
    match kind {
        WeightKind::PosteriorDraw => sample_weights(n, seed.replicate(b)),
        WeightKind::Multinomial => sample_multinomial_weights(n, seed.replicate(b)),
        WeightKind::PosteriorMeanDgp => WeightVector::posterior_mean(n),
    }
}

/// Fits `trees` trees; tree b uses weight draw b of `seed` and feature draws
/// from `cfg.seed.replicate(b)`.
pub fn fit_forest(data: &TreeData, trees: usize, cfg: &TreeConfig, seed: SeedSpec, kind: WeightKind) -> Result<ForestModel> {
    if trees == 0 {
        return Err(Error::InvalidParameter("a forest needs at least one tree".into()));
    }
    cfg.validate(data.p())?;
    let fitted = (0..trees as u64)
        .into_par_iter()
        .map(|b| {
            let w = draw_weights(kind, data.n(), seed, b);
            let tree_cfg = TreeConfig {
                seed: cfg.seed.replicate(b),
                ..*cfg
            };
            fit_tree(data, &w, &tree_cfg).map_err(|e| e.in_replicate(b))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ForestModel {
        trees: fitted,
        weights_kind: kind,
        config: *cfg,
        seed,
    })
}

/// Forest on the transformed outcome y*, using the table's q.
pub fn fit_tot_forest(table: &ExperimentTable, trees: usize, cfg: &TreeConfig, seed: SeedSpec, kind: WeightKind) -> Result<ForestModel> {
    let tot = tot_transform(table.y(), table.arms(), table.q())?;
    let data = TreeData::new(table.x(), &tot.y_star)?;
    fit_forest(&data, trees, cfg, seed, kind)
}

/// values[0] + mean(values - values[0]); exact for constant input.
fn shifted_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut values = values.peekable();
    let origin = *values.peek().expect("nonempty");
    let (mut count, mut total) = (0.0, 0.0);
    for v in values {
        count += 1.0;
        total += v - origin;
    }
    origin + total / count
}

impl ForestModel {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    /// Prediction of every tree at x.
    pub fn predict_draws(&self, x: &[f64]) -> Vec<f64> {
        self.trees.iter().map(|t| t.predict(x)).collect()
    }

    /// Posterior-mean prediction: the average over trees.
    pub fn predict_mean(&self, x: &[f64]) -> f64 {
        shifted_mean(self.trees.iter().map(|t| t.predict(x)))
    }

    pub fn predict_mean_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let per_tree: Vec<Vec<f64>> = self.trees.par_iter().map(|t| t.predict_rows(x)).collect();
        (0..x.nrows()).map(|i| shifted_mean(per_tree.iter().map(|p| p[i]))).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let forest: ForestModel = serde_json::from_str(s)?;
        for tree in &forest.trees {
            TreeModel::from_json(&serde_json::to_string(tree)?)?;
        }
        Ok(forest)
    }
}

/// probabilities[j][d - 1] is the share of trees splitting on feature j at
/// depth d or shallower (root = depth 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitProbabilityTable {
    pub n_trees: usize,
    pub max_depth: usize,
    pub probabilities: Vec<Vec<f64>>,
    /// Share of trees that are a single leaf.
    pub no_split: f64,
}

impl SplitProbabilityTable {
    pub fn get(&self, feature: usize, depth: usize) -> f64 {
        self.probabilities[feature][depth - 1]
    }
}

pub fn split_probabilities(forest: &ForestModel, max_depth: usize) -> Result<SplitProbabilityTable> {
    if forest.is_empty() {
        return Err(Error::Empty("forest has no trees"));
    }
    if max_depth == 0 {
        return Err(Error::InvalidParameter("split probability depth must be at least 1".into()));
    }
    let p = forest.trees[0].n_features;
    let mut counts = vec![vec![0usize; max_depth]; p];
    let mut leaves = 0;
    for tree in &forest.trees {
        if tree.nodes.len() == 1 {
            leaves += 1;
        }
        for (j, first) in tree.first_split_depths().into_iter().enumerate() {
            if let Some(first) = first {
                for slot in counts[j].iter_mut().skip(first - 1) {
                    *slot += 1;
                }
            }
        }
    }
    let b = forest.len() as f64;
    Ok(SplitProbabilityTable {
        n_trees: forest.len(),
        max_depth,
        probabilities: counts.into_iter().map(|c| c.into_iter().map(|k| k as f64 / b).collect()).collect(),
        no_split: leaves as f64 / b,
    })
}

/// Paired per-arm forests plus the seed of the pooled averaging weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmForests {
    pub treatment: ForestModel,
    pub control: ForestModel,
    pub averaging_seed: SeedSpec,
}

/// Fits one forest per arm. Draw b uses weights `seed.substream(TREATMENT)`,
/// `seed.substream(CONTROL)` and, for averaging, `seed.substream(POOLED)`, each
/// at replicate b.
pub fn fit_arm_forests(table: &ExperimentTable, trees: usize, cfg: &TreeConfig, seed: SeedSpec, kind: WeightKind) -> Result<ArmForests> {
    let fit = |arm: Arm, tag: u64| -> Result<ForestModel> {
        let rows = table.arm_rows(arm);
        if rows.is_empty() {
            return Err(Error::TooFewObservations { needed: 1, got: 0 });
        }
        let slice = table.subset(&rows);
        let data = TreeData::new(slice.x(), slice.y())?;
        let arm_cfg = TreeConfig {
            seed: cfg.seed.substream(tag),
            ..*cfg
        };
        let mut forest = fit_forest(&data, trees, &arm_cfg, seed.substream(tag), kind)?;
        forest.config = *cfg;
        Ok(forest)
    };
    Ok(ArmForests {
        treatment: fit(Arm::Treatment, dgp::streams::TREATMENT)?,
        control: fit(Arm::Control, dgp::streams::CONTROL)?,
        averaging_seed: seed.substream(dgp::streams::POOLED),
    })
}

fn check_pair(ft: &ForestModel, fc: &ForestModel) -> Result<()> {
    if ft.len() != fc.len() {
        return Err(Error::LengthMismatch {
            expected: ft.len(),
            got: fc.len(),
        });
    }
    if ft.is_empty() {
        return Err(Error::Empty("forest has no trees"));
    }
    Ok(())
}

/// Draws of y_t(x) - y_c(x), one per tree pair.
pub fn hte_predict(ft: &ForestModel, fc: &ForestModel, x: &[f64]) -> Result<Vec<f64>> {
    check_pair(ft, fc)?;
    Ok(ft.trees.iter().zip(&fc.trees).map(|(t, c)| t.predict(x) - c.predict(x)).collect())
}

/// Rows for which a variable-average effect is computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selector {
    All,
    /// lo <= x < hi
    Interval { lo: f64, hi: f64 },
    Values { values: Vec<f64> },
}

impl Selector {
    pub fn matches(&self, v: f64) -> bool {
        match self {
            Selector::All => true,
            Selector::Interval { lo, hi } => *lo <= v && v < *hi,
            Selector::Values { values } => values.contains(&v),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ForestAte {
    pub moments: PosteriorMoments,
    pub draws: Vec<f64>,
}

/// Draw b: theta_b-weighted average of the tree-pair-b effect over `rows`.
fn averaged_effects(forests: &ArmForests, table: &ExperimentTable, rows: &[usize]) -> Result<Vec<f64>> {
    let (ft, fc) = (&forests.treatment, &forests.control);
    check_pair(ft, fc)?;
    if rows.is_empty() {
        return Err(Error::EmptySelector);
    }
    let x_rows: Vec<Vec<f64>> = rows.iter().map(|&i| table.row(i)).collect();
    let n = table.n();
    Ok((0..ft.len())
        .into_par_iter()
        .map(|b| {
            let w = draw_weights(ft.weights_kind, n, forests.averaging_seed, b as u64);
            let wv = w.values();
            let (tree_t, tree_c) = (&ft.trees[b], &fc.trees[b]);
            let effect = |k: usize| tree_t.predict(&x_rows[k]) - tree_c.predict(&x_rows[k]);
            let origin = effect(0);
            let (mut mass, mut total) = (0.0, 0.0);
            for (k, &i) in rows.iter().enumerate() {
                mass += wv[i];
                total += wv[i] * (effect(k) - origin);
            }
            if mass > 0.0 {
                origin + total / mass
            } else {
                f64::NAN
            }
        })
        .collect::<Vec<f64>>())
    .and_then(|draws| {
        if draws.iter().any(|d| d.is_nan()) {
            Err(Error::ZeroWeightMass)
        } else {
            Ok(draws)
        }
    })
}

/// Effect averaged over the units whose feature j satisfies `selector`.
pub fn variable_effect(forests: &ArmForests, table: &ExperimentTable, feature: usize, selector: &Selector) -> Result<Vec<f64>> {
    if feature >= table.p() {
        return Err(Error::InvalidParameter(format!("feature {feature} out of range")));
    }
    let x = table.x();
    let rows: Vec<usize> = (0..table.n()).filter(|&i| selector.matches(x[(i, feature)])).collect();
    averaged_effects(forests, table, &rows)
}

/// Posterior of the forest ATE: the effect averaged over every unit.
pub fn forest_ate(forests: &ArmForests, table: &ExperimentTable) -> Result<ForestAte> {
    let rows: Vec<usize> = (0..table.n()).collect();
    let draws = averaged_effects(forests, table, &rows)?;
    Ok(ForestAte {
        moments: PosteriorMoments::from_draws(&draws)?,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cart::Node;
    use rand::{Rng, SeedableRng};

    fn cfg(max_depth: usize, min_leaf: usize) -> TreeConfig {
        TreeConfig {
            max_depth,
            min_leaf,
            mtry: None,
            seed: SeedSpec::new(3),
        }
    }

    fn small_table(seed: u64, n: usize) -> ExperimentTable {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let arms: Vec<Arm> = (0..n).map(|i| if i % 3 == 0 { Arm::Control } else { Arm::Treatment }).collect();
        let y = (0..n)
            .map(|i| {
                let lift = if arms[i] == Arm::Treatment && x[(i, 0)] > 0.5 { 2.0 } else { 0.0 };
                lift + x[(i, 1)] + rng.random::<f64>()
            })
            .collect();
        ExperimentTable::new(y, arms, x, vec!["a".into(), "b".into()], 2.0 / 3.0).unwrap()
    }

    fn leaf_tree(mean: f64, p: usize) -> TreeModel {
        TreeModel {
            nodes: vec![Node::Leaf {
                id: 0,
                depth: 1,
                mean,
                mass: 1.0,
                count: 1,
            }],
            n_features: p,
            config: cfg(0, 1),
        }
    }

    fn split_tree(root: usize, second: Option<usize>) -> TreeModel {
        let leaf = |id, depth| Node::Leaf {
            id,
            depth,
            mean: 0.0,
            mass: 1.0,
            count: 1,
        };
        let mut nodes = vec![Node::Split {
            id: 0,
            depth: 1,
            feature: root,
            threshold: 0.5,
            left: 1,
            right: 2,
        }];
        match second {
            Some(f) => {
                nodes[0] = Node::Split {
                    id: 0,
                    depth: 1,
                    feature: root,
                    threshold: 0.5,
                    left: 1,
                    right: 4,
                };
                nodes.push(Node::Split {
                    id: 1,
                    depth: 2,
                    feature: f,
                    threshold: 0.2,
                    left: 2,
                    right: 3,
                });
                nodes.extend([leaf(2, 3), leaf(3, 3), leaf(4, 2)]);
            }
            None => nodes.extend([leaf(1, 2), leaf(2, 2)]),
        }
        TreeModel {
            nodes,
            n_features: 3,
            config: cfg(3, 1),
        }
    }

    fn forest_of(trees: Vec<TreeModel>) -> ForestModel {
        ForestModel {
            trees,
            weights_kind: WeightKind::PosteriorDraw,
            config: cfg(3, 1),
            seed: SeedSpec::new(0),
        }
    }

    #[test]
    fn split_probability_counts() {
        let f = forest_of(vec![
            split_tree(0, Some(2)),
            split_tree(1, Some(2)),
            split_tree(0, Some(2)),
            split_tree(0, None),
        ]);
        let t = split_probabilities(&f, 3).unwrap();
        assert_eq!(t.get(2, 1), 0.0);
        assert_eq!(t.get(2, 2), 0.75);
        assert_eq!(t.get(0, 1), 0.75);
        assert_eq!(t.get(1, 3), 0.25);
        for row in &t.probabilities {
            assert!(row.windows(2).all(|w| w[0] <= w[1]));
        }
        let leaves = split_probabilities(&forest_of(vec![leaf_tree(1.0, 3); 3]), 2).unwrap();
        assert!(leaves.probabilities.iter().flatten().all(|&p| p == 0.0));
        assert_eq!(leaves.no_split, 1.0);
        let all_root = split_probabilities(&forest_of(vec![split_tree(1, None); 5]), 1).unwrap();
        assert_eq!(all_root.get(1, 1), 1.0);
    }

    #[test]
    fn posterior_mean_mode_gives_sample_tree() {
        let t = small_table(1, 200);
        let data = TreeData::from_table(&t).unwrap();
        let f = fit_forest(&data, 1, &cfg(3, 10), SeedSpec::new(9), WeightKind::PosteriorMeanDgp).unwrap();
        let single = fit_tree(&data, &WeightVector::posterior_mean(200), &TreeConfig { seed: cfg(3, 10).seed.replicate(0), ..cfg(3, 10) }).unwrap();
        assert_eq!(f.trees[0], single);
    }

    #[test]
    fn constant_response_forest() {
        let x = DMatrix::from_fn(50, 2, |i, j| (i * (j + 1)) as f64);
        let data = TreeData::new(&x, &[2.5; 50]).unwrap();
        let f = fit_forest(&data, 200, &cfg(5, 1), SeedSpec::new(1), WeightKind::PosteriorDraw).unwrap();
        assert!(f.trees.iter().all(|t| t.nodes.len() == 1 && t.predict(&[0.0, 0.0]) == 2.5));
        // the forest mean and the theta = 1 tree are separate computations that agree here
        let single = fit_tree(&data, &WeightVector::posterior_mean(50), &cfg(5, 1)).unwrap();
        assert_eq!(f.predict_mean(&[3.0, 4.0]), single.predict(&[3.0, 4.0]));
    }

    #[test]
    fn forest_mean_differs_from_sample_tree() {
        let t = small_table(2, 300);
        let data = TreeData::from_table(&t).unwrap();
        let f = fit_forest(&data, 50, &cfg(4, 5), SeedSpec::new(2), WeightKind::PosteriorDraw).unwrap();
        let single = fit_tree(&data, &WeightVector::posterior_mean(300), &cfg(4, 5)).unwrap();
        let differs = (0..300).any(|i| f.predict_mean(&t.row(i)) != single.predict(&t.row(i)));
        assert!(differs);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let t = small_table(3, 400);
        let data = TreeData::from_table(&t).unwrap();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fit_forest(&data, 40, &TreeConfig { mtry: Some(1), ..cfg(4, 5) }, SeedSpec::new(4), WeightKind::PosteriorDraw).unwrap())
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn depth_zero_arm_forests_are_difference_in_means() {
        let t = small_table(4, 90);
        let forests = fit_arm_forests(&t, 20, &cfg(0, 1), SeedSpec::new(1), WeightKind::PosteriorMeanDgp).unwrap();
        let yt = t.arm_y(Arm::Treatment);
        let yc = t.arm_y(Arm::Control);
        let leaf_mean = |v: &[f64]| v[0] + v.iter().map(|y| y - v[0]).sum::<f64>() / v.len() as f64;
        let expected = leaf_mean(&yt) - leaf_mean(&yc);
        assert!(hte_predict(&forests.treatment, &forests.control, &[0.3, 0.3]).unwrap().iter().all(|&d| d == expected));
        let ate = forest_ate(&forests, &t).unwrap();
        assert!(ate.draws.iter().all(|&d| d == expected));
        let cond = variable_effect(&forests, &t, 0, &Selector::Interval { lo: 0.0, hi: 0.5 }).unwrap();
        assert!(cond.iter().all(|&d| d == expected));
        // the plain difference in means differs from the leaf means by rounding at most
        let u = crate::ate::unadjusted_ate(&t).unwrap().mean;
        assert!((u - expected).abs() < 1e-14);
    }

    #[test]
    fn identical_arms_give_zero_effects() {
        let t = small_table(5, 60);
        let data = TreeData::from_table(&t).unwrap();
        let a = fit_forest(&data, 30, &cfg(3, 2), SeedSpec::new(6), WeightKind::PosteriorDraw).unwrap();
        let b = fit_forest(&data, 30, &cfg(3, 2), SeedSpec::new(6), WeightKind::PosteriorDraw).unwrap();
        assert!(hte_predict(&a, &b, &[0.7, 0.1]).unwrap().iter().all(|&d| d == 0.0));
        let short = fit_forest(&data, 29, &cfg(3, 2), SeedSpec::new(6), WeightKind::PosteriorDraw).unwrap();
        assert!(hte_predict(&a, &short, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn selectors_combine_to_the_ate() {
        let t = small_table(6, 300);
        let forests = fit_arm_forests(&t, 40, &cfg(3, 10), SeedSpec::new(8), WeightKind::PosteriorDraw).unwrap();
        let ate = forest_ate(&forests, &t).unwrap();
        let full = variable_effect(&forests, &t, 0, &Selector::All).unwrap();
        assert_eq!(full, ate.draws);

        let low = Selector::Interval { lo: f64::NEG_INFINITY, hi: 0.5 };
        let high = Selector::Interval { lo: 0.5, hi: f64::INFINITY };
        let el = variable_effect(&forests, &t, 0, &low).unwrap();
        let eh = variable_effect(&forests, &t, 0, &high).unwrap();
        for b in 0..ate.draws.len() {
            let w = draw_weights(WeightKind::PosteriorDraw, t.n(), forests.averaging_seed, b as u64);
            let (mut ml, mut mh) = (0.0, 0.0);
            for i in 0..t.n() {
                if t.x()[(i, 0)] < 0.5 {
                    ml += w.values()[i];
                } else {
                    mh += w.values()[i];
                }
            }
            let combined = (ml * el[b] + mh * eh[b]) / (ml + mh);
            assert!((combined - ate.draws[b]).abs() < 1e-12);
        }
        assert!(matches!(
            variable_effect(&forests, &t, 0, &Selector::Values { values: vec![7.0] }),
            Err(Error::EmptySelector)
        ));
    }

    #[test]
    fn arm_streams_are_independent_of_each_other() {
        let t = small_table(7, 120);
        let a = fit_arm_forests(&t, 10, &cfg(2, 5), SeedSpec::new(1), WeightKind::PosteriorDraw).unwrap();
        let b = fit_arm_forests(&t, 10, &cfg(2, 5), SeedSpec::new(1), WeightKind::PosteriorDraw).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.treatment.seed, a.control.seed);
        assert_ne!(a.averaging_seed, a.treatment.seed);
    }

    #[test]
    fn json_round_trip() {
        let t = small_table(8, 150);
        let f = fit_tot_forest(&t, 5, &cfg(3, 10), SeedSpec::new(2), WeightKind::PosteriorDraw).unwrap();
        assert_eq!(ForestModel::from_json(&f.to_json().unwrap()).unwrap(), f);
    }

    #[test]
    fn invalid_forests() {
        let t = small_table(9, 30);
        let data = TreeData::from_table(&t).unwrap();
        assert!(fit_forest(&data, 0, &cfg(1, 1), SeedSpec::new(0), WeightKind::PosteriorDraw).is_err());
        let f = forest_of(vec![]);
        assert!(split_probabilities(&f, 1).is_err());
    }
}
