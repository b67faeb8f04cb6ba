//! Population CART: greedy binary partitioning that minimizes the weighted
//! sum of squared errors E_s = sum_i theta_i (y_i - mu_s)^2 under a DGP
//! weight draw, plus the transformed-outcome (TOT) response.
//!
//! Candidate thresholds are the observed values at a node and a split on
//! (j, t) sends {x_j <= t} left. Equal impurities go to the lowest feature,
//! then the lowest threshold. Each node scans presorted feature orders once
//! with centered running sums, then recomputes the few near-optimal
//! candidates exactly, summing over the node's rows in index order.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{Arm, ExperimentTable};
use crate::dgp::{SeedSpec, WeightVector};
use crate::error::{Error, Result};

/// Relative width of the band of approximate impurities that is re-evaluated exactly.
const REFINE_BAND: f64 = 1e-8;
const MAX_REFINE: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeConfig {
    /// Number of split levels; 0 gives a single leaf.
    pub max_depth: usize,
    /// Minimum number of observations in each child of a split.
    pub min_leaf: usize,
    /// Candidate features drawn per node; all features when absent.
    pub mtry: Option<usize>,
    /// Drives the per-node feature draws only.
    pub seed: SeedSpec,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 5,
            min_leaf: 100_000,
            mtry: None,
            seed: SeedSpec::new(0),
        }
    }
}

impl TreeConfig {
    pub fn validate(&self, p: usize) -> Result<()> {
        if self.min_leaf == 0 {
            return Err(Error::InvalidParameter("min_leaf must be at least 1".into()));
        }
        if let Some(m) = self.mtry {
            if m == 0 || m > p {
                return Err(Error::InvalidParameter(format!("mtry = {m} must lie in 1..={p}")));
            }
        }
        Ok(())
    }
}

/// Covariates and response prepared for repeated tree fits: column-major
/// values and, per feature, row indices sorted by value (ties by index).
#[derive(Debug, Clone)]
pub struct TreeData {
    n: usize,
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    order: Vec<Vec<u32>>,
}

impl TreeData {
    pub fn new(x: &DMatrix<f64>, y: &[f64]) -> Result<Self> {
        let (n, p) = x.shape();
        if y.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: y.len() });
        }
        if n == 0 {
            return Err(Error::Empty("tree data has no rows"));
        }
        if n > u32::MAX as usize {
            return Err(Error::InvalidParameter("too many rows for a tree".into()));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("tree data contains non-finite values".into()));
        }
        let values = x.as_slice().to_vec();
        let order = (0..p)
            .map(|j| {
                let col = &values[j * n..(j + 1) * n];
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(TreeData {
            n,
            p,
            x: values,
            y: y.to_vec(),
            order,
        })
    }

    pub fn from_table(table: &ExperimentTable) -> Result<Self> {
        TreeData::new(table.x(), table.y())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    #[inline]
    fn value(&self, row: u32, feature: usize) -> f64 {
        self.x[feature * self.n + row as usize]
    }
}

/// A chosen split and the children's summed impurity E_left + E_right.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    pub impurity: f64,
}

/// Weighted mass and mean, summed in row order about the first row's value
/// so that a constant response gives its value exactly.
fn mass_and_mean(rows: &[u32], y: &[f64], w: &[f64]) -> (f64, f64) {
    let origin = y[rows[0] as usize];
    let (mut mass, mut total) = (0.0, 0.0);
    for &i in rows {
        let i = i as usize;
        mass += w[i];
        total += w[i] * (y[i] - origin);
    }
    (mass, origin + total / mass)
}

fn sse(rows: &[u32], y: &[f64], w: &[f64], mean: f64) -> f64 {
    rows.iter().map(|&i| w[i as usize] * (y[i as usize] - mean).powi(2)).sum()
}

/// Smallest impurity decrease treated as a real improvement; absorbs rounding
/// in splits whose children have identical means.
fn gain_floor(parent: f64, second_moment: f64) -> f64 {
    1e-10 * parent + 1e-20 * second_moment
}

/// E_left + E_right for the split (feature, threshold), computed by two
/// passes over `rows` in the given order.
fn exact_impurity(data: &TreeData, rows: &[u32], w: &[f64], feature: usize, threshold: f64) -> f64 {
    let y = &data.y;
    let (mut origin_l, mut origin_r) = (None, None);
    let (mut ml, mut tl, mut mr, mut tr) = (0.0, 0.0, 0.0, 0.0);
    for &i in rows {
        let (wi, yi) = (w[i as usize], y[i as usize]);
        if data.value(i, feature) <= threshold {
            let o = *origin_l.get_or_insert(yi);
            ml += wi;
            tl += wi * (yi - o);
        } else {
            let o = *origin_r.get_or_insert(yi);
            mr += wi;
            tr += wi * (yi - o);
        }
    }
    let mean_l = origin_l.unwrap_or(0.0) + tl / ml;
    let mean_r = origin_r.unwrap_or(0.0) + tr / mr;
    let (mut el, mut er) = (0.0, 0.0);
    for &i in rows {
        let (wi, yi) = (w[i as usize], y[i as usize]);
        if data.value(i, feature) <= threshold {
            el += wi * (yi - mean_l).powi(2);
        } else {
            er += wi * (yi - mean_r).powi(2);
        }
    }
    el + er
}

#[derive(Default)]
struct Scratch {
    suffix: Vec<(f64, f64, f64)>,
    approx: Vec<(f64, usize, f64)>,
}

/// Core split search. `rows` is the node's row set in ascending order and
/// `sorted[j]` the same rows ordered by feature j.
fn find_split(
    data: &TreeData,
    rows: &[u32],
    sorted: &[Vec<u32>],
    candidates: &[usize],
    w: &[f64],
    min_leaf: usize,
    scratch: &mut Scratch,
) -> Option<Split> {
    let m = rows.len();
    if m < 2 * min_leaf.max(1) {
        return None;
    }
    let y = &data.y;
    let (_, mean) = mass_and_mean(rows, y, w);
    let parent = sse(rows, y, w, mean);
    let second_moment: f64 = rows.iter().map(|&i| w[i as usize] * y[i as usize].powi(2)).sum();
    let floor = gain_floor(parent, second_moment);

    scratch.approx.clear();
    let mut best_approx = f64::INFINITY;
    for &j in candidates {
        let s = &sorted[j];
        // suffix sums of (w, w yc, w yc^2) for the right child
        scratch.suffix.clear();
        scratch.suffix.resize(m + 1, (0.0, 0.0, 0.0));
        for k in (0..m).rev() {
            let i = s[k] as usize;
            let yc = y[i] - mean;
            let (a, b, c) = scratch.suffix[k + 1];
            scratch.suffix[k] = (a + w[i], b + w[i] * yc, c + w[i] * yc * yc);
        }
        let (mut wl, mut sl, mut ql) = (0.0, 0.0, 0.0);
        for k in 0..m - 1 {
            let i = s[k] as usize;
            let yc = y[i] - mean;
            wl += w[i];
            sl += w[i] * yc;
            ql += w[i] * yc * yc;
            if k + 1 < min_leaf {
                continue;
            }
            if m - k - 1 < min_leaf {
                break;
            }
            let t = data.value(s[k], j);
            if t == data.value(s[k + 1], j) {
                continue;
            }
            let (wr, sr, qr) = scratch.suffix[k + 1];
            let approx = (ql - sl * sl / wl) + (qr - sr * sr / wr);
            best_approx = best_approx.min(approx);
            scratch.approx.push((approx, j, t));
        }
    }
    if scratch.approx.is_empty() {
        return None;
    }
    let band = REFINE_BAND * parent + f64::MIN_POSITIVE;
    if parent - (best_approx - band) <= floor {
        return None;
    }
    let cutoff = best_approx + 2.0 * band;
    let mut shortlist: Vec<(f64, usize, f64)> = scratch.approx.iter().copied().filter(|c| c.0 <= cutoff).collect();
    if shortlist.len() > MAX_REFINE {
        shortlist.sort_by(|a, b| a.0.total_cmp(&b.0));
        shortlist.truncate(MAX_REFINE);
        shortlist.sort_by(|a, b| a.1.cmp(&b.1).then(a.2.total_cmp(&b.2)));
    }

    let mut best: Option<Split> = None;
    for &(_, feature, threshold) in &shortlist {
        let impurity = exact_impurity(data, rows, w, feature, threshold);
        if best.is_none_or(|b| impurity < b.impurity) {
            best = Some(Split {
                feature,
                threshold,
                impurity,
            });
        }
    }
    best.filter(|b| parent - b.impurity > floor)
}

/// Best split of `rows` over `candidates`, with both children holding at
/// least `min_leaf` rows. Rows with zero weight are ignored. `None` when no
/// legal split strictly reduces impurity.
pub fn best_split(data: &TreeData, rows: &[usize], candidates: &[usize], w: &WeightVector, min_leaf: usize) -> Result<Option<Split>> {
    if w.len() != data.n {
        return Err(Error::LengthMismatch {
            expected: data.n,
            got: w.len(),
        });
    }
    if let Some(&j) = candidates.iter().find(|&&j| j >= data.p) {
        return Err(Error::InvalidParameter(format!("feature {j} out of range")));
    }
    let wv = w.values();
    let mut member = vec![false; data.n];
    for &i in rows {
        if i >= data.n {
            return Err(Error::InvalidParameter(format!("row {i} out of range")));
        }
        member[i] = wv[i] > 0.0;
    }
    let node_rows: Vec<u32> = (0..data.n as u32).filter(|&i| member[i as usize]).collect();
    let mut candidates = candidates.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    let sorted: Vec<Vec<u32>> = (0..data.p)
        .map(|j| {
            if candidates.binary_search(&j).is_ok() {
                data.order[j].iter().copied().filter(|&i| member[i as usize]).collect()
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(find_split(data, &node_rows, &sorted, &candidates, wv, min_leaf, &mut Scratch::default()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Node {
    Split {
        id: usize,
        depth: usize,
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        id: usize,
        depth: usize,
        mean: f64,
        mass: f64,
        count: usize,
    },
}

impl Node {
    pub fn id(&self) -> usize {
        match self {
            Node::Split { id, .. } | Node::Leaf { id, .. } => *id,
        }
    }

    /// Root is depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Node::Split { depth, .. } | Node::Leaf { depth, .. } => *depth,
        }
    }
}

/// A fitted tree: nodes in preorder, root first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeModel {
    pub nodes: Vec<Node>,
    pub n_features: usize,
    pub config: TreeConfig,
}

impl TreeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        loop {
            match self.nodes[node] {
                Node::Leaf { mean, .. } => return mean,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => node = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    /// Predictions for every row of `x`.
    pub fn predict_rows(&self, x: &DMatrix<f64>) -> Vec<f64> {
        let mut row = vec![0.0; x.ncols()];
        (0..x.nrows())
            .map(|i| {
                for (j, slot) in row.iter_mut().enumerate() {
                    *slot = x[(i, j)];
                }
                self.predict(&row)
            })
            .collect()
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Shallowest depth at which each feature is split on, if at all.
    pub fn first_split_depths(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.n_features];
        for node in &self.nodes {
            if let Node::Split { feature, depth, .. } = *node {
                let slot: &mut Option<usize> = &mut out[feature];
                *slot = Some(slot.map_or(depth, |d| d.min(depth)));
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let tree: TreeModel = serde_json::from_str(s)?;
        tree.check()?;
        Ok(tree)
    }

    fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(format!("malformed tree: {msg}")));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        for (k, node) in self.nodes.iter().enumerate() {
            if node.id() != k {
                return bad(format!("node {k} carries id {}", node.id()));
            }
            if let Node::Split { feature, left, right, .. } = *node {
                if feature >= self.n_features || left <= k || right <= k || left >= self.nodes.len() || right >= self.nodes.len() {
                    return bad(format!("split node {k} has invalid feature or children"));
                }
            }
        }
        Ok(())
    }
}

struct Pending {
    parent: Option<(usize, bool)>,
    key: u64,
    depth: usize,
    rows: Vec<u32>,
    sorted: Option<Vec<Vec<u32>>>,
}

fn candidate_features(cfg: &TreeConfig, p: usize, key: u64) -> Vec<usize> {
    match cfg.mtry {
        Some(m) if m < p => {
            let mut rng = cfg.seed.substream(key).rng();
            let mut picked = sample(&mut rng, p, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..p).collect(),
    }
}

/// Greedy recursive population CART under weights `w`. Rows with zero weight
/// take no part in the fit.
pub fn fit_tree(data: &TreeData, w: &WeightVector, cfg: &TreeConfig) -> Result<TreeModel> {
    if w.len() != data.n {
        return Err(Error::LengthMismatch {
            expected: data.n,
            got: w.len(),
        });
    }
    cfg.validate(data.p)?;
    let wv = w.values();
    let rows: Vec<u32> = (0..data.n as u32).filter(|&i| wv[i as usize] > 0.0).collect();
    if rows.is_empty() {
        return Err(Error::ZeroWeightMass);
    }
    let splittable = |depth: usize, count: usize| depth <= cfg.max_depth && count >= 2 * cfg.min_leaf;
    let sorted_for = |member: &dyn Fn(u32) -> bool| -> Vec<Vec<u32>> {
        data.order.iter().map(|o| o.iter().copied().filter(|&i| member(i)).collect()).collect()
    };

    let root_sorted = splittable(1, rows.len()).then(|| sorted_for(&|i| wv[i as usize] > 0.0));
    let mut stack = vec![Pending {
        parent: None,
        key: 1,
        depth: 1,
        rows,
        sorted: root_sorted,
    }];
    let mut nodes: Vec<Node> = Vec::new();
    let mut scratch = Scratch::default();
    let mut goes_left = vec![false; data.n];

    while let Some(node) = stack.pop() {
        let id = nodes.len();
        if let Some((pid, is_left)) = node.parent {
            if let Node::Split { left, right, .. } = &mut nodes[pid] {
                *(if is_left { left } else { right }) = id;
            }
        }
        let split = node.sorted.as_ref().and_then(|sorted| {
            let candidates = candidate_features(cfg, data.p, node.key);
            find_split(data, &node.rows, sorted, &candidates, wv, cfg.min_leaf, &mut scratch)
        });
        let Some(split) = split else {
            let (mass, mean) = mass_and_mean(&node.rows, &data.y, wv);
            nodes.push(Node::Leaf {
                id,
                depth: node.depth,
                mean,
                mass,
                count: node.rows.len(),
            });
            continue;
        };

        nodes.push(Node::Split {
            id,
            depth: node.depth,
            feature: split.feature,
            threshold: split.threshold,
            left: 0,
            right: 0,
        });
        let (mut left, mut right) = (Vec::new(), Vec::new());
        for &i in &node.rows {
            let l = data.value(i, split.feature) <= split.threshold;
            goes_left[i as usize] = l;
            if l {
                left.push(i);
            } else {
                right.push(i);
            }
        }
        let child_depth = node.depth + 1;
        let partition = |want_left: bool| -> Vec<Vec<u32>> {
            node.sorted
                .as_ref()
                .unwrap()
                .iter()
                .map(|s| s.iter().copied().filter(|&i| goes_left[i as usize] == want_left).collect())
                .collect()
        };
        let left_sorted = splittable(child_depth, left.len()).then(|| partition(true));
        let right_sorted = splittable(child_depth, right.len()).then(|| partition(false));
        let key = node.key.wrapping_mul(2);
        stack.push(Pending {
            parent: Some((id, false)),
            key: key | 1,
            depth: child_depth,
            rows: right,
            sorted: right_sorted,
        });
        stack.push(Pending {
            parent: Some((id, true)),
            key,
            depth: child_depth,
            rows: left,
            sorted: left_sorted,
        });
    }
    Ok(TreeModel {
        nodes,
        n_features: data.p,
        config: *cfg,
    })
}

/// Transformed outcomes y* = y (d - q) / (q (1 - q)).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TotSample {
    pub y_star: Vec<f64>,
    pub q: f64,
}

pub fn tot_transform(y: &[f64], arms: &[Arm], q: f64) -> Result<TotSample> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidParameter(format!("q = {q} must lie in (0, 1)")));
    }
    if y.len() != arms.len() {
        return Err(Error::LengthMismatch {
            expected: y.len(),
            got: arms.len(),
        });
    }
    let scale = q * (1.0 - q);
    let y_star = y
        .iter()
        .zip(arms)
        .map(|(&v, arm)| if v == 0.0 { 0.0 } else { v * (arm.indicator() - q) / scale })
        .collect();
    Ok(TotSample { y_star, q })
}
