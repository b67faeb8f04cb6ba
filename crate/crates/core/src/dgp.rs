//! The Dirichlet-multinomial data generating process in its non-informative
//! limit: every posterior DGP realization puts independent Exp(1) weights on
//! the observed data points.
//!
//! Weight draws are addressed by a [`SeedSpec`], a (master seed, replicate
//! index) pair mapped onto an independent ChaCha stream, so bootstrap output
//! does not depend on evaluation order or on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SeedSpec {
    pub master_seed: u64,
    pub replicate_index: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeedSpec {
    pub fn new(master_seed: u64) -> Self {
        SeedSpec {
            master_seed,
            replicate_index: 0,
        }
    }

    pub fn replicate(self, replicate_index: u64) -> Self {
        SeedSpec {
            replicate_index,
            ..self
        }
    }

    /// A seed family statistically independent of `self`, labelled by `tag`.
    /// The replicate index is carried over.
    pub fn substream(self, tag: u64) -> Self {
        SeedSpec {
            master_seed: splitmix64(self.master_seed ^ splitmix64(tag)),
            replicate_index: self.replicate_index,
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.replicate_index);
        rng
    }
}

/// Substream tags for the independent weight families of a two-arm analysis.
pub mod streams {
    pub const TREATMENT: u64 = 1;
    pub const CONTROL: u64 = 2;
    pub const POOLED: u64 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// iid Exp(1) draw from the posterior.
    PosteriorDraw,
    /// theta = 1, at which DGP statistics reduce to sample statistics.
    PosteriorMeanDgp,
    /// Multinomial(n, 1/n) bootstrap counts; only used as a Random-Forest style oracle.
    Multinomial,
}

/// Observation weights for one DGP realization.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector {
    values: Vec<f64>,
    kind: WeightKind,
}

impl WeightVector {
    pub fn posterior_mean(n: usize) -> Self {
        WeightVector {
            values: vec![1.0; n],
            kind: WeightKind::PosteriorMeanDgp,
        }
    }

    /// Wraps arbitrary nonnegative weights. Negative or non-finite entries are rejected.
    pub fn from_values(values: Vec<f64>, kind: WeightKind) -> Result<Self> {
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!("weight {bad} is not a finite nonnegative number")));
        }
        Ok(WeightVector { values, kind })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn kind(&self) -> WeightKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// |theta|, the total weight mass.
    pub fn mass(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn subset(&self, rows: &[usize]) -> WeightVector {
        WeightVector {
            values: rows.iter().map(|&i| self.values[i]).collect(),
            kind: self.kind,
        }
    }

    pub fn scaled(&self, factor: f64) -> WeightVector {
        WeightVector {
            values: self.values.iter().map(|v| v * factor).collect(),
            kind: self.kind,
        }
    }
}

/// A single Exp(1) variate by inversion; exact-zero uniforms are redrawn so the
/// result is strictly positive.
pub(crate) fn exp1<R: Rng>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return -u.ln();
        }
    }
}

/// Draws theta_i ~ iid Exp(1), i = 1..n.
pub fn sample_weights(n: usize, seed: SeedSpec) -> WeightVector {
    let mut rng = seed.rng();
    WeightVector {
        values: (0..n).map(|_| exp1(&mut rng)).collect(),
        kind: WeightKind::PosteriorDraw,
    }
}

/// Multinomial(n, 1/n) counts, the frequentist bootstrap's resampling weights.
pub fn sample_multinomial_weights(n: usize, seed: SeedSpec) -> WeightVector {
    let mut rng = seed.rng();
    let mut counts = vec![0.0; n];
    for _ in 0..n {
        counts[rng.random_range(0..n)] += 1.0;
    }
    WeightVector {
        values: counts,
        kind: WeightKind::Multinomial,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorMoments {
    pub mean: f64,
    pub variance: f64,
}

impl PosteriorMoments {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    /// Sample mean and (B - 1)-denominator variance of Monte-Carlo draws.
    pub fn from_draws(draws: &[f64]) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Empty("draws"));
        }
        let b = draws.len() as f64;
        // centered on the first draw so a constant vector keeps its value exactly
        let mean = draws[0] + draws.iter().map(|d| d - draws[0]).sum::<f64>() / b;
        let variance = if draws.len() > 1 {
            draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (b - 1.0)
        } else {
            0.0
        };
        Ok(PosteriorMoments { mean, variance })
    }
}

/// Weighted average sum(theta_i v_i) / sum(theta_i).
pub fn dgp_mean(v: &[f64], w: &WeightVector) -> Result<f64> {
    if v.len() != w.len() {
        return Err(Error::LengthMismatch {
            expected: v.len(),
            got: w.len(),
        });
    }
    let mass = w.mass();
    if mass <= 0.0 {
        return Err(Error::ZeroWeightMass);
    }
    let total: f64 = v.iter().zip(w.values()).map(|(v, t)| v * t).sum();
    Ok(total / mass)
}

/// Exact posterior mean and variance of the DGP mean of `v` under Exp(1) weights:
/// mean = v_bar and var = (1/(n+1)) [v'v/n - v_bar^2].
pub fn dgp_mean_moments(v: &[f64]) -> Result<PosteriorMoments> {
    if v.is_empty() {
        return Err(Error::Empty("vector"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    // v'v/n - v_bar^2 evaluated in centered form
    let spread = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok(PosteriorMoments {
        mean,
        variance: spread / (n + 1.0),
    })
}

/// Evaluates `stat` at B independent posterior weight draws over n observations.
/// Replicate b always uses `seed.replicate(b)`.
pub fn bootstrap_statistic<F>(stat: F, n: usize, replicates: usize, seed: SeedSpec) -> Result<Vec<f64>>
where
    F: Fn(&WeightVector) -> Result<f64> + Sync,
{
    if replicates == 0 {
        return Err(Error::InvalidParameter("bootstrap needs at least one replicate".into()));
    }
    (0..replicates as u64)
        .into_par_iter()
        .map(|b| stat(&sample_weights(n, seed.replicate(b))).map_err(|e| e.in_replicate(b)))
        .collect()
}

/// Outcome of a bootstrap run that tolerates a few singular replicates.
#[derive(Debug, Clone)]
pub struct Redrawn<T> {
    pub draws: Vec<T>,
    /// Replicate indices that failed and were replaced.
    pub singular: Vec<u64>,
}

/// Runs `replicate(index)` for indices 0..count in parallel. Replicates that hit a
/// singular design are replaced, in order, by indices count, count+1, ...;
/// at most ceil(count / 100) replacements are allowed.
pub(crate) fn replicates_with_redraw<T, F>(count: usize, replicate: F) -> Result<Redrawn<T>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let limit = count.div_ceil(100);
    let first: Vec<Result<T>> = (0..count as u64).into_par_iter().map(&replicate).collect();

    let mut draws = Vec::with_capacity(count);
    let mut singular = Vec::new();
    let mut next = count as u64;
    for (index, outcome) in first.into_iter().enumerate() {
        let mut outcome = outcome;
        let mut index = index as u64;
        loop {
            match outcome {
                Ok(value) => {
                    draws.push(value);
                    break;
                }
                Err(e) if e.is_singular() => {
                    singular.push(index);
                    if singular.len() > limit {
                        return Err(Error::TooManySingularReplicates {
                            failed: singular.len(),
                            limit,
                        });
                    }
                    index = next;
                    next += 1;
                    outcome = replicate(index);
                }
                Err(e) => return Err(e.in_replicate(index)),
            }
        }
    }
    Ok(Redrawn { draws, singular })
}

/// Linear-interpolation quantile (the common "type 7" rule) of unsorted draws.
pub fn quantile(draws: &[f64], prob: f64) -> Result<f64> {
    if draws.is_empty() {
        return Err(Error::Empty("draws"));
    }
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::InvalidParameter(format!("quantile probability {prob} outside [0, 1]")));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = prob * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi || sorted[lo] == sorted[hi] {
        return Ok(sorted[lo]);
    }
    Ok(sorted[lo] + frac * (sorted[hi] - sorted[lo]))
}
