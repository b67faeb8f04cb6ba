//! Synthetic digital experiments with known potential outcomes.
//!
//! Each unit has covariates x ~ U(0,1)^p and a base level s drawn from a
//! mixture: zero with probability `zero_mass`, one of the spike values with
//! their probabilities, otherwise lognormal. The control outcome is
//! s (1 + a'x), so the spread grows with the covariates that `scale_loadings`
//! loads on. Units with s != 0 gain the lift tau(x) = c_0 + sum_j c_j z_j(x)
//! under treatment, where z_j is x_j itself or the step indicator x_j > t.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use super::{Arm, ExperimentTable};
use crate::dgp::SeedSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikePoint {
    pub value: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Latent {
    #[default]
    Identity,
    Step {
        threshold: f64,
    },
}

impl Latent {
    fn apply(&self, x: f64) -> f64 {
        match *self {
            Latent::Identity => x,
            Latent::Step { threshold } => f64::from(u8::from(x > threshold)),
        }
    }

    /// E[z] for x ~ U(0,1).
    fn expectation(&self) -> f64 {
        match *self {
            Latent::Identity => 0.5,
            Latent::Step { threshold } => 1.0 - threshold.clamp(0.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n: usize,
    pub q: f64,
    pub zero_mass: f64,
    #[serde(default)]
    pub spike_points: Vec<SpikePoint>,
    pub tail_log_mean: f64,
    pub tail_log_sd: f64,
    pub n_features: usize,
    /// a_j, one per leading covariate; missing entries are zero.
    #[serde(default)]
    pub scale_loadings: Vec<f64>,
    /// [c_0, c_1, ..., c_p]: lift intercept then one coefficient per covariate.
    #[serde(default)]
    pub effect_coefficients: Vec<f64>,
    #[serde(default)]
    pub latent: Latent,
    pub seed: SeedSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 10_000,
            q: 2.0 / 3.0,
            zero_mass: 0.8,
            spike_points: vec![
                SpikePoint { value: 1.0, probability: 0.03 },
                SpikePoint { value: 99.0, probability: 0.02 },
            ],
            tail_log_mean: 3.0,
            tail_log_sd: 1.2,
            n_features: 3,
            scale_loadings: vec![1.0],
            effect_coefficients: vec![0.0, 2.0],
            latent: Latent::Identity,
            seed: SeedSpec::new(1),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.n == 0 {
            return bad("synthetic n must be positive".into());
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q = {} must lie in (0, 1)", self.q));
        }
        let spikes: f64 = self.spike_points.iter().map(|s| s.probability).sum();
        if !(0.0..=1.0).contains(&self.zero_mass)
            || self.spike_points.iter().any(|s| s.probability.is_nan() || s.probability < 0.0 || s.value == 0.0)
            || self.zero_mass + spikes > 1.0 + 1e-12
        {
            return bad("zero and spike probabilities must be nonnegative, spikes nonzero, and total at most 1".into());
        }
        if self.tail_log_sd.is_nan() || self.tail_log_sd <= 0.0 {
            return bad("tail_log_sd must be positive".into());
        }
        if self.scale_loadings.len() > self.n_features {
            return bad("more scale loadings than features".into());
        }
        if self.effect_coefficients.len() > self.n_features + 1 {
            return bad("effect_coefficients has more than n_features + 1 entries".into());
        }
        Ok(())
    }

    /// tau(x): the additive lift applied to units with a nonzero base level.
    pub fn lift(&self, x: &[f64]) -> f64 {
        let mut coefs = self.effect_coefficients.iter();
        let c0 = coefs.next().copied().unwrap_or(0.0);
        c0 + coefs.zip(x).map(|(c, &xj)| c * self.latent.apply(xj)).sum::<f64>()
    }

    /// E[v(1) - v(0) | x] under the generating process.
    pub fn expected_cate(&self, x: &[f64]) -> f64 {
        (1.0 - self.zero_mass) * self.lift(x)
    }

    /// Population average treatment effect.
    pub fn expected_ate(&self) -> f64 {
        let mut coefs = self.effect_coefficients.iter();
        let c0 = coefs.next().copied().unwrap_or(0.0);
        let mean_lift = c0 + coefs.map(|c| c * self.latent.expectation()).sum::<f64>();
        (1.0 - self.zero_mass) * mean_lift
    }
}

/// Both potential outcomes for every generated unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
    pub expected_ate: f64,
}

impl SynthTruth {
    pub fn unit_effects(&self) -> Vec<f64> {
        self.y1.iter().zip(&self.y0).map(|(a, b)| a - b).collect()
    }

    /// Average of the unit effects over the generated sample.
    pub fn sample_ate(&self) -> f64 {
        let e = self.unit_effects();
        e.iter().sum::<f64>() / e.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticExperiment {
    pub table: ExperimentTable,
    pub truth: SynthTruth,
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticExperiment> {
    cfg.validate()?;
    let n = cfg.n;
    let p = cfg.n_features;
    let tail = LogNormal::new(cfg.tail_log_mean, cfg.tail_log_sd)
        .map_err(|e| Error::InvalidParameter(format!("lognormal tail: {e}")))?;
    let mut rng = cfg.seed.rng();

    let mut x = DMatrix::zeros(n, p);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut arms = Vec::with_capacity(n);
    let mut row = vec![0.0; p];
    for i in 0..n {
        for (j, slot) in row.iter_mut().enumerate() {
            *slot = rng.random::<f64>();
            x[(i, j)] = *slot;
        }
        let treated = rng.random::<f64>() < cfg.q;

        let u: f64 = rng.random();
        let base = if u < cfg.zero_mass {
            0.0
        } else {
            let mut acc = cfg.zero_mass;
            let mut level = None;
            for spike in &cfg.spike_points {
                acc += spike.probability;
                if u < acc {
                    level = Some(spike.value);
                    break;
                }
            }
            level.unwrap_or_else(|| tail.sample(&mut rng))
        };
        let scale = 1.0 + cfg.scale_loadings.iter().zip(&row).map(|(a, xj)| a * xj).sum::<f64>();
        let control = base * scale;
        let treatment = if base != 0.0 { control + cfg.lift(&row) } else { control };
        y0.push(control);
        y1.push(treatment);
        arms.push(if treated { Arm::Treatment } else { Arm::Control });
    }

    let y = arms
        .iter()
        .zip(y0.iter().zip(&y1))
        .map(|(arm, (c, t))| if *arm == Arm::Treatment { *t } else { *c })
        .collect();
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let table = ExperimentTable::new(y, arms, x, names, cfg.q)?;
    Ok(SyntheticExperiment {
        table,
        truth: SynthTruth {
            y0,
            y1,
            expected_ate: cfg.expected_ate(),
        },
    })
}
