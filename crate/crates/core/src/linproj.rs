//! Group-wise population OLS projections and their posterior summaries.
//!
//! For arm d the population projection under weights theta is
//! beta_d = (X_d' Theta_d X_d)^-1 X_d' Theta_d y_d. Its gradient in theta is
//! (X_d' Theta_d X_d)^-1 X_d' diag(r_d), so the first-order expansion around
//! theta = 1 has exact posterior covariance equal to the HC0 sandwich.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{Arm, ExperimentTable};
use crate::dgp::{self, dgp_mean_moments, replicates_with_redraw, PosteriorMoments, SeedSpec, WeightVector};
use crate::error::{Error, Result};
use crate::linalg::weighted_least_squares;

#[derive(Debug, Clone)]
pub struct OlsFit {
    pub beta: DVector<f64>,
    /// y - X beta for every row of the fitted group.
    pub residuals: Vec<f64>,
    /// Taylor posterior covariance; filled by [`fit_posterior_mean`].
    pub sandwich_cov: Option<DMatrix<f64>>,
    pub r2: f64,
    pub group: Option<Arm>,
    /// (X' Theta X)^-1 at the fitting weights.
    pub gram_inv: DMatrix<f64>,
}

fn weighted_spread(v: &[f64], w: &[f64]) -> f64 {
    let mass: f64 = w.iter().sum();
    let mean = v.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / mass;
    v.iter().zip(w).map(|(a, b)| b * (a - mean).powi(2)).sum()
}

fn residuals(x: &DMatrix<f64>, y: &[f64], beta: &DVector<f64>) -> Vec<f64> {
    let fitted = x * beta;
    y.iter().zip(fitted.iter()).map(|(a, b)| a - b).collect()
}

/// Weighted OLS fit minimizing sum_i theta_i (y_i - x_i' beta)^2.
pub fn weighted_ols(x: &DMatrix<f64>, y: &[f64], w: &WeightVector) -> Result<OlsFit> {
    let ls = weighted_least_squares(x, y, w.values(), true)?;
    let residuals = residuals(x, y, &ls.coef);
    let s2_y = weighted_spread(y, w.values());
    let s2_r = weighted_spread(&residuals, w.values());
    let r2 = if s2_y > 0.0 { 1.0 - s2_r / s2_y } else { 0.0 };
    Ok(OlsFit {
        beta: ls.coef,
        residuals,
        sandwich_cov: None,
        r2,
        group: None,
        gram_inv: ls.gram_inv.expect("requested"),
    })
}

/// Coefficients only; the bootstrap inner loop.
pub(crate) fn weighted_coefficients(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> Result<DVector<f64>> {
    Ok(weighted_least_squares(x, y, w, false)?.coef)
}

fn check_fit(x: &DMatrix<f64>, y: &[f64], fit: &OlsFit) -> Result<()> {
    if y.len() != x.nrows() || fit.residuals.len() != x.nrows() {
        return Err(Error::LengthMismatch {
            expected: x.nrows(),
            got: fit.residuals.len().min(y.len()),
        });
    }
    if fit.beta.len() != x.ncols() {
        return Err(Error::LengthMismatch {
            expected: x.ncols(),
            got: fit.beta.len(),
        });
    }
    Ok(())
}

/// p x n matrix of d beta_j / d theta_i at the fit's weights.
pub fn ols_gradient(x: &DMatrix<f64>, y: &[f64], fit: &OlsFit) -> Result<DMatrix<f64>> {
    check_fit(x, y, fit)?;
    let mut xr = x.transpose();
    for (i, r) in fit.residuals.iter().enumerate() {
        xr.column_mut(i).scale_mut(*r);
    }
    Ok(&fit.gram_inv * xr)
}

/// (X'X)^-1 X' R R X (X'X)^-1, the exact posterior covariance of the
/// first-order expansion (var(theta) = I).
pub fn taylor_cov(x: &DMatrix<f64>, y: &[f64], fit: &OlsFit) -> Result<DMatrix<f64>> {
    check_fit(x, y, fit)?;
    let p = x.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for (i, r) in fit.residuals.iter().enumerate() {
        let r2 = r * r;
        if r2 == 0.0 {
            continue;
        }
        let row = x.row(i);
        for a in 0..p {
            let xa = row[a] * r2;
            for b in a..p {
                meat[(a, b)] += xa * row[b];
            }
        }
    }
    meat.fill_lower_triangle_with_upper_triangle();
    let cov = &fit.gram_inv * meat * &fit.gram_inv;
    // symmetrize away rounding asymmetry
    Ok((&cov + cov.transpose()) * 0.5)
}

/// Sample OLS (theta = 1) with the Taylor covariance attached.
pub fn fit_posterior_mean(x: &DMatrix<f64>, y: &[f64], group: Option<Arm>) -> Result<OlsFit> {
    let mut fit = weighted_ols(x, y, &WeightVector::posterior_mean(y.len()))?;
    fit.sandwich_cov = Some(taylor_cov(x, y, &fit)?);
    fit.group = group;
    Ok(fit)
}

/// Sample fit for one arm of the table.
pub fn fit_arm(table: &ExperimentTable, arm: Arm) -> Result<OlsFit> {
    fit_posterior_mean(&table.arm_x(arm), &table.arm_y(arm), Some(arm))
}

#[derive(Debug, Clone)]
pub struct HteLinearSummary {
    pub treatment: OlsFit,
    pub control: OlsFit,
    /// b_t - b_c
    pub delta_mean: DVector<f64>,
    /// var(beta~_t) + var(beta~_c)
    pub delta_cov: DMatrix<f64>,
    /// B x p bootstrap draws of beta_t and beta_c.
    pub treatment_draws: Option<DMatrix<f64>>,
    pub control_draws: Option<DMatrix<f64>>,
    pub singular_replicates: Vec<u64>,
}

impl HteLinearSummary {
    /// B x p draws of beta_t - beta_c.
    pub fn delta_draws(&self) -> Option<DMatrix<f64>> {
        match (&self.treatment_draws, &self.control_draws) {
            (Some(t), Some(c)) => Some(t - c),
            _ => None,
        }
    }
}

/// Posterior of beta_t - beta_c with independent arm streams derived from `seed`.
pub fn hte_linear(table: &ExperimentTable, replicates: usize, seed: SeedSpec) -> Result<HteLinearSummary> {
    hte_linear_with_seeds(
        table,
        replicates,
        seed.substream(dgp::streams::TREATMENT),
        seed.substream(dgp::streams::CONTROL),
    )
}

/// As [`hte_linear`], with the arm weight streams given explicitly. Replicate b
/// fits each arm with `seed.replicate(b)` of that arm's stream.
pub fn hte_linear_with_seeds(
    table: &ExperimentTable,
    replicates: usize,
    treatment_seed: SeedSpec,
    control_seed: SeedSpec,
) -> Result<HteLinearSummary> {
    let (xt, yt) = (table.arm_x(Arm::Treatment), table.arm_y(Arm::Treatment));
    let (xc, yc) = (table.arm_x(Arm::Control), table.arm_y(Arm::Control));
    let treatment = fit_posterior_mean(&xt, &yt, Some(Arm::Treatment))?;
    let control = fit_posterior_mean(&xc, &yc, Some(Arm::Control))?;
    let delta_mean = &treatment.beta - &control.beta;
    let delta_cov = treatment.sandwich_cov.as_ref().unwrap() + control.sandwich_cov.as_ref().unwrap();

    let (mut treatment_draws, mut control_draws, mut singular) = (None, None, Vec::new());
    if replicates > 0 {
        let run = replicates_with_redraw(replicates, |b| {
            let wt = dgp::sample_weights(yt.len(), treatment_seed.replicate(b));
            let wc = dgp::sample_weights(yc.len(), control_seed.replicate(b));
            Ok((
                weighted_coefficients(&xt, &yt, wt.values())?,
                weighted_coefficients(&xc, &yc, wc.values())?,
            ))
        })?;
        let p = table.p();
        let mut t = DMatrix::zeros(replicates, p);
        let mut c = DMatrix::zeros(replicates, p);
        for (b, (bt, bc)) in run.draws.iter().enumerate() {
            t.set_row(b, &bt.transpose());
            c.set_row(b, &bc.transpose());
        }
        treatment_draws = Some(t);
        control_draws = Some(c);
        singular = run.singular;
    }
    Ok(HteLinearSummary {
        treatment,
        control,
        delta_mean,
        delta_cov,
        treatment_draws,
        control_draws,
        singular_replicates: singular,
    })
}

/// Exact posterior summary of one stratum of a mutually exclusive design.
#[derive(Debug, Clone, Serialize)]
pub struct StratumMoments {
    pub stratum: usize,
    pub n_treatment: usize,
    pub n_control: usize,
    pub treatment: PosteriorMoments,
    pub control: PosteriorMoments,
    /// beta_tj - beta_cj
    pub difference: PosteriorMoments,
    pub taylor_variance_treatment: f64,
    pub taylor_variance_control: f64,
}

/// Per-stratum exact moments; `strata` is an n x k indicator matrix with
/// exactly one 1 per row.
pub fn stratified_moments(table: &ExperimentTable, strata: &DMatrix<f64>) -> Result<Vec<StratumMoments>> {
    if strata.nrows() != table.n() {
        return Err(Error::LengthMismatch {
            expected: table.n(),
            got: strata.nrows(),
        });
    }
    let mut membership = vec![0usize; table.n()];
    for (i, slot) in membership.iter_mut().enumerate() {
        let row = strata.row(i);
        let active: Vec<usize> = (0..strata.ncols()).filter(|&j| row[j] != 0.0).collect();
        if active.len() != 1 || row[active[0]] != 1.0 {
            return Err(Error::NotAPartition { row: i, active: active.len() });
        }
        *slot = active[0];
    }

    let taylor_variance = |v: &[f64]| {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n * n)
    };
    (0..strata.ncols())
        .map(|j| {
            let arm_y = |arm: Arm| -> Vec<f64> {
                (0..table.n())
                    .filter(|&i| membership[i] == j && table.arms()[i] == arm)
                    .map(|i| table.y()[i])
                    .collect()
            };
            let yt = arm_y(Arm::Treatment);
            let yc = arm_y(Arm::Control);
            if yt.is_empty() || yc.is_empty() {
                return Err(Error::TooFewObservations {
                    needed: 1,
                    got: yt.len().min(yc.len()),
                });
            }
            let treatment = dgp_mean_moments(&yt)?;
            let control = dgp_mean_moments(&yc)?;
            Ok(StratumMoments {
                stratum: j,
                n_treatment: yt.len(),
                n_control: yc.len(),
                treatment,
                control,
                difference: PosteriorMoments {
                    mean: treatment.mean - control.mean,
                    variance: treatment.variance + control.variance,
                },
                taylor_variance_treatment: taylor_variance(&yt),
                taylor_variance_control: taylor_variance(&yc),
            })
        })
        .collect()
}
