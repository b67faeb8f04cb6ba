//! Average treatment effects: the unadjusted difference in means, the
//! regression-adjusted effect mu_x'(beta_t - beta_c) and its first-order
//! approximation x_bar'(beta~_t - beta~_c) with an exact variance decomposition.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::data::{select_rows, Arm, ExperimentTable};
use crate::dgp::{dgp_mean_moments, replicates_with_redraw, sample_weights, PosteriorMoments, SeedSpec};
use crate::error::{Error, Result};
use crate::linproj::{fit_arm, weighted_coefficients, OlsFit};

fn check_arms(table: &ExperimentTable) -> Result<()> {
    for arm in [Arm::Treatment, Arm::Control] {
        if table.arm_count(arm) == 0 {
            return Err(Error::TooFewObservations { needed: 1, got: 0 });
        }
    }
    Ok(())
}

/// Exact posterior moments of mu_t - mu_c.
pub fn unadjusted_ate(table: &ExperimentTable) -> Result<PosteriorMoments> {
    check_arms(table)?;
    let t = dgp_mean_moments(&table.arm_y(Arm::Treatment))?;
    let c = dgp_mean_moments(&table.arm_y(Arm::Control))?;
    Ok(PosteriorMoments {
        mean: t.mean - c.mean,
        variance: t.variance + c.variance,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BootstrapAte {
    pub moments: PosteriorMoments,
    pub draws: Vec<f64>,
    /// Replicate indices whose weighted design was singular and were redrawn.
    pub singular_replicates: Vec<u64>,
}

impl BootstrapAte {
    fn from_run(draws: Vec<f64>, singular: Vec<u64>) -> Result<Self> {
        Ok(BootstrapAte {
            moments: PosteriorMoments::from_draws(&draws)?,
            draws,
            singular_replicates: singular,
        })
    }
}

fn check_replicates(replicates: usize) -> Result<()> {
    if replicates < 2 {
        return Err(Error::InvalidParameter(format!(
            "bootstrap needs at least 2 replicates, got {replicates}"
        )));
    }
    Ok(())
}

/// Bootstrap of mu_t - mu_c where replicate b draws one full-length weight
/// vector `seed.replicate(b)` and each arm uses its own rows of it.
pub fn unadjusted_ate_bootstrap(table: &ExperimentTable, replicates: usize, seed: SeedSpec) -> Result<BootstrapAte> {
    check_arms(table)?;
    check_replicates(replicates)?;
    let run = replicates_with_redraw(replicates, |b| {
        let w = sample_weights(table.n(), seed.replicate(b));
        let (mut st, mut sc, mut mt, mut mc) = (0.0, 0.0, 0.0, 0.0);
        for ((y, arm), t) in table.y().iter().zip(table.arms()).zip(w.values()) {
            match arm {
                Arm::Treatment => {
                    st += t * y;
                    mt += t;
                }
                Arm::Control => {
                    sc += t * y;
                    mc += t;
                }
            }
        }
        Ok(st / mt - sc / mc)
    })?;
    BootstrapAte::from_run(run.draws, run.singular)
}

/// Bootstrap of mu_x'(beta_t - beta_c). Each replicate draws one full-length
/// weight vector; mu_x uses all rows and each arm fit uses its sub-vector.
pub fn adjusted_ate_bootstrap(table: &ExperimentTable, replicates: usize, seed: SeedSpec) -> Result<BootstrapAte> {
    check_arms(table)?;
    check_replicates(replicates)?;
    let rows_t = table.arm_rows(Arm::Treatment);
    let rows_c = table.arm_rows(Arm::Control);
    let xt = select_rows(table.x(), &rows_t);
    let xc = select_rows(table.x(), &rows_c);
    let yt = table.arm_y(Arm::Treatment);
    let yc = table.arm_y(Arm::Control);
    let x = table.x();

    let run = replicates_with_redraw(replicates, |b| {
        let w = sample_weights(table.n(), seed.replicate(b));
        let theta = DVector::from_column_slice(w.values());
        let mu_x = x.tr_mul(&theta) / w.mass();
        let bt = weighted_coefficients(&xt, &yt, w.subset(&rows_t).values())?;
        let bc = weighted_coefficients(&xc, &yc, w.subset(&rows_c).values())?;
        Ok(mu_x.dot(&(bt - bc)))
    })?;
    BootstrapAte::from_run(run.draws, run.singular)
}

/// Per-arm terms of the exact variance of x_bar' beta~_d.
#[derive(Debug, Clone, Serialize)]
pub struct ArmVarianceTerms {
    pub n: usize,
    /// y'y - n y_bar^2 within the arm.
    pub s2_y: f64,
    pub r2: f64,
    /// s2_y / n^2
    pub base: f64,
    /// R^2 s2_y / n^2, entering with a minus sign.
    pub r2_reduction: f64,
    /// (x_bar - x_bar_d)' Sigma_d (x_bar - x_bar_d)
    pub mean_shift: f64,
    /// 2 x_bar_d' Sigma_d (x_bar - x_bar_d); zero when the arm and pooled
    /// covariate means coincide.
    pub cross_covariance: f64,
}

impl ArmVarianceTerms {
    pub fn total(&self) -> f64 {
        self.base - self.r2_reduction + self.mean_shift + self.cross_covariance
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceDecomposition {
    pub treatment: ArmVarianceTerms,
    pub control: ArmVarianceTerms,
    /// Sum of every term; equals the Taylor variance.
    pub total: f64,
    /// The same sum without the cross-covariance terms.
    pub without_cross_terms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjustedTaylor {
    pub moments: PosteriorMoments,
    pub decomposition: VarianceDecomposition,
    /// var(mu_t - mu_c) minus the R^2 reduction terms.
    pub rough_variance: f64,
    pub x_bar: Vec<f64>,
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / x.nrows() as f64))
}

fn centered_ss(v: &[f64]) -> f64 {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - mean).powi(2)).sum()
}

fn arm_terms(fit: &OlsFit, x_arm: &DMatrix<f64>, y_arm: &[f64], x_bar: &DVector<f64>) -> ArmVarianceTerms {
    let n = y_arm.len();
    let n2 = (n * n) as f64;
    let sigma = fit.sandwich_cov.as_ref().expect("posterior-mean fit");
    let x_bar_d = column_means(x_arm);
    let shift = x_bar - &x_bar_d;
    let s2_y = centered_ss(y_arm);
    let sigma_shift = sigma * &shift;
    ArmVarianceTerms {
        n,
        s2_y,
        r2: fit.r2,
        base: s2_y / n2,
        r2_reduction: fit.r2 * s2_y / n2,
        mean_shift: shift.dot(&sigma_shift),
        cross_covariance: 2.0 * x_bar_d.dot(&sigma_shift),
    }
}

/// First-order approximation x_bar'(beta~_t - beta~_c): exact posterior mean
/// x_bar'(b_t - b_c), its variance, and the variance split into R^2 and
/// covariate-shift terms. The design must contain an intercept column.
pub fn adjusted_ate_taylor(table: &ExperimentTable) -> Result<AdjustedTaylor> {
    check_arms(table)?;
    if table.intercept_column().is_none() {
        return Err(Error::MissingIntercept);
    }
    let xt = table.arm_x(Arm::Treatment);
    let xc = table.arm_x(Arm::Control);
    let yt = table.arm_y(Arm::Treatment);
    let yc = table.arm_y(Arm::Control);
    let fit_t = fit_arm(table, Arm::Treatment)?;
    let fit_c = fit_arm(table, Arm::Control)?;
    let x_bar = column_means(table.x());

    // x_bar' b_d = y_bar_d + (x_bar - x_bar_d)' b_d because the fit passes through the arm means
    let projected = |fit: &OlsFit, x_arm: &DMatrix<f64>, y_arm: &[f64]| {
        let y_bar = y_arm.iter().sum::<f64>() / y_arm.len() as f64;
        y_bar + (&x_bar - column_means(x_arm)).dot(&fit.beta)
    };
    let mean = projected(&fit_t, &xt, &yt) - projected(&fit_c, &xc, &yc);
    let sigma = fit_t.sandwich_cov.as_ref().unwrap() + fit_c.sandwich_cov.as_ref().unwrap();
    let variance = x_bar.dot(&(&sigma * &x_bar));

    let treatment = arm_terms(&fit_t, &xt, &yt, &x_bar);
    let control = arm_terms(&fit_c, &xc, &yc, &x_bar);
    let total = treatment.total() + control.total();
    let without_cross_terms = total - treatment.cross_covariance - control.cross_covariance;
    let rough_variance = unadjusted_ate(table)?.variance - treatment.r2_reduction - control.r2_reduction;

    Ok(AdjustedTaylor {
        moments: PosteriorMoments { mean, variance },
        decomposition: VarianceDecomposition {
            treatment,
            control,
            total,
            without_cross_terms,
        },
        rough_variance,
        x_bar: x_bar.iter().copied().collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VarianceReduction {
    pub unadjusted_variance: f64,
    pub adjusted_variance: f64,
    /// unadjusted - adjusted
    pub reduction: f64,
    /// reduction / unadjusted
    pub relative_reduction: f64,
    /// (R^2_t s2_t/n_t^2 + R^2_c s2_c/n_c^2) / unadjusted, the reduction the
    /// rough form predicts.
    pub rough_relative_reduction: f64,
}

/// How much the first-order regression adjustment shrinks the ATE variance.
pub fn variance_reduction(table: &ExperimentTable) -> Result<VarianceReduction> {
    let unadjusted_variance = unadjusted_ate(table)?.variance;
    let taylor = adjusted_ate_taylor(table)?;
    let adjusted_variance = taylor.moments.variance;
    let reduction = unadjusted_variance - adjusted_variance;
    let d = &taylor.decomposition;
    let ratio = |v: f64| if unadjusted_variance > 0.0 { v / unadjusted_variance } else { 0.0 };
    Ok(VarianceReduction {
        unadjusted_variance,
        adjusted_variance,
        reduction,
        relative_reduction: ratio(reduction),
        rough_relative_reduction: ratio(d.treatment.r2_reduction + d.control.r2_reduction),
    })
}

/// Every analytic and bootstrap ATE summary for one table.
#[derive(Debug, Clone, Serialize)]
pub struct AteReport {
    pub unadjusted: PosteriorMoments,
    pub adjusted_taylor: AdjustedTaylor,
    pub adjusted_bootstrap: Option<BootstrapAte>,
}

pub fn ate_report(table: &ExperimentTable, replicates: usize, seed: SeedSpec) -> Result<AteReport> {
    Ok(AteReport {
        unadjusted: unadjusted_ate(table)?,
        adjusted_taylor: adjusted_ate_taylor(table)?,
        adjusted_bootstrap: if replicates > 0 {
            Some(adjusted_ate_bootstrap(table, replicates, seed)?)
        } else {
            None
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn table(y: Vec<f64>, arms: Vec<Arm>, x: DMatrix<f64>) -> ExperimentTable {
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        ExperimentTable::new(y, arms, x, names, 0.5).unwrap().with_intercept()
    }

    fn random_table(rng: &mut impl Rng, n: usize, p: usize) -> ExperimentTable {
        let x = DMatrix::from_fn(n, p, |_, _| rng.random::<f64>() * 2.0);
        let arms: Vec<Arm> = (0..n)
            .map(|i| {
                let treated = if i < 4 * p + 12 { i % 2 == 0 } else { rng.random::<bool>() };
                if treated { Arm::Treatment } else { Arm::Control }
            })
            .collect();
        let y = (0..n)
            .map(|i| {
                let lift = if arms[i] == Arm::Treatment { 1.0 } else { 0.0 };
                lift + x.row(i).sum() + rng.random::<f64>() * (1.0 + x[(i, p - 1)])
            })
            .collect();
        table(y, arms, x)
    }

    /// x_bar'(Sigma_t + Sigma_c) x_bar from normal-equation HC0 sandwiches.
    fn direct_variance(t: &ExperimentTable) -> f64 {
        let hc0 = |arm| {
            let x = t.arm_x(arm);
            let y = DVector::from_vec(t.arm_y(arm));
            let inv = (x.transpose() * &x).try_inverse().unwrap();
            let r = &y - &x * (&inv * x.transpose() * &y);
            &inv * (x.transpose() * DMatrix::from_diagonal(&r.map(|v| v * v)) * &x) * &inv
        };
        let x_bar = column_means(t.x());
        x_bar.dot(&((hc0(Arm::Treatment) + hc0(Arm::Control)) * &x_bar))
    }

    #[test]
    fn unadjusted_examples() {
        let arms = vec![Arm::Treatment, Arm::Treatment, Arm::Control];
        let t = ExperimentTable::new(vec![0.0, 2.0, 1.0], arms.clone(), DMatrix::zeros(3, 0), vec![], 0.5).unwrap();
        let m = unadjusted_ate(&t).unwrap();
        assert_eq!(m.mean, 0.0);
        assert!((m.variance - 1.0 / 3.0).abs() < 1e-15);

        let t = ExperimentTable::new(vec![4.0, 4.0, 1.0], arms, DMatrix::zeros(3, 0), vec![], 0.5).unwrap();
        assert_eq!(unadjusted_ate(&t).unwrap(), PosteriorMoments { mean: 3.0, variance: 0.0 });
    }

    #[test]
    fn empty_arm_errors() {
        let t = ExperimentTable::new(vec![1.0, 2.0], vec![Arm::Control; 2], DMatrix::zeros(2, 0), vec![], 0.5).unwrap();
        assert!(unadjusted_ate(&t).is_err());
    }

    #[test]
    fn intercept_only_reduces_to_difference_in_means() {
        let y = vec![1.0, 5.0, 2.0, 0.0, 3.0, 3.5];
        let arms = vec![Arm::Treatment, Arm::Treatment, Arm::Treatment, Arm::Control, Arm::Control, Arm::Control];
        let t = table(y, arms, DMatrix::zeros(6, 0));
        let u = unadjusted_ate(&t).unwrap();
        let a = adjusted_ate_taylor(&t).unwrap();
        assert_eq!(a.moments.mean, u.mean);
        let d = &a.decomposition;
        let expected = d.treatment.s2_y / 9.0 + d.control.s2_y / 9.0;
        assert!((a.moments.variance - expected).abs() < 1e-14 * expected);
        assert_eq!(d.treatment.r2, 0.0);
        assert!(d.treatment.mean_shift.abs() < 1e-30 && d.control.cross_covariance.abs() < 1e-30);

        let boot = adjusted_ate_bootstrap(&t, 50, SeedSpec::new(9)).unwrap();
        let plain = unadjusted_ate_bootstrap(&t, 50, SeedSpec::new(9)).unwrap();
        for (a, b) in boot.draws.iter().zip(&plain.draws) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_has_zero_variance() {
        // identical x in both arms, y exactly linear per arm
        let xs = [0.0, 1.0, 2.0, 3.0];
        let x = DMatrix::from_fn(8, 1, |i, _| xs[i % 4]);
        let arms = (0..8).map(|i| if i < 4 { Arm::Treatment } else { Arm::Control }).collect();
        let y = (0..8).map(|i| if i < 4 { 1.0 + 2.0 * xs[i] } else { 3.0 * xs[i % 4] }).collect();
        let t = table(y, arms, x);
        let a = adjusted_ate_taylor(&t).unwrap();
        assert!(a.moments.variance.abs() < 1e-25);
        assert!((a.decomposition.treatment.r2 - 1.0).abs() < 1e-12);
        assert!((a.moments.mean - (1.0 + 2.0 * 1.5 - 3.0 * 1.5)).abs() < 1e-12);
    }

    #[test]
    fn zero_residual_equal_coefficients_bootstrap() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = DMatrix::from_fn(40, 2, |_, _| rng.random::<f64>());
        let arms = (0..40).map(|i| if i % 2 == 0 { Arm::Treatment } else { Arm::Control }).collect();
        let y = (0..40).map(|i| 1.0 + 2.0 * x[(i, 0)] - x[(i, 1)]).collect();
        let t = table(y, arms, x);
        let boot = adjusted_ate_bootstrap(&t, 100, SeedSpec::new(1)).unwrap();
        assert!(boot.draws.iter().all(|d| d.abs() < 1e-10));
        assert!(adjusted_ate_taylor(&t).unwrap().moments.variance < 1e-25);
    }

    #[test]
    fn decomposition_is_exact() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let p = rng.random_range(1..=4);
            let n = rng.random_range(4 * p + 12..=300);
            let t = random_table(&mut rng, n, p);
            let a = adjusted_ate_taylor(&t).unwrap();
            let direct = direct_variance(&t);
            let d = &a.decomposition;
            assert!((d.total - direct).abs() <= 1e-12 * direct, "{} vs {direct}", d.total);
            assert!((a.moments.variance - direct).abs() <= 1e-12 * direct);
            let fit_t = fit_arm(&t, Arm::Treatment).unwrap();
            let fit_c = fit_arm(&t, Arm::Control).unwrap();
            let x_bar = column_means(t.x());
            assert!((a.moments.mean - x_bar.dot(&(fit_t.beta - fit_c.beta))).abs() < 1e-12);
        }
    }

    #[test]
    fn requires_intercept() {
        let t = ExperimentTable::new(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![Arm::Treatment, Arm::Control, Arm::Treatment, Arm::Control],
            DMatrix::from_column_slice(4, 1, &[1.0, 2.0, 3.0, 5.0]),
            vec!["x".into()],
            0.5,
        )
        .unwrap();
        assert!(matches!(adjusted_ate_taylor(&t), Err(Error::MissingIntercept)));
    }

    #[test]
    fn doubling_the_sample_shrinks_variance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let t = random_table(&mut rng, 60, 2);
        let rows: Vec<usize> = (0..t.n()).chain(0..t.n()).collect();
        let doubled = t.subset(&rows);
        assert!(unadjusted_ate(&doubled).unwrap().variance < unadjusted_ate(&t).unwrap().variance);
        assert!(adjusted_ate_taylor(&doubled).unwrap().moments.variance < adjusted_ate_taylor(&t).unwrap().moments.variance);
    }

    #[test]
    fn bootstrap_agrees_with_taylor() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = random_table(&mut rng, 400, 2);
        let b = 4000;
        let boot = adjusted_ate_bootstrap(&t, b, SeedSpec::new(77)).unwrap();
        let taylor = adjusted_ate_taylor(&t).unwrap();
        // SE of a sample SD is about sd / sqrt(2(B-1))
        let se = boot.moments.sd() / (2.0 * (b as f64 - 1.0)).sqrt();
        assert!((boot.moments.sd() - taylor.moments.sd()).abs() < 5.0 * se);
        assert!(boot.singular_replicates.is_empty());
    }

    #[test]
    fn bootstrap_needs_two_replicates() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = random_table(&mut rng, 30, 1);
        assert!(adjusted_ate_bootstrap(&t, 1, SeedSpec::new(0)).is_err());
    }

    #[test]
    fn reduction_without_signal_is_mean_shift_only() {
        let x = DMatrix::from_column_slice(8, 1, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        // y uncorrelated with x in both arms
        let y = vec![1.0, 1.0, 3.0, 3.0, 2.0, 2.0, 5.0, 5.0];
        let arms = vec![Arm::Treatment, Arm::Treatment, Arm::Treatment, Arm::Treatment, Arm::Control, Arm::Control, Arm::Control, Arm::Control];
        let t = table(y, arms, x);
        let r = variance_reduction(&t).unwrap();
        assert!(r.rough_relative_reduction.abs() < 1e-14);
        let d = adjusted_ate_taylor(&t).unwrap().decomposition;
        let taylor_unadj = d.treatment.base + d.control.base;
        assert!((r.adjusted_variance - taylor_unadj).abs() < 1e-14);
    }
}
