//! Normal-approximation density contours for a pair of coefficients.

use crate::error::{CliError, CliResult};

/// Contour heights as fractions of the density maximum.
pub const LEVELS: [f64; 3] = [0.1, 0.01, 0.001];

const VERTICES: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct Contour {
    pub level: f64,
    /// Closed polyline: the last vertex repeats the first.
    pub points: Vec<[f64; 2]>,
}

/// Ellipses {z : (z - mean)' cov^-1 (z - mean) = -2 ln level} for each level.
pub fn ellipses(mean: [f64; 2], cov: [[f64; 2]; 2], levels: &[f64]) -> CliResult<Vec<Contour>> {
    let a = cov[0][0];
    let b = 0.5 * (cov[0][1] + cov[1][0]);
    let c = cov[1][1];
    if a.is_nan() || a <= 0.0 {
        return Err(CliError::Degenerate("contour covariance is not positive definite".into()));
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let rest = c - l21 * l21;
    if rest.is_nan() || rest <= 0.0 {
        return Err(CliError::Degenerate("contour covariance is not positive definite".into()));
    }
    let l22 = rest.sqrt();
    levels
        .iter()
        .map(|&level| {
            if !(level > 0.0 && level < 1.0) {
                return Err(CliError::Config(format!("contour level {level} must lie in (0, 1)")));
            }
            let r = (-2.0 * level.ln()).sqrt();
            let mut points: Vec<[f64; 2]> = (0..VERTICES)
                .map(|k| {
                    let t = std::f64::consts::TAU * k as f64 / VERTICES as f64;
                    let (u, v) = (r * t.cos(), r * t.sin());
                    [mean[0] + l11 * u, mean[1] + l21 * u + l22 * v]
                })
                .collect();
            points.push(points[0]);
            Ok(Contour { level, points })
        })
        .collect()
}
