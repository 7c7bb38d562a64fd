//! Closed-form least squares through three points.

use crate::error::CoreError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinFit {
    pub slope: f64,
    pub intercept: f64,
    /// Ordinates of the fitted line at the three abscissae.
    pub fitted: [f64; 3],
}

/// `k = sum((x-mean(x))(y-mean(y))) / sum((x-mean(x))^2)`, `b = mean(y) - k mean(x)`.
pub fn linfit3(points: &[(f64, f64); 3]) -> Result<LinFit, CoreError> {
    let xbar = (points[0].0 + points[1].0 + points[2].0) / 3.0;
    let ybar = (points[0].1 + points[1].1 + points[2].1) / 3.0;
    let mut num = 0.0;
    let mut den = 0.0;
    for &(x, y) in points {
        num += (x - xbar) * (y - ybar);
        den += (x - xbar) * (x - xbar);
    }
    if den <= f64::EPSILON * (1.0 + xbar * xbar) {
        return Err(CoreError::invalid(format!(
            "degenerate fit: abscissae {:?} are (nearly) identical",
            [points[0].0, points[1].0, points[2].0]
        )));
    }
    let slope = num / den;
    let intercept = ybar - slope * xbar;
    let fitted = [
        slope * points[0].0 + intercept,
        slope * points[1].0 + intercept,
        slope * points[2].0 + intercept,
    ];
    Ok(LinFit {
        slope,
        intercept,
        fitted,
    })
}
