use crate::error::{Error, Result};

/// Central differences carry roundoff of order `eps * |f| / h`, so the
/// denominator of the relative error never drops below
/// `REL_ERR_FLOOR * max(1, |f(point)|)`. Coordinates whose derivative is
/// smaller than that are judged on this absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_index: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradcheckReport {
    pub fn empty() -> Self {
        GradcheckReport {
            max_rel_err: 0.0,
            worst_index: None,
            analytic: 0.0,
            numeric: 0.0,
            checked: 0,
        }
    }

    /// Keeps whichever report has the larger error.
    pub fn merge(self, other: GradcheckReport) -> GradcheckReport {
        let checked = self.checked + other.checked;
        let mut worst = if other.max_rel_err > self.max_rel_err {
            other
        } else {
            self
        };
        worst.checked = checked;
        worst
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn fd_gradcheck<F>(mut f: F, point: &[f64], analytic: &[f64], h: f64) -> Result<GradcheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if point.len() != analytic.len() {
        return Err(Error::dim(
            "fd_gradcheck",
            format!(
                "point has {} coordinates, gradient {}",
                point.len(),
                analytic.len()
            ),
        ));
    }
    let mut x = point.to_vec();
    let f0 = f(&x)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite {
            what: "objective at the check point".into(),
            iteration: 0,
        });
    }
    let floor = REL_ERR_FLOOR * f0.abs().max(1.0);
    let mut report = GradcheckReport::empty();
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x)?;
        x[i] = orig - h;
        let fm = f(&x)?;
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: format!("objective during finite differences of coordinate {i}"),
                iteration: i,
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric, floor);
        if report.worst_index.is_none() || err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_index = Some(i);
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}
