//! Central finite-difference gradient oracle.

use crate::error::{Error, Result};
use crate::numeric::ParamVector;

/// Maximum over coordinates of `|fd - analytic| / max(1, |fd|, |analytic|)`.
pub fn grad_check<F>(f: F, v: &ParamVector, analytic: &ParamVector, step: f64) -> Result<f64>
where
    F: Fn(&ParamVector) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    if v.len() != analytic.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, parameters {}",
            analytic.len(),
            v.len()
        )));
    }
    let mut probe = v.clone();
    let mut worst = 0.0f64;
    for i in 0..v.len() {
        let x0 = v.data()[i];
        probe.data_mut()[i] = x0 + step;
        let plus = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let minus = f(&probe)?;
        probe.data_mut()[i] = x0;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "objective not finite at coordinate {i}"
            )));
        }
        let fd = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let rel = (fd - a).abs() / 1f64.max(fd.abs()).max(a.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
