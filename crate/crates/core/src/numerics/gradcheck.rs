use alloc::string::ToString;
use alloc::vec::Vec;

use super::ParamVector;
use crate::error::{Error, Result};

/// Compares an analytic gradient against central differences.
///
/// `f` returns the objective value and its analytic gradient at the given
/// point. The result is `max_i |g_i − ĝ_i| / max(1, |ĝ_i|)` where `ĝ` uses
/// step `h`.
pub fn grad_check<F>(f: F, x: &ParamVector<f64>, h: f64) -> Result<f64>
where
    F: Fn(&ParamVector<f64>) -> Result<(f64, Vec<f64>)>,
{
    let (_, analytic) = f(x)?;
    if analytic.len() != x.len() {
        return Err(Error::Shape(alloc::format!(
            "gradient has {} entries for {} parameters",
            analytic.len(),
            x.len()
        )));
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x.values()[i];
        let mut eval = |v: f64| -> Result<f64> {
            probe.values_mut()[i] = v;
            let (value, _) = f(&probe)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteProbe {
                    coordinate: i,
                    name: x.name_of(i).unwrap_or("?").to_string(),
                });
            }
            Ok(value)
        };
        let plus = eval(orig + h)?;
        let minus = eval(orig - h)?;
        probe.values_mut()[i] = orig;
        let central = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
