use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Central-difference gradient estimate of `f` at `params`.
pub fn finite_difference_grad<F>(mut f: F, params: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("step must be positive, got {h}")));
    }
    let base = params.flat_view();
    let mut grad = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + h;
        let plus = f(&params.with_flat(&probe)?)?;
        probe[i] = base[i] - h;
        let minus = f(&params.with_flat(&probe)?)?;
        probe[i] = base[i];
        grad[i] = (plus - minus) / (2.0 * h);
    }
    params.with_flat(&grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` over paired entries.
pub fn max_relative_error(a: &ParamSet, b: &ParamSet, floor: f64) -> f64 {
    a.flat_view()
        .iter()
        .zip(b.flat_view())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
