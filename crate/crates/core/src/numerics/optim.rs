use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Adam moments for one [`ParamSet`] layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: ParamSet,
    second: ParamSet,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Invalid(format!("learning rate must be positive, got {lr}")));
        }
        Ok(Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        })
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.first
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.second
    }
}

/// One bias-corrected Adam update. Returns the new parameters and leaves
/// `params` untouched.
pub fn optimizer_step(params: &ParamSet, grads: &ParamSet, state: &mut OptimizerState) -> Result<ParamSet> {
    params.check_compatible(grads).map_err(|_| {
        Error::Shape("gradient layout does not match parameters".into())
    })?;
    params.check_compatible(&state.first).map_err(|_| {
        Error::Shape("optimizer moments do not match parameters".into())
    })?;
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut out = params.clone();
    for (((name, p), m), v) in out
        .iter_mut()
        .zip(state.first.iter_mut().map(|(_, m)| m))
        .zip(state.second.iter_mut().map(|(_, v)| v))
    {
        let g = grads.get(name).expect("layout checked");
        for (((pv, mv), vv), &gv) in
            p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
        {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(out)
}
