//! Training objectives: answer cross-entropy, the feature difference loss,
//! the router load-balancing and z-losses, and the two stage composites.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, Graph, Tensor, Var};

/// Default `(λ0, λ1, λ2)`.
pub const DEFAULT_LAMBDAS: (f64, f64, f64) = (0.1, 0.1, 0.01);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn tag(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub stage: Stage,
    pub ce: f64,
    pub diff: f64,
    pub balance: f64,
    pub zloss: f64,
    pub total: f64,
    pub lambdas: (f64, f64, f64),
}

impl LossBreakdown {
    /// Total rebuilt from the parts, in the same evaluation order the
    /// composite uses.
    pub fn recompute(&self) -> f64 {
        let (l0, l1, l2) = self.lambdas;
        match self.stage {
            Stage::One => self.ce + l0 * self.diff,
            Stage::Two => self.ce + l1 * self.balance + l2 * self.zloss,
        }
    }
}

fn check_lambda(name: &str, v: f64) -> Result<()> {
    if v < 0.0 || !v.is_finite() {
        return Err(Error::Invalid(format!("{name} must be a non-negative number, got {v}")));
    }
    Ok(())
}

/// `‖x_tᵀ x_s‖_F²` for one `N×C` pair.
pub fn difference_loss(x_t: &Tensor, x_s: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(x_t.clone());
    let b = g.constant(x_s.clone());
    let v = difference_loss_var(&mut g, a, b, x_t.rows())?;
    Ok(g.value(v).item())
}

/// Mean over samples of the per-sample difference loss, rows grouped
/// `n_tokens` at a time.
pub fn difference_loss_var(g: &mut Graph, x_t: Var, x_s: Var, n_tokens: usize) -> Result<Var> {
    g.value(x_t).expect_same_shape(g.value(x_s))?;
    let rows = g.value(x_t).rows();
    if n_tokens == 0 || rows % n_tokens != 0 {
        return Err(Error::Shape(format!("{rows} rows do not split into samples of {n_tokens}")));
    }
    let samples = rows / n_tokens;
    if samples == 1 {
        let cross = g.matmul_tn(x_t, x_s)?;
        return Ok(g.frobenius_sq(cross));
    }
    let mut terms = Vec::with_capacity(samples);
    for s in 0..samples {
        let a = g.row_slice(x_t, s * n_tokens, n_tokens)?;
        let b = g.row_slice(x_s, s * n_tokens, n_tokens)?;
        let cross = g.matmul_tn(a, b)?;
        terms.push((g.frobenius_sq(cross), 1.0 / samples as f64));
    }
    g.combine(&terms)
}

/// Fraction of rows whose argmax is each column; ties go to the lowest index.
pub fn dispatch_fractions(per_token: &Tensor) -> Vec<f64> {
    let (r, c) = per_token.dims2();
    let mut d = vec![0.0; c];
    for row in 0..r {
        let vals = per_token.row(row);
        let mut best = 0;
        for (j, &v) in vals.iter().enumerate() {
            if v > vals[best] {
                best = j;
            }
        }
        d[best] += 1.0;
    }
    d.iter_mut().for_each(|v| *v /= r as f64);
    d
}

fn check_normalized(per_token: &Tensor) -> Result<()> {
    for row in 0..per_token.rows() {
        let s: f64 = per_token.row(row).iter().sum();
        if (s - 1.0).abs() > 1e-8 {
            return Err(Error::Invalid(format!("routing row {row} sums to {s}, not 1")));
        }
    }
    Ok(())
}

/// `T Σ_i D_i R_i`.
pub fn load_balance_loss(per_token: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(per_token.clone());
    let v = load_balance_loss_var(&mut g, p)?;
    Ok(g.value(v).item())
}

/// Gradient reaches `per_token` only through the column means `R`; the
/// dispatch fractions `D` enter as constants.
pub fn load_balance_loss_var(g: &mut Graph, per_token: Var) -> Result<Var> {
    check_normalized(g.value(per_token))?;
    let t = g.value(per_token).cols();
    let d = dispatch_fractions(g.value(per_token));
    let weights = Tensor::vector(d.iter().map(|v| v * t as f64).collect());
    let r = g.col_mean(per_token);
    g.dot_const(r, weights)
}

/// `(1/N) Σ_rows (log Σ_j exp g_j)²`.
pub fn router_z_loss(logits: &Tensor) -> Result<f64> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("router logits".into()));
    }
    let (r, _) = logits.dims2();
    Ok((0..r).map(|i| log_sum_exp(logits.row(i)).powi(2)).sum::<f64>() / r as f64)
}

pub fn router_z_loss_var(g: &mut Graph, logits: Var) -> Var {
    let lse = g.log_sum_exp_rows(logits);
    let sq = g.square(lse);
    g.mean(sq)
}

pub fn stage1_loss(ce: f64, x_t: &Tensor, x_s: &Tensor, lambda0: f64) -> Result<LossBreakdown> {
    check_lambda("lambda0", lambda0)?;
    let diff = difference_loss(x_t, x_s)?;
    let mut out = LossBreakdown {
        stage: Stage::One,
        ce,
        diff,
        balance: 0.0,
        zloss: 0.0,
        total: 0.0,
        lambdas: (lambda0, 0.0, 0.0),
    };
    out.total = out.recompute();
    Ok(out)
}

pub fn stage2_loss(
    ce: f64,
    per_token: &Tensor,
    logits: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    check_lambda("lambda1", lambda1)?;
    check_lambda("lambda2", lambda2)?;
    let mut out = LossBreakdown {
        stage: Stage::Two,
        ce,
        diff: 0.0,
        balance: load_balance_loss(per_token)?,
        zloss: router_z_loss(logits)?,
        total: 0.0,
        lambdas: (0.0, lambda1, lambda2),
    };
    out.total = out.recompute();
    Ok(out)
}

/// Composite objective recorded on a graph together with its breakdown.
pub struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `L_ce + λ0 L_d`; the difference term is omitted when `x_s` is absent.
pub fn stage1_objective(
    g: &mut Graph,
    ce: Var,
    x_t: Var,
    x_s: Option<Var>,
    n_tokens: usize,
    lambda0: f64,
) -> Result<Objective> {
    check_lambda("lambda0", lambda0)?;
    let mut terms = vec![(ce, 1.0)];
    let mut diff = 0.0;
    if let Some(xs) = x_s {
        let d = difference_loss_var(g, x_t, xs, n_tokens)?;
        diff = g.value(d).item();
        terms.push((d, lambda0));
    }
    let total = g.combine(&terms)?;
    let breakdown = LossBreakdown {
        stage: Stage::One,
        ce: g.value(ce).item(),
        diff,
        balance: 0.0,
        zloss: 0.0,
        total: g.value(total).item(),
        lambdas: (lambda0, 0.0, 0.0),
    };
    Ok(Objective { total, breakdown })
}

/// `L_ce + λ1 L_b + λ2 L_z`; the router terms are omitted without a router.
pub fn stage2_objective(
    g: &mut Graph,
    ce: Var,
    routing: Option<(Var, Var)>,
    lambda1: f64,
    lambda2: f64,
) -> Result<Objective> {
    check_lambda("lambda1", lambda1)?;
    check_lambda("lambda2", lambda2)?;
    let mut terms = vec![(ce, 1.0)];
    let (mut balance, mut zloss) = (0.0, 0.0);
    if let Some((per_token, logits)) = routing {
        let lb = load_balance_loss_var(g, per_token)?;
        let lz = router_z_loss_var(g, logits);
        balance = g.value(lb).item();
        zloss = g.value(lz).item();
        terms.push((lb, lambda1));
        terms.push((lz, lambda2));
    }
    let total = g.combine(&terms)?;
    let breakdown = LossBreakdown {
        stage: Stage::Two,
        ce: g.value(ce).item(),
        diff: 0.0,
        balance,
        zloss,
        total: g.value(total).item(),
        lambdas: (0.0, lambda1, lambda2),
    };
    Ok(Objective { total, breakdown })
}
