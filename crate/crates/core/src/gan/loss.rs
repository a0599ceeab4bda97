//! Generator objective with learned loss attenuation, and the
//! one-sided-smoothed discriminator cross entropy.
//!
//! For ground truth `p`, prediction `p_hat`, per-voxel log-variance
//! `s = log sigma^2`, discriminator output `D` and coarse prediction `c`,
//! each batch element contributes
//!
//! ```text
//! -log D  +  sum_v [ 1/2 exp(-s_v) d(p_v, p_hat_v) + 1/2 s_v ]  +  lambda * sum_v d(p_v, c_v)
//! ```
//!
//! with `d` the symmetric L2 distance, and the total is averaged over the batch.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    /// Weight of the coarse network's reconstruction term.
    pub coarse_weight: f64,
    /// Use `d^2` instead of `d` as the residual.
    pub squared_residual: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            coarse_weight: 1.0,
            squared_residual: false,
        }
    }
}

/// Graph handles of each loss component (all one-element tensors).
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub adversarial: Var,
    pub reconstruction: Var,
    pub variance_penalty: Var,
    pub coarse: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub adversarial: f64,
    pub reconstruction: f64,
    pub variance_penalty: f64,
    pub coarse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn read<T: Real>(g: &Graph<T>, vars: &LossVars) -> Self {
        let get = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        Self {
            adversarial: get(vars.adversarial),
            reconstruction: get(vars.reconstruction),
            variance_penalty: get(vars.variance_penalty),
            coarse: get(vars.coarse),
            total: get(vars.total),
        }
    }

    pub fn components(&self) -> [(&'static str, f64); 5] {
        [
            ("adversarial", self.adversarial),
            ("reconstruction", self.reconstruction),
            ("variance_penalty", self.variance_penalty),
            ("coarse", self.coarse),
            ("total", self.total),
        ]
    }
}

/// Generator loss. `target`, `pred` and `coarse` are `[B,n,n,n,3]`,
/// `logvar` is `[B,n,n,n,1]` and `d_prob` is `[B,1]`. A missing
/// discriminator output or coarse prediction contributes zero.
pub fn generator_loss<T: Real>(
    g: &mut Graph<T>,
    target: Var,
    pred: Var,
    logvar: Var,
    d_prob: Option<Var>,
    coarse: Option<Var>,
    opts: &LossOptions,
) -> Result<LossVars> {
    let batch = g.shape(target)[0];
    let inv_b = T::one() / T::from_usize(batch).expect("batch");
    let half_b = T::lit(0.5) * inv_b;

    let adversarial = match d_prob {
        Some(p) => {
            if g.shape(p) != [batch, 1] {
                return Err(Error::contract(format!("discriminator output {:?} is not [{batch}, 1]", g.shape(p))));
            }
            let logs = g.ln(p);
            let s = g.sum(logs);
            g.scale(s, -inv_b)
        }
        None => g.constant(crate::tensor::Tensor::scalar(T::zero())),
    };

    let dist = g.symmetric_l2(pred, target, opts.squared_residual)?;
    if g.shape(logvar) != g.shape(dist) {
        return Err(Error::contract(format!(
            "log-variance {:?} does not match residual {:?}",
            g.shape(logvar),
            g.shape(dist)
        )));
    }
    let neg = g.scale(logvar, -T::one());
    let precision = g.exp(neg);
    let weighted = g.mul(precision, dist)?;
    let rs = g.sum(weighted);
    let reconstruction = g.scale(rs, half_b);

    let ps = g.sum(logvar);
    let variance_penalty = g.scale(ps, half_b);

    let coarse_term = match coarse {
        Some(c) => {
            let dc = g.symmetric_l2(c, target, opts.squared_residual)?;
            let s = g.sum(dc);
            g.scale(s, T::lit(opts.coarse_weight) * inv_b)
        }
        None => g.constant(crate::tensor::Tensor::scalar(T::zero())),
    };

    let t = g.add(adversarial, reconstruction)?;
    let t = g.add(t, variance_penalty)?;
    let total = g.add(t, coarse_term)?;

    let vars = LossVars {
        adversarial,
        reconstruction,
        variance_penalty,
        coarse: coarse_term,
        total,
    };
    for (name, value) in LossBreakdown::read(g, &vars).components() {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                component: format!("generator loss ({name})"),
            });
        }
    }
    Ok(vars)
}

/// Discriminator cross entropy: the real target is `smoothing`, the fake
/// target stays 0.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, real_prob: Var, fake_prob: Var, smoothing: f64) -> Result<Var> {
    if !(smoothing > 0.0 && smoothing <= 1.0) {
        return Err(Error::contract(format!("label smoothing {smoothing} outside (0, 1]")));
    }
    let inv_b = |g: &Graph<T>, v: Var| T::one() / T::from_usize(g.value(v).len()).expect("batch");
    let t = T::lit(smoothing);

    let log_r = g.ln(real_prob);
    let pos = g.sum(log_r);
    let mut real = g.scale(pos, -t * inv_b(g, real_prob));
    if smoothing < 1.0 {
        let one_minus_r = g.affine(real_prob, -T::one(), T::one());
        let log_nr = g.ln(one_minus_r);
        let neg = g.sum(log_nr);
        let neg = g.scale(neg, -(T::one() - t) * inv_b(g, real_prob));
        real = g.add(real, neg)?;
    }

    let one_minus_f = g.affine(fake_prob, -T::one(), T::one());
    let log_nf = g.ln(one_minus_f);
    let fs = g.sum(log_nf);
    let fake = g.scale(fs, -inv_b(g, fake_prob));
    g.add(real, fake)
}
