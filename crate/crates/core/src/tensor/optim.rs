//! Adaptive-moment optimizer.

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for a fixed, ordered list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let first: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            config,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    /// One bias-corrected update. `params` and `grads` are aligned with the
    /// accumulators; `names` labels errors. Nothing is modified on error.
    pub fn step(&mut self, names: &[&str], params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::contract(format!("shape mismatch for parameter {}", names[i])));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    component: format!("gradient of {}", names[i]),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let t = self.step as i32;
        let corr1 = T::one() - b1.powi(t);
        let corr2 = T::one() - b2.powi(t);
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.first.iter_mut().zip(self.second.iter_mut())) {
            let (pd, md, vd) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + (T::one() - b1) * *gi;
                vd[i] = b2 * vd[i] + (T::one() - b2) * *gi * *gi;
                let mhat = md[i] / corr1;
                let vhat = vd[i] / corr2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> (OptimState<f64>, Tensor<f64>) {
        let p = Tensor::from_vec(vec![value]);
        (OptimState::new(AdamConfig::default(), [&p]), p)
    }

    #[test]
    fn zero_gradient_leaves_parameter() {
        let (mut st, mut p) = single(1.5);
        for _ in 0..5 {
            st.step(&["p"], &mut [&mut p], &[Tensor::from_vec(vec![0.0])]).unwrap();
        }
        assert_eq!(p.data(), &[1.5]);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn constant_gradient_step_approaches_lr() {
        let (mut st, mut p) = single(0.0);
        let mut prev = 0.0;
        for _ in 0..2000 {
            st.step(&["p"], &mut [&mut p], &[Tensor::from_vec(vec![0.3])]).unwrap();
            let now = p.data()[0];
            let step = (prev - now) / st.config.lr;
            assert!((step - 1.0).abs() < 1e-3, "step ratio {step}");
            prev = now;
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let (mut st, mut p) = single(0.0);
        let err = st
            .step(&["fine.head"], &mut [&mut p], &[Tensor::from_vec(vec![f64::NAN])])
            .unwrap_err();
        assert!(err.to_string().contains("fine.head"));
        assert_eq!(st.step, 0);
    }

    #[test]
    fn quadratic_bowl_descends_monotonically() {
        // Oracle: f(x) = (x - 3)^2 simulated in plain scalar code.
        let (mut st, mut p) = single(0.0);
        st.config.lr = 1e-3;
        let loss = |x: f64| (x - 3.0).powi(2);
        let mut last = loss(p.data()[0]);
        for _ in 0..10 {
            let grad = 2.0 * (p.data()[0] - 3.0);
            st.step(&["x"], &mut [&mut p], &[Tensor::from_vec(vec![grad])]).unwrap();
            let now = loss(p.data()[0]);
            assert!(now < last);
            last = now;
        }
    }
}
