//! Bias-corrected Adam with optional global-norm gradient clipping.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First/second moment per parameter name.
    pub moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(lr: f64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::InvalidParameter(format!("lr must be positive, got {lr}")));
        }
        Ok(AdamState { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() })
    }

    /// Applies one update to every `(name, param)` whose `grad` is set.
    /// Rejects non-finite gradients before touching any state.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<S>)]) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(grad) = &p.grad {
                if grad.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of '{name}'")));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::fl(self.beta1), S::fl(self.beta2));
        let (one_m_b1, one_m_b2) = (S::fl(1.0 - self.beta1), S::fl(1.0 - self.beta2));
        let epsv = S::fl(self.eps);
        let lr_t = S::fl(self.lr * bc2.sqrt() / bc1);

        for (name, p) in params.iter_mut() {
            let Some(grad) = p.grad.take() else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape[0], p.shape[1]), Tensor::zeros(p.shape[0], p.shape[1])));
            if m.shape != p.shape {
                return Err(Error::Shape(format!(
                    "adam moment shape {:?} != param '{name}' {:?}",
                    m.shape, p.shape
                )));
            }
            for i in 0..p.data.len() {
                let gi = grad[i];
                m.data[i] = b1 * m.data[i] + one_m_b1 * gi;
                v.data[i] = b2 * v.data[i] + one_m_b2 * gi * gi;
                p.data[i] = p.data[i] - lr_t * m.data[i] / (v.data[i].sqrt() + epsv);
            }
        }
        Ok(())
    }
}

/// Scales all set gradients so the global L2 norm is at most `max_norm`.
pub fn clip_global_norm<S: Scalar>(params: &mut [(String, &mut Tensor<S>)], max_norm: f64) {
    let mut total = 0.0f64;
    for (_, p) in params.iter() {
        if let Some(g) = &p.grad {
            for v in g {
                total += v.to64() * v.to64();
            }
        }
    }
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = S::fl(max_norm / norm);
        for (_, p) in params.iter_mut() {
            if let Some(g) = &mut p.grad {
                for v in g {
                    *v = *v * k;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(data: &[f64], grad: &[f64]) -> Tensor<f64> {
        let mut t = Tensor::from_f64(1, data.len(), data).unwrap();
        t.grad = Some(grad.to_vec());
        t
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = with_grad(&[1.0, -2.0], &[0.0, 0.0]);
        let mut adam = AdamState::new(0.1).unwrap();
        let mut slots = vec![("p".to_string(), &mut p)];
        adam.step(&mut slots).unwrap();
        assert_eq!(p.data, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_matches_closed_form() {
        // Fresh state: m-hat = g, v-hat = g^2, so the first update is
        // approximately -lr * g / (|g| + eps) elementwise.
        let g = [0.5, -3.0, 0.02];
        let mut p = with_grad(&[0.0, 0.0, 0.0], &g);
        let lr = 0.01;
        let mut adam = AdamState::new(lr).unwrap();
        let mut slots = vec![("p".to_string(), &mut p)];
        adam.step(&mut slots).unwrap();
        for (i, gi) in g.iter().enumerate() {
            let expect = -lr * gi / (gi.abs() + adam.eps);
            assert!((p.data[i] - expect).abs() < 1e-4 * lr, "elem {i}: {} vs {expect}", p.data[i]);
            assert_eq!(p.data[i].signum(), (-gi).signum());
        }
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut p = with_grad(&[0.3, 0.7], &[0.1, -0.2]);
            let mut adam = AdamState::new(0.05).unwrap();
            let mut slots = vec![("p".to_string(), &mut p)];
            adam.step(&mut slots).unwrap();
            p.data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_rejected() {
        let mut p = with_grad(&[0.0], &[f64::NAN]);
        let mut adam = AdamState::new(0.05).unwrap();
        let mut slots = vec![("p".to_string(), &mut p)];
        assert!(matches!(adam.step(&mut slots), Err(Error::NonFinite(_))));
        assert_eq!(p.data, vec![0.0]);
    }

    #[test]
    fn clip_reduces_norm() {
        let mut p = with_grad(&[0.0, 0.0], &[3.0, 4.0]);
        let mut slots = vec![("p".to_string(), &mut p)];
        clip_global_norm(&mut slots, 1.0);
        let g = p.grad.as_ref().unwrap();
        let norm = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }
}
