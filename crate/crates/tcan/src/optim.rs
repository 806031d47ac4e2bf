//! Adam with decoupled weight decay, plus the finite-difference gradient
//! checker used to validate every differentiable path.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled: applied directly to the weights before the Adam delta.
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 5e-4 }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in (0, 1)".into()));
        }
        if self.lr <= 0.0 || self.eps <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::Config("adam lr/eps must be positive, weight_decay >= 0".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every parameter in the store.
/// `t` is the 1-based global step index. Gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParamStore, hyper: &AdamHyper, t: usize) -> Result<()> {
    if t < 1 {
        return Err(Error::Validation("adam_step: step index must be >= 1".into()));
    }
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for p in store.iter_mut() {
        let n = p.value.len();
        let value = p.value.data_mut();
        let grad = p.grad.data_mut();
        let m = p.adam_m.data_mut();
        let v = p.adam_v.data_mut();
        for i in 0..n {
            let g = grad[i];
            if hyper.weight_decay != 0.0 {
                value[i] -= hyper.lr * hyper.weight_decay * value[i];
            }
            m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * g;
            v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            value[i] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
            grad[i] = 0.0;
        }
        if !p.value.is_finite() {
            return Err(Error::Numerical(format!("adam_step produced non-finite `{}`", p.name)));
        }
    }
    Ok(())
}

/// Central finite-difference check of the analytic gradients produced by a
/// forward/backward pass.
///
/// `forward` must deterministically build a scalar loss on the given tape
/// (dropout disabled or driven by a fixed stream). Returns the maximum
/// relative error |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
/// over every coordinate of the listed parameters.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, forward: F) -> Result<f64>
where
    F: Fn(&ParamStore, &mut crate::tape::Tape) -> Result<crate::tape::Var>,
{
    store.zero_grads();
    let mut tape = crate::tape::Tape::new();
    let loss = forward(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> =
        ids.iter().map(|&id| store.get(id).grad.data().to_vec()).collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = crate::tape::Tape::new();
        let loss = forward(store, &mut tape)?;
        Ok(tape.value(loss).get(0, 0))
    };

    let mut max_rel = 0.0_f64;
    for (k, &id) in ids.iter().enumerate() {
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let f_plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let f_minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    store.zero_grads();
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(name: &str, t: Tensor) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add(name, t).unwrap();
        (s, id)
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let (mut s, id) = store_with("p", Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap());
        let hyper = AdamHyper { weight_decay: 0.0, ..AdamHyper::default() };
        adam_step(&mut s, &hyper, 1).unwrap();
        assert_eq!(s.get(id).value.data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store_with("p", Tensor::from_vec(1, 2, vec![0.0, 0.0]).unwrap());
        s.get_mut(id).grad = Tensor::from_vec(1, 2, vec![3.0, -0.25]).unwrap();
        let hyper = AdamHyper { lr: 1e-3, weight_decay: 0.0, ..AdamHyper::default() };
        adam_step(&mut s, &hyper, 1).unwrap();
        // At t=1 the bias-corrected update is g/(|g| + eps') ~ sign(g).
        let v = s.get(id).value.data();
        assert!((v[0] + 1e-3).abs() < 1e-6, "got {}", v[0]);
        assert!((v[1] - 1e-3).abs() < 1e-6, "got {}", v[1]);
    }

    #[test]
    fn grads_are_zeroed_after_step() {
        let (mut s, id) = store_with("p", Tensor::scalar(1.0));
        s.get_mut(id).grad = Tensor::scalar(2.0);
        adam_step(&mut s, &AdamHyper::default(), 1).unwrap();
        assert_eq!(s.get(id).grad.data(), &[0.0]);
    }

    #[test]
    fn rejects_step_zero() {
        let (mut s, _) = store_with("p", Tensor::scalar(1.0));
        assert!(adam_step(&mut s, &AdamHyper::default(), 0).is_err());
    }

    #[test]
    fn converges_on_quadratic() {
        // f(theta) = |theta - c|^2, gradient 2(theta - c).
        let c = [0.3, -0.7, 1.1];
        let (mut s, id) = store_with("p", Tensor::from_vec(1, 3, vec![0.0; 3]).unwrap());
        let hyper = AdamHyper { lr: 0.05, weight_decay: 0.0, ..AdamHyper::default() };
        for t in 1..=200 {
            let g: Vec<f64> =
                s.get(id).value.data().iter().zip(&c).map(|(&x, &ci)| 2.0 * (x - ci)).collect();
            s.get_mut(id).grad = Tensor::from_vec(1, 3, g).unwrap();
            adam_step(&mut s, &hyper, t).unwrap();
        }
        for (x, ci) in s.get(id).value.data().iter().zip(&c) {
            assert!((x - ci).abs() < 1e-3, "theta {x} vs target {ci}");
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let (mut s, id) = store_with("x", Tensor::scalar(3.0));
        // loss = x^2; analytic gradient 6 at x=3.
        let err = grad_check(&mut s, &[id], 1e-5, |store, tape| {
            let x = tape.param(store, id)?;
            let sq = tape.mul(x, x)?;
            tape.sum_all(sq)
        })
        .unwrap();
        assert!(err < 1e-8, "rel err {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let (mut s, id) = store_with("x", Tensor::scalar(2.0));
        let err = grad_check(&mut s, &[id], 1e-5, |_store, tape| {
            let c = tape.constant(Tensor::scalar(5.0))?;
            tape.sum_all(c)
        })
        .unwrap();
        assert!(err < 1e-12, "rel err {err}");
    }
}
