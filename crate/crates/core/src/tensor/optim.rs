use super::ParamSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `p ← p − lr·∇p` for every parameter, then clears the gradients.
pub fn sgd_step<T: Scalar>(params: &mut ParamSet<T>, lr: T) -> Result<()> {
    if lr < T::zero() || !lr.is_finite() {
        return Err(Error::Invalid(format!("learning rate must be >= 0, got {lr}")));
    }
    params.require_grads()?;
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.grad.take() {
            for (p, gv) in t.data_mut().iter_mut().zip(g) {
                *p -= lr * gv;
            }
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(params: &mut ParamSet<T>, max_norm: T) -> T {
    let norm = params.grad_norm();
    if norm > max_norm && norm > T::zero() {
        let k = max_norm / norm;
        for (_, t) in params.iter_mut() {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= k);
            }
        }
    }
    norm
}

/// Adam with bias correction. Moment buffers follow the parameter order of
/// the set it was created for.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &ParamSet<T>, lr: T) -> Self {
        let zeros: Vec<Vec<T>> = params
            .iter()
            .map(|(_, t)| vec![T::zero(); t.numel()])
            .collect();
        Adam {
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        params.require_grads()?;
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let Some(g) = t.grad.take() else {
                continue;
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, gv), mi), vi) in t.data_mut().iter_mut().zip(g).zip(m).zip(v) {
                *mi = self.beta1 * *mi + (T::one() - self.beta1) * gv;
                *vi = self.beta2 * *vi + (T::one() - self.beta2) * gv * gv;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *p -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
