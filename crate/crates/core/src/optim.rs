//! Adaptive-moment gradient descent and best-iterate bookkeeping.

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    /// One update of `params` in place. Entries where `mask` is false are
    /// left untouched (bitwise), including their moment estimates.
    pub fn step_masked(&mut self, params: &mut [f64], grad: &[f64], mask: impl Fn(usize) -> bool) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !mask(i) {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            params[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step_masked(params, grad, |_| true);
    }
}

/// Keeps the lowest-loss iterate seen so far.
#[derive(Clone, Debug)]
pub struct BestIterate<T> {
    pub loss: f64,
    pub iteration: usize,
    pub value: T,
}

impl<T: Clone> BestIterate<T> {
    pub fn new(loss: f64, value: T) -> Self {
        Self {
            loss,
            iteration: 0,
            value,
        }
    }

    pub fn offer(&mut self, loss: f64, iteration: usize, value: impl FnOnce() -> T) {
        if loss < self.loss {
            self.loss = loss;
            self.iteration = iteration;
            self.value = value();
        }
    }
}

pub(crate) fn check_finite(
    stage: &'static str,
    iteration: usize,
    loss: f64,
    grad: &Tensor,
) -> crate::Result<()> {
    if !loss.is_finite() || !grad.all_finite() {
        return Err(crate::Error::NonFinite {
            stage,
            iteration,
            detail: format!(
                "loss={loss}, gradient finite={}, |grad|max={}",
                grad.all_finite(),
                grad.max_abs()
            ),
        });
    }
    Ok(())
}
