//! Adam with bias correction and skip-on-non-finite gradients.

use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    skipped: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Updates taken or skipped so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Updates skipped because a gradient was not finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Apply one update. Returns `false` when the update was skipped because
    /// some gradient entry was not finite; the step counter advances either way.
    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(contract(
                "parameter and gradient counts do not match the optimizer state",
            ));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(contract(
                    "parameter or gradient shape does not match the optimizer state",
                ));
            }
        }
        self.step += 1;
        if !grads.iter().all(|g| g.is_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        let t = self.step as f64;
        let bc1 = 1.0 - libm::pow(self.beta1, t);
        let bc2 = 1.0 - libm::pow(self.beta2, t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let ps = p.as_mut_slice();
            let ms = m.as_mut_slice();
            let vs = v.as_mut_slice();
            for (i, &gi) in g.as_slice().iter().enumerate() {
                ms[i] = self.beta1 * ms[i] + (1.0 - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] -= self.lr * mhat / (libm::sqrt(vhat) + self.eps);
            }
        }
        Ok(true)
    }

    pub fn moments(&self) -> (&[Matrix], &[Matrix]) {
        (&self.m, &self.v)
    }

    /// Restore from saved moments.
    pub fn restore(&mut self, step: u64, m: Vec<Matrix>, v: Vec<Matrix>) -> Result<()> {
        if m.len() != self.m.len()
            || v.len() != self.v.len()
            || m.iter().zip(&self.m).any(|(a, b)| a.shape() != b.shape())
            || v.iter().zip(&self.v).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(contract("optimizer moments do not match parameter shapes"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }
}
