//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::array::DiffArray;
use crate::error::{AutodiffError, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    first: Vec<T>,
    second: Vec<T>,
}

/// Optimizer state: per-parameter moment buffers keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every trainable parameter from its stored gradient.
    /// Parameters without a gradient are treated as having a zero gradient.
    /// If any gradient is non-finite nothing is modified.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut DiffArray<T>)>,
    {
        let params: Vec<(&str, &mut DiffArray<T>)> = params.into_iter().filter(|(_, p)| p.requires_grad()).collect();
        for (name, p) in &params {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(AutodiffError::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, p) in params {
            let Some(grad) = p.grad().map(|g| g.to_vec()) else {
                // Zero gradient still decays the moments.
                if let Some(m) = self.moments.get_mut(name) {
                    apply(p.data_mut(), m, None, b1, b2, bc1, bc2, lr, eps);
                }
                continue;
            };
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: vec![T::zero(); grad.len()],
                second: vec![T::zero(); grad.len()],
            });
            apply(p.data_mut(), m, Some(&grad), b1, b2, bc1, bc2, lr, eps);
        }
        Ok(())
    }
}

#[allow(clippy::too_many_arguments)]
fn apply<T: Real>(data: &mut [T], m: &mut Moments<T>, grad: Option<&[T]>, b1: T, b2: T, bc1: T, bc2: T, lr: T, eps: T) {
    for i in 0..data.len() {
        let g = grad.map_or(T::zero(), |g| g[i]);
        m.first[i] = b1 * m.first[i] + (T::one() - b1) * g;
        m.second[i] = b2 * m.second[i] + (T::one() - b2) * g * g;
        let mhat = m.first[i] / bc1;
        let vhat = m.second[i] / bc2;
        data[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}
