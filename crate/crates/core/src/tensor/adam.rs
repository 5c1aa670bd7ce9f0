use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

/// Adam moments and step counter for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl<T: Real> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let zeros: Vec<Vec<T>> = params.into_iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter from its gradient slot.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step<'a, T: Real>(
        &self,
        params: impl IntoIterator<Item = &'a mut Tensor<T>>,
        state: &mut AdamState<T>,
    ) -> Result<()> {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(self.lr / bc1);
        let sqrt_bc2 = T::of(bc2.sqrt());
        let eps = T::of(self.eps);
        let mut count = 0;
        for (i, p) in params.into_iter().enumerate() {
            count += 1;
            let (Some(m), Some(v)) = (state.first_moment.get_mut(i), state.second_moment.get_mut(i)) else {
                return Err(Error::Shape(format!("adam state has no slot for parameter {i}")));
            };
            if m.len() != p.numel() {
                return Err(Error::Shape(format!("adam moment {i} has {} entries, parameter {}", m.len(), p.numel())));
            }
            let grad = p.grad().map(|g| g.to_vec());
            let data = p.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                data[j] -= step_size * m[j] / (v[j].sqrt() / sqrt_bc2 + eps);
            }
        }
        if count != state.first_moment.len() {
            return Err(Error::Shape(format!(
                "adam state tracks {} parameters, got {count}",
                state.first_moment.len()
            )));
        }
        Ok(())
    }
}
