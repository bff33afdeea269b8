use std::collections::BTreeMap;

use super::tensor::{Float, Tensor};
use crate::error::{ensure, Error, Result};

/// SGD with momentum: `v <- mu*v + g; p <- p - lr*v`.
///
/// Velocity buffers are created on the first step that touches a parameter
/// and start at zero.
#[derive(Debug, Clone)]
pub struct OptimizerState<T = f32> {
    pub lr: T,
    pub momentum: T,
    velocity: BTreeMap<String, Vec<T>>,
}

impl<T: Float> OptimizerState<T> {
    pub fn new(lr: T, momentum: T) -> Result<Self> {
        ensure!(lr > T::zero(), "learning rate must be positive");
        ensure!(
            momentum >= T::zero() && momentum < T::one(),
            "momentum must lie in [0,1)"
        );
        Ok(OptimizerState {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter yielded by `params`. Each must
    /// have a gradient of matching length in `grads`.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Vec<T>>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor<T>)>,
    {
        for (name, param) in params {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::contract(format!("missing gradient for trainable parameter {name}")))?;
            ensure!(
                g.len() == param.numel(),
                "gradient for {name} has {} elements, parameter has {}",
                g.len(),
                param.numel()
            );
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![T::zero(); g.len()]);
            for ((p, vi), &gi) in param.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *p = *p - self.lr * *vi;
            }
        }
        Ok(())
    }
}
