use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v ← momentum·v + grad + weight_decay·param`, `param ← param − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Applies one update to every parameter and clears its gradient.
    ///
    /// Fails without touching anything if a parameter has no gradient.
    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad().is_none()) {
            return Err(Error::MissingGradient(name.to_string()));
        }
        for (name, param) in params.iter_mut() {
            let grad = param.take_grad().expect("checked above");
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            if v.len() != grad.len() {
                return Err(Error::Shape {
                    op: "sgd_step",
                    left: vec![v.len()],
                    right: param.shape().to_vec(),
                });
            }
            for ((vi, gi), pi) in v.iter_mut().zip(&grad).zip(param.data_mut()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *pi;
                *pi -= self.learning_rate * *vi;
            }
        }
        Ok(())
    }
}
