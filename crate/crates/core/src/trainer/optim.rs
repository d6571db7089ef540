use std::collections::BTreeMap;

use super::checkpoint::Record;
use crate::blocks::Module;
use crate::error::{Error, Result};
use crate::network::Model;

/// SGD with Nesterov momentum. Weight decay applies to convolution kernels
/// only (rank-4 parameters), not to BN affine terms or biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    buffers: BTreeMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum: momentum as f32,
            weight_decay: weight_decay as f32,
            buffers: BTreeMap::new(),
        }
    }

    /// One update with the gradients currently held by the parameters.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, model: &Model<f32>, lr: f64) -> Result<()> {
        let lr = lr as f32;
        let (m, wd) = (self.momentum, self.weight_decay);
        let mut result = Ok(());
        model.visit("", &mut |name, var| {
            if !var.is_learnable() || result.is_err() {
                return;
            }
            let t = var.get();
            let Some(grad) = t.grad() else { return };
            let decay = if t.shape().len() == 4 { wd } else { 0.0 };
            let buf = self
                .buffers
                .entry(name.to_string())
                .or_insert_with(|| vec![0.0; grad.len()]);
            let w = t.data();
            let mut next = Vec::with_capacity(w.len());
            for i in 0..w.len() {
                let g = grad[i] + decay * w[i];
                buf[i] = m * buf[i] + g;
                next.push(w[i] - lr * (g + m * buf[i]));
            }
            result = var.set_data(next);
        });
        result
    }

    pub fn state(&self) -> Vec<Record> {
        self.buffers
            .iter()
            .map(|(name, v)| Record {
                name: name.clone(),
                shape: vec![v.len()],
                data: v.clone(),
            })
            .collect()
    }

    pub fn load_state(&mut self, records: &[Record]) -> Result<()> {
        self.buffers.clear();
        for r in records {
            if r.shape.len() != 1 || r.shape[0] != r.data.len() {
                return Err(Error::Format(format!("bad optimizer record {}", r.name)));
            }
            self.buffers.insert(r.name.clone(), r.data.clone());
        }
        Ok(())
    }
}
