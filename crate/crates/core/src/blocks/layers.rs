use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, BnMode, BnStats, Scalar, Tensor};

/// A named tensor slot owned by a module: either a learnable parameter or a
/// non-learnable buffer (batch-norm running statistics).
///
/// Interior mutability lets forward passes run on `&self`; updates follow a
/// single-writer contract (the optimizer step, or a train-mode BN pass).
pub struct Var<T: Scalar> {
    value: RwLock<Tensor<T>>,
    learnable: bool,
}

impl<T: Scalar> Var<T> {
    pub fn param(data: Vec<T>, shape: &[usize]) -> Self {
        Self {
            value: RwLock::new(Tensor::param(data, shape).expect("param shape")),
            learnable: true,
        }
    }

    pub fn buffer(data: Vec<T>, shape: &[usize]) -> Self {
        Self {
            value: RwLock::new(Tensor::new(data, shape).expect("buffer shape")),
            learnable: false,
        }
    }

    pub fn get(&self) -> Tensor<T> {
        self.value.read().expect("var lock").clone()
    }

    /// Replaces the stored values. Learnable vars get a fresh leaf (and thus
    /// a cleared gradient).
    pub fn set_data(&self, data: Vec<T>) -> Result<()> {
        let mut slot = self.value.write().expect("var lock");
        if data.len() != slot.numel() {
            return Err(Error::Shape {
                op: "Var::set_data",
                detail: format!("{} values for shape {:?}", data.len(), slot.shape()),
            });
        }
        let t = Tensor::new(data, slot.shape())?;
        *slot = if self.learnable {
            t.with_requires_grad(true)
        } else {
            t
        };
        Ok(())
    }

    pub fn is_learnable(&self) -> bool {
        self.learnable
    }

    pub fn shape(&self) -> Vec<usize> {
        self.get().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.get().numel()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.get().data().to_vec()
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything that owns named [`Var`]s.
pub trait Module<T: Scalar> {
    /// Visits every var with its fully qualified dotted name, in a fixed order.
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>));

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, v| {
            if v.is_learnable() {
                n += v.numel()
            }
        });
        n
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit("", &mut |name, v| {
            if v.is_learnable() {
                names.push(name.to_string())
            }
        });
        names
    }
}

/// Deterministic parameter initializer.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// He-uniform: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
    pub fn he_uniform<T: Scalar>(&mut self, n: usize, fan_in: usize) -> Vec<T> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        (0..n)
            .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
            .collect()
    }

    pub fn uniform<T: Scalar>(&mut self, n: usize, lo: f64, hi: f64) -> Vec<T> {
        (0..n).map(|_| T::lit(self.rng.gen_range(lo..hi))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Act {
    Relu,
    Silu,
    Identity,
}

impl Act {
    pub fn apply<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Act::Relu => tensor::relu(x),
            Act::Silu => tensor::silu(x),
            Act::Identity => x.clone(),
        }
    }
}

pub const BN_EPS: f64 = 1e-3;

pub struct BatchNorm<T: Scalar> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    pub running_mean: Var<T>,
    pub running_var: Var<T>,
    /// Count of train-mode batches, stored as a one-element buffer so that it
    /// travels with checkpoints.
    pub tracked: Var<T>,
    pub eps: T,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Var::param(vec![T::one(); channels], &[channels]),
            beta: Var::param(vec![T::zero(); channels], &[channels]),
            running_mean: Var::buffer(vec![T::zero(); channels], &[channels]),
            running_var: Var::buffer(vec![T::one(); channels], &[channels]),
            tracked: Var::buffer(vec![T::zero()], &[1]),
            eps: T::lit(BN_EPS),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn is_calibrated(&self) -> bool {
        self.tracked.to_vec()[0] > T::zero()
    }

    /// Overwrites the running statistics and marks the layer calibrated.
    pub fn set_stats(&self, mean: Vec<T>, var: Vec<T>) -> Result<()> {
        self.running_mean.set_data(mean)?;
        self.running_var.set_data(var)?;
        self.tracked.set_data(vec![T::one()])
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut stats = BnStats {
            running_mean: self.running_mean.to_vec(),
            running_var: self.running_var.to_vec(),
            momentum: T::lit(0.03),
            batches_tracked: self.tracked.to_vec()[0].as_f64() as u64,
        };
        let (g, b) = (self.gamma.get(), self.beta.get());
        if train {
            let y = tensor::batch_norm(x, &g, &b, BnMode::Train(&mut stats), self.eps)?;
            self.running_mean.set_data(stats.running_mean)?;
            self.running_var.set_data(stats.running_var)?;
            self.tracked
                .set_data(vec![T::lit(stats.batches_tracked as f64)])?;
            Ok(y)
        } else {
            tensor::batch_norm(x, &g, &b, BnMode::Eval(&stats), self.eps)
        }
    }

    /// Per-channel `(scale, shift)` such that eval-mode BN is `x * scale + shift`.
    pub fn fold(&self) -> Result<(Vec<T>, Vec<T>)> {
        if !self.is_calibrated() {
            return Err(Error::State(
                "batch-norm running statistics were never populated; run a calibration pass \
                 (train-mode forward over representative data) before fusing"
                    .into(),
            ));
        }
        let gamma = self.gamma.to_vec();
        let beta = self.beta.to_vec();
        let mean = self.running_mean.to_vec();
        let var = self.running_var.to_vec();
        let mut scale = Vec::with_capacity(gamma.len());
        let mut shift = Vec::with_capacity(gamma.len());
        for i in 0..gamma.len() {
            let s = gamma[i] / (var[i] + self.eps).sqrt();
            scale.push(s);
            shift.push(beta[i] - mean[i] * s);
        }
        Ok((scale, shift))
    }
}

impl<T: Scalar> Module<T> for BatchNorm<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.gamma);
        f(&join(prefix, "bias"), &self.beta);
        f(&join(prefix, "running_mean"), &self.running_mean);
        f(&join(prefix, "running_var"), &self.running_var);
        f(&join(prefix, "num_batches_tracked"), &self.tracked);
    }
}

/// Folds a BN `(scale, shift)` into conv weights `[cout, ...]`.
pub(crate) fn fold_into_conv<T: Scalar>(weight: &[T], cout: usize, scale: &[T]) -> Vec<T> {
    let per = weight.len() / cout;
    weight
        .iter()
        .enumerate()
        .map(|(i, w)| *w * scale[i / per])
        .collect()
}

enum ConvForm<T: Scalar> {
    Train { weight: Var<T>, bn: BatchNorm<T> },
    Deploy { weight: Var<T>, bias: Var<T> },
}

/// Conv (no bias) + BatchNorm + activation; fuses to conv-with-bias + activation.
pub struct ConvBn<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub act: Act,
    form: ConvForm<T>,
}

impl<T: Scalar> ConvBn<T> {
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        act: Act,
    ) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            in_channels: cin,
            out_channels: cout,
            kernel,
            stride,
            act,
            form: ConvForm::Train {
                weight: Var::param(
                    init.he_uniform(cout * fan_in, fan_in),
                    &[cout, cin, kernel, kernel],
                ),
                bn: BatchNorm::new(cout),
            },
        }
    }

    pub fn padding(&self) -> usize {
        self.kernel / 2
    }

    pub fn is_deploy(&self) -> bool {
        matches!(self.form, ConvForm::Deploy { .. })
    }

    pub fn weight(&self) -> &Var<T> {
        match &self.form {
            ConvForm::Train { weight, .. } | ConvForm::Deploy { weight, .. } => weight,
        }
    }

    pub fn bn(&self) -> Option<&BatchNorm<T>> {
        match &self.form {
            ConvForm::Train { bn, .. } => Some(bn),
            ConvForm::Deploy { .. } => None,
        }
    }

    /// Conv + BN without the activation.
    pub fn forward_linear(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match &self.form {
            ConvForm::Train { weight, bn } => {
                let y = tensor::conv2d(x, &weight.get(), None, self.stride, self.padding())?;
                bn.forward(&y, train)
            }
            ConvForm::Deploy { weight, bias } => tensor::conv2d(
                x,
                &weight.get(),
                Some(&bias.get()),
                self.stride,
                self.padding(),
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        Ok(self.act.apply(&self.forward_linear(x, train)?))
    }

    /// Folds BN into the convolution. No-op on deploy-form layers.
    pub fn fuse(&mut self) -> Result<()> {
        if let ConvForm::Train { weight, bn } = &self.form {
            let (scale, shift) = bn.fold()?;
            let w = fold_into_conv(&weight.to_vec(), self.out_channels, &scale);
            let shape = weight.shape();
            self.form = ConvForm::Deploy {
                weight: Var::param(w, &shape),
                bias: Var::param(shift, &[self.out_channels]),
            };
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for ConvBn<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        match &self.form {
            ConvForm::Train { weight, bn } => {
                f(&join(prefix, "conv.weight"), weight);
                bn.visit(&join(prefix, "bn"), f);
            }
            ConvForm::Deploy { weight, bias } => {
                f(&join(prefix, "conv.weight"), weight);
                f(&join(prefix, "conv.bias"), bias);
            }
        }
    }
}

/// Plain conv with bias and no normalization (head prediction layers).
pub struct Conv<T: Scalar> {
    pub weight: Var<T>,
    pub bias: Var<T>,
    pub out_channels: usize,
}

impl<T: Scalar> Conv<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, kernel: usize, bias_init: f64) -> Self {
        let fan_in = cin * kernel * kernel;
        Self {
            weight: Var::param(
                init.he_uniform(cout * fan_in, fan_in),
                &[cout, cin, kernel, kernel],
            ),
            bias: Var::param(vec![T::lit(bias_init); cout], &[cout]),
            out_channels: cout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.weight.shape()[2];
        tensor::conv2d(x, &self.weight.get(), Some(&self.bias.get()), 1, k / 2)
    }
}

impl<T: Scalar> Module<T> for Conv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        f(&join(prefix, "weight"), &self.weight);
        f(&join(prefix, "bias"), &self.bias);
    }
}
