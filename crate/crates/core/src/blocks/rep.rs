//! Re-parameterizable convolutions and the stacks built from them.

use super::layers::{fold_into_conv, join, Act, BatchNorm, ConvBn, Init, Module, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{self, Scalar, Tensor};

enum RepForm<T: Scalar> {
    Train {
        dense: ConvBn<T>,
        pointwise: ConvBn<T>,
        identity: Option<BatchNorm<T>>,
    },
    Deploy {
        weight: Var<T>,
        bias: Var<T>,
    },
}

/// 3x3 + 1x1 + identity branches, each batch-normalized, summed and
/// activated. Fuses to a single 3x3 convolution.
pub struct RepConv<T: Scalar> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub act: Act,
    form: RepForm<T>,
}

impl<T: Scalar> RepConv<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, stride: usize, act: Act) -> Self {
        let identity = (cin == cout && stride == 1).then(|| BatchNorm::new(cout));
        Self {
            in_channels: cin,
            out_channels: cout,
            stride,
            act,
            form: RepForm::Train {
                dense: ConvBn::new(init, cin, cout, 3, stride, Act::Identity),
                pointwise: ConvBn::new(init, cin, cout, 1, stride, Act::Identity),
                identity,
            },
        }
    }

    pub fn is_deploy(&self) -> bool {
        matches!(self.form, RepForm::Deploy { .. })
    }

    pub fn has_identity(&self) -> bool {
        matches!(
            self.form,
            RepForm::Train {
                identity: Some(_),
                ..
            }
        )
    }

    pub fn batch_norms(&self) -> Vec<&BatchNorm<T>> {
        match &self.form {
            RepForm::Train {
                dense,
                pointwise,
                identity,
            } => {
                let mut v = vec![dense.bn().unwrap(), pointwise.bn().unwrap()];
                v.extend(identity.as_ref());
                v
            }
            RepForm::Deploy { .. } => Vec::new(),
        }
    }

    /// Output before the activation.
    pub fn forward_pre(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let [_, c, _, _] = x.dims4()?;
        if c != self.in_channels {
            return shape_err(
                "repconv",
                format!("input has {c} channels, unit expects {}", self.in_channels),
            );
        }
        match &self.form {
            RepForm::Train {
                dense,
                pointwise,
                identity,
            } => {
                let mut y = tensor::add(
                    &dense.forward_linear(x, train)?,
                    &pointwise.forward_linear(x, train)?,
                )?;
                if let Some(bn) = identity {
                    y = tensor::add(&y, &bn.forward(x, train)?)?;
                }
                Ok(y)
            }
            RepForm::Deploy { weight, bias } => {
                tensor::conv2d(x, &weight.get(), Some(&bias.get()), self.stride, 1)
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        Ok(self.act.apply(&self.forward_pre(x, train)?))
    }

    /// The equivalent single 3x3 kernel and bias of the train-form branches.
    pub fn fused_kernel(&self) -> Result<(Vec<T>, Vec<T>)> {
        let RepForm::Train {
            dense,
            pointwise,
            identity,
        } = &self.form
        else {
            return Err(Error::State("RepConv is already in deploy form".into()));
        };
        let (cin, cout) = (self.in_channels, self.out_channels);

        let (s3, mut bias) = dense.bn().unwrap().fold()?;
        let mut kernel = fold_into_conv(&dense.weight().to_vec(), cout, &s3);

        let (s1, b1) = pointwise.bn().unwrap().fold()?;
        let w1 = fold_into_conv(&pointwise.weight().to_vec(), cout, &s1);
        for o in 0..cout {
            for i in 0..cin {
                let center = ((o * cin + i) * 3 + 1) * 3 + 1;
                kernel[center] = kernel[center] + w1[o * cin + i];
            }
            bias[o] = bias[o] + b1[o];
        }

        if let Some(bn) = identity {
            let (si, bi) = bn.fold()?;
            for o in 0..cout {
                let center = ((o * cin + o) * 3 + 1) * 3 + 1;
                kernel[center] = kernel[center] + si[o];
                bias[o] = bias[o] + bi[o];
            }
        }
        Ok((kernel, bias))
    }

    /// Collapses the branches into one 3x3 conv. Requires populated BN
    /// running statistics.
    pub fn fuse(&mut self) -> Result<()> {
        let (kernel, bias) = self.fused_kernel()?;
        self.form = RepForm::Deploy {
            weight: Var::param(kernel, &[self.out_channels, self.in_channels, 3, 3]),
            bias: Var::param(bias, &[self.out_channels]),
        };
        Ok(())
    }
}

impl<T: Scalar> Module<T> for RepConv<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        match &self.form {
            RepForm::Train {
                dense,
                pointwise,
                identity,
            } => {
                dense.visit(&join(prefix, "rbr_dense"), f);
                pointwise.visit(&join(prefix, "rbr_1x1"), f);
                if let Some(bn) = identity {
                    bn.visit(&join(prefix, "rbr_identity"), f);
                }
            }
            RepForm::Deploy { weight, bias } => {
                f(&join(prefix, "rbr_reparam.weight"), weight);
                f(&join(prefix, "rbr_reparam.bias"), bias);
            }
        }
    }
}

/// A chain of `depth` RepConv units; only the first changes width or stride.
pub struct RepBlock<T: Scalar> {
    pub units: Vec<RepConv<T>>,
}

impl<T: Scalar> RepBlock<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, depth: usize, stride: usize, act: Act) -> Self {
        let depth = depth.max(1);
        let units = (0..depth)
            .map(|i| {
                if i == 0 {
                    RepConv::new(init, cin, cout, stride, act)
                } else {
                    RepConv::new(init, cout, cout, 1, act)
                }
            })
            .collect();
        Self { units }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut y = x.clone();
        for u in &self.units {
            y = u.forward(&y, train)?;
        }
        Ok(y)
    }

    pub fn fuse(&mut self) -> Result<()> {
        self.units.iter_mut().try_for_each(RepConv::fuse)
    }
}

impl<T: Scalar> Module<T> for RepBlock<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, u) in self.units.iter().enumerate() {
            u.visit(&join(prefix, &format!("units.{i}")), f);
        }
    }
}

/// Two RepConvs with a residual connection around them.
pub struct RepPair<T: Scalar> {
    pub first: RepConv<T>,
    pub second: RepConv<T>,
}

impl<T: Scalar> RepPair<T> {
    fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let y = self.second.forward(&self.first.forward(x, train)?, train)?;
        tensor::add(x, &y)
    }
}

/// CSP wrapper around stacked residual Rep pairs (the large-model block).
///
/// Stand-in layout: two parallel 1x1 projections to `cout / 2`, one of them
/// through `depth` residual Rep pairs, concatenated and merged by a 1x1 conv.
pub struct CspStackRep<T: Scalar> {
    pub cv1: ConvBn<T>,
    pub cv2: ConvBn<T>,
    pub cv3: ConvBn<T>,
    pub pairs: Vec<RepPair<T>>,
}

impl<T: Scalar> CspStackRep<T> {
    pub fn new(
        init: &mut Init,
        cin: usize,
        cout: usize,
        depth: usize,
        rep_act: Act,
        conv_act: Act,
    ) -> Self {
        let hidden = (cout / 2).max(1);
        Self {
            cv1: ConvBn::new(init, cin, hidden, 1, 1, conv_act),
            cv2: ConvBn::new(init, cin, hidden, 1, 1, conv_act),
            cv3: ConvBn::new(init, 2 * hidden, cout, 1, 1, conv_act),
            pairs: (0..depth.max(1))
                .map(|_| RepPair {
                    first: RepConv::new(init, hidden, hidden, 1, rep_act),
                    second: RepConv::new(init, hidden, hidden, 1, rep_act),
                })
                .collect(),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let mut main = self.cv1.forward(x, train)?;
        for p in &self.pairs {
            main = p.forward(&main, train)?;
        }
        let short = self.cv2.forward(x, train)?;
        self.cv3
            .forward(&tensor::concat_channels(&[&main, &short])?, train)
    }

    pub fn fuse(&mut self) -> Result<()> {
        self.cv1.fuse()?;
        self.cv2.fuse()?;
        self.cv3.fuse()?;
        for p in &mut self.pairs {
            p.first.fuse()?;
            p.second.fuse()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for CspStackRep<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
        self.cv3.visit(&join(prefix, "cv3"), f);
        for (i, p) in self.pairs.iter().enumerate() {
            p.first.visit(&join(prefix, &format!("pairs.{i}.first")), f);
            p.second.visit(&join(prefix, &format!("pairs.{i}.second")), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::layers::test_support::randomize_all;
    use super::*;
    use crate::tensor::no_grad;

    fn max_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        assert_eq!(a.shape(), b.shape());
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    fn input<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
        let n = shape.iter().product();
        Tensor::new(Init::new(seed).uniform(n, -1.0, 1.0), shape).unwrap()
    }

    #[test]
    fn identity_only_unit_passes_input_through() {
        let mut init = Init::new(1);
        let unit = RepConv::<f64>::new(&mut init, 3, 3, 1, Act::Relu);
        assert!(unit.has_identity());
        unit.visit("", &mut |name, v| {
            if name.ends_with("conv.weight") {
                v.set_data(vec![0.0; v.numel()]).unwrap();
            }
        });
        for bn in unit.batch_norms() {
            bn.set_stats(vec![0.0; 3], vec![1.0 - bn.eps; 3]).unwrap();
        }
        let x = input::<f64>(&[1, 3, 5, 5], 2);
        let y = unit.forward_pre(&x, false).unwrap();
        assert!(max_abs_diff(&x, &y) < 1e-12);
    }

    #[test]
    fn identity_only_fused_kernel_is_channelwise_identity() {
        let mut init = Init::new(1);
        let unit = RepConv::<f64>::new(&mut init, 2, 2, 1, Act::Relu);
        unit.visit("", &mut |name, v| {
            if name.ends_with("conv.weight") {
                v.set_data(vec![0.0; v.numel()]).unwrap();
            }
        });
        for bn in unit.batch_norms() {
            bn.set_stats(vec![0.0; 2], vec![1.0 - bn.eps; 2]).unwrap();
        }
        let (k, b) = unit.fused_kernel().unwrap();
        for o in 0..2 {
            for i in 0..2 {
                for p in 0..9 {
                    let expected = if o == i && p == 4 { 1.0 } else { 0.0 };
                    assert!((k[(o * 2 + i) * 9 + p] - expected).abs() < 1e-12);
                }
            }
        }
        assert!(b.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_branches_reduce_to_single_fold() {
        let mut init = Init::new(5);
        let unit = RepConv::<f64>::new(&mut init, 3, 4, 1, Act::Relu);
        randomize_all(&unit, 6);
        // Kill the dense branch: zero weight and zero BN shift.
        unit.visit("", &mut |name, v| {
            if name.starts_with("rbr_dense.conv") || name == "rbr_dense.bn.bias" {
                v.set_data(vec![0.0; v.numel()]).unwrap();
            }
            if name == "rbr_dense.bn.running_mean" {
                v.set_data(vec![0.0; v.numel()]).unwrap();
            }
        });
        let (k, b) = unit.fused_kernel().unwrap();
        let RepForm::Train { pointwise, .. } = &unit.form else { unreachable!() };
        let (s1, b1) = pointwise.bn().unwrap().fold().unwrap();
        let w1 = fold_into_conv(&pointwise.weight().to_vec(), 4, &s1);
        for o in 0..4 {
            for i in 0..3 {
                for p in 0..9 {
                    let expected = if p == 4 { w1[o * 3 + i] } else { 0.0 };
                    assert!((k[(o * 3 + i) * 9 + p] - expected).abs() < 1e-12);
                }
            }
            assert!((b[o] - b1[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn stride_two_drops_identity_and_halves() {
        let mut init = Init::new(3);
        let unit = RepConv::<f32>::new(&mut init, 4, 4, 2, Act::Relu);
        assert!(!unit.has_identity());
        let y = unit.forward(&input(&[1, 4, 8, 8], 4), false).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 4]);
    }

    #[test]
    fn fused_units_match_train_form_f32() {
        let mut worst: f64 = 0.0;
        for seed in 0..100u64 {
            let mut init = Init::new(seed);
            let cin = 1 + (seed as usize % 4);
            let (cout, stride) = if seed % 3 == 0 { (cin, 1) } else { (cin + 1, 1 + seed as usize % 2) };
            let mut unit = RepConv::<f32>::new(&mut init, cin, cout, stride, Act::Relu);
            randomize_all(&unit, seed + 1000);
            let x = input::<f32>(&[2, cin, 6, 6], seed + 2000);
            let before = no_grad(|| unit.forward(&x, false)).unwrap();
            unit.fuse().unwrap();
            let after = no_grad(|| unit.forward(&x, false)).unwrap();
            worst = worst.max(max_abs_diff(&before, &after));
        }
        assert!(worst <= 1e-5, "{worst}");
    }

    #[test]
    fn fused_unit_matches_train_form_f64() {
        let mut init = Init::new(9);
        let mut unit = RepConv::<f64>::new(&mut init, 3, 3, 1, Act::Relu);
        randomize_all(&unit, 10);
        let x = input::<f64>(&[1, 3, 5, 5], 11);
        let before = unit.forward(&x, false).unwrap();
        unit.fuse().unwrap();
        assert!(unit.is_deploy());
        assert!(max_abs_diff(&before, &unit.forward(&x, false).unwrap()) <= 1e-10);
        assert!(matches!(unit.fuse(), Err(Error::State(_))));
    }

    #[test]
    fn channel_mismatch_is_an_error() {
        let mut init = Init::new(3);
        let unit = RepConv::<f32>::new(&mut init, 4, 4, 1, Act::Relu);
        assert!(unit.forward(&input(&[1, 3, 4, 4], 1), false).is_err());
    }

    #[test]
    fn rep_block_depth_one_is_a_unit() {
        let block = RepBlock::<f64>::new(&mut Init::new(4), 2, 3, 1, 2, Act::Relu);
        let unit = RepConv::<f64>::new(&mut Init::new(4), 2, 3, 2, Act::Relu);
        let x = input::<f64>(&[1, 2, 6, 6], 5);
        assert_eq!(
            block.forward(&x, false).unwrap().data(),
            unit.forward(&x, false).unwrap().data()
        );
    }

    #[test]
    fn rep_block_shape_and_fusion() {
        let mut block = RepBlock::<f32>::new(&mut Init::new(6), 3, 5, 3, 2, Act::Relu);
        randomize_all(&block, 7);
        let x = input::<f32>(&[2, 3, 8, 8], 8);
        let before = block.forward(&x, false).unwrap();
        assert_eq!(before.shape(), &[2, 5, 4, 4]);
        block.fuse().unwrap();
        assert!(max_abs_diff(&before, &block.forward(&x, false).unwrap()) <= 1e-5);
    }

    #[test]
    fn csp_stackrep_shapes_and_fusion() {
        let mut block = CspStackRep::<f32>::new(&mut Init::new(1), 6, 8, 2, Act::Relu, Act::Silu);
        randomize_all(&block, 2);
        let x = input::<f32>(&[2, 6, 4, 4], 3);
        let before = block.forward(&x, false).unwrap();
        assert_eq!(before.shape(), &[2, 8, 4, 4]);
        assert_eq!(block.cv1.out_channels, 4);
        block.fuse().unwrap();
        assert!(max_abs_diff(&before, &block.forward(&x, false).unwrap()) <= 1e-5);
    }

    #[test]
    fn csp_stackrep_zero_stack_is_residual_shortcut() {
        let block = CspStackRep::<f64>::new(&mut Init::new(1), 4, 6, 1, Act::Relu, Act::Silu);
        block.visit("", &mut |name, v| {
            if name.starts_with("pairs.") && v.is_learnable() {
                v.set_data(vec![0.0; v.numel()]).unwrap();
            }
        });
        let x = input::<f64>(&[1, 4, 3, 3], 2);
        let y = block.forward(&x, false).unwrap();
        let main = block.cv1.forward(&x, false).unwrap();
        let short = block.cv2.forward(&x, false).unwrap();
        let expected = block
            .cv3
            .forward(&tensor::concat_channels(&[&main, &short]).unwrap(), false)
            .unwrap();
        assert!(max_abs_diff(&y, &expected) < 1e-12);
    }
}
