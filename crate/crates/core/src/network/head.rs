use super::ModelConfig;
use crate::blocks::{join, Conv, ConvBn, Init, Module, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Foreground prior used to initialize classification biases.
pub const PRIOR_PROB: f64 = 0.01;

/// Scale applied to He-uniform weights of the 1x1 prediction convs, so that
/// initial predictions sit near their bias priors.
const PRED_WEIGHT_SCALE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMode {
    /// Every branch the model still carries.
    Train,
    /// Only the branches retained for inference.
    Deploy,
}

/// One head level. The 3x3 stem is shared; every branch is a parallel 1x1
/// conv on the stem output.
pub struct HeadLevel<T: Scalar> {
    pub stem: ConvBn<T>,
    pub af_cls: Conv<T>,
    pub af_reg_dist: Option<Conv<T>>,
    pub af_reg_naive: Option<Conv<T>>,
    pub ab_cls: Option<Conv<T>>,
    pub ab_reg: Option<Conv<T>>,
}

fn pred_conv<T: Scalar>(init: &mut Init, cin: usize, cout: usize, bias: f64) -> Conv<T> {
    let c = Conv::new(init, cin, cout, 1, bias);
    let w: Vec<T> = c
        .weight
        .to_vec()
        .into_iter()
        .map(|v| v * T::lit(PRED_WEIGHT_SCALE))
        .collect();
    c.weight.set_data(w).expect("same length");
    c
}

impl<T: Scalar> HeadLevel<T> {
    fn new(cfg: &ModelConfig, init: &mut Init, channels: usize) -> Self {
        let k = cfg.num_classes;
        let cls_bias = -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln();
        let br = cfg.head_branches;
        let stem = ConvBn::new(init, channels, channels, 3, 1, cfg.conv_act);
        let af_cls = pred_conv(init, channels, k, cls_bias);
        let af_reg_dist = Some(pred_conv(init, channels, 4 * cfg.dfl_bins(), 1.0));
        let af_reg_naive = br
            .enhanced_dfl_aux
            .then(|| pred_conv(init, channels, 4, 1.0));
        let (ab_cls, ab_reg) = if br.anchor_based_aux {
            (
                Some(pred_conv(init, channels, k, cls_bias)),
                Some(pred_conv(init, channels, 4, 0.0)),
            )
        } else {
            (None, None)
        };
        Self {
            stem,
            af_cls,
            af_reg_dist,
            af_reg_naive,
            ab_cls,
            ab_reg,
        }
    }
}

impl<T: Scalar> Module<T> for HeadLevel<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        self.af_cls.visit(&join(prefix, "af_cls"), f);
        let optional = [
            ("af_reg_dist", &self.af_reg_dist),
            ("af_reg_naive", &self.af_reg_naive),
            ("ab_cls", &self.ab_cls),
            ("ab_reg", &self.ab_reg),
        ];
        for (name, conv) in optional {
            if let Some(c) = conv {
                c.visit(&join(prefix, name), f);
            }
        }
    }
}

/// Raw per-level predictions, NCHW.
#[derive(Clone)]
pub struct LevelOutputs<T: Scalar> {
    pub stride: usize,
    pub af_cls: Tensor<T>,
    pub af_reg_dist: Option<Tensor<T>>,
    pub af_reg_naive: Option<Tensor<T>>,
    pub ab_cls: Option<Tensor<T>>,
    pub ab_reg: Option<Tensor<T>>,
}

#[derive(Clone)]
pub struct HeadOutputs<T: Scalar> {
    pub levels: Vec<LevelOutputs<T>>,
}

impl<T: Scalar> HeadOutputs<T> {
    pub fn strides(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.stride).collect()
    }

    /// `(height, width)` of every level.
    pub fn grid_sizes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| (l.af_cls.shape()[2], l.af_cls.shape()[3]))
            .collect()
    }

    pub fn batch(&self) -> usize {
        self.levels[0].af_cls.shape()[0]
    }
}

pub struct Head<T: Scalar> {
    pub levels: Vec<HeadLevel<T>>,
    /// Set when the retained regression branch is the direct one.
    naive_regression: bool,
}

impl<T: Scalar> Head<T> {
    pub(super) fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let levels = (3..=cfg.top_level())
            .map(|l| HeadLevel::new(cfg, init, cfg.neck_channels(l)))
            .collect();
        Self {
            levels,
            naive_regression: cfg.naive_regression(),
        }
    }

    pub fn forward(
        &self,
        feats: &[Tensor<T>],
        strides: &[usize],
        train: bool,
        mode: HeadMode,
    ) -> Result<HeadOutputs<T>> {
        if feats.len() != self.levels.len() {
            return shape_err(
                "head",
                format!("{} feature levels for {} head levels", feats.len(), self.levels.len()),
            );
        }
        let deploy = mode == HeadMode::Deploy;
        let mut out = Vec::with_capacity(feats.len());
        for ((lvl, x), &stride) in self.levels.iter().zip(feats).zip(strides) {
            let s = lvl.stem.forward(x, train)?;
            let run = |c: &Option<Conv<T>>, keep: bool| -> Result<Option<Tensor<T>>> {
                match c {
                    Some(c) if keep => c.forward(&s).map(Some),
                    _ => Ok(None),
                }
            };
            out.push(LevelOutputs {
                stride,
                af_cls: lvl.af_cls.forward(&s)?,
                af_reg_dist: run(&lvl.af_reg_dist, !deploy || !self.naive_regression)?,
                af_reg_naive: run(&lvl.af_reg_naive, true)?,
                ab_cls: run(&lvl.ab_cls, !deploy)?,
                ab_reg: run(&lvl.ab_reg, !deploy)?,
            });
        }
        Ok(HeadOutputs { levels: out })
    }

    pub(super) fn fuse(&mut self) -> Result<()> {
        self.levels.iter_mut().try_for_each(|l| l.stem.fuse())
    }

    /// Drops auxiliary branches; returns whether anything was removed.
    pub(super) fn strip(&mut self) -> bool {
        let mut removed = false;
        for l in &mut self.levels {
            removed |= l.ab_cls.take().is_some();
            removed |= l.ab_reg.take().is_some();
            if self.naive_regression {
                removed |= l.af_reg_dist.take().is_some();
            }
        }
        removed
    }

    pub fn naive_regression(&self) -> bool {
        self.naive_regression
    }
}

impl<T: Scalar> Module<T> for Head<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, l) in self.levels.iter().enumerate() {
            l.visit(&join(prefix, &format!("level{i}")), f);
        }
    }
}
