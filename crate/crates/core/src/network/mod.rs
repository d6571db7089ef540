//! Backbone, RepBi-PAN neck and decoupled head assembled from [`crate::blocks`].

mod config;
mod head;

use std::collections::BTreeMap;

pub use config::{BlockFamily, HeadBranches, ModelConfig};
pub use head::{Head, HeadLevel, HeadMode, HeadOutputs, LevelOutputs, PRIOR_PROB};

use crate::blocks::{join, BiC, ConvBn, CspStackRep, Init, Module, RepBlock, RepConv, Spp, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Scalar, Tensor};

/// A RepBlock or CSPStackRep, per `ModelConfig::block_family`.
pub enum Block<T: Scalar> {
    Rep(RepBlock<T>),
    Csp(CspStackRep<T>),
}

impl<T: Scalar> Block<T> {
    fn new(cfg: &ModelConfig, init: &mut Init, cin: usize, cout: usize, depth: usize) -> Self {
        match cfg.block_family {
            BlockFamily::RepBlock => Block::Rep(RepBlock::new(init, cin, cout, depth, 1, cfg.rep_act)),
            BlockFamily::CspStackRep => {
                Block::Csp(CspStackRep::new(init, cin, cout, depth, cfg.rep_act, cfg.conv_act))
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Block::Rep(b) => b.forward(x, train),
            Block::Csp(b) => b.forward(x, train),
        }
    }

    fn fuse(&mut self) -> Result<()> {
        match self {
            Block::Rep(b) => b.fuse(),
            Block::Csp(b) => b.fuse(),
        }
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        match self {
            Block::Rep(b) => b.visit(prefix, f),
            Block::Csp(b) => b.visit(prefix, f),
        }
    }
}

/// Named multi-scale feature maps: `C2..C6` from the backbone, `P3..` from
/// the top-down pathway and `N4..` from the bottom-up pathway.
#[derive(Clone, Default)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.levels.get(name).ok_or_else(|| Error::Shape {
            op: "feature_pyramid",
            detail: format!("level {name} is missing"),
        })
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.levels.insert(name.into(), t);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.levels.contains_key(name)
    }
}

struct Stage<T: Scalar> {
    down: RepConv<T>,
    block: Block<T>,
}

pub struct Backbone<T: Scalar> {
    stem: RepConv<T>,
    /// `stages[k]` produces `C{k + 2}`.
    stages: Vec<Stage<T>>,
    spp: Spp<T>,
}

impl<T: Scalar> Backbone<T> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let stem_ch = cfg.stem_channels();
        let stem = RepConv::new(init, 3, stem_ch, 2, cfg.rep_act);
        let mut prev = stem_ch;
        let stages = (2..=cfg.top_level())
            .map(|level| {
                let c = cfg.backbone_channels(level);
                let stage = Stage {
                    down: RepConv::new(init, prev, c, 2, cfg.rep_act),
                    block: Block::new(cfg, init, c, c, cfg.backbone_depth(level)),
                };
                prev = c;
                stage
            })
            .collect();
        let spp = Spp::new(cfg.spp_variant, init, prev, prev, cfg.rep_act);
        Self { stem, stages, spp }
    }

    fn fuse(&mut self) -> Result<()> {
        self.stem.fuse()?;
        for s in &mut self.stages {
            s.down.fuse()?;
            s.block.fuse()?;
        }
        self.spp.fuse()
    }
}

impl<T: Scalar> Module<T> for Backbone<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.stem.visit(&join(prefix, "stem"), f);
        for (k, s) in self.stages.iter().enumerate() {
            let p = join(prefix, &format!("stage{}", k + 1));
            s.down.visit(&join(&p, "down"), f);
            s.block.visit(&join(&p, "block"), f);
        }
        self.spp.visit(&join(prefix, "spp"), f);
    }
}

/// Top-down pathway (reduce, BiC, block) followed by the bottom-up pathway
/// (stride-2 conv, concat with the lateral reduced map, block).
pub struct Neck<T: Scalar> {
    /// `reduce[k]` feeds top-down step `k` (level `top - 1 - k`).
    reduce: Vec<ConvBn<T>>,
    fusion: Vec<BiC<T>>,
    td_blocks: Vec<Block<T>>,
    /// `down[m]` and `bu_blocks[m]` produce `N{4 + m}`.
    down: Vec<ConvBn<T>>,
    bu_blocks: Vec<Block<T>>,
}

impl<T: Scalar> Neck<T> {
    fn new(cfg: &ModelConfig, init: &mut Init) -> Self {
        let top = cfg.top_level();
        let w = |l: usize| cfg.neck_channels(l);
        let depth = cfg.neck_depth();
        let mut reduce = Vec::new();
        let mut fusion = Vec::new();
        let mut td_blocks = Vec::new();
        let mut higher_in = cfg.backbone_channels(top);
        for level in (3..top).rev() {
            reduce.push(ConvBn::new(init, higher_in, w(level), 1, 1, cfg.conv_act));
            let prev = cfg.use_bic.then(|| cfg.backbone_channels(level - 1));
            fusion.push(BiC::new(
                init,
                prev,
                cfg.backbone_channels(level),
                w(level),
                w(level),
                cfg.conv_act,
            ));
            td_blocks.push(Block::new(cfg, init, w(level), w(level), depth));
            higher_in = w(level);
        }
        let mut down = Vec::new();
        let mut bu_blocks = Vec::new();
        for level in 4..=top {
            down.push(ConvBn::new(init, w(level - 1), w(level - 1), 3, 2, cfg.conv_act));
            bu_blocks.push(Block::new(cfg, init, 2 * w(level - 1), w(level), depth));
        }
        Self {
            reduce,
            fusion,
            td_blocks,
            down,
            bu_blocks,
        }
    }

    fn fuse(&mut self) -> Result<()> {
        for m in &mut self.reduce {
            m.fuse()?;
        }
        for m in &mut self.fusion {
            m.fuse()?;
        }
        for m in self.td_blocks.iter_mut().chain(self.bu_blocks.iter_mut()) {
            m.fuse()?;
        }
        for m in &mut self.down {
            m.fuse()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for Neck<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for k in 0..self.reduce.len() {
            self.reduce[k].visit(&join(prefix, &format!("reduce{k}")), f);
            self.fusion[k].visit(&join(prefix, &format!("fuse{k}")), f);
            self.td_blocks[k].visit(&join(prefix, &format!("td{k}")), f);
        }
        for m in 0..self.down.len() {
            self.down[m].visit(&join(prefix, &format!("down{m}")), f);
            self.bu_blocks[m].visit(&join(prefix, &format!("bu{m}")), f);
        }
    }
}

/// Whether the model carries training-only structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Form {
    /// Rep units collapsed and BN folded.
    pub fused: bool,
    /// Auxiliary head branches removed.
    pub stripped: bool,
}

impl Form {
    pub fn is_deploy(&self) -> bool {
        self.fused && self.stripped
    }
}

pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub backbone: Backbone<T>,
    pub neck: Neck<T>,
    pub head: Head<T>,
    form: Form,
}

pub fn build_model<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    Model::new(config, seed)
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction: He-uniform convs, neutral BN.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init::new(seed);
        let backbone = Backbone::new(config, &mut init);
        let neck = Neck::new(config, &mut init);
        let head = Head::new(config, &mut init);
        Ok(Self {
            config: config.clone(),
            backbone,
            neck,
            head,
            form: Form {
                fused: false,
                stripped: false,
            },
        })
    }

    pub fn form(&self) -> Form {
        self.form
    }

    pub fn strides(&self) -> Vec<usize> {
        self.config.strides()
    }

    pub fn backbone_forward(&self, image: &Tensor<T>, train: bool) -> Result<FeaturePyramid<T>> {
        let [_, c, h, w] = image.dims4()?;
        let ms = self.config.max_stride();
        if c != 3 || h % ms != 0 || w % ms != 0 {
            return Err(Error::Shape {
                op: "backbone",
                detail: format!("image is {c}x{h}x{w}; need 3 channels and extents divisible by {ms}"),
            });
        }
        let bb = &self.backbone;
        let mut x = bb.stem.forward(image, train)?;
        let mut pyr = FeaturePyramid::default();
        let last = bb.stages.len() - 1;
        for (k, s) in bb.stages.iter().enumerate() {
            x = s.block.forward(&s.down.forward(&x, train)?, train)?;
            if k == last {
                x = bb.spp.forward(&x, train)?;
            }
            pyr.insert(format!("C{}", k + 2), x.clone());
        }
        Ok(pyr)
    }

    /// Adds `P3..P_top` and `N4..N_top` to a pyramid holding the C levels.
    pub fn neck_forward(&self, pyr: &mut FeaturePyramid<T>, train: bool) -> Result<()> {
        let top = self.config.top_level();
        let neck = &self.neck;
        let mut higher = pyr.get(&format!("C{top}"))?.clone();
        let mut laterals = Vec::new();
        for (k, level) in (3..top).rev().enumerate() {
            let x = neck.reduce[k].forward(&higher, train)?;
            // The reduced map feeding level `level` is the lateral input of
            // N{level + 1}; the topmost one is exposed as P{top}.
            if k == 0 {
                pyr.insert(format!("P{top}"), x.clone());
            }
            laterals.push(x.clone());
            let c_prev = if self.config.use_bic {
                let name = format!("C{}", level - 1);
                if !pyr.contains(&name) {
                    return Err(Error::Shape {
                        op: "neck",
                        detail: format!("BiC fusion at P{level} needs {name}, which is missing"),
                    });
                }
                Some(pyr.get(&name)?.clone())
            } else {
                None
            };
            let cur = pyr.get(&format!("C{level}"))?.clone();
            let fused = neck.fusion[k].forward(c_prev.as_ref(), &cur, &x, train)?;
            higher = neck.td_blocks[k].forward(&fused, train)?;
            pyr.insert(format!("P{level}"), higher.clone());
        }
        let mut prev = higher;
        for (m, level) in (4..=top).enumerate() {
            let lateral = &laterals[top - level];
            let d = neck.down[m].forward(&prev, train)?;
            prev = neck.bu_blocks[m].forward(&tensor::concat_channels(&[&d, lateral])?, train)?;
            pyr.insert(format!("N{level}"), prev.clone());
        }
        Ok(())
    }

    /// Names of the head-facing levels, finest first.
    pub fn head_level_names(&self) -> Vec<String> {
        let mut v = vec!["P3".to_string()];
        v.extend((4..=self.config.top_level()).map(|l| format!("N{l}")));
        v
    }

    pub fn head_forward(
        &self,
        pyr: &FeaturePyramid<T>,
        train: bool,
        mode: HeadMode,
    ) -> Result<HeadOutputs<T>> {
        let feats = self
            .head_level_names()
            .iter()
            .map(|n| pyr.get(n).cloned())
            .collect::<Result<Vec<_>>>()?;
        self.head.forward(&feats, &self.strides(), train, mode)
    }

    pub fn pyramid(&self, image: &Tensor<T>, train: bool) -> Result<FeaturePyramid<T>> {
        let mut pyr = self.backbone_forward(image, train)?;
        self.neck_forward(&mut pyr, train)?;
        Ok(pyr)
    }

    /// `train` selects batch statistics in BN; `mode` selects head branches.
    pub fn forward(&self, image: &Tensor<T>, train: bool, mode: HeadMode) -> Result<HeadOutputs<T>> {
        let pyr = self.pyramid(image, train)?;
        self.head_forward(&pyr, train, mode)
    }

    /// Collapses Rep units and folds every BN. Requires calibrated BN stats.
    pub fn fuse(&mut self) -> Result<()> {
        if self.form.fused {
            return Err(Error::State("model is already fused".into()));
        }
        self.backbone.fuse()?;
        self.neck.fuse()?;
        self.head.fuse()?;
        self.form.fused = true;
        Ok(())
    }

    /// Removes training-only head branches. Returns whether anything was
    /// removed; a model without auxiliaries is left as is with a warning.
    pub fn strip_auxiliary(&mut self) -> bool {
        if !self.config.has_auxiliaries() {
            log::warn!("strip_auxiliary: the model config has no auxiliary branches");
            self.form.stripped = true;
            return false;
        }
        let removed = self.head.strip();
        self.form.stripped = true;
        removed
    }

    /// Marks every BN layer as calibrated without touching its statistics,
    /// so that a structurally fused skeleton can be built for loading.
    pub(crate) fn mark_calibrated(&self) {
        self.visit("", &mut |name, v| {
            if name.ends_with("num_batches_tracked") {
                v.set_data(vec![T::one()]).expect("tracked counter");
            }
        });
    }

    /// A model of the given form whose values are meant to be overwritten.
    pub fn skeleton(config: &ModelConfig, form: Form) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        if form.stripped {
            m.head.strip();
            m.form.stripped = true;
        }
        if form.fused {
            m.mark_calibrated();
            m.fuse()?;
        }
        Ok(m)
    }

    /// Learnable parameters with their names, in visit order.
    pub fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut v = Vec::new();
        self.visit("", &mut |name, var| {
            if var.is_learnable() {
                v.push((name.to_string(), var.get()))
            }
        });
        v
    }

    pub fn zero_grad(&self) {
        self.visit("", &mut |_, v| {
            if v.is_learnable() {
                v.get().zero_grad()
            }
        });
    }
}

impl<T: Scalar> Module<T> for Model<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.neck.visit(&join(prefix, "neck"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}
