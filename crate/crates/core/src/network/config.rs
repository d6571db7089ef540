use serde::{Deserialize, Serialize};

use crate::blocks::{Act, SppfVariant};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockFamily {
    RepBlock,
    CspStackRep,
}

/// Which prediction branches the head carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadBranches {
    pub anchor_free: bool,
    /// Anchor-based classification + regression branches, train-only.
    pub anchor_based_aux: bool,
    /// Heavy DFL regression branch used as a train-only auxiliary next to a
    /// light direct ("naive") regression branch that is kept for inference.
    pub enhanced_dfl_aux: bool,
}

impl Default for HeadBranches {
    fn default() -> Self {
        Self {
            anchor_free: true,
            anchor_based_aux: true,
            enhanced_dfl_aux: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width_multiple: f64,
    pub depth_multiple: f64,
    pub num_classes: usize,
    /// Adds a stride-64 backbone stage and neck level.
    pub use_p6: bool,
    /// Highest DFL bin index; the distribution has `reg_max + 1` bins.
    pub reg_max: usize,
    pub spp_variant: SppfVariant,
    pub use_bic: bool,
    pub block_family: BlockFamily,
    pub head_branches: HeadBranches,
    /// Activation of Rep units and SPP blocks.
    pub rep_act: Act,
    /// Activation of plain conv+BN layers.
    pub conv_act: Act,
    /// Side of the square anchor prior (and ATSS anchor box) in strides.
    pub anchor_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::nano_desk(2)
    }
}

/// Channel bases before `width_multiple`: stem, C2, C3, C4, C5, C6.
const BACKBONE_CHANNELS: [usize; 6] = [64, 128, 256, 512, 1024, 1024];
/// Block repeats before `depth_multiple` for C2..C6.
const BACKBONE_DEPTHS: [usize; 5] = [6, 12, 18, 6, 6];
const NECK_DEPTH: usize = 12;
/// Neck width of pyramid level 3 before `width_multiple`; doubles per level.
const NECK_BASE: usize = 128;

impl ModelConfig {
    /// Desk-scale nano model: backbone widths 16/32/64/128 for C2..C5 and
    /// a single block per stage.
    pub fn nano_desk(num_classes: usize) -> Self {
        Self {
            width_multiple: 0.125,
            depth_multiple: 0.05,
            num_classes,
            use_p6: false,
            reg_max: 8,
            spp_variant: SppfVariant::SimCspSppf,
            use_bic: true,
            block_family: BlockFamily::RepBlock,
            head_branches: HeadBranches::default(),
            rep_act: Act::Relu,
            conv_act: Act::Silu,
            anchor_scale: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.width_multiple > 0.0) || !(self.depth_multiple > 0.0) {
            return bad("width_multiple and depth_multiple must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1".into());
        }
        if self.reg_max < 1 {
            return bad(format!("reg_max must be >= 1, got {}", self.reg_max));
        }
        if !self.head_branches.anchor_free {
            return bad("the anchor-free branch must be enabled".into());
        }
        if !(self.anchor_scale > 0.0) {
            return bad("anchor_scale must be positive".into());
        }
        Ok(())
    }

    /// Head strides, strictly increasing powers of two.
    pub fn strides(&self) -> Vec<usize> {
        if self.use_p6 {
            vec![8, 16, 32, 64]
        } else {
            vec![8, 16, 32]
        }
    }

    pub fn max_stride(&self) -> usize {
        *self.strides().last().unwrap()
    }

    /// Index of the topmost pyramid level (5, or 6 with `use_p6`).
    pub fn top_level(&self) -> usize {
        if self.use_p6 {
            6
        } else {
            5
        }
    }

    pub fn width(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiple).round() as usize).max(4)
    }

    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_multiple).round() as usize).max(1)
    }

    pub fn stem_channels(&self) -> usize {
        self.width(BACKBONE_CHANNELS[0])
    }

    /// Width of backbone level `C{level}`, `level` in 2..=6.
    pub fn backbone_channels(&self, level: usize) -> usize {
        self.width(BACKBONE_CHANNELS[level - 1])
    }

    pub fn backbone_depth(&self, level: usize) -> usize {
        self.depth(BACKBONE_DEPTHS[level - 2])
    }

    pub fn neck_depth(&self) -> usize {
        self.depth(NECK_DEPTH)
    }

    /// Neck width at pyramid level `level` (>= 2).
    pub fn neck_channels(&self, level: usize) -> usize {
        self.width(NECK_BASE << (level - 3))
    }

    pub fn dfl_bins(&self) -> usize {
        self.reg_max + 1
    }

    /// Whether the retained regression branch is the direct 4-distance one.
    pub fn naive_regression(&self) -> bool {
        self.head_branches.enhanced_dfl_aux
    }

    pub fn has_auxiliaries(&self) -> bool {
        self.head_branches.anchor_based_aux || self.head_branches.enhanced_dfl_aux
    }
}
