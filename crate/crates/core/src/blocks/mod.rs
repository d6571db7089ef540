//! Network building blocks: BN-folded convolutions, re-parameterizable Rep
//! units and stacks, the SPPF variants and the BiC fusion module.

mod bic;
mod layers;
mod rep;
mod sppf;

pub use bic::BiC;
pub use layers::{join, Act, BatchNorm, Conv, ConvBn, Init, Module, Var, BN_EPS};
pub use rep::{CspStackRep, RepBlock, RepConv, RepPair};
pub use sppf::{SimCspSppf, SimSppf, Spp, SppfVariant, POOL_KERNEL};

