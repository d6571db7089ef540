//! Spatial pyramid pooling blocks.
//!
//! Both variants use a cascade of three stride-1 max pools with kernel 5,
//! which is equivalent to parallel pools with kernels 5, 9 and 13.

use serde::{Deserialize, Serialize};

use super::layers::{join, Act, ConvBn, Init, Module, Var};
use crate::error::Result;
use crate::tensor::{self, Scalar, Tensor};

pub const POOL_KERNEL: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SppfVariant {
    SimSppf,
    SimCspSppf,
}

impl std::str::FromStr for SppfVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "simsppf" => Ok(Self::SimSppf),
            "simcspsppf" => Ok(Self::SimCspSppf),
            other => Err(format!("unknown SPP variant {other:?} (simsppf | simcspsppf)")),
        }
    }
}

fn pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    tensor::max_pool2d(x, POOL_KERNEL, 1, POOL_KERNEL / 2)
}

/// `[x, m(x), m(m(x)), m(m(m(x)))]` concatenated along channels.
fn pool_cascade<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let y1 = pool(x)?;
    let y2 = pool(&y1)?;
    let y3 = pool(&y2)?;
    tensor::concat_channels(&[x, &y1, &y2, &y3])
}

pub struct SimSppf<T: Scalar> {
    pub cv1: ConvBn<T>,
    pub cv2: ConvBn<T>,
}

impl<T: Scalar> SimSppf<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, act: Act) -> Self {
        let hidden = (cin / 2).max(1);
        Self {
            cv1: ConvBn::new(init, cin, hidden, 1, 1, act),
            cv2: ConvBn::new(init, 4 * hidden, cout, 1, 1, act),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let h = self.cv1.forward(x, train)?;
        self.cv2.forward(&pool_cascade(&h)?, train)
    }

    pub fn fuse(&mut self) -> Result<()> {
        self.cv1.fuse()?;
        self.cv2.fuse()
    }
}

impl<T: Scalar> Module<T> for SimSppf<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.cv1.visit(&join(prefix, "cv1"), f);
        self.cv2.visit(&join(prefix, "cv2"), f);
    }
}

/// CSP-wrapped SPPF with hidden width `out / 2`.
pub struct SimCspSppf<T: Scalar> {
    pub cv1: ConvBn<T>,
    pub cv2: ConvBn<T>,
    pub cv3: ConvBn<T>,
    pub cv4: ConvBn<T>,
    pub cv5: ConvBn<T>,
    pub cv6: ConvBn<T>,
    pub cv7: ConvBn<T>,
}

impl<T: Scalar> SimCspSppf<T> {
    pub fn new(init: &mut Init, cin: usize, cout: usize, act: Act) -> Self {
        if cout % 2 == 1 {
            log::warn!("SimCSPSPPF: odd output width {cout}, hidden width rounded down to {}", cout / 2);
        }
        let h = (cout / 2).max(1);
        Self {
            cv1: ConvBn::new(init, cin, h, 1, 1, act),
            cv2: ConvBn::new(init, cin, h, 1, 1, act),
            cv3: ConvBn::new(init, h, h, 3, 1, act),
            cv4: ConvBn::new(init, h, h, 1, 1, act),
            cv5: ConvBn::new(init, 4 * h, h, 1, 1, act),
            cv6: ConvBn::new(init, h, h, 3, 1, act),
            cv7: ConvBn::new(init, 2 * h, cout, 1, 1, act),
        }
    }

    pub fn hidden(&self) -> usize {
        self.cv1.out_channels
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        let x1 = self
            .cv4
            .forward(&self.cv3.forward(&self.cv1.forward(x, train)?, train)?, train)?;
        let shortcut = self.cv2.forward(x, train)?;
        let pooled = self.cv5.forward(&pool_cascade(&x1)?, train)?;
        let main = self.cv6.forward(&pooled, train)?;
        self.cv7
            .forward(&tensor::concat_channels(&[&shortcut, &main])?, train)
    }

    pub fn fuse(&mut self) -> Result<()> {
        for cv in [
            &mut self.cv1,
            &mut self.cv2,
            &mut self.cv3,
            &mut self.cv4,
            &mut self.cv5,
            &mut self.cv6,
            &mut self.cv7,
        ] {
            cv.fuse()?;
        }
        Ok(())
    }
}

impl<T: Scalar> Module<T> for SimCspSppf<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (name, cv) in [
            ("cv1", &self.cv1),
            ("cv2", &self.cv2),
            ("cv3", &self.cv3),
            ("cv4", &self.cv4),
            ("cv5", &self.cv5),
            ("cv6", &self.cv6),
            ("cv7", &self.cv7),
        ] {
            cv.visit(&join(prefix, name), f);
        }
    }
}

/// Either SPP variant behind one interface.
pub enum Spp<T: Scalar> {
    Sim(SimSppf<T>),
    Csp(SimCspSppf<T>),
}

impl<T: Scalar> Spp<T> {
    pub fn new(variant: SppfVariant, init: &mut Init, cin: usize, cout: usize, act: Act) -> Self {
        match variant {
            SppfVariant::SimSppf => Spp::Sim(SimSppf::new(init, cin, cout, act)),
            SppfVariant::SimCspSppf => Spp::Csp(SimCspSppf::new(init, cin, cout, act)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, train: bool) -> Result<Tensor<T>> {
        match self {
            Spp::Sim(b) => b.forward(x, train),
            Spp::Csp(b) => b.forward(x, train),
        }
    }

    pub fn fuse(&mut self) -> Result<()> {
        match self {
            Spp::Sim(b) => b.fuse(),
            Spp::Csp(b) => b.fuse(),
        }
    }
}

impl<T: Scalar> Module<T> for Spp<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        match self {
            Spp::Sim(b) => b.visit(prefix, f),
            Spp::Csp(b) => b.visit(prefix, f),
        }
    }
}
