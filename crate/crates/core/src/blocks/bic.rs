//! Bi-directional concatenation: fuses the top-down feature `P_{i+1}`, the
//! lateral backbone feature `C_i` and the lower backbone feature `C_{i-1}`.

use super::layers::{join, Act, ConvBn, Init, Module, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{self, Scalar, Tensor};

pub struct BiC<T: Scalar> {
    /// 1x1 projection of `C_i`.
    pub cv_cur: ConvBn<T>,
    /// 1x1 projection then 3x3 stride-2 downsample of `C_{i-1}`; absent in
    /// the two-input (plain PAN) form.
    pub prev: Option<(ConvBn<T>, ConvBn<T>)>,
    /// 1x1 fusion over `[up(P_{i+1}), proj(C_i), down(proj(C_{i-1}))]`.
    pub cv_fuse: ConvBn<T>,
    pub out_channels: usize,
}

impl<T: Scalar> BiC<T> {
    /// `prev_channels = None` builds the two-input concat fusion.
    pub fn new(
        init: &mut Init,
        prev_channels: Option<usize>,
        cur_channels: usize,
        higher_channels: usize,
        out: usize,
        act: Act,
    ) -> Self {
        let cv_cur = ConvBn::new(init, cur_channels, out, 1, 1, act);
        let prev = prev_channels.map(|c| {
            (
                ConvBn::new(init, c, out, 1, 1, act),
                ConvBn::new(init, out, out, 3, 2, act),
            )
        });
        let fuse_in = higher_channels + out + if prev.is_some() { out } else { 0 };
        Self {
            cv_cur,
            prev,
            cv_fuse: ConvBn::new(init, fuse_in, out, 1, 1, act),
            out_channels: out,
        }
    }

    pub fn is_bidirectional(&self) -> bool {
        self.prev.is_some()
    }

    pub fn forward(
        &self,
        c_prev: Option<&Tensor<T>>,
        c_cur: &Tensor<T>,
        p_higher: &Tensor<T>,
        train: bool,
    ) -> Result<Tensor<T>> {
        let [_, _, h, w] = c_cur.dims4()?;
        let up = tensor::upsample_nearest2x(p_higher)?;
        let [_, _, uh, uw] = up.dims4()?;
        if (uh, uw) != (h, w) {
            return shape_err(
                "bic",
                format!("upsampled higher level is {uh}x{uw}, current level is {h}x{w}"),
            );
        }
        let cur = self.cv_cur.forward(c_cur, train)?;
        match (&self.prev, c_prev) {
            (Some((proj, down)), Some(c_prev)) => {
                let low = down.forward(&proj.forward(c_prev, train)?, train)?;
                let [_, _, lh, lw] = low.dims4()?;
                if (lh, lw) != (h, w) {
                    return shape_err(
                        "bic",
                        format!("downsampled lower level is {lh}x{lw}, current level is {h}x{w}"),
                    );
                }
                self.cv_fuse
                    .forward(&tensor::concat_channels(&[&up, &cur, &low])?, train)
            }
            (Some(_), None) => shape_err("bic", "lower-level input C_{i-1} is required"),
            (None, _) => self
                .cv_fuse
                .forward(&tensor::concat_channels(&[&up, &cur])?, train),
        }
    }

    pub fn fuse(&mut self) -> Result<()> {
        self.cv_cur.fuse()?;
        if let Some((a, b)) = &mut self.prev {
            a.fuse()?;
            b.fuse()?;
        }
        self.cv_fuse.fuse()
    }
}

impl<T: Scalar> Module<T> for BiC<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.cv_cur.visit(&join(prefix, "cv_cur"), f);
        if let Some((proj, down)) = &self.prev {
            proj.visit(&join(prefix, "cv_prev"), f);
            down.visit(&join(prefix, "cv_down"), f);
        }
        self.cv_fuse.visit(&join(prefix, "cv_fuse"), f);
    }
}
