use std::sync::Arc;

use super::{gemm, Mat, Scalar, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_hw(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let hw_out = g.out_hw();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii as usize >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj as usize >= g.w {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &Geometry, dx: &mut [T]) {
    let hw_out = g.out_hw();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii as usize >= g.h {
                        continue;
                    }
                    let line = &src[oi * g.wo..(oi + 1) * g.wo];
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && (jj as usize) < g.w {
                            dst[jj as usize] = dst[jj as usize] + *v;
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `input [N, Cin, H, W]` with `weight [Cout, Cin, kh, kw]`.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, cin, h, w] = input.dims4()?;
    let [cout, wcin, kh, kw] = weight.dims4()?;
    if stride == 0 {
        return shape_err("conv2d", "stride must be positive");
    }
    if wcin != cin {
        return shape_err(
            "conv2d",
            format!("input has {cin} channels but weight expects Cin = {wcin}"),
        );
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return shape_err(
            "conv2d",
            format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ),
        );
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return shape_err(
                "conv2d",
                format!("bias shape {:?}, expected [{cout}]", b.shape()),
            );
        }
    }
    let g = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad: padding,
        ho: (h + 2 * padding - kh) / stride + 1,
        wo: (w + 2 * padding - kw) / stride + 1,
    };
    let k = g.col_rows();
    let hw_out = g.out_hw();
    let in_plane = cin * h * w;
    let out_plane = cout * hw_out;
    let x = input.data();
    let wt = weight.data();

    let keep_cols = super::grad_enabled() && weight.requires_grad() && !g.is_pointwise();
    let mut saved_cols: Vec<Vec<T>> = Vec::new();
    let mut out = vec![T::zero(); n * out_plane];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * hw_out }];
    for b in 0..n {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let ob = &mut out[b * out_plane..(b + 1) * out_plane];
        let colmat = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, &g, &mut cols);
            &cols[..]
        };
        gemm(
            Mat::new(wt, cout, k),
            Mat::new(colmat, k, hw_out),
            T::zero(),
            ob,
        );
        if keep_cols {
            saved_cols.push(cols.clone());
        }
    }
    if let Some(bias) = bias {
        let bv = bias.data();
        for b in 0..n {
            for (co, &bc) in bv.iter().enumerate() {
                let base = b * out_plane + co * hw_out;
                out[base..base + hw_out].iter_mut().for_each(|v| *v = *v + bc);
            }
        }
    }

    let saved_cols = Arc::new(saved_cols);
    let mut parents = vec![input, weight];
    if let Some(b) = bias {
        parents.push(b);
    }
    Ok(Tensor::from_op(
        vec![n, cout, g.ho, g.wo],
        out,
        &parents,
        move |gout, p| {
            let (xin, wt) = (&p[0], &p[1]);
            let mut gx = xin
                .requires_grad()
                .then(|| vec![T::zero(); n * in_plane]);
            let mut gw = wt.requires_grad().then(|| vec![T::zero(); cout * k]);
            let mut dcols = vec![T::zero(); k * hw_out];
            let mut scratch = Vec::new();
            for b in 0..n {
                let gb = &gout[b * out_plane..(b + 1) * out_plane];
                if let Some(gw) = gw.as_mut() {
                    let colmat: &[T] = if g.is_pointwise() {
                        &xin.data()[b * in_plane..(b + 1) * in_plane]
                    } else if let Some(c) = saved_cols.get(b) {
                        c
                    } else {
                        scratch.resize(k * hw_out, T::zero());
                        im2col(&xin.data()[b * in_plane..(b + 1) * in_plane], &g, &mut scratch);
                        &scratch
                    };
                    gemm(
                        Mat::new(gb, cout, hw_out),
                        Mat::new(colmat, k, hw_out).t(),
                        T::one(),
                        gw,
                    );
                }
                if let Some(gx) = gx.as_mut() {
                    let gxb = &mut gx[b * in_plane..(b + 1) * in_plane];
                    if g.is_pointwise() {
                        gemm(Mat::new(wt.data(), cout, k).t(), Mat::new(gb, cout, hw_out), T::zero(), gxb);
                    } else {
                        gemm(
                            Mat::new(wt.data(), cout, k).t(),
                            Mat::new(gb, cout, hw_out),
                            T::zero(),
                            &mut dcols,
                        );
                        col2im(&dcols, &g, gxb);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if p.len() == 3 {
                let mut gbias = vec![T::zero(); cout];
                for b in 0..n {
                    for (co, acc) in gbias.iter_mut().enumerate() {
                        let base = b * out_plane + co * hw_out;
                        *acc = gout[base..base + hw_out].iter().fold(*acc, |s, v| s + *v);
                    }
                }
                grads.push(Some(gbias));
            }
            grads
        },
    ))
}
