use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

/// Max pooling with implicit `-inf` padding. The subgradient goes to the
/// first maximal element of each window in row-major order.
pub fn max_pool2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if kernel == 0 || stride == 0 {
        return shape_err("max_pool2d", "kernel and stride must be positive");
    }
    if 2 * padding > kernel {
        return shape_err(
            "max_pool2d",
            format!("padding {padding} exceeds half of kernel {kernel}"),
        );
    }
    if h + 2 * padding < kernel || w + 2 * padding < kernel {
        return shape_err("max_pool2d", "kernel larger than padded input");
    }
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let x = input.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    let mut argmax = vec![0usize; out.len()];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..ho {
            for oj in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..kernel {
                    let ii = (oi * stride + ki) as isize - padding as isize;
                    if ii < 0 || ii as usize >= h {
                        continue;
                    }
                    for kj in 0..kernel {
                        let jj = (oj * stride + kj) as isize - padding as isize;
                        if jj < 0 || jj as usize >= w {
                            continue;
                        }
                        let idx = base + ii as usize * w + jj as usize;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (plane * ho + oi) * wo + oj;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
    let numel = x.len();
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, &[input], move |g, _| {
        let mut gx = vec![T::zero(); numel];
        for (gv, &idx) in g.iter().zip(&argmax) {
            gx[idx] = gx[idx] + *gv;
        }
        vec![Some(gx)]
    }))
}
