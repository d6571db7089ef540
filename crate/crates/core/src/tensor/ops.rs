use super::{Scalar, Tensor};
use crate::error::{shape_err, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x + *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    }))
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x - *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], |g, _| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -*v).collect())]
    }))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| *x * *y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), data, &[a, b], |g, p| {
        let ga = g.iter().zip(p[1].data()).map(|(g, y)| *g * *y).collect();
        let gb = g.iter().zip(p[0].data()).map(|(g, x)| *g * *x).collect();
        vec![Some(ga), Some(gb)]
    }))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * s).collect();
    Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, _| {
        vec![Some(g.iter().map(|v| *v * s).collect())]
    })
}

pub fn add_scalar<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x + s).collect();
    Tensor::from_op(a.shape().to_vec(), data, &[a], |g, _| vec![Some(g.to_vec())])
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let total = a.data().iter().fold(T::zero(), |acc, v| acc + *v);
    let n = a.numel();
    Tensor::from_op(vec![1], vec![total], &[a], move |g, _| vec![Some(vec![g[0]; n])])
}

pub fn mean<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.numel().max(1);
    scale(&sum(a), T::one() / T::lit(n as f64))
}

pub fn relu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| x.max(T::zero())).collect();
    Tensor::from_op(a.shape().to_vec(), data, &[a], |g, p| {
        let gx = g
            .iter()
            .zip(p[0].data())
            .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
            .collect();
        vec![Some(gx)]
    })
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data: Vec<T> = a.data().iter().map(|x| sigmoid_scalar(*x)).collect();
    let saved = data.clone();
    Tensor::from_op(a.shape().to_vec(), data, &[a], move |g, _| {
        let gx = g
            .iter()
            .zip(&saved)
            .map(|(g, s)| *g * *s * (T::one() - *s))
            .collect();
        vec![Some(gx)]
    })
}

/// `x * sigmoid(x)`.
pub fn silu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|x| *x * sigmoid_scalar(*x)).collect();
    Tensor::from_op(a.shape().to_vec(), data, &[a], |g, p| {
        let gx = g
            .iter()
            .zip(p[0].data())
            .map(|(g, x)| {
                let s = sigmoid_scalar(*x);
                *g * s * (T::one() + *x * (T::one() - s))
            })
            .collect();
        vec![Some(gx)]
    })
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(a: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = a.shape().to_vec();
    if axis >= shape.len() {
        return shape_err("softmax", format!("axis {axis} out of range for {shape:?}"));
    }
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let x = a.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(x[base + k * inner]);
            }
            let mut z = T::zero();
            for k in 0..len {
                let e = (x[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                z = z + e;
            }
            for k in 0..len {
                out[base + k * inner] = out[base + k * inner] / z;
            }
        }
    }
    let saved = out.clone();
    Ok(Tensor::from_op(shape, out, &[a], move |g, _| {
        let mut gx = vec![T::zero(); g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = T::zero();
                for k in 0..len {
                    dot = dot + g[base + k * inner] * saved[base + k * inner];
                }
                for k in 0..len {
                    let idx = base + k * inner;
                    gx[idx] = saved[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Scalar>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = xs.first() else {
        return shape_err("concat_channels", "empty input list");
    };
    let [n, _, h, w] = first.dims4()?;
    let mut chans = Vec::with_capacity(xs.len());
    for (i, x) in xs.iter().enumerate() {
        let [xn, xc, xh, xw] = x.dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return shape_err(
                "concat_channels",
                format!(
                    "input {i} has (N,H,W) = ({xn},{xh},{xw}), expected ({n},{h},{w})"
                ),
            );
        }
        chans.push(xc);
    }
    let c_total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c_total * hw);
    for b in 0..n {
        for (x, &c) in xs.iter().zip(&chans) {
            out.extend_from_slice(&x.data()[b * c * hw..(b + 1) * c * hw]);
        }
    }
    Ok(Tensor::from_op(
        vec![n, c_total, h, w],
        out,
        xs,
        move |g, _| {
            let mut grads: Vec<Vec<T>> = chans.iter().map(|c| Vec::with_capacity(n * c * hw)).collect();
            let mut off = 0;
            for _ in 0..n {
                for (gi, &c) in grads.iter_mut().zip(&chans) {
                    gi.extend_from_slice(&g[off..off + c * hw]);
                    off += c * hw;
                }
            }
            grads.into_iter().map(Some).collect()
        },
    ))
}

/// Nearest-neighbour 2x spatial upsampling.
pub fn upsample_nearest2x<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = a.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let x = a.data();
    let mut out = vec![T::zero(); n * c * ho * wo];
    for plane in 0..n * c {
        let src = &x[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = src[(i / 2) * w + j / 2];
            }
        }
    }
    Ok(Tensor::from_op(vec![n, c, ho, wo], out, &[a], move |g, _| {
        let mut gx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
            let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
            for i in 0..ho {
                for j in 0..wo {
                    dst[(i / 2) * w + j / 2] = dst[(i / 2) * w + j / 2] + src[i * wo + j];
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Turns per-level NCHW maps `[N, C, H_l, W_l]` into one anchor-major tensor
/// `[N, sum_l H_l*W_l, C]`. Anchors are ordered level by level, row-major
/// within a level.
pub fn flatten_levels<T: Scalar>(levels: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = levels.first() else {
        return shape_err("flatten_levels", "empty level list");
    };
    let [n, c, _, _] = first.dims4()?;
    let mut spans = Vec::with_capacity(levels.len());
    for (i, l) in levels.iter().enumerate() {
        let [ln, lc, lh, lw] = l.dims4()?;
        if (ln, lc) != (n, c) {
            return shape_err(
                "flatten_levels",
                format!("level {i} has (N,C) = ({ln},{lc}), expected ({n},{c})"),
            );
        }
        spans.push(lh * lw);
    }
    let anchors: usize = spans.iter().sum();
    let mut out = vec![T::zero(); n * anchors * c];
    let mut a0 = 0;
    for (l, &hw) in levels.iter().zip(&spans) {
        let x = l.data();
        for b in 0..n {
            for ch in 0..c {
                for p in 0..hw {
                    out[(b * anchors + a0 + p) * c + ch] = x[(b * c + ch) * hw + p];
                }
            }
        }
        a0 += hw;
    }
    Ok(Tensor::from_op(vec![n, anchors, c], out, levels, move |g, _| {
        let mut grads = Vec::with_capacity(spans.len());
        let mut a0 = 0;
        for &hw in &spans {
            let mut gl = vec![T::zero(); n * c * hw];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..hw {
                        gl[(b * c + ch) * hw + p] = g[(b * anchors + a0 + p) * c + ch];
                    }
                }
            }
            grads.push(Some(gl));
            a0 += hw;
        }
        grads
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_gradient, rand_tensor};

    #[test]
    fn activations_at_known_points() {
        let x = Tensor::<f64>::new(vec![-1.0, 0.0, 2.0], &[3]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(silu(&x).data()[1], 0.0);
    }

    #[test]
    fn silu_gradient_matches_fd() {
        let x = rand_tensor(&[2, 3, 4, 4], 7, 3.0);
        let err = check_gradient(&[x], |p| sum(&silu(&p[0])));
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn sigmoid_gradient_matches_fd() {
        let x = rand_tensor(&[17], 3, 4.0);
        let err = check_gradient(&[x], |p| sum(&mul(&sigmoid(&p[0]), &p[0]).unwrap()));
        assert!(err <= 1e-5, "max rel err {err}");
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::<f64>::zeros(&[1, 4]);
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|v| (*v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rand_tensor(&[3, 5, 2], 11, 5.0).cast::<f32>();
        let y = softmax(&x, 1).unwrap();
        for o in 0..3 {
            for i in 0..2 {
                let s: f32 = (0..5).map(|k| y.data()[o * 10 + k * 2 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_jacobian_matches_fd() {
        let x = rand_tensor(&[2, 6, 3], 5, 2.0);
        let w = rand_tensor(&[2, 6, 3], 6, 1.0).detach();
        let err = check_gradient(&[x], move |p| sum(&mul(&softmax(&p[0], 1).unwrap(), &w).unwrap()));
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn upsample_single_value() {
        let x = Tensor::<f32>::new(vec![3.5], &[1, 1, 1, 1]).unwrap();
        let y = upsample_nearest2x(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[3.5; 4]);
    }

    #[test]
    fn upsample_gradient_matches_fd() {
        let x = rand_tensor(&[1, 2, 3, 3], 9, 1.0);
        let w = rand_tensor(&[1, 2, 6, 6], 10, 1.0).detach();
        let err = check_gradient(&[x], move |p| {
            sum(&mul(&upsample_nearest2x(&p[0]).unwrap(), &w).unwrap())
        });
        assert!(err <= 1e-4, "max rel err {err}");
    }

    #[test]
    fn concat_and_flatten_gradients() {
        let a = rand_tensor(&[2, 2, 3, 3], 1, 1.0);
        let b = rand_tensor(&[2, 3, 3, 3], 2, 1.0);
        let w = rand_tensor(&[2, 5, 3, 3], 3, 1.0).detach();
        let err = check_gradient(&[a, b], move |p| {
            sum(&mul(&concat_channels(&[&p[0], &p[1]]).unwrap(), &w).unwrap())
        });
        assert!(err <= 1e-4);

        let l0 = rand_tensor(&[2, 3, 4, 4], 4, 1.0);
        let l1 = rand_tensor(&[2, 3, 2, 2], 5, 1.0);
        let w = rand_tensor(&[2, 20, 3], 6, 1.0).detach();
        let err = check_gradient(&[l0, l1], move |p| {
            sum(&mul(&flatten_levels(&[&p[0], &p[1]]).unwrap(), &w).unwrap())
        });
        assert!(err <= 1e-4);
    }

    #[test]
    fn concat_rejects_mismatched_extent() {
        let a = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        assert!(concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn flatten_orders_levels_then_row_major() {
        let l0 = Tensor::<f32>::new((0..8).map(|v| v as f32).collect(), &[1, 2, 2, 2]).unwrap();
        let l1 = Tensor::<f32>::new(vec![10.0, 20.0], &[1, 2, 1, 1]).unwrap();
        let y = flatten_levels(&[&l0, &l1]).unwrap();
        assert_eq!(y.shape(), &[1, 5, 2]);
        assert_eq!(y.data(), &[0.0, 4.0, 1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 10.0, 20.0]);
    }
}
