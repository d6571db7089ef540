use super::{Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    /// Number of train-mode batches folded into the running statistics.
    pub batches_tracked: u64,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum: T::lit(0.03),
            batches_tracked: 0,
        }
    }
}

pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and update the running ones.
    Train(&'a mut BnStats<T>),
    /// Normalize with running statistics.
    Eval(&'a BnStats<T>),
}

/// Per-channel batch normalization of an NCHW tensor.
pub fn batch_norm<T: Scalar>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mode: BnMode<'_, T>,
    eps: T,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(
            "batch_norm",
            format!(
                "gamma {:?} / beta {:?} for {c} input channels",
                gamma.shape(),
                beta.shape()
            ),
        );
    }
    let hw = h * w;
    let m = n * hw;
    let x = input.data();

    let (mean, var, train) = match mode {
        BnMode::Train(stats) => {
            if stats.running_mean.len() != c || stats.running_var.len() != c {
                return shape_err("batch_norm", "running statistics length != channels");
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_m = T::one() / T::lit(m as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    s = x[base..base + hw].iter().fold(s, |a, v| a + *v);
                }
                let mu = s * inv_m;
                let mut s2 = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * hw;
                    s2 = x[base..base + hw].iter().fold(s2, |a, v| a + (*v - mu) * (*v - mu));
                }
                mean[ch] = mu;
                var[ch] = s2 * inv_m;
            }
            let mom = stats.momentum;
            let unbias = if m > 1 {
                T::lit(m as f64) / T::lit((m - 1) as f64)
            } else {
                T::one()
            };
            for ch in 0..c {
                stats.running_mean[ch] = (T::one() - mom) * stats.running_mean[ch] + mom * mean[ch];
                stats.running_var[ch] =
                    (T::one() - mom) * stats.running_var[ch] + mom * var[ch] * unbias;
            }
            stats.batches_tracked += 1;
            (mean, var, true)
        }
        BnMode::Eval(stats) => {
            if stats.running_mean.len() != c || stats.running_var.len() != c {
                return shape_err("batch_norm", "running statistics length != channels");
            }
            (stats.running_mean.clone(), stats.running_var.clone(), false)
        }
    };

    let mut inv_std = Vec::with_capacity(c);
    for (ch, v) in var.iter().enumerate() {
        let d = *v + eps;
        if d <= T::zero() {
            return Err(Error::Numeric(format!(
                "batch_norm channel {ch} has zero variance and eps = {eps}; use eps > 0"
            )));
        }
        inv_std.push(T::one() / d.sqrt());
    }

    let gv = gamma.data();
    let bv = beta.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut out = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            for i in base..base + hw {
                let xh = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gv[ch] * xh + bv[ch];
            }
        }
    }

    Ok(Tensor::from_op(
        vec![n, c, h, w],
        out,
        &[input, gamma, beta],
        move |g, p| {
            let gamma = p[1].data();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    for i in base..base + hw {
                        dgamma[ch] = dgamma[ch] + g[i] * xhat[i];
                        dbeta[ch] = dbeta[ch] + g[i];
                    }
                }
            }
            let dx = p[0].requires_grad().then(|| {
                let mut dx = vec![T::zero(); g.len()];
                let inv_m = T::one() / T::lit(m as f64);
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        let k = gamma[ch] * inv_std[ch];
                        for i in base..base + hw {
                            dx[i] = if train {
                                k * (g[i] - dbeta[ch] * inv_m - xhat[i] * dgamma[ch] * inv_m)
                            } else {
                                k * g[i]
                            };
                        }
                    }
                }
                dx
            });
            vec![dx, Some(dgamma), Some(dbeta)]
        },
    ))
}
