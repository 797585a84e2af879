use ndarray::{Array1, ArrayD, IxDyn};

use crate::Scalar;

/// Saved forward state of a batch-norm application.
#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    pub xhat: ArrayD<T>,
    pub inv_std: Array1<T>,
    pub training: bool,
}

/// Per-channel statistics observed in a training-mode forward pass, used to
/// update running buffers after the step.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Array1<T>,
    /// Unbiased variance.
    pub var: Array1<T>,
}

fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "batch norm expects [N, C, ...]");
    let n = shape[0];
    let c = shape[1];
    let s: usize = shape[2..].iter().product();
    (n, c, s)
}

/// Batch normalization over every axis except the channel axis (1).
///
/// In training mode the batch statistics are used and returned; otherwise the
/// supplied running statistics are used.
#[allow(clippy::too_many_arguments)]
pub fn batch_norm<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    running_mean: &ArrayD<T>,
    running_var: &ArrayD<T>,
    eps: T,
    training: bool,
) -> (ArrayD<T>, BatchNormCache<T>, Option<BatchStats<T>>) {
    let (n, c, s) = channel_layout(x.shape());
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let count = n * s;
    let mut mean = Array1::<T>::zeros(c);
    let mut var = Array1::<T>::zeros(c);
    let stats = if training {
        for ch in 0..c {
            let mut acc = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * s;
                acc += xs[off..off + s].iter().copied().sum::<T>();
            }
            let m = acc / T::lit(count as f64);
            let mut sq = T::zero();
            for b in 0..n {
                let off = (b * c + ch) * s;
                sq += xs[off..off + s]
                    .iter()
                    .map(|&v| (v - m) * (v - m))
                    .sum::<T>();
            }
            mean[ch] = m;
            var[ch] = sq / T::lit(count as f64);
        }
        let unbiased = if count > 1 {
            var.mapv(|v| v * T::lit(count as f64 / (count - 1) as f64))
        } else {
            var.clone()
        };
        Some(BatchStats {
            mean: mean.clone(),
            var: unbiased,
        })
    } else {
        for ch in 0..c {
            mean[ch] = running_mean[ch];
            var[ch] = running_var[ch];
        }
        None
    };
    let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            let (m, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for i in off..off + s {
                let h = (xs[i] - m) * is;
                xhat[i] = h;
                y[i] = g * h + bt;
            }
        }
    }
    let shape = IxDyn(x.shape());
    (
        ArrayD::from_shape_vec(shape.clone(), y).unwrap(),
        BatchNormCache {
            xhat: ArrayD::from_shape_vec(shape, xhat).unwrap(),
            inv_std,
            training,
        },
        stats,
    )
}

/// Returns `(dx, dgamma, dbeta)`.
pub fn batch_norm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &ArrayD<T>,
    dy: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let (n, c, s) = channel_layout(dy.shape());
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();
    let count = T::lit((n * s) as f64);
    let mut dgamma = ArrayD::<T>::zeros(IxDyn(&[c]));
    let mut dbeta = ArrayD::<T>::zeros(IxDyn(&[c]));
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                dgamma[ch] += dys[i] * xh[i];
                dbeta[ch] += dys[i];
            }
        }
    }
    let mut dx = vec![T::zero(); dys.len()];
    for ch in 0..c {
        let g = gamma[ch];
        let is = cache.inv_std[ch];
        // sum(dxhat) = g * dbeta, sum(dxhat * xhat) = g * dgamma
        let sum_dxhat = g * dbeta[ch];
        let sum_dxhat_xhat = g * dgamma[ch];
        for b in 0..n {
            let off = (b * c + ch) * s;
            for i in off..off + s {
                let dxhat = dys[i] * g;
                dx[i] = if cache.training {
                    is * (dxhat - sum_dxhat / count - xh[i] * sum_dxhat_xhat / count)
                } else {
                    dxhat * is
                };
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(dy.shape()), dx).unwrap(),
        dgamma,
        dbeta,
    )
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: ArrayD<T>,
    pub inv_std: Vec<T>,
}

/// Normalization over the last axis with affine `gamma`/`beta` of that length.
pub fn layer_norm<T: Scalar>(
    x: &ArrayD<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, LayerNormCache<T>) {
    let e = *x.shape().last().expect("layer norm on scalar");
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    let mut inv_stds = Vec::with_capacity(xs.len() / e);
    for (r, row) in xs.chunks(e).enumerate() {
        let m = row.iter().copied().sum::<T>() / T::lit(e as f64);
        let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / T::lit(e as f64);
        let is = T::one() / (v + eps).sqrt();
        inv_stds.push(is);
        for j in 0..e {
            let h = (row[j] - m) * is;
            xhat[r * e + j] = h;
            y[r * e + j] = gamma[j] * h + beta[j];
        }
    }
    let shape = IxDyn(x.shape());
    (
        ArrayD::from_shape_vec(shape.clone(), y).unwrap(),
        LayerNormCache {
            xhat: ArrayD::from_shape_vec(shape, xhat).unwrap(),
            inv_std: inv_stds,
        },
    )
}

pub fn layer_norm_backward<T: Scalar>(
    cache: &LayerNormCache<T>,
    gamma: &ArrayD<T>,
    dy: &ArrayD<T>,
) -> (ArrayD<T>, ArrayD<T>, ArrayD<T>) {
    let e = *dy.shape().last().unwrap();
    let dy = dy.as_standard_layout();
    let dys = dy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();
    let mut dgamma = ArrayD::<T>::zeros(IxDyn(&[e]));
    let mut dbeta = ArrayD::<T>::zeros(IxDyn(&[e]));
    let mut dx = vec![T::zero(); dys.len()];
    let ef = T::lit(e as f64);
    for (r, is) in cache.inv_std.iter().enumerate() {
        let off = r * e;
        let mut s1 = T::zero();
        let mut s2 = T::zero();
        for j in 0..e {
            let dxhat = dys[off + j] * gamma[j];
            s1 += dxhat;
            s2 += dxhat * xh[off + j];
            dgamma[j] += dys[off + j] * xh[off + j];
            dbeta[j] += dys[off + j];
        }
        for j in 0..e {
            let dxhat = dys[off + j] * gamma[j];
            dx[off + j] = *is * (dxhat - s1 / ef - xh[off + j] * s2 / ef);
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(dy.shape()), dx).unwrap(),
        dgamma,
        dbeta,
    )
}
