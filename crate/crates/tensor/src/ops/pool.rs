use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;

use super::conv::Conv3dCfg;
use crate::Scalar;

fn dims(shape: &[usize]) -> (usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "pooling expects [N, C, D, H, W]");
    (shape[0] * shape[1], [shape[2], shape[3], shape[4]])
}

fn out_dims(inp: [usize; 3], cfg: &Conv3dCfg) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = cfg
            .out_len(inp[a])
            .unwrap_or_else(|| panic!("pool window {} does not fit extent {:?}", cfg.kernel, inp));
    }
    out
}

/// Max pooling with implicit `-inf` padding. Returns the pooled tensor and,
/// per output element, the flat index of the winning input element.
pub fn max_pool3d<T: Scalar>(x: &ArrayD<T>, cfg: Conv3dCfg) -> (ArrayD<T>, Vec<usize>) {
    let (planes, inp) = dims(x.shape());
    let out = out_dims(inp, &cfg);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let in_vox = inp.iter().product::<usize>();
    let out_vox = out.iter().product::<usize>();
    let results: Vec<(Vec<T>, Vec<usize>)> = (0..planes)
        .into_par_iter()
        .map(|p| {
            let base = p * in_vox;
            let mut vals = Vec::with_capacity(out_vox);
            let mut idx = Vec::with_capacity(out_vox);
            for od in 0..out[0] {
                for oy in 0..out[1] {
                    for ox in 0..out[2] {
                        let mut best = T::neg_infinity();
                        let mut arg = usize::MAX;
                        for kd in 0..cfg.kernel {
                            let zd = (od * cfg.stride + kd) as isize - cfg.padding as isize;
                            if zd < 0 || zd as usize >= inp[0] {
                                continue;
                            }
                            for kh in 0..cfg.kernel {
                                let zy = (oy * cfg.stride + kh) as isize - cfg.padding as isize;
                                if zy < 0 || zy as usize >= inp[1] {
                                    continue;
                                }
                                for kw in 0..cfg.kernel {
                                    let zx = (ox * cfg.stride + kw) as isize - cfg.padding as isize;
                                    if zx < 0 || zx as usize >= inp[2] {
                                        continue;
                                    }
                                    let flat = base
                                        + (zd as usize * inp[1] + zy as usize) * inp[2]
                                        + zx as usize;
                                    if arg == usize::MAX || xs[flat] > best {
                                        best = xs[flat];
                                        arg = flat;
                                    }
                                }
                            }
                        }
                        vals.push(best);
                        idx.push(arg);
                    }
                }
            }
            (vals, idx)
        })
        .collect();
    let mut vals = Vec::with_capacity(planes * out_vox);
    let mut idx = Vec::with_capacity(planes * out_vox);
    for (v, i) in results {
        vals.extend(v);
        idx.extend(i);
    }
    let mut shape = x.shape().to_vec();
    shape[2..].copy_from_slice(&out);
    (ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap(), idx)
}

pub fn max_pool3d_backward<T: Scalar>(
    in_shape: &[usize],
    argmax: &[usize],
    dy: &ArrayD<T>,
) -> ArrayD<T> {
    let mut dx = ArrayD::<T>::zeros(IxDyn(in_shape));
    let dxs = dx.as_slice_mut().unwrap();
    for (g, &i) in dy.iter().zip(argmax) {
        dxs[i] += *g;
    }
    dx
}

/// Average pooling without padding.
pub fn avg_pool3d<T: Scalar>(x: &ArrayD<T>, kernel: usize, stride: usize) -> ArrayD<T> {
    let cfg = Conv3dCfg::new(kernel, stride, 0);
    let (planes, inp) = dims(x.shape());
    let out = out_dims(inp, &cfg);
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let in_vox = inp.iter().product::<usize>();
    let norm = T::one() / T::lit(kernel.pow(3) as f64);
    let mut vals = Vec::with_capacity(planes * out.iter().product::<usize>());
    for p in 0..planes {
        let base = p * in_vox;
        for od in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let mut acc = T::zero();
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let z = od * stride + kd;
                                let y = oy * stride + kh;
                                let xx = ox * stride + kw;
                                acc += xs[base + (z * inp[1] + y) * inp[2] + xx];
                            }
                        }
                    }
                    vals.push(acc * norm);
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[2..].copy_from_slice(&out);
    ArrayD::from_shape_vec(IxDyn(&shape), vals).unwrap()
}

pub fn avg_pool3d_backward<T: Scalar>(
    in_shape: &[usize],
    kernel: usize,
    stride: usize,
    dy: &ArrayD<T>,
) -> ArrayD<T> {
    let (planes, inp) = dims(in_shape);
    let out = [dy.shape()[2], dy.shape()[3], dy.shape()[4]];
    let in_vox = inp.iter().product::<usize>();
    let norm = T::one() / T::lit(kernel.pow(3) as f64);
    let mut dx = ArrayD::<T>::zeros(IxDyn(in_shape));
    let dxs = dx.as_slice_mut().unwrap();
    let dy = dy.as_standard_layout();
    let mut it = dy.iter();
    for p in 0..planes {
        let base = p * in_vox;
        for od in 0..out[0] {
            for oy in 0..out[1] {
                for ox in 0..out[2] {
                    let g = *it.next().unwrap() * norm;
                    for kd in 0..kernel {
                        for kh in 0..kernel {
                            for kw in 0..kernel {
                                let z = od * stride + kd;
                                let y = oy * stride + kh;
                                let xx = ox * stride + kw;
                                dxs[base + (z * inp[1] + y) * inp[2] + xx] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Mean over all trailing spatial axes: `[N, C, ...] -> [N, C]`.
pub fn global_avg_pool<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let (n, c) = (x.shape()[0], x.shape()[1]);
    let s: usize = x.shape()[2..].iter().product();
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let inv = T::one() / T::lit(s as f64);
    let vals: Vec<T> = xs
        .chunks(s)
        .map(|ch| ch.iter().copied().sum::<T>() * inv)
        .collect();
    ArrayD::from_shape_vec(IxDyn(&[n, c]), vals).unwrap()
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: &[usize], dy: &ArrayD<T>) -> ArrayD<T> {
    let s: usize = in_shape[2..].iter().product();
    let inv = T::one() / T::lit(s as f64);
    let mut out = Vec::with_capacity(dy.len() * s);
    for &g in dy.as_standard_layout().iter() {
        out.extend(std::iter::repeat_n(g * inv, s));
    }
    ArrayD::from_shape_vec(IxDyn(in_shape), out).unwrap()
}
