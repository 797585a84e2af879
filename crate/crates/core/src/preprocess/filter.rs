use ndarray::{Array3, Axis, Zip};
use rayon::prelude::*;

/// Convolve every 1D lane along `axis` with a symmetric kernel; zero outside.
pub(crate) fn convolve_axis(v: &Array3<f64>, kernel: &[f64], axis: usize) -> Array3<f64> {
    let r = kernel.len() / 2;
    let mut out = Array3::zeros(v.raw_dim());
    let n = v.shape()[axis];
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(v.lanes(Axis(axis)))
        .par_for_each(|mut o, x| {
            for i in 0..n {
                let mut acc = 0.0;
                for (t, &kv) in kernel.iter().enumerate() {
                    let j = i as isize + t as isize - r as isize;
                    if j >= 0 && (j as usize) < n {
                        acc += kv * x[j as usize];
                    }
                }
                o[i] = acc;
            }
        });
    out
}

pub(crate) fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= s);
    k
}

/// Separable Gaussian smoothing with zero padding (sigma in voxels).
pub fn gaussian_smooth(v: &Array3<f64>, sigma: f64) -> Array3<f64> {
    if sigma <= 0.0 {
        return v.clone();
    }
    let k = gaussian_kernel(sigma);
    let mut out = v.clone();
    for ax in 0..3 {
        out = convolve_axis(&out, &k, ax);
    }
    out
}

/// Gaussian smoothing restricted to `mask`: `G*(v m) / G*m`, zero off-mask.
pub(crate) fn masked_smooth(v: &Array3<f64>, mask: &Array3<bool>, sigma: f64) -> Array3<f64> {
    let m = mask.mapv(|b| if b { 1.0 } else { 0.0 });
    let num = gaussian_smooth(&(v * &m), sigma);
    let den = gaussian_smooth(&m, sigma);
    let mut out = Array3::zeros(v.raw_dim());
    Zip::from(&mut out)
        .and(&num)
        .and(&den)
        .and(mask)
        .for_each(|o, &n, &d, &inside| {
            if inside && d > 1e-12 {
                *o = n / d;
            }
        });
    out
}

/// Sum over a `(2r+1)^3` box, zero padding.
pub(crate) fn box_sum(v: &Array3<f64>, r: usize) -> Array3<f64> {
    let k = vec![1.0; 2 * r + 1];
    let mut out = v.clone();
    for ax in 0..3 {
        out = convolve_axis(&out, &k, ax);
    }
    out
}

/// Mean over `factor^3` blocks (partial blocks at the far edges included).
pub(crate) fn block_mean(
    v: &Array3<f64>,
    mask: &Array3<bool>,
    factor: usize,
) -> (Array3<f64>, Array3<bool>) {
    let s = v.shape();
    let dims = [
        s[0].div_ceil(factor),
        s[1].div_ceil(factor),
        s[2].div_ceil(factor),
    ];
    let mut sum = Array3::<f64>::zeros(dims);
    let mut cnt = Array3::<f64>::zeros(dims);
    for ((i, j, k), &x) in v.indexed_iter() {
        if mask[[i, j, k]] {
            let b = [i / factor, j / factor, k / factor];
            sum[b] += x;
            cnt[b] += 1.0;
        }
    }
    let m = cnt.mapv(|c| c > 0.0);
    Zip::from(&mut sum).and(&cnt).for_each(|s, &c| {
        if c > 0.0 {
            *s /= c
        }
    });
    (sum, m)
}

/// Trilinear upsampling of a block-mean grid back to `shape`; sample centers
/// of block `b` sit at `b * factor + (factor - 1) / 2`.
pub(crate) fn upsample_blocks(v: &Array3<f64>, factor: usize, shape: [usize; 3]) -> Array3<f64> {
    let f = factor as f64;
    let off = (f - 1.0) / 2.0;
    let coords: Vec<[f64; 3]> = (0..shape[0] * shape[1] * shape[2])
        .map(|idx| {
            let i = idx / (shape[1] * shape[2]);
            let j = (idx / shape[2]) % shape[1];
            let k = idx % shape[2];
            [
                (i as f64 - off) / f,
                (j as f64 - off) / f,
                (k as f64 - off) / f,
            ]
        })
        .collect();
    let vals: Vec<f64> = coords
        .par_iter()
        .map(|c| {
            let s = v.shape();
            let cl = [0, 1, 2].map(|a| c[a].clamp(0.0, (s[a] - 1) as f64));
            super::trilinear(v, cl).unwrap_or(0.0)
        })
        .collect();
    Array3::from_shape_vec(shape, vals).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_preserves_constant_interior() {
        let v = Array3::from_elem((20, 20, 20), 2.0);
        let s = gaussian_smooth(&v, 1.5);
        assert!((s[[10, 10, 10]] - 2.0).abs() < 1e-12);
        let m = masked_smooth(&v, &v.mapv(|_| true), 3.0);
        assert!(m.iter().all(|&x| (x - 2.0).abs() < 1e-12));
    }

    #[test]
    fn box_sum_counts_neighbours() {
        let v = Array3::from_elem((5, 5, 5), 1.0);
        let b = box_sum(&v, 1);
        assert_eq!(b[[2, 2, 2]], 27.0);
        assert_eq!(b[[0, 0, 0]], 8.0);
    }
}
