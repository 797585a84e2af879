//! Non-local means with an automatic noise estimate.

use ndarray::{s, Array3, Zip};
use serde::{Deserialize, Serialize};

use super::filter::box_sum;
use crate::volume::VolumeGrid;
use rano_tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiseParams {
    pub patch_radius: usize,
    pub search_radius: usize,
    /// Filtering strength relative to the estimated noise sigma.
    pub h_factor: f64,
    /// Fixed noise sigma; estimated from the data when `None`.
    pub sigma: Option<f64>,
}

impl Default for DenoiseParams {
    fn default() -> Self {
        Self {
            patch_radius: 1,
            search_radius: 2,
            h_factor: 1.0,
            sigma: None,
        }
    }
}

/// Robust Gaussian noise sigma from the 6-neighbour Laplacian residual:
/// `x - mean(neighbours)` has variance `7/6 sigma^2` for white noise.
pub fn estimate_noise_sigma(v: &Array3<f64>) -> f64 {
    let sh = v.shape();
    if sh.iter().any(|&d| d < 3) {
        return 0.0;
    }
    let c = v.slice(s![1..-1, 1..-1, 1..-1]);
    let mut r = c.to_owned() * 6.0;
    r -= &v.slice(s![..-2, 1..-1, 1..-1]);
    r -= &v.slice(s![2.., 1..-1, 1..-1]);
    r -= &v.slice(s![1..-1, ..-2, 1..-1]);
    r -= &v.slice(s![1..-1, 2.., 1..-1]);
    r -= &v.slice(s![1..-1, 1..-1, ..-2]);
    r -= &v.slice(s![1..-1, 1..-1, 2..]);
    let mut res: Vec<f64> = r.iter().map(|x| x / 6.0).collect();
    let med = median(&mut res);
    let mut dev: Vec<f64> = res.iter().map(|x| (x - med).abs()).collect();
    1.4826 * median(&mut dev) / (7.0f64 / 6.0).sqrt()
}

fn median(xs: &mut [f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mid = xs.len() / 2;
    let (_, m, _) = xs.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

pub fn denoise<T: Scalar>(v: &VolumeGrid<T>) -> VolumeGrid<T> {
    denoise_with(v, &DenoiseParams::default())
}

/// Shape-preserving; a volume with zero estimated noise is returned as is.
pub fn denoise_with<T: Scalar>(v: &VolumeGrid<T>, p: &DenoiseParams) -> VolumeGrid<T> {
    let x = v.voxels.mapv(|a| a.as_f64());
    let sigma = p.sigma.unwrap_or_else(|| estimate_noise_sigma(&x));
    if !(sigma > 0.0) {
        return v.clone();
    }
    let h2 = (p.h_factor * sigma).powi(2);
    let patch_n = ((2 * p.patch_radius + 1) as f64).powi(3);
    let sh = v.shape();
    let r = p.search_radius as isize;
    let mut num = Array3::<f64>::zeros(x.raw_dim());
    let mut den = Array3::<f64>::zeros(x.raw_dim());
    let mut wmax = Array3::<f64>::zeros(x.raw_dim());
    for di in -r..=r {
        for dj in -r..=r {
            for dk in -r..=r {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let shifted = shift(&x, [di, dj, dk]);
                let valid = shift(&Array3::from_elem(x.raw_dim(), 1.0), [di, dj, dk]);
                let diff2 = Zip::from(&x)
                    .and(&shifted)
                    .map_collect(|&a, &b| (a - b).powi(2));
                let d2 = box_sum(&diff2, p.patch_radius) / patch_n;
                Zip::from(&mut num)
                    .and(&mut den)
                    .and(&mut wmax)
                    .and(&d2)
                    .and(&shifted)
                    .and(&valid)
                    .for_each(|n, d, wm, &dist, &s, &ok| {
                        if ok > 0.0 {
                            let w = (-(dist - 2.0 * sigma * sigma).max(0.0) / h2).exp();
                            *n += w * s;
                            *d += w;
                            if w > *wm {
                                *wm = w;
                            }
                        }
                    });
            }
        }
    }
    let out = Zip::from(&x)
        .and(&num)
        .and(&den)
        .and(&wmax)
        .map_collect(|&a, &n, &d, &wm| {
            let self_w = if wm > 0.0 { wm } else { 1.0 };
            T::lit((n + self_w * a) / (d + self_w))
        });
    debug_assert_eq!(out.shape(), &sh[..]);
    v.with_voxels(out)
}

/// `out[i] = x[i + d]`, zero where out of range.
fn shift(x: &Array3<f64>, d: [isize; 3]) -> Array3<f64> {
    let sh = x.shape();
    let mut out = Array3::zeros(x.raw_dim());
    let range = |n: usize, d: isize| -> Option<(usize, usize, usize)> {
        let n = n as isize;
        let lo = (-d).max(0);
        let hi = (n - d).min(n);
        (hi > lo).then(|| (lo as usize, hi as usize, (lo + d) as usize))
    };
    let (Some(a), Some(b), Some(c)) = (range(sh[0], d[0]), range(sh[1], d[1]), range(sh[2], d[2]))
    else {
        return out;
    };
    out.slice_mut(s![a.0..a.1, b.0..b.1, c.0..c.1])
        .assign(&x.slice(s![
            a.2..a.2 + (a.1 - a.0),
            b.2..b.2 + (b.1 - b.0),
            c.2..c.2 + (c.1 - c.0)
        ]));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn var(v: &Array3<f64>) -> f64 {
        let n = v.len() as f64;
        let m = v.sum() / n;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n
    }

    fn noisy(base: Array3<f64>, std: f64, seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, std).unwrap();
        base.mapv(|x| x + d.sample(&mut rng))
    }

    #[test]
    fn sigma_estimate_tracks_truth() {
        let v = noisy(Array3::from_elem((24, 24, 24), 1.0), 0.1, 1);
        let s = estimate_noise_sigma(&v);
        assert!((s - 0.1).abs() < 0.01, "{s}");
    }

    #[test]
    fn variance_drops_and_second_pass_is_weak() {
        let v = VolumeGrid::from_array(noisy(Array3::from_elem((20, 20, 20), 1.0), 0.1, 2));
        let once = denoise(&v);
        let twice = denoise(&once);
        let (v0, v1, v2) = (var(&v.voxels), var(&once.voxels), var(&twice.voxels));
        assert!(v1 < v0);
        assert!(v1 - v2 < 0.1 * (v0 - v1), "{v0} {v1} {v2}");
    }

    #[test]
    fn noiseless_constant_unchanged() {
        let v = VolumeGrid::from_array(Array3::from_elem((6, 7, 8), 3.0f64));
        assert!(denoise(&v).voxels.iter().all(|&x| (x - 3.0).abs() < 1e-6));
    }

    #[test]
    fn step_edge_stays_put() {
        let base = Array3::from_shape_fn((16, 16, 16), |(i, _, _)| if i < 8 { 0.0 } else { 1.0 });
        let v = VolumeGrid::from_array(noisy(base, 0.1, 3));
        let out = denoise(&v);
        let centroid = |a: &Array3<f64>| {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..15 {
                let g = (a.index_axis(ndarray::Axis(0), i + 1).sum()
                    - a.index_axis(ndarray::Axis(0), i).sum())
                .abs();
                num += g * (i as f64 + 0.5);
                den += g;
            }
            num / den
        };
        assert!((centroid(&out.voxels) - 7.5).abs() < 1.0);
    }
}
