//! N4-style multiplicative bias estimation in the log domain.
//!
//! Each iteration sharpens the histogram of the current log-corrected image by
//! Wiener deconvolution of a Gaussian, maps every voxel to its expected
//! sharpened value, and smooths the residual into the field estimate. A wide
//! masked Gaussian stands in for the B-spline fit.

use ndarray::{Array3, Zip};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::filter::{block_mean, masked_smooth, upsample_blocks};
use crate::volume::VolumeGrid;
use rano_tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasParams {
    pub max_iterations: usize,
    pub histogram_bins: usize,
    /// Full width at half maximum of the assumed bias blur, in log units.
    pub fwhm: f64,
    pub wiener_noise: f64,
    /// Field smoothing width as a fraction of the largest (shrunk) extent.
    pub field_sigma_fraction: f64,
    /// Largest per-axis extent of the grid the field is estimated on.
    pub max_working_extent: usize,
    pub convergence: f64,
}

impl Default for BiasParams {
    fn default() -> Self {
        Self {
            max_iterations: 30,
            histogram_bins: 200,
            fwhm: 0.15,
            wiener_noise: 0.01,
            field_sigma_fraction: 0.2,
            max_working_extent: 64,
            convergence: 1e-4,
        }
    }
}

pub fn correct_bias<T: Scalar>(v: &VolumeGrid<T>) -> VolumeGrid<T> {
    correct_bias_with(v, &BiasParams::default())
}

/// Expected sharpened value for every histogram bin.
fn sharpen_map(values: &[f64], lo: f64, hi: f64, p: &BiasParams) -> Vec<f64> {
    let nb = p.histogram_bins;
    let width = (hi - lo) / (nb - 1) as f64;
    let mut hist = vec![0.0; nb];
    for &x in values {
        let c = ((x - lo) / width).clamp(0.0, (nb - 1) as f64);
        let i = (c.floor() as usize).min(nb - 2);
        let f = c - i as f64;
        hist[i] += 1.0 - f;
        hist[i + 1] += f;
    }
    let n = (2 * nb).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);

    let sigma_bins = p.fwhm / width / (8.0 * 2f64.ln()).sqrt();
    let mut kernel = vec![Complex::new(0.0, 0.0); n];
    for (i, slot) in kernel.iter_mut().enumerate() {
        let d = if i <= n / 2 {
            i as f64
        } else {
            i as f64 - n as f64
        };
        slot.re = (-d * d / (2.0 * sigma_bins * sigma_bins).max(1e-12)).exp();
    }
    let ks: f64 = kernel.iter().map(|c| c.re).sum();
    kernel.iter_mut().for_each(|c| c.re /= ks);
    fwd.process(&mut kernel);

    let mut h: Vec<Complex<f64>> = (0..n)
        .map(|i| Complex::new(if i < nb { hist[i] } else { 0.0 }, 0.0))
        .collect();
    fwd.process(&mut h);
    let mut u: Vec<Complex<f64>> = h
        .iter()
        .zip(&kernel)
        .map(|(&hv, &f)| hv * f.conj() / (f.norm_sqr() + p.wiener_noise))
        .collect();
    inv.process(&mut u);
    let u: Vec<f64> = u.iter().map(|c| (c.re / n as f64).max(0.0)).collect();

    let conv = |sig: Vec<f64>| -> Vec<f64> {
        let mut s: Vec<Complex<f64>> = sig.into_iter().map(|x| Complex::new(x, 0.0)).collect();
        fwd.process(&mut s);
        s.iter_mut().zip(&kernel).for_each(|(a, &f)| *a *= f);
        inv.process(&mut s);
        s.iter().map(|c| c.re / n as f64).collect()
    };
    let centers: Vec<f64> = (0..n).map(|i| lo + i as f64 * width).collect();
    let num = conv(u.iter().zip(&centers).map(|(a, c)| a * c).collect());
    let den = conv(u.clone());
    (0..nb)
        .map(|i| {
            if den[i] > 1e-12 {
                num[i] / den[i]
            } else {
                centers[i]
            }
        })
        .collect()
}

/// Divide out a smooth multiplicative field. Zero voxels are background and
/// stay zero; an all-zero or constant volume is returned unchanged.
pub fn correct_bias_with<T: Scalar>(v: &VolumeGrid<T>, p: &BiasParams) -> VolumeGrid<T> {
    let full = v.voxels.mapv(|x| x.as_f64().max(0.0));
    let mask_full = full.mapv(|x| x > 0.0);
    if !mask_full.iter().any(|&m| m) {
        log::warn!("{}: all-zero volume, bias correction skipped", v.source);
        return v.clone();
    }
    let shape = v.shape();
    let factor = shape
        .iter()
        .max()
        .unwrap()
        .div_ceil(p.max_working_extent)
        .max(1);
    let (small, mask) = block_mean(&full, &mask_full, factor);
    let logv = Zip::from(&small)
        .and(&mask)
        .map_collect(|&x, &m| if m { x.ln() } else { 0.0 });
    let sigma = p.field_sigma_fraction * *small.shape().iter().max().unwrap() as f64;

    let mut field = Array3::<f64>::zeros(small.raw_dim());
    for _ in 0..p.max_iterations {
        let resid: Vec<f64> =
            Zip::from(&logv)
                .and(&field)
                .and(&mask)
                .fold(Vec::new(), |mut acc, &l, &f, &m| {
                    if m {
                        acc.push(l - f);
                    }
                    acc
                });
        let lo = resid.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = resid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo < 1e-9 {
            break;
        }
        let map = sharpen_map(&resid, lo, hi, p);
        let nb = p.histogram_bins;
        let width = (hi - lo) / (nb - 1) as f64;
        let sharpened = |x: f64| {
            let c = ((x - lo) / width).clamp(0.0, (nb - 1) as f64);
            let i = (c.floor() as usize).min(nb - 2);
            let f = c - i as f64;
            map[i] * (1.0 - f) + map[i + 1] * f
        };
        let target = Zip::from(&logv)
            .and(&field)
            .and(&mask)
            .map_collect(|&l, &f, &m| if m { l - sharpened(l - f) } else { 0.0 });
        let mut next = masked_smooth(&target, &mask, sigma);
        let (sum, cnt) =
            Zip::from(&next).and(&mask).fold(
                (0.0, 0.0),
                |(s, c), &x, &m| if m { (s + x, c + 1.0) } else { (s, c) },
            );
        let mean = sum / cnt;
        next.mapv_inplace(|x| x - mean);
        let change = Zip::from(&next)
            .and(&field)
            .and(&mask)
            .fold(
                0.0f64,
                |acc, &a, &b, &m| if m { acc.max((a - b).abs()) } else { acc },
            );
        field = next;
        if change < p.convergence {
            break;
        }
    }
    let field_full = upsample_blocks(&field, factor, shape);
    let out = Zip::from(&v.voxels).and(&field_full).map_collect(|&x, &f| {
        if x.as_f64() > 0.0 {
            T::lit(x.as_f64() / f.exp())
        } else {
            x
        }
    });
    log::debug!(
        "{}: bias field estimated on {:?} grid",
        v.source,
        small.shape()
    );
    v.with_voxels(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(v: &Array3<f64>, mask: &Array3<bool>) -> f64 {
        let xs: Vec<f64> = v
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&x, _)| x)
            .collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt() / mean
    }

    #[test]
    fn smooth_gain_on_uniform_phantom_is_reduced() {
        let n = 32;
        let c = (n as f64 - 1.0) / 2.0;
        let phantom = Array3::from_shape_fn((n, n, n), |(i, j, k)| {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2) + (k as f64 - c).powi(2);
            if r2 < 14.0f64.powi(2) {
                let gain =
                    1.0 + 0.3 * ((i as f64 - c) / n as f64) + 0.2 * ((k as f64 - c) / n as f64);
                100.0 * gain
            } else {
                0.0
            }
        });
        let mask = phantom.mapv(|x| x > 0.0);
        let v = VolumeGrid::from_array(phantom.clone());
        let out = correct_bias(&v);
        assert_eq!(out.shape(), v.shape());
        let (before, after) = (cv(&phantom, &mask), cv(&out.voxels, &mask));
        assert!(after < before, "cv {before} -> {after}");
    }

    #[test]
    fn constant_and_zero_volumes_unchanged() {
        let v = VolumeGrid::from_array(Array3::from_elem((8, 9, 10), 7.0f64));
        let out = correct_bias(&v);
        assert!(out.voxels.iter().all(|&x| (x - 7.0).abs() < 1e-6));
        let z = VolumeGrid::from_array(Array3::<f64>::zeros((4, 4, 4)));
        assert_eq!(correct_bias(&z), z);
    }
}
