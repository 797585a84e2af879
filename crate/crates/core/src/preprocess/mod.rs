//! Per-volume preprocessing chain: reorientation, bias correction, denoising,
//! template registration, z-normalization, and timepoint subtraction.

mod bias;
mod denoise;
mod filter;
mod register;

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array3, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::volume::{AxisCode, Orientation, SpaceTag, VolumeGrid};
use rano_tensor::Scalar;

pub use bias::{correct_bias, correct_bias_with, BiasParams};
pub use denoise::{denoise, denoise_with, estimate_noise_sigma, DenoiseParams};
pub use filter::gaussian_smooth;
pub use register::{
    register_to_template, register_with_report, resample, trilinear, RegParams, RegistrationReport,
    Transform,
};

/// Bumped whenever a step changes numerically; part of every cache key.
pub const PIPELINE_VERSION: &str = "rano-preprocess-1";

/// Permute and flip axes so that indices increase towards Right, Anterior, Superior.
pub fn reorient<T: Scalar>(v: &VolumeGrid<T>) -> Result<VolumeGrid<T>> {
    let o = v
        .orientation()
        .ok_or_else(|| Error::MissingOrientation(v.source.clone()))?;
    let affine = v.affine.unwrap();
    let mut perm = [0usize; 3];
    let mut flip = [false; 3];
    for (j, code) in o.0.iter().enumerate() {
        let (k, pos) = code.world_axis();
        perm[k] = j;
        flip[k] = !pos;
    }
    let mut seen = [false; 3];
    for &j in &perm {
        seen[j] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::MissingOrientation(format!(
            "{} (degenerate axes {o})",
            v.source
        )));
    }
    let shape = v.shape();
    let mut vox = v.voxels.view().permuted_axes(perm);
    let mut out_affine = [[0.0; 4]; 3];
    for r in 0..3 {
        out_affine[r][3] = affine[r][3];
    }
    for k in 0..3 {
        let j = perm[k];
        let sign = if flip[k] { -1.0 } else { 1.0 };
        for r in 0..3 {
            out_affine[r][k] = sign * affine[r][j];
            if flip[k] {
                out_affine[r][3] += affine[r][j] * (shape[j] as f64 - 1.0);
            }
        }
        if flip[k] {
            vox.invert_axis(Axis(k));
        }
    }
    debug_assert_eq!(
        VolumeGrid::<T> {
            affine: Some(out_affine),
            ..v.clone()
        }
        .orientation(),
        Some(Orientation([AxisCode::R, AxisCode::A, AxisCode::S]))
    );
    Ok(VolumeGrid {
        voxels: vox.as_standard_layout().into_owned(),
        spacing: perm.map(|j| v.spacing[j]),
        affine: Some(out_affine),
        space: v.space,
        source: v.source.clone(),
    })
}

/// Z-score over the nonzero support; background stays zero. Uses the
/// population standard deviation.
pub fn znormalize<T: Scalar>(v: &VolumeGrid<T>) -> Result<VolumeGrid<T>> {
    let (mut n, mut sum) = (0usize, 0.0f64);
    for &x in v.voxels.iter().filter(|x| **x != T::zero()) {
        n += 1;
        sum += x.as_f64();
    }
    if n == 0 {
        return Err(Error::ConstantVolume(format!(
            "{}: empty support",
            v.source
        )));
    }
    let mean = sum / n as f64;
    let var = v
        .voxels
        .iter()
        .filter(|x| **x != T::zero())
        .map(|x| (x.as_f64() - mean).powi(2))
        .sum::<f64>()
        / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::ConstantVolume(format!(
            "{}: constant support",
            v.source
        )));
    }
    let out = v.voxels.mapv(|x| {
        if x == T::zero() {
            x
        } else {
            T::lit((x.as_f64() - mean) / std)
        }
    });
    Ok(v.with_voxels(out))
}

/// Voxel-wise `curr - prev`; metadata from `curr`.
pub fn subtract<T: Scalar>(curr: &VolumeGrid<T>, prev: &VolumeGrid<T>) -> Result<VolumeGrid<T>> {
    if curr.shape() != prev.shape() {
        return Err(Error::ShapeMismatch(format!(
            "subtract {:?} ({}) - {:?} ({})",
            curr.shape(),
            curr.source,
            prev.shape(),
            prev.source
        )));
    }
    let mut out = Array3::zeros(curr.voxels.raw_dim());
    Zip::from(&mut out)
        .and(&curr.voxels)
        .and(&prev.voxels)
        .for_each(|o, &c, &p| *o = c - p);
    Ok(curr.with_voxels(out))
}

/// Trilinear resampling onto a `[D, H, W]` grid with corner voxels aligned.
pub fn resize_to(v: &Array3<f64>, grid: [usize; 3]) -> Array3<f64> {
    let s = v.shape();
    let map = |i: usize, a: usize| {
        if grid[a] <= 1 {
            (s[a] as f64 - 1.0) / 2.0
        } else {
            i as f64 * (s[a] as f64 - 1.0) / (grid[a] as f64 - 1.0)
        }
    };
    Array3::from_shape_fn((grid[0], grid[1], grid[2]), |(i, j, k)| {
        trilinear(v, [map(i, 0), map(j, 1), map(k, 2)]).unwrap_or(0.0)
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineParams {
    pub bias: BiasParams,
    pub denoise: DenoiseParams,
    pub registration: RegParams,
    /// Skip registration when the input already has the template's shape.
    pub skip_registration_if_aligned: bool,
}

/// One row of the preprocessing log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessLogRow {
    pub input: String,
    pub output: String,
    pub content_hash: String,
    pub cached: bool,
    pub reorient_ms: u64,
    pub bias_ms: u64,
    pub denoise_ms: u64,
    pub register_ms: u64,
    pub znorm_ms: u64,
    pub mi_final: Option<f64>,
    pub flag: Option<String>,
}

pub struct Pipeline {
    pub template: VolumeGrid<f32>,
    pub params: PipelineParams,
    pub cache_dir: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Pipeline {
    pub fn new(
        template: VolumeGrid<f32>,
        params: PipelineParams,
        cache_dir: impl Into<PathBuf>,
    ) -> Result<Self> {
        let template = reorient(&template)?;
        Ok(Self {
            template,
            params,
            cache_dir: cache_dir.into(),
        })
    }

    /// Cache key over file bytes, pipeline version, parameters and template.
    pub fn cache_key(&self, input: &Path) -> Result<String> {
        let mut h = Sha256::new();
        let mut f = fs::File::open(input).at(input)?;
        let mut buf = vec![0u8; 1 << 16];
        loop {
            let n = f.read(&mut buf).at(input)?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
        h.update(PIPELINE_VERSION.as_bytes());
        h.update(serde_json::to_vec(&self.params)?);
        for d in self.template.shape() {
            h.update((d as u64).to_le_bytes());
        }
        for v in self.template.voxels.iter() {
            h.update(v.to_le_bytes());
        }
        Ok(hex(&h.finalize()))
    }

    pub fn cached_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(format!("{key}.nii.gz"))
    }

    /// Run the chain on one file, or return the cached result.
    pub fn process(&self, input: &Path) -> Result<(VolumeGrid<f32>, PreprocessLogRow)> {
        let key = self.cache_key(input)?;
        let out = self.cached_path(&key);
        let mut row = PreprocessLogRow {
            input: input.display().to_string(),
            output: out.display().to_string(),
            content_hash: key,
            cached: false,
            reorient_ms: 0,
            bias_ms: 0,
            denoise_ms: 0,
            register_ms: 0,
            znorm_ms: 0,
            mi_final: None,
            flag: None,
        };
        if out.exists() {
            let mut v = VolumeGrid::<f32>::read_nifti(&out)?;
            v.space = SpaceTag::Template;
            row.cached = true;
            return Ok((v, row));
        }
        let raw = VolumeGrid::<f32>::read_nifti(input)?.cast::<f64>();
        let t = Instant::now();
        let v = reorient(&raw)?;
        row.reorient_ms = t.elapsed().as_millis() as u64;
        let v = v.with_voxels(v.voxels.mapv(|x| x.max(0.0)));
        let t = Instant::now();
        let v = correct_bias_with(&v, &self.params.bias);
        row.bias_ms = t.elapsed().as_millis() as u64;
        let t = Instant::now();
        let v = denoise_with(&v, &self.params.denoise);
        row.denoise_ms = t.elapsed().as_millis() as u64;
        let t = Instant::now();
        let template = self.template.cast::<f64>();
        let v = if self.params.skip_registration_if_aligned && v.shape() == template.shape() {
            VolumeGrid {
                space: SpaceTag::Template,
                spacing: template.spacing,
                affine: template.affine,
                ..v
            }
        } else {
            let (reg, rep) = register_with_report(&v, &template, &self.params.registration)?;
            row.mi_final = Some(rep.mi_final);
            reg
        };
        row.register_ms = t.elapsed().as_millis() as u64;
        let t = Instant::now();
        let v = znormalize(&v)?;
        row.znorm_ms = t.elapsed().as_millis() as u64;
        let v = v.cast::<f32>();
        fs::create_dir_all(&self.cache_dir).at(&self.cache_dir)?;
        let tmp = out.with_extension("partial.nii.gz");
        v.write_nifti(&tmp)?;
        fs::rename(&tmp, &out).at(&out)?;
        Ok((v, row))
    }

    /// Process files in parallel. Failures become flagged rows, never aborts.
    pub fn process_all(&self, inputs: &[PathBuf]) -> Vec<PreprocessLogRow> {
        inputs
            .par_iter()
            .map(|p| match self.process(p) {
                Ok((_, row)) => row,
                Err(e) => {
                    log::warn!("preprocess {}: {e}", p.display());
                    PreprocessLogRow {
                        input: p.display().to_string(),
                        output: String::new(),
                        content_hash: String::new(),
                        cached: false,
                        reorient_ms: 0,
                        bias_ms: 0,
                        denoise_ms: 0,
                        register_ms: 0,
                        znorm_ms: 0,
                        mi_final: None,
                        flag: Some(e.to_string()),
                    }
                }
            })
            .collect()
    }
}

pub fn write_log(path: &Path, rows: &[PreprocessLogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

pub fn read_log(path: &Path) -> Result<Vec<PreprocessLogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Orientation;
    use approx::assert_abs_diff_eq;

    fn ramp() -> Array3<f64> {
        Array3::from_shape_fn((4, 4, 4), |(i, j, k)| (16 * i + 4 * j + k) as f64)
    }

    #[test]
    fn ras_is_identity() {
        let v = VolumeGrid::new(ramp(), [1.0, 2.0, 3.0], Some(Orientation::RAS));
        let r = reorient(&v).unwrap();
        assert_eq!(r.voxels, v.voxels);
        assert_eq!(r.affine, v.affine);
    }

    #[test]
    fn lps_ramp_flips_first_two_axes() {
        let v = VolumeGrid::new(ramp(), [1.0; 3], Some(Orientation::LPS));
        let r = reorient(&v).unwrap();
        assert_eq!(r.orientation(), Some(Orientation::RAS));
        for ((i, j, k), &x) in r.voxels.indexed_iter() {
            assert_eq!(x, v.voxels[[3 - i, 3 - j, k]]);
        }
        assert_eq!(reorient(&r).unwrap(), r);
    }

    #[test]
    fn permuted_axes_are_restored() {
        use AxisCode::*;
        let v = VolumeGrid::new(
            Array3::from_shape_fn((2, 3, 4), |(i, j, k)| (100 * i + 10 * j + k) as f64),
            [1.0, 2.0, 3.0],
            Some(Orientation([S, R, P])),
        );
        let r = reorient(&v).unwrap();
        assert_eq!(r.shape(), [3, 4, 2]);
        assert_eq!(r.spacing, [2.0, 3.0, 1.0]);
        assert_eq!(r.voxels[[1, 0, 1]], v.voxels[[1, 1, 3]]);
        let mut sorted_in: Vec<_> = v.voxels.iter().copied().collect();
        let mut sorted_out: Vec<_> = r.voxels.iter().copied().collect();
        sorted_in.sort_by(f64::total_cmp);
        sorted_out.sort_by(f64::total_cmp);
        assert_eq!(sorted_in, sorted_out);
    }

    #[test]
    fn missing_orientation_names_the_file() {
        let mut v = VolumeGrid::new(ramp(), [1.0; 3], None);
        v.source = "scan.nii.gz".into();
        let e = reorient(&v).unwrap_err().to_string();
        assert!(e.contains("scan.nii.gz"), "{e}");
    }

    #[test]
    fn znorm_closed_form() {
        let v = VolumeGrid::from_array(
            Array3::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 2.0, 3.0]).unwrap(),
        );
        let z = znormalize(&v).unwrap();
        let s = 1.5f64.sqrt();
        assert_abs_diff_eq!(z.voxels[[0, 0, 0]], 0.0);
        assert_abs_diff_eq!(
            z.voxels[[0, 0, 1]],
            -1.0 / (2.0f64 / 3.0).sqrt(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(z.voxels[[0, 0, 3]], s, epsilon = 1e-12);
        assert!(matches!(
            znormalize(&VolumeGrid::from_array(Array3::from_elem((2, 2, 2), 5.0))),
            Err(Error::ConstantVolume(_))
        ));
    }

    #[test]
    fn subtract_contract() {
        let a = VolumeGrid::from_array(ramp());
        let b = a.with_voxels(a.voxels.mapv(|x| x + 1.0));
        assert!(subtract(&a, &a).unwrap().voxels.iter().all(|&x| x == 0.0));
        assert!(subtract(&b, &a).unwrap().voxels.iter().all(|&x| x == 1.0));
        let c = VolumeGrid::from_array(Array3::<f64>::zeros((2, 2, 2)));
        assert!(matches!(subtract(&a, &c), Err(Error::ShapeMismatch(_))));
    }
}
