//! 3D scalar images with voxel-to-world metadata, and NIfTI I/O.

use std::fmt;
use std::path::Path;

use ndarray::{Array3, Axis};
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use rano_tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpaceTag {
    Native,
    Template,
}

/// Direction in which a voxel index increases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AxisCode {
    R,
    L,
    A,
    P,
    S,
    I,
}

impl AxisCode {
    /// World axis (0 = x, 1 = y, 2 = z) and whether the direction is positive in RAS+.
    pub fn world_axis(self) -> (usize, bool) {
        match self {
            AxisCode::R => (0, true),
            AxisCode::L => (0, false),
            AxisCode::A => (1, true),
            AxisCode::P => (1, false),
            AxisCode::S => (2, true),
            AxisCode::I => (2, false),
        }
    }

    fn from_world(axis: usize, positive: bool) -> Self {
        match (axis, positive) {
            (0, true) => AxisCode::R,
            (0, false) => AxisCode::L,
            (1, true) => AxisCode::A,
            (1, false) => AxisCode::P,
            (2, true) => AxisCode::S,
            _ => AxisCode::I,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Orientation(pub [AxisCode; 3]);

impl Orientation {
    pub const RAS: Orientation = Orientation([AxisCode::R, AxisCode::A, AxisCode::S]);
    pub const LPS: Orientation = Orientation([AxisCode::L, AxisCode::P, AxisCode::S]);
}

impl fmt::Display for Orientation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in self.0 {
            write!(f, "{c:?}")?;
        }
        Ok(())
    }
}

/// Row-major 3x4 voxel-to-world (RAS+, mm) matrix.
pub type Affine = [[f64; 4]; 3];

pub fn affine_from_orientation(o: Orientation, spacing: [f64; 3]) -> Affine {
    let mut a = [[0.0; 4]; 3];
    for (j, code) in o.0.iter().enumerate() {
        let (k, pos) = code.world_axis();
        a[k][j] = if pos { spacing[j] } else { -spacing[j] };
    }
    a
}

/// A 3D scalar image. `affine` is `None` when the source file carried no
/// orientation (NIfTI method 1).
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid<T> {
    pub voxels: Array3<T>,
    pub spacing: [f64; 3],
    pub affine: Option<Affine>,
    pub space: SpaceTag,
    /// Source description used in error messages.
    pub source: String,
}

impl<T: Scalar> VolumeGrid<T> {
    pub fn new(voxels: Array3<T>, spacing: [f64; 3], orientation: Option<Orientation>) -> Self {
        Self {
            voxels,
            spacing,
            affine: orientation.map(|o| affine_from_orientation(o, spacing)),
            space: SpaceTag::Native,
            source: String::from("<memory>"),
        }
    }

    /// Unit spacing, RAS, native space.
    pub fn from_array(voxels: Array3<T>) -> Self {
        Self::new(voxels, [1.0; 3], Some(Orientation::RAS))
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }

    pub fn with_voxels(&self, voxels: Array3<T>) -> Self {
        Self {
            voxels,
            ..self.clone()
        }
    }

    /// Axis codes from the dominant world component of each affine column.
    pub fn orientation(&self) -> Option<Orientation> {
        let a = self.affine?;
        let mut codes = [AxisCode::R; 3];
        for (j, code) in codes.iter_mut().enumerate() {
            let k = (0..3)
                .max_by(|&p, &q| a[p][j].abs().total_cmp(&a[q][j].abs()))
                .unwrap();
            *code = AxisCode::from_world(k, a[k][j] >= 0.0);
        }
        Some(Orientation(codes))
    }

    pub fn cast<U: Scalar>(&self) -> VolumeGrid<U> {
        VolumeGrid {
            voxels: self.voxels.mapv(|v| U::lit(v.as_f64())),
            spacing: self.spacing,
            affine: self.affine,
            space: self.space,
            source: self.source.clone(),
        }
    }

    pub fn read_nifti(path: &Path) -> Result<Self> {
        let nerr = |msg: String| Error::Nifti {
            path: path.into(),
            msg,
        };
        let obj = ReaderOptions::new()
            .read_file(path)
            .map_err(|e| nerr(e.to_string()))?;
        let header = obj.header().clone();
        let data = obj
            .into_volume()
            .into_ndarray::<f64>()
            .map_err(|e| nerr(e.to_string()))?;
        let mut data = data;
        while data.ndim() > 3 && data.shape()[data.ndim() - 1] == 1 {
            let last = data.ndim() - 1;
            data = data.index_axis_move(Axis(last), 0);
        }
        let shape = data.shape().to_vec();
        let data = data
            .as_standard_layout()
            .into_owned()
            .into_dimensionality::<ndarray::Ix3>()
            .map_err(|_| nerr(format!("expected a 3D volume, got shape {shape:?}")))?;
        let spacing = [1, 2, 3].map(|i| {
            let s = header.pixdim[i].abs() as f64;
            if s > 0.0 {
                s
            } else {
                1.0
            }
        });
        Ok(Self {
            voxels: data.mapv(T::lit),
            spacing,
            affine: header_affine(&header, spacing),
            space: SpaceTag::Native,
            source: path.display().to_string(),
        })
    }

    /// Writes `f32` data; the affine goes to the sform.
    pub fn write_nifti(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.into(),
                source: e,
            })?;
        }
        let mut header = NiftiHeader::default();
        header.pixdim = [
            1.0,
            self.spacing[0] as f32,
            self.spacing[1] as f32,
            self.spacing[2] as f32,
            1.0,
            1.0,
            1.0,
            1.0,
        ];
        header.xyzt_units = 2;
        if let Some(a) = self.affine {
            header.sform_code = 1;
            header.qform_code = 0;
            header.srow_x = a[0].map(|v| v as f32);
            header.srow_y = a[1].map(|v| v as f32);
            header.srow_z = a[2].map(|v| v as f32);
        } else {
            header.sform_code = 0;
            header.qform_code = 0;
        }
        let data = self.voxels.mapv(|v| v.as_f64() as f32);
        WriterOptions::new(path)
            .reference_header(&header)
            .write_nifti(&data)
            .map_err(|e| Error::Nifti {
                path: path.into(),
                msg: e.to_string(),
            })
    }
}

fn header_affine(h: &NiftiHeader, spacing: [f64; 3]) -> Option<Affine> {
    if h.sform_code > 0 {
        let rows = [h.srow_x, h.srow_y, h.srow_z];
        return Some(rows.map(|r| r.map(|v| v as f64)));
    }
    if h.qform_code > 0 {
        let (b, c, d) = (h.quatern_b as f64, h.quatern_c as f64, h.quatern_d as f64);
        let a = (1.0 - (b * b + c * c + d * d)).max(0.0).sqrt();
        let r = [
            [
                a * a + b * b - c * c - d * d,
                2.0 * (b * c - a * d),
                2.0 * (b * d + a * c),
            ],
            [
                2.0 * (b * c + a * d),
                a * a + c * c - b * b - d * d,
                2.0 * (c * d - a * b),
            ],
            [
                2.0 * (b * d - a * c),
                2.0 * (c * d + a * b),
                a * a + d * d - b * b - c * c,
            ],
        ];
        let qfac = if h.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let scale = [spacing[0], spacing[1], spacing[2] * qfac];
        let off = [h.quatern_x as f64, h.quatern_y as f64, h.quatern_z as f64];
        let mut out = [[0.0; 4]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = r[i][j] * scale[j];
            }
            out[i][3] = off[i];
        }
        return Some(out);
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nifti_round_trip_keeps_orientation_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii.gz");
        let vox = Array3::from_shape_fn((3, 4, 5), |(i, j, k)| (i * 100 + j * 10 + k) as f32);
        let v = VolumeGrid::new(vox.clone(), [1.0, 2.0, 3.0], Some(Orientation::LPS));
        v.write_nifti(&p).unwrap();
        let r = VolumeGrid::<f32>::read_nifti(&p).unwrap();
        assert_eq!(r.voxels, vox);
        assert_eq!(r.spacing, [1.0, 2.0, 3.0]);
        assert_eq!(r.orientation(), Some(Orientation::LPS));
    }

    #[test]
    fn missing_orientation_reads_as_none() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nii");
        let v = VolumeGrid::new(Array3::<f32>::zeros((2, 2, 2)), [1.0; 3], None);
        v.write_nifti(&p).unwrap();
        assert_eq!(
            VolumeGrid::<f32>::read_nifti(&p).unwrap().orientation(),
            None
        );
    }
}
