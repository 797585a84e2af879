//! Rigid then affine registration to a template by maximizing mutual
//! information with Nelder-Mead, followed by trilinear resampling onto the
//! template grid.

use argmin::core::{CostFunction, Executor, State};
use argmin::solver::neldermead::NelderMead;
use ndarray::Array3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Affine, SpaceTag, VolumeGrid};
use rano_tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegParams {
    pub bins: usize,
    pub max_samples: usize,
    pub rigid_iterations: u64,
    pub affine_iterations: u64,
    /// Initial simplex step for translations (mm) and rotations (rad).
    pub translation_step: f64,
    pub rotation_step: f64,
    pub scale_step: f64,
    pub affine: bool,
}

impl Default for RegParams {
    fn default() -> Self {
        Self {
            bins: 32,
            max_samples: 40_000,
            rigid_iterations: 400,
            affine_iterations: 400,
            translation_step: 4.0,
            rotation_step: 0.1,
            scale_step: 0.05,
            affine: true,
        }
    }
}

/// Maps template world coordinates (mm) to moving world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub matrix: Affine,
}

impl Transform {
    pub fn identity() -> Self {
        Self {
            matrix: [
                [1.0, 0.0, 0.0, 0.0],
                [0.0, 1.0, 0.0, 0.0],
                [0.0, 0.0, 1.0, 0.0],
            ],
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.matrix;
        [0, 1, 2].map(|r| m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + m[r][3])
    }

    /// `[rx, ry, rz, tx, ty, tz, (log sx, log sy, log sz, shxy, shxz, shyz)]` about `center`.
    fn from_params(p: &[f64], center: [f64; 3]) -> Self {
        let (cx, sx) = (p[0].cos(), p[0].sin());
        let (cy, sy) = (p[1].cos(), p[1].sin());
        let (cz, sz) = (p[2].cos(), p[2].sin());
        let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
        let mut m = mat_mul(&rz, &mat_mul(&ry, &rx));
        if p.len() >= 12 {
            let s = [
                [p[6].exp(), 0.0, 0.0],
                [0.0, p[7].exp(), 0.0],
                [0.0, 0.0, p[8].exp()],
            ];
            let sh = [[1.0, p[9], p[10]], [0.0, 1.0, p[11]], [0.0, 0.0, 1.0]];
            m = mat_mul(&m, &mat_mul(&s, &sh));
        }
        let mut out = [[0.0; 4]; 3];
        for r in 0..3 {
            out[r][..3].copy_from_slice(&m[r]);
            let mc: f64 = (0..3).map(|c| m[r][c] * center[c]).sum();
            out[r][3] = center[r] - mc + p[3 + r];
        }
        Self { matrix: out }
    }
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut o = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            o[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    o
}

fn grid_affine<T: Scalar>(v: &VolumeGrid<T>) -> Affine {
    v.affine.unwrap_or([
        [v.spacing[0], 0.0, 0.0, 0.0],
        [0.0, v.spacing[1], 0.0, 0.0],
        [0.0, 0.0, v.spacing[2], 0.0],
    ])
}

fn invert(a: &Affine) -> Option<Affine> {
    let m = [
        [a[0][0], a[0][1], a[0][2]],
        [a[1][0], a[1][1], a[1][2]],
        [a[2][0], a[2][1], a[2][2]],
    ];
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 {
        return None;
    }
    let inv = [
        [
            (m[1][1] * m[2][2] - m[1][2] * m[2][1]) / det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) / det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) / det,
        ],
        [
            (m[1][2] * m[2][0] - m[1][0] * m[2][2]) / det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) / det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) / det,
        ],
        [
            (m[1][0] * m[2][1] - m[1][1] * m[2][0]) / det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) / det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) / det,
        ],
    ];
    let mut out = [[0.0; 4]; 3];
    for r in 0..3 {
        out[r][..3].copy_from_slice(&inv[r]);
        out[r][3] = -(0..3).map(|c| inv[r][c] * a[c][3]).sum::<f64>();
    }
    Some(out)
}

fn compose(a: &Affine, b: &Affine) -> Affine {
    let mut o = [[0.0; 4]; 3];
    for r in 0..3 {
        for c in 0..4 {
            o[r][c] =
                (0..3).map(|k| a[r][k] * b[k][c]).sum::<f64>() + if c == 3 { a[r][3] } else { 0.0 };
        }
    }
    o
}

fn apply(a: &Affine, p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2] + a[r][3])
}

/// Trilinear interpolation at a continuous voxel coordinate; `None` outside.
pub fn trilinear(v: &Array3<f64>, p: [f64; 3]) -> Option<f64> {
    let s = v.shape();
    let mut base = [0usize; 3];
    let mut frac = [0.0; 3];
    for a in 0..3 {
        if !(p[a] >= 0.0 && p[a] <= (s[a] - 1) as f64) {
            return None;
        }
        let f = p[a].floor();
        base[a] = (f as usize).min(s[a].saturating_sub(2));
        frac[a] = p[a] - base[a] as f64;
        if s[a] == 1 {
            base[a] = 0;
            frac[a] = 0.0;
        }
    }
    let mut acc = 0.0;
    for corner in 0..8 {
        let d = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        for a in 0..3 {
            w *= if d[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            idx[a] = (base[a] + d[a]).min(s[a] - 1);
        }
        if w != 0.0 {
            acc += w * v[idx];
        }
    }
    Some(acc)
}

struct MiCost<'a> {
    moving: &'a Array3<f64>,
    fixed_bins: Vec<usize>,
    points: Vec<[f64; 3]>,
    fixed_to_world: Affine,
    world_to_moving: Affine,
    center: [f64; 3],
    m_lo: f64,
    m_scale: f64,
    bins: usize,
}

impl MiCost<'_> {
    fn mutual_information(&self, t: &Transform) -> f64 {
        let vox = compose(
            &self.world_to_moving,
            &compose(&t.matrix, &self.fixed_to_world),
        );
        let nb = self.bins;
        let joint = self
            .points
            .par_chunks(4096)
            .zip(self.fixed_bins.par_chunks(4096))
            .map(|(pts, fb)| {
                let mut h = vec![0.0; nb * nb];
                for (p, &f) in pts.iter().zip(fb) {
                    let m = trilinear(self.moving, apply(&vox, *p)).unwrap_or(0.0);
                    let c = ((m - self.m_lo) * self.m_scale).clamp(0.0, (nb - 1) as f64);
                    let i = (c.floor() as usize).min(nb - 2);
                    let w = c - i as f64;
                    h[f * nb + i] += 1.0 - w;
                    h[f * nb + i + 1] += w;
                }
                h
            })
            .collect::<Vec<_>>()
            .into_iter()
            .fold(vec![0.0; nb * nb], |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            });
        let total: f64 = joint.iter().sum();
        let mut pf = vec![0.0; nb];
        let mut pm = vec![0.0; nb];
        for f in 0..nb {
            for m in 0..nb {
                let v = joint[f * nb + m] / total;
                pf[f] += v;
                pm[m] += v;
            }
        }
        let mut mi = 0.0;
        for f in 0..nb {
            for m in 0..nb {
                let v = joint[f * nb + m] / total;
                if v > 0.0 {
                    mi += v * (v / (pf[f] * pm[m])).ln();
                }
            }
        }
        mi
    }
}

impl CostFunction for &MiCost<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Vec<f64>) -> std::result::Result<f64, argmin::core::Error> {
        Ok(-self.mutual_information(&Transform::from_params(p, self.center)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationReport {
    pub transform: Transform,
    pub mi_initial: f64,
    pub mi_final: f64,
    pub iterations: u64,
}

fn center_of_mass(v: &Array3<f64>, to_world: &Affine) -> Option<[f64; 3]> {
    let (mut s, mut acc) = (0.0, [0.0; 3]);
    for ((i, j, k), &x) in v.indexed_iter() {
        if x > 0.0 {
            s += x;
            acc[0] += x * i as f64;
            acc[1] += x * j as f64;
            acc[2] += x * k as f64;
        }
    }
    (s > 0.0).then(|| apply(to_world, acc.map(|a| a / s)))
}

fn simplex(x0: &[f64], steps: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![x0.to_vec()];
    for (i, &st) in steps.iter().enumerate() {
        let mut v = x0.to_vec();
        v[i] += st;
        out.push(v);
    }
    out
}

fn optimize(
    cost: &MiCost<'_>,
    x0: Vec<f64>,
    steps: &[f64],
    iters: u64,
) -> Result<(Vec<f64>, f64, u64)> {
    let solver = NelderMead::new(simplex(&x0, steps))
        .with_sd_tolerance(1e-7)
        .map_err(|e| Error::Registration(e.to_string()))?;
    let res = Executor::new(cost, solver)
        .configure(|s| s.max_iters(iters))
        .run()
        .map_err(|e| Error::Registration(e.to_string()))?;
    let state = res.state();
    let best = state.get_best_param().cloned().unwrap_or(x0);
    Ok((best, -state.get_best_cost(), state.get_iter()))
}

/// Estimate the template-to-moving transform and resample onto the template grid.
pub fn register_with_report<T: Scalar>(
    v: &VolumeGrid<T>,
    template: &VolumeGrid<T>,
    p: &RegParams,
) -> Result<(VolumeGrid<T>, RegistrationReport)> {
    let moving = v.voxels.mapv(|x| x.as_f64());
    let fixed = template.voxels.mapv(|x| x.as_f64());
    let f_aff = grid_affine(template);
    let m_aff = grid_affine(v);
    let m_inv = invert(&m_aff)
        .ok_or_else(|| Error::Registration(format!("{}: singular affine", v.source)))?;

    let fs = template.shape();
    let n = fs[0] * fs[1] * fs[2];
    let stride = ((n as f64 / p.max_samples as f64).cbrt().ceil() as usize).max(1);
    let mut points = Vec::new();
    let mut fvals = Vec::new();
    for i in (0..fs[0]).step_by(stride) {
        for j in (0..fs[1]).step_by(stride) {
            for k in (0..fs[2]).step_by(stride) {
                points.push([i as f64, j as f64, k as f64]);
                fvals.push(fixed[[i, j, k]]);
            }
        }
    }
    let range = |it: &mut dyn Iterator<Item = f64>| {
        it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| {
            (lo.min(x), hi.max(x))
        })
    };
    let (f_lo, f_hi) = range(&mut fvals.iter().copied());
    let (m_lo, m_hi) = range(&mut moving.iter().copied());
    if !(f_hi > f_lo) || !(m_hi > m_lo) {
        return Err(Error::Registration(format!("{}: constant image", v.source)));
    }
    let nb = p.bins;
    let fixed_bins = fvals
        .iter()
        .map(|&x| (((x - f_lo) / (f_hi - f_lo)) * (nb - 1) as f64).round() as usize)
        .collect();
    let center = apply(&f_aff, [0, 1, 2].map(|a| (fs[a] as f64 - 1.0) / 2.0));
    let cost = MiCost {
        moving: &moving,
        fixed_bins,
        points,
        fixed_to_world: f_aff,
        world_to_moving: m_inv,
        center,
        m_lo,
        m_scale: (nb - 1) as f64 / (m_hi - m_lo),
        bins: nb,
    };

    let mut x0 = vec![0.0; 6];
    if let (Some(cf), Some(cm)) = (
        center_of_mass(&fixed, &f_aff),
        center_of_mass(&moving, &m_aff),
    ) {
        for a in 0..3 {
            x0[3 + a] = cm[a] - cf[a];
        }
    }
    let mi_initial = cost.mutual_information(&Transform::from_params(&x0, center));
    let (r, t) = (p.rotation_step, p.translation_step);
    let (mut best, mut mi, mut iters) =
        optimize(&cost, x0, &[r, r, r, t, t, t], p.rigid_iterations)?;
    let (b2, mi2, it2) = optimize(
        &cost,
        best.clone(),
        &[r / 2.0, r / 2.0, r / 2.0, t / 2.0, t / 2.0, t / 2.0],
        p.rigid_iterations,
    )?;
    if mi2 >= mi {
        (best, mi) = (b2, mi2);
    }
    iters += it2;
    if p.affine {
        let mut xa = best.clone();
        xa.extend([0.0; 6]);
        let s = p.scale_step;
        let steps = [
            r / 4.0,
            r / 4.0,
            r / 4.0,
            t / 4.0,
            t / 4.0,
            t / 4.0,
            s,
            s,
            s,
            s,
            s,
            s,
        ];
        let (ba, mia, ita) = optimize(&cost, xa, &steps, p.affine_iterations)?;
        iters += ita;
        if mia > mi {
            (best, mi) = (ba, mia);
        }
    }
    if !mi.is_finite() || mi + 1e-9 < mi_initial {
        return Err(Error::Registration(format!(
            "{}: optimizer did not improve mutual information ({mi_initial:.4} -> {mi:.4})",
            v.source
        )));
    }
    let transform = Transform::from_params(&best, center);
    let out = resample(v, template, &transform)?;
    Ok((
        out,
        RegistrationReport {
            transform,
            mi_initial,
            mi_final: mi,
            iterations: iters,
        },
    ))
}

pub fn register_to_template<T: Scalar>(
    v: &VolumeGrid<T>,
    template: &VolumeGrid<T>,
) -> Result<VolumeGrid<T>> {
    register_with_report(v, template, &RegParams::default()).map(|(out, _)| out)
}

/// Sample `v` on the template grid through `t`; zero outside `v`.
pub fn resample<T: Scalar>(
    v: &VolumeGrid<T>,
    template: &VolumeGrid<T>,
    t: &Transform,
) -> Result<VolumeGrid<T>> {
    let moving = v.voxels.mapv(|x| x.as_f64());
    let m_inv = invert(&grid_affine(v))
        .ok_or_else(|| Error::Registration(format!("{}: singular affine", v.source)))?;
    let vox = compose(&m_inv, &compose(&t.matrix, &grid_affine(template)));
    let fs = template.shape();
    let vals: Vec<T> = (0..fs[0] * fs[1] * fs[2])
        .into_par_iter()
        .map(|idx| {
            let p = [
                (idx / (fs[1] * fs[2])) as f64,
                ((idx / fs[2]) % fs[1]) as f64,
                (idx % fs[2]) as f64,
            ];
            T::lit(trilinear(&moving, apply(&vox, p)).unwrap_or(0.0))
        })
        .collect();
    Ok(VolumeGrid {
        voxels: Array3::from_shape_vec(fs, vals).unwrap(),
        spacing: template.spacing,
        affine: template.affine,
        space: SpaceTag::Template,
        source: v.source.clone(),
    })
}
