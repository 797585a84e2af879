//! Grad-CAM and saliency attribution maps, overlay rendering and agreement scores.

use std::fmt;
use std::path::Path;

use font8x8::UnicodeFonts;
use image::{Rgb, RgbImage};
use indexmap::IndexMap;
use ndarray::{Array3, Array4, ArrayD, Axis, IxDyn};
use rano_tensor::{Graph, NodeId, Scalar};
use serde::{Deserialize, Serialize};

use crate::cohort::{RanoLabel, N_CLASSES};
use crate::error::{Error, IoContext, Result};
use crate::models::{Mode, Network};
use crate::preprocess::resize_to;
use crate::volume::VolumeGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AttributionMethod {
    GradCam,
    Saliency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    Raw,
    MinMax,
}

/// How the target class was chosen; reported next to every map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetSource {
    Predicted,
    GroundTruth,
    Explicit,
}

impl fmt::Display for TargetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetSource::Predicted => "predicted",
            TargetSource::GroundTruth => "ground-truth",
            TargetSource::Explicit => "explicit",
        })
    }
}

/// One attribution map on the input grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionVolume {
    pub values: Array3<f64>,
    pub method: AttributionMethod,
    pub target_class: usize,
    pub target_source: TargetSource,
    pub normalization: Normalization,
    /// Feature layer (Grad-CAM) or input channel name (saliency).
    pub source: String,
}

impl AttributionVolume {
    pub fn shape(&self) -> [usize; 3] {
        let s = self.values.shape();
        [s[0], s[1], s[2]]
    }

    /// Rescale to [0, 1]; a constant map becomes all zeros.
    pub fn minmax(mut self) -> Self {
        let (lo, hi) = min_max(self.values.iter().copied());
        let span = hi - lo;
        self.values
            .mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        self.normalization = Normalization::MinMax;
        self
    }

    /// NIfTI volume carrying the geometry of `reference`.
    pub fn to_grid(&self, reference: &VolumeGrid<f32>) -> Result<VolumeGrid<f32>> {
        if reference.shape() != self.shape() {
            return Err(Error::ShapeMismatch(format!(
                "attribution {:?} vs reference {:?}",
                self.shape(),
                reference.shape()
            )));
        }
        Ok(reference.with_voxels(self.values.mapv(|v| v as f32)))
    }

    pub fn write_nifti(&self, reference: &VolumeGrid<f32>, path: &Path) -> Result<()> {
        self.to_grid(reference)?.write_nifti(path)
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    })
}

fn batch_of_one<T: Scalar>(
    g: &mut Graph<T>,
    x: &Array4<T>,
    clinical: Option<&[T]>,
) -> (NodeId, Option<NodeId>) {
    let xi = g.input(x.clone().insert_axis(Axis(0)).into_dyn(), true);
    let ci = clinical.map(|c| {
        g.input(
            ArrayD::from_shape_vec(IxDyn(&[1, c.len()]), c.to_vec()).unwrap(),
            false,
        )
    });
    (xi, ci)
}

fn one_hot<T: Scalar>(class: usize) -> Result<ArrayD<T>> {
    if class >= N_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "target class {class} out of range"
        )));
    }
    let mut s = ArrayD::zeros(IxDyn(&[1, N_CLASSES]));
    s[[0, class]] = T::one();
    Ok(s)
}

fn spatial_len(shape: &[usize]) -> usize {
    if shape.len() == 5 {
        shape[2..].iter().product()
    } else {
        0
    }
}

/// Eval-mode prediction for a single sample, as `N_CLASSES` probabilities.
pub fn class_probabilities<T: Scalar>(
    net: &Network<T>,
    x: &Array4<T>,
    clinical: Option<&[T]>,
) -> Result<Vec<f64>> {
    let c = clinical.map(|c| ndarray::Array2::from_shape_vec((1, c.len()), c.to_vec()).unwrap());
    let out = net.predict(x.clone().insert_axis(Axis(0)).into_dyn(), c)?;
    Ok(out
        .probabilities
        .row(0)
        .iter()
        .map(|v| v.as_f64())
        .collect())
}

/// Resolve the target class: the ground truth when given, else the argmax.
pub fn resolve_target<T: Scalar>(
    net: &Network<T>,
    x: &Array4<T>,
    clinical: Option<&[T]>,
    truth: Option<usize>,
) -> Result<(usize, TargetSource)> {
    match truth {
        Some(t) => Ok((t, TargetSource::GroundTruth)),
        None => {
            let p = class_probabilities(net, x, clinical)?;
            let best = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
            Ok((best, TargetSource::Predicted))
        }
    }
}

/// Layers of `net` whose maps keep more than one voxel for an input shaped like `x`.
pub fn spatial_layers<T: Scalar>(net: &Network<T>, x: &Array4<T>) -> Result<Vec<String>> {
    let mut g = Graph::new();
    let (xi, ci) = batch_of_one(&mut g, x, zero_clinical::<T>(net.clinical_dim).as_deref());
    let out = net.forward(&mut g, xi, ci, Mode::Eval)?;
    Ok(valid_layers(&g, &out.layers))
}

fn zero_clinical<T: Scalar>(dim: usize) -> Option<Vec<T>> {
    (dim > 0).then(|| vec![T::zero(); dim])
}

fn valid_layers<T: Scalar>(g: &Graph<T>, layers: &IndexMap<String, NodeId>) -> Vec<String> {
    layers
        .iter()
        .filter(|(_, &id)| spatial_len(g.shape(id)) > 1)
        .map(|(n, _)| n.clone())
        .collect()
}

/// Grad-CAM of `target` at `layer` (deepest spatial layer when `None`), upsampled to the input grid.
pub fn grad_cam<T: Scalar>(
    net: &Network<T>,
    x: &Array4<T>,
    clinical: Option<&[T]>,
    target: usize,
    layer: Option<&str>,
) -> Result<AttributionVolume> {
    let seed = one_hot::<T>(target)?;
    let mut g = Graph::new();
    let (xi, ci) = batch_of_one(&mut g, x, clinical);
    let out = net.forward(&mut g, xi, ci, Mode::Eval)?;
    let valid = valid_layers(&g, &out.layers);
    let name = match layer {
        Some(l) => l.to_string(),
        None => {
            let default = net.backbone.default_cam_layer();
            if valid.contains(&default) {
                default
            } else {
                let deepest = valid
                    .last()
                    .cloned()
                    .ok_or_else(|| Error::NonSpatialLayer {
                        layer: default.clone(),
                        valid: valid.clone(),
                    })?;
                log::info!("{default} has no spatial extent here; using {deepest}");
                deepest
            }
        }
    };
    if !valid.contains(&name) {
        return Err(Error::NonSpatialLayer { layer: name, valid });
    }
    let node = out.layers[&name];
    let grads = g.backward_from(out.logits, seed);
    let a = g.value(node);
    let sh = a.shape().to_vec();
    let (c, d, h, w) = (sh[1], sh[2], sh[3], sh[4]);
    let mut cam = Array3::<f64>::zeros((d, h, w));
    if let Some(da) = grads.get(node) {
        if da.iter().any(|v| !v.as_f64().is_finite()) {
            return Err(Error::NonFiniteGradient(format!(
                "Grad-CAM gradient at {name}"
            )));
        }
        let n_sp = (d * h * w) as f64;
        for ch in 0..c {
            let alpha = da
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), ch)
                .iter()
                .map(|v| v.as_f64())
                .sum::<f64>()
                / n_sp;
            if alpha == 0.0 {
                continue;
            }
            let fm = a.index_axis(Axis(0), 0);
            let fm = fm.index_axis(Axis(0), ch);
            for ((i, j, k), v) in cam.indexed_iter_mut() {
                *v += alpha * fm[[i, j, k]].as_f64();
            }
        }
    }
    cam.mapv_inplace(|v| v.max(0.0));
    let grid = [x.shape()[1], x.shape()[2], x.shape()[3]];
    let values = if [d, h, w] == grid {
        cam
    } else {
        resize_to(&cam, grid)
    };
    Ok(AttributionVolume {
        values,
        method: AttributionMethod::GradCam,
        target_class: target,
        target_source: TargetSource::Explicit,
        normalization: Normalization::Raw,
        source: name,
    })
}

/// Gradient of logit `target` w.r.t. a `[C, D, H, W]` input under an arbitrary forward.
pub fn input_gradient<T: Scalar>(
    x: &Array4<T>,
    target: usize,
    forward: &dyn Fn(&mut Graph<T>, NodeId) -> Result<NodeId>,
) -> Result<Array4<f64>> {
    let mut g = Graph::new();
    let xi = g.input(x.clone().insert_axis(Axis(0)).into_dyn(), true);
    let logits = forward(&mut g, xi)?;
    let mut seed = ArrayD::zeros(g.value(logits).raw_dim());
    let width = *g.shape(logits).last().unwrap();
    if target >= width {
        return Err(Error::InvalidArgument(format!(
            "target class {target} out of range"
        )));
    }
    seed[[0, target]] = T::one();
    let grads = g.backward_from(logits, seed);
    let gx = match grads.get(xi) {
        Some(gx) => gx.mapv(|v| v.as_f64()),
        None => ArrayD::zeros(g.value(xi).raw_dim()),
    };
    if let Some(bad) = gx.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient(format!(
            "input gradient at flat index {bad} for class {target}"
        )));
    }
    Ok(gx
        .index_axis_move(Axis(0), 0)
        .into_dimensionality()
        .unwrap())
}

/// Per-channel saliency (absolute input gradient unless `signed`) of logit `target`.
pub fn saliency<T: Scalar>(
    net: &Network<T>,
    x: &Array4<T>,
    clinical: Option<&[T]>,
    target: usize,
    signed: bool,
) -> Result<Vec<AttributionVolume>> {
    let c = clinical.map(|c| c.to_vec());
    let gx = input_gradient(x, target, &|g, xi| {
        let ci = c.as_ref().map(|c| {
            g.input(
                ArrayD::from_shape_vec(IxDyn(&[1, c.len()]), c.clone()).unwrap(),
                false,
            )
        });
        Ok(net.forward(g, xi, ci, Mode::Eval)?.logits)
    })?;
    let names = net.spec.channel_names();
    Ok(gx
        .outer_iter()
        .enumerate()
        .map(|(i, ch)| AttributionVolume {
            values: if signed {
                ch.to_owned()
            } else {
                ch.mapv(f64::abs)
            },
            method: AttributionMethod::Saliency,
            target_class: target,
            target_source: TargetSource::Explicit,
            normalization: Normalization::Raw,
            source: names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("channel{i}")),
        })
        .collect())
}

/// Voxel-wise maximum over channel saliency maps.
pub fn combine_channels(maps: &[AttributionVolume]) -> Option<AttributionVolume> {
    let mut it = maps.iter();
    let mut out = it.next()?.clone();
    for m in it {
        out.values.zip_mut_with(&m.values, |a, &b| *a = a.max(b));
    }
    out.source = "max-over-channels".into();
    Some(out)
}

/// Mask of the voxels at or above the `1 - fraction` quantile (ties kept).
/// A constant map carries no ranking and gives an empty mask.
pub fn top_fraction_mask(values: &Array3<f64>, fraction: f64) -> Array3<bool> {
    let (lo, hi) = min_max(values.iter().copied());
    if !(hi > lo) {
        return values.mapv(|_| false);
    }
    let n = values.len();
    let k = ((n as f64 * fraction).ceil() as usize).clamp(1, n);
    let mut sorted: Vec<f64> = values.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let cut = sorted[k - 1];
    values.mapv(|v| v >= cut)
}

/// Dice overlap of two masks; two empty masks give 1.
pub fn dice(a: &Array3<bool>, b: &Array3<bool>) -> f64 {
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Dice of the top-decile masks of two maps.
pub fn top_decile_dice(a: &AttributionVolume, b: &AttributionVolume) -> f64 {
    dice(
        &top_fraction_mask(&a.values, 0.1),
        &top_fraction_mask(&b.values, 0.1),
    )
}

/// One row of the per-sample probability table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityRow {
    pub sample: String,
    pub truth: Option<String>,
    pub predicted: String,
    pub p_pd: f64,
    pub p_sd: f64,
    pub p_pr: f64,
    pub p_cr: f64,
    pub target_class: String,
    pub target_source: String,
    pub cam_saliency_dice: Option<f64>,
}

impl ProbabilityRow {
    pub fn new(sample: &str, probs: &[f64], truth: Option<usize>) -> Self {
        let name = |i: usize| format!("{:?}", RanoLabel::TRAINABLE[i]);
        let pred = (0..N_CLASSES)
            .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
            .unwrap();
        Self {
            sample: sample.to_string(),
            truth: truth.map(name),
            predicted: name(pred),
            p_pd: probs[0],
            p_sd: probs[1],
            p_pr: probs[2],
            p_cr: probs[3],
            target_class: name(pred),
            target_source: TargetSource::Predicted.to_string(),
            cam_saliency_dice: None,
        }
    }
}

pub fn write_probability_table(path: &Path, rows: &[ProbabilityRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)?;
    Ok(())
}

/// Blue to red through cyan, green and yellow.
fn jet(t: f64) -> [f64; 3] {
    let t = t.clamp(0.0, 1.0);
    let f = |c: f64| (1.5 - (4.0 * t - c).abs()).clamp(0.0, 1.0);
    [f(3.0), f(2.0), f(1.0)]
}

fn draw_text(img: &mut RgbImage, x0: u32, y0: u32, text: &str, color: Rgb<u8>) {
    for (n, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else {
            continue;
        };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits >> col & 1 == 1 {
                    let (x, y) = (x0 + n as u32 * 8 + col, y0 + row as u32);
                    if x < img.width() && y < img.height() {
                        img.put_pixel(x, y, color);
                    }
                }
            }
        }
    }
}

/// Axial slices of `reference` with `attr` blended on top, a colour bar and a
/// caption listing the class probabilities.
pub fn render_overlay(
    reference: &VolumeGrid<f32>,
    attr: &AttributionVolume,
    slices: &[usize],
    probabilities: &[f64],
    path: &Path,
) -> Result<()> {
    let [d, h, w] = reference.shape();
    if attr.shape() != [d, h, w] {
        return Err(Error::ShapeMismatch(format!(
            "attribution {:?} vs reference {:?}",
            attr.shape(),
            [d, h, w]
        )));
    }
    if slices.is_empty() {
        return Err(Error::InvalidArgument("no slices requested".into()));
    }
    if let Some(&s) = slices.iter().find(|&&s| s >= d) {
        return Err(Error::InvalidArgument(format!(
            "slice {s} out of range (depth {d})"
        )));
    }
    let scale = (160 / h.max(w)).max(1) as u32;
    let (pw, ph) = (w as u32 * scale, h as u32 * scale);
    let gap = 4u32;
    let bar_w = 14u32;
    let caption_h = 40u32;
    let width = slices.len() as u32 * (pw + gap) + bar_w + 40;
    let height = ph + caption_h + 2 * gap;
    let mut img = RgbImage::from_pixel(width, height, Rgb([0, 0, 0]));

    let (rlo, rhi) = min_max(reference.voxels.iter().map(|&v| v as f64));
    let rspan = if rhi > rlo { rhi - rlo } else { 1.0 };
    // Colour scale saturates at the 99th percentile so single voxels do not wash out the map.
    let mut mags: Vec<f64> = attr.values.iter().map(|v| v.abs()).collect();
    mags.sort_by(f64::total_cmp);
    let amax = mags[((mags.len() - 1) as f64 * 0.99).round() as usize];
    let amax = if amax > 0.0 {
        amax
    } else {
        mags.last().copied().unwrap_or(0.0)
    };
    for (p, &s) in slices.iter().enumerate() {
        let x0 = p as u32 * (pw + gap);
        for i in 0..h {
            for j in 0..w {
                let gray = (reference.voxels[[s, i, j]] as f64 - rlo) / rspan;
                let a = if amax > 0.0 {
                    (attr.values[[s, i, j]].abs() / amax).min(1.0)
                } else {
                    0.0
                };
                let heat = jet(a);
                let alpha = 0.5 * a;
                let px = Rgb(std::array::from_fn(|k| {
                    (255.0 * ((1.0 - alpha) * gray + alpha * heat[k])).round() as u8
                }));
                for dy in 0..scale {
                    for dx in 0..scale {
                        img.put_pixel(x0 + j as u32 * scale + dx, gap + i as u32 * scale + dy, px);
                    }
                }
            }
        }
        draw_text(
            &mut img,
            x0 + 2,
            gap + 2,
            &format!("z={s}"),
            Rgb([255, 255, 255]),
        );
    }
    let bx = slices.len() as u32 * (pw + gap);
    for y in 0..ph {
        let c = jet(1.0 - y as f64 / (ph.max(2) - 1) as f64);
        for x in 0..bar_w {
            img.put_pixel(bx + x, gap + y, Rgb(c.map(|v| (255.0 * v) as u8)));
        }
    }
    draw_text(&mut img, bx + bar_w + 2, gap, "1", Rgb([255, 255, 255]));
    draw_text(
        &mut img,
        bx + bar_w + 2,
        gap + ph - 8,
        "0",
        Rgb([255, 255, 255]),
    );

    let probs: Vec<String> = RanoLabel::TRAINABLE
        .iter()
        .zip(probabilities)
        .map(|(l, p)| format!("{l:?} {:.2}", p))
        .collect();
    let y = ph + 2 * gap + 4;
    draw_text(&mut img, 2, y, &probs.join("  "), Rgb([255, 255, 255]));
    let method = match attr.method {
        AttributionMethod::GradCam => "Grad-CAM",
        AttributionMethod::Saliency => "saliency",
    };
    let target = format!(
        "{method} {} target {:?} ({})",
        attr.source,
        RanoLabel::TRAINABLE
            .get(attr.target_class)
            .copied()
            .unwrap_or(RanoLabel::PD),
        attr.target_source
    );
    draw_text(&mut img, 2, y + 14, &target, Rgb([200, 200, 200]));
    img.save(path)?;
    Ok(())
}

/// `n` evenly spaced interior axial slices of a depth-`d` volume.
pub fn even_slices(d: usize, n: usize) -> Vec<usize> {
    (1..=n)
        .map(|i| (i * d / (n + 1)).min(d.saturating_sub(1)))
        .collect()
}
