//! Input assembly and the architecture registry.
//!
//! Channel order is modality-major in canonical modality order, previous
//! timepoint before current: `[CT1 prev, CT1 curr, T1W prev, …]`. With
//! subtraction each modality contributes the single channel `curr − prev`.

pub mod alexnet;
pub mod checkpoint;
pub mod densenet;
pub mod layers;
pub mod vit;

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use ndarray::{Array2, Array3, Array4, ArrayD, Axis};
use rano_tensor::{softmax_last, Graph, NodeId, ParamKind, ParamStore, Scalar};
use serde::{Deserialize, Serialize};

use crate::cohort::{Modality, ModalitySet, StudySample, TimepointRecord, N_CLASSES};
use crate::error::{Error, Result};

pub use alexnet::AlexNet3d;
pub use densenet::DenseNet;
pub use layers::Mode;
pub use vit::Vit3d;

pub const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct InputSpec {
    pub modalities: ModalitySet,
    pub use_subtraction: bool,
    pub use_clinical: bool,
    pub channel_count: usize,
    /// Template grid `[D, H, W]`.
    pub spatial: [usize; 3],
}

impl InputSpec {
    pub fn new(
        modalities: ModalitySet,
        use_subtraction: bool,
        use_clinical: bool,
        spatial: [usize; 3],
    ) -> Self {
        let channel_count = modalities.len() * if use_subtraction { 1 } else { 2 };
        Self {
            modalities,
            use_subtraction,
            use_clinical,
            channel_count,
            spatial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expect = self.modalities.len() * if self.use_subtraction { 1 } else { 2 };
        if self.modalities.is_empty() || expect != self.channel_count {
            return Err(Error::InvalidArgument(format!(
                "input spec {} with subtraction={} has {} channels, expected {expect}",
                self.modalities, self.use_subtraction, self.channel_count
            )));
        }
        if self.spatial.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "empty spatial grid {:?}",
                self.spatial
            )));
        }
        Ok(())
    }

    /// Human-readable channel names in assembly order.
    pub fn channel_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for m in self.modalities.iter() {
            if self.use_subtraction {
                v.push(format!("{m} curr-prev"));
            } else {
                v.push(format!("{m} prev"));
                v.push(format!("{m} curr"));
            }
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ArchitectureId {
    Densenet121,
    Densenet169,
    Densenet264,
    ViT3D,
    AlexNet3D,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 5] = [
        ArchitectureId::Densenet121,
        ArchitectureId::Densenet169,
        ArchitectureId::Densenet264,
        ArchitectureId::ViT3D,
        ArchitectureId::AlexNet3D,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureId::Densenet121 => "Densenet121",
            ArchitectureId::Densenet169 => "Densenet169",
            ArchitectureId::Densenet264 => "Densenet264",
            ArchitectureId::ViT3D => "ViT3D",
            ArchitectureId::AlexNet3D => "AlexNet3D",
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase().replace(['-', '_'], "");
        Ok(match t.as_str() {
            "densenet121" => ArchitectureId::Densenet121,
            "densenet169" => ArchitectureId::Densenet169,
            "densenet264" => ArchitectureId::Densenet264,
            "vit" | "vit3d" => ArchitectureId::ViT3D,
            "alexnet" | "alexnet3d" => ArchitectureId::AlexNet3D,
            _ => return Err(Error::UnknownArchitecture(s.to_string())),
        })
    }
}

/// Construction options not implied by the architecture id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelOptions {
    pub vit_patch: usize,
}

impl Default for ModelOptions {
    fn default() -> Self {
        Self {
            vit_patch: vit::DEFAULT_PATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    DenseNet(DenseNet),
    Vit(Vit3d),
    AlexNet(AlexNet3d),
}

impl Backbone {
    pub fn feature_dim(&self) -> usize {
        match self {
            Backbone::DenseNet(b) => b.feature_dim(),
            Backbone::Vit(b) => b.feature_dim(),
            Backbone::AlexNet(b) => b.feature_dim(),
        }
    }

    /// Layers usable for Grad-CAM, shallow to deep.
    pub fn layer_names(&self) -> Vec<String> {
        match self {
            Backbone::DenseNet(b) => b.layer_names(),
            Backbone::Vit(b) => b.layer_names(),
            Backbone::AlexNet(b) => b.layer_names(),
        }
    }

    pub fn default_cam_layer(&self) -> String {
        self.layer_names().pop().unwrap()
    }

    fn declare<T: Scalar>(&self, s: &mut ParamStore<T>) {
        match self {
            Backbone::DenseNet(b) => b.declare(s),
            Backbone::Vit(b) => b.declare(s),
            Backbone::AlexNet(b) => b.declare(s),
        }
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[N, 4]`.
    pub logits: NodeId,
    /// `[N, F]` before clinical fusion.
    pub embedding: NodeId,
    /// Named `[N, C, d, h, w]` feature maps.
    pub layers: IndexMap<String, NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<T> {
    pub logits: Array2<T>,
    pub probabilities: Array2<T>,
}

/// An architecture together with its parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    pub arch: ArchitectureId,
    pub spec: InputSpec,
    pub options: ModelOptions,
    pub clinical_dim: usize,
    pub init_seed: u64,
    pub backbone: Backbone,
    pub params: ParamStore<T>,
}

pub fn build_model<T: Scalar>(
    arch: ArchitectureId,
    spec: &InputSpec,
    init_seed: u64,
) -> Result<Network<T>> {
    build_model_with(arch, spec, init_seed, ModelOptions::default())
}

pub fn build_model_with<T: Scalar>(
    arch: ArchitectureId,
    spec: &InputSpec,
    init_seed: u64,
    options: ModelOptions,
) -> Result<Network<T>> {
    spec.validate()?;
    let c = spec.channel_count;
    let backbone = match arch {
        ArchitectureId::Densenet121 => Backbone::DenseNet(DenseNet::d121(c)),
        ArchitectureId::Densenet169 => Backbone::DenseNet(DenseNet::d169(c)),
        ArchitectureId::Densenet264 => Backbone::DenseNet(DenseNet::d264(c)),
        ArchitectureId::ViT3D => Backbone::Vit(Vit3d::new(c, spec.spatial, options.vit_patch)?),
        ArchitectureId::AlexNet3D => {
            if spec.spatial.iter().any(|&d| d < alexnet::MIN_EXTENT) {
                return Err(Error::InvalidArgument(format!(
                    "AlexNet3D needs at least {}³ input, spec has {:?}",
                    alexnet::MIN_EXTENT,
                    spec.spatial
                )));
            }
            Backbone::AlexNet(AlexNet3d::new(c))
        }
    };
    let mut params = ParamStore::new();
    backbone.declare(&mut params);
    declare_head(&mut params, backbone.feature_dim());
    params.initialize(init_seed);
    Ok(Network {
        arch,
        spec: spec.clone(),
        options,
        clinical_dim: 0,
        init_seed,
        backbone,
        params,
    })
}

fn declare_head<T: Scalar>(s: &mut ParamStore<T>, inp: usize) {
    s.declare("head.weight", &[N_CLASSES, inp], ParamKind::Weight);
    s.declare("head.bias", &[N_CLASSES], ParamKind::Bias);
}

/// Widen the head so a `clinical_dim` vector is concatenated to the pooled
/// features. Zero leaves the network untouched.
pub fn fuse_clinical<T: Scalar>(mut net: Network<T>, clinical_dim: usize) -> Network<T> {
    if clinical_dim == 0 {
        return net;
    }
    net.clinical_dim = clinical_dim;
    net.spec.use_clinical = true;
    net.reset_head(crate::seeds::derive_seed(
        net.init_seed,
        &["head", &clinical_dim.to_string()],
    ));
    net
}

impl<T: Scalar> Network<T> {
    /// Fresh 4-class head, keeping the clinical width.
    pub fn reset_head(&mut self, seed: u64) {
        self.params.remove_prefix(HEAD_PREFIX);
        declare_head(
            &mut self.params,
            self.backbone.feature_dim() + self.clinical_dim,
        );
        self.params.reinitialize_prefix(HEAD_PREFIX, seed);
    }

    pub fn backbone_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .map(|(n, _)| n.to_string())
            .filter(|n| !n.starts_with(HEAD_PREFIX))
            .collect()
    }

    /// `x` is `[N, C, D, H, W]`; `clinical` is `[N, clinical_dim]` when fused.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        x: NodeId,
        clinical: Option<NodeId>,
        mode: Mode,
    ) -> Result<ForwardOut> {
        let sh = g.shape(x).to_vec();
        if sh.len() != 5 || sh[1] != self.spec.channel_count {
            return Err(Error::ShapeMismatch(format!(
                "{} expects [N, {}, D, H, W], got {sh:?}",
                self.arch, self.spec.channel_count
            )));
        }
        let n = sh[0];
        match (clinical, self.clinical_dim) {
            (None, 0) => {}
            (Some(c), d) if d > 0 && g.shape(c) == [n, d] => {}
            (c, d) => {
                return Err(Error::ShapeMismatch(format!(
                    "clinical input {:?} for clinical width {d}",
                    c.map(|c| g.shape(c).to_vec())
                )))
            }
        }
        let mut cx = layers::Ctx::new(g, &self.params, mode);
        let (embedding, layers) = match &self.backbone {
            Backbone::DenseNet(b) => b.forward(&mut cx, x),
            Backbone::Vit(b) => b.forward(&mut cx, x)?,
            Backbone::AlexNet(b) => b.forward(&mut cx, x)?,
        };
        let feat = match clinical {
            Some(c) => cx.g.concat(&[embedding, c], 1),
            None => embedding,
        };
        let logits = cx.linear(feat, "head");
        Ok(ForwardOut {
            logits,
            embedding,
            layers,
        })
    }

    /// Evaluation-mode logits and probabilities.
    pub fn predict(&self, x: ArrayD<T>, clinical: Option<Array2<T>>) -> Result<ModelOutput<T>> {
        let mut g = Graph::new();
        let xi = g.input(x, false);
        let ci = clinical.map(|c| g.input(c.into_dyn(), false));
        let out = self.forward(&mut g, xi, ci, Mode::Eval)?;
        let logits = g
            .value(out.logits)
            .clone()
            .into_dimensionality()
            .expect("[N, 4] logits");
        let probabilities = softmax_last(&g.value(out.logits).clone())
            .into_dimensionality()
            .unwrap();
        Ok(ModelOutput {
            logits,
            probabilities,
        })
    }
}

/// Stack the channels of one sample in the documented order.
pub fn assemble_input<T: Scalar>(
    sample: &StudySample,
    spec: &InputSpec,
    load: &mut dyn FnMut(&TimepointRecord, Modality) -> Result<Array3<T>>,
) -> Result<Array4<T>> {
    let bad = |msg: String| Error::Sample {
        sample: sample.id(),
        msg,
    };
    let [d, h, w] = spec.spatial;
    let mut out = Array4::<T>::zeros((spec.channel_count, d, h, w));
    let mut c = 0;
    for m in spec.modalities.iter() {
        if !sample.prev.available.contains(m) || !sample.curr.available.contains(m) {
            return Err(bad(format!(
                "modality {m} missing from one of the timepoints"
            )));
        }
        let prev = load(&sample.prev, m)?;
        let curr = load(&sample.curr, m)?;
        for v in [&prev, &curr] {
            if v.shape() != spec.spatial {
                return Err(bad(format!(
                    "{m} volume has shape {:?}, template grid is {:?}",
                    v.shape(),
                    spec.spatial
                )));
            }
        }
        if spec.use_subtraction {
            out.index_axis_mut(Axis(0), c).assign(&(&curr - &prev));
            c += 1;
        } else {
            out.index_axis_mut(Axis(0), c).assign(&prev);
            out.index_axis_mut(Axis(0), c + 1).assign(&curr);
            c += 2;
        }
    }
    Ok(out)
}

/// Stack per-sample arrays into a `[N, C, D, H, W]` batch.
pub fn stack_batch<T: Scalar>(items: &[&Array4<T>]) -> ArrayD<T> {
    let views: Vec<_> = items
        .iter()
        .map(|a| a.view().insert_axis(Axis(0)))
        .collect();
    ndarray::concatenate(Axis(0), &views)
        .expect("equal sample shapes")
        .into_dyn()
}
