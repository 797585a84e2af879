//! Checkpoint files: an 8-byte magic, a little-endian `u64` header length, a
//! JSON header, then every tensor as little-endian `f32` in header order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rano_tensor::{ParamKind, Scalar};
use serde::{Deserialize, Serialize};

use super::{
    build_model_with, fuse_clinical, ArchitectureId, InputSpec, ModelOptions, Network, HEAD_PREFIX,
};
use crate::error::{Error, IoContext, Result};

pub const MAGIC: &[u8; 8] = b"RANOCKP1";
/// Smallest fraction of backbone tensors a partial load must match.
pub const MIN_MATCHED_FRACTION: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ArchitectureId,
    pub spec: InputSpec,
    pub options: ModelOptions,
    pub init_seed: u64,
    pub config_hash: String,
    pub fold: usize,
    pub clinical_dim: usize,
    pub tensors: Vec<TensorMeta>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::Weight => "weight",
        ParamKind::Bias => "bias",
        ParamKind::Scale => "scale",
        ParamKind::Embedding => "embedding",
        ParamKind::BufferZeros => "buffer_zeros",
        ParamKind::BufferOnes => "buffer_ones",
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &Network<T>,
    config_hash: &str,
    fold: usize,
    extra: serde_json::Value,
) -> Result<()> {
    let header = CheckpointHeader {
        arch: net.arch,
        spec: net.spec.clone(),
        options: net.options,
        init_seed: net.init_seed,
        config_hash: config_hash.to_string(),
        fold,
        clinical_dim: net.clinical_dim,
        tensors: net
            .params
            .iter()
            .map(|(n, e)| TensorMeta {
                name: n.to_string(),
                shape: e.value.shape().to_vec(),
                kind: kind_name(e.kind).into(),
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).at(d)?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::io::BufWriter::new(fs::File::create(&tmp).at(&tmp)?);
    f.write_all(MAGIC).at(&tmp)?;
    f.write_all(&(json.len() as u64).to_le_bytes()).at(&tmp)?;
    f.write_all(&json).at(&tmp)?;
    for (_, e) in net.params.iter() {
        for v in e.value.iter() {
            f.write_all(&(v.as_f64() as f32).to_le_bytes()).at(&tmp)?;
        }
    }
    f.into_inner()
        .map_err(|e| Error::Io {
            path: tmp.clone(),
            source: e.into_error(),
        })?
        .sync_all()
        .at(&tmp)?;
    fs::rename(&tmp, path).at(path)
}

/// Header and named tensors of a checkpoint file.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, IndexMap<String, ArrayD<f32>>)> {
    let bad = |msg: String| Error::Checkpoint {
        path: path.into(),
        msg,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .at(path)?
        .read_to_end(&mut bytes)
        .at(path)?;
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| bad(format!("invalid header: {e}")))?;
    let mut off = 16 + hlen;
    let mut tensors = IndexMap::new();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(off..off + 4 * n)
            .ok_or_else(|| bad(format!("truncated data for {}", t.name)))?;
        let vals: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(
            t.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&t.shape), vals).unwrap(),
        );
        off += 4 * n;
    }
    if off != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((header, tensors))
}

/// Rebuild the network a checkpoint was saved from.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Network<T>, CheckpointHeader)> {
    let (header, tensors) = read_checkpoint(path)?;
    let net = build_model_with::<T>(header.arch, &header.spec, header.init_seed, header.options)?;
    let mut net = fuse_clinical(net, header.clinical_dim);
    let names: Vec<String> = net.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let t = tensors.get(&name).ok_or_else(|| Error::Checkpoint {
            path: path.into(),
            msg: format!("tensor {name} missing"),
        })?;
        if t.shape() != net.params.get(&name).shape() {
            return Err(Error::Checkpoint {
                path: path.into(),
                msg: format!("shape mismatch for {name}"),
            });
        }
        net.params.set(&name, t.mapv(|v| T::lit(v as f64)));
    }
    Ok((net, header))
}

/// Copy name- and shape-matching backbone tensors into `net`; the head is
/// never copied. Returns the matched fraction of backbone tensors.
pub fn load_backbone<T: Scalar>(
    net: &mut Network<T>,
    tensors: &IndexMap<String, ArrayD<f32>>,
    source: &Path,
) -> Result<f64> {
    let names = net.backbone_param_names();
    let mut matched = 0;
    for name in &names {
        if let Some(t) = tensors.get(name) {
            if t.shape() == net.params.get(name).shape() {
                net.params.set(name, t.mapv(|v| T::lit(v as f64)));
                matched += 1;
            }
        }
    }
    let frac = if names.is_empty() {
        0.0
    } else {
        matched as f64 / names.len() as f64
    };
    log::info!(
        "{}: matched {matched}/{} backbone tensors ({:.1}%)",
        source.display(),
        names.len(),
        100.0 * frac
    );
    if frac < MIN_MATCHED_FRACTION {
        return Err(Error::Checkpoint {
            path: source.into(),
            msg: format!("only {matched} of {} backbone tensors matched", names.len()),
        });
    }
    debug_assert!(names.iter().all(|n| !n.starts_with(HEAD_PREFIX)));
    Ok(frac)
}
