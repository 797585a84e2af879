//! AlexNet with every operator made volumetric.
//!
//! | layer | op |
//! |-------|----|
//! | conv1 | 11³ conv, stride 4, pad 2, 64 ch, ReLU, 3³/2 max pool |
//! | conv2 | 5³ conv, pad 2, 192 ch, ReLU, 3³/2 max pool |
//! | conv3 | 3³ conv, pad 1, 384 ch, ReLU |
//! | conv4 | 3³ conv, pad 1, 256 ch, ReLU |
//! | conv5 | 3³ conv, pad 1, 256 ch, ReLU, 3³/2 max pool |
//! | classifier | global average pool, dropout, fc 4096, ReLU, dropout, fc 4096, ReLU |
//!
//! Pools are skipped when the grid is smaller than the window; inputs need
//! at least 7 voxels per axis.

use indexmap::IndexMap;
use rano_tensor::{Conv3dCfg, NodeId, ParamStore, Scalar};

use super::layers::{decl_conv, decl_linear, Ctx};
use crate::error::{Error, Result};

pub const MIN_EXTENT: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct AlexNet3d {
    pub in_channels: usize,
    pub fc: usize,
    pub dropout: f64,
}

const CONVS: [(&str, usize, usize, usize, usize); 5] = [
    ("conv1", 64, 11, 4, 2),
    ("conv2", 192, 5, 1, 2),
    ("conv3", 384, 3, 1, 1),
    ("conv4", 256, 3, 1, 1),
    ("conv5", 256, 3, 1, 1),
];

impl AlexNet3d {
    pub fn new(in_channels: usize) -> Self {
        Self {
            in_channels,
            fc: 4096,
            dropout: 0.5,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.fc
    }

    pub fn layer_names(&self) -> Vec<String> {
        CONVS.iter().map(|c| c.0.to_string()).collect()
    }

    pub fn declare<T: Scalar>(&self, s: &mut ParamStore<T>) {
        let mut c = self.in_channels;
        for (name, out, k, _, _) in CONVS {
            decl_conv(s, &format!("features.{name}"), out, c, k, true);
            c = out;
        }
        decl_linear(s, "classifier.fc1", self.fc, c);
        decl_linear(s, "classifier.fc2", self.fc, self.fc);
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
    ) -> Result<(NodeId, IndexMap<String, NodeId>)> {
        let grid = &cx.g.shape(x)[2..];
        if grid.iter().any(|&d| d < MIN_EXTENT) {
            return Err(Error::ShapeMismatch(format!(
                "AlexNet3d needs at least {MIN_EXTENT}³ input, got {grid:?}"
            )));
        }
        let mut maps = IndexMap::new();
        let pool = Conv3dCfg::new(3, 2, 0);
        let mut h = x;
        for (name, _, k, s, p) in CONVS {
            h = cx.conv(h, &format!("features.{name}"), Conv3dCfg::new(k, s, p));
            h = cx.g.relu(h);
            maps.insert(name.to_string(), h);
            if matches!(name, "conv1" | "conv2" | "conv5") {
                h = cx.max_pool(h, pool);
            }
        }
        h = cx.g.global_avg_pool(h);
        h = cx.dropout(h, self.dropout);
        h = cx.linear(h, "classifier.fc1");
        h = cx.g.relu(h);
        h = cx.dropout(h, self.dropout);
        h = cx.linear(h, "classifier.fc2");
        h = cx.g.relu(h);
        Ok((h, maps))
    }
}
