//! 3D DenseNet-BC: 7³ stem with stride 2, 3³ max pool, dense blocks of
//! bottleneck layers joined by 1³ compressing transitions with 2³ average
//! pooling, final batch norm and ReLU.

use indexmap::IndexMap;
use rano_tensor::{Conv3dCfg, NodeId, ParamStore, Scalar};

use super::layers::{decl_bn, decl_conv, Ctx};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseNet {
    pub in_channels: usize,
    pub init_features: usize,
    pub growth_rate: usize,
    pub bn_size: usize,
    pub block_config: Vec<usize>,
}

impl DenseNet {
    fn new(in_channels: usize, blocks: &[usize]) -> Self {
        Self {
            in_channels,
            init_features: 64,
            growth_rate: 32,
            bn_size: 4,
            block_config: blocks.to_vec(),
        }
    }

    pub fn d121(in_channels: usize) -> Self {
        Self::new(in_channels, &[6, 12, 24, 16])
    }

    pub fn d169(in_channels: usize) -> Self {
        Self::new(in_channels, &[6, 12, 32, 32])
    }

    pub fn d264(in_channels: usize) -> Self {
        Self::new(in_channels, &[6, 12, 64, 48])
    }

    /// Channels of the pooled feature vector.
    pub fn feature_dim(&self) -> usize {
        let mut c = self.init_features;
        for (i, &n) in self.block_config.iter().enumerate() {
            c += n * self.growth_rate;
            if i + 1 < self.block_config.len() {
                c /= 2;
            }
        }
        c
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut v = vec!["conv0".to_string()];
        v.extend((1..=self.block_config.len()).map(|i| format!("block{i}")));
        v.push("final_relu".into());
        v
    }

    pub fn declare<T: Scalar>(&self, s: &mut ParamStore<T>) {
        decl_conv(
            s,
            "features.conv0",
            self.init_features,
            self.in_channels,
            7,
            false,
        );
        decl_bn(s, "features.norm0", self.init_features);
        let mut c = self.init_features;
        let inner = self.bn_size * self.growth_rate;
        for (b, &n) in self.block_config.iter().enumerate() {
            for l in 0..n {
                let p = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
                decl_bn(s, &format!("{p}.norm1"), c);
                decl_conv(s, &format!("{p}.conv1"), inner, c, 1, false);
                decl_bn(s, &format!("{p}.norm2"), inner);
                decl_conv(s, &format!("{p}.conv2"), self.growth_rate, inner, 3, false);
                c += self.growth_rate;
            }
            if b + 1 < self.block_config.len() {
                let p = format!("features.transition{}", b + 1);
                decl_bn(s, &format!("{p}.norm"), c);
                decl_conv(s, &format!("{p}.conv"), c / 2, c, 1, false);
                c /= 2;
            }
        }
        decl_bn(s, "features.norm5", c);
    }

    /// Pooled `[N, F]` features and the named spatial maps.
    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
    ) -> (NodeId, IndexMap<String, NodeId>) {
        let mut maps = IndexMap::new();
        let mut h = cx.conv(x, "features.conv0", Conv3dCfg::new(7, 2, 3));
        h = cx.bn(h, "features.norm0");
        h = cx.g.relu(h);
        maps.insert("conv0".to_string(), h);
        h = cx.max_pool(h, Conv3dCfg::new(3, 2, 1));
        for (b, &n) in self.block_config.iter().enumerate() {
            for l in 0..n {
                let p = format!("features.denseblock{}.denselayer{}", b + 1, l + 1);
                let mut y = cx.bn(h, &format!("{p}.norm1"));
                y = cx.g.relu(y);
                y = cx.conv(y, &format!("{p}.conv1"), Conv3dCfg::new(1, 1, 0));
                y = cx.bn(y, &format!("{p}.norm2"));
                y = cx.g.relu(y);
                y = cx.conv(y, &format!("{p}.conv2"), Conv3dCfg::new(3, 1, 1));
                h = cx.g.concat(&[h, y], 1);
            }
            maps.insert(format!("block{}", b + 1), h);
            if b + 1 < self.block_config.len() {
                let p = format!("features.transition{}", b + 1);
                h = cx.bn(h, &format!("{p}.norm"));
                h = cx.g.relu(h);
                h = cx.conv(h, &format!("{p}.conv"), Conv3dCfg::new(1, 1, 0));
                h = cx.avg_pool(h, 2, 2);
            }
        }
        h = cx.bn(h, "features.norm5");
        h = cx.g.relu(h);
        maps.insert("final_relu".to_string(), h);
        (cx.g.global_avg_pool(h), maps)
    }
}
