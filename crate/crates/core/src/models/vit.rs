//! 3D vision transformer: non-overlapping cubic patch embedding, a learned
//! class token and position embedding, pre-norm encoder blocks.
//!
//! The Grad-CAM layer `final_tokens` is the patch-token grid entering the
//! last block, reshaped to `[N, hidden, gd, gh, gw]`.

use indexmap::IndexMap;
use rano_tensor::{Conv3dCfg, NodeId, ParamKind, ParamStore, Scalar};

use super::layers::{decl_conv, decl_linear, decl_ln, Ctx};
use crate::error::{Error, Result};

pub const DEFAULT_PATCH: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Vit3d {
    pub in_channels: usize,
    pub grid: [usize; 3],
    pub patch: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp: usize,
    pub dropout: f64,
}

/// Largest patch size not above `requested` dividing every grid extent.
pub fn fit_patch(grid: [usize; 3], requested: usize) -> usize {
    (1..=requested.max(1))
        .rev()
        .find(|p| grid.iter().all(|d| d % p == 0))
        .unwrap_or(1)
}

impl Vit3d {
    pub fn new(in_channels: usize, grid: [usize; 3], patch: usize) -> Result<Self> {
        if grid.contains(&0) {
            return Err(Error::InvalidArgument(format!("empty input grid {grid:?}")));
        }
        let fitted = fit_patch(grid, patch);
        if fitted != patch {
            log::info!("ViT patch {patch} does not divide grid {grid:?}; using {fitted}");
        }
        Ok(Self {
            in_channels,
            grid,
            patch: fitted,
            hidden: 192,
            depth: 6,
            heads: 6,
            mlp: 768,
            dropout: 0.0,
        })
    }

    pub fn tokens_grid(&self) -> [usize; 3] {
        self.grid.map(|d| d / self.patch)
    }

    pub fn n_tokens(&self) -> usize {
        self.tokens_grid().iter().product()
    }

    pub fn feature_dim(&self) -> usize {
        self.hidden
    }

    pub fn layer_names(&self) -> Vec<String> {
        vec!["final_tokens".into()]
    }

    pub fn declare<T: Scalar>(&self, s: &mut ParamStore<T>) {
        let h = self.hidden;
        decl_conv(s, "patch_embed", h, self.in_channels, self.patch, true);
        s.declare("cls_token", &[1, 1, h], ParamKind::Embedding);
        s.declare(
            "pos_embed",
            &[1, self.n_tokens() + 1, h],
            ParamKind::Embedding,
        );
        for b in 0..self.depth {
            let p = format!("blocks.{b}");
            decl_ln(s, &format!("{p}.norm1"), h);
            decl_linear(s, &format!("{p}.attn.qkv"), 3 * h, h);
            decl_linear(s, &format!("{p}.attn.proj"), h, h);
            decl_ln(s, &format!("{p}.norm2"), h);
            decl_linear(s, &format!("{p}.mlp.fc1"), self.mlp, h);
            decl_linear(s, &format!("{p}.mlp.fc2"), h, self.mlp);
        }
        decl_ln(s, "norm", h);
    }

    fn attention<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId, p: &str) -> NodeId {
        let sh = cx.g.shape(x).to_vec();
        let (n, t, h) = (sh[0], sh[1], sh[2]);
        let (nh, hd) = (self.heads, self.hidden / self.heads);
        let qkv = cx.linear(x, &format!("{p}.qkv"));
        let qkv = cx.g.reshape(qkv, &[n, t, 3, nh, hd]);
        let qkv = cx.g.permute(qkv, &[2, 0, 3, 1, 4]);
        let q = cx.g.select(qkv, 0, 0);
        let k = cx.g.select(qkv, 0, 1);
        let v = cx.g.select(qkv, 0, 2);
        let q = cx.g.reshape(q, &[n * nh, t, hd]);
        let k = cx.g.reshape(k, &[n * nh, t, hd]);
        let v = cx.g.reshape(v, &[n * nh, t, hd]);
        let kt = cx.g.permute(k, &[0, 2, 1]);
        let scores = cx.g.batched_matmul(q, kt);
        let scores = cx.g.scale(scores, T::lit(1.0 / (hd as f64).sqrt()));
        let attn = cx.g.softmax(scores);
        let o = cx.g.batched_matmul(attn, v);
        let o = cx.g.reshape(o, &[n, nh, t, hd]);
        let o = cx.g.permute(o, &[0, 2, 1, 3]);
        let o = cx.g.reshape(o, &[n, t, h]);
        cx.linear(o, &format!("{p}.proj"))
    }

    fn block<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: NodeId, b: usize) -> NodeId {
        let p = format!("blocks.{b}");
        let y = cx.ln(x, &format!("{p}.norm1"));
        let y = self.attention(cx, y, &format!("{p}.attn"));
        let y = cx.dropout(y, self.dropout);
        let x = cx.g.add(x, y);
        let y = cx.ln(x, &format!("{p}.norm2"));
        let y = cx.linear(y, &format!("{p}.mlp.fc1"));
        let y = cx.g.gelu(y);
        let y = cx.linear(y, &format!("{p}.mlp.fc2"));
        let y = cx.dropout(y, self.dropout);
        cx.g.add(x, y)
    }

    pub fn forward<T: Scalar>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: NodeId,
    ) -> Result<(NodeId, IndexMap<String, NodeId>)> {
        let got = &cx.g.shape(x)[2..];
        if got != self.grid {
            return Err(Error::ShapeMismatch(format!(
                "ViT built for grid {:?}, got {got:?}",
                self.grid
            )));
        }
        let n = cx.g.shape(x)[0];
        let (h, t) = (self.hidden, self.n_tokens());
        let tg = self.tokens_grid();
        let e = cx.conv(x, "patch_embed", Conv3dCfg::new(self.patch, self.patch, 0));
        let e = cx.g.reshape(e, &[n, h, t]);
        let e = cx.g.permute(e, &[0, 2, 1]);
        let cls = cx.p("cls_token");
        let cls = cx.g.repeat0(cls, n);
        let mut z = cx.g.concat(&[cls, e], 1);
        let pos = cx.p("pos_embed");
        z = cx.g.add(z, pos);
        for b in 0..self.depth.saturating_sub(1) {
            z = self.block(cx, z, b);
        }
        let cls = cx.g.narrow(z, 1, 0, 1);
        let tokens = cx.g.narrow(z, 1, 1, t);
        let tokens = cx.g.permute(tokens, &[0, 2, 1]);
        let grid = cx.g.reshape(tokens, &[n, h, tg[0], tg[1], tg[2]]);
        let back = cx.g.reshape(grid, &[n, h, t]);
        let back = cx.g.permute(back, &[0, 2, 1]);
        z = cx.g.concat(&[cls, back], 1);
        if self.depth > 0 {
            z = self.block(cx, z, self.depth - 1);
        }
        z = cx.ln(z, "norm");
        let feat = cx.g.select(z, 1, 0);
        let mut maps = IndexMap::new();
        maps.insert("final_tokens".to_string(), grid);
        Ok((feat, maps))
    }
}
