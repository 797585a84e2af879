//! Parameter declaration helpers and a forward-pass context that binds each
//! named parameter to a single graph leaf.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::ArrayD;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rano_tensor::{Conv3dCfg, Graph, NodeId, ParamKind, ParamStore, Scalar};

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-6;

pub fn decl_conv<T: Scalar>(
    s: &mut ParamStore<T>,
    name: &str,
    out: usize,
    inp: usize,
    k: usize,
    bias: bool,
) {
    s.declare(
        format!("{name}.weight"),
        &[out, inp, k, k, k],
        ParamKind::Weight,
    );
    if bias {
        s.declare(format!("{name}.bias"), &[out], ParamKind::Bias);
    }
}

pub fn decl_bn<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize) {
    s.declare(format!("{name}.weight"), &[c], ParamKind::Scale);
    s.declare(format!("{name}.bias"), &[c], ParamKind::Bias);
    s.declare(format!("{name}.running_mean"), &[c], ParamKind::BufferZeros);
    s.declare(format!("{name}.running_var"), &[c], ParamKind::BufferOnes);
}

pub fn decl_ln<T: Scalar>(s: &mut ParamStore<T>, name: &str, c: usize) {
    s.declare(format!("{name}.weight"), &[c], ParamKind::Scale);
    s.declare(format!("{name}.bias"), &[c], ParamKind::Bias);
}

pub fn decl_linear<T: Scalar>(s: &mut ParamStore<T>, name: &str, out: usize, inp: usize) {
    s.declare(format!("{name}.weight"), &[out, inp], ParamKind::Weight);
    s.declare(format!("{name}.bias"), &[out], ParamKind::Bias);
}

/// Whether a forward pass updates normalization statistics and applies dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train { dropout_seed: u64 },
    Eval,
}

impl Mode {
    pub fn training(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub struct Ctx<'a, T: Scalar> {
    pub g: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    pub mode: Mode,
    rng: ChaCha8Rng,
    bound: HashMap<String, NodeId>,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    pub fn new(g: &'a mut Graph<T>, store: &'a ParamStore<T>, mode: Mode) -> Self {
        let seed = match mode {
            Mode::Train { dropout_seed } => dropout_seed,
            Mode::Eval => 0,
        };
        Self {
            g,
            store,
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bound: HashMap::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let id = self.g.param(name, Arc::clone(self.store.get(name)));
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn conv(&mut self, x: NodeId, name: &str, cfg: Conv3dCfg) -> NodeId {
        let w = self.p(&format!("{name}.weight"));
        let bname = format!("{name}.bias");
        let b = self.store.contains(&bname).then(|| self.p(&bname));
        self.g.conv3d(x, w, b, cfg)
    }

    pub fn bn(&mut self, x: NodeId, name: &str) -> NodeId {
        let gamma = self.p(&format!("{name}.weight"));
        let beta = self.p(&format!("{name}.bias"));
        let rm = Arc::clone(self.store.get(&format!("{name}.running_mean")));
        let rv = Arc::clone(self.store.get(&format!("{name}.running_var")));
        let training = self.mode.training();
        self.g
            .batch_norm(x, gamma, beta, &rm, &rv, T::lit(BN_EPS), training, name)
    }

    pub fn ln(&mut self, x: NodeId, name: &str) -> NodeId {
        let gamma = self.p(&format!("{name}.weight"));
        let beta = self.p(&format!("{name}.bias"));
        self.g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }

    pub fn linear(&mut self, x: NodeId, name: &str) -> NodeId {
        let w = self.p(&format!("{name}.weight"));
        let b = self.p(&format!("{name}.bias"));
        self.g.linear(x, w, Some(b))
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: NodeId, p: f64) -> NodeId {
        if !self.mode.training() || p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let shape = self.g.shape(x).to_vec();
        let scale = T::lit(1.0 / keep);
        let mask = ArrayD::from_shape_simple_fn(shape, || {
            if self.rng.random::<f64>() < keep {
                scale
            } else {
                T::zero()
            }
        });
        self.g.mul_const(x, Arc::new(mask))
    }

    fn fits(&self, x: NodeId, cfg: Conv3dCfg) -> bool {
        self.g.shape(x)[2..]
            .iter()
            .all(|&d| cfg.out_len(d).is_some())
    }

    /// Max pool, skipped when the window does not fit the current grid.
    pub fn max_pool(&mut self, x: NodeId, cfg: Conv3dCfg) -> NodeId {
        if self.fits(x, cfg) {
            self.g.max_pool3d(x, cfg)
        } else {
            x
        }
    }

    /// Average pool, skipped when the window does not fit the current grid.
    pub fn avg_pool(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        if self.fits(x, Conv3dCfg::new(kernel, stride, 0)) {
            self.g.avg_pool3d(x, kernel, stride)
        } else {
            x
        }
    }
}
