//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass. Node
//! values are kept alive until the graph is dropped, so the same graph can be
//! differentiated from several roots (Grad-CAM needs one backward per target
//! class).

use std::sync::Arc;

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn, Slice};

use crate::ops::conv::{self, Conv3dCfg};
use crate::ops::norm::{self, BatchNormCache, BatchStats, LayerNormCache};
use crate::ops::pool;
use crate::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        cfg: Conv3dCfg,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: BatchNormCache<T>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        cache: LayerNormCache<T>,
    },
    Relu {
        x: NodeId,
    },
    Gelu {
        x: NodeId,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: NodeId,
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    BatchedMatmul {
        a: NodeId,
        b: NodeId,
    },
    Softmax {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        factor: T,
    },
    MulConst {
        x: NodeId,
        mask: Arc<ArrayD<T>>,
    },
    Reshape {
        x: NodeId,
    },
    Permute {
        x: NodeId,
        perm: Vec<usize>,
    },
    Repeat0 {
        x: NodeId,
    },
    Select {
        x: NodeId,
        axis: usize,
        index: usize,
    },
    Narrow {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Array2<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Arc<ArrayD<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, NodeId)>,
    batch_stats: Vec<(String, BatchStats<T>)>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<ArrayD<T>>>,
    params: Vec<(String, NodeId)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&ArrayD<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter leaf that received one, keyed by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.params
            .iter()
            .filter_map(|(name, id)| self.get(*id).map(|g| (name.as_str(), g)))
    }

    pub fn param(&self, name: &str) -> Option<&ArrayD<T>> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, id)| self.get(*id))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn as_matrix<T: Scalar>(a: &ArrayD<T>) -> ArrayView2<'_, T> {
    let last = *a.shape().last().expect("matrix op on scalar");
    let rows = a.len() / last.max(1);
    a.view()
        .into_shape_with_order((rows, last))
        .expect("contiguous")
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            batch_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Data leaf. Set `requires_grad` to obtain input gradients (saliency).
    pub fn input(&mut self, value: ArrayD<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf registered under `name`.
    pub fn param(&mut self, name: &str, value: Arc<ArrayD<T>>) -> NodeId {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Batch statistics gathered by training-mode batch norms since the last call.
    pub fn take_batch_stats(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.batch_stats)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, cfg: Conv3dCfg) -> NodeId {
        let y = conv::conv3d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), cfg);
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(y, Op::Conv3d { x, w, b, cfg }, rg)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: &ArrayD<T>,
        running_var: &ArrayD<T>,
        eps: T,
        training: bool,
        key: &str,
    ) -> NodeId {
        let (y, cache, stats) = norm::batch_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
            training,
        );
        if let Some(stats) = stats {
            self.batch_stats.push((key.to_string(), stats));
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let (y, cache) = norm::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps);
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            },
            rg,
        )
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self
            .value(x)
            .mapv(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu { x }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(gelu);
        let rg = self.rg(&[x]);
        self.push(y, Op::Gelu { x }, rg)
    }

    pub fn max_pool3d(&mut self, x: NodeId, cfg: Conv3dCfg) -> NodeId {
        let (y, argmax) = pool::max_pool3d(self.value(x), cfg);
        let rg = self.rg(&[x]);
        self.push(y, Op::MaxPool { x, argmax }, rg)
    }

    pub fn avg_pool3d(&mut self, x: NodeId, kernel: usize, stride: usize) -> NodeId {
        let y = pool::avg_pool3d(self.value(x), kernel, stride);
        let rg = self.rg(&[x]);
        self.push(y, Op::AvgPool { x, kernel, stride }, rg)
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        let y = pool::global_avg_pool(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::GlobalAvgPool { x }, rg)
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<_> = xs.iter().map(|&id| self.value(id).view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views)
            .expect("concat shapes agree")
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(xs);
        self.push(
            y,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        )
    }

    /// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let wm = wv
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("linear weight is 2D");
        let mut y = as_matrix(xv).dot(&wm.t());
        if let Some(b) = b {
            let bv = self.value(b);
            for mut row in y.axis_iter_mut(Axis(0)) {
                for (o, v) in row.iter_mut().enumerate() {
                    *v += bv[o];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = wm.shape()[0];
        let y = y.into_shape_with_order(IxDyn(&shape)).unwrap();
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        self.push(y, Op::Linear { x, w, b }, rg)
    }

    /// `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn batched_matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self
            .value(a)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3D lhs");
        let bv = self
            .value(b)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("3D rhs");
        assert_eq!(av.shape()[0], bv.shape()[0]);
        let (bn, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut y = ndarray::Array3::<T>::zeros((bn, m, n));
        for i in 0..bn {
            y.index_axis_mut(Axis(0), i)
                .assign(&av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i)));
        }
        let rg = self.rg(&[a, b]);
        self.push(y.into_dyn(), Op::BatchedMatmul { a, b }, rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let y = softmax_last(self.value(x));
        let rg = self.rg(&[x]);
        self.push(y, Op::Softmax { x }, rg)
    }

    /// Elementwise sum. `b` may broadcast along axes where its extent is 1.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), bv.ndim(), "add rank mismatch");
        let y = av + &bv.broadcast(av.raw_dim()).expect("add shapes broadcast");
        let rg = self.rg(&[a, b]);
        self.push(y, Op::Add { a, b }, rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let y = self.value(x).mapv(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale { x, factor }, rg)
    }

    /// Multiply by a constant tensor of identical shape (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, mask: Arc<ArrayD<T>>) -> NodeId {
        let y = self.value(x) * &*mask;
        let rg = self.rg(&[x]);
        self.push(y, Op::MulConst { x, mask }, rg)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let y = self
            .value(x)
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        let rg = self.rg(&[x]);
        self.push(y, Op::Reshape { x }, rg)
    }

    pub fn permute(&mut self, x: NodeId, perm: &[usize]) -> NodeId {
        let y = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[x]);
        self.push(
            y,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        )
    }

    /// Tile a tensor with leading extent 1 to leading extent `n`.
    pub fn repeat0(&mut self, x: NodeId, n: usize) -> NodeId {
        let xv = self.value(x);
        assert_eq!(xv.shape()[0], 1, "repeat0 expects leading extent 1");
        let mut shape = xv.shape().to_vec();
        shape[0] = n;
        let y = xv.broadcast(IxDyn(&shape)).unwrap().to_owned();
        let rg = self.rg(&[x]);
        self.push(y, Op::Repeat0 { x }, rg)
    }

    /// Pick `index` along `axis`, dropping that axis.
    pub fn select(&mut self, x: NodeId, axis: usize, index: usize) -> NodeId {
        let y = self
            .value(x)
            .index_axis(Axis(axis), index)
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[x]);
        self.push(y, Op::Select { x, axis, index }, rg)
    }

    /// Contiguous slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let y = self
            .value(x)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .as_standard_layout()
            .into_owned();
        let rg = self.rg(&[x]);
        self.push(y, Op::Narrow { x, axis, start }, rg)
    }

    /// Class-weighted cross-entropy averaged over the batch:
    /// `(1/N) sum_i w[y_i] * -log softmax(z_i)[y_i]`.
    pub fn weighted_cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[T],
    ) -> NodeId {
        let z = self
            .value(logits)
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("[N, K] logits");
        assert_eq!(z.shape()[0], targets.len());
        assert_eq!(z.shape()[1], weights.len());
        let probs = softmax_last(&z.to_owned().into_dyn())
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let n = T::lit(targets.len() as f64);
        let mut loss = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = z.row(i);
            let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.mapv(|v| (v - m).exp()).sum().ln();
            loss += weights[t] * (lse - row[t]);
        }
        let y = ArrayD::from_elem(IxDyn(&[]), loss / n);
        let rg = self.rg(&[logits]);
        self.push(
            y,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Backpropagate from a scalar node.
    pub fn backward(&self, root: NodeId) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let seed = ArrayD::from_elem(self.value(root).raw_dim(), T::one());
        self.backward_from(root, seed)
    }

    /// Backpropagate an arbitrary upstream gradient `seed` from `root`.
    pub fn backward_from(&self, root: NodeId, seed: ArrayD<T>) -> Gradients<T> {
        assert_eq!(seed.shape(), self.shape(root), "seed shape must match root");
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, idx: usize, dy: &ArrayD<T>, grads: &mut [Option<ArrayD<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, cfg } => {
                let (dx, dw, db) = conv::conv3d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *cfg,
                    self.wants(*x),
                    b.is_some(),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = norm::batch_norm_backward(cache, self.value(*gamma), dy);
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                accumulate(&mut grads[gamma.0], dg);
                accumulate(&mut grads[beta.0], db);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cache,
            } => {
                let (dx, dg, db) = norm::layer_norm_backward(cache, self.value(*gamma), dy);
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], dx);
                }
                accumulate(&mut grads[gamma.0], dg);
                accumulate(&mut grads[beta.0], db);
            }
            Op::Relu { x } => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx)
                    .and(&*node.value)
                    .for_each(|d, &y| {
                        if y <= T::zero() {
                            *d = T::zero()
                        }
                    });
                accumulate(&mut grads[x.0], dx);
            }
            Op::Gelu { x } => {
                let mut dx = dy.clone();
                ndarray::Zip::from(&mut dx)
                    .and(self.value(*x))
                    .for_each(|d, &v| *d *= gelu_grad(v));
                accumulate(&mut grads[x.0], dx);
            }
            Op::MaxPool { x, argmax } => {
                accumulate(
                    &mut grads[x.0],
                    pool::max_pool3d_backward(self.shape(*x), argmax, dy),
                );
            }
            Op::AvgPool { x, kernel, stride } => {
                accumulate(
                    &mut grads[x.0],
                    pool::avg_pool3d_backward(self.shape(*x), *kernel, *stride, dy),
                );
            }
            Op::GlobalAvgPool { x } => {
                accumulate(
                    &mut grads[x.0],
                    pool::global_avg_pool_backward(self.shape(*x), dy),
                );
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                for id in xs {
                    let len = self.shape(*id)[*axis];
                    if self.wants(*id) {
                        let part = dy
                            .slice_axis(Axis(*axis), Slice::from(start..start + len))
                            .as_standard_layout()
                            .into_owned();
                        accumulate(&mut grads[id.0], part);
                    }
                    start += len;
                }
            }
            Op::Linear { x, w, b } => {
                let dym = as_matrix(dy);
                let wv = self
                    .value(*w)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                if self.wants(*x) {
                    let dx = dym
                        .dot(&wv)
                        .into_shape_with_order(IxDyn(self.shape(*x)))
                        .unwrap();
                    accumulate(&mut grads[x.0], dx);
                }
                if self.wants(*w) {
                    let dw = dym.t().dot(&as_matrix(self.value(*x))).into_dyn();
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b {
                    accumulate(&mut grads[b.0], dym.sum_axis(Axis(0)).into_dyn());
                }
            }
            Op::BatchedMatmul { a, b } => {
                let av = self
                    .value(*a)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let bv = self
                    .value(*b)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap();
                let dyv = dy.view().into_dimensionality::<ndarray::Ix3>().unwrap();
                let bn = av.shape()[0];
                if self.wants(*a) {
                    let mut da = ndarray::Array3::<T>::zeros(av.raw_dim());
                    for i in 0..bn {
                        da.index_axis_mut(Axis(0), i).assign(
                            &dyv.index_axis(Axis(0), i)
                                .dot(&bv.index_axis(Axis(0), i).t()),
                        );
                    }
                    accumulate(&mut grads[a.0], da.into_dyn());
                }
                if self.wants(*b) {
                    let mut db = ndarray::Array3::<T>::zeros(bv.raw_dim());
                    for i in 0..bn {
                        db.index_axis_mut(Axis(0), i).assign(
                            &av.index_axis(Axis(0), i)
                                .t()
                                .dot(&dyv.index_axis(Axis(0), i)),
                        );
                    }
                    accumulate(&mut grads[b.0], db.into_dyn());
                }
            }
            Op::Softmax { x } => {
                let y = &*node.value;
                let e = *y.shape().last().unwrap();
                let ys = y.as_slice().unwrap();
                let dys = dy.as_standard_layout();
                let dys = dys.as_slice().unwrap();
                let mut dx = vec![T::zero(); ys.len()];
                for r in 0..ys.len() / e {
                    let off = r * e;
                    let dot: T = (0..e).map(|j| ys[off + j] * dys[off + j]).sum();
                    for j in 0..e {
                        dx[off + j] = ys[off + j] * (dys[off + j] - dot);
                    }
                }
                accumulate(
                    &mut grads[x.0],
                    ArrayD::from_shape_vec(y.raw_dim(), dx).unwrap(),
                );
            }
            Op::Add { a, b } => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.wants(*b) {
                    let bshape = self.shape(*b).to_vec();
                    let mut db = dy.clone();
                    for (ax, &len) in bshape.iter().enumerate() {
                        if len == 1 && db.shape()[ax] != 1 {
                            db = db.sum_axis(Axis(ax)).insert_axis(Axis(ax));
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Scale { x, factor } => {
                accumulate(&mut grads[x.0], dy.mapv(|v| v * *factor));
            }
            Op::MulConst { x, mask } => {
                accumulate(&mut grads[x.0], dy * &**mask);
            }
            Op::Reshape { x } => {
                let dx = dy
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(self.shape(*x)))
                    .unwrap();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let dx = dy
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .into_owned();
                accumulate(&mut grads[x.0], dx);
            }
            Op::Repeat0 { x } => {
                accumulate(&mut grads[x.0], dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Select { x, axis, index } => {
                let mut dx = ArrayD::<T>::zeros(IxDyn(self.shape(*x)));
                dx.index_axis_mut(Axis(*axis), *index).assign(dy);
                accumulate(&mut grads[x.0], dx);
            }
            Op::Narrow { x, axis, start } => {
                let mut dx = ArrayD::<T>::zeros(IxDyn(self.shape(*x)));
                let len = dy.shape()[*axis];
                dx.slice_axis_mut(Axis(*axis), Slice::from(*start..*start + len))
                    .assign(dy);
                accumulate(&mut grads[x.0], dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let scale =
                    dy.iter().next().copied().unwrap_or(T::one()) / T::lit(targets.len() as f64);
                let mut dz = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dz[[i, t]] -= T::one();
                    let w = weights[t] * scale;
                    dz.row_mut(i).mapv_inplace(|v| v * w);
                }
                accumulate(&mut grads[logits.0], dz.into_dyn());
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    T::lit(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(0.044715);
    let t = (c * (x + a * x * x * x)).tanh();
    T::lit(0.5) * (T::one() + t)
        + T::lit(0.5) * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &ArrayD<T>) -> ArrayD<T> {
    let e = *x.shape().last().expect("softmax on scalar");
    let x = x.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); xs.len()];
    for (r, row) in xs.chunks(e).enumerate() {
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut s = T::zero();
        for j in 0..e {
            let v = (row[j] - m).exp();
            out[r * e + j] = v;
            s += v;
        }
        for j in 0..e {
            out[r * e + j] /= s;
        }
    }
    ArrayD::from_shape_vec(x.raw_dim(), out).unwrap()
}
