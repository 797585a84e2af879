//! 3D convolution via chunked im2col + GEMM.
//!
//! Layout is always `[N, C, D, H, W]` for activations and `[O, C, k, k, k]` for
//! kernels. Columns are built for a slab of output depth planes at a time so the
//! scratch matrix stays bounded on large volumes.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rayon::prelude::*;

use crate::Scalar;

/// Upper bound on `rows * cols` of one im2col scratch matrix.
const MAX_COL_ELEMS: usize = 1 << 22;

/// Cubic kernel geometry shared by all three spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dCfg {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3dCfg {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
        }
    }

    /// Output extent along one axis, `None` when the kernel does not fit.
    pub fn out_len(&self, len: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        if padded < self.kernel {
            return None;
        }
        Some((padded - self.kernel) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    inp: [usize; 3],
    out: [usize; 3],
    cfg: Conv3dCfg,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.cfg.kernel.pow(3)
    }
    fn plane(&self) -> usize {
        self.out[1] * self.out[2]
    }
    fn in_vox(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }
    fn out_vox(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }
    /// Output depth planes per im2col chunk.
    fn planes_per_chunk(&self) -> usize {
        let per_plane = self.rows() * self.plane();
        (MAX_COL_ELEMS / per_plane.max(1)).clamp(1, self.out[0])
    }
}

fn geom(x_shape: &[usize], w_shape: &[usize], cfg: Conv3dCfg) -> Geom {
    assert_eq!(x_shape.len(), 5, "conv3d input must be [N, C, D, H, W]");
    assert_eq!(w_shape.len(), 5, "conv3d kernel must be [O, C, k, k, k]");
    assert_eq!(x_shape[1], w_shape[1], "conv3d channel mismatch");
    assert!(w_shape[2..].iter().all(|&k| k == cfg.kernel));
    let inp = [x_shape[2], x_shape[3], x_shape[4]];
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = cfg.out_len(inp[a]).unwrap_or_else(|| {
            panic!(
                "conv3d kernel {} does not fit input extent {:?}",
                cfg.kernel, inp
            )
        });
    }
    Geom {
        c: x_shape[1],
        inp,
        out,
        cfg,
    }
}

#[inline]
fn src_index(o: usize, k: usize, cfg: &Conv3dCfg, len: usize) -> Option<usize> {
    let i = (o * cfg.stride + k) as isize - cfg.padding as isize;
    if i >= 0 && (i as usize) < len {
        Some(i as usize)
    } else {
        None
    }
}

/// Fill `cols` (`rows x planes*plane`) for output planes `[d0, d0 + planes)`.
fn im2col<T: Scalar>(x: &[T], g: &Geom, d0: usize, planes: usize, cols: &mut Array2<T>) {
    let k = g.cfg.kernel;
    let [id, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let ncols = planes * oh * ow;
    let cols_slice = cols.as_slice_mut().expect("contiguous");
    let mut r = 0;
    for ci in 0..g.c {
        let xc = &x[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &mut cols_slice[r * ncols..(r + 1) * ncols];
                    let mut q = 0;
                    for od in d0..d0 + planes {
                        let zd = src_index(od, kd, &g.cfg, id);
                        for oy in 0..oh {
                            let zy = src_index(oy, kh, &g.cfg, ih);
                            match (zd, zy) {
                                (Some(zd), Some(zy)) => {
                                    let base = (zd * ih + zy) * iw;
                                    for ox in 0..ow {
                                        row[q] = match src_index(ox, kw, &g.cfg, iw) {
                                            Some(zx) => xc[base + zx],
                                            None => T::zero(),
                                        };
                                        q += 1;
                                    }
                                }
                                _ => {
                                    row[q..q + ow].fill(T::zero());
                                    q += ow;
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Scatter-add `cols` back into `dx` (inverse of [`im2col`]).
fn col2im<T: Scalar>(cols: &Array2<T>, g: &Geom, d0: usize, planes: usize, dx: &mut [T]) {
    let k = g.cfg.kernel;
    let [id, ih, iw] = g.inp;
    let [_, oh, ow] = g.out;
    let ncols = planes * oh * ow;
    let cols_slice = cols.as_slice().expect("contiguous");
    let mut r = 0;
    for ci in 0..g.c {
        let xc = &mut dx[ci * id * ih * iw..(ci + 1) * id * ih * iw];
        for kd in 0..k {
            for kh in 0..k {
                for kw in 0..k {
                    let row = &cols_slice[r * ncols..(r + 1) * ncols];
                    let mut q = 0;
                    for od in d0..d0 + planes {
                        let zd = src_index(od, kd, &g.cfg, id);
                        for oy in 0..oh {
                            let zy = src_index(oy, kh, &g.cfg, ih);
                            if let (Some(zd), Some(zy)) = (zd, zy) {
                                let base = (zd * ih + zy) * iw;
                                for ox in 0..ow {
                                    if let Some(zx) = src_index(ox, kw, &g.cfg, iw) {
                                        xc[base + zx] += row[q];
                                    }
                                    q += 1;
                                }
                            } else {
                                q += ow;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

fn kernel_matrix<'a, T: Scalar>(w: &'a ArrayD<T>) -> ArrayView2<'a, T> {
    let o = w.shape()[0];
    let rows = w.len() / o;
    w.view()
        .into_shape_with_order((o, rows))
        .expect("kernel is contiguous")
}

/// Forward convolution; `bias` has shape `[O]`.
pub fn conv3d_forward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    bias: Option<&ArrayD<T>>,
    cfg: Conv3dCfg,
) -> ArrayD<T> {
    let g = geom(x.shape(), w.shape(), cfg);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let wm = kernel_matrix(w);
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    let per_in = g.c * g.in_vox();
    let per_out = o * g.out_vox();
    let mut out = vec![T::zero(); n * per_out];

    out.par_chunks_mut(per_out)
        .zip(xs.par_chunks(per_in))
        .for_each(|(yo, xi)| {
            let mut ym = ndarray::ArrayViewMut2::from_shape((o, g.out_vox()), yo).unwrap();
            if cfg.is_pointwise() {
                let cols = ArrayView2::from_shape((g.c, g.out_vox()), xi).unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut ym);
            } else {
                let step = g.planes_per_chunk();
                let mut d0 = 0;
                while d0 < g.out[0] {
                    let planes = step.min(g.out[0] - d0);
                    let mut cols = Array2::<T>::zeros((g.rows(), planes * g.plane()));
                    im2col(xi, &g, d0, planes, &mut cols);
                    let lo = d0 * g.plane();
                    let hi = lo + planes * g.plane();
                    let mut dst = ym.slice_mut(ndarray::s![.., lo..hi]);
                    ndarray::linalg::general_mat_mul(T::one(), &wm, &cols, T::zero(), &mut dst);
                    d0 += planes;
                }
            }
            if let Some(b) = bias {
                for (oc, mut row) in ym.axis_iter_mut(Axis(0)).enumerate() {
                    let bv = b[oc];
                    row.mapv_inplace(|v| v + bv);
                }
            }
        });

    ArrayD::from_shape_vec(IxDyn(&[n, o, g.out[0], g.out[1], g.out[2]]), out).unwrap()
}

/// Gradients of [`conv3d_forward`]: `(dx, dw, db)`. `dx` is skipped when not
/// requested.
pub fn conv3d_backward<T: Scalar>(
    x: &ArrayD<T>,
    w: &ArrayD<T>,
    dy: &ArrayD<T>,
    cfg: Conv3dCfg,
    need_dx: bool,
    need_bias: bool,
) -> (Option<ArrayD<T>>, ArrayD<T>, Option<ArrayD<T>>) {
    let g = geom(x.shape(), w.shape(), cfg);
    let n = x.shape()[0];
    let o = w.shape()[0];
    let wm = kernel_matrix(w);
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();
    let xs = x.as_slice().unwrap();
    let dys = dy.as_slice().unwrap();
    let per_in = g.c * g.in_vox();
    let per_out = o * g.out_vox();

    let per_sample: Vec<(Array2<T>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let xi = &xs[i * per_in..(i + 1) * per_in];
            let dyi =
                ArrayView2::from_shape((o, g.out_vox()), &dys[i * per_out..(i + 1) * per_out])
                    .unwrap();
            let mut dw = Array2::<T>::zeros((o, g.rows()));
            let mut dx = if need_dx {
                Some(vec![T::zero(); per_in])
            } else {
                None
            };
            if cfg.is_pointwise() {
                let cols = ArrayView2::from_shape((g.c, g.out_vox()), xi).unwrap();
                ndarray::linalg::general_mat_mul(T::one(), &dyi, &cols.t(), T::zero(), &mut dw);
                if let Some(dx) = dx.as_mut() {
                    let mut dxm =
                        ndarray::ArrayViewMut2::from_shape((g.c, g.out_vox()), dx).unwrap();
                    ndarray::linalg::general_mat_mul(T::one(), &wm.t(), &dyi, T::zero(), &mut dxm);
                }
            } else {
                let step = g.planes_per_chunk();
                let mut d0 = 0;
                while d0 < g.out[0] {
                    let planes = step.min(g.out[0] - d0);
                    let lo = d0 * g.plane();
                    let hi = lo + planes * g.plane();
                    let dyc = dyi.slice(ndarray::s![.., lo..hi]);
                    let mut cols = Array2::<T>::zeros((g.rows(), planes * g.plane()));
                    im2col(xi, &g, d0, planes, &mut cols);
                    ndarray::linalg::general_mat_mul(T::one(), &dyc, &cols.t(), T::one(), &mut dw);
                    if let Some(dx) = dx.as_mut() {
                        ndarray::linalg::general_mat_mul(
                            T::one(),
                            &wm.t(),
                            &dyc,
                            T::zero(),
                            &mut cols,
                        );
                        col2im(&cols, &g, d0, planes, dx);
                    }
                    d0 += planes;
                }
            }
            (dw, dx)
        })
        .collect();

    let mut dw_total = Array2::<T>::zeros((o, g.rows()));
    let mut dx_total = if need_dx {
        Some(Vec::with_capacity(n * per_in))
    } else {
        None
    };
    for (dw, dx) in per_sample {
        dw_total += &dw;
        if let (Some(acc), Some(dx)) = (dx_total.as_mut(), dx) {
            acc.extend(dx);
        }
    }
    let db = if need_bias {
        let mut db = ArrayD::<T>::zeros(IxDyn(&[o]));
        for i in 0..n {
            for oc in 0..o {
                let start = i * per_out + oc * g.out_vox();
                let s: T = dys[start..start + g.out_vox()].iter().copied().sum();
                db[oc] += s;
            }
        }
        Some(db)
    } else {
        None
    };
    let dw = dw_total.into_shape_with_order(IxDyn(w.shape())).unwrap();
    let dx = dx_total.map(|v| ArrayD::from_shape_vec(IxDyn(x.shape()), v).unwrap());
    (dx, dw, db)
}
