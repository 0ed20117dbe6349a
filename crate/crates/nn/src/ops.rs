//! Forward and backward kernels for the individual layer kinds.
//!
//! Convolutions are lowered to GEMM through im2col over blocks of output
//! rows, which bounds the scratch buffer for large images.

use rayon::prelude::*;

use crate::real::Real;
use crate::tensor::Tensor;

/// Target size of one im2col block, in elements.
const COL_BLOCK: usize = 1 << 19;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows_per_block(&self) -> usize {
        (COL_BLOCK / (self.ckk() * self.wout).max(1)).clamp(1, self.hout.max(1))
    }

    fn blocks(&self) -> Vec<(usize, usize)> {
        let step = self.rows_per_block();
        (0..self.hout)
            .step_by(step)
            .map(|y0| (y0, (y0 + step).min(self.hout)))
            .collect()
    }
}

fn im2col<T: Real>(xn: &[T], g: &ConvGeom, oy0: usize, oy1: usize, cols: &mut [T]) {
    let j = (oy1 - oy0) * g.wout;
    let plane_len = g.h * g.w;
    for c in 0..g.cin {
        let plane = &xn[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * j;
                let dst = &mut cols[row..row + j];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let seg = &mut dst[r * g.wout..(r + 1) * g.wout];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        // ix = ox + kx - pad, valid for ox in [lo, hi)
                        let lo = g.pad.saturating_sub(kx).min(g.wout);
                        let hi = (g.w + g.pad).saturating_sub(kx).min(g.wout).max(lo);
                        seg[..lo].fill(T::zero());
                        seg[hi..].fill(T::zero());
                        if hi > lo {
                            let s0 = lo + kx - g.pad;
                            seg[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            *v = if ix >= 0 && ix < g.w as isize {
                                src[ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, oy0: usize, oy1: usize, dxn: &mut [T]) {
    let j = (oy1 - oy0) * g.wout;
    let plane_len = g.h * g.w;
    for c in 0..g.cin {
        let plane = &mut dxn[c * plane_len..(c + 1) * plane_len];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = ((c * g.k + ky) * g.k + kx) * j;
                let src = &cols[row..row + j];
                for (r, oy) in (oy0..oy1).enumerate() {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let seg = &src[r * g.wout..(r + 1) * g.wout];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in seg.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = x.shape()[0];
    let in_len = g.cin * g.h * g.w;
    let out_plane = g.hout * g.wout;
    let ckk = g.ckk();
    let blocks = g.blocks();
    let tasks: Vec<(usize, usize, usize)> = (0..n)
        .flat_map(|s| blocks.iter().map(move |&(a, b)| (s, a, b)))
        .collect();
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();

    let parts: Vec<Vec<T>> = tasks
        .par_iter()
        .map(|&(s, oy0, oy1)| {
            let xn = &xd[s * in_len..(s + 1) * in_len];
            let j = (oy1 - oy0) * g.wout;
            let mut out = vec![T::zero(); g.cout * j];
            let mut scratch;
            let (bptr, rsb) = if g.pointwise() {
                (xn[oy0 * g.wout..].as_ptr(), (g.h * g.w) as isize)
            } else {
                scratch = vec![T::zero(); ckk * j];
                im2col(xn, g, oy0, oy1, &mut scratch);
                (scratch.as_ptr(), j as isize)
            };
            unsafe {
                T::gemm(
                    g.cout,
                    ckk,
                    j,
                    T::one(),
                    wd.as_ptr(),
                    ckk as isize,
                    1,
                    bptr,
                    rsb,
                    1,
                    T::zero(),
                    out.as_mut_ptr(),
                    j as isize,
                    1,
                );
            }
            for (o, row) in out.chunks_mut(j).enumerate() {
                let b = bd[o];
                for v in row {
                    *v += b;
                }
            }
            out
        })
        .collect();

    let mut y = Tensor::zeros(&[n, g.cout, g.hout, g.wout]);
    let yd = y.data_mut();
    for (&(s, oy0, oy1), part) in tasks.iter().zip(parts) {
        let j = (oy1 - oy0) * g.wout;
        for o in 0..g.cout {
            let dst = (s * g.cout + o) * out_plane + oy0 * g.wout;
            yd[dst..dst + j].copy_from_slice(&part[o * j..(o + 1) * j]);
        }
    }
    y
}

/// Returns `(dx, dweight, dbias)`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let in_len = g.cin * g.h * g.w;
    let out_plane = g.hout * g.wout;
    let ckk = g.ckk();
    let blocks = g.blocks();
    let xd = x.data();
    let wd = weight.data();
    let dyd = dy.data();

    let per_sample: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let xn = &xd[s * in_len..(s + 1) * in_len];
            let dyn_ = &dyd[s * g.cout * out_plane..(s + 1) * g.cout * out_plane];
            let mut dx = vec![T::zero(); in_len];
            let mut dw = vec![T::zero(); g.cout * ckk];
            let mut db = vec![T::zero(); g.cout];
            for o in 0..g.cout {
                db[o] = dyn_[o * out_plane..(o + 1) * out_plane].iter().copied().sum();
            }
            for &(oy0, oy1) in &blocks {
                let j = (oy1 - oy0) * g.wout;
                let dptr = dyn_[oy0 * g.wout..].as_ptr();
                if g.pointwise() {
                    unsafe {
                        // dW += dY_blk * X_blk^T
                        T::gemm(
                            g.cout,
                            j,
                            ckk,
                            T::one(),
                            dptr,
                            out_plane as isize,
                            1,
                            xn[oy0 * g.wout..].as_ptr(),
                            1,
                            (g.h * g.w) as isize,
                            T::one(),
                            dw.as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                        // dX_blk += W^T * dY_blk
                        T::gemm(
                            ckk,
                            g.cout,
                            j,
                            T::one(),
                            wd.as_ptr(),
                            1,
                            ckk as isize,
                            dptr,
                            out_plane as isize,
                            1,
                            T::one(),
                            dx[oy0 * g.wout..].as_mut_ptr(),
                            (g.h * g.w) as isize,
                            1,
                        );
                    }
                } else {
                    let mut cols = vec![T::zero(); ckk * j];
                    im2col(xn, g, oy0, oy1, &mut cols);
                    let mut dcols = vec![T::zero(); ckk * j];
                    unsafe {
                        T::gemm(
                            g.cout,
                            j,
                            ckk,
                            T::one(),
                            dptr,
                            out_plane as isize,
                            1,
                            cols.as_ptr(),
                            1,
                            j as isize,
                            T::one(),
                            dw.as_mut_ptr(),
                            ckk as isize,
                            1,
                        );
                        T::gemm(
                            ckk,
                            g.cout,
                            j,
                            T::one(),
                            wd.as_ptr(),
                            1,
                            ckk as isize,
                            dptr,
                            out_plane as isize,
                            1,
                            T::zero(),
                            dcols.as_mut_ptr(),
                            j as isize,
                            1,
                        );
                    }
                    col2im_add(&dcols, g, oy0, oy1, &mut dx);
                }
            }
            (dx, dw, db)
        })
        .collect();

    let mut dx = Vec::with_capacity(n * in_len);
    let mut dw = vec![T::zero(); g.cout * ckk];
    let mut db = vec![T::zero(); g.cout];
    for (sdx, sdw, sdb) in per_sample {
        dx.extend_from_slice(&sdx);
        for (a, b) in dw.iter_mut().zip(sdw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(sdb) {
            *a += b;
        }
    }
    (
        Tensor::new(x.shape(), dx).expect("dx shape"),
        Tensor::new(weight.shape(), dw).expect("dw shape"),
        Tensor::new(&[g.cout], db).expect("db shape"),
    )
}

/// 2x2 max pooling with stride 2 (floor on odd extents). Returns the output
/// and, per output element, the flat index of the winning input element.
pub(crate) fn maxpool2_forward<T: Real>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (n, c, h, w) = x.dims4().expect("nchw");
    let (ho, wo) = (h / 2, w / 2);
    let xd = x.data();
    let planes = n * c;
    let results: Vec<(Vec<T>, Vec<u32>)> = (0..planes)
        .into_par_iter()
        .map(|p| {
            let base = p * h * w;
            let mut out = Vec::with_capacity(ho * wo);
            let mut arg = Vec::with_capacity(ho * wo);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_i = base + 2 * oy * w + 2 * ox;
                    let mut best = xd[best_i];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[i] > best {
                            best = xd[i];
                            best_i = i;
                        }
                    }
                    out.push(best);
                    arg.push(best_i as u32);
                }
            }
            (out, arg)
        })
        .collect();
    let mut data = Vec::with_capacity(planes * ho * wo);
    let mut argmax = Vec::with_capacity(planes * ho * wo);
    for (o, a) in results {
        data.extend(o);
        argmax.extend(a);
    }
    (Tensor::new(&[n, c, ho, wo], data).expect("pool shape"), argmax)
}

pub(crate) fn maxpool2_backward<T: Real>(
    input_shape: &[usize],
    argmax: &[u32],
    dy: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let dxd = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(dy.data()) {
        dxd[i as usize] += g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub(crate) fn upsample2_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (n, c, h, w) = x.dims4().expect("nchw");
    let (ho, wo) = (2 * h, 2 * w);
    let xd = x.data();
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    y.data_mut()
        .par_chunks_mut(ho * wo)
        .enumerate()
        .for_each(|(p, out)| {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let srow = &src[(oy / 2) * w..(oy / 2 + 1) * w];
                let drow = &mut out[oy * wo..(oy + 1) * wo];
                for (ox, v) in drow.iter_mut().enumerate() {
                    *v = srow[ox / 2];
                }
            }
        });
    y
}

pub(crate) fn upsample2_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let (ho, wo) = (2 * h, 2 * w);
    let dyd = dy.data();
    let mut dx = Tensor::zeros(input_shape);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(p, out)| {
            let src = &dyd[p * ho * wo..(p + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    out[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
                }
            }
        });
    dx
}

pub(crate) fn concat_forward<T: Real>(parts: &[&Tensor<T>]) -> Tensor<T> {
    let (n, _, h, w) = parts[0].dims4().expect("nchw");
    let plane = h * w;
    let ctot: usize = parts.iter().map(|t| t.shape()[1]).sum();
    let mut data = Vec::with_capacity(n * ctot * plane);
    for s in 0..n {
        for p in parts {
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[s * c * plane..(s + 1) * c * plane]);
        }
    }
    Tensor::new(&[n, ctot, h, w], data).expect("concat shape")
}

pub(crate) fn concat_backward<T: Real>(shapes: &[Vec<usize>], dy: &Tensor<T>) -> Vec<Tensor<T>> {
    let (n, ctot, h, w) = dy.dims4().expect("nchw");
    let plane = h * w;
    let mut outs: Vec<Vec<T>> = shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    let dyd = dy.data();
    for s in 0..n {
        let mut off = s * ctot * plane;
        for (i, shape) in shapes.iter().enumerate() {
            let len = shape[1] * plane;
            outs[i].extend_from_slice(&dyd[off..off + len]);
            off += len;
        }
    }
    outs.into_iter()
        .zip(shapes)
        .map(|(d, s)| Tensor::new(s, d).expect("concat grad shape"))
        .collect()
}

pub(crate) fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient through a ReLU given its output; zero wherever the unit was off.
pub(crate) fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(y.shape(), data).expect("relu grad shape")
}

pub(crate) fn linear_forward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let n = x.shape()[0];
    let (fout, fin) = (weight.shape()[0], weight.shape()[1]);
    let mut y = vec![T::zero(); n * fout];
    for s in 0..n {
        y[s * fout..(s + 1) * fout].copy_from_slice(bias.data());
    }
    unsafe {
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            x.data().as_ptr(),
            fin as isize,
            1,
            weight.data().as_ptr(),
            1,
            fin as isize,
            T::one(),
            y.as_mut_ptr(),
            fout as isize,
            1,
        );
    }
    Tensor::new(&[n, fout], y).expect("linear shape")
}

pub(crate) fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let n = x.shape()[0];
    let (fout, fin) = (weight.shape()[0], weight.shape()[1]);
    let mut dx = vec![T::zero(); n * fin];
    let mut dw = vec![T::zero(); fout * fin];
    let mut db = vec![T::zero(); fout];
    let dyd = dy.data();
    for s in 0..n {
        for o in 0..fout {
            db[o] += dyd[s * fout + o];
        }
    }
    unsafe {
        T::gemm(
            fout,
            n,
            fin,
            T::one(),
            dyd.as_ptr(),
            1,
            fout as isize,
            x.data().as_ptr(),
            fin as isize,
            1,
            T::zero(),
            dw.as_mut_ptr(),
            fin as isize,
            1,
        );
        T::gemm(
            n,
            fout,
            fin,
            T::one(),
            dyd.as_ptr(),
            fout as isize,
            1,
            weight.data().as_ptr(),
            fin as isize,
            1,
            T::zero(),
            dx.as_mut_ptr(),
            fin as isize,
            1,
        );
    }
    (
        Tensor::new(x.shape(), dx).expect("dx"),
        Tensor::new(weight.shape(), dw).expect("dw"),
        Tensor::new(&[fout], db).expect("db"),
    )
}
