//! Volumetric primitives on channels-first `[C, X, Y, Z]` tensors.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug)]
pub(crate) struct ConvSaved<T> {
    stride: usize,
    pad: usize,
    kernel: [usize; 3],
    in_dims: [usize; 4],
    out_spatial: [usize; 3],
    /// im2col matrix `[Cin*kx*ky*kz, P]`; `None` for pointwise convolutions,
    /// where the input itself is that matrix.
    cols: Option<Vec<T>>,
}

impl<T> ConvSaved<T> {
    fn rows(&self) -> usize {
        self.in_dims[0] * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.out_spatial.iter().product()
    }
}

/// Near-equal partition of `len` cells into `parts` contiguous bins that tile
/// the range exactly: bin `i` is `[floor(i*len/parts), floor((i+1)*len/parts))`.
pub fn partition_bins(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts)
        .map(|i| (i * len / parts, (i + 1) * len / parts))
        .collect()
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match shape {
        &[c, x, y, z] => Ok([c, x, y, z]),
        _ => Err(Error::arg(op, format!("expects [C, X, Y, Z], got {shape:?}"))),
    }
}

fn im2col<T: Scalar>(x: &[T], s: &ConvSaved<T>) -> Vec<T> {
    let [cin, ix, iy, iz] = s.in_dims;
    let [kx, ky, kz] = s.kernel;
    let [ox, oy, oz] = s.out_spatial;
    let p = s.positions();
    let mut cols = vec![T::zero(); s.rows() * p];
    let (stride, pad) = (s.stride as isize, s.pad as isize);
    let mut r = 0;
    for c in 0..cin {
        for a in 0..kx {
            for b in 0..ky {
                for d in 0..kz {
                    let row = &mut cols[r * p..(r + 1) * p];
                    for u in 0..ox {
                        let xi = u as isize * stride + a as isize - pad;
                        if xi < 0 || xi >= ix as isize {
                            continue;
                        }
                        for v in 0..oy {
                            let yi = v as isize * stride + b as isize - pad;
                            if yi < 0 || yi >= iy as isize {
                                continue;
                            }
                            let src = ((c * ix + xi as usize) * iy + yi as usize) * iz;
                            let dst = (u * oy + v) * oz;
                            for w in 0..oz {
                                let zi = w as isize * stride + d as isize - pad;
                                if zi >= 0 && zi < iz as isize {
                                    row[dst + w] = x[src + zi as usize];
                                }
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], s: &ConvSaved<T>, dx: &mut [T]) {
    let [cin, ix, iy, iz] = s.in_dims;
    let [kx, ky, kz] = s.kernel;
    let [ox, oy, oz] = s.out_spatial;
    let p = s.positions();
    let (stride, pad) = (s.stride as isize, s.pad as isize);
    let mut r = 0;
    for c in 0..cin {
        for a in 0..kx {
            for b in 0..ky {
                for d in 0..kz {
                    let row = &cols[r * p..(r + 1) * p];
                    for u in 0..ox {
                        let xi = u as isize * stride + a as isize - pad;
                        if xi < 0 || xi >= ix as isize {
                            continue;
                        }
                        for v in 0..oy {
                            let yi = v as isize * stride + b as isize - pad;
                            if yi < 0 || yi >= iy as isize {
                                continue;
                            }
                            let dst = ((c * ix + xi as usize) * iy + yi as usize) * iz;
                            let src = (u * oy + v) * oz;
                            for w in 0..oz {
                                let zi = w as isize * stride + d as isize - pad;
                                if zi >= 0 && zi < iz as isize {
                                    dx[dst + zi as usize] += row[src + w];
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

impl<T: Scalar> Tape<T> {
    /// 3-D cross-correlation. `x: [Cin, X, Y, Z]`, `w: [Cout, Cin, kx, ky, kz]`,
    /// `b: [Cout]`. Output extent per axis is `(in + 2*pad - k) / stride + 1`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let v = self.values(&[x, w, b])?;
        let (xv, wv, bv) = (&v[0], &v[1], &v[2]);
        let in_dims = dims4("conv3d", xv.shape())?;
        let (cout, kernel) = match wv.shape() {
            &[co, ci, a, bb, c] if ci == in_dims[0] => (co, [a, bb, c]),
            _ => return Err(Error::shape("conv3d", xv.shape(), wv.shape())),
        };
        if bv.shape() != [cout] {
            return Err(Error::shape("conv3d", wv.shape(), bv.shape()));
        }
        if stride == 0 {
            return Err(Error::arg("conv3d", "stride must be >= 1"));
        }
        let mut out_spatial = [0; 3];
        for i in 0..3 {
            let padded = in_dims[i + 1] + 2 * pad;
            if kernel[i] > padded {
                return Err(Error::shape("conv3d", xv.shape(), wv.shape()));
            }
            out_spatial[i] = (padded - kernel[i]) / stride + 1;
        }
        let mut saved = ConvSaved {
            stride,
            pad,
            kernel,
            in_dims,
            out_spatial,
            cols: None,
        };
        let pointwise = kernel == [1, 1, 1] && stride == 1 && pad == 0;
        let p = saved.positions();
        let rows = saved.rows();
        let mut out = vec![T::zero(); cout * p];
        if pointwise {
            T::gemm(cout, rows, p, wv.data(), false, xv.data(), false, &mut out, T::zero());
        } else {
            let cols = im2col(xv.data(), &saved);
            T::gemm(cout, rows, p, wv.data(), false, &cols, false, &mut out, T::zero());
            saved.cols = Some(cols);
        }
        for (co, chunk) in out.chunks_mut(p).enumerate() {
            let bias = bv.data()[co];
            chunk.iter_mut().for_each(|o| *o += bias);
        }
        let shape = vec![cout, out_spatial[0], out_spatial[1], out_spatial[2]];
        self.push(Tensor::from_parts(shape, out), Op::Conv3d(saved), &[x, w, b])
    }

    /// Mean pooling of `[C, X, Y, Z]` onto a `grid`, each cell averaging its
    /// near-equal partition of the input.
    pub fn adaptive_pool3d(&self, x: Var, grid: [usize; 3]) -> Result<Var> {
        let xv = self.values(&[x])?.remove(0);
        let [c, ix, iy, iz] = dims4("adaptive_pool3d", xv.shape())?;
        let inp = [ix, iy, iz];
        if (0..3).any(|i| grid[i] == 0 || grid[i] > inp[i]) {
            return Err(Error::shape("adaptive_pool3d", xv.shape(), &grid));
        }
        let bx = partition_bins(ix, grid[0]);
        let by = partition_bins(iy, grid[1]);
        let bz = partition_bins(iz, grid[2]);
        let xd = xv.data();
        let mut out = Vec::with_capacity(c * grid.iter().product::<usize>());
        for ch in 0..c {
            for &(x0, x1) in &bx {
                for &(y0, y1) in &by {
                    for &(z0, z1) in &bz {
                        let mut acc = T::zero();
                        for xi in x0..x1 {
                            for yi in y0..y1 {
                                let base = ((ch * ix + xi) * iy + yi) * iz;
                                for zi in z0..z1 {
                                    acc += xd[base + zi];
                                }
                            }
                        }
                        let count = (x1 - x0) * (y1 - y0) * (z1 - z0);
                        out.push(acc / T::c(count as f64));
                    }
                }
            }
        }
        let shape = vec![c, grid[0], grid[1], grid[2]];
        self.push(Tensor::from_parts(shape, out), Op::AdaptivePool3d, &[x])
    }

    /// Crops a `[X, Y, Z]` volume to `size` starting at `origin` (which may lie
    /// outside the volume); cells outside the source are zero.
    pub fn crop3d(&self, x: Var, origin: [isize; 3], size: [usize; 3]) -> Result<Var> {
        let xv = self.values(&[x])?.remove(0);
        let src = match xv.shape() {
            &[a, b, c] => [a, b, c],
            s => return Err(Error::arg("crop3d", format!("expects [X, Y, Z], got {s:?}"))),
        };
        if size.iter().any(|&s| s == 0) {
            return Err(Error::arg("crop3d", "crop size must be >= 1 per axis"));
        }
        let xd = xv.data();
        let mut out = vec![T::zero(); size.iter().product()];
        for_each_overlap(src, origin, size, |s, d| out[d] = xd[s]);
        self.push(
            Tensor::from_parts(size.to_vec(), out),
            Op::Crop3d { origin },
            &[x],
        )
    }
}

/// Calls `f(src_flat, dst_flat)` for every crop cell that lies inside the source.
fn for_each_overlap(
    src: [usize; 3],
    origin: [isize; 3],
    size: [usize; 3],
    mut f: impl FnMut(usize, usize),
) {
    for a in 0..size[0] {
        let xs = origin[0] + a as isize;
        if xs < 0 || xs >= src[0] as isize {
            continue;
        }
        for b in 0..size[1] {
            let ys = origin[1] + b as isize;
            if ys < 0 || ys >= src[1] as isize {
                continue;
            }
            for c in 0..size[2] {
                let zs = origin[2] + c as isize;
                if zs < 0 || zs >= src[2] as isize {
                    continue;
                }
                let s = (xs as usize * src[1] + ys as usize) * src[2] + zs as usize;
                let d = (a * size[1] + b) * size[2] + c;
                f(s, d);
            }
        }
    }
}

pub(crate) fn conv3d_backward<T: Scalar>(
    inputs: &[usize],
    saved: &ConvSaved<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (ix, iw, ib) = (inputs[0], inputs[1], inputs[2]);
    let p = saved.positions();
    let rows = saved.rows();
    let cout = g.len() / p;
    if sink.wants(ib) {
        let gb = sink.buf(ib);
        for (co, chunk) in g.chunks(p).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
    }
    if sink.wants(iw) {
        match &saved.cols {
            Some(cols) => {
                let gw = sink.buf(iw);
                T::gemm(cout, p, rows, g, false, cols, true, gw, T::one());
            }
            None => {
                let (xv, gw) = sink.value_and_buf(ix, iw);
                T::gemm(cout, p, rows, g, false, xv.data(), true, gw, T::one());
            }
        }
    }
    if sink.wants(ix) {
        match &saved.cols {
            Some(_) => {
                let mut dcols = vec![T::zero(); rows * p];
                T::gemm(rows, cout, p, sink.value(iw).data(), true, g, false, &mut dcols, T::zero());
                col2im(&dcols, saved, sink.buf(ix));
            }
            None => {
                let (wv, gx) = sink.value_and_buf(iw, ix);
                T::gemm(rows, cout, p, wv.data(), true, g, false, gx, T::one());
            }
        }
    }
}

pub(crate) fn adaptive_pool3d_backward<T: Scalar>(
    input: usize,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let [c, ix, iy, iz] = dims4("adaptive_pool3d", sink.value(input).shape()).expect("rank 4");
    let grid = [out.shape()[1], out.shape()[2], out.shape()[3]];
    let bx = partition_bins(ix, grid[0]);
    let by = partition_bins(iy, grid[1]);
    let bz = partition_bins(iz, grid[2]);
    let buf = sink.buf(input);
    let mut k = 0;
    for ch in 0..c {
        for &(x0, x1) in &bx {
            for &(y0, y1) in &by {
                for &(z0, z1) in &bz {
                    let count = (x1 - x0) * (y1 - y0) * (z1 - z0);
                    let share = g[k] / T::c(count as f64);
                    k += 1;
                    for xi in x0..x1 {
                        for yi in y0..y1 {
                            let base = ((ch * ix + xi) * iy + yi) * iz;
                            for zi in z0..z1 {
                                buf[base + zi] += share;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn crop3d_backward<T: Scalar>(
    input: usize,
    out: &Tensor<T>,
    origin: [isize; 3],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let s = sink.value(input).shape();
    let src = [s[0], s[1], s[2]];
    let size = [out.shape()[0], out.shape()[1], out.shape()[2]];
    let buf = sink.buf(input);
    for_each_overlap(src, origin, size, |s, d| buf[s] += g[d]);
}
