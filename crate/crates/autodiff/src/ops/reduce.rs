use super::split_axis;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::arg(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

impl<T: Scalar> Tape<T> {
    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        check_axis("softmax", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (xd[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    total += e;
                }
                for j in 0..n {
                    out[base + j * inner] /= total;
                }
            }
        }
        self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax { axis },
            &[a],
        )
    }

    /// Sums out `axis` (the axis is removed from the shape).
    pub fn sum(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_linear(a, axis, false)
    }

    pub fn mean(&self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_linear(a, axis, true)
    }

    /// Sum of every element, as a scalar.
    pub fn sum_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    fn reduce_linear(&self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        let name = if mean { "mean" } else { "sum" };
        check_axis(name, x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &xd[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            let inv = T::one() / T::c(n as f64);
            out.iter_mut().for_each(|v| *v *= inv);
        }
        let op = if mean { Op::Mean { axis } } else { Op::Sum { axis } };
        self.push(Tensor::from_parts(reduced_shape(x.shape(), axis), out), op, &[a])
    }

    /// Max along `axis`. The reverse rule routes the whole gradient to the
    /// first maximal entry (lowest index on ties).
    pub fn max(&self, a: Var, axis: usize) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        check_axis("max", x.shape(), axis)?;
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut best = 0;
                for j in 1..n {
                    if xd[base + j * inner] > xd[base + best * inner] {
                        best = j;
                    }
                }
                out[o * inner + i] = xd[base + best * inner];
                argmax[o * inner + i] = best;
            }
        }
        self.push(
            Tensor::from_parts(reduced_shape(x.shape(), axis), out),
            Op::Max { axis, argmax },
            &[a],
        )
    }
}

pub(crate) fn softmax_backward<T: Scalar>(
    input: usize,
    out: &Tensor<T>,
    axis: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let (outer, n, inner) = split_axis(out.shape(), axis);
    let y = out.data();
    let buf = sink.buf(input);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += g[base + j * inner] * y[base + j * inner];
            }
            for j in 0..n {
                let p = base + j * inner;
                buf[p] += y[p] * (g[p] - dot);
            }
        }
    }
}

pub(crate) fn sum_backward<T: Scalar>(
    input: usize,
    axis: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
    mean: bool,
) {
    if !sink.wants(input) {
        return;
    }
    let shape = sink.value(input).shape().to_vec();
    let (outer, n, inner) = split_axis(&shape, axis);
    let scale = if mean { T::one() / T::c(n as f64) } else { T::one() };
    let buf = sink.buf(input);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for j in 0..n {
            let dst = &mut buf[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s * scale;
            }
        }
    }
}

pub(crate) fn max_backward<T: Scalar>(
    input: usize,
    axis: usize,
    argmax: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let shape = sink.value(input).shape().to_vec();
    let (outer, n, inner) = split_axis(&shape, axis);
    let buf = sink.buf(input);
    for o in 0..outer {
        for i in 0..inner {
            let j = argmax[o * inner + i];
            buf[o * n * inner + j * inner + i] += g[o * inner + i];
        }
    }
}
