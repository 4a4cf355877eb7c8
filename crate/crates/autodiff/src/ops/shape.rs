use super::split_axis;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output flat index, the flat index of the source element.
fn permute_index(in_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let n = numel(in_shape);
    let mut map = Vec::with_capacity(n);
    let mut counter = vec![0usize; out_shape.len()];
    for _ in 0..n {
        map.push(
            counter
                .iter()
                .zip(axes)
                .map(|(&c, &a)| c * in_strides[a])
                .sum(),
        );
        for d in (0..counter.len()).rev() {
            counter[d] += 1;
            if counter[d] < out_shape[d] {
                break;
            }
            counter[d] = 0;
        }
    }
    map
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        if shape.iter().any(|&d| d == 0) || numel(shape) != x.numel() {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let out = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        self.push(out, Op::Reshape, &[a])
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        let mut seen = vec![false; x.rank()];
        if axes.len() != x.rank() || axes.iter().any(|&ax| ax >= x.rank() || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::arg("permute", format!("{axes:?} is not a permutation of rank {}", x.rank())));
        }
        let map = permute_index(x.shape(), axes);
        let xd = x.data();
        let data = map.iter().map(|&i| xd[i]).collect();
        let shape = axes.iter().map(|&ax| x.shape()[ax]).collect();
        self.push(
            Tensor::from_parts(shape, data),
            Op::Permute { axes: axes.to_vec() },
            &[a],
        )
    }

    /// 2-D transpose.
    pub fn transpose(&self, a: Var) -> Result<Var> {
        let r = self.value(a).rank();
        if r != 2 {
            return Err(Error::arg("transpose", format!("expects rank 2, got rank {r}")));
        }
        self.permute(a, &[1, 0])
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::arg("concat", "no inputs"));
        }
        let vals = self.values(parts)?;
        let first = vals[0].shape();
        if axis >= first.len() {
            return Err(Error::arg("concat", format!("axis {axis} out of range for {first:?}")));
        }
        for v in &vals[1..] {
            let s = v.shape();
            let same_off_axis = s.len() == first.len()
                && s.iter().zip(first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !same_off_axis {
                return Err(Error::shape("concat", first, s));
            }
        }
        let (outer, _, inner) = split_axis(first, axis);
        let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &vals {
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.to_vec();
        shape[axis] = total;
        self.push(Tensor::from_parts(shape, data), Op::Concat { axis }, parts)
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        if axis >= x.rank() || len == 0 || start + len > x.shape()[axis] {
            return Err(Error::arg(
                "slice",
                format!("range {start}..{} on axis {axis} of {:?}", start + len, x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        self.push(Tensor::from_parts(shape, data), Op::Slice { axis, start }, &[a])
    }

    /// Repeats a rank-1 tensor `[n]` into `rows` rows: `[rows x n]`.
    pub fn broadcast_rows(&self, a: Var, rows: usize) -> Result<Var> {
        let x = self.values(&[a])?.remove(0);
        if x.rank() != 1 || rows == 0 {
            return Err(Error::arg(
                "broadcast_rows",
                format!("expects rank-1 input and rows >= 1, got {:?} x {rows}", x.shape()),
            ));
        }
        let n = x.numel();
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(x.data());
        }
        self.push(Tensor::from_parts(vec![rows, n], data), Op::BroadcastRows, &[a])
    }
}

pub(crate) fn permute_backward<T: Scalar>(
    input: usize,
    axes: &[usize],
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let map = permute_index(sink.value(input).shape(), axes);
    let buf = sink.buf(input);
    for (&src, &gi) in map.iter().zip(g) {
        buf[src] += gi;
    }
}

pub(crate) fn concat_backward<T: Scalar>(
    inputs: &[usize],
    out: &Tensor<T>,
    axis: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let (outer, total, inner) = split_axis(out.shape(), axis);
    let mut offset = 0;
    for &idx in inputs {
        let len = sink.value(idx).shape()[axis];
        if sink.wants(idx) {
            let buf = sink.buf(idx);
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                for (d, &s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        offset += len;
    }
}

pub(crate) fn slice_backward<T: Scalar>(
    input: usize,
    out: &Tensor<T>,
    axis: usize,
    start: usize,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    if !sink.wants(input) {
        return;
    }
    let in_shape = sink.value(input).shape().to_vec();
    let (outer, n, inner) = split_axis(&in_shape, axis);
    let len = out.shape()[axis];
    let buf = sink.buf(input);
    for o in 0..outer {
        let base = (o * n + start) * inner;
        for (d, &s) in buf[base..base + len * inner]
            .iter_mut()
            .zip(&g[o * len * inner..(o + 1) * len * inner])
        {
            *d += s;
        }
    }
}

pub(crate) fn broadcast_rows_backward<T: Scalar>(input: usize, g: &[T], sink: &mut GradSink<'_, T>) {
    if !sink.wants(input) {
        return;
    }
    let buf = sink.buf(input);
    let n = buf.len();
    for row in g.chunks(n) {
        for (d, &s) in buf.iter_mut().zip(row) {
            *d += s;
        }
    }
}
