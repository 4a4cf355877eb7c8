//! Forward definitions and reverse rules for every primitive.

pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod norm;
pub(crate) mod reduce;
pub(crate) mod shape;
pub(crate) mod volume;

use crate::scalar::Scalar;
use crate::tape::{GradSink, Node, Op};

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn backward<T: Scalar>(node: &Node<T>, g: &[T], sink: &mut GradSink<'_, T>) {
    let inputs = &node.inputs;
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => linalg::matmul_backward(inputs, g, sink),
        Op::Add => elementwise::add_backward(inputs, out, g, sink, T::one()),
        Op::Sub => elementwise::add_backward(inputs, out, g, sink, -T::one()),
        Op::Mul => elementwise::mul_backward(inputs, out, g, sink),
        Op::Scale(c) => elementwise::unary_backward(inputs[0], g, sink, |_, gi| gi * *c),
        Op::Shift => elementwise::unary_backward(inputs[0], g, sink, |_, gi| gi),
        Op::Exp => elementwise::output_backward(inputs[0], out, g, sink, |y, gi| gi * y),
        Op::Log => elementwise::unary_backward(inputs[0], g, sink, |x, gi| gi / x),
        Op::Relu => elementwise::unary_backward(inputs[0], g, sink, |x, gi| {
            if x > T::zero() {
                gi
            } else {
                T::zero()
            }
        }),
        Op::Sigmoid => elementwise::output_backward(inputs[0], out, g, sink, |y, gi| {
            gi * y * (T::one() - y)
        }),
        Op::Clamp { lo, hi } => elementwise::unary_backward(inputs[0], g, sink, |x, gi| {
            if x < *lo || x > *hi {
                T::zero()
            } else {
                gi
            }
        }),
        Op::Softmax { axis } => reduce::softmax_backward(inputs[0], out, *axis, g, sink),
        Op::Concat { axis } => shape::concat_backward(inputs, out, *axis, g, sink),
        Op::Reshape => elementwise::unary_backward(inputs[0], g, sink, |_, gi| gi),
        Op::Permute { axes } => shape::permute_backward(inputs[0], axes, g, sink),
        Op::Sum { axis } => reduce::sum_backward(inputs[0], *axis, g, sink, false),
        Op::Mean { axis } => reduce::sum_backward(inputs[0], *axis, g, sink, true),
        Op::Max { axis, argmax } => reduce::max_backward(inputs[0], *axis, argmax, g, sink),
        Op::Slice { axis, start } => shape::slice_backward(inputs[0], out, *axis, *start, g, sink),
        Op::BroadcastRows => shape::broadcast_rows_backward(inputs[0], g, sink),
        Op::Conv3d(saved) => volume::conv3d_backward(inputs, saved, g, sink),
        Op::AdaptivePool3d => volume::adaptive_pool3d_backward(inputs[0], out, g, sink),
        Op::LayerNorm { xhat, inv_std } => norm::layer_norm_backward(inputs, xhat, inv_std, g, sink),
        Op::Crop3d { origin } => volume::crop3d_backward(inputs[0], out, *origin, g, sink),
    }
}
