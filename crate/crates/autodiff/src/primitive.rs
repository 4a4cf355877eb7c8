use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// The core primitive set, addressable by kind. Each kind maps onto the
/// corresponding [`Tape`] method.
#[derive(Debug, Clone, PartialEq)]
pub enum Primitive<T> {
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(T),
    Exp,
    Log,
    Relu,
    Softmax { axis: usize },
    Concat { axis: usize },
    Reshape { shape: Vec<usize> },
    Transpose,
    Sum { axis: usize },
    Mean { axis: usize },
    Max { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
}

impl<T> Primitive<T> {
    fn arity(&self) -> Option<usize> {
        match self {
            Primitive::MatMul | Primitive::Add | Primitive::Sub | Primitive::Mul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn apply(&self, kind: &Primitive<T>, inputs: &[Var]) -> Result<Var> {
        match kind.arity() {
            Some(n) if n != inputs.len() => {
                return Err(Error::arg(
                    "apply",
                    format!("{kind:?} takes {n} inputs, got {}", inputs.len()),
                ))
            }
            _ => {}
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Sub => self.sub(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::Scale(c) => self.scale(inputs[0], *c),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::Relu => self.relu(inputs[0]),
            Primitive::Softmax { axis } => self.softmax(inputs[0], *axis),
            Primitive::Concat { axis } => self.concat(inputs, *axis),
            Primitive::Reshape { shape } => self.reshape(inputs[0], shape),
            Primitive::Transpose => self.transpose(inputs[0]),
            Primitive::Sum { axis } => self.sum(inputs[0], *axis),
            Primitive::Mean { axis } => self.mean(inputs[0], *axis),
            Primitive::Max { axis } => self.max(inputs[0], *axis),
            Primitive::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
        }
    }
}
