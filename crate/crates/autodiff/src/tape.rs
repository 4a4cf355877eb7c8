use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to one recorded value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.idx
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(T),
    Shift,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Clamp { lo: T, hi: T },
    Softmax { axis: usize },
    Concat { axis: usize },
    Reshape,
    Permute { axes: Vec<usize> },
    Sum { axis: usize },
    Mean { axis: usize },
    Max { axis: usize, argmax: Vec<usize> },
    Slice { axis: usize, start: usize },
    BroadcastRows,
    Conv3d(ops::volume::ConvSaved<T>),
    AdaptivePool3d,
    LayerNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Crop3d { origin: [isize; 3] },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::Shift => "shift",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Clamp { .. } => "clamp",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Reshape => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Max { .. } => "max",
            Op::Slice { .. } => "slice",
            Op::BroadcastRows => "broadcast_rows",
            Op::Conv3d(_) => "conv3d",
            Op::AdaptivePool3d => "adaptive_pool3d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Crop3d { .. } => "crop3d",
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) inputs: Vec<usize>,
    pub(crate) requires_grad: bool,
}

/// Append-only record of one forward computation.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and
/// a single reverse sweep visits each node once. A tape is single-threaded;
/// build one per step.
pub struct Tape<T: Scalar> {
    id: u64,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers a leaf value. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            inputs: Vec::new(),
            requires_grad,
        });
        Var {
            tape: self.id,
            idx: nodes.len() - 1,
        }
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        self.check(v).expect("var belongs to this tape");
        Rc::clone(&self.nodes.borrow()[v.idx].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.idx].requires_grad
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id {
            return Err(Error::Contract(
                "variable was recorded on a different tape".into(),
            ));
        }
        Ok(())
    }

    pub(crate) fn values(&self, vars: &[Var]) -> Result<Vec<Rc<Tensor<T>>>> {
        let nodes = self.nodes.borrow();
        vars.iter()
            .map(|&v| {
                self.check(v)?;
                Ok(Rc::clone(&nodes[v.idx].value))
            })
            .collect()
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.idx].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            inputs: inputs.iter().map(|v| v.idx).collect(),
            requires_grad,
        });
        Ok(Var {
            tape: self.id,
            idx: nodes.len() - 1,
        })
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf registered with `requires_grad` gets an entry; unreachable
    /// leaves get a zero tensor.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check(loss)?;
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.idx];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.idx + 1, || None);
        let mut leaf_grads = HashMap::new();
        if root.requires_grad {
            grads[loss.idx] = Some(vec![T::one()]);
        }
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Op::Leaf = node.op {
                leaf_grads.insert(i, g);
                continue;
            }
            let mut sink = GradSink {
                grads: &mut grads,
                nodes: &nodes,
            };
            ops::backward(node, &g, &mut sink);
        }
        let mut out = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let t = match leaf_grads.remove(&i) {
                    Some(g) => Tensor::from_parts(node.value.shape().to_vec(), g),
                    None => Tensor::zeros(node.value.shape()),
                };
                out.insert(i, t);
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
        })
    }
}

/// Accumulates input gradients during the reverse sweep.
pub(crate) struct GradSink<'a, T> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    pub(crate) fn value(&self, idx: usize) -> &Tensor<T> {
        &self.nodes[idx].value
    }

    /// Zero-initialized (on first touch) gradient buffer of node `idx`.
    pub(crate) fn buf(&mut self, idx: usize) -> &mut [T] {
        let n = self.nodes[idx].value.numel();
        self.grads[idx].get_or_insert_with(|| vec![T::zero(); n])
    }

    /// Value of node `idx` together with a mutable gradient buffer for node `gidx`.
    pub(crate) fn value_and_buf(&mut self, idx: usize, gidx: usize) -> (&Tensor<T>, &mut [T]) {
        let n = self.nodes[gidx].value.numel();
        let buf = self.grads[gidx].get_or_insert_with(|| vec![T::zero(); n]);
        (&self.nodes[idx].value, buf)
    }
}

/// Gradients of a scalar loss with respect to every grad-requiring leaf.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    tape: u64,
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(&v.idx)
    }

    pub fn wrt(&self, v: Var) -> Result<&Tensor<T>> {
        self.get(v).ok_or_else(|| {
            Error::Contract(format!(
                "no gradient for var {} (not a grad-requiring leaf of this tape)",
                v.idx
            ))
        })
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}
