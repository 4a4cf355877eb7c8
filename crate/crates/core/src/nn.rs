//! Parameterized building blocks composed from tape primitives.

use std::collections::HashMap;

use plus_autodiff::{Distribution, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};

/// Layer normalization epsilon used throughout the model.
pub const LN_EPS: f64 = 1e-5;

/// Description of one parameterized layer, consumed by [`init_params`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    /// `weight: [in, out]`, `bias: [out]`.
    Linear { name: String, inputs: usize, outputs: usize },
    /// `weight: [out, in, k, k, k]`, `bias: [out]`.
    Conv3d { name: String, inputs: usize, outputs: usize, kernel: usize },
    /// `gain: [dim]` (ones), `bias: [dim]` (zeros).
    LayerNorm { name: String, dim: usize },
    /// Free matrix initialized like a linear weight with fan-in `cols`.
    Matrix { name: String, rows: usize, cols: usize },
    /// Scalar parameter with a fixed initial value.
    Scalar { name: String, value: f64 },
}

impl LayerSpec {
    pub fn linear(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        LayerSpec::Linear { name: name.into(), inputs, outputs }
    }

    pub fn conv3d(name: impl Into<String>, inputs: usize, outputs: usize, kernel: usize) -> Self {
        LayerSpec::Conv3d { name: name.into(), inputs, outputs, kernel }
    }

    pub fn layer_norm(name: impl Into<String>, dim: usize) -> Self {
        LayerSpec::LayerNorm { name: name.into(), dim }
    }

    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        LayerSpec::Matrix { name: name.into(), rows, cols }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        LayerSpec::Scalar { name: name.into(), value }
    }
}

/// Named learnable tensors in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
    seed: u64,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(seed: u64) -> Self {
        ParamSet { names: Vec::new(), tensors: Vec::new(), index: HashMap::new(), seed }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PlusError::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    /// Replaces the value of an existing parameter; the shape must not change.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .get_mut(name)
            .ok_or_else(|| PlusError::Contract(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(PlusError::Contract(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
            seed: self.seed,
        }
    }

    /// Registers every parameter on `tape` as a grad-requiring leaf.
    pub fn bind(&self, tape: &Tape<T>) -> Bound {
        self.bind_with(tape, true)
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &Tape<T>) -> Bound {
        self.bind_with(tape, false)
    }

    /// Pairs existing tape handles (in parameter order) with this set's names,
    /// e.g. the variables handed out by `grad_check`.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.len() {
            return Err(PlusError::Contract(format!(
                "expected {} parameter handles, got {}",
                self.len(),
                vars.len()
            )));
        }
        Ok(Bound { vars: vars.to_vec(), index: self.index.clone() })
    }

    /// Merges another set into this one; names must stay unique.
    pub fn extend(&mut self, other: ParamSet<T>) -> Result<()> {
        for (name, t) in other.names.into_iter().zip(other.tensors) {
            self.insert(name, t)?;
        }
        Ok(())
    }

    fn bind_with(&self, tape: &Tape<T>, grad: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), grad)).collect(),
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ParamSet`], looked up by parameter name.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| PlusError::Contract(format!("parameter {name} is not bound")))
    }

    /// Handles in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Deterministic initialization: weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
/// biases zero, layer-norm gains one. Parameters are drawn in spec order from
/// per-parameter streams derived from `seed`.
pub fn init_params<T: Scalar>(specs: &[LayerSpec], seed: u64) -> Result<ParamSet<T>> {
    let mut set = ParamSet::new(seed);
    let mut stream = 0u64;
    let mut next_seed = || {
        stream += 1;
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stream)
    };
    let bad = |name: &str| PlusError::Config(format!("layer {name}: dimensions must be positive"));
    for spec in specs {
        match spec {
            LayerSpec::Linear { name, inputs, outputs } => {
                if *inputs == 0 || *outputs == 0 {
                    return Err(bad(name));
                }
                let bound = (1.0 / *inputs as f64).sqrt();
                let dist = Distribution::Uniform { low: -bound, high: bound };
                set.insert(format!("{name}.weight"), Tensor::random(&[*inputs, *outputs], next_seed(), dist)?)?;
                set.insert(format!("{name}.bias"), Tensor::zeros(&[*outputs]))?;
            }
            LayerSpec::Conv3d { name, inputs, outputs, kernel } => {
                if *inputs == 0 || *outputs == 0 || *kernel == 0 {
                    return Err(bad(name));
                }
                let fan_in = inputs * kernel.pow(3);
                let bound = (1.0 / fan_in as f64).sqrt();
                let dist = Distribution::Uniform { low: -bound, high: bound };
                let shape = [*outputs, *inputs, *kernel, *kernel, *kernel];
                set.insert(format!("{name}.weight"), Tensor::random(&shape, next_seed(), dist)?)?;
                set.insert(format!("{name}.bias"), Tensor::zeros(&[*outputs]))?;
            }
            LayerSpec::LayerNorm { name, dim } => {
                if *dim == 0 {
                    return Err(bad(name));
                }
                set.insert(format!("{name}.gain"), Tensor::ones(&[*dim]))?;
                set.insert(format!("{name}.bias"), Tensor::zeros(&[*dim]))?;
            }
            LayerSpec::Matrix { name, rows, cols } => {
                if *rows == 0 || *cols == 0 {
                    return Err(bad(name));
                }
                let bound = (1.0 / *cols as f64).sqrt();
                let dist = Distribution::Uniform { low: -bound, high: bound };
                set.insert(name.clone(), Tensor::random(&[*rows, *cols], next_seed(), dist)?)?;
            }
            LayerSpec::Scalar { name, value } => {
                set.insert(name.clone(), Tensor::scalar(T::c(*value)))?;
            }
        }
    }
    Ok(set)
}

/// `x . W + b` for `x: [tokens, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
}

impl Linear {
    pub fn new(name: impl Into<String>) -> Self {
        Linear { name: name.into() }
    }

    pub fn spec(&self, inputs: usize, outputs: usize) -> LayerSpec {
        LayerSpec::linear(self.name.clone(), inputs, outputs)
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        linear_forward(tape, p.var(&self.weight_name())?, p.var(&self.bias_name())?, x)
    }
}

pub fn linear_forward<T: Scalar>(tape: &Tape<T>, weight: Var, bias: Var, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, weight)?;
    let rows = tape.shape(xw)[0];
    let b = tape.broadcast_rows(bias, rows)?;
    Ok(tape.add(xw, b)?)
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    name: String,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>) -> Self {
        LayerNorm { name: name.into() }
    }

    pub fn spec(&self, dim: usize) -> LayerSpec {
        LayerSpec::layer_norm(self.name.clone(), dim)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let g = p.var(&format!("{}.gain", self.name))?;
        let b = p.var(&format!("{}.bias", self.name))?;
        Ok(tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    name: String,
    pub stride: usize,
    pub padding: usize,
}

impl Conv3d {
    pub fn new(name: impl Into<String>, stride: usize, padding: usize) -> Self {
        Conv3d { name: name.into(), stride, padding }
    }

    pub fn spec(&self, inputs: usize, outputs: usize, kernel: usize) -> LayerSpec {
        LayerSpec::conv3d(self.name.clone(), inputs, outputs, kernel)
    }

    /// `x: [C, X, Y, Z]`.
    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.var(&format!("{}.weight", self.name))?;
        let b = p.var(&format!("{}.bias", self.name))?;
        Ok(tape.conv3d(x, w, b, self.stride, self.padding)?)
    }
}

/// Adaptive mean pooling of a `[C, X, Y, Z]` map onto `grid`.
pub fn adaptive_pool3d<T: Scalar>(tape: &Tape<T>, x: Var, grid: [usize; 3]) -> Result<Var> {
    Ok(tape.adaptive_pool3d(x, grid)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub dim: usize,
    pub heads: usize,
}

impl AttentionConfig {
    pub fn new(dim: usize, heads: usize) -> Result<Self> {
        let cfg = AttentionConfig { dim, heads };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(PlusError::Config(format!(
                "model dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Multi-head attention: queries from one token set, keys and values from another.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

/// Output of [`MultiHeadAttention::forward`]; `weights[h]` is the `[m, n]`
/// row-stochastic attention matrix of head `h`.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(name: &str, cfg: AttentionConfig) -> Self {
        MultiHeadAttention {
            cfg,
            q: Linear::new(format!("{name}.q")),
            k: Linear::new(format!("{name}.k")),
            v: Linear::new(format!("{name}.v")),
            out: Linear::new(format!("{name}.out")),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let d = self.cfg.dim;
        vec![self.q.spec(d, d), self.k.spec(d, d), self.v.spec(d, d), self.out.spec(d, d)]
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, queries: Var, keys_values: Var) -> Result<Attended> {
        let qs = tape.shape(queries);
        let ks = tape.shape(keys_values);
        let d = self.cfg.dim;
        if qs.len() != 2 || ks.len() != 2 || qs[1] != d || ks[1] != d {
            return Err(plus_autodiff::Error::Shape { op: "mha_forward", lhs: qs, rhs: ks }.into());
        }
        let q = self.q.forward(tape, p, queries)?;
        let k = self.k.forward(tape, p, keys_values)?;
        let v = self.v.forward(tape, p, keys_values)?;
        let hd = self.cfg.head_dim();
        let scale = T::c(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (qh, kh, vh) = if self.cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, h * hd, hd)?,
                    tape.slice(k, 1, h * hd, hd)?,
                    tape.slice(v, 1, h * hd, hd)?,
                )
            };
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores, 1)?;
            heads.push(tape.matmul(attn, vh)?);
            weights.push(attn);
        }
        let merged = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let output = self.out.forward(tape, p, merged)?;
        Ok(Attended { output, weights })
    }
}
