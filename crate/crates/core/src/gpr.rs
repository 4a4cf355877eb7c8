//! Prior-aware reasoning over a graph of lesion feature nodes and
//! prior-weighted prototype nodes, plus the simpler fusion baselines.

use plus_autodiff::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};
use crate::nn::{Bound, LayerSpec, Linear};

pub const PROTOTYPES: &str = "prototypes";
pub const DEFAULT_DISTILL_WEIGHT: f64 = 0.3;

/// How prior logits are combined with the enhanced lesion features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionStrategy {
    Gpr,
    Distillation,
    Gated,
    Weighted,
    None,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::None,
        FusionStrategy::Weighted,
        FusionStrategy::Gated,
        FusionStrategy::Distillation,
        FusionStrategy::Gpr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::Gpr => "gpr",
            FusionStrategy::Distillation => "distillation",
            FusionStrategy::Gated => "gated",
            FusionStrategy::Weighted => "weighted",
            FusionStrategy::None => "none",
        }
    }

    /// Whether the strategy owns a prototype matrix.
    pub fn uses_prototypes(&self) -> bool {
        matches!(self, FusionStrategy::Gpr | FusionStrategy::Gated | FusionStrategy::Weighted)
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = PlusError;

    fn from_str(s: &str) -> Result<Self> {
        FusionStrategy::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| PlusError::Config(format!("unknown fusion strategy {s:?}")))
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// `V_w = softmax(P) . V` for `P: [B, C]`, `V: [C, D]`.
pub fn weighted_prototypes<T: Scalar>(tape: &Tape<T>, prototypes: Var, priors: Var) -> Result<Var> {
    let ps = tape.shape(priors);
    let vs = tape.shape(prototypes);
    if ps.len() != 2 || vs.len() != 2 || ps[1] != vs[0] {
        return Err(plus_autodiff::Error::Shape { op: "weighted_prototypes", lhs: ps, rhs: vs }.into());
    }
    let p_hat = tape.softmax(priors, 1)?;
    Ok(tape.matmul(p_hat, prototypes)?)
}

fn check_batch<T: Scalar>(tape: &Tape<T>, features: Var, priors: Var, dim: usize, classes: usize) -> Result<usize> {
    let fs = tape.shape(features);
    let ps = tape.shape(priors);
    if fs.len() != 2 || fs[1] != dim {
        return Err(plus_autodiff::Error::Shape { op: "fusion", lhs: fs, rhs: vec![0, dim] }.into());
    }
    if ps.len() != 2 || ps[0] != fs[0] || ps[1] != classes {
        return Err(plus_autodiff::Error::Shape { op: "fusion", lhs: ps, rhs: vec![fs[0], classes] }.into());
    }
    Ok(fs[0])
}

#[derive(Debug, Clone)]
pub struct GprOutput {
    pub refined: Var,
    /// `[2B, 2B]` node attention.
    pub attention: Var,
    pub weighted: Var,
}

#[derive(Debug, Clone)]
pub struct Gpr {
    pub dim: usize,
    pub classes: usize,
    psi: Linear,
    wq: Linear,
    wk: Linear,
    wv: Linear,
    fuse: Linear,
}

impl Gpr {
    pub fn new(dim: usize, classes: usize) -> Self {
        Gpr {
            dim,
            classes,
            psi: Linear::new("gpr.psi"),
            wq: Linear::new("gpr.q"),
            wk: Linear::new("gpr.k"),
            wv: Linear::new("gpr.v"),
            fuse: Linear::new("gpr.fuse"),
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let d = self.dim;
        vec![
            LayerSpec::matrix(PROTOTYPES, self.classes, d),
            self.psi.spec(d, d),
            self.wq.spec(d, d),
            self.wk.spec(d, d),
            self.wv.spec(d, d),
            self.fuse.spec(2 * d, d),
        ]
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, features: Var, priors: Var) -> Result<GprOutput> {
        let b = check_batch(tape, features, priors, self.dim, self.classes)?;
        let f_psi = self.psi.forward(tape, p, features)?;
        let v_w = weighted_prototypes(tape, p.var(PROTOTYPES)?, priors)?;
        let nodes = tape.concat(&[f_psi, v_w], 0)?;
        let q = self.wq.forward(tape, p, nodes)?;
        let k = self.wk.forward(tape, p, nodes)?;
        let v = self.wv.forward(tape, p, nodes)?;
        let scores = tape.matmul(q, tape.transpose(k)?)?;
        let scores = tape.scale(scores, T::c(1.0 / (self.dim as f64).sqrt()))?;
        let attention = tape.softmax(scores, 1)?;
        let messages = tape.matmul(attention, v)?;
        // only the feature (central) nodes' messages are used
        let central = tape.slice(messages, 0, 0, b)?;
        let gate = self.fuse.forward(tape, p, tape.concat(&[f_psi, central], 1)?)?;
        let refined = tape.add(features, tape.mul(gate, v_w)?)?;
        Ok(GprOutput { refined, attention, weighted: v_w })
    }
}

/// Output of a fusion step: refined features plus an optional auxiliary loss.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub features: Var,
    pub aux_loss: Option<Var>,
}

/// Linear `D -> C` classifier over refined features.
#[derive(Debug, Clone)]
pub struct ClassifyHead {
    pub dim: usize,
    pub classes: usize,
    lin: Linear,
}

impl ClassifyHead {
    pub fn new(dim: usize, classes: usize) -> Self {
        ClassifyHead { dim, classes, lin: Linear::new("head") }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        vec![self.lin.spec(self.dim, self.classes)]
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, features: Var) -> Result<Var> {
        self.lin.forward(tape, p, features)
    }
}

/// One of the fusion strategies together with its parameters.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub strategy: FusionStrategy,
    pub dim: usize,
    pub classes: usize,
    pub distill_weight: f64,
    gpr: Gpr,
    gate: Linear,
}

pub const WEIGHT: &str = "fuse.weight";

impl Fusion {
    pub fn new(strategy: FusionStrategy, dim: usize, classes: usize) -> Self {
        Fusion {
            strategy,
            dim,
            classes,
            distill_weight: DEFAULT_DISTILL_WEIGHT,
            gpr: Gpr::new(dim, classes),
            gate: Linear::new("fuse.gate"),
        }
    }

    pub fn gpr(&self) -> &Gpr {
        &self.gpr
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let (d, c) = (self.dim, self.classes);
        match self.strategy {
            FusionStrategy::Gpr => self.gpr.specs(),
            FusionStrategy::Gated => vec![LayerSpec::matrix(PROTOTYPES, c, d), self.gate.spec(2 * d, d)],
            FusionStrategy::Weighted => vec![LayerSpec::matrix(PROTOTYPES, c, d), LayerSpec::scalar(WEIGHT, 0.5)],
            FusionStrategy::Distillation | FusionStrategy::None => Vec::new(),
        }
    }

    /// Applies the strategy. Distillation needs the classifier to form its
    /// auxiliary `KL(softmax(P) || softmax(head(F)))` term.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        head: &ClassifyHead,
        features: Var,
        priors: Var,
    ) -> Result<Fused> {
        check_batch(tape, features, priors, self.dim, self.classes)?;
        let features = match self.strategy {
            FusionStrategy::None => features,
            FusionStrategy::Gpr => self.gpr.forward(tape, p, features, priors)?.refined,
            FusionStrategy::Distillation => {
                let logits = head.forward(tape, p, features)?;
                let kl = kl_divergence(tape, priors, logits)?;
                let aux = tape.scale(kl, T::c(self.distill_weight))?;
                return Ok(Fused { features, aux_loss: Some(aux) });
            }
            FusionStrategy::Gated => {
                let v_w = weighted_prototypes(tape, p.var(PROTOTYPES)?, priors)?;
                let pair = tape.concat(&[features, v_w], 1)?;
                let g = tape.sigmoid(self.gate.forward(tape, p, pair)?)?;
                let keep = tape.mul(g, features)?;
                let prior = tape.mul(tape.one_minus(g)?, v_w)?;
                tape.add(keep, prior)?
            }
            FusionStrategy::Weighted => {
                let v_w = weighted_prototypes(tape, p.var(PROTOTYPES)?, priors)?;
                let w = p.var(WEIGHT)?;
                let keep = tape.mul(w, features)?;
                let prior = tape.mul(tape.one_minus(w)?, v_w)?;
                tape.add(keep, prior)?
            }
        };
        Ok(Fused { features, aux_loss: None })
    }
}

/// Mean over rows of `KL(softmax(p) || softmax(q))`.
pub fn kl_divergence<T: Scalar>(tape: &Tape<T>, p_logits: Var, q_logits: Var) -> Result<Var> {
    let ps = tape.shape(p_logits);
    if ps != tape.shape(q_logits) || ps.len() != 2 {
        return Err(plus_autodiff::Error::Shape { op: "kl_divergence", lhs: ps, rhs: tape.shape(q_logits) }.into());
    }
    let p = tape.softmax(p_logits, 1)?;
    let log_p = log_softmax(tape, p_logits)?;
    let log_q = log_softmax(tape, q_logits)?;
    let diff = tape.sub(log_p, log_q)?;
    let per_row = tape.sum(tape.mul(p, diff)?, 1)?;
    Ok(tape.mean_all(per_row)?)
}

/// Row-wise `x - logsumexp(x)` computed from max-shifted logits.
pub fn log_softmax<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (rows, cols) = (s[0], s[1]);
    let xv = tape.value(x);
    let mut shift = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &xv.data()[r * cols..(r + 1) * cols];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        shift[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = m);
    }
    // the shift is a constant; the result does not depend on it mathematically
    let shifted = tape.sub(x, tape.constant(Tensor::new(&[rows, cols], shift)?))?;
    let lse = tape.log(tape.sum(tape.exp(shifted)?, 1)?)?;
    let lse = tape.transpose(tape.broadcast_rows(lse, cols)?)?;
    Ok(tape.sub(shifted, lse)?)
}
