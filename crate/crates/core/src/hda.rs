//! Hierarchical dual attention: multi-scale bidirectional cross-attention
//! between pooled liver context and lesion tokens.

use plus_autodiff::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{map_to_tokens, FeatureTokens, Provenance};
use crate::error::{PlusError, Result};
use crate::nn::{AttentionConfig, Attended, Bound, LayerNorm, LayerSpec, Linear, MultiHeadAttention};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HdaConfig {
    /// Pooling grids over the liver feature map, coarse to fine.
    pub grids: Vec<[usize; 3]>,
    /// Adds the query tokens back onto each attention output.
    pub residual: bool,
    /// Per-token layer norm after every attention and projection block.
    pub layer_norm: bool,
}

impl Default for HdaConfig {
    fn default() -> Self {
        HdaConfig {
            grids: vec![[1, 1, 1], [2, 2, 2], [4, 4, 4], [8, 8, 4]],
            residual: true,
            layer_norm: true,
        }
    }
}

impl HdaConfig {
    pub fn scales(&self) -> usize {
        self.grids.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(PlusError::Config("hda needs at least one scale grid".into()));
        }
        if self.grids.iter().any(|g| g.iter().any(|&v| v == 0)) {
            return Err(PlusError::Config(format!("hda grids must be positive, got {:?}", self.grids)));
        }
        Ok(())
    }

    /// Tokens entering the mean pool: every scale contributes its pooled
    /// liver tokens plus one copy of the lesion tokens.
    pub fn pre_pool_tokens(&self, lesion_tokens: usize) -> usize {
        self.grids.iter().map(|g| g.iter().product::<usize>() + lesion_tokens).sum()
    }
}

/// `vector: [1, D]`.
#[derive(Debug, Clone, Copy)]
pub struct EnhancedFeature {
    pub vector: Var,
    pub lesion: usize,
}

/// Queries from `a`, keys and values from `b`.
pub fn cross_attend<T: Scalar>(
    tape: &Tape<T>,
    p: &Bound,
    attn: &MultiHeadAttention,
    a: &FeatureTokens,
    b: &FeatureTokens,
) -> Result<Attended> {
    attn.forward(tape, p, a.tokens, b.tokens)
}

/// Intermediates of one dual cross-attention pass.
#[derive(Debug, Clone)]
pub struct DcaOutput {
    /// `[n_x + n_y, D]`: updated context rows followed by updated lesion rows.
    pub tokens: Var,
    pub context: Var,
    pub flow1: Attended,
    pub flow2: Attended,
}

#[derive(Debug, Clone)]
pub struct Hda {
    pub cfg: HdaConfig,
    pub attn: AttentionConfig,
    flow1: MultiHeadAttention,
    flow2: MultiHeadAttention,
    f1: Linear,
    f2: Linear,
    f3: Linear,
    norms: [LayerNorm; 4],
}

impl Hda {
    pub fn new(cfg: &HdaConfig, attn: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        attn.validate()?;
        Ok(Hda {
            cfg: cfg.clone(),
            attn,
            flow1: MultiHeadAttention::new("hda.flow1", attn),
            flow2: MultiHeadAttention::new("hda.flow2", attn),
            f1: Linear::new("hda.f1"),
            f2: Linear::new("hda.f2"),
            f3: Linear::new("hda.f3"),
            norms: [
                LayerNorm::new("hda.ln1"),
                LayerNorm::new("hda.ln2"),
                LayerNorm::new("hda.ln3"),
                LayerNorm::new("hda.ln4"),
            ],
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let d = self.attn.dim;
        let mut specs = self.flow1.specs();
        specs.extend(self.flow2.specs());
        specs.extend([self.f1.spec(d, d), self.f2.spec(d, d), self.f3.spec(d, d)]);
        if self.cfg.layer_norm {
            specs.extend(self.norms.iter().map(|n| n.spec(d)));
        }
        specs
    }

    pub fn flow1(&self) -> &MultiHeadAttention {
        &self.flow1
    }

    pub fn flow2(&self) -> &MultiHeadAttention {
        &self.flow2
    }

    fn block<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, base: Option<Var>, x: Var, norm: usize) -> Result<Var> {
        let x = match base {
            Some(b) if self.cfg.residual => tape.add(b, x)?,
            _ => x,
        };
        if self.cfg.layer_norm {
            self.norms[norm].forward(tape, p, x)
        } else {
            Ok(x)
        }
    }

    /// `x' = f2(A(x, y))`, then `[x'; f3(A(y, x'))]` along the token axis.
    pub fn dca<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, x: &FeatureTokens, y: &FeatureTokens) -> Result<DcaOutput> {
        let flow1 = cross_attend(tape, p, &self.flow1, x, y)?;
        let a = self.block(tape, p, Some(x.tokens), flow1.output, 0)?;
        let context = self.block(tape, p, None, self.f2.forward(tape, p, a)?, 1)?;
        let updated = FeatureTokens::new(tape, context, x.provenance)?;
        let flow2 = cross_attend(tape, p, &self.flow2, y, &updated)?;
        let b = self.block(tape, p, Some(y.tokens), flow2.output, 2)?;
        let lesion = self.block(tape, p, None, self.f3.forward(tape, p, b)?, 3)?;
        let tokens = tape.concat(&[context, lesion], 0)?;
        Ok(DcaOutput { tokens, context, flow1, flow2 })
    }

    /// Pools a liver map `[D, X, Y, Z]` onto every scale grid. The result can be
    /// shared by all lesions of a case.
    pub fn pool_liver<T: Scalar>(&self, tape: &Tape<T>, liver_map: Var) -> Result<Vec<FeatureTokens>> {
        let s = tape.shape(liver_map);
        if s.len() != 4 || s[0] != self.attn.dim {
            return Err(PlusError::Contract(format!(
                "liver map must be [{}, X, Y, Z], got {s:?}",
                self.attn.dim
            )));
        }
        self.cfg
            .grids
            .iter()
            .map(|&g| {
                let pooled = if s[1..] == g { liver_map } else { tape.adaptive_pool3d(liver_map, g)? };
                FeatureTokens::new(tape, map_to_tokens(tape, pooled)?, Provenance::Liver)
            })
            .collect()
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        liver_map: Var,
        lesion: &FeatureTokens,
    ) -> Result<EnhancedFeature> {
        let pooled = self.pool_liver(tape, liver_map)?;
        self.forward_pooled(tape, p, &pooled, lesion)
    }

    /// Token sequence before mean pooling: all DCA outputs concatenated across scales.
    pub fn pre_pool<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        pooled: &[FeatureTokens],
        lesion: &FeatureTokens,
    ) -> Result<Var> {
        if pooled.len() != self.cfg.scales() {
            return Err(PlusError::Contract(format!(
                "expected {} pooled scales, got {}",
                self.cfg.scales(),
                pooled.len()
            )));
        }
        let outs = pooled
            .iter()
            .map(|ctx| Ok(self.dca(tape, p, ctx, lesion)?.tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(if outs.len() == 1 { outs[0] } else { tape.concat(&outs, 0)? })
    }

    pub fn forward_pooled<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        pooled: &[FeatureTokens],
        lesion: &FeatureTokens,
    ) -> Result<EnhancedFeature> {
        let all = self.pre_pool(tape, p, pooled, lesion)?;
        let mean = tape.mean(all, 0)?;
        let row = tape.reshape(mean, &[1, self.attn.dim])?;
        let vector = self.f1.forward(tape, p, row)?;
        let index = match lesion.provenance {
            Provenance::Lesion(i) => i,
            Provenance::Liver => 0,
        };
        Ok(EnhancedFeature { vector, lesion: index })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_token_arithmetic() {
        let cfg = HdaConfig::default();
        assert_eq!(cfg.scales(), 4);
        assert_eq!(cfg.pre_pool_tokens(4), 345);
    }
}
