//! The full classifier: liver and lesion encoders, HDA, prior fusion and the
//! classification head.

use plus_autodiff::{Scalar, Tape, Tensor, Var};

use crate::config::ModelConfig;
use crate::encoders::{Encoder, FeatureTokens, Provenance, Role};
use crate::error::{PlusError, Result};
use crate::gpr::{ClassifyHead, Fusion};
use crate::hda::Hda;
use crate::nn::{init_params, Bound, LayerSpec, Linear, ParamSet};

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub classes: usize,
    pub liver: Encoder,
    pub lesion: Encoder,
    pub hda: Hda,
    lesion_only: Linear,
    pub fusion: Fusion,
    pub head: ClassifyHead,
}

/// Output of a forward pass over a lesion batch.
#[derive(Debug, Clone)]
pub struct BatchOutput {
    /// `[B, D]` enhanced features before fusion.
    pub features: Var,
    pub logits: Var,
    pub probs: Var,
    pub aux_loss: Option<Var>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, classes: usize) -> Result<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(PlusError::Config("need at least two classes".into()));
        }
        let mut fusion = Fusion::new(cfg.fusion, cfg.dim, classes);
        fusion.distill_weight = cfg.distill_weight;
        Ok(Model {
            cfg: cfg.clone(),
            classes,
            liver: Encoder::new(Role::Liver, &cfg.encoder)?,
            lesion: Encoder::new(Role::Lesion, &cfg.encoder)?,
            hda: Hda::new(&cfg.hda, cfg.attention())?,
            lesion_only: Linear::new("lesion_only.f1"),
            fusion,
            head: ClassifyHead::new(cfg.dim, classes),
        })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = self.lesion.specs();
        if self.cfg.use_hda {
            specs.extend(self.liver.specs());
            specs.extend(self.hda.specs());
        } else {
            specs.push(self.lesion_only.spec(self.cfg.dim, self.cfg.dim));
        }
        specs.extend(self.fusion.specs());
        specs.extend(self.head.specs());
        specs
    }

    pub fn init<T: Scalar>(&self, seed: u64) -> Result<ParamSet<T>> {
        init_params(&self.specs(), seed)
    }

    /// Liver context for a case: its pooled tokens at every HDA scale.
    pub fn liver_context<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, liver_input: Var) -> Result<Vec<FeatureTokens>> {
        let map = self.liver.feature_map(tape, p, liver_input)?;
        self.hda.pool_liver(tape, map)
    }

    /// Enhanced `[1, D]` feature of one lesion input `[1, rx, ry, rz]`.
    pub fn lesion_feature<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        context: Option<&[FeatureTokens]>,
        roi_input: Var,
        index: usize,
    ) -> Result<Var> {
        let map = self.lesion.feature_map(tape, p, roi_input)?;
        let tokens = self.lesion.tokens(tape, map, Provenance::Lesion(index))?;
        match (self.cfg.use_hda, context) {
            (true, Some(ctx)) => Ok(self.hda.forward_pooled(tape, p, ctx, &tokens)?.vector),
            (true, None) => Err(PlusError::Contract("hda model needs liver context".into())),
            (false, _) => {
                let mean = tape.mean(tokens.tokens, 0)?;
                let row = tape.reshape(mean, &[1, self.cfg.dim])?;
                self.lesion_only.forward(tape, p, row)
            }
        }
    }

    /// Fusion, head and softmax over stacked features `[B, D]` with prior logits `[B, C]`.
    pub fn classify<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, features: Var, priors: Var) -> Result<BatchOutput> {
        let fused = self.fusion.forward(tape, p, &self.head, features, priors)?;
        let logits = self.head.forward(tape, p, fused.features)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(BatchOutput { features, logits, probs, aux_loss: fused.aux_loss })
    }

    /// Forward over a batch of cases given prepared input tensors. `cases` holds
    /// `(liver_input, roi_inputs)`; priors are stacked in the same order.
    pub fn forward_inputs<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        cases: &[(&Tensor<T>, Vec<&Tensor<T>>)],
        priors: &Tensor<T>,
    ) -> Result<BatchOutput> {
        let mut rows = Vec::new();
        for (liver, rois) in cases {
            if rois.is_empty() {
                continue;
            }
            let context = if self.cfg.use_hda {
                Some(self.liver_context(tape, p, tape.constant((*liver).clone()))?)
            } else {
                None
            };
            for roi in rois {
                let k = rows.len();
                rows.push(self.lesion_feature(tape, p, context.as_deref(), tape.constant((*roi).clone()), k)?);
            }
        }
        if rows.is_empty() {
            return Err(PlusError::Contract("forward over a batch without candidates".into()));
        }
        let features = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
        let priors = tape.constant(priors.clone());
        self.classify(tape, p, features, priors)
    }
}
