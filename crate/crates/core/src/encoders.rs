//! Region-specific encoders: a mask-gated liver encoder producing a context
//! feature map, and a per-lesion ROI encoder producing a few lesion tokens.

use plus_autodiff::{Scalar, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};
use crate::nn::{Bound, Conv3d, LayerSpec};
use crate::volume::{roi_origin, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Liver,
    Lesion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Liver,
    Lesion(usize),
}

/// `tokens: [n, D]` on some tape.
#[derive(Debug, Clone, Copy)]
pub struct FeatureTokens {
    pub tokens: Var,
    pub provenance: Provenance,
}

impl FeatureTokens {
    pub fn new<T: Scalar>(tape: &Tape<T>, tokens: Var, provenance: Provenance) -> Result<Self> {
        let s = tape.shape(tokens);
        if s.len() != 2 || s[0] == 0 {
            return Err(PlusError::Contract(format!("token set must be [n >= 1, D], got {s:?}")));
        }
        Ok(FeatureTokens { tokens, provenance })
    }

    pub fn count<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        tape.shape(self.tokens)[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Output channels per stage; the last entry is the model dim.
    pub widths: Vec<usize>,
    /// Per-stage stride. A stride-`s` stage uses an `s`-wide patchify kernel,
    /// so stride 1 is a pointwise stage.
    pub strides: Vec<usize>,
    /// Liver volumes are mean-pooled onto this grid before encoding.
    pub liver_grid: [usize; 3],
    pub roi: [usize; 3],
    /// Grid the lesion feature map is pooled to before flattening.
    pub lesion_tokens: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 1],
            liver_grid: [64, 64, 32],
            roi: [32, 32, 8],
            lesion_tokens: [2, 2, 1],
        }
    }
}

impl EncoderConfig {
    pub fn full_size_roi() -> [usize; 3] {
        [64, 64, 16]
    }

    pub fn dim(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PlusError::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad(format!(
                "encoder needs one stride per stage, got {} widths and {} strides",
                self.widths.len(),
                self.strides.len()
            ));
        }
        if self.widths.iter().chain(&self.strides).any(|&v| v == 0) {
            return bad("encoder widths and strides must be positive".into());
        }
        for (role, input) in [(Role::Liver, self.liver_grid), (Role::Lesion, self.roi)] {
            let out = self.output_dims(input);
            if out.iter().any(|&d| d == 0) {
                return bad(format!("{role:?} input {input:?} vanishes under strides {:?}", self.strides));
            }
            if role == Role::Lesion && (0..3).any(|a| self.lesion_tokens[a] == 0 || self.lesion_tokens[a] > out[a]) {
                return bad(format!("lesion token grid {:?} exceeds feature map {out:?}", self.lesion_tokens));
            }
        }
        Ok(())
    }

    /// Spatial extent of the final feature map for a given input extent.
    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        let mut d = input;
        for &s in &self.strides {
            d = d.map(|v| v / s);
        }
        d
    }

    pub fn token_count(&self, role: Role) -> usize {
        match role {
            Role::Liver => self.output_dims(self.liver_grid).iter().product(),
            Role::Lesion => self.lesion_tokens.iter().product(),
        }
    }
}

/// Residual CNN: each stage is `h = relu(down(x)); relu(h + mix(h))` with a
/// strided patchify `down` and a pointwise `mix`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub role: Role,
    cfg: EncoderConfig,
    stages: Vec<(Conv3d, Conv3d)>,
}

impl Encoder {
    pub fn new(role: Role, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let prefix = match role {
            Role::Liver => "enc_liver",
            Role::Lesion => "enc_lesion",
        };
        let stages = cfg
            .strides
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                (
                    Conv3d::new(format!("{prefix}.s{i}.down"), s, 0),
                    Conv3d::new(format!("{prefix}.s{i}.mix"), 1, 0),
                )
            })
            .collect();
        Ok(Encoder { role, cfg: cfg.clone(), stages })
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut cin = 1;
        for (i, (down, mix)) in self.stages.iter().enumerate() {
            let w = self.cfg.widths[i];
            specs.push(down.spec(cin, w, self.cfg.strides[i]));
            specs.push(mix.spec(w, w, 1));
            cin = w;
        }
        specs
    }

    /// Shape the gated input must have (after liver downsampling).
    pub fn input_dims(&self) -> [usize; 3] {
        match self.role {
            Role::Liver => self.cfg.liver_grid,
            Role::Lesion => self.cfg.roi,
        }
    }

    /// Gates `volume: [X, Y, Z]` by `mask` and, for the liver role, pools it
    /// onto the liver grid. Returns `[1, gx, gy, gz]`.
    pub fn prepare_input<T: Scalar>(&self, tape: &Tape<T>, volume: Var, mask: &Mask) -> Result<Var> {
        let dims = tape.shape(volume);
        if dims != mask.dims() {
            return Err(plus_autodiff::Error::Shape {
                op: "mask_apply",
                lhs: dims,
                rhs: mask.dims().to_vec(),
            }
            .into());
        }
        let m = tape.constant(mask.to_tensor());
        let gated = tape.mul(volume, m)?;
        let x = tape.reshape(gated, &[1, dims[0], dims[1], dims[2]])?;
        let want = self.input_dims();
        match self.role {
            Role::Liver if dims != want => Ok(tape.adaptive_pool3d(x, want)?),
            Role::Liver => Ok(x),
            Role::Lesion if dims != want => Err(plus_autodiff::Error::Shape {
                op: "encode(lesion)",
                lhs: dims,
                rhs: want.to_vec(),
            }
            .into()),
            Role::Lesion => Ok(x),
        }
    }

    /// Runs the CNN on a prepared `[1, gx, gy, gz]` input; returns `[D, fx, fy, fz]`.
    pub fn feature_map<T: Scalar>(&self, tape: &Tape<T>, p: &Bound, input: Var) -> Result<Var> {
        let s = tape.shape(input);
        if s.len() != 4 || s[0] != 1 || s[1..] != self.input_dims() {
            return Err(plus_autodiff::Error::Shape {
                op: "encoder",
                lhs: s,
                rhs: [&[1], &self.input_dims()[..]].concat(),
            }
            .into());
        }
        let mut x = input;
        for (down, mix) in &self.stages {
            let h = tape.relu(down.forward(tape, p, x)?)?;
            let r = mix.forward(tape, p, h)?;
            x = tape.relu(tape.add(h, r)?)?;
        }
        Ok(x)
    }

    /// Flattens the final map to tokens (pooling lesion maps to the token grid first).
    pub fn tokens<T: Scalar>(&self, tape: &Tape<T>, map: Var, provenance: Provenance) -> Result<FeatureTokens> {
        let map = match self.role {
            Role::Liver => map,
            Role::Lesion => tape.adaptive_pool3d(map, self.cfg.lesion_tokens)?,
        };
        FeatureTokens::new(tape, map_to_tokens(tape, map)?, provenance)
    }

    /// Full encode of a volume already on the tape. Returns the final feature
    /// map together with its tokens.
    pub fn encode<T: Scalar>(
        &self,
        tape: &Tape<T>,
        p: &Bound,
        volume: Var,
        mask: &Mask,
        provenance: Provenance,
    ) -> Result<(Var, FeatureTokens)> {
        let input = self.prepare_input(tape, volume, mask)?;
        let map = self.feature_map(tape, p, input)?;
        let tokens = self.tokens(tape, map, provenance)?;
        Ok((map, tokens))
    }
}

/// `[D, X, Y, Z]` to `[X*Y*Z, D]`.
pub fn map_to_tokens<T: Scalar>(tape: &Tape<T>, map: Var) -> Result<Var> {
    let s = tape.shape(map);
    if s.len() != 4 {
        return Err(PlusError::Contract(format!("feature map must be [D, X, Y, Z], got {s:?}")));
    }
    let flat = tape.reshape(map, &[s[0], s[1] * s[2] * s[3]])?;
    Ok(tape.transpose(flat)?)
}

/// Crops an ROI of `size` out of a volume on the tape, centered on the
/// centroid of `candidate`. Returns the cropped volume and the cropped mask.
pub fn crop_roi<T: Scalar>(tape: &Tape<T>, volume: Var, candidate: &Mask, size: [usize; 3]) -> Result<(Var, Mask)> {
    let center = candidate
        .centroid()
        .ok_or_else(|| PlusError::Contract("extract_roi on an empty mask".into()))?;
    let origin = roi_origin(center, size);
    let roi = tape.crop3d(volume, origin, size)?;
    let dims = candidate.dims();
    let cropped = Mask::from_fn(size, |a, b, c| {
        let s = [a as isize + origin[0], b as isize + origin[1], c as isize + origin[2]];
        (0..3).all(|i| s[i] >= 0 && (s[i] as usize) < dims[i]) && candidate.get(s[0] as usize, s[1] as usize, s[2] as usize)
    });
    Ok((roi, cropped))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shapes() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.output_dims(cfg.liver_grid), [8, 8, 4]);
        assert_eq!(cfg.token_count(Role::Liver), 256);
        assert_eq!(cfg.output_dims(cfg.roi), [4, 4, 1]);
        assert_eq!(cfg.token_count(Role::Lesion), 4);
        let full = EncoderConfig { roi: EncoderConfig::full_size_roi(), ..cfg };
        assert_eq!(full.output_dims(full.roi), [8, 8, 2]);
        full.validate().unwrap();
    }

    #[test]
    fn rejects_vanishing_maps() {
        let cfg = EncoderConfig { roi: [8, 8, 4], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = EncoderConfig { strides: vec![2, 2], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
