//! Lesion focal loss, patient diagnosis loss, screening loss and their
//! convex combination.
//!
//! Sums over lesions and patients are taken in ascending value order so every
//! loss is exactly invariant to reordering lesions within a patient and to
//! reordering patients.

use plus_autodiff::{Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};

pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassKind {
    Malignant,
    Benign,
    NonLesion,
}

/// How the screening score `q` is formed from a patient's lesions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScreeningMode {
    /// `max_i max(p_malig, p_beni)`.
    #[default]
    MaxOfPair,
    /// `max_i (p_malig + p_beni)`.
    TumorMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Per-class focal weights; empty means all ones.
    pub class_weights: Vec<f64>,
    pub partition: Vec<ClassKind>,
    pub screening: ScreeningMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        use ClassKind::*;
        LossConfig {
            alpha: 0.5,
            beta: 0.3,
            gamma: 2.0,
            class_weights: Vec::new(),
            partition: vec![Malignant, Malignant, Benign, Benign, NonLesion],
            screening: ScreeningMode::MaxOfPair,
        }
    }
}

impl LossConfig {
    pub fn classes(&self) -> usize {
        self.partition.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PlusError::Config(m));
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha + self.beta <= 1.0 + 1e-12) {
            return err(format!("loss weights need alpha, beta >= 0 and alpha + beta <= 1, got {} and {}", self.alpha, self.beta));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return err(format!("focal gamma must be >= 0, got {}", self.gamma));
        }
        if self.partition.is_empty() {
            return err("class partition is empty".into());
        }
        if !self.class_weights.is_empty() && self.class_weights.len() != self.classes() {
            return err(format!("{} class weights for {} classes", self.class_weights.len(), self.classes()));
        }
        if self.class_weights.iter().any(|&z| !(z > 0.0 && z.is_finite())) {
            return err("class weights must be positive".into());
        }
        Ok(())
    }

    pub fn weight(&self, class: usize) -> f64 {
        self.class_weights.get(class).copied().unwrap_or(1.0)
    }

    pub fn classes_of(&self, kind: ClassKind) -> Vec<usize> {
        (0..self.classes()).filter(|&c| self.partition[c] == kind).collect()
    }

    pub fn non_lesion_class(&self) -> Option<usize> {
        self.classes_of(ClassKind::NonLesion).first().copied()
    }

    pub fn is_malignant(&self, class: usize) -> bool {
        self.partition.get(class) == Some(&ClassKind::Malignant)
    }

    pub fn is_benign(&self, class: usize) -> bool {
        self.partition.get(class) == Some(&ClassKind::Benign)
    }
}

/// Inverse class frequency normalized to mean 1; unseen classes get the
/// largest observed weight.
pub fn inverse_frequency_weights(labels: &[usize], classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l < classes {
            counts[l] += 1;
        }
    }
    let inv: Vec<f64> = counts.iter().map(|&c| if c == 0 { 0.0 } else { 1.0 / c as f64 }).collect();
    let max = inv.iter().copied().fold(0.0, f64::max);
    if max == 0.0 {
        return vec![1.0; classes];
    }
    let filled: Vec<f64> = inv.iter().map(|&v| if v == 0.0 { max } else { v }).collect();
    let mean = filled.iter().sum::<f64>() / classes as f64;
    filled.iter().map(|v| v / mean).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchLabels {
    /// Ground-truth class per lesion row.
    pub classes: Vec<usize>,
    /// Lesion row indices per patient.
    pub groups: Vec<Vec<usize>>,
    pub malignant: Vec<bool>,
    pub any_tumor: Vec<bool>,
}

impl BatchLabels {
    pub fn lesions(&self) -> usize {
        self.classes.len()
    }

    pub fn patients(&self) -> usize {
        self.groups.len()
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.classes.iter().any(|&c| c >= classes) {
            return Err(PlusError::Contract(format!("lesion label out of range for {classes} classes")));
        }
        if self.malignant.len() != self.patients() || self.any_tumor.len() != self.patients() {
            return Err(PlusError::Contract("patient label count does not match groups".into()));
        }
        if self.groups.iter().any(Vec::is_empty) {
            return Err(PlusError::Contract("empty patient group".into()));
        }
        let mut seen = vec![false; self.lesions()];
        for &i in self.groups.iter().flatten() {
            if i >= seen.len() || seen[i] {
                return Err(PlusError::Contract("patient groups must partition the lesion rows".into()));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(PlusError::Contract("patient groups must partition the lesion rows".into()));
        }
        Ok(())
    }

    fn one_hot<T: Scalar>(&self, classes: usize) -> Tensor<T> {
        let mut data = vec![T::zero(); self.lesions() * classes];
        for (i, &c) in self.classes.iter().enumerate() {
            data[i * classes + c] = T::one();
        }
        Tensor::new(&[self.lesions(), classes], data).expect("sized")
    }
}

/// Per-patient aggregates, each a `[M]` vector.
#[derive(Debug, Clone, Copy)]
pub struct PatientAggregates {
    pub p_malig: Var,
    pub p_beni: Var,
    pub q: Var,
}

/// Picks entries of a `[n]` vector in the given order.
pub fn gather<T: Scalar>(tape: &Tape<T>, v: Var, indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(PlusError::Contract("gather of zero entries".into()));
    }
    let parts = indices.iter().map(|&i| tape.slice(v, 0, i, 1)).collect::<plus_autodiff::Result<Vec<_>>>()?;
    Ok(if parts.len() == 1 { parts[0] } else { tape.concat(&parts, 0)? })
}

/// Sum of a `[n]` vector taken in ascending value order.
pub fn canonical_sum<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Var> {
    let values = tape.value(v);
    let mut order: Vec<usize> = (0..values.numel()).collect();
    order.sort_by(|&a, &b| values.data()[a].as_f64().total_cmp(&values.data()[b].as_f64()));
    let sorted = gather(tape, v, &order)?;
    Ok(tape.sum_all(sorted)?)
}

fn canonical_mean<T: Scalar>(tape: &Tape<T>, v: Var) -> Result<Var> {
    let n = tape.shape(v)[0];
    let s = canonical_sum(tape, v)?;
    Ok(tape.scale(s, T::c(1.0 / n as f64))?)
}

fn clamp_probs<T: Scalar>(tape: &Tape<T>, p: Var) -> Result<Var> {
    Ok(tape.clamp(p, T::c(PROB_CLAMP), T::c(1.0 - PROB_CLAMP))?)
}

fn check_probs<T: Scalar>(tape: &Tape<T>, probs: Var, labels: &BatchLabels, classes: usize) -> Result<()> {
    let s = tape.shape(probs);
    if s.len() != 2 || s[0] != labels.lesions() || s[1] != classes {
        return Err(plus_autodiff::Error::Shape {
            op: "loss",
            lhs: s,
            rhs: vec![labels.lesions(), classes],
        }
        .into());
    }
    if s[0] == 0 {
        return Err(PlusError::Contract("loss over zero lesions".into()));
    }
    labels.validate(classes)
}

/// Per-lesion `-z_c (1 - p_c)^gamma log p_c` at the true class, as `[N]`.
pub fn focal_terms<T: Scalar>(tape: &Tape<T>, probs: Var, labels: &BatchLabels, cfg: &LossConfig) -> Result<Var> {
    let c = cfg.classes();
    check_probs(tape, probs, labels, c)?;
    let onehot = tape.constant(labels.one_hot(c));
    let p_true = clamp_probs(tape, tape.sum(tape.mul(probs, onehot)?, 1)?)?;
    let log_p = tape.log(p_true)?;
    let modulated = if cfg.gamma == 0.0 {
        log_p
    } else {
        let focus = tape.exp(tape.scale(tape.log(tape.one_minus(p_true)?)?, T::c(cfg.gamma))?)?;
        tape.mul(focus, log_p)?
    };
    let z: Vec<f64> = labels.classes.iter().map(|&k| -cfg.weight(k)).collect();
    let z = tape.constant(Tensor::from_f64(&[labels.lesions()], &z)?);
    Ok(tape.mul(z, modulated)?)
}

/// Mean over patients of the mean focal term over each patient's lesions.
pub fn lesion_focal_loss<T: Scalar>(tape: &Tape<T>, probs: Var, labels: &BatchLabels, cfg: &LossConfig) -> Result<Var> {
    let terms = focal_terms(tape, probs, labels, cfg)?;
    let per_patient = labels
        .groups
        .iter()
        .map(|g| canonical_mean(tape, gather(tape, terms, g)?))
        .collect::<Result<Vec<_>>>()?;
    let stacked = stack_scalars(tape, &per_patient)?;
    canonical_mean(tape, stacked)
}

fn stack_scalars<T: Scalar>(tape: &Tape<T>, xs: &[Var]) -> Result<Var> {
    let rows = xs.iter().map(|&x| tape.reshape(x, &[1])).collect::<plus_autodiff::Result<Vec<_>>>()?;
    Ok(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? })
}

fn class_mass<T: Scalar>(tape: &Tape<T>, probs: Var, classes: &[usize], c: usize) -> Result<Var> {
    let mut ind = vec![0.0; c];
    for &k in classes {
        ind[k] = 1.0;
    }
    let ind = tape.constant(Tensor::from_f64(&[c, 1], &ind)?);
    let mass = tape.matmul(probs, ind)?;
    let n = tape.shape(mass)[0];
    Ok(tape.reshape(mass, &[n])?)
}

/// Per-lesion malignant and benign probability mass, each `[N]`.
pub fn lesion_masses<T: Scalar>(tape: &Tape<T>, probs: Var, cfg: &LossConfig) -> Result<(Var, Var)> {
    let c = cfg.classes();
    Ok((
        class_mass(tape, probs, &cfg.classes_of(ClassKind::Malignant), c)?,
        class_mass(tape, probs, &cfg.classes_of(ClassKind::Benign), c)?,
    ))
}

pub fn patient_aggregate<T: Scalar>(
    tape: &Tape<T>,
    probs: Var,
    labels: &BatchLabels,
    cfg: &LossConfig,
) -> Result<PatientAggregates> {
    check_probs(tape, probs, labels, cfg.classes())?;
    let (malig, beni) = lesion_masses(tape, probs, cfg)?;
    let tumor = match cfg.screening {
        ScreeningMode::MaxOfPair => None,
        ScreeningMode::TumorMass => Some(tape.add(malig, beni)?),
    };
    let (mut pm, mut pb, mut qs) = (Vec::new(), Vec::new(), Vec::new());
    for g in &labels.groups {
        let m = tape.max(gather(tape, malig, g)?, 0)?;
        let b = tape.max(gather(tape, beni, g)?, 0)?;
        let q = match tumor {
            None => tape.max(tape.concat(&[tape.reshape(m, &[1])?, tape.reshape(b, &[1])?], 0)?, 0)?,
            Some(t) => tape.max(gather(tape, t, g)?, 0)?,
        };
        pm.push(m);
        pb.push(b);
        qs.push(q);
    }
    Ok(PatientAggregates {
        p_malig: stack_scalars(tape, &pm)?,
        p_beni: stack_scalars(tape, &pb)?,
        q: stack_scalars(tape, &qs)?,
    })
}

/// Mean binary cross-entropy of `[M]` scores against 0/1 targets.
pub fn binary_cross_entropy<T: Scalar>(tape: &Tape<T>, scores: Var, targets: &[bool]) -> Result<Var> {
    let s = tape.shape(scores);
    if s != [targets.len()] || targets.is_empty() {
        return Err(plus_autodiff::Error::Shape { op: "binary_cross_entropy", lhs: s, rhs: vec![targets.len()] }.into());
    }
    let p = clamp_probs(tape, scores)?;
    let y: Vec<f64> = targets.iter().map(|&t| if t { -1.0 } else { 0.0 }).collect();
    let not_y: Vec<f64> = targets.iter().map(|&t| if t { 0.0 } else { -1.0 }).collect();
    let n = targets.len();
    let pos = tape.mul(tape.constant(Tensor::from_f64(&[n], &y)?), tape.log(p)?)?;
    let neg = tape.mul(tape.constant(Tensor::from_f64(&[n], &not_y)?), tape.log(tape.one_minus(p)?)?)?;
    canonical_mean(tape, tape.add(pos, neg)?)
}

pub fn patient_diagnosis_loss<T: Scalar>(tape: &Tape<T>, agg: &PatientAggregates, labels: &BatchLabels) -> Result<Var> {
    binary_cross_entropy(tape, agg.p_malig, &labels.malignant)
}

pub fn screening_loss<T: Scalar>(tape: &Tape<T>, agg: &PatientAggregates, labels: &BatchLabels) -> Result<Var> {
    binary_cross_entropy(tape, agg.q, &labels.any_tumor)
}

pub fn total_loss<T: Scalar>(tape: &Tape<T>, l_l: Var, l_p: Var, l_s: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let a = tape.scale(l_l, T::c(cfg.alpha))?;
    let b = tape.scale(l_p, T::c(cfg.beta))?;
    let c = tape.scale(l_s, T::c(1.0 - cfg.alpha - cfg.beta))?;
    Ok(tape.add(tape.add(a, b)?, c)?)
}

/// Every component of the objective for one batch.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub lesion: Var,
    pub patient: Var,
    pub screening: Var,
    pub total: Var,
    pub aggregates: PatientAggregates,
}

pub fn objective<T: Scalar>(tape: &Tape<T>, probs: Var, labels: &BatchLabels, cfg: &LossConfig) -> Result<Objective> {
    let lesion = lesion_focal_loss(tape, probs, labels, cfg)?;
    let aggregates = patient_aggregate(tape, probs, labels, cfg)?;
    let patient = patient_diagnosis_loss(tape, &aggregates, labels)?;
    let screening = screening_loss(tape, &aggregates, labels)?;
    let total = total_loss(tape, lesion, patient, screening, cfg)?;
    Ok(Objective { lesion, patient, screening, total, aggregates })
}
