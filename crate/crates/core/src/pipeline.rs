//! Preprocessing, training, evaluation, saliency and ablation runs.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use plus_autodiff::{Scalar, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{Precision, RunConfig};
use crate::dataset::{read_case, read_manifest};
use crate::encoders::crop_roi;
use crate::error::{PlusError, Result};
use crate::gpr::FusionStrategy;
use crate::losses::{inverse_frequency_weights, objective, patient_aggregate, BatchLabels, ClassKind, LossConfig};
use crate::metrics::{
    confusion_matrix, detection_counts, macro_f1, match_lesions, patient_category, patient_diagnosis_metrics,
    per_class_detection, roc_auc, roc_points, LesionMetrics, MatchResult, MetricsReport, PatientScore, RocCurve,
};
use crate::model::{BatchOutput, Model};
use crate::nn::{Bound, ParamSet};
use crate::optim::{adamw_step, cosine_lr, AdamState};
use crate::phantom::{mock_prior_provider, Candidate, PatientCase, PatientLabels, PriorSet};
use crate::volume::{Mask, Volume};

/// Mean and standard deviation of the intensities inside `mask`.
pub fn intensity_stats(v: &Volume, mask: &Mask) -> Result<(f64, f64)> {
    let values: Vec<f64> = v
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(_, &m)| m == 1)
        .map(|(&x, _)| x as f64)
        .collect();
    if values.is_empty() {
        return Err(PlusError::Data("liver mask is empty".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt().max(1e-6)))
}

/// Nearest-neighbour resampling of a case onto `spacing`.
pub fn resample_case(case: &PatientCase, spacing: [f64; 3]) -> Result<PatientCase> {
    let src = case.volume.spacing();
    if src == spacing {
        return Ok(case.clone());
    }
    let dims = case.volume.dims();
    let out: [usize; 3] = [0, 1, 2].map(|a| ((dims[a] as f64 * src[a] / spacing[a]).round() as usize).max(1));
    let map = |a: usize, i: usize| (((i as f64 + 0.5) * spacing[a] / src[a]).floor() as usize).min(dims[a] - 1);
    let mut vol = Volume::zeros(out, spacing)?;
    let pick_mask = |m: &Mask| Mask::from_fn(out, |x, y, z| m.get(map(0, x), map(1, y), map(2, z)));
    for x in 0..out[0] {
        for y in 0..out[1] {
            for z in 0..out[2] {
                vol.set(x, y, z, case.volume.get(map(0, x), map(1, y), map(2, z)));
            }
        }
    }
    let mut resampled = case.clone();
    resampled.volume = vol;
    resampled.liver = pick_mask(&case.liver);
    for l in &mut resampled.lesions {
        l.mask = pick_mask(&l.mask);
    }
    Ok(resampled)
}

fn resample_priors(priors: &PriorSet, from: &PatientCase, spacing: [f64; 3]) -> Result<PriorSet> {
    if from.volume.spacing() == spacing {
        return Ok(priors.clone());
    }
    let mut out = priors.clone();
    for c in &mut out.candidates {
        let fake = PatientCase { lesions: Vec::new(), liver: c.mask.clone(), ..from.clone() };
        c.mask = resample_case(&fake, spacing)?.liver;
    }
    Ok(out)
}

/// Records `(v - mean) / std` on the tape with the statistics as constants.
pub fn normalize_on_tape<T: Scalar>(tape: &Tape<T>, volume: Var, stats: (f64, f64)) -> Result<Var> {
    let shifted = tape.shift(volume, T::c(-stats.0))?;
    Ok(tape.scale(shifted, T::c(1.0 / stats.1))?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCandidate<T> {
    /// Gated `[1, rx, ry, rz]` ROI.
    pub roi: Tensor<T>,
    pub prior: Vec<f64>,
    /// Training label: the class of the GT lesion this candidate came from,
    /// or the non-lesion class.
    pub label: usize,
}

/// A case reduced to encoder inputs plus everything evaluation needs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedCase<T> {
    pub id: String,
    /// Gated, downsampled `[1, gx, gy, gz]` liver input.
    pub liver: Tensor<T>,
    pub candidates: Vec<PreparedCandidate<T>>,
    pub labels: PatientLabels,
    pub benign: bool,
    pub gt_classes: Vec<usize>,
    /// IoU matching of candidates to GT lesions.
    pub matching: MatchResult,
}

impl<T> PreparedCase<T> {
    /// Evaluation truth per candidate: the matched GT class or non-lesion.
    pub fn candidate_truth(&self, non_lesion: usize) -> Vec<usize> {
        (0..self.candidates.len())
            .map(|i| self.matching.gt_for(i).map_or(non_lesion, |g| self.gt_classes[g]))
            .collect()
    }
}

fn check_candidates(case: &PatientCase, priors: &PriorSet, classes: usize) -> Result<()> {
    for (k, c) in priors.candidates.iter().enumerate() {
        if c.mask.dims() != case.volume.dims() || c.mask.is_empty() {
            return Err(PlusError::Data(format!("case {}: candidate {k} mask is empty or outside the volume", case.id)));
        }
        if c.logits.len() != classes || c.logits.iter().any(|v| !v.is_finite()) {
            return Err(PlusError::Data(format!("case {}: candidate {k} has invalid prior logits", case.id)));
        }
    }
    Ok(())
}

/// Normalizes, gates and crops a case into encoder inputs.
pub fn prepare_case<T: Scalar>(model: &Model, cfg: &RunConfig, case: &PatientCase, priors: &PriorSet) -> Result<PreparedCase<T>> {
    let classes = model.classes;
    check_candidates(case, priors, classes)?;
    let priors = resample_priors(priors, case, cfg.spacing)?;
    let case = resample_case(case, cfg.spacing)?;
    let non_lesion = cfg.loss.non_lesion_class().ok_or_else(|| PlusError::Config("no non-lesion class".into()))?;
    let stats = intensity_stats(&case.volume, &case.liver)?;
    let tape = Tape::<T>::new();
    let v = tape.constant(case.volume.to_tensor());
    let norm = normalize_on_tape(&tape, v, stats)?;
    let liver_in = model.liver.prepare_input(&tape, norm, &case.liver)?;
    let mut candidates = Vec::with_capacity(priors.len());
    for c in &priors.candidates {
        let (roi, m) = crop_roi(&tape, norm, &c.mask, cfg.model.encoder.roi)?;
        let input = model.lesion.prepare_input(&tape, roi, &m)?;
        let label = match c.matched {
            Some(g) if g < case.lesions.len() => case.lesions[g].class,
            _ => non_lesion,
        };
        candidates.push(PreparedCandidate { roi: (*tape.value(input)).clone(), prior: c.logits.clone(), label });
    }
    let masks: Vec<Mask> = priors.candidates.iter().map(|c| c.mask.clone()).collect();
    let gts: Vec<Mask> = case.lesions.iter().map(|l| l.mask.clone()).collect();
    Ok(PreparedCase {
        id: case.id.clone(),
        liver: (*tape.value(liver_in)).clone(),
        candidates,
        labels: case.labels,
        benign: case.has_benign(&cfg.loss.partition),
        gt_classes: case.lesions.iter().map(|l| l.class).collect(),
        matching: match_lesions(&masks, &gts, cfg.iou_threshold)?,
    })
}

fn stack_priors<T: Scalar>(cases: &[&PreparedCase<T>], classes: usize) -> Result<Tensor<T>> {
    let rows: Vec<f64> = cases.iter().flat_map(|c| c.candidates.iter().flat_map(|k| k.prior.iter().copied())).collect();
    Ok(Tensor::from_f64(&[rows.len() / classes, classes], &rows)?)
}

/// Forward over several prepared cases; candidate rows are contiguous per case.
pub fn forward_prepared<T: Scalar>(
    model: &Model,
    tape: &Tape<T>,
    p: &Bound,
    cases: &[&PreparedCase<T>],
) -> Result<BatchOutput> {
    let inputs: Vec<(&Tensor<T>, Vec<&Tensor<T>>)> =
        cases.iter().map(|c| (&c.liver, c.candidates.iter().map(|k| &k.roi).collect())).collect();
    let priors = stack_priors(cases, model.classes)?;
    model.forward_inputs(tape, p, &inputs, &priors)
}

pub fn batch_labels<T>(cases: &[&PreparedCase<T>]) -> BatchLabels {
    let mut labels = BatchLabels { classes: Vec::new(), groups: Vec::new(), malignant: Vec::new(), any_tumor: Vec::new() };
    for c in cases.iter().filter(|c| !c.candidates.is_empty()) {
        let start = labels.classes.len();
        labels.classes.extend(c.candidates.iter().map(|k| k.label));
        labels.groups.push((start..labels.classes.len()).collect());
        labels.malignant.push(c.labels.malignant);
        labels.any_tumor.push(c.labels.any_tumor);
    }
    labels
}

/// Per-candidate probabilities and the patient aggregates of one case.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseOutput {
    pub probs: Vec<Vec<f64>>,
    pub p_malig: f64,
    pub p_beni: f64,
    pub q: f64,
}

fn rows_of<T: Scalar>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()
}

/// Patient aggregates of a probability matrix, via the loss-side definition.
pub fn aggregate_probs(probs: &[Vec<f64>], loss: &LossConfig) -> Result<(f64, f64, f64)> {
    let tape = Tape::<f64>::new();
    let c = loss.classes();
    let flat: Vec<f64> = probs.iter().flatten().copied().collect();
    let p = tape.constant(Tensor::from_f64(&[probs.len(), c], &flat)?);
    let labels = BatchLabels {
        classes: vec![0; probs.len()],
        groups: vec![(0..probs.len()).collect()],
        malignant: vec![false],
        any_tumor: vec![false],
    };
    let agg = patient_aggregate(&tape, p, &labels, loss)?;
    Ok((tape.value(agg.p_malig).data()[0], tape.value(agg.p_beni).data()[0], tape.value(agg.q).data()[0]))
}

/// Model output for one prepared case; `None` when the case has no candidates.
pub fn infer_case<T: Scalar>(model: &Model, params: &ParamSet<T>, loss: &LossConfig, case: &PreparedCase<T>) -> Result<Option<CaseOutput>> {
    if case.candidates.is_empty() {
        debug!("case {} has no candidates; skipped", case.id);
        return Ok(None);
    }
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let out = forward_prepared(model, &tape, &p, &[case])?;
    let probs = rows_of(&tape.value(out.probs));
    let (p_malig, p_beni, q) = aggregate_probs(&probs, loss)?;
    Ok(Some(CaseOutput { probs, p_malig, p_beni, q }))
}

/// Full forward for a raw case and its priors.
pub fn forward_case<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    cfg: &RunConfig,
    case: &PatientCase,
    priors: &PriorSet,
) -> Result<Option<CaseOutput>> {
    if priors.is_empty() {
        info!("case {} has no candidates; skipped", case.id);
        return Ok(None);
    }
    let prepared = prepare_case(model, cfg, case, priors)?;
    infer_case(model, params, &cfg.loss, &prepared)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Model,
    /// Probabilities replaced by one-hot ground truth.
    Oracle,
}

pub fn evaluate_prepared<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    cfg: &RunConfig,
    cases: &[PreparedCase<T>],
    split: &str,
    mode: EvalMode,
) -> Result<MetricsReport> {
    let classes = model.classes;
    let non_lesion = cfg.loss.non_lesion_class().ok_or_else(|| PlusError::Config("no non-lesion class".into()))?;
    let lesion_classes: Vec<usize> = (0..classes).filter(|&c| c != non_lesion).collect();
    let mut counts = crate::metrics::Counts::default();
    let mut per_class = vec![crate::metrics::Counts::default(); classes];
    let (mut preds, mut truths) = (Vec::new(), Vec::new());
    let mut cand_probs: Vec<Vec<f64>> = Vec::new();
    let (mut matched, mut matched_right, mut prior_right) = (0usize, 0usize, 0usize);
    let mut scores = Vec::with_capacity(cases.len());
    let (mut pat_pred, mut pat_truth) = (Vec::new(), Vec::new());
    let mut skipped = 0;
    for case in cases {
        let truth = case.candidate_truth(non_lesion);
        let output = match mode {
            EvalMode::Model => infer_case(model, params, &cfg.loss, case)?,
            EvalMode::Oracle if case.candidates.is_empty() => None,
            EvalMode::Oracle => {
                let probs: Vec<Vec<f64>> =
                    truth.iter().map(|&t| (0..classes).map(|c| if c == t { 1.0 } else { 0.0 }).collect()).collect();
                let (p_malig, p_beni, q) = aggregate_probs(&probs, &cfg.loss)?;
                Some(CaseOutput { probs, p_malig, p_beni, q })
            }
        };
        let (probs, pm, pb, q) = match output {
            Some(o) => (o.probs, o.p_malig, o.p_beni, o.q),
            None => {
                skipped += 1;
                (Vec::new(), 0.0, 0.0, 0.0)
            }
        };
        let pred: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
        counts.merge(detection_counts(&case.matching, &pred, &case.gt_classes, non_lesion)?);
        for (c, k) in per_class_detection(&case.matching, &pred, &case.gt_classes, non_lesion, classes)?.into_iter().enumerate() {
            per_class[c].merge(k);
        }
        for (i, cand) in case.candidates.iter().enumerate() {
            if let Some(g) = case.matching.gt_for(i) {
                matched += 1;
                matched_right += (pred[i] == case.gt_classes[g]) as usize;
                prior_right += (argmax(&cand.prior) == case.gt_classes[g]) as usize;
            }
        }
        preds.extend(&pred);
        truths.extend(&truth);
        cand_probs.extend(probs);
        scores.push(PatientScore {
            p_malig: pm,
            p_beni: pb,
            q,
            malignant: case.labels.malignant,
            benign: case.benign,
            any_tumor: case.labels.any_tumor,
        });
        let t = cfg.decision_threshold;
        pat_pred.push(if pm >= t { 2 } else if q >= t { 1 } else { 0 });
        pat_truth.push(patient_category(case.labels.malignant, case.labels.any_tumor));
    }
    let lesion_counts: Vec<_> = lesion_classes.iter().map(|&c| per_class[c]).collect();
    let mut roc = Vec::new();
    let mut per_class_auc = Vec::new();
    for c in 0..classes {
        let s: Vec<f64> = cand_probs.iter().map(|r| r[c]).collect();
        let l: Vec<bool> = truths.iter().map(|&t| t == c).collect();
        let auc = roc_auc(&s, &l).ok();
        per_class_auc.push(auc);
        roc.push(RocCurve { class: c, auc, points: if auc.is_some() { roc_points(&s, &l) } else { Vec::new() } });
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(MetricsReport {
        split: split.to_string(),
        lesion: LesionMetrics {
            detection: counts.prf(),
            counts,
            macro_f1: macro_f1(&lesion_counts),
            per_class: lesion_counts,
            matched_accuracy: ratio(matched_right, matched),
            prior_matched_accuracy: ratio(prior_right, matched),
            matched,
        },
        patient: patient_diagnosis_metrics(&scores, cfg.decision_threshold)?,
        per_class_auc,
        confusion: confusion_matrix(&preds, &truths, classes)?,
        patient_confusion: confusion_matrix(&pat_pred, &pat_truth, 3)?,
        roc,
        patients: cases.len(),
        skipped_patients: skipped,
        config: serde_json::to_value(cfg).expect("config serializes"),
    })
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data_dir
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| PlusError::Config("no data directory configured".into()))
}

/// Priors for a case with a per-split frozen seed.
pub fn priors_for(case: &PatientCase, cfg: &RunConfig, seed: u64) -> Result<PriorSet> {
    mock_prior_provider(case, &cfg.corruption, cfg.classes(), seed)
}

/// Loads and prepares the cases of one split. `limit == 0` keeps all.
pub fn prepare_split<T: Scalar>(model: &Model, cfg: &RunConfig, split: &str, prior_seed: u64, limit: usize) -> Result<Vec<PreparedCase<T>>> {
    let root = data_dir(cfg)?;
    let manifest = read_manifest(&root)?;
    let ids = manifest.split(split)?;
    let take = if limit == 0 { ids.len() } else { limit.min(ids.len()) };
    let mut out = Vec::with_capacity(take);
    for id in &ids[..take] {
        let case = read_case(&root, id)?;
        let priors = priors_for(&case, cfg, prior_seed)?;
        out.push(prepare_case(model, cfg, &case, &priors)?);
    }
    info!("prepared {} {split} cases", out.len());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub batch: usize,
    pub lr: f64,
    pub lesion: f64,
    pub patient: f64,
    pub screening: f64,
    pub total: f64,
    pub aux: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lesion: f64,
    pub patient: f64,
    pub screening: f64,
    pub total: f64,
    pub aux: f64,
    pub val_malignant_f1: Option<f64>,
    pub val_matched_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParamSet<T>,
    pub best_params: ParamSet<T>,
    pub best_epoch: usize,
    pub optimizer: AdamState<T>,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

/// Focal weights actually used in training.
pub fn effective_loss<T>(cfg: &RunConfig, train: &[PreparedCase<T>]) -> LossConfig {
    let mut loss = cfg.loss.clone();
    if loss.class_weights.is_empty() && cfg.auto_class_weights {
        let labels: Vec<usize> = train.iter().flat_map(|c| c.candidates.iter().map(|k| k.label)).collect();
        loss.class_weights = inverse_frequency_weights(&labels, loss.classes());
    }
    loss
}

fn with_context(err: PlusError, epoch: usize, batch: usize) -> PlusError {
    if err.exit_code() == 4 {
        PlusError::Numeric(format!("epoch {epoch}, batch {batch}: {err}"))
    } else {
        err
    }
}

/// Trains on prepared cases. Writes `last.ckpt` every epoch and `best.ckpt`
/// at the end when `out` is given.
pub fn train_prepared<T: Scalar>(
    model: &Model,
    cfg: &RunConfig,
    train: &[PreparedCase<T>],
    val: &[PreparedCase<T>],
    out: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let loss_cfg = effective_loss(cfg, train);
    let opt = &cfg.optimizer;
    let mut params = model.init::<T>(cfg.seeds.init)?;
    let mut state = AdamState::new(&params);
    let usable: Vec<usize> = (0..train.len()).filter(|&i| !train[i].candidates.is_empty()).collect();
    if usable.is_empty() {
        return Err(PlusError::Data("no training case has any candidate".into()));
    }
    if usable.len() < train.len() {
        info!("{} training cases without candidates are skipped", train.len() - usable.len());
    }
    let per_epoch = usable.len().div_ceil(opt.batch_size);
    let total_steps = per_epoch * opt.epochs;
    let mut epochs = Vec::with_capacity(opt.epochs);
    let mut steps = Vec::with_capacity(total_steps);
    let mut best: Option<(f64, usize, ParamSet<T>)> = None;
    let mut step = 0usize;
    for epoch in 0..opt.epochs {
        let mut order = usable.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seeds.data_order.wrapping_add(epoch as u64 * 0x9E37_79B9)));
        let mut sums = [0.0f64; 5];
        for (batch, chunk) in order.chunks(opt.batch_size).enumerate() {
            let cases: Vec<&PreparedCase<T>> = chunk.iter().map(|&i| &train[i]).collect();
            let lr = cosine_lr(step, total_steps, opt.base_lr, opt.min_lr);
            let record = train_step(model, &loss_cfg, &mut params, &mut state, &cases, lr, cfg)
                .map_err(|e| with_context(e, epoch, batch))?;
            let record = StepLog { epoch, batch, lr, ..record };
            for (s, v) in sums.iter_mut().zip([record.lesion, record.patient, record.screening, record.total, record.aux]) {
                *s += v;
            }
            steps.push(record);
            step += 1;
        }
        let n = per_epoch as f64;
        let mut log = EpochLog {
            epoch,
            lesion: sums[0] / n,
            patient: sums[1] / n,
            screening: sums[2] / n,
            total: sums[3] / n,
            aux: sums[4] / n,
            ..Default::default()
        };
        if !val.is_empty() {
            let report = evaluate_prepared(model, &params, cfg, val, &cfg.val_split, EvalMode::Model)?;
            let f1 = report.patient.malignant.f1;
            log.val_malignant_f1 = Some(f1);
            log.val_matched_accuracy = Some(report.lesion.matched_accuracy);
            if best.as_ref().is_none_or(|b| f1 > b.0) {
                best = Some((f1, epoch, params.clone()));
            }
        }
        info!(
            "epoch {epoch}: L_L {:.4} L_P {:.4} L_S {:.4} L_total {:.4} val malignant F1 {:?} val matched acc {:?}",
            log.lesion, log.patient, log.screening, log.total, log.val_malignant_f1, log.val_matched_accuracy
        );
        epochs.push(log);
        if let Some(dir) = out {
            Checkpoint::new(cfg, epoch as u64 + 1, &params, &state).save(&dir.join("last.ckpt"))?;
        }
    }
    let (best_epoch, best_params) = match best {
        Some((_, e, p)) => (e, p),
        None => (opt.epochs - 1, params.clone()),
    };
    if let Some(dir) = out {
        Checkpoint::new(cfg, best_epoch as u64 + 1, &best_params, &state).save(&dir.join("best.ckpt"))?;
        write_logs(dir, &epochs)?;
    }
    Ok(TrainOutcome { params, best_params, best_epoch, optimizer: state, epochs, steps })
}

fn train_step<T: Scalar>(
    model: &Model,
    loss_cfg: &LossConfig,
    params: &mut ParamSet<T>,
    state: &mut AdamState<T>,
    cases: &[&PreparedCase<T>],
    lr: f64,
    cfg: &RunConfig,
) -> Result<StepLog> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let out = forward_prepared(model, &tape, &bound, cases)?;
    let labels = batch_labels(cases);
    let obj = objective(&tape, out.probs, &labels, loss_cfg)?;
    let loss = match out.aux_loss {
        Some(aux) => tape.add(obj.total, aux)?,
        None => obj.total,
    };
    let scalar = |v: Var| tape.value(v).data()[0].as_f64();
    let total = scalar(loss);
    if !total.is_finite() {
        return Err(PlusError::Numeric("loss is not finite".into()));
    }
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor<T>> = bound.vars().iter().map(|&v| grads.wrt(v).cloned()).collect::<plus_autodiff::Result<_>>()?;
    adamw_step(params, &grads, state, lr, &cfg.optimizer)?;
    Ok(StepLog {
        lesion: scalar(obj.lesion),
        patient: scalar(obj.patient),
        screening: scalar(obj.screening),
        total: scalar(obj.total),
        aux: out.aux_loss.map_or(0.0, scalar),
        ..Default::default()
    })
}

fn write_logs(dir: &Path, epochs: &[EpochLog]) -> Result<()> {
    let path = dir.join("train_log.tsv");
    let mut f = std::fs::File::create(&path).map_err(|e| PlusError::io(&path, e))?;
    let mut text = String::from("epoch\tL_L\tL_P\tL_S\tL_total\taux\tval_malignant_f1\tval_matched_accuracy\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    for e in epochs {
        text.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}\n",
            e.epoch,
            e.lesion,
            e.patient,
            e.screening,
            e.total,
            e.aux,
            opt(e.val_malignant_f1),
            opt(e.val_matched_accuracy)
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| PlusError::io(&path, e))
}

/// Summary of a `train` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_checkpoint: PathBuf,
}

fn train_typed<T: Scalar>(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let model = Model::new(&cfg.model, cfg.classes())?;
    let train = prepare_split::<T>(&model, cfg, &cfg.train_split, cfg.seeds.train_priors, cfg.max_train_cases)?;
    let val = match prepare_split::<T>(&model, cfg, &cfg.val_split, cfg.seeds.eval_priors, cfg.max_val_cases) {
        Ok(v) => v,
        Err(PlusError::Data(msg)) => {
            warn!("no validation data ({msg}); best checkpoint is the last epoch");
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    let outcome = train_prepared(&model, cfg, &train, &val, Some(out))?;
    Ok(TrainSummary { epochs: outcome.epochs, best_epoch: outcome.best_epoch, best_checkpoint: out.join("best.ckpt") })
}

/// The `train` command: reads the dataset named by the config and writes
/// checkpoints and logs to `out`.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| PlusError::io(out, e))?;
    std::fs::write(out.join("config.json"), cfg.to_json()).map_err(|e| PlusError::io(out.join("config.json"), e))?;
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, out),
        Precision::F64 => train_typed::<f64>(cfg, out),
    }
}

/// The `eval` command.
pub fn evaluate(ckpt: &Checkpoint, data: Option<&Path>, split: &str, report_dir: &Path) -> Result<MetricsReport> {
    let mut cfg = ckpt.config.clone();
    if let Some(d) = data {
        cfg.data_dir = Some(d.display().to_string());
    }
    let model = Model::new(&cfg.model, cfg.classes())?;
    check_params(&model, &ckpt.params)?;
    let cases = prepare_split::<f32>(&model, &cfg, split, cfg.seeds.eval_priors, 0)?;
    let report = evaluate_prepared(&model, &ckpt.params, &cfg, &cases, split, EvalMode::Model)?;
    report.write(report_dir)?;
    Ok(report)
}

/// Checks that a parameter set has exactly the model's parameter shapes.
pub fn check_params<T: Scalar>(model: &Model, params: &ParamSet<T>) -> Result<()> {
    let reference = model.init::<T>(0)?;
    if reference.names() != params.names() {
        return Err(PlusError::Checkpoint("checkpoint parameters do not match the configured model".into()));
    }
    for ((name, a), b) in reference.iter().zip(params.tensors()) {
        if a.shape() != b.shape() {
            return Err(PlusError::Checkpoint(format!("parameter {name} has shape {:?}, expected {:?}", b.shape(), a.shape())));
        }
    }
    Ok(())
}

/// `|d(sum of target-class logits over candidates) / d(voxel)|` for every voxel.
pub fn saliency_map<T: Scalar>(
    model: &Model,
    params: &ParamSet<T>,
    cfg: &RunConfig,
    case: &PatientCase,
    priors: &PriorSet,
    target: usize,
) -> Result<Volume> {
    if target >= model.classes {
        return Err(PlusError::Contract(format!("target class {target} out of range for {} classes", model.classes)));
    }
    if priors.is_empty() {
        return Err(PlusError::Contract(format!("case {} has no candidates", case.id)));
    }
    check_candidates(case, priors, model.classes)?;
    let priors = resample_priors(priors, case, cfg.spacing)?;
    let case = resample_case(case, cfg.spacing)?;
    let stats = intensity_stats(&case.volume, &case.liver)?;
    let tape = Tape::<T>::new();
    let p = params.bind_frozen(&tape);
    let v = tape.param(case.volume.to_tensor());
    let norm = normalize_on_tape(&tape, v, stats)?;
    let context = if model.cfg.use_hda {
        let liver_in = model.liver.prepare_input(&tape, norm, &case.liver)?;
        Some(model.liver_context(&tape, &p, liver_in)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for (k, c) in priors.candidates.iter().enumerate() {
        let (roi, m) = crop_roi(&tape, norm, &c.mask, cfg.model.encoder.roi)?;
        let input = model.lesion.prepare_input(&tape, roi, &m)?;
        rows.push(model.lesion_feature(&tape, &p, context.as_deref(), input, k)?);
    }
    let features = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let flat: Vec<f64> = priors.candidates.iter().flat_map(|c: &Candidate| c.logits.iter().copied()).collect();
    let prior_t = tape.constant(Tensor::from_f64(&[rows.len(), model.classes], &flat)?);
    let out = model.classify(&tape, &p, features, prior_t)?;
    let mut pick = vec![0.0; rows.len() * model.classes];
    for r in 0..rows.len() {
        pick[r * model.classes + target] = 1.0;
    }
    let pick = tape.constant(Tensor::from_f64(&[rows.len(), model.classes], &pick)?);
    let objective = tape.sum_all(tape.mul(out.logits, pick)?)?;
    let grads = tape.backward(objective)?;
    let g = grads.wrt(v)?;
    let data = g.data().iter().map(|x| x.as_f64().abs() as f32).collect();
    Volume::new(case.volume.dims(), case.volume.spacing(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMeta {
    pub case: String,
    pub class: usize,
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub candidates: usize,
}

/// The `saliency` command: writes raw `f32` magnitudes (x fastest) to `out`
/// and metadata next to it as `<out>.json`.
pub fn saliency(ckpt: &Checkpoint, data: Option<&Path>, case_id: &str, target: usize, out: &Path) -> Result<SaliencyMeta> {
    let mut cfg = ckpt.config.clone();
    if let Some(d) = data {
        cfg.data_dir = Some(d.display().to_string());
    }
    let model = Model::new(&cfg.model, cfg.classes())?;
    check_params(&model, &ckpt.params)?;
    let case = read_case(&data_dir(&cfg)?, case_id)?;
    let priors = priors_for(&case, &cfg, cfg.seeds.eval_priors)?;
    let map = saliency_map(&model, &ckpt.params, &cfg, &case, &priors, target)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| PlusError::io(dir, e))?;
    }
    std::fs::write(out, crate::dataset::encode_volume(&map)).map_err(|e| PlusError::io(out, e))?;
    let meta = SaliencyMeta { case: case.id.clone(), class: target, shape: map.dims(), spacing: map.spacing(), candidates: priors.len() };
    let mut meta_path = out.as_os_str().to_owned();
    meta_path.push(".json");
    crate::dataset::write_json(Path::new(&meta_path), &meta)?;
    Ok(meta)
}

/// One arm of an ablation: lesion-only (no liver context) or HDA with a fusion strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arm {
    LesionOnly,
    Hda(FusionStrategy),
}

impl Arm {
    pub fn name(&self) -> String {
        match self {
            Arm::LesionOnly => "lesion-only".into(),
            Arm::Hda(f) => f.name().into(),
        }
    }

    pub fn configure(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Arm::LesionOnly => {
                c.model.use_hda = false;
                c.model.fusion = FusionStrategy::None;
            }
            Arm::Hda(f) => {
                c.model.use_hda = true;
                c.model.fusion = *f;
            }
        }
        c
    }
}

impl std::str::FromStr for Arm {
    type Err = PlusError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lesion-only" | "no-hda" => Ok(Arm::LesionOnly),
            other => Ok(Arm::Hda(other.parse()?)),
        }
    }
}

pub fn parse_arms(list: &str) -> Result<Vec<Arm>> {
    let arms = list.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect::<Result<Vec<Arm>>>()?;
    if arms.is_empty() {
        return Err(PlusError::Config("no ablation strategies given".into()));
    }
    Ok(arms)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: String,
    pub lesion_macro_f1: f64,
    pub lesion_f1: f64,
    pub matched_accuracy: f64,
    pub malignant_f1: f64,
    pub benign_f1: f64,
    pub screening_f1: f64,
    pub screening_accuracy: f64,
}

impl AblationRow {
    pub fn from_report(arm: &Arm, r: &MetricsReport) -> Self {
        AblationRow {
            arm: arm.name(),
            lesion_macro_f1: r.lesion.macro_f1,
            lesion_f1: r.lesion.detection.f1,
            matched_accuracy: r.lesion.matched_accuracy,
            malignant_f1: r.patient.malignant.f1,
            benign_f1: r.patient.benign.f1,
            screening_f1: r.patient.screening.f1,
            screening_accuracy: r.patient.screening_accuracy,
        }
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(
        "arm,lesion_macro_f1,lesion_f1,matched_accuracy,malignant_f1,benign_f1,screening_f1,screening_accuracy\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.arm, r.lesion_macro_f1, r.lesion_f1, r.matched_accuracy, r.malignant_f1, r.benign_f1, r.screening_f1, r.screening_accuracy
        ));
    }
    out
}

/// Trains and tests every arm on shared prepared data and seeds.
pub fn ablate_prepared<T: Scalar>(
    cfg: &RunConfig,
    arms: &[Arm],
    train: &[PreparedCase<T>],
    val: &[PreparedCase<T>],
    test: &[PreparedCase<T>],
    out: Option<&Path>,
) -> Result<Vec<(AblationRow, MetricsReport)>> {
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let arm_cfg = arm.configure(cfg);
        let model = Model::new(&arm_cfg.model, arm_cfg.classes())?;
        let arm_dir = out.map(|d| d.join(arm.name()));
        if let Some(d) = &arm_dir {
            std::fs::create_dir_all(d).map_err(|e| PlusError::io(d, e))?;
        }
        let outcome = train_prepared(&model, &arm_cfg, train, val, arm_dir.as_deref())?;
        let report = evaluate_prepared(&model, &outcome.best_params, &arm_cfg, test, "test", EvalMode::Model)?;
        if let Some(d) = &arm_dir {
            report.write(d)?;
        }
        info!("arm {}: lesion macro-F1 {:.4}", arm.name(), report.lesion.macro_f1);
        rows.push((AblationRow::from_report(arm, &report), report));
    }
    if let Some(d) = out {
        let table: Vec<AblationRow> = rows.iter().map(|r| r.0.clone()).collect();
        let path = d.join("ablation.csv");
        std::fs::write(&path, ablation_csv(&table)).map_err(|e| PlusError::io(&path, e))?;
    }
    Ok(rows)
}

fn ablate_typed<T: Scalar>(cfg: &RunConfig, arms: &[Arm], out: &Path) -> Result<Vec<AblationRow>> {
    // preprocessing only depends on the encoder geometry, shared by all arms
    let model = Model::new(&cfg.model, cfg.classes())?;
    let train = prepare_split::<T>(&model, cfg, &cfg.train_split, cfg.seeds.train_priors, cfg.max_train_cases)?;
    let val = prepare_split::<T>(&model, cfg, &cfg.val_split, cfg.seeds.eval_priors, cfg.max_val_cases)?;
    let test = prepare_split::<T>(&model, cfg, "test", cfg.seeds.eval_priors, 0)?;
    Ok(ablate_prepared(cfg, arms, &train, &val, &test, Some(out))?.into_iter().map(|r| r.0).collect())
}

/// The `ablate` command.
pub fn ablate(cfg: &RunConfig, arms: &[Arm], out: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| PlusError::io(out, e))?;
    match cfg.precision {
        Precision::F32 => ablate_typed::<f32>(cfg, arms, out),
        Precision::F64 => ablate_typed::<f64>(cfg, arms, out),
    }
}

/// Classes of the partition that count as lesions.
pub fn lesion_kinds(loss: &LossConfig) -> Vec<usize> {
    (0..loss.classes()).filter(|&c| loss.partition[c] != ClassKind::NonLesion).collect()
}
