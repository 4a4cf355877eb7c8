//! Lesion matching, detection and diagnosis scores, ROC-AUC and confusion
//! matrices, plus report serialization.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PlusError, Result};
use crate::volume::Mask;

pub const DEFAULT_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(candidate, gt)` pairs in acceptance order.
    pub pairs: Vec<(usize, usize)>,
    pub ious: Vec<f64>,
    pub unmatched_candidates: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

impl MatchResult {
    pub fn gt_for(&self, candidate: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == candidate).map(|p| p.1)
    }
}

/// Greedy one-to-one matching in descending IoU order (ties by candidate,
/// then GT index).
pub fn match_lesions(candidates: &[Mask], gts: &[Mask], threshold: f64) -> Result<MatchResult> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(PlusError::Contract(format!("iou threshold must lie in (0, 1], got {threshold}")));
    }
    let mut scored = Vec::new();
    for (ci, c) in candidates.iter().enumerate() {
        for (gi, g) in gts.iter().enumerate() {
            if c.dims() != g.dims() {
                return Err(plus_autodiff::Error::Shape {
                    op: "match_lesions",
                    lhs: c.dims().to_vec(),
                    rhs: g.dims().to_vec(),
                }
                .into());
            }
            let iou = c.iou(g);
            if iou >= threshold {
                scored.push((iou, ci, gi));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_c = vec![false; candidates.len()];
    let mut used_g = vec![false; gts.len()];
    let mut out = MatchResult::default();
    for (iou, ci, gi) in scored {
        if !used_c[ci] && !used_g[gi] {
            used_c[ci] = true;
            used_g[gi] = true;
            out.pairs.push((ci, gi));
            out.ious.push(iou);
        }
    }
    out.unmatched_candidates = (0..candidates.len()).filter(|&i| !used_c[i]).collect();
    out.unmatched_gt = (0..gts.len()).filter(|&i| !used_g[i]).collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Counts {
    pub fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn prf(&self) -> Prf {
        Prf::from_counts(self.tp, self.fp, self.fn_)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        Prf { precision, recall, f1: f1(precision, recall) }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// TP: matched with the correct class. FP: a detection (non-`non_lesion`
/// prediction) that is unmatched or misclassified. FN: a GT lesion without a
/// correct detection.
pub fn detection_counts(
    m: &MatchResult,
    predicted: &[usize],
    gt_classes: &[usize],
    non_lesion: usize,
) -> Result<Counts> {
    if m.pairs.iter().any(|&(c, g)| c >= predicted.len() || g >= gt_classes.len()) {
        return Err(PlusError::Contract("match indices exceed the class arrays".into()));
    }
    let mut counts = Counts::default();
    for (ci, &p) in predicted.iter().enumerate() {
        if p == non_lesion {
            continue;
        }
        match m.gt_for(ci) {
            Some(g) if gt_classes[g] == p => counts.tp += 1,
            _ => counts.fp += 1,
        }
    }
    counts.fn_ = gt_classes.len() - counts.tp;
    Ok(counts)
}

pub fn detection_prf(m: &MatchResult, predicted: &[usize], gt_classes: &[usize], non_lesion: usize) -> Result<Prf> {
    Ok(detection_counts(m, predicted, gt_classes, non_lesion)?.prf())
}

/// Per-class one-vs-rest detection counts (TP/FP/FN) for lesion classes `0..classes`.
pub fn per_class_detection(
    m: &MatchResult,
    predicted: &[usize],
    gt_classes: &[usize],
    non_lesion: usize,
    classes: usize,
) -> Result<Vec<Counts>> {
    detection_counts(m, predicted, gt_classes, non_lesion)?;
    let mut out = vec![Counts::default(); classes];
    for (ci, &p) in predicted.iter().enumerate() {
        if p == non_lesion || p >= classes {
            continue;
        }
        match m.gt_for(ci) {
            Some(g) if gt_classes[g] == p => out[p].tp += 1,
            _ => out[p].fp += 1,
        }
    }
    for (c, counts) in out.iter_mut().enumerate() {
        counts.fn_ = gt_classes.iter().filter(|&&g| g == c).count() - counts.tp;
    }
    Ok(out)
}

/// Mean F1 over classes (computed from pooled per-class counts).
pub fn macro_f1(per_class: &[Counts]) -> f64 {
    if per_class.is_empty() {
        return 0.0;
    }
    per_class.iter().map(|c| c.prf().f1).sum::<f64>() / per_class.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientScore {
    pub p_malig: f64,
    pub p_beni: f64,
    pub q: f64,
    pub malignant: bool,
    pub benign: bool,
    pub any_tumor: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub malignant: Prf,
    pub benign: Prf,
    pub screening: Prf,
    pub screening_accuracy: f64,
    pub malignant_counts: Counts,
    pub benign_counts: Counts,
    pub screening_counts: Counts,
}

fn binary_counts(pairs: impl Iterator<Item = (bool, bool)>) -> Counts {
    let mut c = Counts::default();
    for (pred, truth) in pairs {
        match (pred, truth) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

pub fn patient_diagnosis_metrics(scores: &[PatientScore], threshold: f64) -> Result<PatientMetrics> {
    if scores.is_empty() {
        return Err(PlusError::Contract("patient metrics over zero patients".into()));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(PlusError::Contract(format!("decision threshold must lie in (0, 1), got {threshold}")));
    }
    let malignant_counts = binary_counts(scores.iter().map(|s| (s.p_malig >= threshold, s.malignant)));
    let benign_counts = binary_counts(scores.iter().map(|s| (s.p_beni >= threshold, s.benign)));
    let screening_counts = binary_counts(scores.iter().map(|s| (s.q >= threshold, s.any_tumor)));
    Ok(PatientMetrics {
        malignant: malignant_counts.prf(),
        benign: benign_counts.prf(),
        screening: screening_counts.prf(),
        screening_accuracy: ratio(screening_counts.tp + screening_counts.tn, scores.len()),
        malignant_counts,
        benign_counts,
        screening_counts,
    })
}

/// Mann-Whitney AUC: fraction of (positive, negative) pairs ranked correctly,
/// ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PlusError::Contract("scores and labels differ in length".into()));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PlusError::Contract("AUC is undefined with a single class present".into()));
    }
    // rank-sum with midranks over tie groups
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

/// ROC curve points `(fpr, tpr)` from the highest threshold down.
pub fn roc_points(scores: &[f64], labels: &[bool]) -> Vec<(f64, f64, f64)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l).count().max(1) as f64;
    let neg = labels.iter().filter(|&&l| !l).count().max(1) as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut out = vec![(f64::INFINITY, 0.0, 0.0)];
    let mut i = 0;
    while i < idx.len() {
        let t = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == t {
            if labels[idx[i]] {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        out.push((t, fp / neg, tp / pos));
    }
    out
}

/// `m[g][p]` counts items with truth `g` predicted as `p`.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<usize>>> {
    if predicted.len() != truth.len() {
        return Err(PlusError::Contract("prediction and truth lists differ in length".into()));
    }
    let mut m = vec![vec![0usize; classes]; classes];
    for (&p, &g) in predicted.iter().zip(truth) {
        if p >= classes || g >= classes {
            return Err(PlusError::Contract(format!("class id out of range for {classes} classes")));
        }
        m[g][p] += 1;
    }
    Ok(m)
}

/// Patient category for the three-way confusion matrix: 0 healthy, 1 benign
/// only, 2 malignant.
pub fn patient_category(malignant: bool, any_tumor: bool) -> usize {
    if malignant {
        2
    } else if any_tumor {
        1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LesionMetrics {
    pub detection: Prf,
    pub counts: Counts,
    pub per_class: Vec<Counts>,
    pub macro_f1: f64,
    /// Refined-argmax accuracy over candidates matched to a GT lesion.
    pub matched_accuracy: f64,
    /// Prior-argmax accuracy over the same candidates.
    pub prior_matched_accuracy: f64,
    pub matched: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub class: usize,
    pub auc: Option<f64>,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub lesion: LesionMetrics,
    pub patient: PatientMetrics,
    pub per_class_auc: Vec<Option<f64>>,
    /// Candidate-level matrix; rows are truth (matched GT class or non-lesion).
    pub confusion: Vec<Vec<usize>>,
    /// Patient-level matrix over healthy / benign-only / malignant.
    pub patient_confusion: Vec<Vec<usize>>,
    pub roc: Vec<RocCurve>,
    pub patients: usize,
    pub skipped_patients: usize,
    pub config: serde_json::Value,
}

/// Column order of the flat CSV report.
pub const CSV_COLUMNS: [&str; 12] = [
    "split",
    "lesion_f1",
    "lesion_precision",
    "lesion_recall",
    "malignant_f1",
    "malignant_precision",
    "malignant_recall",
    "benign_f1",
    "benign_precision",
    "benign_recall",
    "screening_f1",
    "screening_accuracy",
];

pub fn csv_header() -> String {
    CSV_COLUMNS.join(",")
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let l = &self.lesion.detection;
        let p = &self.patient;
        let values = [
            l.f1,
            l.precision,
            l.recall,
            p.malignant.f1,
            p.malignant.precision,
            p.malignant.recall,
            p.benign.f1,
            p.benign.precision,
            p.benign.recall,
            p.screening.f1,
            p.screening_accuracy,
        ];
        let mut row = self.split.clone();
        for v in values {
            write!(row, ",{v:.6}").expect("string write");
        }
        row
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", csv_header(), self.csv_row())
    }

    pub fn roc_tsv(&self) -> String {
        let mut out = String::from("class\tthreshold\tfpr\ttpr\n");
        for curve in &self.roc {
            for &(t, fpr, tpr) in &curve.points {
                writeln!(out, "{}\t{t}\t{fpr:.6}\t{tpr:.6}", curve.class).expect("string write");
            }
        }
        out
    }

    /// Writes `report.json`, `report.csv` and `roc.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| PlusError::io(dir, e))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| PlusError::io(&path, e))
        };
        let json = serde_json::to_string_pretty(self).map_err(|e| PlusError::json(dir.join("report.json"), e))?;
        write("report.json", json)?;
        write("report.csv", self.to_csv())?;
        write("roc.tsv", self.roc_tsv())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_edge_cases() {
        assert_eq!(f1(0.0, 0.0), 0.0);
        assert_eq!(Prf::from_counts(0, 0, 0), Prf::default());
        let p = Prf::from_counts(1, 1, 1);
        assert_eq!((p.precision, p.recall, p.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn roc_points_span_unit_square() {
        let pts = roc_points(&[0.9, 0.8, 0.3], &[true, false, true]);
        assert_eq!(pts.first().map(|p| (p.1, p.2)), Some((0.0, 0.0)));
        assert_eq!(pts.last().map(|p| (p.1, p.2)), Some((1.0, 1.0)));
    }

    #[test]
    fn patient_categories() {
        assert_eq!(patient_category(false, false), 0);
        assert_eq!(patient_category(false, true), 1);
        assert_eq!(patient_category(true, true), 2);
    }
}
