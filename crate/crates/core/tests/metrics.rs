use plus_core::metrics::{
    confusion_matrix, detection_prf, match_lesions, patient_diagnosis_metrics, roc_auc, MatchResult, PatientScore, Prf,
};
use plus_core::volume::Mask;
use plus_core::PlusError;
use proptest::prelude::*;

fn line(dims: [usize; 3], xs: &[usize]) -> Mask {
    Mask::from_fn(dims, |x, y, z| y == 0 && z == 0 && xs.contains(&x))
}

fn score(p_malig: f64, q: f64, malignant: bool, any_tumor: bool) -> PatientScore {
    PatientScore { p_malig, p_beni: 0.0, q, malignant, benign: false, any_tumor }
}

#[test]
fn matching_examples() {
    let dims = [6, 2, 2];
    let a = line(dims, &[0, 1]);
    let m = match_lesions(&[a.clone()], &[a.clone()], 0.3).unwrap();
    assert_eq!((m.pairs, m.ious), (vec![(0, 0)], vec![1.0]));

    let m = match_lesions(&[line(dims, &[4])], &[a.clone()], 0.3).unwrap();
    assert!(m.pairs.is_empty());
    assert_eq!((m.unmatched_candidates, m.unmatched_gt), (vec![0], vec![0]));

    // one shared voxel out of three in the union
    let m = match_lesions(&[line(dims, &[1, 2])], &[a.clone()], 0.3).unwrap();
    assert_eq!(m.pairs, vec![(0, 0)]);
    assert!((m.ious[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!(match_lesions(&[line(dims, &[1, 2])], &[a.clone()], 0.34).unwrap().pairs.is_empty());

    let other = Mask::full([2, 2, 2]);
    assert!(matches!(match_lesions(&[other], &[a.clone()], 0.3), Err(PlusError::Tensor(_))));
    assert!(match_lesions(&[a.clone()], &[a], 0.0).is_err());
}

#[test]
fn greedy_matching_prefers_the_larger_overlap() {
    let dims = [8, 1, 1];
    let gt = line(dims, &[0, 1, 2, 3]);
    let weak = line(dims, &[0, 1]);
    let strong = line(dims, &[0, 1, 2]);
    let m = match_lesions(&[weak, strong], &[gt], 0.3).unwrap();
    assert_eq!(m.pairs, vec![(1, 0)]);
    assert_eq!(m.unmatched_candidates, vec![0]);
}

fn matched(pairs: Vec<(usize, usize)>, candidates: usize, gts: usize) -> MatchResult {
    MatchResult {
        ious: vec![1.0; pairs.len()],
        unmatched_candidates: (0..candidates).filter(|c| !pairs.iter().any(|p| p.0 == *c)).collect(),
        unmatched_gt: (0..gts).filter(|g| !pairs.iter().any(|p| p.1 == *g)).collect(),
        pairs,
    }
}

#[test]
fn detection_examples() {
    let nl = 4;
    let m = matched(vec![(0, 0), (1, 1)], 2, 2);
    let perfect = detection_prf(&m, &[0, 2], &[0, 2], nl).unwrap();
    assert_eq!(perfect, Prf { precision: 1.0, recall: 1.0, f1: 1.0 });

    // candidate 0 correct, candidate 1 unmatched, GT 1 missed
    let m = matched(vec![(0, 0)], 2, 2);
    let half = detection_prf(&m, &[1, 3], &[1, 2], nl).unwrap();
    assert_eq!(half, Prf { precision: 0.5, recall: 0.5, f1: 0.5 });

    let m = matched(vec![(0, 0), (1, 1)], 2, 2);
    let none = detection_prf(&m, &[nl, nl], &[0, 2], nl).unwrap();
    assert_eq!((none.recall, none.f1), (0.0, 0.0));
}

#[test]
fn patient_examples() {
    let perfect = [score(0.9, 0.9, true, true), score(0.1, 0.2, false, false)];
    let r = patient_diagnosis_metrics(&perfect, 0.5).unwrap();
    assert_eq!((r.malignant.f1, r.screening.f1, r.screening_accuracy), (1.0, 1.0, 1.0));

    let r = patient_diagnosis_metrics(&[score(0.4, 0.9, true, true)], 0.5).unwrap();
    assert_eq!(r.malignant.recall, 0.0);

    // screening: TP, TP, FP, TN
    let four = [score(0.0, 0.9, false, true), score(0.0, 0.6, false, true), score(0.0, 0.5, false, false), score(0.0, 0.1, false, false)];
    let r = patient_diagnosis_metrics(&four, 0.5).unwrap();
    assert_eq!((r.screening_counts.tp, r.screening_counts.fp, r.screening_counts.fn_, r.screening_counts.tn), (2, 1, 0, 1));
    assert!((r.screening.f1 - 0.8).abs() < 1e-15);
    assert_eq!(r.screening_accuracy, 0.75);

    assert!(matches!(patient_diagnosis_metrics(&[], 0.5), Err(PlusError::Contract(_))));
    assert!(patient_diagnosis_metrics(&four, 1.0).is_err());
}

#[test]
fn auc_examples() {
    assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
    assert_eq!(roc_auc(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap(), 0.5);
    assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
}

#[test]
fn confusion_examples() {
    assert_eq!(confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap(), vec![vec![1, 1], vec![0, 1]]);
    assert_eq!(confusion_matrix(&[], &[], 3).unwrap(), vec![vec![0; 3]; 3]);
    assert_eq!(confusion_matrix(&[2, 0, 1], &[2, 0, 1], 3).unwrap(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
    assert!(matches!(confusion_matrix(&[3], &[0], 3), Err(PlusError::Contract(_))));
}

fn masks(dims: [usize; 3], boxes: &[(usize, usize)]) -> Vec<Mask> {
    boxes.iter().map(|&(x, w)| Mask::from_fn(dims, |a, _, _| a >= x && a < x + w)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_accounts_for_every_mask(
        cands in prop::collection::vec((0usize..12, 1usize..5), 0..6),
        gts in prop::collection::vec((0usize..12, 1usize..5), 0..6),
        threshold in 0.1f64..1.0,
    ) {
        let dims = [16, 2, 1];
        let c = masks(dims, &cands);
        let g = masks(dims, &gts);
        let m = match_lesions(&c, &g, threshold).unwrap();
        prop_assert_eq!(m.pairs.len() + m.unmatched_candidates.len(), c.len());
        prop_assert_eq!(m.pairs.len() + m.unmatched_gt.len(), g.len());
        for (&(ci, gi), &iou) in m.pairs.iter().zip(&m.ious) {
            prop_assert!(iou >= threshold);
            prop_assert_eq!(c[ci].iou(&g[gi]), iou);
            prop_assert_eq!(m.pairs.iter().filter(|p| p.0 == ci || p.1 == gi).count(), 1);
        }
    }

    #[test]
    fn flipping_labels_complements_the_auc(data in prop::collection::vec((0u8..6, any::<bool>()), 2..20)) {
        let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 5.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn metrics_ignore_input_order(data in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0, any::<bool>(), any::<bool>()), 1..15), rot in 0usize..15) {
        let scores: Vec<PatientScore> = data.iter().map(|d| score(d.0, d.1, d.2, d.2 || d.3)).collect();
        let mut rotated = scores.clone();
        let n = rotated.len();
        rotated.rotate_left(rot % n);
        prop_assert_eq!(patient_diagnosis_metrics(&scores, 0.5).unwrap(), patient_diagnosis_metrics(&rotated, 0.5).unwrap());
        let pred: Vec<usize> = data.iter().map(|d| (d.0 * 3.0) as usize).collect();
        let truth: Vec<usize> = data.iter().map(|d| (d.1 * 3.0) as usize).collect();
        let cm = confusion_matrix(&pred, &truth, 3).unwrap();
        for (g, row) in cm.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), truth.iter().filter(|&&t| t == g).count());
        }
        let (mut p2, mut t2) = (pred.clone(), truth.clone());
        p2.rotate_left(rot % n);
        t2.rotate_left(rot % n);
        prop_assert_eq!(cm, confusion_matrix(&p2, &t2, 3).unwrap());
    }
}
