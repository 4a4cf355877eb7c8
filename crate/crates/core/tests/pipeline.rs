mod common;

use plus_autodiff::Tensor;
use plus_core::checkpoint::{Checkpoint, MAGIC};
use plus_core::config::{Precision, RunConfig};
use plus_core::dataset::generate_dataset;
use plus_core::losses::LossConfig;
use plus_core::model::Model;
use plus_core::nn::ParamSet;
use plus_core::optim::AdamState;
use plus_core::phantom::{Candidate, Corruption, PriorSet};
use plus_core::pipeline::{
    evaluate, evaluate_prepared, forward_case, infer_case, parse_arms, prepare_case, priors_for, saliency, saliency_map, train,
    train_prepared, Arm, EvalMode,
};
use plus_core::volume::Mask;
use plus_core::PlusError;

use common::*;

fn tiny_f64() -> RunConfig {
    tiny_run(Precision::F64)
}

#[test]
fn one_epoch_on_disk_writes_checkpoints_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_dataset(&data, 6, 3, &small_spec()).unwrap();
    let mut cfg = tiny_run(Precision::F32);
    cfg.data_dir = Some(data.display().to_string());
    let out = dir.path().join("run");
    let summary = train(&cfg, &out).unwrap();
    assert_eq!(summary.epochs.len(), 1);
    let e = &summary.epochs[0];
    assert!([e.lesion, e.patient, e.screening, e.total].iter().all(|v| v.is_finite()));
    for f in ["last.ckpt", "best.ckpt", "train_log.tsv", "config.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(out.join("train_log.tsv")).unwrap();
    assert!(log.lines().count() >= 2);

    let ckpt = Checkpoint::load(&summary.best_checkpoint).unwrap();
    assert_eq!(ckpt.config, cfg);
    let report_dir = dir.path().join("report");
    let report = evaluate(&ckpt, None, "test", &report_dir).unwrap();
    assert_eq!(report.split, "test");
    for f in ["report.json", "report.csv", "roc.tsv"] {
        assert!(report_dir.join(f).exists(), "{f} missing");
    }

    // saliency off the same checkpoint, for the first test case with candidates
    let case = std::fs::read_dir(&data)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .find(|n| n.starts_with("case_"))
        .unwrap();
    let sal = dir.path().join("sal.raw");
    match saliency(&ckpt, None, &case, 0, &sal) {
        Ok(meta) => {
            assert_eq!(meta.case, case);
            assert!(sal.exists());
            let bytes = std::fs::read(&sal).unwrap().len();
            assert_eq!(bytes, 4 * meta.shape.iter().product::<usize>());
        }
        Err(PlusError::Contract(msg)) => assert!(msg.contains("no candidates")),
        Err(e) => panic!("{e}"),
    }
    assert!(matches!(saliency(&ckpt, None, &case, 99, &sal), Err(PlusError::Contract(_))));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_run(Precision::F32);
    cfg.data_dir = Some(dir.path().join("nowhere").display().to_string());
    let e = train(&cfg, &dir.path().join("out")).unwrap_err();
    assert_eq!(e.exit_code(), 3, "{e}");
}

#[test]
fn logged_total_is_the_weighted_sum_every_step() {
    for (alpha, beta) in [(0.5, 0.3), (1.0, 0.0)] {
        let mut cfg = tiny_f64();
        cfg.loss = LossConfig { alpha, beta, ..cfg.loss };
        cfg.optimizer.epochs = 2;
        let model = Model::new(&cfg.model, cfg.classes()).unwrap();
        let data = prepared_splits::<f64>(&model, &cfg, &small_spec(), 8, 21);
        let out = train_prepared(&model, &cfg, &data.train, &data.val, None).unwrap();
        assert!(!out.steps.is_empty());
        for s in &out.steps {
            let want = alpha * s.lesion + beta * s.patient + (1.0 - alpha - beta) * s.screening;
            assert!((s.total - s.aux - want).abs() <= 1e-6, "{s:?}");
            if alpha == 1.0 {
                assert!((s.total - s.lesion).abs() <= 1e-6);
            }
        }
        for e in &out.epochs {
            if alpha == 1.0 {
                assert!((e.total - e.lesion).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn oracle_probabilities_score_perfectly() {
    let mut cfg = tiny_f64();
    cfg.corruption = Corruption { fp_rate: 1.0, ..Corruption::none() };
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let params: ParamSet<f64> = model.init(1).unwrap();
    let data = prepared_splits::<f64>(&model, &cfg, &small_spec(), 16, 22);
    let cases: Vec<_> = data.train.into_iter().chain(data.test).collect();
    let r = evaluate_prepared(&model, &params, &cfg, &cases, "all", EvalMode::Oracle).unwrap();
    assert!(r.lesion.matched > 0);
    assert_eq!(r.lesion.detection.f1, 1.0);
    assert_eq!(r.lesion.matched_accuracy, 1.0);
    assert_eq!(r.patient.malignant.f1, 1.0);
    assert_eq!(r.patient.screening_accuracy, 1.0);
    for (g, row) in r.patient_confusion.iter().enumerate() {
        assert!(row.iter().enumerate().all(|(p, &n)| p == g || n == 0));
    }
}

fn one_case() -> plus_core::phantom::PatientCase {
    cases(&small_spec(), 12, 23).into_iter().map(|c| c.1).find(|c| !c.lesions.is_empty()).unwrap()
}

#[test]
fn single_candidate_gives_one_normalized_row() {
    let cfg = tiny_f64();
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let params: ParamSet<f64> = model.init(2).unwrap();
    let case = one_case();
    let priors = PriorSet {
        candidates: vec![Candidate { mask: case.lesions[0].mask.clone(), logits: vec![0.5, 0.1, -0.2, 0.0, 0.3], matched: Some(0) }],
    };
    let a = forward_case(&model, &params, &cfg, &case, &priors).unwrap().unwrap();
    assert_eq!(a.probs.len(), 1);
    assert_eq!(a.probs[0].len(), cfg.classes());
    assert!((a.probs[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let b = forward_case(&model, &params, &cfg, &case, &priors).unwrap().unwrap();
    assert_eq!(a, b);
    assert!((a.q - a.p_malig.max(a.p_beni)).abs() < 1e-15);
}

#[test]
fn cases_without_candidates_are_skipped() {
    let cfg = tiny_f64();
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let params: ParamSet<f64> = model.init(3).unwrap();
    let case = one_case();
    assert!(forward_case(&model, &params, &cfg, &case, &PriorSet::default()).unwrap().is_none());
    let prepared = prepare_case::<f64>(&model, &cfg, &case, &PriorSet::default()).unwrap();
    assert!(infer_case(&model, &params, &cfg.loss, &prepared).unwrap().is_none());
}

#[test]
fn malformed_candidates_are_data_errors_naming_the_case() {
    let cfg = tiny_f64();
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let case = one_case();
    let bad_mask = PriorSet { candidates: vec![Candidate { mask: Mask::full([8, 8, 8]), logits: vec![0.0; 5], matched: None }] };
    let bad_logits = PriorSet {
        candidates: vec![Candidate { mask: case.lesions[0].mask.clone(), logits: vec![f64::NAN; 5], matched: None }],
    };
    for priors in [bad_mask, bad_logits] {
        match prepare_case::<f64>(&model, &cfg, &case, &priors) {
            Err(PlusError::Data(msg)) => assert!(msg.contains(&case.id), "{msg}"),
            other => panic!("expected a data error, got {other:?}"),
        }
    }
}

#[test]
fn saliency_is_nonnegative_and_lives_on_the_candidates() {
    let mut cfg = tiny_f64();
    cfg.optimizer.epochs = 2;
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let data = prepared_splits::<f64>(&model, &cfg, &small_spec(), 8, 24);
    let trained = train_prepared(&model, &cfg, &data.train, &data.val, None).unwrap();
    let case = one_case();
    let priors = priors_for(&case, &cfg, cfg.seeds.eval_priors).unwrap();
    assert!(!priors.is_empty());
    let target = case.lesions[0].class;
    let map = saliency_map(&model, &trained.params, &cfg, &case, &priors, target).unwrap();
    assert_eq!(map.dims(), case.volume.dims());
    assert!(map.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    let inside: f64 = priors.candidates[0].mask.voxels().iter().map(|&[x, y, z]| map.get(x, y, z) as f64).sum();
    assert!(inside > 0.0);
    assert!(matches!(saliency_map(&model, &trained.params, &cfg, &case, &priors, 5), Err(PlusError::Contract(_))));
    assert!(matches!(saliency_map(&model, &trained.params, &cfg, &case, &PriorSet::default(), 0), Err(PlusError::Contract(_))));
}

fn small_checkpoint() -> Checkpoint {
    let cfg = tiny_run(Precision::F32);
    let model = Model::new(&cfg.model, cfg.classes()).unwrap();
    let params: ParamSet<f32> = model.init(4).unwrap();
    Checkpoint::new(&cfg, 3, &params, &AdamState::new(&params))
}

#[test]
fn checkpoint_round_trip_and_rejections() {
    let ckpt = small_checkpoint();
    let bytes = ckpt.to_bytes();
    assert_eq!(&bytes[..8], MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
    assert_eq!(back.epoch, 3);
    assert_eq!(back.params.names(), ckpt.params.names());
    assert_eq!(back.params.tensors(), ckpt.params.tensors());

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(PlusError::Checkpoint(m)) if m.contains("magic")));
    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(PlusError::Checkpoint(m)) if m.contains("version")));
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(PlusError::Checkpoint(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(Checkpoint::from_bytes(&long), Err(PlusError::Checkpoint(_))));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    assert!(Checkpoint::load(&dir.path().join("missing.ckpt")).is_err());
}

#[test]
fn mismatched_parameters_are_refused() {
    let mut ckpt = small_checkpoint();
    let name = ckpt.params.names()[0].clone();
    ckpt.params.set(&name, Tensor::zeros(&[1])).unwrap_or_else(|_| {
        // `set` refuses shape changes; rebuild the set without the first tensor instead
        let mut p = ParamSet::new(0);
        for (n, t) in ckpt.params.iter().skip(1) {
            p.insert(n, t.clone()).unwrap();
        }
        ckpt.params = p;
    });
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(evaluate(&ckpt, Some(dir.path()), "test", dir.path()), Err(PlusError::Checkpoint(_))));
}

#[test]
fn arm_lists_parse() {
    let arms = parse_arms("lesion-only, none,gpr").unwrap();
    assert_eq!(arms.len(), 3);
    assert_eq!(arms[0], Arm::LesionOnly);
    assert_eq!(arms.iter().map(Arm::name).collect::<Vec<_>>(), ["lesion-only", "none", "gpr"]);
    assert!(matches!(parse_arms("gpr,frobnicate"), Err(PlusError::Config(_))));
}
