use std::collections::HashSet;

use itcfn::config::RunConfig;
use itcfn::synthdata::{generate_subjects, Cohort, CohortConfig};
use itcfn::tcaf::Fusion;
use itcfn::tensor::{Params, Tensor};
use itcfn::trainer::{
    fill_pet, fold_split, run_cv, run_fold, train_fusion, train_mmg, write_fusion_curve, Ablation, Adam,
    FusionOptions, MetricsReport, FUSION_CURVE_COLUMNS,
};
use itcfn::Error;

fn tiny() -> (Cohort, RunConfig) {
    let mut cfg = RunConfig::default();
    cfg.cohort = CohortConfig {
        n_subjects: 30,
        volume_shape: [8, 8, 8],
        missing_pet_rate: 0.3,
        seed: 4,
        ..Default::default()
    };
    cfg.mmg.codebook_size = 8;
    cfg.mmg.code_dim = 8;
    cfg.train.epochs_stage1 = 2;
    cfg.train.epochs_stage2 = 3;
    cfg.train.k_folds = 3;
    (generate_subjects(&cfg.cohort).unwrap(), cfg)
}

#[test]
fn adam_runs_are_bitwise_reproducible() {
    let run = || {
        let mut p = Params::new();
        let id = p.add("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let mut adam = Adam::new(&p);
        for step in 0..10 {
            let g = Tensor::new(vec![3], vec![0.3 * step as f32, -0.1, 1.0 / (step + 1) as f32]).unwrap();
            adam.update(&mut p, &[(id, g)], 0.01).unwrap();
        }
        p.get(id).value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn adam_names_the_bad_parameter() {
    let mut p = Params::new();
    p.add("ok", Tensor::new(vec![1], vec![0.0]).unwrap());
    let bad = p.add("enc.conv0.w", Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let mut adam = Adam::new(&p);
    let err = adam
        .update(&mut p, &[(bad, Tensor::new(vec![2], vec![1.0, f32::NAN]).unwrap())], 0.1)
        .unwrap_err();
    match err {
        Error::NonFiniteGradient { name, index } => assert_eq!((name.as_str(), index), ("enc.conv0.w", 1)),
        other => panic!("{other}"),
    }
}

#[test]
fn fold_sizes_on_default_cohort() {
    let cfg = RunConfig::default();
    let cohort = generate_subjects(&CohortConfig {
        volume_shape: [8, 8, 8],
        ..cfg.cohort.clone()
    })
    .unwrap();
    for fold in 0..5 {
        let (train, test) = fold_split(&cohort, &cfg, fold).unwrap();
        assert_eq!((train.len(), test.len()), (160, 40));
    }
}

#[test]
fn imputation_only_fills_missing_pet() {
    let (cohort, cfg) = tiny();
    let idx: Vec<usize> = (0..cohort.len()).collect();
    let mmg = train_mmg(&cohort, &idx, &cfg, 0, false).unwrap().mmg;
    let filled = fill_pet(&cohort, Some(&mmg)).unwrap();
    let zero = fill_pet(&cohort, None).unwrap();
    for (i, s) in cohort.subjects.iter().enumerate() {
        assert!(filled.present[i]);
        assert_eq!(zero.present[i], s.has_pet());
        match &s.pet {
            Some(pet) => {
                assert_eq!(&filled.volumes[i], pet);
                assert_eq!(&zero.volumes[i], pet);
            }
            None => {
                assert_eq!(filled.volumes[i], mmg.generate_pet(&s.mri).unwrap());
                assert!(zero.volumes[i].data().iter().all(|&v| v == 0.0));
            }
        }
    }
}

#[test]
fn zero_alpha_matches_skipping_alignment() {
    let (cohort, mut cfg) = tiny();
    cfg.loss.alpha_total = 0.0;
    let pets = fill_pet(&cohort, None).unwrap();
    let (train, _) = fold_split(&cohort, &cfg, 0).unwrap();
    let with = train_fusion(&cohort, &pets, &train, &cfg, Fusion::CoAttention, 9, FusionOptions::default()).unwrap();
    let skip = FusionOptions {
        skip_alignment: true,
        ..Default::default()
    };
    let without = train_fusion(&cohort, &pets, &train, &cfg, Fusion::CoAttention, 9, skip).unwrap();
    assert_eq!(with.model.to_checkpoint(9).to_bytes(), without.model.to_checkpoint(9).to_bytes());
    assert!(with.curve.iter().all(|e| e.sdm_mt > 0.0 && e.triple > 0.0));
    assert!(without.curve.iter().all(|e| e.triple == 0.0));
}

#[test]
fn fusion_curve_has_all_components() {
    let (cohort, cfg) = tiny();
    let pets = fill_pet(&cohort, None).unwrap();
    let (train, _) = fold_split(&cohort, &cfg, 1).unwrap();
    let run = train_fusion(&cohort, &pets, &train, &cfg, Fusion::Concat, 2, FusionOptions::default()).unwrap();
    assert_eq!(run.curve.len(), 3);
    for e in &run.curve {
        let t = cfg.loss.lambda * (e.sdm_mt + e.sdm_pt) / 2.0 + (1.0 - cfg.loss.lambda) * e.sdm_mp;
        assert!((e.triple - t).abs() < 1e-4 * t.max(1.0));
        assert!((e.total - (e.focal + cfg.loss.alpha_total * e.triple)).abs() < 1e-4);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fusion.csv");
    write_fusion_curve(&path, 2, &cfg.hash(), &run.curve).unwrap();
    let text = std::fs::read_to_string(path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], format!("# seed=2 config_hash={}", cfg.hash()));
    assert_eq!(lines[1], FUSION_CURVE_COLUMNS.join(","));
    assert_eq!(lines.len(), 5);
}

#[test]
fn no_test_subject_reaches_training() {
    let (_, mut cfg) = tiny();
    cfg.cohort.label_correlated_missing = true;
    let cohort = generate_subjects(&cfg.cohort).unwrap();
    let out = run_fold(&cohort, &cfg, 1, &Ablation::ALL, true).unwrap();
    let audit = out.audit.unwrap();
    let test: HashSet<&String> = audit.test_ids.iter().collect();
    assert_eq!(test.len(), 10);
    assert!(audit.standardizer_ids.iter().all(|id| !test.contains(id)));
    assert_eq!(audit.standardizer_ids.len(), 20);
    for batch in audit.mmg_batches.iter().chain(&audit.fusion_batches) {
        assert!(batch.iter().all(|id| !test.contains(id)), "{batch:?}");
    }
    let with_pet: HashSet<&str> = cohort
        .subjects
        .iter()
        .filter(|s| s.has_pet())
        .map(|s| s.subject_id.as_str())
        .collect();
    assert!(audit.mmg_batches.iter().flatten().all(|id| with_pet.contains(id.as_str())));
    assert!(audit.imputed_ids.iter().all(|id| !with_pet.contains(id.as_str())));
    let (before, after) = out.mmg_checksums.unwrap();
    assert_eq!(before, after);
}

#[test]
fn cross_validation_is_reproducible_and_aggregates() {
    let (cohort, cfg) = tiny();
    let modes = [Ablation::TcafOnly, Ablation::MmgTcaf];
    let a = run_cv(&cohort, &cfg, &modes, false).unwrap();
    let b = run_cv(&cohort, &cfg, &modes, false).unwrap();
    assert_eq!(a.reports.len(), 2);
    for (x, y) in a.reports.iter().zip(&b.reports) {
        assert_eq!(x.to_json(), y.to_json());
        assert_eq!(x.folds.len(), 3);
        assert_eq!(x.config_hash, cfg.hash());
        let mean_acc = x.folds.iter().map(|f| f.acc).sum::<f64>() / 3.0;
        assert!((x.mean.acc - mean_acc).abs() < 1e-9);
        for f in &x.folds {
            assert_eq!(f.acc, (f.tp + f.tn) as f64 / (f.tp + f.tn + f.fp + f.fn_) as f64);
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    a.reports[0].write(&path).unwrap();
    assert_eq!(MetricsReport::read(&path).unwrap().to_json(), a.reports[0].to_json());
}
