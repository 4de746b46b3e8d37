use std::fs;

use itcfn::metrics::auc;
use itcfn::synthdata::{
    box_blur3, generate_cohort, generate_subjects, load_cohort, read_volume, split_kfold, write_volume, CohortConfig,
    Standardizer, Volume, MANIFEST_COLUMNS,
};
use itcfn::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(n: usize, missing: f64, seed: u64) -> CohortConfig {
    CohortConfig {
        n_subjects: n,
        missing_pet_rate: missing,
        seed,
        ..Default::default()
    }
}

/// Plain gradient-descent logistic regression with a bias column.
fn logistic_probe(x: &[Vec<f64>], y: &[u8], iters: usize, lr: f64) -> Vec<f64> {
    let d = x[0].len();
    let mut w = vec![0.0; d + 1];
    for _ in 0..iters {
        let mut grad = vec![0.0; d + 1];
        for (row, &label) in x.iter().zip(y) {
            let z = w[d] + row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - label as f64;
            for j in 0..d {
                grad[j] += err * row[j];
            }
            grad[d] += err;
        }
        for (wj, gj) in w.iter_mut().zip(&grad) {
            *wj -= lr * gj / x.len() as f64;
        }
    }
    w
}

fn probe_scores(x: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let d = w.len() - 1;
    x.iter().map(|r| w[d] + r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()).collect()
}

fn standardize(rows: &mut [Vec<f64>]) {
    let n = rows.len() as f64;
    for j in 0..rows[0].len() {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        let s = (rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for r in rows.iter_mut() {
            r[j] = (r[j] - m) / s;
        }
    }
}

#[test]
fn latent_probe_separates_perfectly() {
    let cohort = generate_subjects(&cfg(200, 0.3, 0)).unwrap();
    let x: Vec<Vec<f64>> = cohort.subjects.iter().map(|s| vec![s.latent_s as f64]).collect();
    let w = logistic_probe(&x, &cohort.labels(), 500, 1.0);
    assert_eq!(auc(&probe_scores(&x, &w), &cohort.labels()).unwrap(), 1.0);
}

#[test]
fn clinical_probe_beats_floor_on_held_out_half() {
    let cohort = generate_subjects(&cfg(200, 0.3, 0)).unwrap();
    let mut x: Vec<Vec<f64>> = cohort
        .subjects
        .iter()
        .map(|s| s.clinical.features().iter().map(|&v| v as f64).collect())
        .collect();
    standardize(&mut x);
    let y = cohort.labels();
    let (train_x, test_x) = x.split_at(100);
    let (train_y, test_y) = y.split_at(100);
    let w = logistic_probe(train_x, train_y, 2000, 0.5);
    let a = auc(&probe_scores(test_x, &w), test_y).unwrap();
    assert!(a > 0.8, "clinical probe AUC {a}");
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn smoothed_mri_correlates_with_pet() {
    let cohort = generate_subjects(&cfg(40, 0.0, 1)).unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for s in &cohort.subjects {
        let smooth = box_blur3(s.mri.data(), s.mri.shape());
        a.extend(smooth.iter().map(|&v| v as f64));
        b.extend(s.pet.as_ref().unwrap().data().iter().map(|&v| v as f64));
    }
    let r = pearson(&a, &b);
    assert!(r > 0.5, "correlation {r}");
}

#[test]
fn manifest_rows_and_missing_counts() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate_cohort(&cfg(8, 0.0, 3), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("manifest.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), MANIFEST_COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("1")));
    assert_eq!(s.n_subjects, 8);

    let dir = tempfile::tempdir().unwrap();
    generate_cohort(&cfg(10, 0.5, 3), dir.path()).unwrap();
    let cohort = load_cohort(dir.path()).unwrap();
    assert_eq!(cohort.subjects.iter().filter(|s| !s.has_pet()).count(), 5);
    let pet_files = fs::read_dir(dir.path().join("volumes"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("_pet"))
        .count();
    assert_eq!(pet_files, 5);
}

#[test]
fn generation_is_byte_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = cfg(6, 0.5, 9);
    generate_cohort(&c, a.path()).unwrap();
    generate_cohort(&c, b.path()).unwrap();
    let mut names: Vec<_> = fs::read_dir(a.path().join("volumes"))
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert_eq!(fs::read(a.path().join("manifest.csv")).unwrap(), fs::read(b.path().join("manifest.csv")).unwrap());
    for n in names {
        let p = std::path::Path::new("volumes").join(&n);
        assert_eq!(fs::read(a.path().join(&p)).unwrap(), fs::read(b.path().join(&p)).unwrap(), "{n:?}");
    }
}

#[test]
fn load_roundtrips_generated_cohort() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg(6, 0.5, 2);
    generate_cohort(&c, dir.path()).unwrap();
    assert_eq!(load_cohort(dir.path()).unwrap(), generate_subjects(&c).unwrap());
}

#[test]
fn volume_roundtrip_and_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v = Volume::new([16, 16, 16], (0..4096).map(|_| rng.random::<f32>() - 0.5).collect()).unwrap();
    let path = dir.path().join("a.vol");
    write_volume(&v, &path).unwrap();
    let back = read_volume(&path).unwrap();
    assert_eq!(back.shape(), v.shape());
    assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let mut bytes = fs::read(&path).unwrap();
    bytes[0] = b'X';
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(read_volume(&path), Err(Error::Format { .. })));

    let mut short = b"VOL1".to_vec();
    for _ in 0..3 {
        short.extend(4u32.to_le_bytes());
    }
    short.extend(vec![0u8; 63 * 4]);
    fs::write(&path, &short).unwrap();
    assert!(matches!(
        read_volume(&path),
        Err(Error::Length {
            expected: 256,
            found: 252,
            ..
        })
    ));
}

#[test]
fn kfold_examples() {
    let labels: Vec<u8> = (0..10).map(|i| u8::from(i < 4)).collect();
    let folds = split_kfold(&labels, 5, 1).unwrap();
    assert!(folds.iter().all(|f| f.len() == 2));
    assert_eq!(folds, split_kfold(&labels, 5, 1).unwrap());

    let labels: Vec<u8> = (0..11).map(|i| u8::from(i % 3 == 0)).collect();
    let mut sizes: Vec<usize> = split_kfold(&labels, 5, 1).unwrap().iter().map(Vec::len).collect();
    sizes.sort_unstable();
    assert_eq!(sizes, [2, 2, 2, 2, 3]);
    let mut all: Vec<usize> = split_kfold(&labels, 5, 1).unwrap().concat();
    all.sort_unstable();
    assert_eq!(all, (0..11).collect::<Vec<_>>());
    assert!(split_kfold(&labels, 12, 1).is_err());
}

#[test]
fn kfold_is_stratified() {
    let cohort = generate_subjects(&CohortConfig {
        volume_shape: [8, 8, 8],
        ..Default::default()
    })
    .unwrap();
    let labels = cohort.labels();
    for f in split_kfold(&labels, 5, 0).unwrap() {
        let pos = f.iter().filter(|&&i| labels[i] == 1).count();
        assert_eq!(f.len(), 40);
        assert_eq!(pos, 16);
    }
}

#[test]
fn standardized_training_columns() {
    let cohort = generate_subjects(&cfg(120, 0.3, 5)).unwrap();
    let train: Vec<_> = cohort.subjects.iter().take(90).map(|s| &s.clinical).collect();
    let st = Standardizer::fit(train.iter().copied()).unwrap();
    let rows: Vec<_> = train.iter().map(|r| st.apply(r)).collect();
    for j in 0..7 {
        let col: Vec<f64> = rows.iter().map(|r| r[j] as f64).collect();
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-5, "column {j} mean {m}");
        assert!((v - 1.0).abs() < 1e-3, "column {j} variance {v}");
    }
}
