use itcfn::config::RunConfig;
use itcfn::mmg::{
    adversarial_loss, discriminator_loss, hybrid_loss, quantize, Codebook, HybridLossWeights, Mmg, MmgConfig,
};
use itcfn::synthdata::{generate_subjects, CohortConfig, Volume};
use itcfn::tensor::{Binder, Graph, Tensor};
use itcfn::trainer::{derive_seed, train_mmg, write_mmg_curve, MMG_CURVE_COLUMNS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn small_mmg(seed: u64) -> Mmg {
    let cfg = MmgConfig {
        codebook_size: 8,
        code_dim: 4,
        ..Default::default()
    };
    Mmg::new(cfg, [8, 8, 8], seed).unwrap()
}

#[test]
fn quantize_exact_code_hit() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let codes = rand_tensor(&mut rng, &[5, 3]).cast::<f32>();
    let book = Codebook::new(codes.clone()).unwrap();
    let z = Tensor::new(vec![1, 3, 1, 1, 1], book.code(3).to_vec()).unwrap();
    let (zq, idx) = book.quantize(&z).unwrap();
    assert_eq!(idx, [3]);
    assert_eq!(zq.data(), book.code(3));

    let simple = Codebook::new(Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
    let (zq, idx) = simple.quantize(&Tensor::new(vec![1, 2, 1, 1, 1], vec![0.1, 0.1]).unwrap()).unwrap();
    assert_eq!((idx, zq.data().to_vec()), (vec![0], vec![0.0, 0.0]));
}

#[test]
fn quantized_output_is_a_codebook_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Graph::<f64>::new();
    let codes = rand_tensor(&mut rng, &[6, 2]);
    let q = quantize(&g, g.param(rand_tensor(&mut rng, &[2, 2, 3, 1, 1])), g.constant(codes.clone())).unwrap();
    let zq = g.value(q.z_q);
    let zst = g.value(q.z_st);
    for (k, &m) in q.indices.iter().enumerate() {
        let (i, s) = (k / 3, k % 3);
        for c in 0..2 {
            let at = (i * 2 + c) * 3 + s;
            assert_eq!(zq.data()[at], codes.data()[m * 2 + c]);
            assert!((zst.data()[at] - codes.data()[m * 2 + c]).abs() < 1e-12);
        }
    }
}

#[test]
fn straight_through_passes_gradient_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = Graph::<f64>::new();
    let z = g.param(rand_tensor(&mut rng, &[2, 3, 2, 1, 1]));
    let codes = g.param(rand_tensor(&mut rng, &[4, 3]));
    let q = quantize(&g, z, codes).unwrap();
    let target = g.constant(rand_tensor(&mut rng, &[2, 3, 2, 1, 1]));
    let loss = g.mean(g.square(g.sub(q.z_st, target).unwrap()));
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(z).unwrap(), grads.get(q.z_st).unwrap());
    // codes only learn through the quantization loss
    assert!(grads.get(codes).is_none_or(|c| c.iter().all(|&v| v == 0.0)));
}

#[test]
fn hybrid_examples() {
    let g = Graph::<f64>::new();
    let y = g.constant(Tensor::full([1, 1, 2, 2, 2], 0.25));
    let z = g.constant(Tensor::zeros([1, 2, 1, 1, 1]));
    let per = g.scalar(3.0);
    let disc = g.constant(Tensor::zeros([1, 1, 1, 1, 1]));
    let w = HybridLossWeights::new(1.0, 0.0, 0.0, 0.0).unwrap();
    let same = hybrid_loss(&g, y, y, z, z, per, disc, 0.25, &w).unwrap();
    assert_eq!(g.value(same.total).item(), 0.0);
    let shifted = g.add_scalar(y, 0.5);
    let off = hybrid_loss(&g, y, shifted, z, z, per, disc, 0.25, &w).unwrap();
    assert!((g.value(off.total).item() - 0.5).abs() < 1e-12);
    assert!(HybridLossWeights::new(1.0, -0.1, 0.0, 0.0).is_err());
}

#[test]
fn hybrid_components_nonnegative_and_finite() {
    let mmg = small_mmg(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Graph::<f32>::new();
    let x = g.constant(rand_tensor(&mut rng, &[2, 1, 8, 8, 8]).cast());
    let y = g.constant(rand_tensor(&mut rng, &[2, 1, 8, 8, 8]).cast());
    let (gen, disc, perc) = (
        Binder::frozen(&mmg.generator),
        Binder::frozen(&mmg.discriminator),
        Binder::frozen(&mmg.perceptual),
    );
    let (pass, loss) = mmg.generator_loss(&g, &gen, &disc, &perc, x, y).unwrap();
    for v in [loss.l1, loss.qua, loss.per, loss.adv, loss.total] {
        let v = g.value(v).item();
        assert!(v.is_finite() && v >= 0.0, "{v}");
    }
    let real = mmg.discriminate(&g, &disc, y).unwrap();
    let fake = mmg.discriminate(&g, &disc, pass.y_gen).unwrap();
    let d = g.value(discriminator_loss(&g, real, fake).unwrap()).item();
    let a = g.value(adversarial_loss(&g, fake)).item();
    assert!(d.is_finite() && a.is_finite());
}

#[test]
fn generate_pet_shape_finite_deterministic() {
    let mmg = Mmg::new(MmgConfig::default(), [16, 16, 16], 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mri = Volume::new([16, 16, 16], (0..4096).map(|_| rng.random::<f32>()).collect()).unwrap();
    let a = mmg.generate_pet(&mri).unwrap();
    let b = mmg.generate_pet(&mri).unwrap();
    assert_eq!(a.shape(), [16, 16, 16]);
    assert!(a.data().iter().all(|v| v.is_finite()));
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(mmg.generate_pet(&Volume::zeros([8, 8, 8])).is_err());
}

#[test]
fn checkpoint_file_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mmg = small_mmg(5);
    let path = dir.path().join("mmg.itck");
    mmg.save(&path, 5).unwrap();
    let (back, seed) = Mmg::load(&path).unwrap();
    assert_eq!(seed, 5);
    assert_eq!(back.config, mmg.config);
    for (a, b) in [
        (&mmg.generator, &back.generator),
        (&mmg.discriminator, &back.discriminator),
        (&mmg.perceptual, &back.perceptual),
    ] {
        assert_eq!(a.checksum(), b.checksum());
    }
    let again = dir.path().join("again.itck");
    back.save(&again, 5).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

fn tiny_run() -> (itcfn::synthdata::Cohort, RunConfig) {
    let mut cfg = RunConfig::default();
    cfg.cohort = CohortConfig {
        n_subjects: 24,
        volume_shape: [8, 8, 8],
        missing_pet_rate: 0.25,
        ..Default::default()
    };
    cfg.mmg.codebook_size = 8;
    cfg.mmg.code_dim = 8;
    cfg.train.epochs_stage1 = 6;
    (generate_subjects(&cfg.cohort).unwrap(), cfg)
}

#[test]
fn stage_one_trains_on_pet_complete_subjects_only() {
    let (cohort, cfg) = tiny_run();
    let idx: Vec<usize> = (0..cohort.len()).collect();
    let run = train_mmg(&cohort, &idx, &cfg, 1, true).unwrap();
    assert_eq!(run.curve.len(), 6);
    assert!(run.curve.last().unwrap().l1 < run.curve[0].l1);
    let seen: Vec<&String> = run.batches.iter().flatten().collect();
    for s in &cohort.subjects {
        let count = seen.iter().filter(|id| ***id == s.subject_id).count();
        assert_eq!(count, if s.has_pet() { 6 } else { 0 }, "{}", s.subject_id);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    write_mmg_curve(&path, 1, "abc", &run.curve).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "# seed=1 config_hash=abc");
    assert_eq!(lines[1], MMG_CURVE_COLUMNS.join(","));
    assert_eq!(lines.len(), 2 + 6);
}

#[test]
fn stage_one_is_deterministic() {
    let (cohort, cfg) = tiny_run();
    let idx: Vec<usize> = (0..12).collect();
    let seed = derive_seed(0, &[0]);
    let a = train_mmg(&cohort, &idx, &cfg, seed, false).unwrap();
    let b = train_mmg(&cohort, &idx, &cfg, seed, false).unwrap();
    assert_eq!(a.mmg.to_checkpoint(seed).to_bytes(), b.mmg.to_checkpoint(seed).to_bytes());
}

#[test]
fn stage_one_needs_paired_subjects() {
    let (cohort, cfg) = tiny_run();
    let unpaired: Vec<usize> = (0..cohort.len()).filter(|&i| !cohort.subjects[i].has_pet()).collect();
    assert!(train_mmg(&cohort, &unpaired, &cfg, 0, false).is_err());
}
