//! Adam, the two training stages and the k-fold cross-validation driver.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::losses::{focal_loss, inverse_frequency_weights, sdm_loss, total_loss, triple_loss};
use crate::metrics::{auc, confusion_metrics, threshold};
use crate::mmg::{discriminator_loss, stack_volumes, HybridComponents, Mmg};
use crate::synthdata::{split_kfold, Cohort, Standardizer, Volume};
use crate::tcaf::{Fusion, FusionInputs, FusionModel};
use crate::tensor::{Binder, Graph, ParamId, Params, Tensor, Var};

/// Bias-corrected Adam with per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Params) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// First and second moments of one parameter.
    pub fn moments(&self, id: ParamId) -> (&[f64], &[f64]) {
        (&self.m[id.index()], &self.v[id.index()])
    }

    /// One update. Every gradient is checked before any parameter moves.
    pub fn update(&mut self, params: &mut Params, grads: &[(ParamId, Tensor<f32>)], lr: f64) -> Result<()> {
        for (id, g) in grads {
            let p = params.get(*id);
            if g.shape() != p.value.shape() {
                return Err(Error::Shape(format!(
                    "gradient for `{}` has shape {:?}, parameter is {:?}",
                    p.name,
                    g.shape(),
                    p.value.shape()
                )));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    index,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = params.get_mut(*id);
            if !p.trainable {
                continue;
            }
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gi = gi as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let step = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                *w = (*w as f64 - step) as f32;
            }
        }
        Ok(())
    }
}

/// SplitMix64-style mixing of a base seed with stream tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut x = base ^ 0x9e37_79b9_7f4a_7c15;
    for &t in tags {
        x = x.wrapping_add(t.wrapping_mul(0xbf58_476d_1ce4_e5b9)).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

fn batches(idx: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order = idx.to_vec();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn ids(cohort: &Cohort, idx: &[usize]) -> Vec<String> {
    idx.iter().map(|&i| cohort.subjects[i].subject_id.clone()).collect()
}

/// Table-3 ablation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    None,
    MmgOnly,
    TcafOnly,
    MmgTcaf,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::None, Ablation::MmgOnly, Ablation::TcafOnly, Ablation::MmgTcaf];

    pub fn from_flags(use_mmg: bool, use_tcaf: bool) -> Self {
        match (use_mmg, use_tcaf) {
            (false, false) => Ablation::None,
            (true, false) => Ablation::MmgOnly,
            (false, true) => Ablation::TcafOnly,
            (true, true) => Ablation::MmgTcaf,
        }
    }

    pub fn use_mmg(self) -> bool {
        matches!(self, Ablation::MmgOnly | Ablation::MmgTcaf)
    }

    pub fn use_tcaf(self) -> bool {
        matches!(self, Ablation::TcafOnly | Ablation::MmgTcaf)
    }

    pub fn fusion(self) -> Fusion {
        if self.use_tcaf() {
            Fusion::CoAttention
        } else {
            Fusion::Concat
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::MmgOnly => "mmg_only",
            Ablation::TcafOnly => "tcaf_only",
            Ablation::MmgTcaf => "mmg_tcaf",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// stage 1
// ---------------------------------------------------------------------------

pub struct MmgTraining {
    pub mmg: Mmg,
    /// One row per epoch.
    pub curve: Vec<HybridComponents>,
    /// Mean discriminator loss per epoch.
    pub disc_curve: Vec<f64>,
    /// Subject ids per batch, when recording.
    pub batches: Vec<Vec<String>>,
}

/// Channels-last latent rows for a batch, used to re-seed dead codes.
fn latent_rows(z: &Tensor<f32>) -> Vec<f32> {
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let p: usize = z.shape()[2..].iter().product();
    let mut out = Vec::with_capacity(z.numel());
    for i in 0..n {
        for s in 0..p {
            for ch in 0..c {
                out.push(z.data()[(i * c + ch) * p + s]);
            }
        }
    }
    out
}

/// Trains the generator on the PET-complete subjects among `train_idx`.
pub fn train_mmg(cohort: &Cohort, train_idx: &[usize], cfg: &RunConfig, seed: u64, record: bool) -> Result<MmgTraining> {
    let paired: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| cohort.subjects[i].has_pet())
        .collect();
    if paired.len() < 2 {
        return Err(Error::Data(format!(
            "stage 1 needs at least 2 PET-complete subjects, found {}",
            paired.len()
        )));
    }
    let tc = &cfg.train;
    let mut mmg = Mmg::new(cfg.mmg.clone(), cohort.shape, derive_seed(seed, &[1]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[2]));
    let mri_of = |idx: &[usize]| stack_volumes(&idx.iter().map(|&i| &cohort.subjects[i].mri).collect::<Vec<_>>());
    let pet_of = |idx: &[usize]| {
        stack_volumes(
            &idx.iter()
                .map(|&i| cohort.subjects[i].pet.as_ref().expect("paired subject"))
                .collect::<Vec<_>>(),
        )
    };

    // initialise every code from encoder outputs on the training pairs
    let mut pool = Vec::new();
    for chunk in paired.chunks(32) {
        let g = Graph::<f32>::new();
        let p = Binder::frozen(&mmg.generator);
        let z = mmg.encode(&g, &p, g.constant(mri_of(chunk)?))?;
        pool.extend(latent_rows(&g.value(z)));
    }
    mmg.reseed_dead_codes(&pool, &mut rng);

    let mut adam_g = Adam::new(&mmg.generator);
    let mut adam_d = Adam::new(&mmg.discriminator);
    let mut curve = Vec::with_capacity(tc.epochs_stage1);
    let mut disc_curve = Vec::with_capacity(tc.epochs_stage1);
    let mut recorded = Vec::new();
    for epoch in 0..tc.epochs_stage1 {
        let mut sums = HybridComponents::default();
        let mut disc_sum = 0.0;
        let mut pool = Vec::new();
        for batch in batches(&paired, tc.batch_size, &mut rng) {
            if record {
                recorded.push(ids(cohort, &batch));
            }
            let x = mri_of(&batch)?;
            let y = pet_of(&batch)?;
            let w = batch.len() as f64;

            let g = Graph::<f32>::new();
            let gen = Binder::trainable(&mmg.generator);
            let disc = Binder::frozen(&mmg.discriminator);
            let perc = Binder::frozen(&mmg.perceptual);
            let (xv, yv) = (g.constant(x), g.constant(y.clone()));
            let (pass, loss) = mmg.generator_loss(&g, &gen, &disc, &perc, xv, yv)?;
            let grads = g.backward(loss.total)?;
            let grads = gen.grads(&grads);
            adam_g.update(&mut mmg.generator, &grads, tc.lr)?;
            let item = |v| g.value(v).item() as f64 * w;
            sums.l1 += item(loss.l1);
            sums.qua += item(loss.qua);
            sums.per += item(loss.per);
            sums.adv += item(loss.adv);
            sums.total += item(loss.total);
            mmg.record_usage(&pass.quantized.indices);
            pool.extend(latent_rows(&g.value(pass.z_hat)));
            let fake = (*g.value(pass.y_gen)).clone();

            let g = Graph::<f32>::new();
            let disc = Binder::trainable(&mmg.discriminator);
            let real = mmg.discriminate(&g, &disc, g.constant(y))?;
            let fake = mmg.discriminate(&g, &disc, g.constant(fake))?;
            let d_loss = discriminator_loss(&g, real, fake)?;
            let grads = g.backward(d_loss)?;
            let grads = disc.grads(&grads);
            disc_sum += g.value(d_loss).item() as f64 * w;
            adam_d.update(&mut mmg.discriminator, &grads, tc.lr)?;
        }
        let n = paired.len() as f64;
        curve.push(HybridComponents {
            l1: sums.l1 / n,
            qua: sums.qua / n,
            per: sums.per / n,
            adv: sums.adv / n,
            total: sums.total / n,
        });
        disc_curve.push(disc_sum / n);
        if epoch + 1 < tc.epochs_stage1 {
            mmg.reseed_dead_codes(&pool, &mut rng);
        }
    }
    Ok(MmgTraining {
        mmg,
        curve,
        disc_curve,
        batches: recorded,
    })
}

/// One PET volume per cohort subject plus whether it carries signal (a real
/// scan or a synthesis) rather than zero fill.
pub struct PetVolumes {
    pub volumes: Vec<Volume>,
    pub present: Vec<bool>,
}

/// The real scan when present, otherwise the generator's synthesis or zeros.
pub fn fill_pet(cohort: &Cohort, mmg: Option<&Mmg>) -> Result<PetVolumes> {
    let mut out: Vec<Option<Volume>> = cohort.subjects.iter().map(|s| s.pet.clone()).collect();
    let missing: Vec<usize> = (0..out.len()).filter(|&i| out[i].is_none()).collect();
    match mmg {
        Some(mmg) => {
            for chunk in missing.chunks(32) {
                let mri: Vec<&Volume> = chunk.iter().map(|&i| &cohort.subjects[i].mri).collect();
                for (&i, v) in chunk.iter().zip(mmg.generate_batch(&mri)?) {
                    out[i] = Some(v);
                }
            }
        }
        None => {
            for &i in &missing {
                out[i] = Some(Volume::zeros(cohort.shape));
            }
        }
    }
    Ok(PetVolumes {
        present: cohort.subjects.iter().map(|s| s.has_pet() || mmg.is_some()).collect(),
        volumes: out.into_iter().map(|v| v.expect("filled")).collect(),
    })
}

// ---------------------------------------------------------------------------
// stage 2
// ---------------------------------------------------------------------------

/// Per-epoch stage-2 losses (sample-weighted means over batches).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionEpoch {
    pub total: f64,
    pub focal: f64,
    pub sdm_mt: f64,
    pub sdm_pt: f64,
    pub sdm_mp: f64,
    pub triple: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FusionOptions {
    /// Record subject ids per batch.
    pub record: bool,
    /// Leave the alignment losses out of the graph entirely.
    pub skip_alignment: bool,
}

pub struct FusionTraining {
    pub model: FusionModel,
    pub curve: Vec<FusionEpoch>,
    pub batches: Vec<Vec<String>>,
    pub standardizer_ids: Vec<String>,
}

pub fn fusion_inputs(model: &FusionModel, cohort: &Cohort, pets: &PetVolumes, idx: &[usize]) -> Result<FusionInputs> {
    let mri: Vec<&Volume> = idx.iter().map(|&i| &cohort.subjects[i].mri).collect();
    let pet: Vec<&Volume> = idx.iter().map(|&i| &pets.volumes[i]).collect();
    Ok(FusionInputs {
        mri: stack_volumes(&mri)?,
        pet: stack_volumes(&pet)?,
        clinical: model.clinical_tensor(idx.iter().map(|&i| &cohort.subjects[i].clinical))?,
    })
}

/// Trains encoders, attention, fusion and classifier on `train_idx`.
/// `pets` holds one (possibly imputed) PET volume per cohort subject.
pub fn train_fusion(
    cohort: &Cohort,
    pets: &PetVolumes,
    train_idx: &[usize],
    cfg: &RunConfig,
    fusion: Fusion,
    seed: u64,
    opts: FusionOptions,
) -> Result<FusionTraining> {
    if train_idx.is_empty() {
        return Err(Error::Data("stage 2 needs at least one training subject".into()));
    }
    if pets.volumes.len() != cohort.len() || pets.present.len() != cohort.len() {
        return Err(Error::InvalidArgument(format!(
            "{} PET volumes supplied for {} subjects",
            pets.volumes.len(),
            cohort.len()
        )));
    }
    let tc = &cfg.train;
    let lc = &cfg.loss;
    let mut model = FusionModel::new(cfg.model, fusion, cohort.shape, derive_seed(seed, &[3]))?;
    model.standardizer = Some(Standardizer::fit(train_idx.iter().map(|&i| &cohort.subjects[i].clinical))?);
    let train_labels: Vec<u8> = train_idx.iter().map(|&i| cohort.subjects[i].label.as_u8()).collect();
    let alpha = lc.alpha_focal.unwrap_or_else(|| inverse_frequency_weights(&train_labels));
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
    let mut adam = Adam::new(&model.params);
    let mut curve = Vec::with_capacity(tc.epochs_stage2);
    let mut recorded = Vec::new();
    for _ in 0..tc.epochs_stage2 {
        let mut sums = FusionEpoch::default();
        for batch in batches(train_idx, tc.batch_size, &mut rng) {
            if opts.record {
                recorded.push(ids(cohort, &batch));
            }
            let inputs = fusion_inputs(&model, cohort, pets, &batch)?;
            let labels: Vec<u8> = batch.iter().map(|&i| cohort.subjects[i].label.as_u8()).collect();
            let g = Graph::<f32>::new();
            let p = Binder::trainable(&model.params);
            let out = model.forward(&g, &p, &inputs)?;
            let focal = focal_loss(&g, out.probs, &labels, lc.gamma, alpha)?;
            let w = batch.len() as f64;
            let item = |v| g.value(v).item() as f64 * w;
            let total = if opts.skip_alignment || batch.len() < 2 {
                focal
            } else {
                let [mri, pet, clin] = out.flat;
                let mt = sdm_loss(&g, mri, clin, &labels, lc.tau, lc.epsilon)?;
                // zero-filled PET carries no signal to align
                let rows: Vec<usize> = (0..batch.len()).filter(|&r| pets.present[batch[r]]).collect();
                let (pt, mp) = if rows.len() >= 2 {
                    let sub = |v| select_rows(&g, v, &rows, batch.len());
                    let sub_labels: Vec<u8> = rows.iter().map(|&r| labels[r]).collect();
                    let (mri_p, pet_p, clin_p) = (sub(mri)?, sub(pet)?, sub(clin)?);
                    (
                        sdm_loss(&g, pet_p, clin_p, &sub_labels, lc.tau, lc.epsilon)?,
                        sdm_loss(&g, mri_p, pet_p, &sub_labels, lc.tau, lc.epsilon)?,
                    )
                } else {
                    (g.scalar(0.0), g.scalar(0.0))
                };
                let triple = triple_loss(&g, mt, pt, mp, lc.lambda)?;
                sums.sdm_mt += item(mt);
                sums.sdm_pt += item(pt);
                sums.sdm_mp += item(mp);
                sums.triple += item(triple);
                total_loss(&g, focal, triple, lc.alpha_total)?
            };
            sums.focal += item(focal);
            sums.total += item(total);
            let grads = g.backward(total)?;
            let grads = p.grads(&grads);
            drop(p);
            adam.update(&mut model.params, &grads, tc.lr)?;
        }
        let n = train_idx.len() as f64;
        curve.push(FusionEpoch {
            total: sums.total / n,
            focal: sums.focal / n,
            sdm_mt: sums.sdm_mt / n,
            sdm_pt: sums.sdm_pt / n,
            sdm_mp: sums.sdm_mp / n,
            triple: sums.triple / n,
        });
    }
    Ok(FusionTraining {
        model,
        curve,
        batches: recorded,
        standardizer_ids: ids(cohort, train_idx),
    })
}

/// Rows `rows` of an `[n, d]` variable, via a constant selection matrix.
fn select_rows(g: &Graph<f32>, v: Var, rows: &[usize], n: usize) -> Result<Var> {
    if rows.len() == n {
        return Ok(v);
    }
    let mut sel = vec![0.0f32; rows.len() * n];
    for (k, &r) in rows.iter().enumerate() {
        sel[k * n + r] = 1.0;
    }
    g.matmul(g.constant(Tensor::new(vec![rows.len(), n], sel)?), v)
}

/// pMCI probabilities for `idx`, evaluated in chunks.
pub fn predict(model: &FusionModel, cohort: &Cohort, pets: &PetVolumes, idx: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(idx.len());
    for chunk in idx.chunks(32) {
        out.extend(model.predict(&fusion_inputs(model, cohort, pets, chunk)?)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// evaluation and cross-validation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: f64,
    pub f1: f64,
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FoldMetrics {
    pub fn evaluate(fold: usize, n_train: usize, probs: &[f64], labels: &[u8]) -> Result<Self> {
        let cm = confusion_metrics(&threshold(probs), labels)?;
        Ok(Self {
            fold,
            n_train,
            n_test: labels.len(),
            acc: cm.acc,
            sen: cm.sen,
            spe: cm.spe,
            auc: auc(probs, labels)?,
            f1: cm.f1,
            tp: cm.tp,
            tn: cm.tn,
            fp: cm.fp,
            fn_: cm.fn_,
            warnings: cm.warnings,
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: Ablation,
    pub seed: u64,
    pub config_hash: String,
    pub k_folds: usize,
    pub folds: Vec<FoldMetrics>,
    pub mean: MetricSummary,
    /// Sample standard deviation across folds.
    pub std: MetricSummary,
}

impl MetricsReport {
    pub fn aggregate(mode: Ablation, seed: u64, config_hash: String, mut folds: Vec<FoldMetrics>) -> Result<Self> {
        if folds.is_empty() {
            return Err(Error::InvalidArgument("no fold results to aggregate".into()));
        }
        folds.sort_by_key(|f| f.fold);
        let get: [fn(&FoldMetrics) -> f64; 5] = [|f| f.acc, |f| f.sen, |f| f.spe, |f| f.auc, |f| f.f1];
        let n = folds.len() as f64;
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for (k, f) in get.iter().enumerate() {
            mean[k] = folds.iter().map(f).sum::<f64>() / n;
            if folds.len() > 1 {
                let ss: f64 = folds.iter().map(|x| (f(x) - mean[k]).powi(2)).sum();
                std[k] = (ss / (n - 1.0)).sqrt();
            }
        }
        let summary = |v: [f64; 5]| MetricSummary {
            acc: v[0],
            sen: v[1],
            spe: v[2],
            auc: v[3],
            f1: v[4],
        };
        Ok(Self {
            mode,
            seed,
            config_hash,
            k_folds: folds.len(),
            folds,
            mean: summary(mean),
            std: summary(std),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Which subjects touched which part of training in one fold.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub test_ids: Vec<String>,
    pub standardizer_ids: Vec<String>,
    pub mmg_batches: Vec<Vec<String>>,
    pub fusion_batches: Vec<Vec<String>>,
    /// Subjects whose PET was synthesised.
    pub imputed_ids: Vec<String>,
}

pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: Vec<(Ablation, FoldMetrics)>,
    /// Generator checksum before and after all stage-2 runs.
    pub mmg_checksums: Option<(String, String)>,
    pub audit: Option<FoldAudit>,
    pub mmg_curve: Vec<HybridComponents>,
    pub fusion_curves: Vec<(Ablation, Vec<FusionEpoch>)>,
    /// The fold's trained generator, when any mode used one.
    pub mmg: Option<Mmg>,
}

/// Train/test indices of fold `fold` under the configured split.
pub fn fold_split(cohort: &Cohort, cfg: &RunConfig, fold: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let folds = split_kfold(&cohort.labels(), cfg.train.k_folds, cfg.train.seed)?;
    let test = folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} out of range for k = {}", folds.len())))?
        .clone();
    let mut train: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != fold)
        .flat_map(|(_, f)| f.iter().copied())
        .collect();
    train.sort_unstable();
    Ok((train, test))
}

/// Runs both stages for one fold and every requested mode. The generator is
/// trained once and shared by the modes that use it.
pub fn run_fold(cohort: &Cohort, cfg: &RunConfig, fold: usize, modes: &[Ablation], record: bool) -> Result<FoldOutcome> {
    let (train, test) = fold_split(cohort, cfg, fold)?;
    let seed = derive_seed(cfg.train.seed, &[fold as u64]);
    let mut audit = record.then(|| FoldAudit {
        fold,
        test_ids: ids(cohort, &test),
        ..Default::default()
    });
    let stage1 = if modes.iter().any(|m| m.use_mmg()) {
        Some(train_mmg(cohort, &train, cfg, seed, record)?)
    } else {
        None
    };
    let before = stage1.as_ref().map(|s| s.mmg.checksum());
    let pets_mmg = stage1.as_ref().map(|s| fill_pet(cohort, Some(&s.mmg))).transpose()?;
    let pets_zero = if modes.iter().any(|m| !m.use_mmg()) {
        Some(fill_pet(cohort, None)?)
    } else {
        None
    };
    if let (Some(a), Some(s)) = (audit.as_mut(), stage1.as_ref()) {
        a.mmg_batches = s.batches.clone();
        a.imputed_ids = cohort
            .subjects
            .iter()
            .filter(|s| !s.has_pet())
            .map(|s| s.subject_id.clone())
            .collect();
    }
    let labels: Vec<u8> = test.iter().map(|&i| cohort.subjects[i].label.as_u8()).collect();
    let mut metrics = Vec::with_capacity(modes.len());
    let mut fusion_curves = Vec::with_capacity(modes.len());
    for &mode in modes {
        let pets = if mode.use_mmg() { pets_mmg.as_ref() } else { pets_zero.as_ref() }.expect("prepared");
        let opts = FusionOptions {
            record,
            skip_alignment: false,
        };
        let run = train_fusion(cohort, pets, &train, cfg, mode.fusion(), seed, opts)?;
        let probs = predict(&run.model, cohort, pets, &test)?;
        metrics.push((mode, FoldMetrics::evaluate(fold, train.len(), &probs, &labels)?));
        fusion_curves.push((mode, run.curve));
        if let Some(a) = audit.as_mut() {
            a.standardizer_ids = run.standardizer_ids;
            a.fusion_batches.extend(run.batches);
        }
    }
    let after = stage1.as_ref().map(|s| s.mmg.checksum());
    Ok(FoldOutcome {
        fold,
        metrics,
        mmg_checksums: before.zip(after),
        audit,
        mmg_curve: stage1.as_ref().map(|s| s.curve.clone()).unwrap_or_default(),
        fusion_curves,
        mmg: stage1.map(|s| s.mmg),
    })
}

pub struct CvOutcome {
    pub reports: Vec<MetricsReport>,
    pub folds: Vec<FoldOutcome>,
}

/// k-fold cross-validation for each mode, one report per mode.
pub fn run_cv(cohort: &Cohort, cfg: &RunConfig, modes: &[Ablation], record: bool) -> Result<CvOutcome> {
    let k = cfg.train.k_folds;
    if k > cohort.len() {
        return Err(Error::Config(format!("k_folds = {k} exceeds {} subjects", cohort.len())));
    }
    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        folds.push(run_fold(cohort, cfg, fold, modes, record)?);
    }
    let hash = cfg.hash();
    let reports = modes
        .iter()
        .map(|&mode| {
            let per_fold = folds
                .iter()
                .map(|f| f.metrics.iter().find(|(m, _)| *m == mode).expect("mode ran").1.clone())
                .collect();
            MetricsReport::aggregate(mode, cfg.train.seed, hash.clone(), per_fold)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvOutcome { reports, folds })
}

// ---------------------------------------------------------------------------
// loss curves
// ---------------------------------------------------------------------------

pub const MMG_CURVE_COLUMNS: [&str; 6] = ["epoch", "l1", "qua", "per", "adv", "total"];
pub const FUSION_CURVE_COLUMNS: [&str; 7] = ["epoch", "total", "focal", "sdm_mt", "sdm_pt", "sdm_mp", "triple"];

fn write_curve(path: &Path, seed: u64, hash: &str, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut buf = format!("# seed={seed} config_hash={hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for (epoch, row) in rows.iter().enumerate() {
            let mut rec = vec![(epoch + 1).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn write_mmg_curve(path: impl AsRef<Path>, seed: u64, hash: &str, curve: &[HybridComponents]) -> Result<()> {
    let rows: Vec<Vec<f64>> = curve.iter().map(|c| vec![c.l1, c.qua, c.per, c.adv, c.total]).collect();
    write_curve(path.as_ref(), seed, hash, &MMG_CURVE_COLUMNS, &rows)
}

pub fn write_fusion_curve(path: impl AsRef<Path>, seed: u64, hash: &str, curve: &[FusionEpoch]) -> Result<()> {
    let rows: Vec<Vec<f64>> = curve
        .iter()
        .map(|c| vec![c.total, c.focal, c.sdm_mt, c.sdm_pt, c.sdm_mp, c.triple])
        .collect();
    write_curve(path.as_ref(), seed, hash, &FUSION_CURVE_COLUMNS, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(v: f32) -> (Params, ParamId) {
        let mut p = Params::new();
        let id = p.add("w", Tensor::new(vec![1], vec![v]).unwrap());
        (p, id)
    }

    #[test]
    fn adam_first_step_magnitude() {
        let (mut p, id) = scalar_params(1.0);
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &[(id, Tensor::new(vec![1], vec![1.0]).unwrap())], 0.1).unwrap();
        let moved = 1.0 - p.get(id).value.data()[0] as f64;
        assert!((moved - 0.1).abs() < 1e-6, "{moved}");
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let (mut p, id) = scalar_params(0.7);
        let mut adam = Adam::new(&p);
        for _ in 0..3 {
            adam.update(&mut p, &[(id, Tensor::zeros([1]))], 0.1).unwrap();
        }
        assert_eq!(p.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn adam_rejects_nan_naming_parameter() {
        let (mut p, id) = scalar_params(0.7);
        let mut adam = Adam::new(&p);
        let err = adam
            .update(&mut p, &[(id, Tensor::new(vec![1], vec![f32::NAN]).unwrap())], 0.1)
            .unwrap_err();
        assert!(err.to_string().contains('w'), "{err}");
        assert_eq!(p.get(id).value.data()[0], 0.7);
    }

    #[test]
    fn ablation_names_roundtrip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
            assert_eq!(Ablation::from_flags(a.use_mmg(), a.use_tcaf()), a);
        }
        assert!("both".parse::<Ablation>().is_err());
    }

    #[test]
    fn aggregate_means() {
        let fold = |i, acc| FoldMetrics {
            fold: i,
            n_train: 4,
            n_test: 2,
            acc,
            sen: 0.0,
            spe: 0.0,
            auc: 0.5,
            f1: 0.0,
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
            warnings: vec![],
        };
        let r = MetricsReport::aggregate(Ablation::None, 0, "h".into(), vec![fold(1, 1.0), fold(0, 0.5)]).unwrap();
        assert_eq!(r.mean.acc, 0.75);
        assert_eq!(r.folds[0].fold, 0);
        assert!((r.std.acc - (0.125f64).sqrt()).abs() < 1e-12);
    }
}
