//! Seeded synthetic cohorts with planted cross-modal and label structure.
//!
//! A latent disease score `s ~ N(0, 1)` drives every modality:
//!
//! - MRI = template + s·atrophy pattern + noise
//! - PET = tanh(box3(MRI)) + s·hypometabolism pattern + noise
//! - the seven clinical columns are noisy linear functions of `s`
//! - label = 1 (pMCI) for the `round(n·pmci_fraction)` largest scores
//!
//! On disk a cohort is a `manifest.csv` plus one `.vol` file per stored
//! volume.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"VOL1";

pub const MANIFEST_COLUMNS: [&str; 13] = [
    "subject_id",
    "label",
    "has_pet",
    "mri_path",
    "pet_path",
    "age",
    "sex",
    "education",
    "apoe4",
    "ptau",
    "ttau",
    "fdg_summary",
    "latent_s_debug",
];

pub const CLINICAL_FEATURES: usize = 7;

/// Rank-3 grid of `f32`, row-major with W fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Volume {
    pub fn new(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 || n != data.len() {
            return Err(Error::Shape(format!(
                "volume {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(VOLUME_MAGIC);
        for d in self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: 16,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != VOLUME_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad magic {:?}, expected VOL1", String::from_utf8_lossy(&bytes[..4])),
            });
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let shape = [dim(0), dim(1), dim(2)];
        let expected = 4 * shape.iter().product::<usize>();
        let payload = &bytes[16..];
        if payload.len() != expected {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected,
                found: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Volume::new(shape, data).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// `[1, 1, D, H, W]` tensor view for single-subject inference.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let [d, h, w] = self.shape;
        Tensor::new(vec![1, 1, d, h, w], self.data.clone()).expect("volume shape is consistent")
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        let dims = &s[s.len().saturating_sub(3)..];
        if dims.len() != 3 || s[..s.len() - 3].iter().any(|&d| d != 1) {
            return Err(Error::Shape(format!("tensor {s:?} is not a single volume")));
        }
        Volume::new([dims[0], dims[1], dims[2]], t.data().to_vec())
    }
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, v.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Volume::from_bytes(&bytes, path)
}

/// The seven clinical attributes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClinicalRecord {
    pub age: f32,
    pub sex: u8,
    pub education: f32,
    pub apoe4: u8,
    pub ptau: f32,
    pub ttau: f32,
    pub fdg_summary: f32,
}

impl ClinicalRecord {
    pub fn features(&self) -> [f32; CLINICAL_FEATURES] {
        [
            self.age,
            self.sex as f32,
            self.education,
            self.apoe4 as f32,
            self.ptau,
            self.ttau,
            self.fdg_summary,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Label {
    Smci = 0,
    Pmci = 1,
}

impl Label {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Label::Smci),
            1 => Ok(Label::Pmci),
            _ => Err(Error::Data(format!("label must be 0 or 1, got {v}"))),
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub mri: Volume,
    pub pet: Option<Volume>,
    pub clinical: ClinicalRecord,
    pub label: Label,
    /// Planted latent score; kept for probes and diagnostics only.
    pub latent_s: f32,
}

impl SubjectRecord {
    pub fn has_pet(&self) -> bool {
        self.pet.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortConfig {
    pub n_subjects: usize,
    pub volume_shape: [usize; 3],
    pub missing_pet_rate: f64,
    pub pmci_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Assign missing PET to pMCI subjects first (stress test for leakage).
    pub label_correlated_missing: bool,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_subjects: 200,
            volume_shape: [16, 16, 16],
            missing_pet_rate: 0.3,
            pmci_fraction: 0.4,
            noise_sigma: 0.3,
            seed: 0,
            label_correlated_missing: false,
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(Error::Config(format!(
                "n_subjects must be at least 2, got {}",
                self.n_subjects
            )));
        }
        if self.volume_shape.iter().any(|&d| d < 8) {
            return Err(Error::Config(format!(
                "volume_shape dimensions must be ≥ 8, got {:?}",
                self.volume_shape
            )));
        }
        if !(0.0..=1.0).contains(&self.missing_pet_rate) {
            return Err(Error::Config(format!(
                "missing_pet_rate must lie in [0, 1], got {}",
                self.missing_pet_rate
            )));
        }
        if !(self.pmci_fraction > 0.0 && self.pmci_fraction < 1.0) {
            return Err(Error::Config(format!(
                "pmci_fraction must lie in (0, 1), got {}",
                self.pmci_fraction
            )));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be finite and non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// In-memory cohort.
#[derive(Clone, Debug, PartialEq)]
pub struct Cohort {
    pub shape: [usize; 3],
    pub subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.subject_id.clone()).collect()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.subjects.iter().map(|s| s.label.as_u8()).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_subjects: usize,
    pub n_smci: usize,
    pub n_pmci: usize,
    pub n_with_pet: usize,
    pub n_missing_pet: usize,
}

impl CohortSummary {
    pub fn of(cohort: &Cohort) -> Self {
        let n_pmci = cohort.subjects.iter().filter(|s| s.label == Label::Pmci).count();
        let n_with_pet = cohort.subjects.iter().filter(|s| s.has_pet()).count();
        Self {
            n_subjects: cohort.len(),
            n_smci: cohort.len() - n_pmci,
            n_pmci,
            n_with_pet,
            n_missing_pet: cohort.len() - n_with_pet,
        }
    }
}

/// Fixed spatial patterns shared by every subject of a given grid shape.
pub struct Patterns {
    pub template: Vec<f32>,
    pub atrophy: Vec<f32>,
    pub hypometabolism: Vec<f32>,
}

const ATROPHY_AMPLITUDE: f32 = 0.6;
const HYPOMETABOLISM_AMPLITUDE: f32 = 0.6;

fn gaussian(u: [f32; 3], centre: [f32; 3], sigma: f32) -> f32 {
    let r2: f32 = (0..3).map(|a| (u[a] - centre[a]).powi(2)).sum();
    (-r2 / (2.0 * sigma * sigma)).exp()
}

impl Patterns {
    pub fn new(shape: [usize; 3]) -> Self {
        let [d, h, w] = shape;
        let n = d * h * w;
        let mut template = Vec::with_capacity(n);
        let mut atrophy = Vec::with_capacity(n);
        let mut hypometabolism = Vec::with_capacity(n);
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let u = [
                        (z as f32 + 0.5) / d as f32 - 0.5,
                        (y as f32 + 0.5) / h as f32 - 0.5,
                        (x as f32 + 0.5) / w as f32 - 0.5,
                    ];
                    let r = ((u[0] / 0.42).powi(2) + (u[1] / 0.45).powi(2) + (u[2] / 0.40).powi(2)).sqrt();
                    let mask = 1.0 / (1.0 + (-12.0 * (1.0 - r)).exp());
                    let texture = 1.0 + 0.2 * (6.0 * std::f32::consts::PI * u[0]).sin() * (4.0 * std::f32::consts::PI * u[1]).cos();
                    template.push(mask * texture);
                    atrophy.push(-(gaussian(u, [0.2, -0.1, 0.0], 0.12) + gaussian(u, [-0.2, -0.1, 0.0], 0.12)));
                    hypometabolism.push(-(gaussian(u, [0.0, 0.2, 0.15], 0.15) + 0.7 * gaussian(u, [0.0, -0.25, -0.1], 0.1)));
                }
            }
        }
        Self {
            template,
            atrophy,
            hypometabolism,
        }
    }
}

/// Separable 3×3×3 box blur with edge clamping.
pub fn box_blur3(data: &[f32], shape: [usize; 3]) -> Vec<f32> {
    let [d, h, w] = shape;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let mut out = vec![0.0; data.len()];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for dz in -1i32..=1 {
                    for dy in -1i32..=1 {
                        for dx in -1i32..=1 {
                            let zz = (z as i32 + dz).clamp(0, d as i32 - 1) as usize;
                            let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                            let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                            acc += data[idx(zz, yy, xx)];
                        }
                    }
                }
                out[idx(z, y, x)] = acc / 27.0;
            }
        }
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f32 {
    StandardNormal.sample(rng)
}

/// Clinical attributes as noisy linear functions of the latent score.
fn clinical_from_latent(s: f32, rng: &mut ChaCha8Rng) -> ClinicalRecord {
    let age = 73.0 + 2.0 * s + 6.0 * normal(rng);
    let sex = u8::from(0.3 * s + normal(rng) > 0.0);
    let education = 15.5 - 0.6 * s + 2.8 * normal(rng);
    let apoe_raw = 0.8 * s + normal(rng);
    let apoe4 = if apoe_raw > 1.2 {
        2
    } else if apoe_raw > 0.2 {
        1
    } else {
        0
    };
    let ptau = 25.0 + 8.0 * s + 7.0 * normal(rng);
    let ttau = 300.0 + 60.0 * s + 55.0 * normal(rng);
    let fdg_summary = 1.2 - 0.08 * s + 0.08 * normal(rng);
    ClinicalRecord {
        age,
        sex,
        education,
        apoe4,
        ptau,
        ttau,
        fdg_summary,
    }
}

/// Generates a cohort in memory. Deterministic in `config`.
pub fn generate_subjects(config: &CohortConfig) -> Result<Cohort> {
    config.validate()?;
    let n = config.n_subjects;
    let shape = config.volume_shape;
    let vox: usize = shape.iter().product();
    let sigma = config.noise_sigma as f32;
    let patterns = Patterns::new(shape);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let latent: Vec<f32> = (0..n).map(|_| normal(&mut rng)).collect();
    let n_pos = ((n as f64) * config.pmci_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latent[b].total_cmp(&latent[a]).then(a.cmp(&b)));
    let mut labels = vec![Label::Smci; n];
    for &i in order.iter().take(n_pos) {
        labels[i] = Label::Pmci;
    }

    let mut subjects = Vec::with_capacity(n);
    for (i, &s) in latent.iter().enumerate() {
        let mri: Vec<f32> = (0..vox)
            .map(|v| patterns.template[v] + ATROPHY_AMPLITUDE * s * patterns.atrophy[v] + sigma * normal(&mut rng))
            .collect();
        let smooth = box_blur3(&mri, shape);
        let pet: Vec<f32> = (0..vox)
            .map(|v| {
                smooth[v].tanh() + HYPOMETABOLISM_AMPLITUDE * s * patterns.hypometabolism[v] + sigma * normal(&mut rng)
            })
            .collect();
        let clinical = clinical_from_latent(s, &mut rng);
        subjects.push(SubjectRecord {
            subject_id: format!("S{:04}", i + 1),
            mri: Volume::new(shape, mri)?,
            pet: Some(Volume::new(shape, pet)?),
            clinical,
            label: labels[i],
            latent_s: s,
        });
    }

    let n_missing = ((n as f64) * config.missing_pet_rate).round() as usize;
    let mut candidates: Vec<usize> = (0..n).collect();
    candidates.shuffle(&mut rng);
    if config.label_correlated_missing {
        candidates.sort_by_key(|&i| std::cmp::Reverse(labels[i].as_u8()));
    }
    for &i in candidates.iter().take(n_missing) {
        subjects[i].pet = None;
    }
    Ok(Cohort { shape, subjects })
}

fn volume_file(id: &str, modality: &str) -> String {
    format!("volumes/{id}_{modality}.vol")
}

/// Writes `cohort` as `manifest.csv` plus volume files under `out_dir`.
pub fn write_cohort(cohort: &Cohort, out_dir: impl AsRef<Path>) -> Result<CohortSummary> {
    let out_dir = out_dir.as_ref();
    let vol_dir = out_dir.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let manifest_path = out_dir.join("manifest.csv");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(MANIFEST_COLUMNS)?;
    for s in &cohort.subjects {
        let mri_rel = volume_file(&s.subject_id, "mri");
        write_volume(&s.mri, out_dir.join(&mri_rel))?;
        let pet_rel = match &s.pet {
            Some(p) => {
                let rel = volume_file(&s.subject_id, "pet");
                write_volume(p, out_dir.join(&rel))?;
                rel
            }
            None => String::new(),
        };
        let c = &s.clinical;
        w.write_record([
            s.subject_id.clone(),
            s.label.as_u8().to_string(),
            u8::from(s.has_pet()).to_string(),
            mri_rel,
            pet_rel,
            c.age.to_string(),
            c.sex.to_string(),
            c.education.to_string(),
            c.apoe4.to_string(),
            c.ptau.to_string(),
            c.ttau.to_string(),
            c.fdg_summary.to_string(),
            s.latent_s.to_string(),
        ])?;
    }
    let mut inner = w.into_inner().map_err(|e| Error::io(&manifest_path, e.into_error()))?;
    inner.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(CohortSummary::of(cohort))
}

/// Generates a cohort and writes it under `out_dir`.
pub fn generate_cohort(config: &CohortConfig, out_dir: impl AsRef<Path>) -> Result<CohortSummary> {
    let cohort = generate_subjects(config)?;
    write_cohort(&cohort, out_dir)
}

#[derive(Debug, Deserialize)]
struct ManifestRow {
    subject_id: String,
    label: u8,
    has_pet: u8,
    mri_path: String,
    pet_path: String,
    age: f32,
    sex: u8,
    education: f32,
    apoe4: u8,
    ptau: f32,
    ttau: f32,
    fdg_summary: f32,
    latent_s_debug: f32,
}

/// Reads a cohort written by [`write_cohort`].
pub fn load_cohort(dir: impl AsRef<Path>) -> Result<Cohort> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.csv");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header != MANIFEST_COLUMNS {
        return Err(Error::Format {
            path: manifest_path,
            reason: format!("unexpected manifest columns {header:?}"),
        });
    }
    let mut subjects = Vec::new();
    let mut shape = None;
    for row in rdr.deserialize() {
        let row: ManifestRow = row?;
        let mri = read_volume(dir.join(&row.mri_path))?;
        let pet = match (row.has_pet, row.pet_path.is_empty()) {
            (1, false) => Some(read_volume(dir.join(&row.pet_path))?),
            (0, true) => None,
            _ => {
                return Err(Error::Data(format!(
                    "subject {}: has_pet={} inconsistent with pet_path `{}`",
                    row.subject_id, row.has_pet, row.pet_path
                )))
            }
        };
        let expect = *shape.get_or_insert(mri.shape());
        if mri.shape() != expect || pet.as_ref().is_some_and(|p| p.shape() != expect) {
            return Err(Error::Data(format!(
                "subject {}: volume shapes differ from cohort shape {expect:?}",
                row.subject_id
            )));
        }
        subjects.push(SubjectRecord {
            subject_id: row.subject_id,
            mri,
            pet,
            clinical: ClinicalRecord {
                age: row.age,
                sex: row.sex,
                education: row.education,
                apoe4: row.apoe4,
                ptau: row.ptau,
                ttau: row.ttau,
                fdg_summary: row.fdg_summary,
            },
            label: Label::from_u8(row.label)?,
            latent_s: row.latent_s_debug,
        });
    }
    let shape = shape.ok_or_else(|| Error::Data(format!("{} lists no subjects", manifest_path.display())))?;
    Ok(Cohort { shape, subjects })
}

/// Partitions `0..labels.len()` into `k` label-stratified folds whose sizes
/// differ by at most one. Deterministic in `seed`.
pub fn split_kfold(labels: &[u8], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let n = labels.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the number of subjects ({n})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequence = Vec::with_capacity(n);
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        sequence.extend(members);
    }
    let mut others: Vec<usize> = (0..n).filter(|&i| labels[i] > 1).collect();
    others.shuffle(&mut rng);
    sequence.extend(others);
    let mut folds = vec![Vec::new(); k];
    for (j, i) in sequence.into_iter().enumerate() {
        folds[j % k].push(i);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Per-column mean and standard deviation of the clinical features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: [f32; CLINICAL_FEATURES],
    pub std: [f32; CLINICAL_FEATURES],
}

impl Standardizer {
    /// Fits on `records` (the training split). Population statistics are
    /// used so the fitted columns have unit variance exactly in exact
    /// arithmetic; constant columns keep a unit scale.
    pub fn fit<'a>(records: impl IntoIterator<Item = &'a ClinicalRecord>) -> Result<Self> {
        let rows: Vec<[f32; CLINICAL_FEATURES]> = records.into_iter().map(|r| r.features()).collect();
        if rows.is_empty() {
            return Err(Error::Data("cannot fit a standardizer on zero records".into()));
        }
        let n = rows.len() as f64;
        let mut mean = [0f32; CLINICAL_FEATURES];
        let mut std = [1f32; CLINICAL_FEATURES];
        for j in 0..CLINICAL_FEATURES {
            let m = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n;
            mean[j] = m as f32;
            std[j] = if v > 1e-12 { v.sqrt() as f32 } else { 1.0 };
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, r: &ClinicalRecord) -> [f32; CLINICAL_FEATURES] {
        let f = r.features();
        std::array::from_fn(|j| (f[j] - self.mean[j]) / self.std[j])
    }

    pub fn to_tensors(&self) -> Vec<(String, Tensor<f32>)> {
        vec![
            ("standardizer.mean".into(), Tensor::new(vec![CLINICAL_FEATURES], self.mean.to_vec()).unwrap()),
            ("standardizer.std".into(), Tensor::new(vec![CLINICAL_FEATURES], self.std.to_vec()).unwrap()),
        ]
    }

    pub fn from_tensors(tensors: &[(String, Tensor<f32>)]) -> Result<Self> {
        let get = |name: &str| -> Result<[f32; CLINICAL_FEATURES]> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("checkpoint has no `{name}`")))?;
            t.data()
                .try_into()
                .map_err(|_| Error::Shape(format!("`{name}` must have {CLINICAL_FEATURES} values")))
        };
        Ok(Self {
            mean: get("standardizer.mean")?,
            std: get("standardizer.std")?,
        })
    }
}

/// Path helper used by the CLI and trainer for per-fold outputs.
pub fn fold_dir(root: &Path, fold: usize) -> PathBuf {
    root.join(format!("fold_{fold}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, missing: f64) -> CohortConfig {
        CohortConfig {
            n_subjects: n,
            volume_shape: [8, 8, 8],
            missing_pet_rate: missing,
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn missing_counts_follow_rate() {
        let c = generate_subjects(&small(8, 0.0)).unwrap();
        assert!(c.subjects.iter().all(|s| s.has_pet()));
        let c = generate_subjects(&small(10, 0.5)).unwrap();
        assert_eq!(c.subjects.iter().filter(|s| !s.has_pet()).count(), 5);
    }

    #[test]
    fn class_counts_match_fraction() {
        let cfg = CohortConfig {
            n_subjects: 37,
            pmci_fraction: 0.3,
            ..small(37, 0.2)
        };
        let c = generate_subjects(&cfg).unwrap();
        let pos = c.subjects.iter().filter(|s| s.label == Label::Pmci).count();
        assert!((pos as f64 - 37.0 * 0.3).abs() <= 1.0);
        // labels are a threshold on the latent score
        let min_pos = c.subjects.iter().filter(|s| s.label == Label::Pmci).map(|s| s.latent_s).fold(f32::INFINITY, f32::min);
        let max_neg = c.subjects.iter().filter(|s| s.label == Label::Smci).map(|s| s.latent_s).fold(f32::NEG_INFINITY, f32::max);
        assert!(min_pos > max_neg);
    }

    #[test]
    fn label_correlated_missingness_targets_pmci() {
        let cfg = CohortConfig {
            label_correlated_missing: true,
            ..small(20, 0.25)
        };
        let c = generate_subjects(&cfg).unwrap();
        assert!(c.subjects.iter().filter(|s| !s.has_pet()).all(|s| s.label == Label::Pmci));
    }

    #[test]
    fn rejects_invalid_configs() {
        for bad in [
            CohortConfig { missing_pet_rate: 1.5, ..Default::default() },
            CohortConfig { pmci_fraction: 0.0, ..Default::default() },
            CohortConfig { volume_shape: [4, 16, 16], ..Default::default() },
            CohortConfig { noise_sigma: -1.0, ..Default::default() },
            CohortConfig { n_subjects: 1, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn kfold_sizes_and_determinism() {
        let labels10 = [0u8, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let f = split_kfold(&labels10, 5, 3).unwrap();
        assert!(f.iter().all(|x| x.len() == 2));
        assert_eq!(f, split_kfold(&labels10, 5, 3).unwrap());
        let labels11 = [0u8; 11];
        let mut sizes: Vec<usize> = split_kfold(&labels11, 5, 1).unwrap().iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert!(split_kfold(&labels10, 11, 0).is_err());
        assert!(split_kfold(&labels10, 1, 0).is_err());
    }

    #[test]
    fn standardizer_moments() {
        let c = generate_subjects(&small(50, 0.0)).unwrap();
        let st = Standardizer::fit(c.subjects.iter().map(|s| &s.clinical)).unwrap();
        let rows: Vec<_> = c.subjects.iter().map(|s| st.apply(&s.clinical)).collect();
        for j in 0..CLINICAL_FEATURES {
            let m = rows.iter().map(|r| r[j] as f64).sum::<f64>() / 50.0;
            let v = rows.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / 50.0;
            assert!(m.abs() < 1e-5, "column {j} mean {m}");
            assert!((v - 1.0).abs() < 1e-3, "column {j} var {v}");
        }
        assert!(Standardizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn box_blur_preserves_constants() {
        let v = vec![2.5f32; 512];
        assert!(box_blur3(&v, [8, 8, 8]).iter().all(|&x| (x - 2.5).abs() < 1e-6));
    }
}
