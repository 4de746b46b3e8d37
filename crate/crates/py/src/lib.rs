//! Python bindings: configs, cohorts, the generator, losses, metrics and
//! cross-validation. Volumes cross the boundary as flat `float` lists in
//! `[d, h, w]` order.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use itcfn::config::RunConfig;
use itcfn::losses;
use itcfn::metrics;
use itcfn::mmg::{Codebook, Mmg};
use itcfn::synthdata::{generate_subjects, load_cohort, write_cohort, Cohort, CohortSummary, Volume};
use itcfn::tensor::{read_checkpoint, write_checkpoint, Graph, Tensor};
use itcfn::trainer::{derive_seed, fold_split, run_cv as cv, train_mmg, Ablation};
use itcfn::verify::{run_suite, Mutation};
use itcfn::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) | Error::Shape(_) => PyValueError::new_err(e.to_string()),
        e if e.is_io() => PyOSError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for itcfn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

#[pyclass(name = "RunConfig", module = "itcfn_py", from_py_object)]
#[derive(Clone)]
pub struct PyRunConfig {
    pub inner: RunConfig,
}

impl PyRunConfig {
    fn update(&mut self, f: impl FnOnce(&mut RunConfig)) -> PyResult<()> {
        let mut next = self.inner.clone();
        f(&mut next);
        next.validate().py()?;
        self.inner = next;
        Ok(())
    }
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, or the given TOML text.
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::from_toml_str(text).py()?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).py()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self {
            inner: self.inner.clone().with_seed(seed),
        }
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    #[getter]
    fn n_subjects(&self) -> usize {
        self.inner.cohort.n_subjects
    }

    #[setter]
    fn set_n_subjects(&mut self, n: usize) -> PyResult<()> {
        self.update(|c| c.cohort.n_subjects = n)
    }

    #[getter]
    fn volume_shape(&self) -> [usize; 3] {
        self.inner.cohort.volume_shape
    }

    #[setter]
    fn set_volume_shape(&mut self, shape: [usize; 3]) -> PyResult<()> {
        self.update(|c| c.cohort.volume_shape = shape)
    }

    #[getter]
    fn missing_pet_rate(&self) -> f64 {
        self.inner.cohort.missing_pet_rate
    }

    #[setter]
    fn set_missing_pet_rate(&mut self, rate: f64) -> PyResult<()> {
        self.update(|c| c.cohort.missing_pet_rate = rate)
    }

    #[getter]
    fn epochs(&self) -> (usize, usize) {
        (self.inner.train.epochs_stage1, self.inner.train.epochs_stage2)
    }

    #[setter]
    fn set_epochs(&mut self, epochs: (usize, usize)) -> PyResult<()> {
        self.update(|c| (c.train.epochs_stage1, c.train.epochs_stage2) = epochs)
    }

    #[getter]
    fn k_folds(&self) -> usize {
        self.inner.train.k_folds
    }

    #[setter]
    fn set_k_folds(&mut self, k: usize) -> PyResult<()> {
        self.update(|c| c.train.k_folds = k)
    }

    /// Codebook size and code dimension.
    #[getter]
    fn codebook(&self) -> (usize, usize) {
        (self.inner.mmg.codebook_size, self.inner.mmg.code_dim)
    }

    #[setter]
    fn set_codebook(&mut self, shape: (usize, usize)) -> PyResult<()> {
        self.update(|c| (c.mmg.codebook_size, c.mmg.code_dim) = shape)
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={})", &self.inner.hash()[..12])
    }
}

fn summary_dict<'py>(py: Python<'py>, s: &CohortSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("n_subjects", s.n_subjects)?;
    d.set_item("n_smci", s.n_smci)?;
    d.set_item("n_pmci", s.n_pmci)?;
    d.set_item("n_with_pet", s.n_with_pet)?;
    d.set_item("n_missing_pet", s.n_missing_pet)?;
    Ok(d)
}

#[pyclass(name = "Cohort", module = "itcfn_py")]
pub struct PyCohort {
    pub inner: Cohort,
}

impl PyCohort {
    fn subject(&self, i: usize) -> PyResult<&itcfn::synthdata::SubjectRecord> {
        self.inner
            .subjects
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("subject {i} out of range")))
    }
}

#[pymethods]
impl PyCohort {
    #[staticmethod]
    fn generate(config: &PyRunConfig) -> PyResult<Self> {
        Ok(Self {
            inner: generate_subjects(&config.inner.cohort).py()?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_cohort(dir).py()?,
        })
    }

    /// Writes the manifest and volumes; returns the summary.
    fn write<'py>(&self, py: Python<'py>, dir: PathBuf) -> PyResult<Bound<'py, PyDict>> {
        let s = write_cohort(&self.inner, dir).py()?;
        summary_dict(py, &s)
    }

    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        summary_dict(py, &CohortSummary::of(&self.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.ids()
    }

    fn labels(&self) -> Vec<u8> {
        self.inner.labels()
    }

    fn has_pet(&self) -> Vec<bool> {
        self.inner.subjects.iter().map(|s| s.has_pet()).collect()
    }

    #[getter]
    fn volume_shape(&self) -> PyResult<[usize; 3]> {
        Ok(self.subject(0)?.mri.shape())
    }

    fn mri(&self, i: usize) -> PyResult<Vec<f32>> {
        Ok(self.subject(i)?.mri.data().to_vec())
    }

    fn pet(&self, i: usize) -> PyResult<Option<Vec<f32>>> {
        Ok(self.subject(i)?.pet.as_ref().map(|v| v.data().to_vec()))
    }

    /// The seven clinical fields, unstandardised.
    fn clinical(&self, i: usize) -> PyResult<Vec<f32>> {
        Ok(self.subject(i)?.clinical.features().to_vec())
    }
}

#[pyclass(name = "Mmg", module = "itcfn_py")]
pub struct PyMmg {
    pub inner: Mmg,
    seed: u64,
    curve: Vec<[f64; 5]>,
}

#[pymethods]
impl PyMmg {
    /// Stage 1 on the PET-complete subjects of the training split (or of
    /// the whole cohort when `fold` is None).
    #[staticmethod]
    #[pyo3(signature = (cohort, config, fold = None))]
    fn train(py: Python<'_>, cohort: &PyCohort, config: &PyRunConfig, fold: Option<usize>) -> PyResult<Self> {
        let cfg = &config.inner;
        let (idx, seed) = match fold {
            Some(k) => (fold_split(&cohort.inner, cfg, k).py()?.0, derive_seed(cfg.train.seed, &[k as u64])),
            None => ((0..cohort.inner.len()).collect(), cfg.train.seed),
        };
        let run = py.detach(|| train_mmg(&cohort.inner, &idx, cfg, seed, false)).py()?;
        Ok(Self {
            inner: run.mmg,
            seed,
            curve: run.curve.iter().map(|c| [c.l1, c.qua, c.per, c.adv, c.total]).collect(),
        })
    }

    /// Per-epoch `(l1, qua, per, adv, total)`.
    #[getter]
    fn curve(&self) -> Vec<[f64; 5]> {
        self.curve.clone()
    }

    fn generate_pet(&self, mri: Vec<f32>) -> PyResult<Vec<f32>> {
        let shape = self.inner.shape;
        let t = Tensor::new(shape.to_vec(), mri).py()?;
        let v = Volume::from_tensor(&t).py()?;
        Ok(self.inner.generate_pet(&v).py()?.data().to_vec())
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&self.inner.to_checkpoint(self.seed), path).py()
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, seed) = Mmg::from_checkpoint(&read_checkpoint(path).py()?).py()?;
        Ok(Self {
            inner,
            seed,
            curve: Vec::new(),
        })
    }
}

#[pyfunction]
pub fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::auc(&scores, &labels).py()
}

/// Thresholds `probs` at 0.5 and returns ACC, SEN, SPE, F1 and the counts.
#[pyfunction]
pub fn confusion_metrics<'py>(py: Python<'py>, probs: Vec<f64>, labels: Vec<u8>) -> PyResult<Bound<'py, PyDict>> {
    let m = metrics::confusion_metrics(&metrics::threshold(&probs), &labels).py()?;
    let d = PyDict::new(py);
    for (k, v) in [("acc", m.acc), ("sen", m.sen), ("spe", m.spe), ("f1", m.f1)] {
        d.set_item(k, v)?;
    }
    for (k, v) in [("tp", m.tp), ("tn", m.tn), ("fp", m.fp), ("fn", m.fn_)] {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Mean focal loss of pMCI probabilities `p1` against binary labels.
#[pyfunction]
#[pyo3(signature = (p1, labels, gamma = 2.0, class_weights = (1.0, 1.0)))]
pub fn focal_loss(p1: Vec<f64>, labels: Vec<u8>, gamma: f64, class_weights: (f64, f64)) -> PyResult<f64> {
    let g = Graph::<f64>::new();
    let probs = Tensor::new(vec![p1.len(), 2], p1.iter().flat_map(|&p| [1.0 - p, p]).collect()).py()?;
    let v = losses::focal_loss(&g, g.constant(probs), &labels, gamma, [class_weights.0, class_weights.1]).py()?;
    Ok(g.value(v).item())
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::new(vec![rows.len(), d], rows.concat()).py()
}

/// Bidirectional similarity-distribution matching loss between two feature
/// matrices whose rows share `labels`.
#[pyfunction]
#[pyo3(signature = (a, b, labels, tau = 0.1, epsilon = 1e-8))]
pub fn sdm_loss(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, labels: Vec<u8>, tau: f64, epsilon: f64) -> PyResult<f64> {
    let g = Graph::<f64>::new();
    let (a, b) = (g.constant(matrix(&a)?), g.constant(matrix(&b)?));
    let v = losses::sdm_loss(&g, a, b, &labels, tau, epsilon).py()?;
    Ok(g.value(v).item())
}

#[pyfunction]
pub fn triple_loss(mt: f64, pt: f64, mp: f64, lam: f64) -> PyResult<f64> {
    losses::triple_loss_value(mt, pt, mp, lam).py()
}

#[pyfunction]
pub fn total_loss(focal: f64, triple: f64, alpha: f64) -> PyResult<f64> {
    losses::total_loss_value(focal, triple, alpha).py()
}

/// Nearest-code assignment of each row of `z`; returns the quantized rows
/// and their code indices.
#[pyfunction]
pub fn quantize(codebook: Vec<Vec<f32>>, z: Vec<Vec<f32>>) -> PyResult<(Vec<Vec<f32>>, Vec<usize>)> {
    let d = codebook.first().map_or(0, Vec::len);
    if codebook.iter().chain(&z).any(|r| r.len() != d) {
        return Err(PyValueError::new_err("codes and rows must share one dimension"));
    }
    let book = Codebook::new(Tensor::new(vec![codebook.len(), d], codebook.concat()).py()?).py()?;
    let zt = Tensor::new(vec![z.len(), d, 1, 1, 1], z.concat()).py()?;
    let (q, idx) = book.quantize(&zt).py()?;
    Ok((q.data().chunks(d).map(<[f32]>::to_vec).collect(), idx))
}

/// Cross-validation; returns `{mode: report}` with reports as parsed JSON.
#[pyfunction]
#[pyo3(signature = (cohort, config, modes = None))]
pub fn run_cv<'py>(
    py: Python<'py>,
    cohort: &PyCohort,
    config: &PyRunConfig,
    modes: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyDict>> {
    let modes: Vec<Ablation> = match modes {
        Some(names) => names.iter().map(|n| n.parse()).collect::<itcfn::Result<_>>().py()?,
        None => Ablation::ALL.to_vec(),
    };
    let out = py.detach(|| cv(&cohort.inner, &config.inner, &modes, false)).py()?;
    let json = py.import("json")?;
    let d = PyDict::new(py);
    for r in &out.reports {
        d.set_item(r.mode.name(), json.call_method1("loads", (r.to_json(),))?)?;
    }
    Ok(d)
}

/// Runs the property suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (mutate = None))]
pub fn verify(py: Python<'_>, mutate: Option<&str>) -> PyResult<Vec<(String, bool, String)>> {
    let mutation = mutate.map(str::parse::<Mutation>).transpose().py()?;
    let results = py.detach(|| run_suite(mutation));
    Ok(results
        .into_iter()
        .map(|r| (r.name.to_owned(), r.passed, r.detail))
        .collect())
}

#[pymodule]
pub fn itcfn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyCohort>()?;
    m.add_class::<PyMmg>()?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sdm_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triple_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(run_cv, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
