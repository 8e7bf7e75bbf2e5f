//! Python bindings: corpus loading, oversampling plans, losses, metrics,
//! exact search, and training / embedding with the tiny encoder.

use std::collections::BTreeMap;

use ndarray::Array2;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ccse_core::config::RunConfig;
use ccse_core::corpus::{self, LanguageStats};
use ccse_core::loss::{self, LossConfig, SimilarityMatrix};
use ccse_core::sampler::{plan_epoch, SamplerConfig};
use ccse_core::trainer::{self, Checkpoint};
use ccse_core::{format, linalg, metrics, search, synthetic, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let h = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != h) {
        return Err(PyValueError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((n, h), rows.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| PyValueError::new_err(e.to_string()))
}

fn loss_config(loss_type: &str, positive_mode: &str, temperature: f64) -> PyResult<LossConfig> {
    let cfg = LossConfig {
        loss_type: parse(loss_type)?,
        positive_mode: parse(positive_mode)?,
        temperature,
    };
    cfg.validate().map_err(py_err)?;
    Ok(cfg)
}

/// A loaded bimodal corpus.
#[pyclass(module = "ccse")]
struct Corpus {
    inner: corpus::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (path, languages = None))]
    fn load(path: &str, languages: Option<Vec<String>>) -> PyResult<Self> {
        let inner = corpus::load_corpus(path, &languages.unwrap_or_default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Pair count per language.
    fn counts(&self) -> BTreeMap<String, usize> {
        self.inner.stats.counts().iter().cloned().collect()
    }

    fn fractions(&self) -> BTreeMap<String, f64> {
        self.inner.stats.fractions().into_iter().collect()
    }

    #[getter]
    fn skipped_unknown_language(&self) -> usize {
        self.inner.skipped_unknown_language
    }

    /// `(id, language, code_tokens, doc_tokens)` tuples in file order.
    fn examples(&self) -> Vec<(String, String, Vec<String>, Vec<String>)> {
        self.inner
            .examples
            .iter()
            .map(|e| (e.id.clone(), e.language.clone(), e.code_tokens.clone(), e.doc_tokens.clone()))
            .collect()
    }
}

/// Per-language sampling plan for one epoch: a list of dicts in batch order.
#[pyfunction]
#[pyo3(signature = (counts, alpha = 0.7, batch_size = 32, epoch = 0, language_order = None))]
fn oversample_plan<'py>(
    py: Python<'py>,
    counts: BTreeMap<String, usize>,
    alpha: f64,
    batch_size: usize,
    epoch: usize,
    language_order: Option<Vec<String>>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let stats = LanguageStats::from_counts(counts);
    let cfg = SamplerConfig {
        alpha,
        batch_size,
        base_language_order: language_order.unwrap_or_default(),
        ..Default::default()
    };
    let plan = plan_epoch(&stats, &cfg, epoch).map_err(py_err)?;
    plan.languages
        .iter()
        .map(|l| {
            let d = PyDict::new(py);
            d.set_item("language", &l.language)?;
            d.set_item("available", l.available)?;
            d.set_item("weight", l.weight)?;
            d.set_item("sampled", l.sampled)?;
            d.set_item("batches", l.batches)?;
            d.set_item("ratio", l.ratio())?;
            Ok(d)
        })
        .collect()
}

/// Row, column and total loss of a similarity matrix.
#[pyfunction]
#[pyo3(signature = (similarities, loss_type = "symmetric", positive_mode = "diagonal", temperature = 1.0))]
fn contrastive_loss(
    similarities: Vec<Vec<f64>>,
    loss_type: &str,
    positive_mode: &str,
    temperature: f64,
) -> PyResult<(Vec<f64>, Vec<f64>, f64)> {
    let cfg = loss_config(loss_type, positive_mode, temperature)?;
    let s = SimilarityMatrix::from_values(matrix(similarities)?);
    let b = loss::evaluate_loss(&s, &cfg).map_err(py_err)?;
    Ok((b.row.to_vec(), b.col.to_vec(), b.total))
}

/// Gradient of the total loss with respect to the similarity matrix.
#[pyfunction]
#[pyo3(signature = (similarities, loss_type = "symmetric", positive_mode = "diagonal", temperature = 1.0))]
fn loss_gradient(
    similarities: Vec<Vec<f64>>,
    loss_type: &str,
    positive_mode: &str,
    temperature: f64,
) -> PyResult<Vec<Vec<f64>>> {
    let cfg = loss_config(loss_type, positive_mode, temperature)?;
    let s = SimilarityMatrix::from_values(matrix(similarities)?);
    Ok(rows(&loss::loss_gradient(&s, &cfg).map_err(py_err)?))
}

/// `(positive, negative, diff)` alignment of paired unit embeddings.
#[pyfunction]
#[pyo3(signature = (codes, docs, n_random = 50_000, seed = 42))]
fn alignment_report(codes: Vec<Vec<f64>>, docs: Vec<Vec<f64>>, n_random: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
    let (c, d) = (matrix(codes)?, matrix(docs)?);
    let r = metrics::alignment_report(c.view(), d.view(), n_random, seed).map_err(py_err)?;
    Ok((r.positive, r.negative, r.diff))
}

/// `(mrr, ranks)`; the ground truth wins ties.
#[pyfunction]
fn mean_reciprocal_rank(
    queries: Vec<Vec<f64>>,
    candidates: Vec<Vec<f64>>,
    ground_truth: Vec<usize>,
) -> PyResult<(f64, Vec<usize>)> {
    let (q, c) = (matrix(queries)?, matrix(candidates)?);
    let r = metrics::mean_reciprocal_rank(q.view(), c.view(), &ground_truth).map_err(py_err)?;
    Ok((r.mrr, r.ranks))
}

/// Normalizes rows to unit length.
#[pyfunction]
fn normalize(embeddings: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = linalg::normalize_rows(matrix(embeddings)?)
        .map_err(|row| PyValueError::new_err(format!("row {row} is zero or non-finite")))?;
    Ok(rows(&m))
}

#[pyfunction]
fn write_embeddings(path: &str, embeddings: Vec<Vec<f64>>, ids: Vec<String>) -> PyResult<()> {
    format::write_embeddings(path, &linalg::to_f32(&matrix(embeddings)?), &ids).map_err(py_err)
}

/// `(rows, ids)` of a CCSE embedding file.
#[pyfunction]
fn read_embeddings(path: &str) -> PyResult<(Vec<Vec<f64>>, Vec<String>)> {
    let (m, ids) = format::read_embeddings(path).map_err(py_err)?;
    Ok((rows(&linalg::to_f64(&m)), ids))
}

/// Exact cosine top-k index.
#[pyclass(module = "ccse")]
struct Index {
    inner: search::Index,
}

#[pymethods]
impl Index {
    #[new]
    fn new(embeddings: Vec<Vec<f64>>, ids: Vec<String>) -> PyResult<Self> {
        Ok(Self {
            inner: search::build_index(matrix(embeddings)?, ids).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: search::Index::load(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `[(rank, id, score), ...]` best first.
    #[pyo3(signature = (query, k = 10))]
    fn search(&self, query: Vec<f64>, k: usize) -> PyResult<Vec<(usize, String, f64)>> {
        let q = ndarray::Array1::from(query);
        let hits = self.inner.search_top_k(q.view(), k).map_err(py_err)?;
        Ok(hits.into_iter().map(|h| (h.rank, h.id, h.score)).collect())
    }
}

/// Tiny encoder plus head, as stored in a checkpoint.
#[pyclass(module = "ccse")]
struct Model {
    checkpoint: Checkpoint,
}

#[pymethods]
impl Model {
    /// Trains on a JSONL corpus. `config` is a JSON object with the same keys
    /// as the command-line config file.
    #[staticmethod]
    #[pyo3(signature = (data, config = "{}"))]
    fn train(py: Python<'_>, data: &str, config: &str) -> PyResult<Self> {
        let cfg = RunConfig::from_json(config).map_err(py_err)?;
        cfg.validate().map_err(py_err)?;
        let corpus = corpus::load_corpus(data, &cfg.languages).map_err(py_err)?;
        let outcome = py.detach(|| trainer::train(&corpus, &cfg.train_config())).map_err(py_err)?;
        Ok(Self {
            checkpoint: outcome.checkpoint,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            checkpoint: trainer::load_checkpoint(path).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        trainer::save_checkpoint(&self.checkpoint, path).map_err(py_err)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.checkpoint.manifest.hidden
    }

    #[getter]
    fn final_loss(&self) -> Option<f64> {
        self.checkpoint.manifest.final_loss
    }

    /// Unit embeddings of token sequences (code and documents share the
    /// encoder).
    fn embed(&self, py: Python<'_>, sequences: Vec<Vec<String>>) -> PyResult<Vec<Vec<f64>>> {
        let model = &self.checkpoint.model;
        let m = py.detach(|| model.embed_tokens(&sequences)).map_err(py_err)?;
        Ok(rows(&m))
    }
}

/// Writes a planted-overlap synthetic corpus as two JSONL files and returns
/// their sizes.
#[pyfunction]
#[pyo3(signature = (train_path, heldout_path, train_pairs = 500, heldout_pairs = 100, seed = 42))]
fn write_synthetic_corpus(
    train_path: &str,
    heldout_path: &str,
    train_pairs: usize,
    heldout_pairs: usize,
    seed: u64,
) -> PyResult<(usize, usize)> {
    let splits = synthetic::generate(&synthetic::SyntheticConfig {
        train_pairs,
        heldout_pairs,
        seed,
        ..Default::default()
    })
    .map_err(py_err)?;
    corpus::write_corpus(train_path, &splits.train.examples).map_err(py_err)?;
    corpus::write_corpus(heldout_path, &splits.heldout.examples).map_err(py_err)?;
    Ok((splits.train.len(), splits.heldout.len()))
}

#[pymodule]
fn ccse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Index>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(oversample_plan, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_loss, m)?)?;
    m.add_function(wrap_pyfunction!(loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(alignment_report, m)?)?;
    m.add_function(wrap_pyfunction!(mean_reciprocal_rank, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(write_synthetic_corpus, m)?)?;
    Ok(())
}
