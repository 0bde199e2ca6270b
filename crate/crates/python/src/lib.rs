//! Python bindings: masks, metrics, tokenization, and loading a trained
//! checkpoint to generate paraphrases or inspect granularity scores.

use std::path::PathBuf;

use gaformer::attention::{AttentionMasks, MaskMode};
use gaformer::cli::{load_model, main_from_args, LoadedModel};
use gaformer::data::{basic_tokenize, detokenize};
use gaformer::decode::{beam_search, DecodeConfig};
use gaformer::inspect::inspect;
use gaformer::metrics;
use gaformer::tensor::Tensor;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: gaformer::error::Error) -> PyErr {
    match e {
        gaformer::error::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

type Matrix = Vec<Vec<f64>>;

fn rows(t: &Tensor<f64>) -> Matrix {
    let n = t.shape()[1];
    t.data().chunks(n).map(<[f64]>::to_vec).collect()
}

fn parse_mode(mode: &str) -> PyResult<MaskMode> {
    mode.parse().map_err(to_py)
}

/// Resonance, scope and combined masks for granularity scores `z`.
///
/// Returns three `N x N` nested lists.
#[pyfunction]
#[pyo3(signature = (z, epsilon = 2, mode = "r"))]
fn attention_masks(z: Vec<f64>, epsilon: usize, mode: &str) -> PyResult<(Matrix, Matrix, Matrix)> {
    if z.is_empty() {
        return Err(PyValueError::new_err("z must not be empty"));
    }
    let m = AttentionMasks::compute(&z, z.len(), epsilon, parse_mode(mode)?).map_err(to_py)?;
    Ok((rows(&m.resonance), rows(&m.scope), rows(&m.combined)))
}

#[pyfunction]
fn tokenize(text: &str) -> Vec<String> {
    basic_tokenize(text)
}

#[pyfunction]
#[pyo3(signature = (candidate, references, max_n = 4))]
fn sentence_bleu(candidate: Vec<String>, references: Vec<Vec<String>>, max_n: usize) -> f64 {
    let refs: Vec<&[String]> = references.iter().map(Vec::as_slice).collect();
    metrics::sentence_bleu(&candidate, &refs, max_n)
}

#[pyfunction]
#[pyo3(signature = (candidates, references, max_n = 4))]
fn corpus_bleu(candidates: Vec<Vec<String>>, references: Vec<Vec<Vec<String>>>, max_n: usize) -> PyResult<f64> {
    if candidates.len() != references.len() {
        return Err(PyValueError::new_err("need one reference list per candidate"));
    }
    let cands: Vec<&[String]> = candidates.iter().map(Vec::as_slice).collect();
    let refs: Vec<Vec<&[String]>> = references
        .iter()
        .map(|rs| rs.iter().map(Vec::as_slice).collect())
        .collect();
    Ok(metrics::corpus_bleu(&cands, &refs, max_n))
}

#[pyfunction]
#[pyo3(signature = (candidate, reference, source, alpha = 0.9))]
fn ibleu(candidate: Vec<String>, reference: Vec<String>, source: Vec<String>, alpha: f64) -> f64 {
    metrics::ibleu(&candidate, &reference, &source, alpha)
}

#[pyfunction]
fn rouge_l(candidate: Vec<String>, reference: Vec<String>) -> f64 {
    metrics::rouge_l(&candidate, &reference)
}

/// Runs the command-line tool in-process and returns its exit status,
/// e.g. `run_cli(["train", "--config", "configs/toy.cfg"])`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    main_from_args(std::iter::once("gaformer".to_string()).chain(args))
}

/// A trained model with its vocabulary.
#[pyclass(frozen)]
struct Model {
    inner: LoadedModel,
}

#[pymethods]
impl Model {
    /// Loads `checkpoint`; the vocabulary defaults to the sibling
    /// `vocab.txt`.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, vocab = None))]
    fn load(checkpoint: PathBuf, vocab: Option<PathBuf>) -> PyResult<Self> {
        let inner = load_model(&checkpoint, vocab.as_deref(), None).map_err(to_py)?;
        Ok(Model { inner })
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id.clone()
    }

    /// Model hyperparameters as a JSON string.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.model.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// Best `top` paraphrases as `(text, score)` pairs, best first.
    #[pyo3(signature = (sentence, beam = 8, top = 1, max_len = None, length_alpha = 1.0))]
    fn generate(
        &self,
        py: Python<'_>,
        sentence: &str,
        beam: usize,
        top: usize,
        max_len: Option<usize>,
        length_alpha: f64,
    ) -> PyResult<Vec<(String, f64)>> {
        let m = &self.inner;
        let src = m.vocab.encode(&m.tokenizer.tokenize(sentence));
        if src.is_empty() {
            return Err(PyValueError::new_err("sentence has no tokens"));
        }
        if beam == 0 {
            return Err(PyValueError::new_err("beam must be at least 1"));
        }
        let cfg = DecodeConfig {
            beam_size: beam,
            max_len: max_len.unwrap_or(m.model.config.max_len),
            length_alpha,
        };
        let hyps = py
            .detach(|| beam_search(&m.model, m.model.clip_source(&src), &cfg))
            .map_err(to_py)?;
        Ok(hyps
            .iter()
            .take(top.max(1))
            .map(|h| (detokenize(&m.vocab.decode(&h.token_ids)), h.score(length_alpha)))
            .collect())
    }

    /// Per-layer granularity scores: `(tokens, layers x tokens)`.
    fn inspect(&self, sentence: &str) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let m = &self.inner;
        let r = inspect(&m.model, &m.tokenizer, &m.vocab, sentence, &m.checkpoint_id).map_err(to_py)?;
        Ok((r.tokens, r.per_layer_z))
    }
}

#[pymodule]
fn pygaformer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(attention_masks, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(sentence_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(ibleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
