//! Python bindings for the entitynlm crate: corpus handling, training,
//! likelihood evaluation, and sampling.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use entitynlm::corpus::{self, EncodedDocument, SynthSpec, SynthStyle, Vocabulary};
use entitynlm::entity_state::annotations_to_spans;
use entitynlm::eval;
use entitynlm::model::{self, ModelParams, NoiseSource};
use entitynlm::train::{self, TrainConfig};

fn err(e: entitynlm::Error) -> PyErr {
    match e {
        entitynlm::Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// An encoded corpus: documents as token ids with per-token (R, E, L)
/// annotations, plus the vocabulary they were encoded against.
#[pyclass]
struct Corpus {
    docs: Vec<EncodedDocument>,
    vocab: Vocabulary,
}

fn encode_all(
    raws: &[corpus::RawDocument],
    min_count: u64,
    l_max: usize,
) -> PyResult<(Vec<EncodedDocument>, Vocabulary)> {
    let pre: Vec<_> = raws
        .iter()
        .map(corpus::preprocess)
        .collect::<entitynlm::Result<_>>()
        .map_err(err)?;
    let vocab = Vocabulary::build(&pre, min_count).map_err(err)?;
    let docs = pre
        .iter()
        .map(|d| corpus::encode(d, &vocab, l_max).map(EncodedDocument::with_eod))
        .collect::<entitynlm::Result<_>>()
        .map_err(err)?;
    Ok((docs, vocab))
}

#[pymethods]
impl Corpus {
    /// Deterministic synthetic corpus; style is "mixed" or "recency".
    #[staticmethod]
    #[pyo3(signature = (num_docs, vocab_size, mean_entities, recurrence, style, seed, min_count=1, l_max=25))]
    #[allow(clippy::too_many_arguments)]
    fn synth(
        num_docs: usize,
        vocab_size: usize,
        mean_entities: f64,
        recurrence: f64,
        style: &str,
        seed: u64,
        min_count: u64,
        l_max: usize,
    ) -> PyResult<Corpus> {
        let style = match style {
            "mixed" => SynthStyle::Mixed,
            "recency" => SynthStyle::Recency,
            other => {
                return Err(PyValueError::new_err(format!(
                    "unknown style {other:?}: expected \"mixed\" or \"recency\""
                )))
            }
        };
        let spec = SynthSpec {
            num_docs,
            vocab_size,
            mean_entities,
            recurrence,
            style,
        };
        let raws = corpus::synth_corpus(&spec, seed).map_err(err)?;
        let (docs, vocab) = encode_all(&raws, min_count, l_max)?;
        Ok(Corpus { docs, vocab })
    }

    /// Loads a JSONL file of raw documents and encodes it.
    #[staticmethod]
    #[pyo3(signature = (path, min_count=2, l_max=25))]
    fn load_jsonl(path: &str, min_count: u64, l_max: usize) -> PyResult<Corpus> {
        let raws = corpus::read_documents(Path::new(path)).map_err(err)?;
        let (docs, vocab) = encode_all(&raws, min_count, l_max)?;
        Ok(Corpus { docs, vocab })
    }

    fn __len__(&self) -> usize {
        self.docs.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn doc_id(&self, i: usize) -> PyResult<String> {
        Ok(self.doc(i)?.id.clone())
    }

    /// Token ids of document i (including the end-of-document token).
    fn tokens(&self, i: usize) -> PyResult<Vec<usize>> {
        Ok(self.doc(i)?.tokens.clone())
    }

    /// Tokens of document i decoded back to words.
    fn words(&self, i: usize) -> PyResult<Vec<String>> {
        let doc = self.doc(i)?;
        Ok(doc
            .tokens
            .iter()
            .map(|&t| self.vocab.word(t).unwrap_or("<unk>").to_string())
            .collect())
    }

    /// Gold mentions of document i as (entity, start, end) token spans.
    fn mentions(&self, i: usize) -> PyResult<Vec<(usize, usize, usize)>> {
        Ok(annotations_to_spans(&self.doc(i)?.annotations))
    }

    /// Splits off the first n documents into a new corpus sharing the
    /// vocabulary; the remainder stays in a second corpus.
    fn split(&self, n: usize) -> PyResult<(Corpus, Corpus)> {
        if n > self.docs.len() {
            return Err(PyValueError::new_err(format!(
                "cannot split {} docs at {n}",
                self.docs.len()
            )));
        }
        let (a, b) = self.docs.split_at(n);
        Ok((
            Corpus {
                docs: a.to_vec(),
                vocab: self.vocab.clone(),
            },
            Corpus {
                docs: b.to_vec(),
                vocab: self.vocab.clone(),
            },
        ))
    }
}

impl Corpus {
    fn doc(&self, i: usize) -> PyResult<&EncodedDocument> {
        self.docs
            .get(i)
            .ok_or_else(|| PyValueError::new_err(format!("document index {i} out of range")))
    }
}

/// A trained EntityNLM: parameters plus the vocabulary they are tied to.
#[pyclass]
struct Model {
    params: ModelParams,
    vocab: Vocabulary,
}

#[pymethods]
impl Model {
    /// Trains on `corpus`, using `dev` (or the training set) for model
    /// selection. Returns the model and a list of per-epoch log dicts.
    #[staticmethod]
    #[pyo3(signature = (corpus, dev=None, d=32, epochs=10, seed=0, dropout=0.2, lr=0.0, entity_blind=false))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        corpus: &Corpus,
        dev: Option<&Corpus>,
        d: usize,
        epochs: usize,
        seed: u64,
        dropout: f64,
        lr: f64,
        entity_blind: bool,
    ) -> PyResult<(Model, Vec<Py<PyAny>>)> {
        let cfg = TrainConfig {
            d_x: d,
            d_h: d,
            d_e: d,
            epochs,
            seed,
            dropout,
            lr,
            entity_blind,
            ..TrainConfig::default()
        };
        let dev_docs = dev.map_or(&corpus.docs[..], |c| &c.docs[..]);
        let (params, logs) =
            train::train(&corpus.docs, dev_docs, corpus.vocab.counts(), &cfg).map_err(err)?;
        let py_logs = logs
            .iter()
            .map(|l| {
                let dict = pyo3::types::PyDict::new(py);
                dict.set_item("epoch", l.epoch)?;
                dict.set_item("mean_log_prob", l.mean_log_prob)?;
                dict.set_item("dev_perplexity", l.dev_perplexity)?;
                Ok(dict.into_any().unbind())
            })
            .collect::<PyResult<_>>()?;
        Ok((
            Model {
                params,
                vocab: corpus.vocab.clone(),
            },
            py_logs,
        ))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        model::save_checkpoint(Path::new(path), &self.params, &self.vocab).map_err(err)
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Model> {
        let (params, vocab) = model::load_checkpoint(Path::new(path)).map_err(err)?;
        Ok(Model { params, vocab })
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        let mut named = Vec::new();
        self.params.visit(&mut named);
        named.iter().map(|(_, t)| t.data().len()).sum()
    }

    /// Teacher-forced log joint probability of document i (noise-free
    /// new-entity embeddings).
    fn doc_log_prob(&self, corpus: &Corpus, i: usize) -> PyResult<f64> {
        let doc = corpus.doc(i)?;
        let mut noise = NoiseSource::deterministic();
        let (lp, _) =
            model::forward_doc_log_prob(&self.params, &doc.tokens, &doc.annotations, &mut noise)
                .map_err(err)?;
        Ok(lp)
    }

    /// Importance-sampling estimate of log p(words) for document i:
    /// returns (estimate, effective sample size).
    #[pyo3(signature = (corpus, i, n=100, seed=0))]
    fn doc_marginal(&self, corpus: &Corpus, i: usize, n: usize, seed: u64) -> PyResult<(f64, f64)> {
        let doc = corpus.doc(i)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let est = eval::doc_marginal_is(&self.params, &doc.id, &doc.tokens, n, &mut rng, false)
            .map_err(err)?;
        Ok((est.estimate, est.ess))
    }

    /// Held-out word perplexity by importance sampling over the corpus.
    #[pyo3(signature = (corpus, n=100, seed=0))]
    fn perplexity(&self, corpus: &Corpus, n: usize, seed: u64) -> PyResult<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ppl, _) = eval::perplexity_is(&self.params, &corpus.docs, n, &mut rng).map_err(err)?;
        Ok(ppl)
    }

    /// Joint (words + structure) perplexity under teacher forcing.
    fn joint_perplexity(&self, corpus: &Corpus) -> PyResult<f64> {
        train::joint_perplexity(&self.params, &corpus.docs).map_err(err)
    }

    /// Ancestral sample: returns (words, mentions) where mentions are
    /// (entity, start, end) token spans.
    #[pyo3(signature = (max_len=100, seed=0))]
    fn sample(
        &self,
        max_len: usize,
        seed: u64,
    ) -> PyResult<(Vec<String>, Vec<(usize, usize, usize)>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (tokens, anns) = model::sample_document(&self.params, max_len, &mut rng).map_err(err)?;
        let words = tokens
            .iter()
            .map(|&t| self.vocab.word(t).unwrap_or("<unk>").to_string())
            .collect();
        Ok((words, annotations_to_spans(&anns)))
    }

    /// Entity-prediction accuracy at gold mention starts past the first
    /// `min_sentences` sentences, and the always-new baseline.
    #[pyo3(signature = (corpus, min_sentences=3, max_predictions=30))]
    fn entity_prediction(
        &self,
        corpus: &Corpus,
        min_sentences: usize,
        max_predictions: usize,
    ) -> PyResult<(f64, f64)> {
        let protocol = eval::PredictionProtocol {
            min_sentences,
            max_predictions,
        };
        let model_stats =
            eval::entity_prediction(&self.params, &corpus.docs, protocol).map_err(err)?;
        let base_stats = eval::always_new_baseline(&corpus.docs, protocol).map_err(err)?;
        Ok((model_stats.accuracy(), base_stats.accuracy()))
    }
}

#[pymodule]
fn entitynlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Model>()?;
    Ok(())
}
