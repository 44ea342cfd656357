//! Command-line entry point: corpus synthesis, training, evaluation,
//! sampling, reranking, and checkpoint inspection.
//!
//! Exit codes: 0 success, 2 usage/configuration, 3 ingestion, 4 numerical,
//! 1 anything else. All reports are JSON with a `schema_version` field.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use entitynlm::corpus::{
    self, EncodedDocument, Mention, RawDocument, SynthSpec, SynthStyle, Vocabulary,
};
use entitynlm::error::{Error, Result};
use entitynlm::eval::{self, PredictionProtocol};
use entitynlm::model;
use entitynlm::rerank::{self, RerankMode};
use entitynlm::train::{self, TrainConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Default config path env var; the only environment input.
const CONFIG_ENV: &str = "ENTITYNLM_CONFIG";

#[derive(Parser)]
#[command(name = "entitynlm", version, about = "Entity-aware neural language model")]
struct Cli {
    /// TOML config file; defaults to $ENTITYNLM_CONFIG when set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// key=value config overrides; applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Master seed for all stochasticity; overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for per-document evaluation; results are
    /// worker-count-independent.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StyleArg {
    Mixed,
    Recency,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    LmOnly,
    Combined,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic annotated corpus (JSONL).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 300)]
        vocab: usize,
        #[arg(long, default_value_t = 4.0)]
        mean_entities: f64,
        #[arg(long, default_value_t = 0.6)]
        recurrence: f64,
        #[arg(long, value_enum, default_value_t = StyleArg::Mixed)]
        style: StyleArg,
    },
    /// Train a model and write a checkpoint plus an epoch log.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Annotated dev corpus for model selection; defaults to the
        /// training corpus.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Epoch log path (JSONL); defaults to <out>.log.jsonl.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Importance-sampled language-model perplexity.
    EvalLm {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        /// Report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Entity cloze prediction accuracy plus the always-new baseline.
    EvalEntity {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        min_sentences: usize,
        #[arg(long, default_value_t = 30)]
        max_predictions: usize,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rerank external coreference candidates with the model.
    Rerank {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus supplying the word sequences, matched to pair-score
        /// records by document id.
        #[arg(long)]
        input: PathBuf,
        /// Pair-scores file from the external system.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::LmOnly)]
        mode: ModeArg,
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample annotated documents from a trained model.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        num: usize,
        #[arg(long, default_value_t = 100)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os(CONFIG_ENV).map(PathBuf::from));
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(&p)
                .map_err(|e| Error::config(format!("config {}: {e}", p.display())))?;
            TrainConfig::from_toml_str(&text)?
        }
        None => TrainConfig::default(),
    };
    let pairs: Vec<(&str, &str)> = cli
        .overrides
        .iter()
        .map(|ov| {
            ov.split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::config(format!("override '{ov}' is not key=value")))
        })
        .collect::<Result<_>>()?;
    if !pairs.is_empty() {
        cfg = cfg.with_overrides(&pairs)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_corpus(path: &Path) -> Result<Vec<RawDocument>> {
    corpus::read_documents(path)?
        .iter()
        .map(corpus::preprocess)
        .collect()
}

fn encode_all(
    docs: &[RawDocument],
    vocab: &Vocabulary,
    l_max: usize,
) -> Result<Vec<EncodedDocument>> {
    docs.iter()
        .map(|d| Ok(corpus::encode(d, vocab, l_max)?.with_eod()))
        .collect()
}

fn emit(report: &serde_json::Value, path: Option<&Path>) -> Result<()> {
    let line = serde_json::to_string(report).map_err(|e| Error::Serde(e.to_string()))?;
    match path {
        Some(p) => std::fs::write(p, line + "\n")?,
        None => println!("{line}"),
    }
    Ok(())
}

/// Deterministic per-document seed: independent of worker count and
/// evaluation order.
fn doc_seed(master: u64, index: usize) -> u64 {
    master ^ (0x9e3779b97f4a7c15u64.wrapping_mul(index as u64 + 1))
}

/// Maps `f` over the documents with up to `workers` threads; output order
/// and values are identical for any worker count.
fn par_map<T, F>(docs: &[EncodedDocument], workers: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, &EncodedDocument) -> Result<T> + Sync,
{
    let workers = workers.max(1).min(docs.len().max(1));
    if workers == 1 {
        return docs.iter().enumerate().map(|(i, d)| f(i, d)).collect();
    }
    let mut out: Vec<Option<Result<T>>> = (0..docs.len()).map(|_| None).collect();
    let chunk = docs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        for (w, slot_chunk) in out.chunks_mut(chunk).enumerate() {
            let f = &f;
            scope.spawn(move || {
                for (off, slot) in slot_chunk.iter_mut().enumerate() {
                    let i = w * chunk + off;
                    *slot = Some(f(i, &docs[i]));
                }
            });
        }
    });
    out.into_iter().map(|r| r.expect("worker filled slot")).collect()
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match &cli.cmd {
        Cmd::Synth {
            out,
            docs,
            vocab,
            mean_entities,
            recurrence,
            style,
        } => {
            let spec = SynthSpec {
                num_docs: *docs,
                vocab_size: *vocab,
                mean_entities: *mean_entities,
                recurrence: *recurrence,
                style: match style {
                    StyleArg::Mixed => SynthStyle::Mixed,
                    StyleArg::Recency => SynthStyle::Recency,
                },
            };
            let generated = corpus::synth_corpus(&spec, cfg.seed)?;
            corpus::write_documents(out, &generated)?;
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": "synth",
                    "documents": generated.len(),
                    "seed": cfg.seed,
                }),
                None,
            )
        }
        Cmd::Train {
            train: train_path,
            dev,
            out,
            log,
        } => {
            let train_raw = load_corpus(train_path)?;
            let dev_raw = match dev {
                Some(p) => load_corpus(p)?,
                None => train_raw.clone(),
            };
            let vocab = Vocabulary::build(&train_raw, cfg.min_count)?;
            let train_docs = encode_all(&train_raw, &vocab, cfg.l_max)?;
            let dev_docs = encode_all(&dev_raw, &vocab, cfg.l_max)?;
            let (params, logs) = train::train(&train_docs, &dev_docs, vocab.counts(), &cfg)?;
            model::save_checkpoint(out, &params, &vocab)?;
            let log_path = log
                .clone()
                .unwrap_or_else(|| out.with_extension("log.jsonl"));
            let mut file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
            for entry in &logs {
                serde_json::to_writer(&mut file, entry)
                    .map_err(|e| Error::Serde(e.to_string()))?;
                file.write_all(b"\n")?;
            }
            file.flush()?;
            let best = logs
                .iter()
                .map(|l| l.dev_perplexity)
                .fold(f64::INFINITY, f64::min);
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": "train",
                    "epochs_run": logs.len(),
                    "dev_perplexity": best,
                    "checkpoint": out.display().to_string(),
                    "seed": cfg.seed,
                }),
                None,
            )
        }
        Cmd::EvalLm {
            checkpoint,
            input,
            samples,
            report,
        } => {
            let (params, vocab) = model::load_checkpoint(checkpoint)?;
            let raw = load_corpus(input)?;
            let docs = encode_all(&raw, &vocab, params.config.l_max)?;
            let estimates = par_map(&docs, cli.workers, |i, doc| {
                let mut rng = ChaCha8Rng::seed_from_u64(doc_seed(cfg.seed, i));
                eval::doc_marginal_is(&params, &doc.id, &doc.tokens, *samples, &mut rng, false)
            })?;
            let total_lp: f64 = estimates.iter().map(|e| e.estimate).sum();
            let tokens: usize = docs.iter().map(|d| d.len()).sum();
            if tokens == 0 {
                return Err(Error::config("empty evaluation corpus"));
            }
            let ppl = (-total_lp / tokens as f64).exp();
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "metric": "perplexity_is",
                    "value": ppl,
                    "n": samples,
                    "seed": cfg.seed,
                    "documents": docs.len(),
                    "tokens": tokens,
                    "vocab_hash": vocab.hash(),
                }),
                report.as_deref(),
            )
        }
        Cmd::EvalEntity {
            checkpoint,
            input,
            min_sentences,
            max_predictions,
            report,
        } => {
            let (params, vocab) = model::load_checkpoint(checkpoint)?;
            let raw = load_corpus(input)?;
            let docs = encode_all(&raw, &vocab, params.config.l_max)?;
            let protocol = PredictionProtocol {
                min_sentences: *min_sentences,
                max_predictions: *max_predictions,
            };
            let model_stats = eval::entity_prediction(&params, &docs, protocol)?;
            let baseline = eval::always_new_baseline(&docs, protocol)?;
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "metric": "entity_prediction_accuracy",
                    "value": model_stats.accuracy(),
                    "correct": model_stats.correct,
                    "total": model_stats.total,
                    "always_new_baseline": baseline.accuracy(),
                    "seed": cfg.seed,
                    "vocab_hash": vocab.hash(),
                }),
                report.as_deref(),
            )
        }
        Cmd::Rerank {
            checkpoint,
            input,
            pairs,
            k,
            mode,
            alpha,
            beta,
            out,
        } => {
            let (params, vocab) = model::load_checkpoint(checkpoint)?;
            let raw = load_corpus(input)?;
            let docs = encode_all(&raw, &vocab, params.config.l_max)?;
            let mode = match mode {
                ModeArg::LmOnly => RerankMode::LmOnly,
                ModeArg::Combined => RerankMode::Combined {
                    alpha: *alpha,
                    beta: *beta,
                },
            };
            let text = std::fs::read_to_string(pairs)?;
            let scored = rerank::read_pair_scores(&text)?;
            let mut file = std::io::BufWriter::new(std::fs::File::create(out)?);
            for ps in &scored {
                let doc = docs
                    .iter()
                    .find(|d| d.id == ps.doc_id)
                    .ok_or_else(|| Error::Ingestion {
                        doc: ps.doc_id.clone(),
                        msg: "pair scores reference a document not in the corpus".to_string(),
                    })?;
                // drop the EOD token: pair-score spans index the raw words
                let words = &doc.tokens[..doc.tokens.len() - 1];
                let kb = rerank::kbest(ps, *k)?;
                let order = rerank::rerank(&params, words, ps, &kb, mode)?;
                let best = &kb.candidates[order[0].candidate].0;
                let spans: Vec<_> = best
                    .assignment()
                    .iter()
                    .zip(&ps.mentions)
                    .map(|(c, (s, e))| serde_json::json!({"chain": c, "start": s, "end": e}))
                    .collect();
                let record = serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "doc": ps.doc_id,
                    "best_candidate": order[0].candidate,
                    "mentions": spans,
                    "ranking": order.iter().map(|e| serde_json::json!({
                        "candidate": e.candidate,
                        "log_p": e.log_p,
                        "base_score": e.base_score,
                    })).collect::<Vec<_>>(),
                });
                serde_json::to_writer(&mut file, &record)
                    .map_err(|e| Error::Serde(e.to_string()))?;
                file.write_all(b"\n")?;
            }
            file.flush()?;
            Ok(())
        }
        Cmd::Sample {
            checkpoint,
            num,
            max_len,
            out,
        } => {
            let (params, vocab) = model::load_checkpoint(checkpoint)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut generated = Vec::with_capacity(*num);
            for i in 0..*num {
                let (tokens, anns) = model::sample_document(&params, *max_len, &mut rng)?;
                let words: Vec<String> = tokens
                    .iter()
                    .map(|&t| vocab.word(t).unwrap_or(corpus::UNK_TOKEN).to_string())
                    .collect();
                let mentions = entitynlm::entity_state::annotations_to_spans(&anns)
                    .into_iter()
                    .map(|(e, s, en)| Mention {
                        entity: format!("e{e}"),
                        sentence: 0,
                        start: s,
                        end: en,
                    })
                    .collect();
                generated.push(RawDocument {
                    id: format!("sample-{i:04}"),
                    sentences: vec![words],
                    mentions,
                });
            }
            corpus::write_documents(out, &generated)?;
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": "sample",
                    "documents": num,
                    "seed": cfg.seed,
                }),
                None,
            )
        }
        Cmd::Inspect { checkpoint } => {
            let (params, vocab) = model::load_checkpoint(checkpoint)?;
            let mut named = Vec::new();
            params.visit(&mut named);
            let param_count: usize = named.iter().map(|(_, t)| t.data().len()).sum();
            emit(
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "command": "inspect",
                    "vocab_size": vocab.len(),
                    "vocab_hash": vocab.hash(),
                    "parameters": param_count,
                    "config": params.config,
                }),
                None,
            )
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Ingestion { .. } => 3,
        Error::Numerical(_) => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
