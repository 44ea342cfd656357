//! Training: maximize the joint log-probability over a corpus with
//! per-document AdaGrad/Adam steps, gradient clipping, dropout, and early
//! stopping on annotated-dev joint perplexity.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedDocument;
use crate::error::{Error, Result};
use crate::model::{
    self, doc_log_prob, dropout_mask, run_words, Config, ModelParams, NoiseSource,
};
use crate::tensor::{Engine, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Adagrad => 0.1,
            OptimizerKind::Adam => 0.001,
        }
    }
}

/// Full training configuration; unknown keys in config files are rejected.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    /// 0.0 selects the optimizer's default learning rate.
    pub lr: f64,
    pub dropout: f64,
    pub d_x: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub num_classes: usize,
    pub l_max: usize,
    pub sigma: f64,
    pub entity_blind: bool,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub min_count: u64,
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            optimizer: OptimizerKind::Adagrad,
            lr: 0.0,
            dropout: 0.2,
            d_x: 32,
            d_h: 32,
            d_e: 32,
            num_classes: 0,
            l_max: crate::entity_state::L_MAX_DEFAULT,
            sigma: 0.01,
            entity_blind: false,
            epochs: 10,
            seed: 0,
            patience: 3,
            min_count: 2,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0, 1)"));
        }
        if self.lr < 0.0 || self.clip_norm <= 0.0 {
            return Err(Error::config(
                "learning rate must be ≥ 0 and clip_norm positive",
            ));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be ≥ 1"));
        }
        Ok(())
    }

    pub fn learning_rate(&self) -> f64 {
        if self.lr > 0.0 {
            self.lr
        } else {
            self.optimizer.default_lr()
        }
    }

    pub fn model_config(&self) -> Config {
        Config {
            d_x: self.d_x,
            d_h: self.d_h,
            d_e: self.d_e,
            l_max: self.l_max,
            num_classes: self.num_classes,
            sigma: self.sigma,
            entity_blind: self.entity_blind,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies a `key=value` override on top of the serialized form;
    /// unknown keys and ill-typed values are configuration errors.
    pub fn with_override(&self, key: &str, value: &str) -> Result<TrainConfig> {
        self.with_overrides(&[(key, value)])
    }

    /// Applies several overrides together, validating only the final
    /// configuration (so interdependent keys like the dimensions can all
    /// change in one invocation).
    pub fn with_overrides(&self, pairs: &[(&str, &str)]) -> Result<TrainConfig> {
        let mut table: toml::Table = toml::Table::try_from(self.clone())
            .map_err(|e| Error::config(e.to_string()))?;
        for (key, value) in pairs {
            let parsed: toml::Value = match format!("v = {value}").parse::<toml::Table>() {
                Ok(mut t) => t.remove("v").unwrap(),
                Err(_) => toml::Value::String(value.to_string()),
            };
            table.insert(key.to_string(), parsed);
        }
        let cfg: TrainConfig = table
            .try_into()
            .map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-parameter optimizer accumulators, aligned with `ModelParams::visit`
/// order.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adagrad {
        lr: f64,
        accum: Vec<Tensor>,
    },
    Adam {
        lr: f64,
        m: Vec<Tensor>,
        v: Vec<Tensor>,
        t: u64,
    },
}

const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &ModelParams) -> Optimizer {
        let mut named = Vec::new();
        params.visit(&mut named);
        let zeros: Vec<Tensor> = named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        match kind {
            OptimizerKind::Adagrad => Optimizer::Adagrad { lr, accum: zeros },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                m: zeros.clone(),
                v: zeros,
                t: 0,
            },
        }
    }

    /// One descent step on the loss; `grads` are loss gradients aligned with
    /// the visit order.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Tensor]) -> Result<()> {
        let mut named = Vec::new();
        params.visit_mut(&mut named);
        if named.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                named.len()
            )));
        }
        match self {
            Optimizer::Adagrad { lr, accum } => {
                for (i, (_, t)) in named.into_iter().enumerate() {
                    let a = accum[i].data_mut();
                    let p = t.data_mut();
                    for (j, &g) in grads[i].data().iter().enumerate() {
                        a[j] += g * g;
                        p[j] -= *lr * g / (a[j].sqrt() + EPS);
                    }
                }
            }
            Optimizer::Adam { lr, m, v, t } => {
                *t += 1;
                let (b1, b2): (f64, f64) = (0.9, 0.999);
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                for (i, (_, p)) in named.into_iter().enumerate() {
                    let mi = m[i].data_mut();
                    let vi = v[i].data_mut();
                    let pd = p.data_mut();
                    for (j, &g) in grads[i].data().iter().enumerate() {
                        mi[j] = b1 * mi[j] + (1.0 - b1) * g;
                        vi[j] = b2 * vi[j] + (1.0 - b2) * g * g;
                        let mhat = mi[j] / bc1;
                        let vhat = vi[j] / bc2;
                        pd[j] -= *lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their global L2 norm is at most `clip`.
pub fn clip_gradients(grads: &mut [Tensor], clip: f64) -> f64 {
    let norm: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

/// Loss gradients (−log P) for one document, in visit order.
pub fn doc_gradients(
    params: &ModelParams,
    doc: &EncodedDocument,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Tensor>, f64)> {
    let mut tape = Tape::new();
    let view = params.bind(&mut tape);
    let (input_masks, h_masks) = if cfg.dropout > 0.0 {
        let im: Vec<Tensor> = (0..doc.len())
            .map(|_| dropout_mask(rng, cfg.d_x, cfg.dropout))
            .collect();
        let hm: Vec<Tensor> = (0..doc.len())
            .map(|_| dropout_mask(rng, cfg.d_h, cfg.dropout))
            .collect();
        (Some(im), Some(hm))
    } else {
        (None, None)
    };
    let hs = run_words(
        &mut tape,
        &view,
        cfg.d_h,
        &doc.tokens,
        input_masks.as_deref(),
    )?;
    let mut noise = NoiseSource::sample(rng);
    let (total, _) = doc_log_prob(
        &mut tape,
        params,
        &view,
        &doc.tokens,
        &doc.annotations,
        &hs,
        &mut noise,
        h_masks.as_deref(),
    )?;
    let logp = tape.scalar_value(&total);
    if !logp.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite objective on document {}",
            doc.id
        )));
    }
    let grads = tape.backward(total)?;
    let mut named = Vec::new();
    params.visit(&mut named);
    let nodes = model::param_nodes(&view);
    let out = named
        .iter()
        .zip(&nodes)
        .map(|((name, t), (nname, node))| {
            debug_assert_eq!(name, nname);
            let mut g = grads.get_or_zeros(*node, t.shape());
            g.scale_assign(-1.0); // descend on −log P
            g
        })
        .collect();
    Ok((out, logp))
}

/// One pass over the corpus: shuffled per-document updates. Returns the mean
/// per-token joint log-probability observed during the pass.
pub fn train_epoch(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    docs: &[EncodedDocument],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(Error::config("empty training corpus"));
    }
    let mut order: Vec<usize> = (0..docs.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut total_lp = 0.0;
    let mut total_tokens = 0usize;
    for &i in &order {
        let doc = &docs[i];
        if doc.is_empty() {
            continue;
        }
        let (mut grads, logp) = doc_gradients(params, doc, cfg, rng)?;
        clip_gradients(&mut grads, cfg.clip_norm);
        opt.step(params, &grads)?;
        total_lp += logp;
        total_tokens += doc.len();
    }
    if total_tokens == 0 {
        return Err(Error::config("training corpus has no tokens"));
    }
    Ok(total_lp / total_tokens as f64)
}

/// Annotated-corpus joint perplexity 2^(−1/T Σ log₂ P); deterministic
/// (σ=0 noise, no dropout), suitable for model selection.
pub fn joint_perplexity(params: &ModelParams, docs: &[EncodedDocument]) -> Result<f64> {
    let mut total_lp = 0.0;
    let mut total_tokens = 0usize;
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        let mut noise = NoiseSource::deterministic();
        let (lp, _) =
            model::forward_doc_log_prob(params, &doc.tokens, &doc.annotations, &mut noise)?;
        total_lp += lp;
        total_tokens += doc.len();
    }
    if total_tokens == 0 {
        return Err(Error::config("empty evaluation corpus"));
    }
    Ok((-total_lp / total_tokens as f64).exp())
}

/// Picks the checkpoint minimizing annotated-dev joint perplexity; ties go
/// to the earliest candidate.
pub fn select_model<'a>(
    dev: &[EncodedDocument],
    candidates: &'a [ModelParams],
) -> Result<(usize, &'a ModelParams)> {
    if candidates.is_empty() {
        return Err(Error::config("no candidate checkpoints"));
    }
    let mut best = 0usize;
    let mut best_ppl = f64::INFINITY;
    for (i, params) in candidates.iter().enumerate() {
        let ppl = joint_perplexity(params, dev)?;
        if ppl < best_ppl {
            best_ppl = ppl;
            best = i;
        }
    }
    Ok((best, &candidates[best]))
}

/// One line of the epoch progress log.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_log_prob: f64,
    pub dev_perplexity: f64,
    pub seconds: f64,
}

/// Full training loop with early stopping (patience epochs without a dev
/// improvement); returns the best parameters by dev joint perplexity.
pub fn train(
    train_docs: &[EncodedDocument],
    dev_docs: &[EncodedDocument],
    vocab_counts: &[u64],
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochLog>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ModelParams::new(&cfg.model_config(), vocab_counts, &mut rng)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate(), &params);
    let mut best = params.clone();
    let mut best_ppl = f64::INFINITY;
    let mut since_best = 0usize;
    let mut logs = Vec::new();
    for epoch in 0..cfg.epochs {
        let start = std::time::Instant::now();
        let mean = train_epoch(&mut params, &mut opt, train_docs, cfg, &mut rng)?;
        let ppl = joint_perplexity(&params, dev_docs)?;
        logs.push(EpochLog {
            epoch,
            mean_log_prob: mean,
            dev_perplexity: ppl,
            seconds: start.elapsed().as_secs_f64(),
        });
        if ppl < best_ppl {
            best_ppl = ppl;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, SynthSpec, Vocabulary};
    use crate::entity_state::EntityAnnotation;

    fn toy_corpus(seed: u64, n: usize) -> (Vec<EncodedDocument>, Vocabulary) {
        let spec = SynthSpec {
            num_docs: n,
            vocab_size: 60,
            mean_entities: 2.0,
            recurrence: 0.5,
            style: corpus::SynthStyle::Mixed,
        };
        let docs: Vec<_> = corpus::synth_corpus(&spec, seed)
            .unwrap()
            .iter()
            .map(|d| corpus::preprocess(d).unwrap())
            .collect();
        let vocab = Vocabulary::build(&docs, 1).unwrap();
        let encoded = docs
            .iter()
            .map(|d| corpus::encode(d, &vocab, 25).unwrap().with_eod())
            .collect();
        (encoded, vocab)
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            d_x: 8,
            d_h: 8,
            d_e: 8,
            dropout: 0.0,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn adagrad_step_sizes_match_formula() {
        let cfg = toy_cfg();
        let (_, vocab) = toy_corpus(1, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut params =
            ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, 0.1, &params);
        let mut named = Vec::new();
        params.visit(&mut named);
        let mut grads: Vec<Tensor> = named.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        grads[0].data_mut()[0] = 0.5; // single nonzero coordinate
        let before = params.embed.data()[0];
        opt.step(&mut params, &grads).unwrap();
        let d1 = before - params.embed.data()[0];
        assert!((d1 - 0.1 * 0.5 / 0.5).abs() < 1e-6, "first step {d1}");
        let mid = params.embed.data()[0];
        opt.step(&mut params, &grads).unwrap();
        let d2 = mid - params.embed.data()[0];
        let expect = 0.1 * 0.5 / (2.0f64 * 0.25).sqrt();
        assert!((d2 - expect).abs() < 1e-6, "second step {d2} vs {expect}");
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let (docs, vocab) = toy_corpus(2, 3);
        let cfg = TrainConfig {
            lr: 1e-300, // effectively zero; lr = 0.0 selects the default
            ..toy_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params =
            ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let snapshot = serde_json::to_string(&params).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, 0.0, &params);
        train_epoch(&mut params, &mut opt, &docs, &cfg, &mut rng).unwrap();
        assert_eq!(serde_json::to_string(&params).unwrap(), snapshot);
    }

    #[test]
    fn overfits_single_document() {
        let (docs, vocab) = toy_corpus(4, 1);
        let doc = docs[0].clone();
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params =
            ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate(), &params);
        let mut last = f64::NEG_INFINITY;
        for epoch in 0..12 {
            let mean = train_epoch(
                &mut params,
                &mut opt,
                std::slice::from_ref(&doc),
                &cfg,
                &mut rng,
            )
            .unwrap();
            if epoch >= 2 {
                assert!(mean > last, "epoch {epoch}: {mean} ≤ {last}");
            }
            last = mean;
        }
    }

    #[test]
    fn single_step_decreases_loss() {
        let (docs, vocab) = toy_corpus(6, 1);
        let cfg = TrainConfig {
            lr: 1e-3,
            ..toy_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params =
            ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let mut noise = NoiseSource::deterministic();
        let (before, _) = model::forward_doc_log_prob(
            &params,
            &docs[0].tokens,
            &docs[0].annotations,
            &mut noise,
        )
        .unwrap();
        let (mut grads, _) = doc_gradients(&params, &docs[0], &cfg, &mut rng).unwrap();
        clip_gradients(&mut grads, cfg.clip_norm);
        let mut opt = Optimizer::new(OptimizerKind::Adagrad, cfg.lr, &params);
        opt.step(&mut params, &grads).unwrap();
        let mut noise = NoiseSource::deterministic();
        let (after, _) = model::forward_doc_log_prob(
            &params,
            &docs[0].tokens,
            &docs[0].annotations,
            &mut noise,
        )
        .unwrap();
        assert!(after > before, "{after} ≤ {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let (docs, vocab) = toy_corpus(8, 4);
        let cfg = toy_cfg();
        let (a, _) = train(&docs, &docs, vocab.counts(), &cfg).unwrap();
        let (b, _) = train(&docs, &docs, vocab.counts(), &cfg).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn dev_evaluation_deterministic() {
        let (docs, vocab) = toy_corpus(9, 3);
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let params = ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let a = joint_perplexity(&params, &docs).unwrap();
        let b = joint_perplexity(&params, &docs).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn joint_perplexity_formula_hand_checked() {
        let (_, vocab) = toy_corpus(11, 2);
        let cfg = toy_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let params = ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let doc = EncodedDocument {
            id: "fixture".to_string(),
            tokens: vec![3, 4],
            annotations: vec![EntityAnnotation::outside(); 2],
            sentence_starts: vec![0],
        };
        let mut noise = NoiseSource::deterministic();
        let (lp, _) =
            model::forward_doc_log_prob(&params, &doc.tokens, &doc.annotations, &mut noise)
                .unwrap();
        let expected = 2.0f64.powf(-(lp / std::f64::consts::LN_2) / 2.0);
        let got = joint_perplexity(&params, &[doc]).unwrap();
        assert!((got - expected).abs() / expected < 1e-12);
    }

    #[test]
    fn select_model_prefers_better_and_breaks_ties_first() {
        let (docs, vocab) = toy_corpus(13, 3);
        let cfg = toy_cfg();
        let (trained, _) = train(&docs, &docs, vocab.counts(), &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fresh = ModelParams::new(&cfg.model_config(), vocab.counts(), &mut rng).unwrap();
        let (idx, _) = select_model(&docs, &[fresh.clone(), trained.clone()]).unwrap();
        assert_eq!(idx, 1);
        let (idx, _) = select_model(&docs, &[trained.clone(), trained]).unwrap();
        assert_eq!(idx, 0, "ties break to the first candidate");
        assert!(select_model(&docs, &[]).is_err());
        assert!(select_model(&[], &[fresh]).is_err());
    }

    #[test]
    fn config_parsing_and_overrides() {
        let cfg = TrainConfig::from_toml_str("optimizer = \"adam\"\nd_x = 48\nd_h = 48\nd_e = 48\n").unwrap();
        assert_eq!(cfg.optimizer, OptimizerKind::Adam);
        assert_eq!(cfg.d_x, 48);
        assert!((cfg.learning_rate() - 0.001).abs() < 1e-12);
        assert!(TrainConfig::from_toml_str("nonsense = 1\n").is_err());
        let cfg = cfg.with_override("dropout", "0.5").unwrap();
        assert!((cfg.dropout - 0.5).abs() < 1e-12);
        assert!(cfg.with_override("bogus_key", "1").is_err());
        assert!(cfg.with_override("dropout", "2.0").is_err());
    }
}
