//! Evaluation: importance-sampled marginal perplexity, the brute-force
//! enumeration oracle it is tested against, the entity cloze-prediction
//! task, and the coreference partition scorers (MUC, B³, CoNLL-2).

use std::collections::BTreeSet;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::EncodedDocument;
use crate::entity_state::{EntityAnnotation, StateMachine};
use crate::error::{Error, Result};
use crate::model::{
    forward_doc_log_prob, proposal_sample, run_words, ModelParams, NoiseSource, Pass,
};
use crate::tensor::Forward;

/// Importance-sampling summary for one document.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ImportanceEstimate {
    pub n: usize,
    pub log_weights: Vec<f64>,
    /// log P̂(X) = log-mean-exp of the weights.
    pub estimate: f64,
    /// Effective sample size (Σw)²/Σw², in (0, n].
    pub ess: f64,
}

/// Stable log(Σ exp(v)) with max shift; −∞ when every term is −∞.
pub fn log_sum_exp(vals: &[f64]) -> f64 {
    let m = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return f64::NEG_INFINITY;
    }
    m + vals.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// log P̂(X) for one document from N proposal draws. With `sigma_zero`,
/// new-entity embeddings are fixed to normalize(r⃗₁) in both the proposal and
/// the joint (the oracle convention); otherwise Gaussian draws are recorded
/// during proposal sampling and replayed when scoring the joint.
pub fn doc_marginal_is(
    params: &ModelParams,
    doc_id: &str,
    tokens: &[usize],
    n: usize,
    rng: &mut ChaCha8Rng,
    sigma_zero: bool,
) -> Result<ImportanceEstimate> {
    if n == 0 {
        return Err(Error::config("importance sampling needs N ≥ 1"));
    }
    let mut eng = Forward;
    let view = params.bind(&mut eng);
    if params.config.entity_blind {
        // the ablation has no structure: the marginal is exact
        let anns = vec![EntityAnnotation::outside(); tokens.len()];
        let mut noise = NoiseSource::deterministic();
        let (lp, _) = forward_doc_log_prob(params, tokens, &anns, &mut noise)?;
        return Ok(ImportanceEstimate {
            n,
            log_weights: vec![lp; n],
            estimate: lp,
            ess: n as f64,
        });
    }
    // hidden states depend only on the words; share them across all draws
    let hs = run_words(&mut eng, &view, params.config.d_h, tokens, None)?;
    let mut log_weights = Vec::with_capacity(n);
    for _ in 0..n {
        let (anns, log_q, draws) = if sigma_zero {
            let mut noise = NoiseSource::deterministic();
            let (anns, log_q) = proposal_sample(params, &view, tokens, &hs, &mut noise, rng)?;
            (anns, log_q, Vec::new())
        } else {
            let mut noise_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let mut noise = NoiseSource::sample(&mut noise_rng);
            let (anns, log_q) = proposal_sample(params, &view, tokens, &hs, &mut noise, rng)?;
            let draws = noise.into_recorded();
            (anns, log_q, draws)
        };
        let mut joint_noise = if sigma_zero {
            NoiseSource::deterministic()
        } else {
            NoiseSource::replay(&draws)
        };
        let (log_p, _) = forward_doc_log_prob(params, tokens, &anns, &mut joint_noise)?;
        log_weights.push(log_p - log_q);
    }
    let estimate = log_sum_exp(&log_weights) - (n as f64).ln();
    if !estimate.is_finite() {
        return Err(Error::Numerical(format!(
            "all importance weights vanished on document {doc_id}"
        )));
    }
    let ess = (2.0 * log_sum_exp(&log_weights)
        - log_sum_exp(&log_weights.iter().map(|w| 2.0 * w).collect::<Vec<_>>()))
    .exp();
    Ok(ImportanceEstimate {
        n,
        log_weights,
        estimate,
        ess,
    })
}

/// Corpus per-token perplexity 2^(−Σ log₂ P̂(X) / T) via importance sampling.
pub fn perplexity_is(
    params: &ModelParams,
    docs: &[EncodedDocument],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<ImportanceEstimate>)> {
    let mut total_lp = 0.0;
    let mut total_tokens = 0usize;
    let mut estimates = Vec::with_capacity(docs.len());
    for doc in docs {
        if doc.is_empty() {
            continue;
        }
        let est = doc_marginal_is(params, &doc.id, &doc.tokens, n, rng, false)?;
        total_lp += est.estimate;
        total_tokens += doc.len();
        estimates.push(est);
    }
    if total_tokens == 0 {
        return Err(Error::config("empty evaluation corpus"));
    }
    Ok(((-total_lp / total_tokens as f64).exp(), estimates))
}

/// All trajectories the generative process can assign to `len` observed
/// tokens, including ones whose final mention extends past the document end.
pub fn enumerate_trajectories(
    len: usize,
    l_max: usize,
    max_entities: usize,
) -> Vec<Vec<EntityAnnotation>> {
    fn go(
        sm: &StateMachine,
        remaining: usize,
        l_max: usize,
        max_entities: usize,
        prefix: &mut Vec<EntityAnnotation>,
        out: &mut Vec<Vec<EntityAnnotation>>,
    ) {
        if remaining == 0 {
            out.push(prefix.clone());
            return;
        }
        let mut step = |ann: EntityAnnotation| {
            let mut next = sm.clone();
            next.advance(ann).expect("enumerated step valid");
            prefix.push(ann);
            go(&next, remaining - 1, l_max, max_entities, prefix, out);
            prefix.pop();
        };
        if let Some(forced) = sm.forced() {
            step(forced);
            return;
        }
        step(EntityAnnotation::outside());
        let known = sm.registry().count();
        let top = if known < max_entities { known + 1 } else { known };
        for e in 1..=top {
            for l in 1..=l_max {
                step(EntityAnnotation::mention(e, l));
            }
        }
    }
    let mut out = Vec::new();
    go(
        &StateMachine::new(l_max),
        len,
        l_max,
        max_entities,
        &mut Vec::new(),
        &mut out,
    );
    out
}

/// Exhaustive log P(X) = log Σ_{R,E,L} P(X,R,E,L) under the σ=0 convention.
/// Guarded to micro scale: len ≤ 8, ℓ_max ≤ 2, max_entities ≤ 3.
pub fn exact_marginal(
    params: &ModelParams,
    tokens: &[usize],
    max_entities: usize,
) -> Result<f64> {
    let l_max = params.config.l_max;
    if tokens.len() > 8 || l_max > 2 || max_entities > 3 || max_entities == 0 {
        return Err(Error::contract(format!(
            "exact marginal limited to ≤8 tokens, ℓ_max ≤ 2, 1..=3 entities; got {} / {} / {}",
            tokens.len(),
            l_max,
            max_entities
        )));
    }
    let mut log_terms = Vec::new();
    for anns in enumerate_trajectories(tokens.len(), l_max, max_entities) {
        let mut noise = NoiseSource::deterministic();
        let (lp, _) = forward_doc_log_prob(params, tokens, &anns, &mut noise)?;
        log_terms.push(lp);
    }
    Ok(log_sum_exp(&log_terms))
}

/// §5.3 cloze protocol: predict at gold mention starts once `min_sentences`
/// full sentences have passed, up to `max_predictions` per document.
#[derive(Clone, Copy, Debug)]
pub struct PredictionProtocol {
    pub min_sentences: usize,
    pub max_predictions: usize,
}

impl Default for PredictionProtocol {
    fn default() -> PredictionProtocol {
        PredictionProtocol {
            min_sentences: 3,
            max_predictions: 30,
        }
    }
}

impl PredictionProtocol {
    /// First eligible token offset in a document, if any.
    fn threshold(&self, doc: &EncodedDocument) -> Option<usize> {
        if self.min_sentences == 0 {
            Some(0)
        } else {
            doc.sentence_starts.get(self.min_sentences).copied()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct PredictionStats {
    pub correct: usize,
    pub total: usize,
}

impl PredictionStats {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Teacher-forced entity prediction: R and L are given; at each eligible
/// gold mention start the model predicts argmax of dist_e over the
/// admissible candidates (new-entity candidate included). Micro-averaged.
pub fn entity_prediction(
    params: &ModelParams,
    docs: &[EncodedDocument],
    protocol: PredictionProtocol,
) -> Result<PredictionStats> {
    let mut stats = PredictionStats::default();
    let mut eng = Forward;
    let view = params.bind(&mut eng);
    for doc in docs {
        let threshold = match protocol.threshold(doc) {
            Some(t) => t,
            None => continue,
        };
        let hs = run_words(&mut eng, &view, params.config.d_h, &doc.tokens, None)?;
        let mut pass: Pass<Forward> = Pass::new(&mut eng, &view, params.config.l_max)?;
        let mut made = 0usize;
        for (t, ann) in doc.annotations.iter().enumerate() {
            if pass.sm().at_choice_point() && ann.r {
                if t >= threshold && made < protocol.max_predictions {
                    let mut noise = NoiseSource::deterministic();
                    let (cands, le) =
                        pass.entity_log_probs(&mut eng, params, &view, &hs[t], &mut noise)?;
                    let best = le
                        .data()
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1))
                        .map(|(i, _)| cands[i])
                        .expect("non-empty candidate set");
                    if best == ann.e {
                        stats.correct += 1;
                    }
                    stats.total += 1;
                    made += 1;
                }
            }
            pass.commit(&mut eng, &view, *ann, &hs[t + 1])?;
        }
    }
    Ok(stats)
}

/// The §5.3 baseline that predicts "new entity" at every eligible mention
/// start; correct exactly at first mentions.
pub fn always_new_baseline(
    docs: &[EncodedDocument],
    protocol: PredictionProtocol,
) -> Result<PredictionStats> {
    let mut stats = PredictionStats::default();
    for doc in docs {
        let threshold = match protocol.threshold(doc) {
            Some(t) => t,
            None => continue,
        };
        let mut sm = StateMachine::new(crate::entity_state::L_MAX_DEFAULT.max(
            doc.annotations.iter().map(|a| a.l).max().unwrap_or(1),
        ));
        let mut made = 0usize;
        for (t, ann) in doc.annotations.iter().enumerate() {
            if sm.at_choice_point() && ann.r && t >= threshold && made < protocol.max_predictions {
                if ann.e == sm.registry().count() + 1 {
                    stats.correct += 1;
                }
                stats.total += 1;
                made += 1;
            }
            sm.advance(*ann)?;
        }
    }
    Ok(stats)
}

/// A partition of a mention set into coreference clusters.
#[derive(Clone, Debug)]
pub struct CorefPartition {
    clusters: Vec<Vec<usize>>,
}

impl CorefPartition {
    pub fn new(clusters: Vec<Vec<usize>>) -> Result<CorefPartition> {
        let mut seen = BTreeSet::new();
        for c in &clusters {
            if c.is_empty() {
                return Err(Error::contract("empty cluster"));
            }
            for &m in c {
                if !seen.insert(m) {
                    return Err(Error::contract(format!("mention {m} in two clusters")));
                }
            }
        }
        Ok(CorefPartition { clusters })
    }

    /// Builds a partition from a cluster id per mention index.
    pub fn from_assignment(assign: &[usize]) -> CorefPartition {
        let mut by_id: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (m, &c) in assign.iter().enumerate() {
            by_id.entry(c).or_default().push(m);
        }
        CorefPartition {
            clusters: by_id.into_values().collect(),
        }
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    fn mentions(&self) -> BTreeSet<usize> {
        self.clusters.iter().flatten().copied().collect()
    }

    fn cluster_of(&self) -> std::collections::BTreeMap<usize, usize> {
        let mut map = Default::default();
        for (i, c) in self.clusters.iter().enumerate() {
            for &m in c {
                std::collections::BTreeMap::insert(&mut map, m, i);
            }
        }
        map
    }
}

fn check_same_mentions(gold: &CorefPartition, sys: &CorefPartition) -> Result<()> {
    if gold.mentions() != sys.mentions() {
        return Err(Error::contract(
            "gold and system partitions cover different mention sets",
        ));
    }
    Ok(())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Number of sys clusters a gold chain is split across.
fn partitions_of(chain: &[usize], sys: &CorefPartition) -> usize {
    let of = sys.cluster_of();
    chain
        .iter()
        .map(|m| of[m])
        .collect::<BTreeSet<_>>()
        .len()
}

/// Link-based MUC (precision, recall, F1).
pub fn muc_f1(gold: &CorefPartition, sys: &CorefPartition) -> Result<(f64, f64, f64)> {
    check_same_mentions(gold, sys)?;
    let half = |num: &CorefPartition, denom: &CorefPartition| {
        let mut hit = 0usize;
        let mut all = 0usize;
        for chain in &num.clusters {
            if chain.len() < 2 {
                continue;
            }
            hit += chain.len() - partitions_of(chain, denom);
            all += chain.len() - 1;
        }
        if all == 0 {
            1.0
        } else {
            hit as f64 / all as f64
        }
    };
    let r = half(gold, sys);
    let p = half(sys, gold);
    Ok((p, r, f1(p, r)))
}

/// Per-mention B³ (precision, recall, F1).
pub fn b_cubed_f1(gold: &CorefPartition, sys: &CorefPartition) -> Result<(f64, f64, f64)> {
    check_same_mentions(gold, sys)?;
    let half = |a: &CorefPartition, b: &CorefPartition| {
        let of_b = b.cluster_of();
        let mut total = 0.0;
        let mut count = 0usize;
        // the per-mention scores inside one a-cluster group by b-cluster:
        // Σ_m |A∩B_m|/|A| = Σ_B |A∩B|²/|A|, so accumulate integer
        // intersections and divide once per cluster for exactness
        for ac in &a.clusters {
            let aset: BTreeSet<usize> = ac.iter().copied().collect();
            let mut seen: BTreeSet<usize> = BTreeSet::new();
            let mut cluster_sum = 0u64;
            for &m in ac {
                let cb = of_b[&m];
                if seen.insert(cb) {
                    let inter =
                        b.clusters[cb].iter().filter(|x| aset.contains(x)).count() as u64;
                    cluster_sum += inter * inter;
                }
            }
            total += cluster_sum as f64 / ac.len() as f64;
            count += ac.len();
        }
        if count == 0 {
            1.0
        } else {
            total / count as f64
        }
    };
    let r = half(gold, sys);
    let p = half(sys, gold);
    Ok((p, r, f1(p, r)))
}

/// Mean of the MUC and B³ F1s; labeled "CoNLL-2" because CEAF_e is not
/// implemented.
pub fn conll_score(gold: &CorefPartition, sys: &CorefPartition) -> Result<f64> {
    let (_, _, muc) = muc_f1(gold, sys)?;
    let (_, _, b3) = b_cubed_f1(gold, sys)?;
    Ok((muc + b3) / 2.0)
}
