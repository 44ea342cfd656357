//! Coreference reranking: ingest pairwise antecedent scores from an external
//! system, build an approximate k-best list of antecedent trees, score each
//! candidate under the model, and emit the reranked order.

use std::collections::BTreeMap;

use crate::entity_state::{spans_to_annotations, EntityAnnotation};
use crate::error::{Error, Result};
use crate::eval::CorefPartition;
use crate::model::{forward_doc_log_prob, ModelParams, NoiseSource};

/// Pairwise antecedent scores for one document's mention list.
///
/// Mentions are ordered by position; every mention has an ε (no-antecedent)
/// score, and every pair (m_j, m_i) with i < j is scored.
#[derive(Clone, Debug, PartialEq)]
pub struct PairScores {
    pub doc_id: String,
    /// Inclusive token spans, in document order.
    pub mentions: Vec<(usize, usize)>,
    /// eps[j] = score(m_j, ε).
    pub eps: Vec<f64>,
    /// pairs[j][i] = score(m_j, m_i) for i < j.
    pub pairs: Vec<Vec<f64>>,
}

impl PairScores {
    pub fn validate(&self) -> Result<()> {
        let n = self.mentions.len();
        if self.eps.len() != n || self.pairs.len() != n {
            return Err(Error::contract(format!(
                "document {}: {} mentions but {} ε scores / {} pair rows",
                self.doc_id,
                n,
                self.eps.len(),
                self.pairs.len()
            )));
        }
        for (j, row) in self.pairs.iter().enumerate() {
            if row.len() != j {
                return Err(Error::contract(format!(
                    "document {}: mention {j} has {} antecedent scores, expected {j}",
                    self.doc_id,
                    row.len()
                )));
            }
        }
        for w in self.mentions.windows(2) {
            if w[1].0 < w[0].0 {
                return Err(Error::contract(format!(
                    "document {}: mentions out of order",
                    self.doc_id
                )));
            }
        }
        for &(s, e) in &self.mentions {
            if e < s {
                return Err(Error::contract(format!(
                    "document {}: empty mention span ({s}, {e})",
                    self.doc_id
                )));
            }
        }
        Ok(())
    }

    fn score(&self, j: usize, ante: Option<usize>) -> f64 {
        match ante {
            Some(i) => self.pairs[j][i],
            None => self.eps[j],
        }
    }
}

/// One antecedent choice per mention; an earlier mention or ε.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AntecedentTree {
    pub antecedent: Vec<Option<usize>>,
}

impl AntecedentTree {
    /// Cluster id per mention via transitive closure of the links,
    /// numbered by first appearance.
    pub fn assignment(&self) -> Vec<usize> {
        let n = self.antecedent.len();
        let mut cluster = vec![usize::MAX; n];
        let mut next = 0;
        for j in 0..n {
            cluster[j] = match self.antecedent[j] {
                Some(i) => cluster[i],
                None => {
                    let c = next;
                    next += 1;
                    c
                }
            };
        }
        cluster
    }

    pub fn partition(&self) -> CorefPartition {
        CorefPartition::from_assignment(&self.assignment())
    }

    pub fn base_score(&self, ps: &PairScores) -> f64 {
        self.antecedent
            .iter()
            .enumerate()
            .map(|(j, &a)| ps.score(j, a))
            .sum()
    }
}

/// Candidate order for mention j, most preferred first: closest antecedent
/// down to the farthest, then ε. Ties in score resolve to the earlier entry.
fn candidates(j: usize) -> impl Iterator<Item = Option<usize>> {
    (0..j).rev().map(Some).chain(std::iter::once(None))
}

/// Per-mention argmax decoding of the pairwise scores.
pub fn greedy_decode(ps: &PairScores) -> Result<AntecedentTree> {
    ps.validate()?;
    let antecedent = (0..ps.mentions.len())
        .map(|j| {
            let mut best = None;
            let mut best_score = f64::NEG_INFINITY;
            for cand in candidates(j) {
                let s = ps.score(j, cand);
                if s > best_score {
                    best_score = s;
                    best = cand;
                }
            }
            best
        })
        .collect();
    Ok(AntecedentTree { antecedent })
}

/// An ordered k-best list of (tree, base score) candidates; non-padding
/// entries induce pairwise-distinct partitions, and short lists are padded
/// by replicating the last distinct entry.
#[derive(Clone, Debug)]
pub struct KBestList {
    pub candidates: Vec<(AntecedentTree, f64)>,
    /// Number of distinct (non-padding) entries at the front.
    pub distinct: usize,
}

/// Approximate k-best antecedent trees: the greedy tree first, then
/// single-antecedent swaps against the ORIGINAL greedy tree, scanned in
/// ascending order of score gap to the greedy choice. Gap ties break by
/// (mention index, antecedent index) ascending, with ε after all indices.
pub fn kbest(ps: &PairScores, k: usize) -> Result<KBestList> {
    if k < 1 {
        return Err(Error::config("k must be ≥ 1"));
    }
    let greedy = greedy_decode(ps)?;
    let mut swaps: Vec<(f64, usize, Option<usize>)> = Vec::new();
    for j in 0..ps.mentions.len() {
        let best = ps.score(j, greedy.antecedent[j]);
        for cand in candidates(j) {
            if cand == greedy.antecedent[j] {
                continue;
            }
            swaps.push((best - ps.score(j, cand), j, cand));
        }
    }
    swaps.sort_by(|a, b| {
        a.0.total_cmp(&b.0)
            .then(a.1.cmp(&b.1))
            .then(match (a.2, b.2) {
                (Some(x), Some(y)) => x.cmp(&y),
                (Some(_), None) => std::cmp::Ordering::Less,
                (None, Some(_)) => std::cmp::Ordering::Greater,
                (None, None) => std::cmp::Ordering::Equal,
            })
    });
    let mut seen = vec![greedy.assignment()];
    let base = greedy.base_score(ps);
    let mut out = vec![(greedy.clone(), base)];
    for (_, j, cand) in swaps {
        if out.len() >= k {
            break;
        }
        let mut tree = greedy.clone();
        tree.antecedent[j] = cand;
        let assign = tree.assignment();
        if seen.contains(&assign) {
            continue;
        }
        let score = tree.base_score(ps);
        seen.push(assign);
        out.push((tree, score));
    }
    let distinct = out.len();
    while out.len() < k {
        out.push(out[distinct - 1].clone());
    }
    Ok(KBestList {
        candidates: out,
        distinct,
    })
}

/// Reranking objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RerankMode {
    LmOnly,
    /// α·log P + β·base score.
    Combined { alpha: f64, beta: f64 },
}

/// One candidate's outcome in the reranked order.
#[derive(Clone, Debug)]
pub struct RankEntry {
    /// Position in the incoming k-best list.
    pub candidate: usize,
    /// None when the candidate could not be encoded.
    pub log_p: Option<f64>,
    pub base_score: f64,
    pub objective: f64,
}

/// Converts a candidate tree to the per-token (R, E, L) encoding used in
/// training: chain ids by first appearance, singleton chains dropped.
pub fn tree_to_annotations(
    tree: &AntecedentTree,
    mentions: &[(usize, usize)],
    doc_len: usize,
    l_max: usize,
) -> Result<Vec<EntityAnnotation>> {
    let assign = tree.assignment();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for &c in &assign {
        *sizes.entry(c).or_insert(0) += 1;
    }
    let mut renumber: BTreeMap<usize, usize> = BTreeMap::new();
    let mut spans = Vec::new();
    for (m, &(s, e)) in mentions.iter().enumerate() {
        if sizes[&assign[m]] < 2 {
            continue; // singleton chains are dropped, as in training data
        }
        let next = renumber.len() + 1;
        let id = *renumber.entry(assign[m]).or_insert(next);
        spans.push((id, s, e));
    }
    spans_to_annotations(doc_len, &spans, l_max)
}

/// Scores every candidate and returns the reranked order, best first.
/// Candidates that fail to encode sort last, in original order.
pub fn rerank(
    params: &ModelParams,
    tokens: &[usize],
    ps: &PairScores,
    kb: &KBestList,
    mode: RerankMode,
) -> Result<Vec<RankEntry>> {
    let mut entries = Vec::with_capacity(kb.candidates.len());
    for (idx, (tree, base)) in kb.candidates.iter().enumerate() {
        let log_p = tree_to_annotations(tree, &ps.mentions, tokens.len(), params.config.l_max)
            .and_then(|anns| {
                // σ=0 convention keeps candidate scores deterministic
                let mut noise = NoiseSource::deterministic();
                forward_doc_log_prob(params, tokens, &anns, &mut noise).map(|(lp, _)| lp)
            })
            .ok();
        let objective = match (mode, log_p) {
            (_, None) => f64::NEG_INFINITY,
            (RerankMode::LmOnly, Some(lp)) => lp,
            (RerankMode::Combined { alpha, beta }, Some(lp)) => alpha * lp + beta * base,
        };
        entries.push(RankEntry {
            candidate: idx,
            log_p,
            base_score: *base,
            objective,
        });
    }
    // stable sort: ties keep original list position
    entries.sort_by(|a, b| b.objective.total_cmp(&a.objective));
    Ok(entries)
}

/// Serializes pair-score records, one document per block:
/// `doc <id> <num_mentions>`, then `mention <j> <start> <end>` per mention,
/// then `pair <j> eps|<i> <score>` per scored pair.
pub fn write_pair_scores(docs: &[PairScores]) -> Result<String> {
    let mut out = String::new();
    for ps in docs {
        ps.validate()?;
        out.push_str(&format!("doc {} {}\n", ps.doc_id, ps.mentions.len()));
        for (j, (s, e)) in ps.mentions.iter().enumerate() {
            out.push_str(&format!("mention {j} {s} {e}\n"));
        }
        for j in 0..ps.mentions.len() {
            out.push_str(&format!("pair {j} eps {}\n", ps.eps[j]));
            for i in 0..j {
                out.push_str(&format!("pair {j} {i} {}\n", ps.pairs[j][i]));
            }
        }
    }
    Ok(out)
}

pub fn read_pair_scores(text: &str) -> Result<Vec<PairScores>> {
    let mut docs: Vec<PairScores> = Vec::new();
    let bad = |line: usize, msg: &str| Error::Ingestion {
        doc: format!("pair-scores line {}", line + 1),
        msg: msg.to_string(),
    };
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["doc", id, n] => {
                let n: usize = n.parse().map_err(|_| bad(ln, "bad mention count"))?;
                docs.push(PairScores {
                    doc_id: id.to_string(),
                    mentions: Vec::with_capacity(n),
                    eps: vec![f64::NEG_INFINITY; n],
                    pairs: (0..n).map(|j| vec![f64::NEG_INFINITY; j]).collect(),
                });
            }
            ["mention", j, s, e] => {
                let doc = docs.last_mut().ok_or_else(|| bad(ln, "mention before doc"))?;
                let j: usize = j.parse().map_err(|_| bad(ln, "bad mention index"))?;
                if j != doc.mentions.len() || j >= doc.eps.len() {
                    return Err(bad(ln, "mention index out of sequence"));
                }
                let s = s.parse().map_err(|_| bad(ln, "bad span start"))?;
                let e = e.parse().map_err(|_| bad(ln, "bad span end"))?;
                doc.mentions.push((s, e));
            }
            ["pair", j, ante, score] => {
                let doc = docs.last_mut().ok_or_else(|| bad(ln, "pair before doc"))?;
                let j: usize = j.parse().map_err(|_| bad(ln, "bad mention index"))?;
                if j >= doc.mentions.len() {
                    return Err(bad(ln, "pair references unseen mention"));
                }
                let score: f64 = score.parse().map_err(|_| bad(ln, "bad score"))?;
                if *ante == "eps" {
                    doc.eps[j] = score;
                } else {
                    let i: usize = ante.parse().map_err(|_| bad(ln, "bad antecedent"))?;
                    if i >= j {
                        return Err(bad(ln, "antecedent must precede mention"));
                    }
                    doc.pairs[j][i] = score;
                }
            }
            _ => return Err(bad(ln, "unrecognized record")),
        }
    }
    for ps in &docs {
        ps.validate()?;
        if ps.eps.iter().any(|s| !s.is_finite())
            || ps.pairs.iter().flatten().any(|s| !s.is_finite())
        {
            return Err(Error::Ingestion {
                doc: ps.doc_id.clone(),
                msg: "missing or non-finite pair scores".to_string(),
            });
        }
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Config;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ps_from(mentions: Vec<(usize, usize)>, eps: Vec<f64>, pairs: Vec<Vec<f64>>) -> PairScores {
        let ps = PairScores {
            doc_id: "d".into(),
            mentions,
            eps,
            pairs,
        };
        ps.validate().unwrap();
        ps
    }

    fn two_mention_link() -> PairScores {
        ps_from(vec![(0, 0), (2, 2)], vec![0.0, -1.0], vec![vec![], vec![1.0]])
    }

    #[test]
    fn greedy_basics() {
        let single = ps_from(vec![(0, 0)], vec![0.5], vec![vec![]]);
        assert_eq!(greedy_decode(&single).unwrap().antecedent, vec![None]);
        let link = two_mention_link();
        assert_eq!(
            greedy_decode(&link).unwrap().antecedent,
            vec![None, Some(0)]
        );
    }

    #[test]
    fn greedy_four_mention_hand_fixture() {
        // m1: eps. m2: ties m1 vs eps → closer (m1) wins... but eps is last,
        // so m1. m3: m2 best. m4: tie between m1 and m3 → closer (m3) wins.
        let ps = ps_from(
            vec![(0, 0), (1, 1), (2, 2), (3, 3)],
            vec![0.0, 0.5, -1.0, -2.0],
            vec![
                vec![],
                vec![0.5],
                vec![0.1, 0.9],
                vec![0.7, 0.2, 0.7],
            ],
        );
        let tree = greedy_decode(&ps).unwrap();
        assert_eq!(tree.antecedent, vec![None, Some(0), Some(1), Some(2)]);
        assert_eq!(tree.assignment(), vec![0, 0, 0, 0]);
    }

    #[test]
    fn greedy_tie_prefers_epsilon_last() {
        let ps = ps_from(vec![(0, 0), (1, 1)], vec![0.0, 1.0], vec![vec![], vec![1.0]]);
        // score tie between m1 and ε → antecedent wins, ε last
        assert_eq!(greedy_decode(&ps).unwrap().antecedent, vec![None, Some(0)]);
    }

    #[test]
    fn kbest_contracts() {
        let ps = two_mention_link();
        assert!(kbest(&ps, 0).is_err());
        let k1 = kbest(&ps, 1).unwrap();
        assert_eq!(k1.candidates.len(), 1);
        assert_eq!(k1.candidates[0].0, greedy_decode(&ps).unwrap());
        // two mentions have exactly two partitions; k=5 pads with the last
        let k5 = kbest(&ps, 5).unwrap();
        assert_eq!(k5.distinct, 2);
        assert_eq!(k5.candidates.len(), 5);
        assert_eq!(k5.candidates[1].0.antecedent, vec![None, None]);
        for pad in &k5.candidates[2..] {
            assert_eq!(pad.0, k5.candidates[1].0);
        }
        // greedy base score dominates every candidate
        for (_, s) in &k5.candidates {
            assert!(k5.candidates[0].1 >= *s);
        }
    }

    #[test]
    fn kbest_distinct_and_deterministic_on_random_fixtures() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 4 + (seed as usize % 3);
            let mentions: Vec<_> = (0..n).map(|i| (2 * i, 2 * i)).collect();
            let eps: Vec<f64> = (0..n).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
            let pairs: Vec<Vec<f64>> = (0..n)
                .map(|j| (0..j).map(|_| rand::Rng::random::<f64>(&mut rng)).collect())
                .collect();
            let ps = ps_from(mentions, eps, pairs);
            let a = kbest(&ps, 10).unwrap();
            let b = kbest(&ps, 10).unwrap();
            for (x, y) in a.candidates.iter().zip(&b.candidates) {
                assert_eq!(x.0, y.0);
            }
            let assigns: Vec<_> = a.candidates[..a.distinct]
                .iter()
                .map(|(t, _)| t.assignment())
                .collect();
            for i in 0..assigns.len() {
                for j in 0..i {
                    assert_ne!(assigns[i], assigns[j], "seed {seed}");
                }
            }
            // the smallest-gap admissible swap sits at position 2
            assert!(a.distinct >= 2);
        }
    }

    #[test]
    fn tree_annotations_drop_singletons() {
        let tree = AntecedentTree {
            antecedent: vec![None, Some(0), None],
        };
        let anns = tree_to_annotations(&tree, &[(0, 0), (2, 2), (4, 4)], 6, 25).unwrap();
        assert!(anns[0].r && anns[0].e == 1);
        assert!(anns[2].r && anns[2].e == 1);
        assert!(!anns[4].r, "singleton chain must be dropped");
    }

    fn toy_params() -> ModelParams {
        let cfg = Config {
            d_x: 6,
            d_h: 6,
            d_e: 6,
            l_max: 25,
            num_classes: 2,
            sigma: 0.01,
            entity_blind: false,
        };
        let counts: Vec<u64> = (0..8).map(|i| 10 + i).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        ModelParams::new(&cfg, &counts, &mut rng).unwrap()
    }

    #[test]
    fn rerank_modes_and_tie_breaks() {
        let params = toy_params();
        let tokens = vec![3, 4, 5, 6, 3];
        let ps = ps_from(
            vec![(0, 0), (2, 2), (4, 4)],
            vec![0.0, -0.5, -0.5],
            vec![vec![], vec![1.0], vec![0.3, 0.8]],
        );
        let kb = kbest(&ps, 6).unwrap();
        // all-padding list keeps its order
        let pad_only = KBestList {
            candidates: vec![kb.candidates[0].clone(); 4],
            distinct: 1,
        };
        let order = rerank(&params, &tokens, &ps, &pad_only, RerankMode::LmOnly).unwrap();
        assert_eq!(
            order.iter().map(|e| e.candidate).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
        // α = 0 reduces to base-score order
        let order = rerank(
            &params,
            &tokens,
            &ps,
            &kb,
            RerankMode::Combined {
                alpha: 0.0,
                beta: 1.0,
            },
        )
        .unwrap();
        for w in order.windows(2) {
            assert!(w[0].base_score >= w[1].base_score);
        }
        // β → ∞ puts the greedy tree first
        let order = rerank(
            &params,
            &tokens,
            &ps,
            &kb,
            RerankMode::Combined {
                alpha: 1.0,
                beta: 1e12,
            },
        )
        .unwrap();
        assert_eq!(order[0].candidate, 0);
    }

    #[test]
    fn failing_candidate_sorts_last() {
        let params = toy_params();
        let tokens = vec![3, 4, 5];
        // overlapping mentions make the encoding fail for any linked tree
        let ps = ps_from(
            vec![(0, 1), (1, 2)],
            vec![0.0, -1.0],
            vec![vec![], vec![1.0]],
        );
        let kb = kbest(&ps, 2).unwrap();
        assert_eq!(kb.candidates[0].0.antecedent, vec![None, Some(0)]);
        let order = rerank(&params, &tokens, &ps, &kb, RerankMode::LmOnly).unwrap();
        assert_eq!(order.last().unwrap().candidate, 0);
        assert!(order.last().unwrap().log_p.is_none());
        assert!(order[0].log_p.is_some(), "the all-ε tree has no mentions");
    }

    #[test]
    fn pair_scores_round_trip_and_errors() {
        let docs = vec![
            two_mention_link(),
            ps_from(
                vec![(0, 0), (1, 1), (3, 3)],
                vec![0.1, 0.2, 0.3],
                vec![vec![], vec![-0.5], vec![0.25, 1.5]],
            ),
        ];
        let text = write_pair_scores(&docs).unwrap();
        let back = read_pair_scores(&text).unwrap();
        assert_eq!(back, docs);
        assert!(read_pair_scores("mention 0 0 0\n").is_err());
        assert!(read_pair_scores("doc d 1\nmention 0 0 0\n").is_err(), "missing ε score");
        assert!(read_pair_scores("doc d 1\nmention 0 0 0\npair 0 0 1.0\n").is_err());
        assert!(read_pair_scores("garbage line\n").is_err());
    }
}
