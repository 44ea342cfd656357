//! Data ingestion and preprocessing: raw documents with mention spans,
//! vocabulary construction, conversion to per-token (R, E, L) annotations,
//! and a synthetic-corpus generator for desk-scale experiments.
//!
//! Interchange format: one JSON document per line, schema [`RawDocument`].

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::entity_state::{self, EntityAnnotation};
use crate::error::{Error, Result};

pub const UNK_TOKEN: &str = "<unk>";
pub const NUM_TOKEN: &str = "<num>";
pub const EOD_TOKEN: &str = "</s>";

/// A mention span, inclusive on both ends, within one sentence.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Mention {
    pub entity: String,
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

/// A tokenized document plus its gold coreference mentions.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RawDocument {
    pub id: String,
    pub sentences: Vec<Vec<String>>,
    pub mentions: Vec<Mention>,
}

impl RawDocument {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(|s| s.len()).sum()
    }
}

fn is_punct_only(tok: &str) -> bool {
    !tok.is_empty() && tok.chars().all(|c| !c.is_alphanumeric())
}

fn is_number(tok: &str) -> bool {
    let mut digits = false;
    let mut seen_sep = false;
    for (i, c) in tok.chars().enumerate() {
        match c {
            '0'..='9' => digits = true,
            '-' | '+' if i == 0 => {}
            '.' | ',' => seen_sep = true,
            _ => return false,
        }
    }
    digits || (seen_sep && !tok.is_empty() && digits)
}

/// §-style preprocessing: lowercase, numbers → NUM token, punctuation-only
/// tokens outside mentions dropped (spans re-indexed), embedded mentions
/// dropped keeping the enclosing span, singleton entities removed.
/// Idempotent.
pub fn preprocess(raw: &RawDocument) -> Result<RawDocument> {
    let n_sent = raw.sentences.len();
    for m in &raw.mentions {
        let ok = m.sentence < n_sent
            && m.start <= m.end
            && m.end < raw.sentences[m.sentence].len();
        if !ok {
            return Err(Error::Ingestion {
                doc: raw.id.clone(),
                msg: format!(
                    "malformed span entity={} sentence={} tokens={}..={}",
                    m.entity, m.sentence, m.start, m.end
                ),
            });
        }
    }

    // lowercase + NUM
    let sentences: Vec<Vec<String>> = raw
        .sentences
        .iter()
        .map(|s| {
            s.iter()
                .map(|t| {
                    let low = t.to_lowercase();
                    if low != NUM_TOKEN && is_number(&low) {
                        NUM_TOKEN.to_string()
                    } else {
                        low
                    }
                })
                .collect()
        })
        .collect();

    // keep only enclosing mentions
    let mut mentions: Vec<Mention> = Vec::new();
    for m in &raw.mentions {
        let embedded = raw.mentions.iter().any(|o| {
            o.sentence == m.sentence
                && (o.start, o.end) != (m.start, m.end)
                && o.start <= m.start
                && m.end <= o.end
        });
        if !embedded && !mentions.iter().any(|o| {
            o.sentence == m.sentence && o.start == m.start && o.end == m.end
        }) {
            mentions.push(m.clone());
        }
    }

    // singleton entities carry no coreference signal; drop them before the
    // punctuation pass so their spans cannot shield punctuation tokens
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for m in &mentions {
        *counts.entry(m.entity.clone()).or_default() += 1;
    }
    mentions.retain(|m| counts[&m.entity] > 1);

    // drop punctuation-only tokens outside mentions, re-indexing spans
    let mut new_sentences = Vec::with_capacity(sentences.len());
    for (si, sent) in sentences.iter().enumerate() {
        let in_mention: Vec<bool> = (0..sent.len())
            .map(|ti| {
                mentions
                    .iter()
                    .any(|m| m.sentence == si && m.start <= ti && ti <= m.end)
            })
            .collect();
        let mut new_index = vec![usize::MAX; sent.len()];
        let mut kept = Vec::with_capacity(sent.len());
        for (ti, tok) in sent.iter().enumerate() {
            if is_punct_only(tok) && !in_mention[ti] {
                continue;
            }
            new_index[ti] = kept.len();
            kept.push(tok.clone());
        }
        for m in mentions.iter_mut().filter(|m| m.sentence == si) {
            m.start = new_index[m.start];
            m.end = new_index[m.end];
        }
        new_sentences.push(kept);
    }

    Ok(RawDocument {
        id: raw.id.clone(),
        sentences: new_sentences,
        mentions,
    })
}

/// Word/id mapping with reserved UNK, NUM and end-of-document tokens.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
    counts: Vec<u64>,
}

impl Vocabulary {
    pub const UNK: usize = 0;
    pub const NUM: usize = 1;
    pub const EOD: usize = 2;

    /// Builds the vocabulary from preprocessed documents; words with
    /// frequency below `min_count` map to UNK. Ordering is deterministic:
    /// reserved tokens, then frequency descending, then lexicographic.
    pub fn build(docs: &[RawDocument], min_count: u64) -> Result<Vocabulary> {
        if docs.is_empty() || docs.iter().all(|d| d.token_count() == 0) {
            return Err(Error::Ingestion {
                doc: "<corpus>".to_string(),
                msg: "empty corpus".to_string(),
            });
        }
        let mut freq: BTreeMap<&str, u64> = BTreeMap::new();
        for d in docs {
            for s in &d.sentences {
                for t in s {
                    *freq.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut words = vec![
            UNK_TOKEN.to_string(),
            NUM_TOKEN.to_string(),
            EOD_TOKEN.to_string(),
        ];
        let mut counts: Vec<u64> = vec![0, *freq.get(NUM_TOKEN).unwrap_or(&0), 0];
        let mut ordered: Vec<(&str, u64)> = freq
            .iter()
            .filter(|(w, _)| ![UNK_TOKEN, NUM_TOKEN, EOD_TOKEN].contains(*w))
            .map(|(w, c)| (*w, *c))
            .collect();
        ordered.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        for (w, c) in ordered {
            if c < min_count {
                counts[Self::UNK] += c;
            } else {
                words.push(w.to_string());
                counts.push(c);
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Ok(Vocabulary {
            words,
            index,
            counts,
        })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&Self::UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(|s| s.as_str())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// FNV-1a over the word list; checkpoints store this to detect
    /// vocabulary mismatches at load time.
    pub fn hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for w in &self.words {
            for b in w.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0x0a;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// A document after vocabulary lookup and span-to-annotation conversion.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EncodedDocument {
    pub id: String,
    pub tokens: Vec<usize>,
    pub annotations: Vec<EntityAnnotation>,
    /// Flat token offset where each sentence begins.
    pub sentence_starts: Vec<usize>,
}

impl EncodedDocument {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Appends the end-of-document token (always outside mentions).
    pub fn with_eod(mut self) -> EncodedDocument {
        self.tokens.push(Vocabulary::EOD);
        self.annotations.push(EntityAnnotation::outside());
        self
    }
}

/// Encodes a preprocessed document: token ids plus per-token (R, E, L) with
/// entity ids renumbered 1, 2, 3, … by first appearance.
pub fn encode(doc: &RawDocument, vocab: &Vocabulary, l_max: usize) -> Result<EncodedDocument> {
    let mut tokens = Vec::with_capacity(doc.token_count());
    let mut sentence_starts = Vec::with_capacity(doc.sentences.len());
    let mut offsets = Vec::with_capacity(doc.sentences.len());
    for s in &doc.sentences {
        sentence_starts.push(tokens.len());
        offsets.push(tokens.len());
        for t in s {
            tokens.push(vocab.id(t));
        }
    }
    let mut spans: Vec<(&str, usize, usize)> = doc
        .mentions
        .iter()
        .map(|m| {
            let base = offsets[m.sentence];
            (m.entity.as_str(), base + m.start, base + m.end)
        })
        .collect();
    spans.sort_by_key(|&(_, s, _)| s);
    let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
    let spans: Vec<(usize, usize, usize)> = spans
        .iter()
        .map(|&(e, s, x)| {
            let next = ids.len() + 1;
            (*ids.entry(e).or_insert(next), s, x)
        })
        .collect();
    let annotations = entity_state::spans_to_annotations(tokens.len(), &spans, l_max)
        .map_err(|e| Error::Ingestion {
            doc: doc.id.clone(),
            msg: e.to_string(),
        })?;
    Ok(EncodedDocument {
        id: doc.id.clone(),
        tokens,
        annotations,
        sentence_starts,
    })
}

/// Inverse of [`encode`] on the span structure: (entity, start, end) over
/// flat token offsets.
pub fn decode_spans(doc: &EncodedDocument) -> Vec<(usize, usize, usize)> {
    entity_state::annotations_to_spans(&doc.annotations)
}

pub fn read_documents(path: &Path) -> Result<Vec<RawDocument>> {
    let file = std::fs::File::open(path)?;
    let mut docs = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: RawDocument = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            doc: format!("{}:{}", path.display(), i + 1),
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_documents(path: &Path, docs: &[RawDocument]) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    for d in docs {
        serde_json::to_writer(&mut file, d).map_err(|e| Error::Serde(e.to_string()))?;
        file.write_all(b"\n")?;
    }
    Ok(())
}

/// Shape of the generated synthetic narratives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthStyle {
    /// Entities re-mentioned with recency bias at the configured rate.
    Mixed,
    /// After the introductions, every re-mention targets the most recently
    /// mentioned entity and is signalled by a trigger word.
    Recency,
}

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub num_docs: usize,
    pub vocab_size: usize,
    pub mean_entities: f64,
    pub recurrence: f64,
    pub style: SynthStyle,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            num_docs: 200,
            vocab_size: 300,
            mean_entities: 4.0,
            recurrence: 0.6,
            style: SynthStyle::Mixed,
        }
    }
}

fn poisson(rng: &mut ChaCha8Rng, mean: f64) -> usize {
    // Knuth's method; mean is small here
    let l = (-mean).exp();
    let mut k = 0usize;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= l {
            return k;
        }
        k += 1;
    }
}

/// Deterministic synthetic-corpus generator with gold annotations exact by
/// construction.
pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<Vec<RawDocument>> {
    if spec.vocab_size < 40 || spec.num_docs == 0 {
        return Err(Error::config(format!(
            "synthetic spec needs ≥ 40 vocab words and ≥ 1 document, got {} / {}",
            spec.vocab_size, spec.num_docs
        )));
    }
    if !(0.0..=1.0).contains(&spec.recurrence) {
        return Err(Error::config("recurrence rate must be in [0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let verbs = ["saw", "met", "liked", "found", "helped"];
    let triggers_new = "then";
    let triggers_old = "again";
    // roughly half the vocabulary is entity names, the rest filler
    let reserved = verbs.len() + 4; // the/then/again/.
    let n_names = (spec.vocab_size - reserved) / 2;
    let n_filler = spec.vocab_size - reserved - n_names;
    let names: Vec<String> = (0..n_names).map(|i| format!("name{i:03}")).collect();
    let fillers: Vec<String> = (0..n_filler).map(|i| format!("w{i:03}")).collect();

    let mut docs = Vec::with_capacity(spec.num_docs);
    for di in 0..spec.num_docs {
        let n_entities = poisson(&mut rng, spec.mean_entities - 1.0) + 1;
        let mut pool: Vec<usize> = Vec::new();
        while pool.len() < n_entities {
            let cand = rng.random_range(0..names.len());
            if !pool.contains(&cand) {
                pool.push(cand);
            }
        }
        let mut doc = RawDocument {
            id: format!("synth-{seed:x}-{di:04}"),
            sentences: Vec::new(),
            mentions: Vec::new(),
        };
        let mut introduced = 0usize;
        // entity order of mention events, by entity index into `pool`
        let mut recent: Vec<usize> = Vec::new();
        let target_mentions = match spec.style {
            SynthStyle::Mixed => {
                if spec.recurrence >= 1.0 {
                    n_entities * 3
                } else {
                    ((n_entities as f64 / (1.0 - spec.recurrence)).ceil() as usize)
                        .max(n_entities)
                }
            }
            SynthStyle::Recency => n_entities + (n_entities * 2).max(4),
        };
        for mi in 0..target_mentions {
            let force_new = introduced < n_entities
                && (target_mentions - mi) <= (n_entities - introduced);
            let is_new = force_new
                || (introduced == 0)
                || (introduced < n_entities && !rng.random_bool(spec.recurrence));
            let ent = if is_new {
                introduced += 1;
                introduced - 1
            } else {
                match spec.style {
                    // most recently mentioned entity, always
                    SynthStyle::Recency => *recent.last().expect("introduced > 0"),
                    // recency-biased choice among the mentioned entities
                    SynthStyle::Mixed => {
                        let mut idx = recent.len() - 1;
                        while idx > 0 && rng.random_bool(0.45) {
                            idx -= 1;
                        }
                        recent[idx]
                    }
                }
            };
            recent.retain(|&e| e != ent);
            recent.push(ent);

            let (sent, start, end) = match spec.style {
                // trigger + determiner grammar: mention positions are fully
                // signalled, so entity choices are easy to supervise
                SynthStyle::Recency => {
                    let trigger = if is_new { triggers_new } else { triggers_old };
                    let mut sent: Vec<String> = vec![trigger.to_string()];
                    let start = sent.len();
                    sent.push("the".to_string());
                    sent.push(names[pool[ent]].clone());
                    let end = sent.len() - 1;
                    sent.push(verbs[rng.random_range(0..verbs.len())].to_string());
                    for _ in 0..rng.random_range(1..4usize) {
                        sent.push(fillers[rng.random_range(0..fillers.len())].clone());
                    }
                    sent.push(".".to_string());
                    (sent, start, end)
                }
                // positionally diffuse grammar: a geometric run of fillers
                // followed by a bare name, so the gap between mentions is
                // memoryless and mention locations carry no one-step signal
                SynthStyle::Mixed => {
                    let mut sent: Vec<String> = Vec::new();
                    while !rng.random_bool(0.5) {
                        sent.push(fillers[rng.random_range(0..fillers.len())].clone());
                    }
                    let start = sent.len();
                    sent.push(names[pool[ent]].clone());
                    (sent, start, start)
                }
            };
            doc.mentions.push(Mention {
                entity: format!("e{ent}"),
                sentence: doc.sentences.len(),
                start,
                end,
            });
            doc.sentences.push(sent);
        }
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(sentences: Vec<Vec<&str>>, mentions: Vec<(&str, usize, usize, usize)>) -> RawDocument {
        RawDocument {
            id: "t".to_string(),
            sentences: sentences
                .into_iter()
                .map(|s| s.into_iter().map(String::from).collect())
                .collect(),
            mentions: mentions
                .into_iter()
                .map(|(e, s, a, b)| Mention {
                    entity: e.to_string(),
                    sentence: s,
                    start: a,
                    end: b,
                })
                .collect(),
        }
    }

    #[test]
    fn punctuation_outside_mentions_removed() {
        let d = doc(
            vec![vec!["John", ",", "slept", "."]],
            vec![("x", 0, 0, 0), ("x", 0, 2, 2)],
        );
        let p = preprocess(&d).unwrap();
        assert_eq!(p.sentences[0], vec!["john", "slept"]);
        assert_eq!(p.mentions[1].start, 1);
    }

    #[test]
    fn punctuation_inside_mention_kept() {
        let d = doc(
            vec![vec!["John", ",", "slept"]],
            vec![("x", 0, 0, 1), ("x", 0, 2, 2)],
        );
        let p = preprocess(&d).unwrap();
        assert_eq!(p.sentences[0], vec!["john", ",", "slept"]);
        assert_eq!(p.mentions[0].end, 1);
    }

    #[test]
    fn embedded_mention_dropped() {
        let d = doc(
            vec![vec!["the", "coffee", "shop", "sold", "it"]],
            vec![("a", 0, 0, 2), ("b", 0, 1, 1), ("a", 0, 4, 4)],
        );
        let p = preprocess(&d).unwrap();
        let spans: Vec<_> = p.mentions.iter().map(|m| (m.start, m.end)).collect();
        assert_eq!(spans, vec![(0, 2), (4, 4)]);
    }

    #[test]
    fn numbers_replaced() {
        let d = doc(vec![vec!["in", "1984", "Pi", "3.14"]], vec![]);
        let p = preprocess(&d).unwrap();
        assert_eq!(p.sentences[0], vec!["in", NUM_TOKEN, "pi", NUM_TOKEN]);
    }

    #[test]
    fn singletons_removed() {
        let d = doc(
            vec![vec!["a", "b", "c", "d"]],
            vec![("x", 0, 0, 0), ("x", 0, 2, 2), ("y", 0, 3, 3)],
        );
        let p = preprocess(&d).unwrap();
        assert!(p.mentions.iter().all(|m| m.entity == "x"));
        assert_eq!(p.mentions.len(), 2);
    }

    #[test]
    fn preprocess_idempotent() {
        let d = doc(
            vec![vec!["John", ",", "saw", "12", "cats", "!"], vec!["He", "left", "."]],
            vec![("x", 0, 0, 0), ("x", 1, 0, 0), ("y", 0, 4, 5)],
        );
        let once = preprocess(&d).unwrap();
        let twice = preprocess(&once).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn malformed_span_reports_doc() {
        let d = doc(vec![vec!["a"]], vec![("x", 0, 0, 5)]);
        match preprocess(&d) {
            Err(Error::Ingestion { doc, .. }) => assert_eq!(doc, "t"),
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_min_count_and_determinism() {
        let d1 = doc(vec![vec!["a", "a", "b", "c"]], vec![]);
        let v1 = Vocabulary::build(&[d1.clone()], 2).unwrap();
        assert_eq!(v1.id("a"), 3);
        assert_eq!(v1.id("b"), Vocabulary::UNK);
        let v0 = Vocabulary::build(&[d1.clone()], 1).unwrap();
        assert_ne!(v0.id("b"), Vocabulary::UNK);
        assert_ne!(v0.id("c"), Vocabulary::UNK);
        // same corpus → identical assignment and hash
        let v2 = Vocabulary::build(&[d1], 2).unwrap();
        assert_eq!(v1.hash(), v2.hash());
        assert!(Vocabulary::build(&[], 1).is_err());
    }

    fn running_example() -> RawDocument {
        doc(
            vec![
                vec![
                    "john", "wanted", "to", "go", "to", "the", "coffee", "shop", "in",
                    "downtown", "copenhagen", ".",
                ],
                vec!["he", "was", "told", "that", "it", "sold", "the", "best", "beans", "."],
            ],
            vec![
                ("john", 0, 0, 0),
                ("shop", 0, 5, 7),
                ("cph", 0, 9, 10),
                ("john", 1, 0, 0),
                ("shop", 1, 4, 4),
                ("beans", 1, 6, 8),
            ],
        )
    }

    #[test]
    fn figure_two_rows_reproduced() {
        let d = running_example();
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let enc = encode(&d, &v, 25).unwrap();
        let r: Vec<u8> = enc.annotations.iter().map(|a| a.r as u8).collect();
        let e: Vec<usize> = enc.annotations.iter().map(|a| a.e).collect();
        let l: Vec<usize> = enc.annotations.iter().map(|a| a.l).collect();
        assert_eq!(r, vec![1, 0, 0, 0, 0, 1, 1, 1, 0, 1, 1, 0, 1, 0, 0, 0, 1, 0, 1, 1, 1, 0]);
        assert_eq!(e, vec![1, 0, 0, 0, 0, 2, 2, 2, 0, 3, 3, 0, 1, 0, 0, 0, 2, 0, 4, 4, 4, 0]);
        assert_eq!(l, vec![1, 1, 1, 1, 1, 3, 2, 1, 1, 2, 1, 1, 1, 1, 1, 1, 1, 1, 3, 2, 1, 1]);
        assert_eq!(enc.sentence_starts, vec![0, 12]);
    }

    #[test]
    fn encode_no_mentions_all_outside() {
        let d = doc(vec![vec!["a", "b"]], vec![]);
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let enc = encode(&d, &v, 25).unwrap();
        assert!(enc.annotations.iter().all(|a| !a.r && a.l == 1));
    }

    #[test]
    fn encode_truncates_long_mention() {
        let toks: Vec<&str> = (0..30).map(|_| "x").collect();
        let mut d = doc(vec![toks], vec![]);
        d.mentions.push(Mention {
            entity: "e".into(),
            sentence: 0,
            start: 0,
            end: 29,
        });
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let enc = encode(&d, &v, 25).unwrap();
        assert_eq!(enc.annotations[0].l, 25);
        assert!(!enc.annotations[25].r);
    }

    #[test]
    fn encode_decode_round_trip() {
        let d = running_example();
        let v = Vocabulary::build(&[d.clone()], 1).unwrap();
        let enc = encode(&d, &v, 25).unwrap();
        let spans = decode_spans(&enc);
        assert_eq!(
            spans,
            vec![(1, 0, 0), (2, 5, 7), (3, 9, 10), (1, 12, 12), (2, 16, 16), (4, 18, 20)]
        );
    }

    #[test]
    fn synth_deterministic_under_seed() {
        let spec = SynthSpec {
            num_docs: 5,
            ..SynthSpec::default()
        };
        let a = synth_corpus(&spec, 42).unwrap();
        let b = synth_corpus(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = synth_corpus(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synth_zero_recurrence_all_new() {
        let spec = SynthSpec {
            num_docs: 20,
            recurrence: 0.0,
            ..SynthSpec::default()
        };
        for d in synth_corpus(&spec, 1).unwrap() {
            let mut seen = std::collections::BTreeSet::new();
            for m in &d.mentions {
                assert!(seen.insert(m.entity.clone()), "repeat mention in {}", d.id);
            }
        }
    }

    #[test]
    fn synth_full_recurrence_single_chain_after_first() {
        let spec = SynthSpec {
            num_docs: 10,
            recurrence: 1.0,
            mean_entities: 1.0,
            ..SynthSpec::default()
        };
        for d in synth_corpus(&spec, 2).unwrap() {
            let first = &d.mentions[0].entity;
            assert!(d.mentions.iter().all(|m| &m.entity == first));
        }
    }

    #[test]
    fn synth_mean_entities_close_to_target() {
        let spec = SynthSpec {
            num_docs: 100,
            mean_entities: 4.0,
            ..SynthSpec::default()
        };
        let docs = synth_corpus(&spec, 9).unwrap();
        let mean: f64 = docs
            .iter()
            .map(|d| {
                d.mentions
                    .iter()
                    .map(|m| m.entity.clone())
                    .collect::<std::collections::BTreeSet<_>>()
                    .len() as f64
            })
            .sum::<f64>()
            / docs.len() as f64;
        assert!((mean - 4.0).abs() / 4.0 < 0.2, "mean entities {mean}");
    }

    #[test]
    fn synth_docs_encode_cleanly() {
        let spec = SynthSpec {
            num_docs: 10,
            ..SynthSpec::default()
        };
        let docs: Vec<_> = synth_corpus(&spec, 3)
            .unwrap()
            .iter()
            .map(|d| preprocess(d).unwrap())
            .collect();
        let v = Vocabulary::build(&docs, 1).unwrap();
        for d in &docs {
            let enc = encode(d, &v, 25).unwrap();
            entity_state::validate_trajectory(&enc.annotations, 25).unwrap();
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        let docs = synth_corpus(
            &SynthSpec {
                num_docs: 3,
                ..SynthSpec::default()
            },
            7,
        )
        .unwrap();
        write_documents(&path, &docs).unwrap();
        assert_eq!(read_documents(&path).unwrap(), docs);
    }
}
