//! Symbolic per-document entity state: the R/E/L annotation variables, the
//! growing entity set, last-mention positions, and the rules that constrain
//! valid trajectories. No neural scoring lives here.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maximum mention length.
pub const L_MAX_DEFAULT: usize = 25;

/// Reserved entity index for non-mention tokens.
pub const NON_ENTITY: usize = 0;

/// Number of distance-feature buckets: [1], [2,3], [4,7], [8,15], [16,31],
/// [32,63], [64,∞).
pub const DIST_FEATURES: usize = 7;

/// Per-token annotation: in-mention flag, entity index, remaining length.
///
/// Entity indices are 1-based; index 0 is the reserved non-entity marker,
/// only valid when `r` is false.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EntityAnnotation {
    pub r: bool,
    pub e: usize,
    pub l: usize,
}

impl EntityAnnotation {
    /// Annotation of a token outside any mention.
    pub fn outside() -> EntityAnnotation {
        EntityAnnotation {
            r: false,
            e: NON_ENTITY,
            l: 1,
        }
    }

    pub fn mention(e: usize, l: usize) -> EntityAnnotation {
        EntityAnnotation { r: true, e, l }
    }

    pub fn validate(&self, l_max: usize) -> Result<()> {
        if !self.r {
            if self.l != 1 || self.e != NON_ENTITY {
                return Err(Error::contract(format!(
                    "r=0 forces l=1 and the non-entity marker, got e={} l={}",
                    self.e, self.l
                )));
            }
        } else {
            if self.e == NON_ENTITY {
                return Err(Error::contract("r=1 requires an entity index ≥ 1"));
            }
            if self.l < 1 || self.l > l_max {
                return Err(Error::contract(format!(
                    "mention length {} outside [1, {l_max}]",
                    self.l
                )));
            }
        }
        Ok(())
    }
}

/// Registry of created entities: count, last-mention token offsets, and the
/// most recently mentioned index. Embeddings are maintained by the model
/// layer, aligned with these indices.
#[derive(Clone, Debug, Default)]
pub struct EntityRegistry {
    /// last_mention[i] is the most recent token offset of entity i+1.
    last_mention: Vec<usize>,
    current: Option<usize>,
}

impl EntityRegistry {
    pub fn new() -> EntityRegistry {
        EntityRegistry::default()
    }

    /// Number of created entities.
    pub fn count(&self) -> usize {
        self.last_mention.len()
    }

    /// Most recently mentioned entity index, if any mention has occurred.
    pub fn current(&self) -> Option<usize> {
        self.current
    }

    pub fn last_mention(&self, e: usize) -> Option<usize> {
        self.last_mention.get(e.checked_sub(1)?).copied()
    }

    /// Records a mention token of entity `e` at offset `t`, creating the
    /// entity when `e` is the next fresh index.
    pub fn note_mention(&mut self, e: usize, t: usize) -> Result<()> {
        if e == 0 || e > self.count() + 1 {
            return Err(Error::lifecycle(format!(
                "entity index {e} not in admissible set 1..={}",
                self.count() + 1
            )));
        }
        if e == self.count() + 1 {
            self.last_mention.push(t);
        } else {
            self.last_mention[e - 1] = t;
        }
        self.current = Some(e);
        Ok(())
    }
}

/// Distance feature vector f(e) for candidate `e` at token offset `t`:
/// a one-hot bucket over the gap since the entity's most recent token, or
/// all zeros for the new-entity candidate.
pub fn distance_features(reg: &EntityRegistry, e: usize, t: usize) -> Result<Tensor> {
    if e == 0 || e > reg.count() + 1 {
        return Err(Error::contract(format!(
            "entity {e} not admissible (registry has {})",
            reg.count()
        )));
    }
    let mut f = vec![0.0; DIST_FEATURES];
    if e <= reg.count() {
        let last = reg.last_mention(e).expect("counted entity has a mention");
        let gap = t.saturating_sub(last).max(1);
        let bucket = match gap {
            1 => 0,
            2..=3 => 1,
            4..=7 => 2,
            8..=15 => 3,
            16..=31 => 4,
            32..=63 => 5,
            _ => 6,
        };
        f[bucket] = 1.0;
    }
    Tensor::from_vec(&[DIST_FEATURES], f)
}

/// Per-document trajectory validator and tracker.
#[derive(Clone, Debug)]
pub struct StateMachine {
    registry: EntityRegistry,
    prev: EntityAnnotation,
    position: usize,
    l_max: usize,
}

impl StateMachine {
    pub fn new(l_max: usize) -> StateMachine {
        StateMachine {
            registry: EntityRegistry::new(),
            prev: EntityAnnotation::outside(),
            position: 0,
        l_max,
        }
    }

    pub fn registry(&self) -> &EntityRegistry {
        &self.registry
    }

    pub fn position(&self) -> usize {
        self.position
    }

    pub fn prev(&self) -> EntityAnnotation {
        self.prev
    }

    pub fn l_max(&self) -> usize {
        self.l_max
    }

    /// True when the next token's (r, e, l) are free to choose.
    pub fn at_choice_point(&self) -> bool {
        self.prev.l == 1
    }

    /// The forced continuation annotation, when mid-mention.
    pub fn forced(&self) -> Option<EntityAnnotation> {
        if self.prev.l > 1 {
            Some(EntityAnnotation {
                r: self.prev.r,
                e: self.prev.e,
                l: self.prev.l - 1,
            })
        } else {
            None
        }
    }

    /// Admissible next-entity indices `{1, …, K+1}`; K+1 means "new entity".
    pub fn admissible_entities(&self) -> Result<Vec<usize>> {
        if !self.at_choice_point() {
            return Err(Error::contract(
                "admissible_entities called mid-mention",
            ));
        }
        Ok((1..=self.registry.count() + 1).collect())
    }

    /// Applies one annotation, enforcing forced continuation, the admissible
    /// entity set, and length bounds.
    pub fn advance(&mut self, choice: EntityAnnotation) -> Result<()> {
        if let Some(forced) = self.forced() {
            if choice != forced {
                return Err(Error::contract(format!(
                    "forced continuation at position {} requires (r={}, e={}, l={}), got (r={}, e={}, l={})",
                    self.position, forced.r as u8, forced.e, forced.l,
                    choice.r as u8, choice.e, choice.l
                )));
            }
        } else {
            choice.validate(self.l_max)?;
            if choice.r && choice.e > self.registry.count() + 1 {
                return Err(Error::contract(format!(
                    "entity index {} not admissible at position {} (max {})",
                    choice.e,
                    self.position,
                    self.registry.count() + 1
                )));
            }
        }
        if choice.r {
            self.registry.note_mention(choice.e, self.position)?;
        }
        self.prev = choice;
        self.position += 1;
        Ok(())
    }
}

/// Converts non-overlapping mention spans to per-token annotations.
///
/// `spans` are (entity index 1-based by first appearance, start, end inclusive)
/// over a document of `len` tokens. Mentions longer than `l_max` are truncated.
pub fn spans_to_annotations(
    len: usize,
    spans: &[(usize, usize, usize)],
    l_max: usize,
) -> Result<Vec<EntityAnnotation>> {
    let mut ann = vec![EntityAnnotation::outside(); len];
    let mut sorted: Vec<_> = spans.to_vec();
    sorted.sort_by_key(|&(_, s, _)| s);
    let mut prev_end: Option<usize> = None;
    for &(e, start, end) in &sorted {
        if end < start || end >= len {
            return Err(Error::contract(format!(
                "span ({start}, {end}) out of bounds for {len} tokens"
            )));
        }
        if let Some(pe) = prev_end {
            if start <= pe {
                return Err(Error::contract(format!(
                    "overlapping mention spans at token {start}"
                )));
            }
        }
        prev_end = Some(end);
        let end = end.min(start + l_max - 1);
        let width = end - start + 1;
        for (k, slot) in ann[start..=end].iter_mut().enumerate() {
            *slot = EntityAnnotation::mention(e, width - k);
        }
    }
    Ok(ann)
}

/// Recovers (entity, start, end) spans from per-token annotations.
pub fn annotations_to_spans(ann: &[EntityAnnotation]) -> Vec<(usize, usize, usize)> {
    let mut spans = Vec::new();
    let mut t = 0;
    while t < ann.len() {
        if ann[t].r {
            let width = ann[t].l;
            spans.push((ann[t].e, t, t + width - 1));
            t += width;
        } else {
            t += 1;
        }
    }
    spans
}

/// Replays a full annotation sequence through a fresh state machine,
/// erroring on the first contract violation.
pub fn validate_trajectory(ann: &[EntityAnnotation], l_max: usize) -> Result<StateMachine> {
    let mut sm = StateMachine::new(l_max);
    for (i, a) in ann.iter().enumerate() {
        sm.advance(*a)
            .map_err(|e| Error::contract(format!("token {i}: {e}")))?;
    }
    Ok(sm)
}
