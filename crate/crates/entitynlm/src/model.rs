//! EntityNLM proper: the five parametric distributions, the entity-embedding
//! lifecycle, joint log-probability of an annotated document, ancestral
//! sampling, and the discriminative proposal variant used for importance
//! sampling.
//!
//! All formulas are written once against [`Engine`], so the taped
//! (differentiable) and forward-only paths cannot diverge.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::corpus::Vocabulary;
use crate::entity_state::{self, EntityAnnotation, StateMachine, DIST_FEATURES, L_MAX_DEFAULT};
use crate::error::{Error, Result};
use crate::nn::{
    self, assign_classes, CfsmLayer, CfsmView, LstmCell, LstmView,
};
use crate::tensor::{Engine, Forward, Tensor};

/// Model hyperparameters; `d_e` must equal `d_h` because Eq. 9 mixes the
/// hidden state directly into entity embeddings.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Config {
    pub d_x: usize,
    pub d_h: usize,
    pub d_e: usize,
    pub l_max: usize,
    /// CFSM class count; 0 selects ceil(sqrt(|vocab|)).
    pub num_classes: usize,
    /// New-entity embedding noise scale (Eq. 8).
    pub sigma: f64,
    /// Entity-blind ablation: plain RNNLM over words, structure ignored.
    pub entity_blind: bool,
}

impl Default for Config {
    fn default() -> Config {
        Config {
            d_x: 32,
            d_h: 32,
            d_e: 32,
            l_max: L_MAX_DEFAULT,
            num_classes: 0,
            sigma: 0.01,
            entity_blind: false,
        }
    }
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 || self.d_h == 0 || self.d_e == 0 {
            return Err(Error::config("dimensions must be positive"));
        }
        if self.d_e != self.d_h {
            return Err(Error::config(format!(
                "d_e ({}) must equal d_h ({}): Eq. 9 mixes h into entity embeddings",
                self.d_e, self.d_h
            )));
        }
        if self.l_max == 0 {
            return Err(Error::config("l_max must be positive"));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::config("sigma must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn classes_for(&self, vocab_size: usize) -> usize {
        if self.num_classes > 0 {
            self.num_classes.min(vocab_size)
        } else {
            (vocab_size as f64).sqrt().ceil() as usize
        }
    }
}

/// All trainable tensors.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub config: Config,
    /// Word embeddings, |vocab| × d_x.
    pub embed: Tensor,
    pub lstm: LstmCell,
    /// r-embeddings for the binary R decision (Eq. 3).
    pub r0: Tensor,
    pub r1: Tensor,
    pub w_r: Tensor,
    pub w_entity: Tensor,
    pub w_dist: Tensor,
    /// ℓ_max × (d_h + d_e) length scores (Eq. 5).
    pub w_length: Tensor,
    pub w_e: Tensor,
    pub w_delta: Tensor,
    pub cfsm: CfsmLayer,
}

impl ModelParams {
    pub fn new(config: &Config, vocab_counts: &[u64], rng: &mut ChaCha8Rng) -> Result<ModelParams> {
        config.validate()?;
        let v = vocab_counts.len();
        if v < 3 {
            return Err(Error::config(format!("vocabulary of {v} is too small")));
        }
        let (d_x, d_h, d_e) = (config.d_x, config.d_h, config.d_e);
        let class_of = assign_classes(vocab_counts, config.classes_for(v))?;
        let zero_if_blind = |t: Tensor| {
            if config.entity_blind {
                Tensor::zeros(t.shape())
            } else {
                t
            }
        };
        Ok(ModelParams {
            config: config.clone(),
            embed: nn::glorot_matrix(rng, v, d_x),
            lstm: LstmCell::new(rng, d_x, d_h),
            r0: nn::glorot_vector(rng, d_e),
            r1: nn::glorot_vector(rng, d_e),
            w_r: zero_if_blind(nn::glorot_matrix(rng, d_h, d_e)),
            w_entity: nn::glorot_matrix(rng, d_h, d_e),
            w_dist: Tensor::zeros(&[DIST_FEATURES]),
            w_length: nn::glorot_matrix(rng, config.l_max, d_h + d_e),
            w_e: zero_if_blind(nn::glorot_matrix(rng, d_h, d_e)),
            w_delta: nn::glorot_matrix(rng, d_h, d_e),
            cfsm: CfsmLayer::new(rng, d_h, class_of)?,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfsm.vocab_size()
    }

    /// Shape check against the configuration and vocabulary size.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.config.validate()?;
        let c = &self.config;
        let checks: [(&str, &[usize], Vec<usize>); 9] = [
            ("embed", self.embed.shape(), vec![vocab_size, c.d_x]),
            ("r0", self.r0.shape(), vec![c.d_e]),
            ("r1", self.r1.shape(), vec![c.d_e]),
            ("w_r", self.w_r.shape(), vec![c.d_h, c.d_e]),
            ("w_entity", self.w_entity.shape(), vec![c.d_h, c.d_e]),
            ("w_dist", self.w_dist.shape(), vec![DIST_FEATURES]),
            ("w_length", self.w_length.shape(), vec![c.l_max, c.d_h + c.d_e]),
            ("w_e", self.w_e.shape(), vec![c.d_h, c.d_e]),
            ("w_delta", self.w_delta.shape(), vec![c.d_h, c.d_e]),
        ];
        for (name, got, want) in checks {
            if got != want.as_slice() {
                return Err(Error::config(format!(
                    "{name}: shape {got:?}, expected {want:?}"
                )));
            }
        }
        if self.cfsm.vocab_size() != vocab_size {
            return Err(Error::config(format!(
                "cfsm vocabulary {} does not match corpus vocabulary {vocab_size}",
                self.cfsm.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("embed".to_string(), &self.embed));
        self.lstm.visit(out);
        for (name, t) in [
            ("r0", &self.r0),
            ("r1", &self.r1),
            ("w_r", &self.w_r),
            ("w_entity", &self.w_entity),
            ("w_dist", &self.w_dist),
            ("w_length", &self.w_length),
            ("w_e", &self.w_e),
            ("w_delta", &self.w_delta),
        ] {
            out.push((name.to_string(), t));
        }
        self.cfsm.visit(out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("embed".to_string(), &mut self.embed));
        self.lstm.visit_mut(out);
        for (name, t) in [
            ("r0", &mut self.r0),
            ("r1", &mut self.r1),
            ("w_r", &mut self.w_r),
            ("w_entity", &mut self.w_entity),
            ("w_dist", &mut self.w_dist),
            ("w_length", &mut self.w_length),
            ("w_e", &mut self.w_e),
            ("w_delta", &mut self.w_delta),
        ] {
            out.push((name.to_string(), t));
        }
        self.cfsm.visit_mut(out);
    }

    pub fn bind<E: Engine>(&self, eng: &mut E) -> ParamsView<E::V> {
        ParamsView {
            embed: eng.leaf(self.embed.clone()),
            lstm: self.lstm.bind(eng),
            r0: eng.leaf(self.r0.clone()),
            r1: eng.leaf(self.r1.clone()),
            w_r: eng.leaf(self.w_r.clone()),
            w_entity: eng.leaf(self.w_entity.clone()),
            w_dist: eng.leaf(self.w_dist.clone()),
            w_length: eng.leaf(self.w_length.clone()),
            w_e: eng.leaf(self.w_e.clone()),
            w_delta: eng.leaf(self.w_delta.clone()),
            cfsm: self.cfsm.bind(eng),
        }
    }

    pub fn forward_view(&self) -> ParamsView<Rc<Tensor>> {
        self.bind(&mut Forward)
    }
}

/// Parameters bound into an engine.
#[derive(Clone)]
pub struct ParamsView<V> {
    pub embed: V,
    pub lstm: LstmView<V>,
    pub r0: V,
    pub r1: V,
    pub w_r: V,
    pub w_entity: V,
    pub w_dist: V,
    pub w_length: V,
    pub w_e: V,
    pub w_delta: V,
    pub cfsm: CfsmView<V>,
}

/// Source of the Gaussian draws behind new-entity embeddings (Eq. 8).
///
/// `Sample` records each draw so a proposal trajectory's noise can be
/// replayed when the joint model rescores it; `Deterministic` is the σ=0
/// oracle convention used by enumeration tests.
pub enum NoiseSource<'a> {
    Sample {
        rng: &'a mut ChaCha8Rng,
        recorded: Vec<Tensor>,
    },
    Replay {
        draws: &'a [Tensor],
        cursor: usize,
    },
    Deterministic,
}

impl<'a> NoiseSource<'a> {
    pub fn sample(rng: &'a mut ChaCha8Rng) -> NoiseSource<'a> {
        NoiseSource::Sample {
            rng,
            recorded: Vec::new(),
        }
    }

    pub fn replay(draws: &'a [Tensor]) -> NoiseSource<'a> {
        NoiseSource::Replay { draws, cursor: 0 }
    }

    pub fn deterministic() -> NoiseSource<'a> {
        NoiseSource::Deterministic
    }

    fn draw(&mut self, d: usize) -> Result<Tensor> {
        match self {
            NoiseSource::Sample { rng, recorded } => {
                let z = Tensor::vector(
                    (0..d).map(|_| StandardNormal.sample(*rng)).collect(),
                );
                recorded.push(z.clone());
                Ok(z)
            }
            NoiseSource::Replay { draws, cursor } => {
                let z = draws.get(*cursor).cloned().ok_or_else(|| {
                    Error::lifecycle("noise replay exhausted".to_string())
                })?;
                *cursor += 1;
                Ok(z)
            }
            NoiseSource::Deterministic => Ok(Tensor::zeros(&[d])),
        }
    }

    pub fn into_recorded(self) -> Vec<Tensor> {
        match self {
            NoiseSource::Sample { recorded, .. } => recorded,
            _ => Vec::new(),
        }
    }
}

/// Eq. 3: two-way log-softmax over bilinear scores h⊤ W_r r⃗.
pub fn dist_r<E: Engine>(eng: &mut E, view: &ParamsView<E::V>, h: &E::V) -> Result<E::V> {
    let s0 = eng.bilinear(h, &view.w_r, &view.r0)?;
    let s1 = eng.bilinear(h, &view.w_r, &view.r1)?;
    let scores = eng.stack(&[s0, s1])?;
    eng.softmax_log(&scores)
}

/// Eq. 5: log-softmax over linear scores of [h; e].
pub fn dist_l<E: Engine>(
    eng: &mut E,
    view: &ParamsView<E::V>,
    h: &E::V,
    e_embed: &E::V,
) -> Result<E::V> {
    let he = eng.concat(h, e_embed)?;
    let logits = eng.matvec(&view.w_length, &he)?;
    eng.softmax_log(&logits)
}

/// Eq. 8: unit-norm embedding sampled around r⃗_1.
pub fn create_entity<E: Engine>(
    eng: &mut E,
    view: &ParamsView<E::V>,
    sigma: f64,
    noise: &mut NoiseSource,
    d_e: usize,
) -> Result<E::V> {
    let mut z = noise.draw(d_e)?;
    z.scale_assign(sigma);
    let z = eng.leaf(z);
    let u = eng.add(&view.r1, &z)?;
    eng.l2_normalize(&u)
}

/// Eq. 9: gated convex combination of the old embedding and h_t, renormalized.
pub fn update_entity<E: Engine>(
    eng: &mut E,
    view: &ParamsView<E::V>,
    e_old: &E::V,
    h: &E::V,
) -> Result<E::V> {
    let score = eng.bilinear(h, &view.w_delta, e_old)?;
    let delta = eng.sigmoid(&score)?;
    let keep = eng.smul(&delta, e_old)?;
    let inv = eng.affine(&delta, -1.0, 1.0)?;
    let mix = eng.smul(&inv, h)?;
    let sum = eng.add(&keep, &mix)?;
    eng.l2_normalize(&sum)
}

/// Eq. 7: CFSM log-probability of `word` given rep = h + W_e·e_current.
/// `h_mask` applies inverted dropout to h only.
pub fn word_log_prob<E: Engine>(
    eng: &mut E,
    params: &ModelParams,
    view: &ParamsView<E::V>,
    h: &E::V,
    e_current: Option<&E::V>,
    word: usize,
    h_mask: Option<&Tensor>,
) -> Result<E::V> {
    let h = match h_mask {
        Some(m) => eng.mask(h, m)?,
        None => h.clone(),
    };
    let rep = match e_current {
        Some(e) => {
            let we = eng.matvec(&view.w_e, e)?;
            eng.add(&h, &we)?
        }
        None => h,
    };
    nn::cfsm_log_prob(eng, &params.cfsm, &view.cfsm, &rep, word)
}

/// Runs the LSTM over the token sequence; returns T+1 hidden states with
/// `hs[0]` the zero initial state. `input_masks` applies inverted dropout to
/// the word embeddings.
pub fn run_words<E: Engine>(
    eng: &mut E,
    view: &ParamsView<E::V>,
    d_h: usize,
    tokens: &[usize],
    input_masks: Option<&[Tensor]>,
) -> Result<Vec<E::V>> {
    let mut hs = Vec::with_capacity(tokens.len() + 1);
    let mut h = eng.leaf(Tensor::zeros(&[d_h]));
    let mut c = eng.leaf(Tensor::zeros(&[d_h]));
    hs.push(h.clone());
    for (t, &w) in tokens.iter().enumerate() {
        let mut x = eng.lookup(&view.embed, w)?;
        if let Some(masks) = input_masks {
            x = eng.mask(&x, &masks[t])?;
        }
        let (h2, c2) = nn::lstm_step(eng, &view.lstm, &h, &c, &x)?;
        h = h2;
        c = c2;
        hs.push(h.clone());
    }
    Ok(hs)
}

/// Inverted-dropout mask: entries are 0 with probability `rate`, else
/// 1/(1−rate).
pub fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, rate: f64) -> Tensor {
    let keep = 1.0 - rate;
    Tensor::vector(
        (0..n)
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect(),
    )
}

/// Entity-side state of one generative pass: the state machine, the evolving
/// embeddings, the lazily created new-entity candidate, and e_current.
pub struct Pass<E: Engine> {
    sm: StateMachine,
    embeds: Vec<E::V>,
    pending: Option<E::V>,
    e_current: E::V,
}

impl<E: Engine> Pass<E> {
    pub fn new(eng: &mut E, view: &ParamsView<E::V>, l_max: usize) -> Result<Pass<E>> {
        // before any mention, e_current is the generic entity prior
        let e_current = eng.l2_normalize(&view.r1)?;
        Ok(Pass {
            sm: StateMachine::new(l_max),
            embeds: Vec::new(),
            pending: None,
            e_current,
        })
    }

    /// Test/oracle constructor with pre-seeded entity embeddings.
    pub fn with_embeds(
        eng: &mut E,
        view: &ParamsView<E::V>,
        l_max: usize,
        embeds: Vec<E::V>,
        positions: &[usize],
    ) -> Result<Pass<E>> {
        let mut pass = Pass::new(eng, view, l_max)?;
        if embeds.len() != positions.len() {
            return Err(Error::contract("one last-mention position per embedding"));
        }
        let mut sm = StateMachine::new(l_max);
        for (i, &p) in positions.iter().enumerate() {
            while sm.position() < p {
                sm.advance(EntityAnnotation::outside())?;
            }
            sm.advance(EntityAnnotation::mention(i + 1, 1))?;
        }
        pass.sm = sm;
        if let Some(last) = embeds.last() {
            pass.e_current = last.clone();
        }
        pass.embeds = embeds;
        Ok(pass)
    }

    pub fn sm(&self) -> &StateMachine {
        &self.sm
    }

    /// Embedding of an admissible candidate; the fresh candidate for
    /// index K+1 (must have been created by `candidate_scores`).
    pub fn embed_of(&self, e: usize) -> Result<&E::V> {
        if e == self.embeds.len() + 1 {
            self.pending
                .as_ref()
                .ok_or_else(|| Error::lifecycle(format!("no embedding created for candidate {e}")))
        } else {
            self.embeds
                .get(e.checked_sub(1).ok_or_else(|| Error::lifecycle("entity index 0"))?)
                .ok_or_else(|| Error::lifecycle(format!("no embedding for entity {e}")))
        }
    }

    /// Unnormalized Eq. 4 scores per admissible candidate. Creates the
    /// new-entity candidate embedding from `noise` as a side effect.
    pub fn candidate_scores(
        &mut self,
        eng: &mut E,
        params: &ModelParams,
        view: &ParamsView<E::V>,
        h: &E::V,
        noise: &mut NoiseSource,
    ) -> Result<(Vec<usize>, Vec<E::V>)> {
        let cands = self.sm.admissible_entities()?;
        let t = self.sm.position();
        self.pending = Some(create_entity(
            eng,
            view,
            params.config.sigma,
            noise,
            params.config.d_e,
        )?);
        let mut scores = Vec::with_capacity(cands.len());
        for &e in &cands {
            let embed = self.embed_of(e)?.clone();
            let mut s = eng.bilinear(h, &view.w_entity, &embed)?;
            if e <= self.embeds.len() {
                let f = entity_state::distance_features(self.sm.registry(), e, t)?;
                let f = eng.leaf(f);
                let d = eng.dot(&view.w_dist, &f)?;
                s = eng.add(&s, &d)?;
            }
            scores.push(s);
        }
        Ok((cands, scores))
    }

    /// Eq. 4: log-probabilities over the admissible candidates.
    pub fn entity_log_probs(
        &mut self,
        eng: &mut E,
        params: &ModelParams,
        view: &ParamsView<E::V>,
        h: &E::V,
        noise: &mut NoiseSource,
    ) -> Result<(Vec<usize>, E::V)> {
        let (cands, scores) = self.candidate_scores(eng, params, view, h, noise)?;
        let stacked = eng.stack(&scores)?;
        Ok((cands, eng.softmax_log(&stacked)?))
    }

    /// Entity context for predicting the word at the current position.
    pub fn word_context(&self, ann: &EntityAnnotation) -> Result<&E::V> {
        if ann.r {
            self.embed_of(ann.e)
        } else {
            Ok(&self.e_current)
        }
    }

    /// Applies the step's annotation: registers a selected new entity,
    /// advances the state machine, and updates the mentioned entity with h_t.
    pub fn commit(
        &mut self,
        eng: &mut E,
        view: &ParamsView<E::V>,
        ann: EntityAnnotation,
        h_t: &E::V,
    ) -> Result<()> {
        if self.sm.at_choice_point() && ann.r && ann.e == self.embeds.len() + 1 {
            let fresh = self.pending.take().ok_or_else(|| {
                Error::lifecycle(format!("entity {} selected before creation", ann.e))
            })?;
            self.embeds.push(fresh);
        }
        self.pending = None;
        self.sm.advance(ann)?;
        if ann.r {
            let e_new = update_entity(eng, view, &self.embeds[ann.e - 1], h_t)?;
            self.embeds[ann.e - 1] = e_new.clone();
            self.e_current = e_new;
        }
        Ok(())
    }
}

/// Log-probabilities of the sub-decisions actually taken at one step.
#[derive(Clone, Debug)]
pub struct StepDecision {
    pub annotation: EntityAnnotation,
    pub word: usize,
    pub lp_r: Option<f64>,
    pub lp_e: Option<f64>,
    pub lp_l: Option<f64>,
    pub lp_x: f64,
}

impl StepDecision {
    pub fn total(&self) -> f64 {
        self.lp_r.unwrap_or(0.0) + self.lp_e.unwrap_or(0.0) + self.lp_l.unwrap_or(0.0) + self.lp_x
    }
}

/// Eq. 10: teacher-forced joint log-probability of a fully annotated
/// document, with the per-step breakdown.
///
/// `hs` are the T+1 hidden states from [`run_words`] (hidden states depend
/// only on the words, so callers can share them across trajectories).
/// `h_masks`, when present, applies dropout to h in the word term only.
#[allow(clippy::too_many_arguments)]
pub fn doc_log_prob<E: Engine>(
    eng: &mut E,
    params: &ModelParams,
    view: &ParamsView<E::V>,
    tokens: &[usize],
    annotations: &[EntityAnnotation],
    hs: &[E::V],
    noise: &mut NoiseSource,
    h_masks: Option<&[Tensor]>,
) -> Result<(E::V, Vec<StepDecision>)> {
    if tokens.len() != annotations.len() {
        return Err(Error::contract(format!(
            "{} tokens but {} annotations",
            tokens.len(),
            annotations.len()
        )));
    }
    if hs.len() != tokens.len() + 1 {
        return Err(Error::contract("hs must hold T+1 hidden states"));
    }
    let mut pass = Pass::new(eng, view, params.config.l_max)?;
    let mut total = eng.leaf(Tensor::scalar(0.0));
    let mut steps = Vec::with_capacity(tokens.len());
    for (t, (&word, ann)) in tokens.iter().zip(annotations).enumerate() {
        let h_prev = &hs[t];
        let mut step = StepDecision {
            annotation: *ann,
            word,
            lp_r: None,
            lp_e: None,
            lp_l: None,
            lp_x: 0.0,
        };
        let blind = params.config.entity_blind;
        if !blind {
            if pass.sm.at_choice_point() {
                let lr = dist_r(eng, view, h_prev)?;
                let lp_r = eng.pick(&lr, ann.r as usize)?;
                step.lp_r = Some(eng.scalar_value(&lp_r));
                total = eng.add(&total, &lp_r)?;
                if ann.r {
                    let (cands, le) = pass.entity_log_probs(eng, params, view, h_prev, noise)?;
                    let idx = cands.iter().position(|&c| c == ann.e).ok_or_else(|| {
                        Error::contract(format!("token {t}: entity {} not admissible", ann.e))
                    })?;
                    let lp_e = eng.pick(&le, idx)?;
                    step.lp_e = Some(eng.scalar_value(&lp_e));
                    total = eng.add(&total, &lp_e)?;
                    if ann.l < 1 || ann.l > params.config.l_max {
                        return Err(Error::contract(format!(
                            "token {t}: length {} outside 1..={}",
                            ann.l, params.config.l_max
                        )));
                    }
                    let e_embed = pass.embed_of(ann.e)?.clone();
                    let ll = dist_l(eng, view, h_prev, &e_embed)?;
                    let lp_l = eng.pick(&ll, ann.l - 1)?;
                    step.lp_l = Some(eng.scalar_value(&lp_l));
                    total = eng.add(&total, &lp_l)?;
                }
            } else {
                let forced = pass.sm.forced().expect("mid-mention");
                if *ann != forced {
                    return Err(Error::contract(format!(
                        "token {t}: forced continuation (r=1, e={}, l={}) but annotation has (r={}, e={}, l={})",
                        forced.e, forced.l, ann.r as u8, ann.e, ann.l
                    )));
                }
            }
        }
        let ctx = if blind {
            None
        } else {
            Some(pass.word_context(ann)?.clone())
        };
        let lp_x = word_log_prob(
            eng,
            params,
            view,
            h_prev,
            ctx.as_ref(),
            word,
            h_masks.map(|m| &m[t]),
        )?;
        step.lp_x = eng.scalar_value(&lp_x);
        total = eng.add(&total, &lp_x)?;
        if blind {
            // structure ignored entirely in the ablation
        } else {
            pass.commit(eng, view, *ann, &hs[t + 1])?;
        }
        steps.push(step);
    }
    Ok((total, steps))
}

/// Forward-only convenience wrapper around [`doc_log_prob`].
pub fn forward_doc_log_prob(
    params: &ModelParams,
    tokens: &[usize],
    annotations: &[EntityAnnotation],
    noise: &mut NoiseSource,
) -> Result<(f64, Vec<StepDecision>)> {
    let mut eng = Forward;
    let view = params.bind(&mut eng);
    let hs = run_words(&mut eng, &view, params.config.d_h, tokens, None)?;
    let (total, steps) =
        doc_log_prob(&mut eng, params, &view, tokens, annotations, &hs, noise, None)?;
    Ok((total.item(), steps))
}

/// Draws an index from a categorical given log-probabilities.
pub fn sample_from_log_probs(rng: &mut ChaCha8Rng, log_probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

fn sample_word(
    eng: &mut Forward,
    params: &ModelParams,
    view: &ParamsView<Rc<Tensor>>,
    rep: &Rc<Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let class_lp = nn::class_log_probs(eng, &view.cfsm, rep)?;
    let class = sample_from_log_probs(rng, class_lp.data());
    let words = &params.cfsm.class_words[class];
    if words.len() == 1 {
        return Ok(words[0]);
    }
    let word_lp = nn::word_log_probs(eng, &view.cfsm, rep, class)?;
    Ok(words[sample_from_log_probs(rng, word_lp.data())])
}

/// Ancestral sampling of a document following the generative story; stops at
/// the end-of-document token or `max_len`.
pub fn sample_document(
    params: &ModelParams,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<usize>, Vec<EntityAnnotation>)> {
    if max_len == 0 {
        return Err(Error::contract("max_len must be ≥ 1"));
    }
    let mut eng = Forward;
    let view = params.bind(&mut eng);
    let mut pass = Pass::new(&mut eng, &view, params.config.l_max)?;
    let mut h = eng.leaf(Tensor::zeros(&[params.config.d_h]));
    let mut c = eng.leaf(Tensor::zeros(&[params.config.d_h]));
    let mut tokens = Vec::new();
    let mut anns = Vec::new();
    let blind = params.config.entity_blind;
    loop {
        let ann = if blind {
            EntityAnnotation::outside()
        } else if let Some(forced) = pass.sm.forced() {
            forced
        } else {
            let lr = dist_r(&mut eng, &view, &h)?;
            if sample_from_log_probs(rng, lr.data()) == 0 {
                EntityAnnotation::outside()
            } else {
                let mut noise = NoiseSource::sample(rng);
                let (cands, le) =
                    pass.entity_log_probs(&mut eng, params, &view, &h, &mut noise)?;
                let e = cands[sample_from_log_probs(rng, le.data())];
                let e_embed = pass.embed_of(e)?.clone();
                let ll = dist_l(&mut eng, &view, &h, &e_embed)?;
                let l = sample_from_log_probs(rng, ll.data()) + 1;
                EntityAnnotation::mention(e, l)
            }
        };
        let ctx = if blind {
            None
        } else {
            Some(pass.word_context(&ann)?.clone())
        };
        let rep = match &ctx {
            Some(e) => {
                let we = eng.matvec(&view.w_e, e)?;
                eng.add(&h, &we)?
            }
            None => h.clone(),
        };
        let word = sample_word(&mut eng, params, &view, &rep, rng)?;
        let x = eng.lookup(&view.embed, word)?;
        let (h2, c2) = nn::lstm_step(&mut eng, &view.lstm, &h, &c, &x)?;
        h = h2;
        c = c2;
        if !blind {
            pass.commit(&mut eng, &view, ann, &h)?;
        }
        tokens.push(word);
        anns.push(ann);
        if word == Vocabulary::EOD || tokens.len() >= max_len {
            return Ok((tokens, anns));
        }
    }
}

/// §5.1 discriminative proposal Q: samples (R, E, L) for observed words,
/// conditioning each step's decisions on h_t instead of h_{t−1}.
///
/// Returns the trajectory and its total log Q. New-entity noise draws go
/// through `noise` so the caller can record and replay them when scoring the
/// same trajectory under the joint model.
pub fn proposal_sample(
    params: &ModelParams,
    view: &ParamsView<Rc<Tensor>>,
    tokens: &[usize],
    hs: &[Rc<Tensor>],
    noise: &mut NoiseSource,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<EntityAnnotation>, f64)> {
    if hs.len() != tokens.len() + 1 {
        return Err(Error::contract("hs must hold T+1 hidden states"));
    }
    let mut eng = Forward;
    let mut pass = Pass::new(&mut eng, view, params.config.l_max)?;
    let mut anns = Vec::with_capacity(tokens.len());
    let mut log_q = 0.0;
    for t in 0..tokens.len() {
        let h_t = &hs[t + 1];
        let ann = if let Some(forced) = pass.sm.forced() {
            forced
        } else {
            let lr = dist_r(&mut eng, view, h_t)?;
            let r = sample_from_log_probs(rng, lr.data());
            log_q += lr.data()[r];
            if r == 0 {
                EntityAnnotation::outside()
            } else {
                let (cands, le) = pass.entity_log_probs(&mut eng, params, view, h_t, noise)?;
                let idx = sample_from_log_probs(rng, le.data());
                log_q += le.data()[idx];
                let e = cands[idx];
                let e_embed = pass.embed_of(e)?.clone();
                let ll = dist_l(&mut eng, view, h_t, &e_embed)?;
                let li = sample_from_log_probs(rng, ll.data());
                log_q += ll.data()[li];
                EntityAnnotation::mention(e, li + 1)
            }
        };
        pass.commit(&mut eng, view, ann, h_t)?;
        anns.push(ann);
    }
    if !log_q.is_finite() || log_q > 0.0 {
        return Err(Error::Numerical(format!("proposal log Q = {log_q}")));
    }
    Ok((anns, log_q))
}

/// Bound parameter values in the same naming scheme as `visit`.
pub fn param_nodes<V: Clone>(view: &ParamsView<V>) -> Vec<(String, V)> {
    let mut out: Vec<(String, V)> = vec![
        ("embed".into(), view.embed.clone()),
        ("lstm.w_xi".into(), view.lstm.w_xi.clone()),
        ("lstm.w_hi".into(), view.lstm.w_hi.clone()),
        ("lstm.b_i".into(), view.lstm.b_i.clone()),
        ("lstm.w_xf".into(), view.lstm.w_xf.clone()),
        ("lstm.w_hf".into(), view.lstm.w_hf.clone()),
        ("lstm.b_f".into(), view.lstm.b_f.clone()),
        ("lstm.w_xo".into(), view.lstm.w_xo.clone()),
        ("lstm.w_ho".into(), view.lstm.w_ho.clone()),
        ("lstm.b_o".into(), view.lstm.b_o.clone()),
        ("lstm.w_xc".into(), view.lstm.w_xc.clone()),
        ("lstm.w_hc".into(), view.lstm.w_hc.clone()),
        ("lstm.b_c".into(), view.lstm.b_c.clone()),
        ("r0".into(), view.r0.clone()),
        ("r1".into(), view.r1.clone()),
        ("w_r".into(), view.w_r.clone()),
        ("w_entity".into(), view.w_entity.clone()),
        ("w_dist".into(), view.w_dist.clone()),
        ("w_length".into(), view.w_length.clone()),
        ("w_e".into(), view.w_e.clone()),
        ("w_delta".into(), view.w_delta.clone()),
        ("cfsm.class_w".into(), view.cfsm.class_w.clone()),
        ("cfsm.class_b".into(), view.cfsm.class_b.clone()),
    ];
    for (c, n) in view.cfsm.word_w.iter().enumerate() {
        out.push((format!("cfsm.word_w.{c}"), n.clone()));
    }
    for (c, n) in view.cfsm.word_b.iter().enumerate() {
        out.push((format!("cfsm.word_b.{c}"), n.clone()));
    }
    out
}

/// Gradient oracle shared by unit and acceptance tests: max relative error
/// of every parameter group's analytic `doc_log_prob` gradient against
/// central finite differences (σ=0 noise so both sides are deterministic).
pub fn doc_gradient_max_error(
    params: &ModelParams,
    tokens: &[usize],
    ann: &[EntityAnnotation],
) -> Result<f64> {
    use crate::tensor::{finite_difference_grad, max_rel_error, Tape};

    let mut tape = Tape::new();
    let view = params.bind(&mut tape);
    let hs = run_words(&mut tape, &view, params.config.d_h, tokens, None)?;
    let mut noise = NoiseSource::deterministic();
    let (total, _) = doc_log_prob(&mut tape, params, &view, tokens, ann, &hs, &mut noise, None)?;
    let grads = tape.backward(total)?;

    let mut names = Vec::new();
    params.visit(&mut names);
    let node_of = param_nodes(&view);

    let mut worst = 0.0f64;
    for (name, node) in &node_of {
        let base = names
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::contract(format!("missing parameter {name}")))?
            .1;
        let analytic = grads.get_or_zeros(*node, base.shape());
        let fd = finite_difference_grad(
            &mut |xs: &[Tensor]| {
                let mut p = params.clone();
                let mut named = Vec::new();
                p.visit_mut(&mut named);
                for (n, t) in named {
                    if &n == name {
                        *t = xs[0].clone();
                    }
                }
                let mut noise = NoiseSource::deterministic();
                forward_doc_log_prob(&p, tokens, ann, &mut noise).unwrap().0
            },
            std::slice::from_ref(base),
            1e-5,
        );
        worst = worst.max(max_rel_error(&analytic, &fd[0]));
    }
    Ok(worst)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Checkpoint {
    version: u32,
    vocab_hash: u64,
    vocab: Vocabulary,
    params: ModelParams,
}

/// Writes a versioned JSON checkpoint: configuration, vocabulary (with
/// FNV hash), and every parameter tensor. Byte-deterministic.
pub fn save_checkpoint(path: &Path, params: &ModelParams, vocab: &Vocabulary) -> Result<()> {
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        vocab_hash: vocab.hash(),
        vocab: vocab.clone(),
        params: params.clone(),
    };
    let json = serde_json::to_string(&ckpt).map_err(|e| Error::Serde(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Loads a checkpoint, verifying version, vocabulary hash, and all shapes.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Vocabulary)> {
    let json = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint =
        serde_json::from_str(&json).map_err(|e| Error::Serde(e.to_string()))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::config(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.vocab.hash() != ckpt.vocab_hash {
        return Err(Error::config(
            "checkpoint vocabulary hash mismatch".to_string(),
        ));
    }
    ckpt.params.validate(ckpt.vocab.len())?;
    Ok((ckpt.params, ckpt.vocab))
}
