//! Neural building blocks: LSTM cell, class-factorized softmax, initialization.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Engine, Tensor};

/// Uniform Glorot sample for an `m×n` matrix: ±sqrt(6/(m+n)).
pub fn glorot_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    Tensor::matrix(rows, cols, data).expect("sized to shape")
}

pub fn glorot_vector(rng: &mut impl Rng, n: usize) -> Tensor {
    let bound = (6.0 / (n + 1) as f64).sqrt();
    Tensor::vector((0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Single-layer LSTM cell parameters.
///
/// Four gates (input, forget, output, candidate), each with an
/// input-to-hidden matrix, a hidden-to-hidden matrix, and a bias.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct LstmCell {
    pub d_x: usize,
    pub d_h: usize,
    pub w_xi: Tensor,
    pub w_hi: Tensor,
    pub b_i: Tensor,
    pub w_xf: Tensor,
    pub w_hf: Tensor,
    pub b_f: Tensor,
    pub w_xo: Tensor,
    pub w_ho: Tensor,
    pub b_o: Tensor,
    pub w_xc: Tensor,
    pub w_hc: Tensor,
    pub b_c: Tensor,
}

impl LstmCell {
    pub fn new(rng: &mut impl Rng, d_x: usize, d_h: usize) -> LstmCell {
        LstmCell {
            d_x,
            d_h,
            w_xi: glorot_matrix(rng, d_h, d_x),
            w_hi: glorot_matrix(rng, d_h, d_h),
            b_i: Tensor::zeros(&[d_h]),
            w_xf: glorot_matrix(rng, d_h, d_x),
            w_hf: glorot_matrix(rng, d_h, d_h),
            b_f: Tensor::zeros(&[d_h]),
            w_xo: glorot_matrix(rng, d_h, d_x),
            w_ho: glorot_matrix(rng, d_h, d_h),
            b_o: Tensor::zeros(&[d_h]),
            w_xc: glorot_matrix(rng, d_h, d_x),
            w_hc: glorot_matrix(rng, d_h, d_h),
            b_c: Tensor::zeros(&[d_h]),
        }
    }

    pub fn zeros(d_x: usize, d_h: usize) -> LstmCell {
        LstmCell {
            d_x,
            d_h,
            w_xi: Tensor::zeros(&[d_h, d_x]),
            w_hi: Tensor::zeros(&[d_h, d_h]),
            b_i: Tensor::zeros(&[d_h]),
            w_xf: Tensor::zeros(&[d_h, d_x]),
            w_hf: Tensor::zeros(&[d_h, d_h]),
            b_f: Tensor::zeros(&[d_h]),
            w_xo: Tensor::zeros(&[d_h, d_x]),
            w_ho: Tensor::zeros(&[d_h, d_h]),
            b_o: Tensor::zeros(&[d_h]),
            w_xc: Tensor::zeros(&[d_h, d_x]),
            w_hc: Tensor::zeros(&[d_h, d_h]),
            b_c: Tensor::zeros(&[d_h]),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        for (name, t) in [
            ("lstm.w_xi", &self.w_xi),
            ("lstm.w_hi", &self.w_hi),
            ("lstm.b_i", &self.b_i),
            ("lstm.w_xf", &self.w_xf),
            ("lstm.w_hf", &self.w_hf),
            ("lstm.b_f", &self.b_f),
            ("lstm.w_xo", &self.w_xo),
            ("lstm.w_ho", &self.w_ho),
            ("lstm.b_o", &self.b_o),
            ("lstm.w_xc", &self.w_xc),
            ("lstm.w_hc", &self.w_hc),
            ("lstm.b_c", &self.b_c),
        ] {
            out.push((name.to_string(), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (name, t) in [
            ("lstm.w_xi", &mut self.w_xi),
            ("lstm.w_hi", &mut self.w_hi),
            ("lstm.b_i", &mut self.b_i),
            ("lstm.w_xf", &mut self.w_xf),
            ("lstm.w_hf", &mut self.w_hf),
            ("lstm.b_f", &mut self.b_f),
            ("lstm.w_xo", &mut self.w_xo),
            ("lstm.w_ho", &mut self.w_ho),
            ("lstm.b_o", &mut self.b_o),
            ("lstm.w_xc", &mut self.w_xc),
            ("lstm.w_hc", &mut self.w_hc),
            ("lstm.b_c", &mut self.b_c),
        ] {
            out.push((name.to_string(), t));
        }
    }
}

/// LSTM weights bound into an engine (node ids on a tape, or plain tensors).
#[derive(Clone)]
pub struct LstmView<V> {
    pub w_xi: V,
    pub w_hi: V,
    pub b_i: V,
    pub w_xf: V,
    pub w_hf: V,
    pub b_f: V,
    pub w_xo: V,
    pub w_ho: V,
    pub b_o: V,
    pub w_xc: V,
    pub w_hc: V,
    pub b_c: V,
}

impl LstmCell {
    pub fn bind<E: Engine>(&self, eng: &mut E) -> LstmView<E::V> {
        LstmView {
            w_xi: eng.leaf(self.w_xi.clone()),
            w_hi: eng.leaf(self.w_hi.clone()),
            b_i: eng.leaf(self.b_i.clone()),
            w_xf: eng.leaf(self.w_xf.clone()),
            w_hf: eng.leaf(self.w_hf.clone()),
            b_f: eng.leaf(self.b_f.clone()),
            w_xo: eng.leaf(self.w_xo.clone()),
            w_ho: eng.leaf(self.w_ho.clone()),
            b_o: eng.leaf(self.b_o.clone()),
            w_xc: eng.leaf(self.w_xc.clone()),
            w_hc: eng.leaf(self.w_hc.clone()),
            b_c: eng.leaf(self.b_c.clone()),
        }
    }
}

/// One step of the standard LSTM recurrence.
pub fn lstm_step<E: Engine>(
    eng: &mut E,
    w: &LstmView<E::V>,
    h_prev: &E::V,
    c_prev: &E::V,
    x: &E::V,
) -> Result<(E::V, E::V)> {
    let gate = |eng: &mut E, wx: &E::V, wh: &E::V, b: &E::V| -> Result<E::V> {
        let a = eng.matvec(wx, x)?;
        let bh = eng.matvec(wh, h_prev)?;
        let s = eng.add(&a, &bh)?;
        eng.add(&s, b)
    };
    let i = gate(eng, &w.w_xi, &w.w_hi, &w.b_i)?;
    let i = eng.sigmoid(&i)?;
    let f = gate(eng, &w.w_xf, &w.w_hf, &w.b_f)?;
    let f = eng.sigmoid(&f)?;
    let o = gate(eng, &w.w_xo, &w.w_ho, &w.b_o)?;
    let o = eng.sigmoid(&o)?;
    let g = gate(eng, &w.w_xc, &w.w_hc, &w.b_c)?;
    let g = eng.tanh(&g)?;
    let fc = eng.mul(&f, c_prev)?;
    let ig = eng.mul(&i, &g)?;
    let c = eng.add(&fc, &ig)?;
    let tc = eng.tanh(&c)?;
    let h = eng.mul(&o, &tc)?;
    Ok((h, c))
}

/// Frequency-binned word classes: frequency-sorted vocabulary split into
/// contiguous buckets of approximately equal total frequency.
///
/// Deterministic given the counts; ties in frequency break by word id.
pub fn assign_classes(vocab_counts: &[u64], num_classes: usize) -> Result<Vec<usize>> {
    let v = vocab_counts.len();
    if num_classes == 0 || num_classes > v {
        return Err(Error::config(format!(
            "class count {num_classes} out of range for vocabulary of {v}"
        )));
    }
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by_key(|&w| (std::cmp::Reverse(vocab_counts[w]), w));
    let total: u64 = vocab_counts.iter().sum();
    let mut assignment = vec![0usize; v];
    let mut class = 0usize;
    let mut mass = 0u64;
    for (pos, &w) in order.iter().enumerate() {
        assignment[w] = class;
        mass += vocab_counts[w];
        let remaining_words = v - pos - 1;
        let remaining_classes = num_classes - class - 1;
        let target = total as f64 * (class + 1) as f64 / num_classes as f64;
        if class + 1 < num_classes
            && (mass as f64 >= target || remaining_words == remaining_classes)
        {
            class += 1;
        }
    }
    Ok(assignment)
}

/// Class-factorized softmax: `log P(word) = log P(class) + log P(word|class)`.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CfsmLayer {
    pub num_classes: usize,
    pub class_of: Vec<usize>,
    /// Words of each class, in ascending word-id order.
    pub class_words: Vec<Vec<usize>>,
    /// Position of each word inside its class word list.
    pub word_pos: Vec<usize>,
    pub class_w: Tensor,
    pub class_b: Tensor,
    pub word_w: Vec<Tensor>,
    pub word_b: Vec<Tensor>,
}

impl CfsmLayer {
    pub fn new(rng: &mut impl Rng, d_h: usize, class_of: Vec<usize>) -> Result<CfsmLayer> {
        let num_classes = class_of.iter().copied().max().map_or(0, |m| m + 1);
        if num_classes == 0 {
            return Err(Error::config("empty class assignment".to_string()));
        }
        let mut class_words = vec![Vec::new(); num_classes];
        let mut word_pos = vec![0usize; class_of.len()];
        for (w, &c) in class_of.iter().enumerate() {
            word_pos[w] = class_words[c].len();
            class_words[c].push(w);
        }
        if class_words.iter().any(|ws| ws.is_empty()) {
            return Err(Error::config("class assignment is not onto".to_string()));
        }
        let word_w = class_words
            .iter()
            .map(|ws| glorot_matrix(rng, ws.len(), d_h))
            .collect();
        let word_b = class_words
            .iter()
            .map(|ws| Tensor::zeros(&[ws.len()]))
            .collect();
        Ok(CfsmLayer {
            num_classes,
            class_w: glorot_matrix(rng, num_classes, d_h),
            class_b: Tensor::zeros(&[num_classes]),
            word_w,
            word_b,
            class_of,
            class_words,
            word_pos,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.class_of.len()
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, &'a Tensor)>) {
        out.push(("cfsm.class_w".to_string(), &self.class_w));
        out.push(("cfsm.class_b".to_string(), &self.class_b));
        for (c, t) in self.word_w.iter().enumerate() {
            out.push((format!("cfsm.word_w.{c}"), t));
        }
        for (c, t) in self.word_b.iter().enumerate() {
            out.push((format!("cfsm.word_b.{c}"), t));
        }
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push(("cfsm.class_w".to_string(), &mut self.class_w));
        out.push(("cfsm.class_b".to_string(), &mut self.class_b));
        for (c, t) in self.word_w.iter_mut().enumerate() {
            out.push((format!("cfsm.word_w.{c}"), t));
        }
        for (c, t) in self.word_b.iter_mut().enumerate() {
            out.push((format!("cfsm.word_b.{c}"), t));
        }
    }

    pub fn bind<E: Engine>(&self, eng: &mut E) -> CfsmView<E::V> {
        CfsmView {
            class_w: eng.leaf(self.class_w.clone()),
            class_b: eng.leaf(self.class_b.clone()),
            word_w: self.word_w.iter().map(|t| eng.leaf(t.clone())).collect(),
            word_b: self.word_b.iter().map(|t| eng.leaf(t.clone())).collect(),
        }
    }
}

#[derive(Clone)]
pub struct CfsmView<V> {
    pub class_w: V,
    pub class_b: V,
    pub word_w: Vec<V>,
    pub word_b: Vec<V>,
}

/// Log-probability of one word under the two-step prediction.
pub fn cfsm_log_prob<E: Engine>(
    eng: &mut E,
    layer: &CfsmLayer,
    view: &CfsmView<E::V>,
    rep: &E::V,
    word: usize,
) -> Result<E::V> {
    if word >= layer.class_of.len() {
        return Err(Error::Vocab(word));
    }
    let class = layer.class_of[word];
    let class_lp = class_log_probs(eng, view, rep)?;
    let lp_c = eng.pick(&class_lp, class)?;
    if layer.class_words[class].len() == 1 {
        return Ok(lp_c);
    }
    let word_lp = word_log_probs(eng, view, rep, class)?;
    let lp_w = eng.pick(&word_lp, layer.word_pos[word])?;
    eng.add(&lp_c, &lp_w)
}

pub fn class_log_probs<E: Engine>(
    eng: &mut E,
    view: &CfsmView<E::V>,
    rep: &E::V,
) -> Result<E::V> {
    let logits = eng.matvec(&view.class_w, rep)?;
    let logits = eng.add(&logits, &view.class_b)?;
    eng.softmax_log(&logits)
}

pub fn word_log_probs<E: Engine>(
    eng: &mut E,
    view: &CfsmView<E::V>,
    rep: &E::V,
    class: usize,
) -> Result<E::V> {
    let logits = eng.matvec(&view.word_w[class], rep)?;
    let logits = eng.add(&logits, &view.word_b[class])?;
    eng.softmax_log(&logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_rel_error, Forward, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lstm_zero_weights_forced_values() {
        // gates = σ(0) = 0.5, candidate = tanh(0) = 0 ⇒ c = 0.5·c_prev, h = 0.5·tanh(c)
        let cell = LstmCell::zeros(2, 3);
        let mut eng = Forward;
        let view = cell.bind(&mut eng);
        let h0 = eng.leaf(Tensor::vector(vec![0.3, -0.2, 0.5]));
        let c0 = eng.leaf(Tensor::vector(vec![1.0, -1.0, 2.0]));
        let x = eng.leaf(Tensor::vector(vec![0.7, 0.1]));
        let (h, c) = lstm_step(&mut eng, &view, &h0, &c0, &x).unwrap();
        for (i, cp) in [1.0, -1.0, 2.0].iter().enumerate() {
            assert!((c.data()[i] - 0.5 * cp).abs() < 1e-15);
            assert!((h.data()[i] - 0.5 * (0.5 * cp).tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_zero_everything_gives_zero_h() {
        let cell = LstmCell::zeros(2, 3);
        let mut eng = Forward;
        let view = cell.bind(&mut eng);
        let z3 = eng.leaf(Tensor::zeros(&[3]));
        let x = eng.leaf(Tensor::zeros(&[2]));
        let (h, _) = lstm_step(&mut eng, &view, &z3, &z3, &x).unwrap();
        assert_eq!(h.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_bounded_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = LstmCell::new(&mut rng, 4, 8);
        let mut eng = Forward;
        let view = cell.bind(&mut eng);
        let mut h = eng.leaf(Tensor::zeros(&[8]));
        let mut c = eng.leaf(Tensor::zeros(&[8]));
        for _ in 0..20 {
            let x = eng.leaf(glorot_vector(&mut rng, 4));
            let (h2, c2) = lstm_step(&mut eng, &view, &h, &c, &x).unwrap();
            h = h2;
            c = c2;
            assert!(h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    /// Gradient check through three chained LSTM steps.
    #[test]
    fn lstm_gradient_three_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cell = LstmCell::new(&mut rng, 3, 8);
        let xs: Vec<Tensor> = (0..3).map(|_| glorot_vector(&mut rng, 3)).collect();

        type Run = (Tape, Vec<crate::tensor::NodeId>, crate::tensor::NodeId);
        let run = |cell: &LstmCell, xs: &[Tensor]| -> Run {
            let mut tape = Tape::new();
            let view = cell.bind(&mut tape);
            let mut h = Engine::leaf(&mut tape, Tensor::zeros(&[8]));
            let mut c = Engine::leaf(&mut tape, Tensor::zeros(&[8]));
            for x in xs {
                let xv = Engine::leaf(&mut tape, x.clone());
                let (h2, c2) = lstm_step(&mut tape, &view, &h, &c, &xv).unwrap();
                h = h2;
                c = c2;
            }
            let loss = Engine::sum(&mut tape, &h).unwrap();
            let ids = vec![
                view.w_xi, view.w_hi, view.b_i, view.w_xf, view.w_hf, view.b_f, view.w_xo,
                view.w_ho, view.b_o, view.w_xc, view.w_hc, view.b_c,
            ];
            (tape, ids, loss)
        };

        let (tape, ids, loss) = run(&cell, &xs);
        let grads = tape.backward(loss).unwrap();

        let mut named: Vec<(String, &Tensor)> = Vec::new();
        cell.visit(&mut named);
        let tensors: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
        let mut f = |params: &[Tensor]| -> f64 {
            let mut c2 = cell.clone();
            let mut named_mut: Vec<(String, &mut Tensor)> = Vec::new();
            c2.visit_mut(&mut named_mut);
            for ((_, slot), value) in named_mut.iter_mut().zip(params) {
                **slot = value.clone();
            }
            let (t, _, l) = run(&c2, &xs);
            t.scalar_value(&l)
        };
        let numeric = finite_difference_grad(&mut f, &tensors, 1e-5);
        for (i, id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(*id, tensors[i].shape());
            let err = max_rel_error(&analytic, &numeric[i]);
            assert!(err < 1e-4, "param {} rel err {err}", named[i].0);
        }
    }

    #[test]
    fn assign_classes_trivial() {
        let counts = vec![5, 5, 5];
        assert_eq!(assign_classes(&counts, 1).unwrap(), vec![0, 0, 0]);
        let each = assign_classes(&counts, 3).unwrap();
        let mut sorted = each.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2]);
        assert!(assign_classes(&counts, 4).is_err());
        assert!(assign_classes(&counts, 0).is_err());
    }

    #[test]
    fn assign_classes_equal_mass_split() {
        // counts a:8 b:4 c:2 d:2, C=2 → {a} | {b,c,d}
        let counts = vec![8, 4, 2, 2];
        assert_eq!(assign_classes(&counts, 2).unwrap(), vec![0, 1, 1, 1]);
    }

    #[test]
    fn assign_classes_partition_property() {
        let counts: Vec<u64> = (0..57).map(|i| (i * 7 % 23 + 1) as u64).collect();
        for c in [1, 2, 5, 10, 57] {
            let assign = assign_classes(&counts, c).unwrap();
            assert_eq!(assign.len(), counts.len());
            let mut seen = vec![false; c];
            for &cl in &assign {
                assert!(cl < c);
                seen[cl] = true;
            }
            assert!(seen.iter().all(|&s| s), "every class non-empty for C={c}");
        }
    }

    #[test]
    fn cfsm_zero_weight_symmetry() {
        // 1 class, 2 words, zero weights → log 0.5 either word
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = CfsmLayer::new(&mut rng, 4, vec![0, 0]).unwrap();
        layer.class_w = Tensor::zeros(&[1, 4]);
        layer.word_w[0] = Tensor::zeros(&[2, 4]);
        let mut eng = Forward;
        let view = layer.bind(&mut eng);
        let rep = eng.leaf(Tensor::vector(vec![0.3, -1.0, 0.2, 0.9]));
        for w in 0..2 {
            let lp = cfsm_log_prob(&mut eng, &layer, &view, &rep, w).unwrap();
            assert!((lp.item() - 0.5f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cfsm_two_singleton_classes() {
        // 2 classes of 1 word each, zero weights → log 0.5, no within-class term
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut layer = CfsmLayer::new(&mut rng, 4, vec![0, 1]).unwrap();
        layer.class_w = Tensor::zeros(&[2, 4]);
        let mut eng = Forward;
        let view = layer.bind(&mut eng);
        let rep = eng.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]));
        let lp = cfsm_log_prob(&mut eng, &layer, &view, &rep, 1).unwrap();
        assert!((lp.item() - 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cfsm_proper_distribution() {
        // random layer, vocab 20, 4 classes: exp-sum over all words = 1 ± 1e-10
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<u64> = (0..20).map(|i| (25 - i) as u64).collect();
        let classes = assign_classes(&counts, 4).unwrap();
        let layer = CfsmLayer::new(&mut rng, 6, classes).unwrap();
        let mut eng = Forward;
        let view = layer.bind(&mut eng);
        let rep = eng.leaf(glorot_vector(&mut rng, 6));
        let total: f64 = (0..20)
            .map(|w| {
                cfsm_log_prob(&mut eng, &layer, &view, &rep, w)
                    .unwrap()
                    .item()
                    .exp()
            })
            .sum();
        assert!((total - 1.0).abs() < 1e-10, "sum {total}");
    }

    #[test]
    fn cfsm_unknown_word_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = CfsmLayer::new(&mut rng, 4, vec![0, 0, 1]).unwrap();
        let mut eng = Forward;
        let view = layer.bind(&mut eng);
        let rep = eng.leaf(Tensor::zeros(&[4]));
        assert!(matches!(
            cfsm_log_prob(&mut eng, &layer, &view, &rep, 3),
            Err(crate::error::Error::Vocab(3))
        ));
    }
}
