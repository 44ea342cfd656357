//! Dense f64 tensors and tape-based reverse-mode automatic differentiation.
//!
//! Storage is flat row-major; everything is copied rather than viewed, which
//! is fine at the model sizes this crate targets. The [`Tape`] records one
//! document's computation graph and replays it in reverse to accumulate
//! gradients for every leaf.
//!
//! The [`Engine`] trait abstracts over "record on a tape" vs. "just compute
//! the value", so model code is written once and used both for training
//! (with gradients) and evaluation (forward only, no graph bookkeeping).

use std::rc::Rc;

use crate::error::{Error, Result};

/// Dense tensor: a shape and a flat row-major buffer of f64.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("from_vec", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Tensor {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        Tensor::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// Pure forward kernels shared by the tape and the forward-only engine.
pub mod ops {
    use super::Tensor;
    use crate::error::{Error, Result};

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a.data()[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b.data()[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Matrix-vector product `m · x`.
    pub fn matvec(m: &Tensor, x: &Tensor) -> Result<Tensor> {
        if m.shape().len() != 2 || x.shape().len() != 1 || m.cols() != x.len() {
            return Err(Error::shape("matvec", m.shape(), x.shape()));
        }
        let out = (0..m.rows())
            .map(|i| {
                m.row(i)
                    .iter()
                    .zip(x.data())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .collect();
        Ok(Tensor::vector(out))
    }

    /// Transposed matrix-vector product `mᵀ · x`.
    pub fn matvec_t(m: &Tensor, x: &Tensor) -> Result<Tensor> {
        if m.shape().len() != 2 || x.shape().len() != 1 || m.rows() != x.len() {
            return Err(Error::shape("matvec_t", m.shape(), x.shape()));
        }
        let cols = m.cols();
        let mut out = vec![0.0; cols];
        for i in 0..m.rows() {
            let xi = x.data()[i];
            for (o, v) in out.iter_mut().zip(m.row(i)) {
                *o += xi * v;
            }
        }
        Ok(Tensor::vector(out))
    }

    /// Outer product of two vectors, as a matrix.
    pub fn outer(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || b.shape().len() != 1 {
            return Err(Error::shape("outer", a.shape(), b.shape()));
        }
        let mut out = Vec::with_capacity(a.len() * b.len());
        for av in a.data() {
            for bv in b.data() {
                out.push(av * bv);
            }
        }
        Tensor::matrix(a.len(), b.len(), out)
    }

    pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("add", a.shape(), b.shape()));
        }
        let mut out = a.clone();
        out.add_assign(b);
        Ok(out)
    }

    pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape("mul", a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        Tensor::from_vec(a.shape(), data)
    }

    /// Elementwise `a·x + b`.
    pub fn affine(x: &Tensor, a: f64, b: f64) -> Tensor {
        let data = x.data().iter().map(|v| a * v + b).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() || a.shape().len() != 1 {
            return Err(Error::shape("dot", a.shape(), b.shape()));
        }
        Ok(Tensor::scalar(
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum(),
        ))
    }

    /// Bilinear form `hᵀ · w · v`.
    pub fn bilinear(h: &Tensor, w: &Tensor, v: &Tensor) -> Result<Tensor> {
        if h.shape().len() != 1
            || v.shape().len() != 1
            || w.shape().len() != 2
            || w.rows() != h.len()
            || w.cols() != v.len()
        {
            return Err(Error::shape("bilinear", w.shape(), &[h.len(), v.len()]));
        }
        let wv = matvec(w, v)?;
        dot(h, &wv)
    }

    pub fn tanh(x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| v.tanh()).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn sigmoid(x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        Tensor::from_vec(x.shape(), data).expect("same shape")
    }

    pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape().len() != 1 || b.shape().len() != 1 {
            return Err(Error::shape("concat", a.shape(), b.shape()));
        }
        let mut data = a.data().to_vec();
        data.extend_from_slice(b.data());
        Ok(Tensor::vector(data))
    }

    /// Log-softmax with max-subtraction for stability.
    pub fn softmax_log(x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 1 || x.is_empty() {
            return Err(Error::shape("softmax_log", x.shape(), &[]));
        }
        let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let data = x.data().iter().map(|v| v - lse).collect();
        Ok(Tensor::vector(data))
    }

    pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 1 {
            return Err(Error::shape("l2_normalize", x.shape(), &[]));
        }
        let n = x.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Degenerate {
                op: "l2_normalize",
                msg: format!("input norm {n}"),
            });
        }
        Ok(Tensor::vector(x.data().iter().map(|v| v / n).collect()))
    }

    pub fn pick(x: &Tensor, i: usize) -> Result<Tensor> {
        if x.shape().len() != 1 || i >= x.len() {
            return Err(Error::shape("pick", x.shape(), &[i]));
        }
        Ok(Tensor::scalar(x.data()[i]))
    }

    pub fn lookup(m: &Tensor, row: usize) -> Result<Tensor> {
        if m.shape().len() != 2 || row >= m.rows() {
            return Err(Error::shape("lookup", m.shape(), &[row]));
        }
        Ok(Tensor::vector(m.row(row).to_vec()))
    }

    pub fn sum(x: &Tensor) -> Tensor {
        Tensor::scalar(x.data().iter().sum())
    }

    pub fn softmax(x: &Tensor) -> Result<Tensor> {
        let lp = softmax_log(x)?;
        Ok(Tensor::vector(lp.data().iter().map(|v| v.exp()).collect()))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

/// Gradient accumulators produced by [`Tape::backward`], one slot per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    /// Gradient of `id`, or zeros of the given shape when no path reached it.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }

    fn add(&mut self, id: usize, contrib: &Tensor) {
        match &mut self.grads[id] {
            Some(t) => t.add_assign(contrib),
            slot => *slot = Some(contrib.clone()),
        }
    }

    fn add_row(&mut self, id: usize, rows: usize, cols: usize, row: usize, contrib: &Tensor) {
        let t = self.grads[id].get_or_insert_with(|| Tensor::zeros(&[rows, cols]));
        let dst = &mut t.data_mut()[row * cols..(row + 1) * cols];
        for (d, c) in dst.iter_mut().zip(contrib.data()) {
            *d += c;
        }
    }
}

enum Back {
    /// Propagate `f(grad_out)` to each listed parent.
    Dense(Vec<(usize, Box<dyn Fn(&Tensor) -> Tensor>)>),
    /// Sparse row update into parent matrix (embedding lookup).
    Row {
        parent: usize,
        rows: usize,
        cols: usize,
        row: usize,
    },
}

struct Node {
    value: Tensor,
    back: Option<Back>,
}

/// Append-only record of one computation; nodes reference earlier nodes only.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, back: Option<Back>) -> NodeId {
        self.nodes.push(Node { value, back });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf node: a parameter or a constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar loss node; fills per-node gradient slots.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss node, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads = Gradients {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        grads.grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let g = match grads.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = &self.nodes[i].back {
                match back {
                    Back::Dense(parents) => {
                        for (pid, f) in parents {
                            let contrib = f(&g);
                            grads.add(*pid, &contrib);
                        }
                    }
                    Back::Row {
                        parent,
                        rows,
                        cols,
                        row,
                    } => grads.add_row(*parent, *rows, *cols, *row, &g),
                }
            }
            grads.grads[i] = Some(g);
        }
        Ok(grads)
    }
}

/// Abstraction over taped (differentiable) and plain (forward-only) execution.
pub trait Engine {
    type V: Clone;

    fn leaf(&mut self, t: Tensor) -> Self::V;
    fn value(&self, v: &Self::V) -> Tensor;
    fn scalar_value(&self, v: &Self::V) -> f64 {
        self.value(v).item()
    }

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    /// Scalar node times tensor node.
    fn smul(&mut self, s: &Self::V, x: &Self::V) -> Result<Self::V>;
    /// Elementwise `a·x + b` with constant coefficients.
    fn affine(&mut self, x: &Self::V, a: f64, b: f64) -> Result<Self::V>;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn matvec(&mut self, m: &Self::V, x: &Self::V) -> Result<Self::V>;
    fn dot(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn bilinear(&mut self, h: &Self::V, w: &Self::V, v: &Self::V) -> Result<Self::V>;
    fn tanh(&mut self, x: &Self::V) -> Result<Self::V>;
    fn sigmoid(&mut self, x: &Self::V) -> Result<Self::V>;
    fn concat(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V>;
    fn softmax_log(&mut self, x: &Self::V) -> Result<Self::V>;
    fn l2_normalize(&mut self, x: &Self::V) -> Result<Self::V>;
    fn pick(&mut self, x: &Self::V, i: usize) -> Result<Self::V>;
    fn stack(&mut self, xs: &[Self::V]) -> Result<Self::V>;
    fn lookup(&mut self, m: &Self::V, row: usize) -> Result<Self::V>;
    /// Multiply by a constant mask (inverted dropout; no gradient to the mask).
    fn mask(&mut self, x: &Self::V, mask: &Tensor) -> Result<Self::V>;
    fn sum(&mut self, x: &Self::V) -> Result<Self::V>;
}

/// Forward-only engine; values are reference-counted tensors.
#[derive(Default)]
pub struct Forward;

impl Engine for Forward {
    type V = Rc<Tensor>;

    fn leaf(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn value(&self, v: &Rc<Tensor>) -> Tensor {
        (**v).clone()
    }

    fn scalar_value(&self, v: &Rc<Tensor>) -> f64 {
        v.item()
    }

    fn add(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::add(a, b).map(Rc::new)
    }

    fn mul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::mul(a, b).map(Rc::new)
    }

    fn smul(&mut self, s: &Rc<Tensor>, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::affine(x, s.item(), 0.0)))
    }

    fn affine(&mut self, x: &Rc<Tensor>, a: f64, b: f64) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::affine(x, a, b)))
    }

    fn matmul(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::matmul(a, b).map(Rc::new)
    }

    fn matvec(&mut self, m: &Rc<Tensor>, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::matvec(m, x).map(Rc::new)
    }

    fn dot(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::dot(a, b).map(Rc::new)
    }

    fn bilinear(&mut self, h: &Rc<Tensor>, w: &Rc<Tensor>, v: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::bilinear(h, w, v).map(Rc::new)
    }

    fn tanh(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::tanh(x)))
    }

    fn sigmoid(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::sigmoid(x)))
    }

    fn concat(&mut self, a: &Rc<Tensor>, b: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::concat(a, b).map(Rc::new)
    }

    fn softmax_log(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::softmax_log(x).map(Rc::new)
    }

    fn l2_normalize(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        ops::l2_normalize(x).map(Rc::new)
    }

    fn pick(&mut self, x: &Rc<Tensor>, i: usize) -> Result<Rc<Tensor>> {
        ops::pick(x, i).map(Rc::new)
    }

    fn stack(&mut self, xs: &[Rc<Tensor>]) -> Result<Rc<Tensor>> {
        let data = xs.iter().map(|x| x.item()).collect();
        Ok(Rc::new(Tensor::vector(data)))
    }

    fn lookup(&mut self, m: &Rc<Tensor>, row: usize) -> Result<Rc<Tensor>> {
        ops::lookup(m, row).map(Rc::new)
    }

    fn mask(&mut self, x: &Rc<Tensor>, mask: &Tensor) -> Result<Rc<Tensor>> {
        ops::mul(x, mask).map(Rc::new)
    }

    fn sum(&mut self, x: &Rc<Tensor>) -> Result<Rc<Tensor>> {
        Ok(Rc::new(ops::sum(x)))
    }
}

impl Engine for Tape {
    type V = NodeId;

    fn leaf(&mut self, t: Tensor) -> NodeId {
        Tape::leaf(self, t)
    }

    fn value(&self, v: &NodeId) -> Tensor {
        Tape::value(self, *v).clone()
    }

    fn scalar_value(&self, v: &NodeId) -> f64 {
        Tape::value(self, *v).item()
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let out = ops::add(self.val(a.0), self.val(b.0))?;
        let back = Back::Dense(vec![
            (a.0, Box::new(|g: &Tensor| g.clone()) as _),
            (b.0, Box::new(|g: &Tensor| g.clone()) as _),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn mul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let av = self.val(a.0).clone();
        let bv = self.val(b.0).clone();
        let out = ops::mul(&av, &bv)?;
        let (ac, bc) = (av.clone(), bv.clone());
        let back = Back::Dense(vec![
            (a.0, Box::new(move |g: &Tensor| ops::mul(g, &bc).unwrap()) as _),
            (b.0, Box::new(move |g: &Tensor| ops::mul(g, &ac).unwrap()) as _),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn smul(&mut self, s: &NodeId, x: &NodeId) -> Result<NodeId> {
        let sv = self.val(s.0).item();
        let xv = self.val(x.0).clone();
        let out = ops::affine(&xv, sv, 0.0);
        let back = Back::Dense(vec![
            (
                s.0,
                Box::new(move |g: &Tensor| Tensor::scalar(ops::dot(g, &xv).unwrap().item())) as _,
            ),
            (x.0, Box::new(move |g: &Tensor| ops::affine(g, sv, 0.0)) as _),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn affine(&mut self, x: &NodeId, a: f64, b: f64) -> Result<NodeId> {
        let out = ops::affine(self.val(x.0), a, b);
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| ops::affine(g, a, 0.0)) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let av = self.val(a.0).clone();
        let bv = self.val(b.0).clone();
        let out = ops::matmul(&av, &bv)?;
        let (ac, bc) = (av.clone(), bv.clone());
        let back = Back::Dense(vec![
            (
                a.0,
                // dA = G · Bᵀ
                Box::new(move |g: &Tensor| {
                    let mut out = Tensor::zeros(&[g.rows(), bc.rows()]);
                    for i in 0..g.rows() {
                        for j in 0..bc.rows() {
                            let s: f64 = g
                                .row(i)
                                .iter()
                                .zip(bc.row(j))
                                .map(|(x, y)| x * y)
                                .sum();
                            let cols = bc.rows();
                            out.data_mut()[i * cols + j] = s;
                        }
                    }
                    out
                }) as _,
            ),
            (
                b.0,
                // dB = Aᵀ · G
                Box::new(move |g: &Tensor| {
                    let (k, n) = (ac.cols(), g.cols());
                    let mut out = Tensor::zeros(&[k, n]);
                    for i in 0..ac.rows() {
                        for p in 0..k {
                            let av = ac.at2(i, p);
                            for j in 0..n {
                                out.data_mut()[p * n + j] += av * g.at2(i, j);
                            }
                        }
                    }
                    out
                }) as _,
            ),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn matvec(&mut self, m: &NodeId, x: &NodeId) -> Result<NodeId> {
        let mv = self.val(m.0).clone();
        let xv = self.val(x.0).clone();
        let out = ops::matvec(&mv, &xv)?;
        let back = Back::Dense(vec![
            (m.0, Box::new(move |g: &Tensor| ops::outer(g, &xv).unwrap()) as _),
            (
                x.0,
                Box::new(move |g: &Tensor| ops::matvec_t(&mv, g).unwrap()) as _,
            ),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn dot(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let av = self.val(a.0).clone();
        let bv = self.val(b.0).clone();
        let out = ops::dot(&av, &bv)?;
        let back = Back::Dense(vec![
            (
                a.0,
                Box::new(move |g: &Tensor| ops::affine(&bv, g.item(), 0.0)) as _,
            ),
            (
                b.0,
                Box::new(move |g: &Tensor| ops::affine(&av, g.item(), 0.0)) as _,
            ),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn bilinear(&mut self, h: &NodeId, w: &NodeId, v: &NodeId) -> Result<NodeId> {
        let hv = self.val(h.0).clone();
        let wv = self.val(w.0).clone();
        let vv = self.val(v.0).clone();
        let out = ops::bilinear(&hv, &wv, &vv)?;
        let (w1, v1) = (wv.clone(), vv.clone());
        let (h2, v2) = (hv.clone(), vv.clone());
        let back = Back::Dense(vec![
            (
                h.0,
                // dh = ḡ · W v
                Box::new(move |g: &Tensor| {
                    ops::affine(&ops::matvec(&w1, &v1).unwrap(), g.item(), 0.0)
                }) as _,
            ),
            (
                w.0,
                // dW = ḡ · h ⊗ v
                Box::new(move |g: &Tensor| {
                    let mut o = ops::outer(&h2, &v2).unwrap();
                    o.scale_assign(g.item());
                    o
                }) as _,
            ),
            (
                v.0,
                // dv = ḡ · Wᵀ h
                Box::new(move |g: &Tensor| {
                    ops::affine(&ops::matvec_t(&wv, &hv).unwrap(), g.item(), 0.0)
                }) as _,
            ),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn tanh(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::tanh(self.val(x.0));
        let y = out.clone();
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * (1.0 - yv * yv))
                    .collect();
                Tensor::from_vec(g.shape(), data).unwrap()
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn sigmoid(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::sigmoid(self.val(x.0));
        let y = out.clone();
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| {
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                Tensor::from_vec(g.shape(), data).unwrap()
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn concat(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let alen = self.val(a.0).len();
        let blen = self.val(b.0).len();
        let out = ops::concat(self.val(a.0), self.val(b.0))?;
        let back = Back::Dense(vec![
            (
                a.0,
                Box::new(move |g: &Tensor| Tensor::vector(g.data()[..alen].to_vec())) as _,
            ),
            (
                b.0,
                Box::new(move |g: &Tensor| Tensor::vector(g.data()[alen..alen + blen].to_vec()))
                    as _,
            ),
        ]);
        Ok(self.push(out, Some(back)))
    }

    fn softmax_log(&mut self, x: &NodeId) -> Result<NodeId> {
        let out = ops::softmax_log(self.val(x.0))?;
        let y = out.clone();
        let back = Back::Dense(vec![(
            x.0,
            // dx_j = g_j − p_j · Σ_i g_i
            Box::new(move |g: &Tensor| {
                let gsum: f64 = g.data().iter().sum();
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, lv)| gv - lv.exp() * gsum)
                    .collect();
                Tensor::vector(data)
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn l2_normalize(&mut self, x: &NodeId) -> Result<NodeId> {
        let n = self.val(x.0).norm();
        let out = ops::l2_normalize(self.val(x.0))?;
        let y = out.clone();
        let back = Back::Dense(vec![(
            x.0,
            // dx = (g − y·(yᵀg)) / ‖x‖
            Box::new(move |g: &Tensor| {
                let yg = ops::dot(&y, g).unwrap().item();
                let data = g
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(gv, yv)| (gv - yv * yg) / n)
                    .collect();
                Tensor::vector(data)
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn pick(&mut self, x: &NodeId, i: usize) -> Result<NodeId> {
        let len = self.val(x.0).len();
        let out = ops::pick(self.val(x.0), i)?;
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| {
                let mut data = vec![0.0; len];
                data[i] = g.item();
                Tensor::vector(data)
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn stack(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        let data: Vec<f64> = xs.iter().map(|x| self.val(x.0).item()).collect();
        let out = Tensor::vector(data);
        let parents = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                (
                    x.0,
                    Box::new(move |g: &Tensor| Tensor::scalar(g.data()[i])) as _,
                )
            })
            .collect();
        Ok(self.push(out, Some(Back::Dense(parents))))
    }

    fn lookup(&mut self, m: &NodeId, row: usize) -> Result<NodeId> {
        let (rows, cols) = (self.val(m.0).rows(), self.val(m.0).cols());
        let out = ops::lookup(self.val(m.0), row)?;
        Ok(self.push(
            out,
            Some(Back::Row {
                parent: m.0,
                rows,
                cols,
                row,
            }),
        ))
    }

    fn mask(&mut self, x: &NodeId, mask: &Tensor) -> Result<NodeId> {
        let out = ops::mul(self.val(x.0), mask)?;
        let mc = mask.clone();
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| ops::mul(g, &mc).unwrap()) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }

    fn sum(&mut self, x: &NodeId) -> Result<NodeId> {
        let shape = self.val(x.0).shape().to_vec();
        let out = ops::sum(self.val(x.0));
        let back = Back::Dense(vec![(
            x.0,
            Box::new(move |g: &Tensor| {
                let n: usize = shape.iter().product();
                Tensor::from_vec(&shape, vec![g.item(); n]).unwrap()
            }) as _,
        )]);
        Ok(self.push(out, Some(back)))
    }
}

impl Tape {
    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }
}

/// Central finite differences of a scalar function of several tensors.
///
/// Independent oracle for gradient checks; evaluates `f` at `x ± eps` per
/// coordinate and never touches the tape.
pub fn finite_difference_grad(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut grads = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[i].shape());
        for j in 0..inputs[i].len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += eps;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= eps;
            g.data_mut()[j] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        grads.push(g);
    }
    grads
}

/// Relative-error comparison used by the gradient-check suites.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| {
            let denom = a.abs().max(n.abs()).max(1.0);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randv(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn randm(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let i = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(ops::matmul(&i, &b).unwrap(), b);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(ops::matmul(&a, &b).unwrap().item(), 11.0);
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        let err = ops::matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn bilinear_trivial_cases() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = Tensor::vector(vec![1.0, 0.0]);
        let v = Tensor::vector(vec![0.0, 1.0]);
        assert_eq!(ops::bilinear(&h, &eye, &v).unwrap().item(), 0.0);
        let h = Tensor::vector(vec![1.0, 1.0]);
        let v = Tensor::vector(vec![2.0, 3.0]);
        assert_eq!(ops::bilinear(&h, &eye, &v).unwrap().item(), 5.0);
    }

    #[test]
    fn softmax_log_symmetry_and_stability() {
        let lp = ops::softmax_log(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert!((lp.data()[0] - 0.5f64.ln()).abs() < 1e-15);
        let lp = ops::softmax_log(&Tensor::vector(vec![1000.0, 0.0])).unwrap();
        assert!(lp.all_finite());
        assert!(lp.data()[0].abs() < 1e-12);
        assert!((lp.data()[1] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_log_direct_evaluation() {
        let lp = ops::softmax_log(&Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (got, x) in lp.data().iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - (x - z.ln())).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_log_empty_errors() {
        assert!(ops::softmax_log(&Tensor::vector(vec![])).is_err());
    }

    #[test]
    fn l2_normalize_basics() {
        let y = ops::l2_normalize(&Tensor::vector(vec![3.0, 4.0])).unwrap();
        assert_eq!(y.data(), &[0.6, 0.8]);
        // idempotence
        let y2 = ops::l2_normalize(&y).unwrap();
        for (a, b) in y.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(ops::l2_normalize(&Tensor::vector(vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let loss = Engine::sum(&mut tape, &p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(loss).unwrap().item(), 1.0);
    }

    #[test]
    fn backward_sigmoid_at_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::scalar(0.0));
        let y = tape.sigmoid(&p).unwrap();
        let grads = tape.backward(y).unwrap();
        assert!((grads.get(p).unwrap().item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(p).is_err());
    }

    /// Builds a small composite expression and checks every op's gradient
    /// against central finite differences, over many seeds.
    #[test]
    fn gradient_check_all_ops() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![
                randm(&mut rng, 3, 4),
                randm(&mut rng, 4, 2),
                randv(&mut rng, 4),
                randv(&mut rng, 3),
                randv(&mut rng, 4),
            ];
            let mut f = |xs: &[Tensor]| -> f64 {
                let mut t = Tape::new();
                let ids: Vec<NodeId> = xs.iter().map(|x| t.leaf(x.clone())).collect();
                build_expr(&mut t, &ids)
            };
            let mut tape = Tape::new();
            let ids: Vec<NodeId> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
            let _ = build_expr(&mut tape, &ids);
            let loss = NodeId(tape.nodes.len() - 1);
            let grads = tape.backward(loss).unwrap();
            let numeric = finite_difference_grad(&mut f, &inputs, 1e-5);
            for (i, id) in ids.iter().enumerate() {
                let analytic = grads.get_or_zeros(*id, inputs[i].shape());
                let err = max_rel_error(&analytic, &numeric[i]);
                assert!(err < 1e-4, "seed {seed} input {i} rel err {err}");
            }
        }
    }

    fn build_expr(t: &mut Tape, ids: &[NodeId]) -> f64 {
        // matmul → tanh → concat/softmax_log/l2_normalize/bilinear mixture
        let mm = t.matmul(&ids[0], &ids[1]).unwrap();
        let mv = t.matvec(&ids[0], &ids[2]).unwrap();
        let th = t.tanh(&mv).unwrap();
        let sg = t.sigmoid(&ids[3]).unwrap();
        let cc = t.concat(&th, &sg).unwrap();
        let sl = t.softmax_log(&cc).unwrap();
        let p0 = t.pick(&sl, 1).unwrap();
        let nm = t.l2_normalize(&ids[4]).unwrap();
        let bl = t.bilinear(&ids[3], &ids[0], &nm).unwrap();
        let lk = t.lookup(&ids[1], 2).unwrap();
        let d = t.dot(&lk, &lk).unwrap();
        let s1 = Engine::sum(t, &mm).unwrap();
        let a = t.add(&p0, &bl).unwrap();
        let b = t.add(&a, &d).unwrap();
        let loss = t.add(&b, &s1).unwrap();
        t.scalar_value(&loss)
    }

    #[test]
    fn matmul_gradient_check() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let inputs = vec![randm(&mut rng, 3, 4), randm(&mut rng, 4, 2)];
            let mut f = |xs: &[Tensor]| {
                let m = ops::matmul(&xs[0], &xs[1]).unwrap();
                ops::sum(&ops::tanh(&m)).item()
            };
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let b = tape.leaf(inputs[1].clone());
            let m = tape.matmul(&a, &b).unwrap();
            let th = tape.tanh(&m).unwrap();
            let loss = Engine::sum(&mut tape, &th).unwrap();
            let grads = tape.backward(loss).unwrap();
            let numeric = finite_difference_grad(&mut f, &inputs, 1e-5);
            for (i, id) in [a, b].iter().enumerate() {
                let err = max_rel_error(grads.get(*id).unwrap(), &numeric[i]);
                assert!(err < 1e-6, "seed {seed} input {i} rel err {err}");
            }
        }
    }

    #[test]
    fn forward_engine_matches_tape_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = randm(&mut rng, 3, 3);
        let v = randv(&mut rng, 3);

        let mut tape = Tape::new();
        let tm = Engine::leaf(&mut tape, m.clone());
        let tv = Engine::leaf(&mut tape, v.clone());
        let tr = tape.matvec(&tm, &tv).unwrap();
        let tr = tape.softmax_log(&tr).unwrap();

        let mut fwd = Forward;
        let fm = fwd.leaf(m);
        let fv = fwd.leaf(v);
        let fr = fwd.matvec(&fm, &fv).unwrap();
        let fr = fwd.softmax_log(&fr).unwrap();

        assert_eq!(Engine::value(&tape, &tr), fwd.value(&fr));
    }

    proptest::proptest! {
        #[test]
        fn softmax_log_exp_sums_to_one(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let lp = ops::softmax_log(&Tensor::vector(xs)).unwrap();
            let total: f64 = lp.data().iter().map(|v| v.exp()).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn l2_normalize_unit_norm(xs in proptest::collection::vec(-10.0f64..10.0, 1..12)) {
            proptest::prop_assume!(xs.iter().any(|v| v.abs() > 1e-6));
            let y = ops::l2_normalize(&Tensor::vector(xs)).unwrap();
            proptest::prop_assert!((y.norm() - 1.0).abs() < 1e-12);
        }
    }
}
