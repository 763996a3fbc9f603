//! Reverse-mode differentiation over dense `f64` vectors.
//!
//! Parameters live in a [`ParamStore`]. A [`Tape`] borrows the store, records
//! one forward computation (one sentence) and [`Tape::backward`] returns the
//! parameter gradients, which the caller folds back with
//! [`ParamStore::accumulate`]. Every tape value is a column vector; matrices
//! only appear as parameters.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Glorot/Xavier uniform initialisation.
    pub fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        Tensor { rows, cols, data: (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect() }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Vec<f64>,
    /// Frozen parameters (pretrained tables) never receive updates.
    pub trainable: bool,
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    Shape { name: String, expected: (usize, usize), found: (usize, usize) },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: IndexMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        self.insert(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        self.insert(name, value, false)
    }

    fn insert(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::Duplicate(name.into()));
        }
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.len()];
        self.params.push(Param { name: name.into(), value, grad, trainable });
        self.by_name.insert(name.into(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Overwrites a parameter's values, keeping its shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<(), ParamError> {
        let id = self.id(name).ok_or_else(|| ParamError::Unknown(name.into()))?;
        let p = &mut self.params[id.0];
        if (p.value.rows, p.value.cols) != (value.rows, value.cols) {
            return Err(ParamError::Shape {
                name: name.into(),
                expected: (p.value.rows, p.value.cols),
                found: (value.rows, value.cols),
            });
        }
        p.value = value;
        Ok(())
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in &grads.by_param {
            for (acc, v) in self.params[id.0].grad.iter_mut().zip(g) {
                *acc += v;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.iter().filter(|p| p.trainable).flat_map(|p| &p.grad).map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Plain SGD with global-norm clipping; clears the gradients.
    /// Returns the gradient norm before clipping.
    pub fn sgd_step(&mut self, lr: f64, clip: Option<f64>) -> f64 {
        let norm = self.grad_norm();
        let scale = match clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for p in self.params.iter_mut().filter(|p| p.trainable) {
            for (v, g) in p.value.data.iter_mut().zip(&p.grad) {
                *v -= lr * scale * g;
            }
        }
        self.zero_grad();
        norm
    }
}

/// Handle to a tape value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    PickRow(ParamId, usize),
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Vec<Var>),
    /// Softmax probabilities are kept for the backward pass.
    SoftmaxCe {
        logits: Var,
        target: usize,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// Empty for `Op::Param`, whose value stays in the store.
    value: Vec<f64>,
}

/// Gradients of one tape, keyed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_param: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.by_param.get(&id).map(Vec::as_slice)
    }
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Masked softmax; masked entries get probability exactly zero.
pub fn masked_softmax(logits: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = logits.iter().enumerate().filter(|(i, _)| allowed(*i)).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> =
        logits.iter().enumerate().map(|(i, v)| if allowed(i) { (v - max).exp() } else { 0.0 }).collect();
    let z: f64 = probs.iter().sum();
    if z > 0.0 {
        probs.iter_mut().for_each(|p| *p /= z);
    }
    probs
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(id).value.data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn input(&mut self, data: Vec<f64>) -> Var {
        self.push(Op::Input, data)
    }

    /// A whole parameter used as a vector.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), Vec::new())
    }

    /// Row `row` of a parameter matrix (an embedding lookup).
    pub fn pick_row(&mut self, table: ParamId, row: usize) -> Var {
        let value = self.store.get(table).value.row(row).to_vec();
        self.push(Op::PickRow(table, row), value)
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: ParamId, b: Option<ParamId>, x: Var) -> Var {
        let wt = &self.store.get(w).value;
        let xv = self.value(x);
        assert_eq!(
            wt.cols,
            xv.len(),
            "affine: {} has {} columns, input has {}",
            self.store.get(w).name,
            wt.cols,
            xv.len()
        );
        let mut out: Vec<f64> = wt.data.chunks_exact(wt.cols).map(|row| dot(row, xv)).collect();
        if let Some(b) = b {
            for (o, bv) in out.iter_mut().zip(&self.store.get(b).value.data) {
                *o += bv;
            }
        }
        self.push(Op::Affine { w, b, x }, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        self.push(Op::Mul(a, b), v)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let v = parts.iter().flat_map(|p| self.value(*p).iter().copied()).collect();
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.max(0.0)).collect();
        self.push(Op::Relu(a), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    /// Elementwise sum of equally sized values.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "sum of nothing");
        let mut v = self.value(parts[0]).to_vec();
        for p in &parts[1..] {
            for (a, b) in v.iter_mut().zip(self.value(*p)) {
                *a += b;
            }
        }
        self.push(Op::Sum(parts.to_vec()), v)
    }

    /// `-log softmax(logits)[target]` over the unmasked entries.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize, mask: Option<&[bool]>) -> Var {
        assert!(mask.is_none_or(|m| m[target]), "cross-entropy target is masked out");
        let probs = masked_softmax(self.value(logits), mask);
        let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
        self.push(Op::SoftmaxCe { logits, target, probs }, vec![loss])
    }

    /// Gradients of a scalar node with respect to every parameter it uses.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0; self.value(loss).len()]);
        let mut out = Gradients::default();
        let store = self.store;
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let add_to = |grads: &mut Vec<Option<Vec<f64>>>, v: Var, offset: usize, gv: &[f64]| {
                let len = self.value(v).len();
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                for (s, x) in slot[offset..offset + gv.len()].iter_mut().zip(gv) {
                    *s += x;
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let acc = param_slot(&mut out, store, *id);
                    acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
                }
                Op::PickRow(id, row) => {
                    let cols = store.get(*id).value.cols;
                    let acc = param_slot(&mut out, store, *id);
                    acc[row * cols..(row + 1) * cols].iter_mut().zip(&g).for_each(|(a, x)| *a += x);
                }
                Op::Affine { w, b, x } => {
                    let wt = &store.get(*w).value;
                    let xv = self.value(*x);
                    {
                        let acc = param_slot(&mut out, store, *w);
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                axpy(&mut acc[r * wt.cols..(r + 1) * wt.cols], *gr, xv);
                            }
                        }
                    }
                    if let Some(b) = b {
                        let acc = param_slot(&mut out, store, *b);
                        acc.iter_mut().zip(&g).for_each(|(a, x)| *a += x);
                    }
                    if !matches!(self.nodes[x.0].op, Op::Input) {
                        let mut gx = vec![0.0; wt.cols];
                        for (r, gr) in g.iter().enumerate() {
                            if *gr != 0.0 {
                                axpy(&mut gx, *gr, wt.row(r));
                            }
                        }
                        add_to(&mut grads, *x, 0, &gx);
                    }
                }
                Op::Add(a, b) => {
                    add_to(&mut grads, *a, 0, &g);
                    add_to(&mut grads, *b, 0, &g);
                }
                Op::Mul(a, b) => {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b)).map(|(x, y)| x * y).collect();
                    let gb: Vec<f64> = g.iter().zip(self.value(*a)).map(|(x, y)| x * y).collect();
                    add_to(&mut grads, *a, 0, &ga);
                    add_to(&mut grads, *b, 0, &gb);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        add_to(&mut grads, *p, 0, &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice(a, start) => add_to(&mut grads, *a, *start, &g),
                Op::Relu(a) => {
                    let ga: Vec<f64> =
                        g.iter().zip(&node.value).map(|(x, y)| if *y > 0.0 { *x } else { 0.0 }).collect();
                    add_to(&mut grads, *a, 0, &ga);
                }
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * (1.0 - y * y)).collect();
                    add_to(&mut grads, *a, 0, &ga);
                }
                Op::Sigmoid(a) => {
                    let ga: Vec<f64> = g.iter().zip(&node.value).map(|(x, y)| x * y * (1.0 - y)).collect();
                    add_to(&mut grads, *a, 0, &ga);
                }
                Op::Sum(parts) => {
                    for p in parts {
                        add_to(&mut grads, *p, 0, &g);
                    }
                }
                Op::SoftmaxCe { logits, target, probs } => {
                    let mut gl: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                    gl[*target] -= g[0];
                    add_to(&mut grads, *logits, 0, &gl);
                }
            }
        }
        out
    }
}

fn param_slot<'a>(out: &'a mut Gradients, store: &ParamStore, id: ParamId) -> &'a mut Vec<f64> {
    let len = store.get(id).value.len();
    out.by_param.entry(id).or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Parameters of one LSTM layer; the four gates share one matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lstm {
    /// `4H x (I + H)`, gate order input, forget, output, candidate.
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl Lstm {
    /// Registers `{name}.w` and `{name}.b`; the forget-gate bias starts at 1.
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, ParamError> {
        let w = store.add(&format!("{name}.w"), Tensor::glorot(4 * hidden, input + hidden, rng))?;
        let mut bias = Tensor::zeros(4 * hidden, 1);
        bias.data[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        let b = store.add(&format!("{name}.b"), bias)?;
        Ok(Lstm { w, b, input, hidden })
    }

    /// Zero hidden and cell state.
    pub fn initial(&self, tape: &mut Tape) -> (Var, Var) {
        let h = tape.input(vec![0.0; self.hidden]);
        let c = tape.input(vec![0.0; self.hidden]);
        (h, c)
    }

    pub fn step(&self, tape: &mut Tape, x: Var, state: (Var, Var)) -> (Var, Var) {
        let (h, c) = state;
        let xh = tape.concat(&[x, h]);
        let gates = tape.affine(self.w, Some(self.b), xh);
        let n = self.hidden;
        let i = tape.slice(gates, 0, n);
        let f = tape.slice(gates, n, n);
        let o = tape.slice(gates, 2 * n, n);
        let g = tape.slice(gates, 3 * n, n);
        let (i, f, o, g) = (tape.sigmoid(i), tape.sigmoid(f), tape.sigmoid(o), tape.tanh(g));
        let fc = tape.mul(f, c);
        let ig = tape.mul(i, g);
        let c2 = tape.add(fc, ig);
        let tc = tape.tanh(c2);
        let h2 = tape.mul(o, tc);
        (h2, c2)
    }
}

/// An LSTM over a stack: `push` runs one step from the current top state,
/// `pop` restores the previous state in O(1).
#[derive(Debug, Clone)]
pub struct StackLstm {
    lstm: Lstm,
    /// Learned output for the empty stack.
    empty: ParamId,
    states: Vec<(Var, Var)>,
}

impl StackLstm {
    pub fn new(tape: &mut Tape, lstm: Lstm, empty: ParamId) -> Self {
        StackLstm { lstm, empty, states: vec![lstm.initial(tape)] }
    }

    pub fn push(&mut self, tape: &mut Tape, x: Var) {
        let top = *self.states.last().expect("initial state");
        let next = self.lstm.step(tape, x, top);
        self.states.push(next);
    }

    pub fn pop(&mut self) {
        assert!(self.states.len() > 1, "pop from an empty stack LSTM");
        self.states.pop();
    }

    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Summary of the current contents.
    pub fn output(&self, tape: &mut Tape) -> Var {
        if self.is_empty() {
            tape.param(self.empty)
        } else {
            self.states.last().expect("non-empty").0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Relative error used by [`gradient_check`].
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares backward gradients with central finite differences.
///
/// `loss` must build a scalar on a fresh tape. At most `per_param`
/// coordinates of each trainable parameter are probed (all when `None`),
/// chosen by `rng`.
pub fn gradient_check<F, R>(
    store: &mut ParamStore,
    loss: F,
    h: f64,
    per_param: Option<usize>,
    rng: &mut R,
) -> GradCheckReport
where
    F: Fn(&mut Tape) -> Var,
    R: Rng,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.backward(l)
    };
    let eval = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let l = loss(&mut tape);
        tape.scalar(l)
    };
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0 };
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let len = store.get(id).value.len();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < len => rand::seq::index::sample(rng, len, k).into_vec(),
            _ => (0..len).collect(),
        };
        for j in coords {
            let original = store.get(id).value.data[j];
            store.get_mut(id).value.data[j] = original + h;
            let up = eval(store);
            store.get_mut(id).value.data[j] = original - h;
            let down = eval(store);
            store.get_mut(id).value.data[j] = original;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).map_or(0.0, |g| g[j]);
            report.max_rel_error = report.max_rel_error.max(relative_error(a, numeric));
            report.checked += 1;
        }
    }
    report
}
