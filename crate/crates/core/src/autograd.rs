//! Named parameter storage and a reverse-mode tape over [`Matrix`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the reverse pass walks the node list backwards.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    /// Looks up `name` and checks its shape.
    pub fn expect(&self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        let shape = self.get(id).shape();
        if shape != (rows, cols) {
            return Err(Error::Config(format!(
                "parameter `{name}` has shape {shape:?}, expected {:?}",
                (rows, cols)
            )));
        }
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .iter()
            .flat_map(|m| m.as_slice().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_scalars(), "flat parameter length");
        let mut offset = 0;
        for m in &mut self.values {
            let n = m.len();
            m.as_mut_slice().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        self.grads.get_mut(id.0).and_then(Option::as_mut)
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.add_assign(t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale_assign(s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(Matrix::sum_squares)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Matrix::is_finite)
    }

    /// Dense flat vector in [`ParamStore::flatten`] order; missing grads are zero.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat(0.0).take(store.get(id).len())),
            }
        }
        out
    }
}

/// Forward-pass mode. Dropout is active only in `Train`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Matrix),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Transpose(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var),
    MaxRows {
        x: Var,
        argmax: Vec<usize>,
    },
    Unfold {
        x: Var,
        width: usize,
    },
    CrossEntropy {
        logits: Var,
        gold: usize,
        probs: Vec<f64>,
    },
    Sum(Vec<Var>),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    rng: Option<ChaCha8Rng>,
    trainable: Option<&'p [bool]>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        let rng = match mode {
            Mode::Eval => None,
            Mode::Train { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
        };
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            rng,
            trainable: None,
        }
    }

    /// Like [`Graph::new`], but only parameters with `trainable[id]` set
    /// receive gradients.
    pub fn with_trainable(params: &'p ParamStore, mode: Mode, trainable: &'p [bool]) -> Self {
        assert_eq!(trainable.len(), params.len(), "trainable mask must cover every parameter");
        Self {
            trainable: Some(trainable),
            ..Self::new(params, mode)
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.get(*id),
            _ => &self.nodes[v.0].value,
        }
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Matrix::zeros(0, 0),
            op: Op::Param(id),
            requires_grad: self.trainable.map_or(true, |t| t[id.0]),
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        self.push(value, Op::Add(a, b), &[a, b])
    }

    /// Adds the `1 × n` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let bias = self.value(b);
        assert_eq!(bias.rows(), 1, "add_row bias must be a row vector");
        assert_eq!(bias.cols(), self.value(a).cols(), "add_row width");
        let mut value = self.value(a).clone();
        for r in 0..value.rows() {
            for (o, &bv) in value.row_mut(r).iter_mut().zip(bias.as_slice()) {
                *o += bv;
            }
        }
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape");
        let data = va
            .as_slice()
            .iter()
            .zip(vb.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), c.shape(), "mul_const shape");
        let data = va
            .as_slice()
            .iter()
            .zip(c.as_slice())
            .map(|(x, y)| x * y)
            .collect();
        let value = Matrix::from_vec(va.rows(), va.cols(), data);
        self.push(value, Op::MulConst(a, c), &[a])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    /// `1 - a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let cols = self.value(a).cols();
        let neg = self.scale(a, -1.0);
        let ones = self.input(Matrix::filled(1, cols, 1.0));
        self.add_row(neg, ones)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..value.rows() {
            softmax_in_place(value.row_mut(r));
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: ParamId, bias: ParamId) -> Var {
        const EPS: f64 = 1e-12;
        let gain = self.param(gain);
        let bias = self.param(bias);
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((o, &gv), &bv) in value
                .row_mut(r)
                .iter_mut()
                .zip(g.as_slice())
                .zip(b.as_slice())
            {
                *o = *o * gv + bv;
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    /// Selects rows `ids` of `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols(), "slice_cols out of range");
        let mut value = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            value
                .row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(value, Op::SliceCols { x, start }, &[x])
    }

    pub fn slice_row(&mut self, x: Var, row: usize) -> Var {
        self.slice_rows(x, row, 1)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows(), "slice_rows out of range");
        let cols = xv.cols();
        let data = xv.as_slice()[start * cols..(start + len) * cols].to_vec();
        let value = Matrix::from_vec(len, cols, data);
        self.push(value, Op::SliceRows { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut value = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols rows");
                value.row_mut(r)[offset..offset + pv.cols()].copy_from_slice(pv.row(r));
                offset += pv.cols();
            }
        }
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows cols");
            data.extend_from_slice(pv.as_slice());
            rows += pv.rows();
        }
        let value = Matrix::from_vec(rows, cols, data);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Mean over rows, giving `1 × cols`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in value.as_mut_slice().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let n = xv.rows().max(1) as f64;
        value.scale_assign(1.0 / n);
        self.push(value, Op::MeanRows(x), &[x])
    }

    /// Column-wise max over rows, giving `1 × cols`. Ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::filled(1, xv.cols(), f64::NEG_INFINITY);
        let mut argmax = vec![0; xv.cols()];
        for r in 0..xv.rows() {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > value.get(0, c) {
                    value.set(0, c, v);
                    argmax[c] = r;
                }
            }
        }
        self.push(value, Op::MaxRows { x, argmax }, &[x])
    }

    /// Sliding windows of `width` consecutive rows, each flattened into one row.
    pub fn unfold(&mut self, x: Var, width: usize) -> Var {
        let xv = self.value(x);
        assert!(width >= 1 && width <= xv.rows(), "unfold width");
        let windows = xv.rows() - width + 1;
        let cols = xv.cols();
        let mut value = Matrix::zeros(windows, width * cols);
        for w in 0..windows {
            for k in 0..width {
                value.row_mut(w)[k * cols..(k + 1) * cols].copy_from_slice(xv.row(w + k));
            }
        }
        self.push(value, Op::Unfold { x, width }, &[x])
    }

    /// Inverted dropout. Identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if p <= 0.0 {
            return x;
        }
        let (rows, cols) = self.value(x).shape();
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        let keep = 1.0 - p;
        let data = (0..rows * cols)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_const(x, Matrix::from_vec(rows, cols, data))
    }

    /// Softmax cross-entropy of a `1 × C` logit row against `gold`.
    pub fn cross_entropy(&mut self, logits: Var, gold: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != 1 {
            return Err(Error::Shape(format!("logits must be 1 x C, got {:?}", lv.shape())));
        }
        let (loss, probs) = softmax_cross_entropy(lv.as_slice(), gold)?;
        Ok(self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, parts: &[Var]) -> Var {
        let mut value = self.value(parts[0]).clone();
        for p in &parts[1..] {
            value.add_assign(self.value(*p));
        }
        self.push(value, Op::Sum(parts.to_vec()), parts)
    }

    /// Reverse pass from a scalar node. Returns gradients for every parameter
    /// that participated in the graph.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut out = Gradients::zeros_like(self.params);
        self.backward_into(root, &mut out);
        out
    }

    /// Reverse pass that adds this graph's parameter gradients into `out`.
    pub fn backward_into(&self, root: Var, out: &mut Gradients) {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        assert_eq!(out.grads.len(), self.params.len(), "gradient buffer does not match the store");
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, &mut grads, out);
        }
    }

    fn backprop_node(
        &self,
        node: &Node,
        g: Matrix,
        grads: &mut [Option<Matrix>],
        out: &mut Gradients,
    ) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, delta: Matrix| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Input => {}
            Op::Param(id) => match &mut out.grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            },
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t(self.value(*b)));
                }
                if wants(*b) {
                    acc(*b, self.value(*a).t_matmul(&g));
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::AddRow(a, b) => {
                if wants(*b) {
                    let mut col_sum = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, v) in col_sum.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, col_sum);
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if wants(*a) {
                    acc(*a, zip_map(&g, vb, |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, zip_map(&g, va, |x, y| x * y));
                }
            }
            Op::MulConst(a, c) => acc(*a, zip_map(&g, c, |x, y| x * y)),
            Op::Scale(a, s) => acc(*a, g.map(|v| v * s)),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(*a, zip_map(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                acc(*a, zip_map(&g, x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Tanh(a) => acc(*a, zip_map(&g, &node.value, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => acc(*a, zip_map(&g, &node.value, |gv, y| gv * y * (1.0 - y))),
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yv * (gv - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = xhat.shape();
                let gv = self.value(*gain);
                if wants(*gain) || wants(*bias) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let gr = g.get(r, c);
                            dg.as_mut_slice()[c] += gr * xhat.get(r, c);
                            db.as_mut_slice()[c] += gr;
                        }
                    }
                    acc(*gain, dg);
                    acc(*bias, db);
                }
                if wants(*x) {
                    let n = cols as f64;
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let dxhat: Vec<f64> = (0..cols).map(|c| g.get(r, c) * gv.as_slice()[c]).collect();
                        let sum: f64 = dxhat.iter().sum();
                        let dot: f64 = dxhat.iter().zip(xhat.row(r)).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            let v = inv_std[r] / n * (n * dxhat[c] - sum - xhat.get(r, c) * dot);
                            dx.set(r, c, v);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (o, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..g.rows() {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SliceRows { x, start } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                let cols = xv.cols();
                dx.as_mut_slice()[*start * cols..(*start + g.rows()) * cols]
                    .copy_from_slice(g.as_slice());
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let pc = self.value(*p).cols();
                    if wants(*p) {
                        let mut dp = Matrix::zeros(g.rows(), pc);
                        for r in 0..g.rows() {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                        }
                        acc(*p, dp);
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                let cols = g.cols();
                for p in parts {
                    let pr = self.value(*p).rows();
                    if wants(*p) {
                        let data = g.as_slice()[offset * cols..(offset + pr) * cols].to_vec();
                        acc(*p, Matrix::from_vec(pr, cols, data));
                    }
                    offset += pr;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows().max(1) as f64;
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for r in 0..xv.rows() {
                    for (o, v) in dx.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o = v / n;
                    }
                }
                acc(*x, dx);
            }
            Op::MaxRows { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (c, &r) in argmax.iter().enumerate() {
                    dx.set(r, c, g.get(0, c));
                }
                acc(*x, dx);
            }
            Op::Unfold { x, width } => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut dx = Matrix::zeros(xv.rows(), cols);
                for w in 0..g.rows() {
                    for k in 0..*width {
                        let src = &g.row(w)[k * cols..(k + 1) * cols];
                        for (o, v) in dx.row_mut(w + k).iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                gold,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                d[*gold] -= scale;
                acc(*logits, Matrix::row_vector(d));
            }
            Op::Sum(parts) => {
                for p in parts {
                    acc(*p, g.clone());
                }
            }
        }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Max-subtracted softmax over a slice.
pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Numerically stable softmax and `-log p[gold]`.
pub fn softmax_cross_entropy(logits: &[f64], gold: usize) -> Result<(f64, Vec<f64>)> {
    if gold >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: gold,
            len: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("logits {logits:?}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum_exp: f64 = logits.iter().map(|v| (v - max).exp()).sum();
    let probs: Vec<f64> = logits.iter().map(|v| (v - max).exp() / sum_exp).collect();
    // relative to the max so that equal logits give ln C exactly
    let loss = (sum_exp.ln() - (logits[gold] - max)).max(0.0);
    Ok((loss, probs))
}
