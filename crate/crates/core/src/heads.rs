//! Classification heads over encoder output: a two-layer dense head on the
//! pooled vector and a bidirectional LSTM head on the token vectors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Graph, Mode, ParamId, ParamStore, Var};
use crate::encoder::EncodedVars;
use crate::error::{Error, Result};
use crate::lstm::Lstm;
use crate::tensor::Matrix;

pub const HEAD_PREFIX: &str = "head";

/// Head dropout rate.
pub const HEAD_DROPOUT: f64 = 0.4;

/// LSTM units per direction at full scale.
pub const LSTM_UNITS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Dense,
    BiLstm,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Dense => "dense",
            HeadKind::BiLstm => "bilstm",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dense" => Ok(HeadKind::Dense),
            "bilstm" | "bi-lstm" => Ok(HeadKind::BiLstm),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Dense hidden width; `None` means the encoder width.
    pub dense_hidden: Option<usize>,
    pub lstm_units: usize,
    pub dropout: f64,
    pub classes: usize,
}

impl HeadConfig {
    pub fn new(kind: HeadKind) -> Self {
        Self {
            kind,
            dense_hidden: None,
            lstm_units: LSTM_UNITS,
            dropout: HEAD_DROPOUT,
            classes: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("a head needs at least 2 classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("head dropout {} not in [0, 1)", self.dropout)));
        }
        if self.lstm_units == 0 || self.dense_hidden == Some(0) {
            return Err(Error::Config("head widths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Raw class scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Logits(pub Vec<f64>);

/// Softmax probabilities; sums to 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(pub Vec<f64>);

impl ProbVector {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl Logits {
    pub fn softmax(&self) -> ProbVector {
        let mut p = self.0.clone();
        autograd::softmax_in_place(&mut p);
        ProbVector(p)
    }
}

/// Numerically stable softmax and `-ln p[gold]`.
pub fn softmax_cross_entropy(logits: &Logits, gold: usize) -> Result<(f64, ProbVector)> {
    let (loss, probs) = autograd::softmax_cross_entropy(&logits.0, gold)?;
    Ok((loss, ProbVector(probs)))
}

fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Matrix {
    Matrix::uniform(rows, cols, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// `logits = W₂ᵀ · drop(ReLU(W₁ᵀ · x + b₁)) + b₂`, with `x` as a row vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl DenseHead {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, input: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let h = cfg.dense_hidden.unwrap_or(input);
        let c = cfg.classes;
        let p = format!("{HEAD_PREFIX}.dense");
        Ok(Self {
            w1: store.add(format!("{p}.w1"), uniform(input, h, input, rng))?,
            b1: store.add(format!("{p}.b1"), uniform(1, h, input, rng))?,
            w2: store.add(format!("{p}.w2"), uniform(h, c, h, rng))?,
            b2: store.add(format!("{p}.b2"), uniform(1, c, h, rng))?,
            input,
            hidden: h,
            classes: c,
            dropout: cfg.dropout,
        })
    }

    pub fn bind(cfg: &HeadConfig, input: usize, store: &ParamStore) -> Result<Self> {
        let h = cfg.dense_hidden.unwrap_or(input);
        let c = cfg.classes;
        let p = format!("{HEAD_PREFIX}.dense");
        Ok(Self {
            w1: store.expect(&format!("{p}.w1"), input, h)?,
            b1: store.expect(&format!("{p}.b1"), 1, h)?,
            w2: store.expect(&format!("{p}.w2"), h, c)?,
            b2: store.expect(&format!("{p}.b2"), 1, c)?,
            input,
            hidden: h,
            classes: c,
            dropout: cfg.dropout,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, pooled: Var) -> Result<Var> {
        let shape = g.value(pooled).shape();
        if shape != (1, self.input) {
            return Err(Error::Config(format!(
                "dense head expects a 1 x {} input, got {shape:?}",
                self.input
            )));
        }
        let h = g.affine(pooled, self.w1, self.b1);
        let h = g.relu(h);
        let h = g.dropout(h, self.dropout);
        Ok(g.affine(h, self.w2, self.b2))
    }
}

/// Forward and backward LSTMs over the real positions; the final hidden
/// state of each direction is concatenated, passed through ReLU and dropout,
/// then projected to class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct BiLstmHead {
    pub forward_lstm: Lstm,
    pub backward_lstm: Lstm,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub units: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl BiLstmHead {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, input: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let u = cfg.lstm_units;
        let p = format!("{HEAD_PREFIX}.bilstm");
        Ok(Self {
            forward_lstm: Lstm::init(store, &format!("{p}.fwd"), input, u, rng)?,
            backward_lstm: Lstm::init(store, &format!("{p}.bwd"), input, u, rng)?,
            proj_w: store.add(format!("{p}.proj.w"), uniform(2 * u, cfg.classes, 2 * u, rng))?,
            proj_b: store.add(format!("{p}.proj.b"), uniform(1, cfg.classes, 2 * u, rng))?,
            units: u,
            classes: cfg.classes,
            dropout: cfg.dropout,
        })
    }

    pub fn bind(cfg: &HeadConfig, input: usize, store: &ParamStore) -> Result<Self> {
        let u = cfg.lstm_units;
        let p = format!("{HEAD_PREFIX}.bilstm");
        Ok(Self {
            forward_lstm: Lstm::bind(store, &format!("{p}.fwd"), input, u)?,
            backward_lstm: Lstm::bind(store, &format!("{p}.bwd"), input, u)?,
            proj_w: store.expect(&format!("{p}.proj.w"), 2 * u, cfg.classes)?,
            proj_b: store.expect(&format!("{p}.proj.b"), 1, cfg.classes)?,
            units: u,
            classes: cfg.classes,
            dropout: cfg.dropout,
        })
    }

    /// `2u`-wide summary of the sequence `xs` (`n × d`, real rows only).
    pub fn representation(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        if g.value(xs).rows() == 0 {
            return Err(Error::EmptySequence);
        }
        let fwd = self.forward_lstm.run(g, xs, false);
        let bwd = self.backward_lstm.run(g, xs, true);
        let last_fwd = *fwd.last().expect("non-empty");
        let last_bwd = *bwd.last().expect("non-empty");
        Ok(g.concat_cols(&[last_fwd, last_bwd]))
    }

    pub fn forward(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let rep = self.representation(g, xs)?;
        let rep = g.relu(rep);
        let rep = g.dropout(rep, self.dropout);
        Ok(g.affine(rep, self.proj_w, self.proj_b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Head {
    Dense(DenseHead),
    BiLstm(BiLstmHead),
}

impl Head {
    pub fn init<R: Rng + ?Sized>(cfg: &HeadConfig, input: usize, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            HeadKind::Dense => Head::Dense(DenseHead::init(cfg, input, store, rng)?),
            HeadKind::BiLstm => Head::BiLstm(BiLstmHead::init(cfg, input, store, rng)?),
        })
    }

    pub fn bind(cfg: &HeadConfig, input: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            HeadKind::Dense => Head::Dense(DenseHead::bind(cfg, input, store)?),
            HeadKind::BiLstm => Head::BiLstm(BiLstmHead::bind(cfg, input, store)?),
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, enc: &EncodedVars) -> Result<Var> {
        match self {
            Head::Dense(h) => h.forward(g, enc.pooled),
            Head::BiLstm(h) => h.forward(g, enc.hidden),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Head::Dense(h) => h.classes,
            Head::BiLstm(h) => h.classes,
        }
    }
}

/// Dense head on a single pooled vector.
pub fn dense_head_forward(pooled: &[f64], head: &DenseHead, params: &ParamStore, mode: Mode) -> Result<Logits> {
    let mut g = Graph::new(params, mode);
    let x = g.input(Matrix::row_vector(pooled.to_vec()));
    let out = head.forward(&mut g, x)?;
    Ok(Logits(g.value(out).as_slice().to_vec()))
}

/// BiLSTM head over the masked rows of `hidden`.
pub fn bilstm_head_forward(
    hidden: &Matrix,
    mask: &[bool],
    head: &BiLstmHead,
    params: &ParamStore,
    mode: Mode,
) -> Result<Logits> {
    if mask.len() != hidden.rows() {
        return Err(Error::LengthMismatch {
            left: mask.len(),
            right: hidden.rows(),
        });
    }
    let rows: Vec<Vec<f64>> = mask
        .iter()
        .enumerate()
        .filter(|&(_, &m)| m)
        .map(|(i, _)| hidden.row(i).to_vec())
        .collect();
    if rows.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut g = Graph::new(params, mode);
    let xs = g.input(Matrix::from_rows(&rows));
    let out = head.forward(&mut g, xs)?;
    Ok(Logits(g.value(out).as_slice().to_vec()))
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Denominator floor for the relative error, so coordinates whose gradient
/// is essentially zero are judged by absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient returned by `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` on the chosen coordinates (all when `coords` is
/// `None`). The error per coordinate is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check<F>(mut f: F, theta: &[f64], eps: f64, coords: Option<&[usize]>) -> Result<GradCheck>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("gradient check eps {eps} outside [1e-6, 1e-4]")));
    }
    let (loss, analytic) = f(theta)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::LengthMismatch {
            left: analytic.len(),
            right: theta.len(),
        });
    }
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: 0,
    };
    let mut probe = theta.to_vec();
    for &i in coords {
        probe[i] = theta[i] + eps;
        let (plus, _) = f(&probe)?;
        probe[i] = theta[i] - eps;
        let (minus, _) = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        if err > worst.max_rel_error {
            worst.max_rel_error = err;
            worst.worst_index = i;
        }
        worst.checked += 1;
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dense_cfg(hidden: usize, classes: usize) -> HeadConfig {
        HeadConfig {
            dense_hidden: Some(hidden),
            classes,
            ..HeadConfig::new(HeadKind::Dense)
        }
    }

    #[test]
    fn zero_weights_pass_bias_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DenseHead::init(&dense_cfg(4, 3), 5, &mut store, &mut rng).unwrap();
        for id in [head.w1, head.b1, head.w2] {
            store.get_mut(id).as_mut_slice().fill(0.0);
        }
        store.get_mut(head.b2).as_mut_slice().copy_from_slice(&[0.1, 0.2, 0.3]);
        let logits = dense_head_forward(&[1.0, -2.0, 3.0, 0.5, 9.0], &head, &store, Mode::Eval).unwrap();
        assert_eq!(logits.0, vec![0.1, 0.2, 0.3]);
    }

    #[test]
    fn hand_computed_dense_chain() {
        let mut store = ParamStore::new();
        store.add("head.dense.w1", Matrix::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]])).unwrap();
        store.add("head.dense.b1", Matrix::row_vector(vec![0.25, 1.0])).unwrap();
        store.add("head.dense.w2", Matrix::from_rows(&[vec![2.0, -1.0], vec![1.0, 4.0]])).unwrap();
        store.add("head.dense.b2", Matrix::row_vector(vec![0.0, 0.5])).unwrap();
        let head = DenseHead::bind(&dense_cfg(2, 2), 2, &store).unwrap();
        // x = (1, -1): W₁ᵀx + b₁ = (1·1 + 0.5·-1 + 0.25, -2·1 + 3·-1 + 1) = (0.75, -4)
        // ReLU → (0.75, 0); W₂ᵀh + b₂ = (2·0.75, -1·0.75 + 0.5) = (1.5, -0.25)
        let logits = dense_head_forward(&[1.0, -1.0], &head, &store, Mode::Eval).unwrap();
        assert_eq!(logits.0, vec![1.5, -0.25]);
    }

    #[test]
    fn dense_shape_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DenseHead::init(&dense_cfg(4, 3), 5, &mut store, &mut rng).unwrap();
        assert!(matches!(
            dense_head_forward(&[1.0; 4], &head, &store, Mode::Eval),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn eval_deterministic_train_seeded() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = DenseHead::init(&dense_cfg(16, 3), 4, &mut store, &mut rng).unwrap();
        let x = [0.3, -0.1, 0.8, 0.2];
        let e1 = dense_head_forward(&x, &head, &store, Mode::Eval).unwrap();
        let e2 = dense_head_forward(&x, &head, &store, Mode::Eval).unwrap();
        assert_eq!(e1, e2);
        let t1 = dense_head_forward(&x, &head, &store, Mode::Train { seed: 9 }).unwrap();
        let t2 = dense_head_forward(&x, &head, &store, Mode::Train { seed: 9 }).unwrap();
        assert_eq!(t1, t2);
        assert_ne!(t1, e1);
    }

    #[test]
    fn zero_lstm_weights_give_projection_bias() {
        let cfg = HeadConfig {
            lstm_units: 3,
            ..HeadConfig::new(HeadKind::BiLstm)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = BiLstmHead::init(&cfg, 4, &mut store, &mut rng).unwrap();
        for l in [&head.forward_lstm, &head.backward_lstm] {
            for id in [l.w_ih, l.w_hh, l.bias] {
                store.get_mut(id).as_mut_slice().fill(0.0);
            }
        }
        let bias = store.get(head.proj_b).as_slice().to_vec();
        let hidden = Matrix::uniform(5, 4, 1.0, &mut rng);
        let mask = [true, true, true, false, false];
        let logits = bilstm_head_forward(&hidden, &mask, &head, &store, Mode::Eval).unwrap();
        assert_eq!(logits.0, bias);
    }

    #[test]
    fn representation_is_twice_the_units() {
        let cfg = HeadConfig::new(HeadKind::BiLstm);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let head = BiLstmHead::init(&cfg, 8, &mut store, &mut rng).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let xs = g.input(Matrix::uniform(3, 8, 1.0, &mut rng));
        let rep = head.representation(&mut g, xs).unwrap();
        assert_eq!(g.value(rep).shape(), (1, 512));
    }

    #[test]
    fn all_masked_is_empty_sequence() {
        let cfg = HeadConfig {
            lstm_units: 2,
            ..HeadConfig::new(HeadKind::BiLstm)
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = BiLstmHead::init(&cfg, 2, &mut store, &mut rng).unwrap();
        let hidden = Matrix::zeros(3, 2);
        assert!(matches!(
            bilstm_head_forward(&hidden, &[false; 3], &head, &store, Mode::Eval),
            Err(Error::EmptySequence)
        ));
    }

    #[test]
    fn square_function_gradient() {
        let report = gradient_check(|x| Ok((x[0] * x[0], vec![2.0 * x[0]])), &[1.0], 1e-5, None).unwrap();
        assert!(report.max_rel_error < 1e-9, "{report:?}");
        assert!(gradient_check(|x| Ok((x[0], vec![1.0])), &[1.0], 1e-3, None).is_err());
        assert!(matches!(
            gradient_check(|_| Ok((f64::NAN, vec![0.0])), &[1.0], 1e-5, None),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(ProbVector(vec![0.4, 0.4, 0.2]).argmax(), 0);
        assert_eq!(ProbVector(vec![0.1, 0.2, 0.7]).argmax(), 2);
    }
}
