//! Single-direction LSTM layer on the tape.
//!
//! Gate columns are laid out as `[input, forget, cell, output]`.

use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

impl Lstm {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let bound_ih = 1.0 / (input as f64).sqrt();
        let bound_hh = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.add(
            format!("{prefix}.w_ih"),
            Matrix::uniform(input, 4 * hidden, bound_ih, rng),
        )?;
        let w_hh = store.add(
            format!("{prefix}.w_hh"),
            Matrix::uniform(hidden, 4 * hidden, bound_hh, rng),
        )?;
        let mut b = Matrix::uniform(1, 4 * hidden, bound_hh, rng);
        for j in hidden..2 * hidden {
            b.set(0, j, FORGET_BIAS);
        }
        let bias = store.add(format!("{prefix}.b"), b)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        })
    }

    pub fn bind(store: &ParamStore, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w_ih: store.expect(&format!("{prefix}.w_ih"), input, 4 * hidden)?,
            w_hh: store.expect(&format!("{prefix}.w_hh"), hidden, 4 * hidden)?,
            bias: store.expect(&format!("{prefix}.b"), 1, 4 * hidden)?,
            input,
            hidden,
        })
    }

    /// One recurrence step given the precomputed input projection `x·W_ih + b`.
    fn step(&self, g: &mut Graph<'_>, x_proj: Var, h: Var, c: Var) -> (Var, Var) {
        let u = self.hidden;
        let w_hh = g.param(self.w_hh);
        let hh = g.matmul(h, w_hh);
        let z = g.add(x_proj, hh);
        let i = g.slice_cols(z, 0, u);
        let i = g.sigmoid(i);
        let f = g.slice_cols(z, u, u);
        let f = g.sigmoid(f);
        let cand = g.slice_cols(z, 2 * u, u);
        let cand = g.tanh(cand);
        let o = g.slice_cols(z, 3 * u, u);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c);
        let ic = g.mul(i, cand);
        let c_next = g.add(fc, ic);
        let tc = g.tanh(c_next);
        let h_next = g.mul(o, tc);
        (h_next, c_next)
    }

    /// Runs over the rows of `xs` (`n × input`) from zero state. With
    /// `reverse`, rows are consumed last-to-first. Hidden states are returned
    /// in consumption order.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var, reverse: bool) -> Vec<Var> {
        let n = g.value(xs).rows();
        let proj = g.affine(xs, self.w_ih, self.bias);
        let mut h = g.input(Matrix::zeros(1, self.hidden));
        let mut c = g.input(Matrix::zeros(1, self.hidden));
        let mut out = Vec::with_capacity(n);
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            let x_t = g.slice_rows(proj, t, 1);
            let (h2, c2) = self.step(g, x_t, h, c);
            h = h2;
            c = c2;
            out.push(h);
        }
        out
    }
}
