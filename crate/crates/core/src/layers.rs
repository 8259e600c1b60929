//! Embedding, LSTM, affine and dropout building blocks.
//!
//! Each parameter group comes in two forms: an owning struct of tensors, and a
//! `Bound*` struct of tape handles produced by `bind`. `bind` records leaves in
//! exactly the order `visit` walks them, so the bound handles of a whole model
//! form one contiguous run on the tape that lines up with the named tensors.

use rand::Rng;

use crate::error::{G2pError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.05;
/// Initial forget-gate bias.
pub const FORGET_BIAS: f64 = 1.0;

/// Visitor over named parameter tensors.
pub trait ParamGroup<T: Scalar> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));
}

pub(crate) fn uniform<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| T::of(rng.random_range(-INIT_RANGE..INIT_RANGE)))
        .collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape matches")
        .with_requires_grad()
}

fn name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

/// One learned vector per vocabulary entry (reserved ids included).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    pub table: Tensor<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, dim: usize, rng: &mut R) -> Self {
        EmbeddingTable {
            table: uniform(&[vocab_size, dim], rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }
}

impl<T: Scalar> ParamGroup<T> for EmbeddingTable<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(prefix.to_string(), &self.table);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(prefix.to_string(), &mut self.table);
    }
}

/// Looks up rows of an embedding table: `[ids.len() x dim]`.
pub fn embed<T: Scalar>(tape: &mut Tape<'_, T>, table: Var, ids: &[usize]) -> Result<Var> {
    tape.gather_rows(table, ids)
}

/// Weights of one LSTM layer. Gate blocks are stacked in the order input,
/// forget, cell candidate, output, each `units` rows tall.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams<T> {
    /// `[4u x in_dim]`
    pub w_input: Tensor<T>,
    /// `[4u x u]`
    pub w_hidden: Tensor<T>,
    /// `[4u]`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmCellParams<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, units: usize, rng: &mut R) -> Self {
        let w_input = uniform(&[4 * units, in_dim], rng);
        let w_hidden = uniform(&[4 * units, units], rng);
        let mut bias: Tensor<T> = uniform(&[4 * units], rng);
        bias.data_mut()[units..2 * units].fill(T::of(FORGET_BIAS));
        LstmCellParams {
            w_input,
            w_hidden,
            bias,
        }
    }

    pub fn zeros(in_dim: usize, units: usize) -> Self {
        LstmCellParams {
            w_input: Tensor::zeros(&[4 * units, in_dim]).with_requires_grad(),
            w_hidden: Tensor::zeros(&[4 * units, units]).with_requires_grad(),
            bias: Tensor::zeros(&[4 * units]).with_requires_grad(),
        }
    }

    pub fn units(&self) -> usize {
        self.w_hidden.shape()[1]
    }

    pub fn in_dim(&self) -> usize {
        self.w_input.shape()[1]
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundLstm {
        BoundLstm {
            w_input: tape.param(&self.w_input),
            w_hidden: tape.param(&self.w_hidden),
            bias: tape.param(&self.bias),
            units: self.units(),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for LstmCellParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(name(prefix, "w_input"), &self.w_input);
        f(name(prefix, "w_hidden"), &self.w_hidden);
        f(name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(name(prefix, "w_input"), &mut self.w_input);
        f(name(prefix, "w_hidden"), &mut self.w_hidden);
        f(name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLstm {
    pub w_input: Var,
    pub w_hidden: Var,
    pub bias: Var,
    pub units: usize,
}

/// One LSTM step over a batch: `x: [B x in]`, `h, c: [B x u]`.
pub fn lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    h: Var,
    c: Var,
    cell: &BoundLstm,
) -> Result<(Var, Var)> {
    let u = cell.units;
    let xw = tape.matmul_nt(x, cell.w_input)?;
    let hw = tape.matmul_nt(h, cell.w_hidden)?;
    let pre = tape.add(xw, hw)?;
    let pre = tape.add_row(pre, cell.bias)?;
    let i = tape.slice_cols(pre, 0, u)?;
    let f = tape.slice_cols(pre, u, u)?;
    let g = tape.slice_cols(pre, 2 * u, u)?;
    let o = tape.slice_cols(pre, 3 * u, u)?;
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new)?;
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

/// Rows with `keep[r] == 1` take `new`, rows with 0 keep `old`.
fn blend<T: Scalar>(tape: &mut Tape<'_, T>, new: Var, old: Var, keep: &[T]) -> Result<Var> {
    if keep.iter().all(|&k| k == T::one()) {
        return Ok(new);
    }
    let hold: Vec<T> = keep.iter().map(|&k| T::one() - k).collect();
    let a = tape.mul_rows(new, keep)?;
    let b = tape.mul_rows(old, &hold)?;
    tape.add(a, b)
}

/// An LSTM step that leaves padded rows' state untouched.
pub fn masked_lstm_step<T: Scalar>(
    tape: &mut Tape<'_, T>,
    x: Var,
    state: (Var, Var),
    cell: &BoundLstm,
    keep: Option<&[T]>,
) -> Result<(Var, Var)> {
    let (h, c) = lstm_step(tape, x, state.0, state.1, cell)?;
    match keep {
        Some(k) => Ok((blend(tape, h, state.0, k)?, blend(tape, c, state.1, k)?)),
        None => Ok((h, c)),
    }
}

/// Inverted dropout: zero each element with probability `p`, scale the rest by
/// `1 / (1 - p)`.
pub fn dropout<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    p: f64,
    rng: &mut R,
) -> Result<Var> {
    check_dropout(p)?;
    if p == 0.0 {
        return Ok(x);
    }
    let scale = T::of(1.0 / (1.0 - p));
    let mask = (0..tape.value(x).len())
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect();
    tape.mul_const(x, mask)
}

pub fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(G2pError::Config(format!("dropout probability {p} outside [0, 1)")));
    }
    Ok(())
}

/// Stacked LSTM with dropout on the activations passed between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedLstm<T> {
    pub layers: Vec<LstmCellParams<T>>,
    pub dropout: f64,
}

impl<T: Scalar> StackedLstm<T> {
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        units: usize,
        layers: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let layers = (0..layers)
            .map(|l| LstmCellParams::new(if l == 0 { in_dim } else { units }, units, rng))
            .collect();
        StackedLstm { layers, dropout }
    }

    pub fn units(&self) -> usize {
        self.layers[0].units()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundStack {
        BoundStack {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            dropout: self.dropout,
        }
    }
}

impl<T: Scalar> ParamGroup<T> for StackedLstm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (l, layer) in self.layers.iter().enumerate() {
            layer.visit(&name(prefix, &format!("layer{l}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (l, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&name(prefix, &format!("layer{l}")), f);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundStack {
    pub layers: Vec<BoundLstm>,
    pub dropout: f64,
}

impl BoundStack {
    pub fn units(&self) -> usize {
        self.layers[0].units
    }
}

pub type LayerState = (Var, Var);

/// Runs a stack over a time-ordered list of `[B x in]` inputs, layer by
/// layer. `keep[t]` masks padded rows at step `t`. Dropout (when `rng` is
/// given) applies only to the outputs handed from one layer to the next.
pub fn run_stack<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    inputs: &[Var],
    stack: &BoundStack,
    init: &[LayerState],
    keep: Option<&[Vec<T>]>,
    mut rng: Option<&mut R>,
) -> Result<(Vec<Var>, Vec<LayerState>)> {
    if init.len() != stack.layers.len() {
        return Err(G2pError::Contract(format!(
            "{} initial states for a {}-layer stack",
            init.len(),
            stack.layers.len()
        )));
    }
    let mut seq = inputs.to_vec();
    let mut finals = Vec::with_capacity(init.len());
    for (l, cell) in stack.layers.iter().enumerate() {
        if l > 0 {
            if let Some(r) = rng.as_deref_mut() {
                for x in seq.iter_mut() {
                    *x = dropout(tape, *x, stack.dropout, r)?;
                }
            }
        }
        let mut state = init[l];
        let mut out = Vec::with_capacity(seq.len());
        for (t, &x) in seq.iter().enumerate() {
            state = masked_lstm_step(tape, x, state, cell, keep.map(|k| k[t].as_slice()))?;
            out.push(state.0);
        }
        finals.push(state);
        seq = out;
    }
    Ok((seq, finals))
}

/// One time step through every layer of a stack, as the decoder runs.
pub fn stack_step<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<'_, T>,
    x: Var,
    stack: &BoundStack,
    states: &[LayerState],
    mut rng: Option<&mut R>,
) -> Result<(Var, Vec<LayerState>)> {
    if states.len() != stack.layers.len() {
        return Err(G2pError::Contract(format!(
            "{} states for a {}-layer stack",
            states.len(),
            stack.layers.len()
        )));
    }
    let mut input = x;
    let mut next = Vec::with_capacity(states.len());
    for (l, (cell, &state)) in stack.layers.iter().zip(states).enumerate() {
        if l > 0 {
            if let Some(r) = rng.as_deref_mut() {
                input = dropout(tape, input, stack.dropout, r)?;
            }
        }
        let s = lstm_step(tape, input, state.0, state.1, cell)?;
        next.push(s);
        input = s.0;
    }
    Ok((input, next))
}

/// Affine map `x W^T + b` with `W: [out x in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: uniform(&[out_dim, in_dim], rng),
            bias: uniform(&[out_dim], rng),
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundLinear {
        BoundLinear {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(name(prefix, "weight"), &self.weight);
        f(name(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(name(prefix, "weight"), &mut self.weight);
        f(name(prefix, "bias"), &mut self.bias);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

pub fn linear<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let y = tape.matmul_nt(x, weight)?;
    tape.add_row(y, bias)
}
