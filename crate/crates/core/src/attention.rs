//! Global, local-m and local-p attention over the top encoder layer.
//!
//! Scores are `u_i = v . tanh(W_enc h_i + W_dec d_t + b)`. Encoder positions
//! are 1-based in all window arithmetic, matching the way alignment centers are
//! defined; windows are clipped to `[1, T]` for each row's true length `T`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{G2pError, Result};
use crate::layers::{self, uniform, BoundLinear, ParamGroup};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    /// The decoder sees the encoder only through its initial state.
    None,
    Global,
    /// Monotonic alignment: window centred on the decoder step.
    LocalM,
    /// Predicted alignment with Gaussian reweighting.
    LocalP,
}

impl AttentionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionKind::None => "none",
            AttentionKind::Global => "global",
            AttentionKind::LocalM => "local_m",
            AttentionKind::LocalP => "local_p",
        }
    }
}

impl std::str::FromStr for AttentionKind {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "none" => Ok(AttentionKind::None),
            "global" => Ok(AttentionKind::Global),
            "local_m" => Ok(AttentionKind::LocalM),
            "local_p" => Ok(AttentionKind::LocalP),
            other => Err(G2pError::Config(format!("unknown attention kind {other:?}"))),
        }
    }
}

/// Position-prediction weights of local-p.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveParams<T> {
    /// `[a x d]`
    pub w_pos: Tensor<T>,
    /// `[a]`
    pub v_pos: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub kind: AttentionKind,
    /// Half-width `D` of local windows.
    pub window: usize,
    /// `W_enc: [a x H]`
    pub w_enc: Tensor<T>,
    /// `W_dec: [a x d]`
    pub w_dec: Tensor<T>,
    /// `[a]`
    pub bias: Tensor<T>,
    /// `[a]`
    pub v: Tensor<T>,
    pub predictive: Option<PredictiveParams<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn new<R: Rng + ?Sized>(
        kind: AttentionKind,
        window: usize,
        enc_dim: usize,
        dec_dim: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if kind == AttentionKind::None {
            return Err(G2pError::Config("no parameters for attention kind none".into()));
        }
        if window == 0 || size == 0 {
            return Err(G2pError::Config("attention window and size must be positive".into()));
        }
        let w_enc = uniform(&[size, enc_dim], rng);
        let w_dec = uniform(&[size, dec_dim], rng);
        let bias = uniform(&[size], rng);
        let v = uniform(&[size], rng);
        let predictive = (kind == AttentionKind::LocalP).then(|| PredictiveParams {
            w_pos: uniform(&[size, dec_dim], rng),
            v_pos: uniform(&[size], rng),
        });
        Ok(AttentionParams {
            kind,
            window,
            w_enc,
            w_dec,
            bias,
            v,
            predictive,
        })
    }

    pub fn size(&self) -> usize {
        self.v.numel()
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundAttention {
        BoundAttention {
            kind: self.kind,
            window: self.window,
            w_enc: tape.param(&self.w_enc),
            w_dec: tape.param(&self.w_dec),
            bias: tape.param(&self.bias),
            v: tape.param(&self.v),
            predictive: self
                .predictive
                .as_ref()
                .map(|p| (tape.param(&p.w_pos), tape.param(&p.v_pos))),
        }
    }
}

impl<T: Scalar> ParamGroup<T> for AttentionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w_enc"), &self.w_enc);
        f(format!("{prefix}.w_dec"), &self.w_dec);
        f(format!("{prefix}.bias"), &self.bias);
        f(format!("{prefix}.v"), &self.v);
        if let Some(p) = &self.predictive {
            f(format!("{prefix}.w_pos"), &p.w_pos);
            f(format!("{prefix}.v_pos"), &p.v_pos);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w_enc"), &mut self.w_enc);
        f(format!("{prefix}.w_dec"), &mut self.w_dec);
        f(format!("{prefix}.bias"), &mut self.bias);
        f(format!("{prefix}.v"), &mut self.v);
        if let Some(p) = &mut self.predictive {
            f(format!("{prefix}.w_pos"), &mut p.w_pos);
            f(format!("{prefix}.v_pos"), &mut p.v_pos);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundAttention {
    pub kind: AttentionKind,
    pub window: usize,
    pub w_enc: Var,
    pub w_dec: Var,
    pub bias: Var,
    pub v: Var,
    pub predictive: Option<(Var, Var)>,
}

/// Encoder states prepared for attention: the states themselves plus their
/// projections `W_enc h_i`, computed once per sequence.
#[derive(Clone, Debug)]
pub struct Memory {
    /// One `[B x H]` node per position.
    pub states: Vec<Var>,
    keys: Vec<Var>,
    /// True (unpadded) length of each row.
    pub lengths: Vec<usize>,
}

impl Memory {
    pub fn new<T: Scalar>(
        tape: &mut Tape<'_, T>,
        states: Vec<Var>,
        lengths: Vec<usize>,
        att: &BoundAttention,
    ) -> Result<Self> {
        if states.is_empty() || lengths.iter().any(|&l| l == 0 || l > states.len()) {
            return Err(G2pError::Contract("attention over an empty encoder sequence".into()));
        }
        let keys = states
            .iter()
            .map(|&h| tape.matmul_nt(h, att.w_enc))
            .collect::<Result<_>>()?;
        Ok(Memory {
            states,
            keys,
            lengths,
        })
    }

    pub fn max_len(&self) -> usize {
        self.states.len()
    }
}

/// Result of one attention step for a batch.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `[B x T]`, zero outside each row's support.
    pub weights: Var,
    /// `[B x H]`
    pub context: Var,
    /// Predicted centres `p_t` (local-p only).
    pub centers: Option<Vec<f64>>,
    /// Inclusive 1-based support `(lo, hi)` per row.
    pub support: Vec<(usize, usize)>,
}

/// Monotonic window: centre `min(t, T)`, clipped to `[1, T]`.
pub fn local_m_window(t: usize, len: usize, half_width: usize) -> (usize, usize) {
    let center = t.min(len);
    (center.saturating_sub(half_width).max(1), (center + half_width).min(len))
}

/// Window `[ceil(p) - D, floor(p) + D]` around a real centre, clipped to `[1, T]`.
pub fn local_p_window(center: f64, len: usize, half_width: usize) -> (usize, usize) {
    let lo = center.ceil() as i64 - half_width as i64;
    let hi = center.floor() as i64 + half_width as i64;
    (lo.max(1) as usize, (hi.max(1) as usize).min(len))
}

/// `exp(-(i - p)^2 / (2 sigma^2))` with `sigma = D / 2`.
pub fn gaussian_factor(position: f64, center: f64, half_width: usize) -> f64 {
    let sigma = half_width as f64 / 2.0;
    (-(position - center).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Attention at decoder step `t` (1-based) given decoder state `d_t: [B x d]`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<'_, T>,
    att: &BoundAttention,
    memory: &Memory,
    d_t: Var,
    t: usize,
) -> Result<AttentionOutput> {
    let n = memory.max_len();
    let batch = memory.lengths.len();
    let query = layers::linear(tape, d_t, att.w_dec, att.bias)?;
    let mut scores = Vec::with_capacity(n);
    for &key in &memory.keys {
        let e = tape.add(key, query)?;
        let e = tape.tanh(e)?;
        scores.push(tape.matmul_nt(e, att.v)?);
    }
    let scores = tape.concat(&scores)?;

    let mut centers_var = None;
    let (support, centers): (Vec<(usize, usize)>, Option<Vec<f64>>) = match att.kind {
        AttentionKind::None => {
            return Err(G2pError::Contract("attend called without attention".into()));
        }
        AttentionKind::Global => (memory.lengths.iter().map(|&l| (1, l)).collect(), None),
        AttentionKind::LocalM => (
            memory
                .lengths
                .iter()
                .map(|&l| local_m_window(t, l, att.window))
                .collect(),
            None,
        ),
        AttentionKind::LocalP => {
            let (w_pos, v_pos) = att
                .predictive
                .ok_or_else(|| G2pError::Contract("local-p without position parameters".into()))?;
            let s = tape.matmul_nt(d_t, w_pos)?;
            let s = tape.tanh(s)?;
            let z = tape.matmul_nt(s, v_pos)?;
            let z = tape.sigmoid(z)?;
            let lens: Vec<T> = memory.lengths.iter().map(|&l| T::of(l as f64)).collect();
            let p = tape.mul_rows(z, &lens)?;
            let centers: Vec<f64> = tape.value(p).iter().map(|v| v.as_f64()).collect();
            centers_var = Some(p);
            (
                centers
                    .iter()
                    .zip(&memory.lengths)
                    .map(|(&c, &l)| local_p_window(c, l, att.window))
                    .collect(),
                Some(centers),
            )
        }
    };

    let mut mask = vec![false; batch * n];
    for (r, &(lo, hi)) in support.iter().enumerate() {
        mask[r * n + lo - 1..r * n + hi].fill(true);
    }
    let mut weights = tape.softmax_masked(scores, &mask)?;

    if let Some(p) = centers_var {
        let positions: Vec<T> = (0..batch)
            .flat_map(|_| (1..=n).map(|i| T::of(i as f64)))
            .collect();
        let sigma = att.window as f64 / 2.0;
        let p = tape.repeat_cols(p, n)?;
        let neg_p = tape.scale(p, -T::one())?;
        let diff = tape.add_const(neg_p, &positions)?;
        let sq = tape.mul(diff, diff)?;
        let expo = tape.scale(sq, T::of(-1.0 / (2.0 * sigma * sigma)))?;
        let gauss = tape.exp(expo)?;
        weights = tape.mul(weights, gauss)?;
    }

    let context = tape.weighted_sum(weights, &memory.states)?;
    Ok(AttentionOutput {
        weights,
        context,
        centers,
        support,
    })
}

/// Output logits `W_s [c_t ; d_t] + b_s`.
pub fn combine_output<T: Scalar>(
    tape: &mut Tape<'_, T>,
    context: Var,
    d_t: Var,
    output: &BoundLinear,
) -> Result<Var> {
    let joined = tape.concat(&[context, d_t])?;
    layers::linear(tape, joined, output.weight, output.bias)
}

/// Decoder input with the previous context appended after the embedding.
pub fn input_feed<T: Scalar>(tape: &mut Tape<'_, T>, embedded: Var, prev_context: Var) -> Result<Var> {
    tape.concat(&[embedded, prev_context])
}

/// Attention for a single unbatched query, with plain values out.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStep<T> {
    pub weights: Vec<T>,
    pub context: Vec<T>,
    pub center: Option<f64>,
    pub support: (usize, usize),
}

fn attend_single<T: Scalar>(
    enc_top: &Tensor<T>,
    d_t: &Tensor<T>,
    params: &AttentionParams<T>,
    t: usize,
) -> Result<AttentionStep<T>> {
    let (len, h) = enc_top.dims2()?;
    if len == 0 {
        return Err(G2pError::Contract("attention over an empty encoder sequence".into()));
    }
    if enc_top.shape().len() != 2 {
        return Err(G2pError::dim("attend", enc_top.shape(), &[len, h]));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let states = (0..len)
        .map(|i| tape.constant(vec![1, h], enc_top.row(i).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let memory = Memory::new(&mut tape, states, vec![len], &bound)?;
    let d = tape.constant(vec![1, d_t.numel()], d_t.data().to_vec())?;
    let out = attend(&mut tape, &bound, &memory, d, t)?;
    Ok(AttentionStep {
        weights: tape.value(out.weights).to_vec(),
        context: tape.value(out.context).to_vec(),
        center: out.centers.map(|c| c[0]),
        support: out.support[0],
    })
}

/// Global attention of `d_t: [d]` over `enc_top: [T x H]`.
pub fn global_attend<T: Scalar>(
    enc_top: &Tensor<T>,
    d_t: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionStep<T>> {
    let mut p = params.clone();
    p.kind = AttentionKind::Global;
    attend_single(enc_top, d_t, &p, 1)
}

/// Local-m attention at decoder step `t >= 1`.
pub fn local_m_attend<T: Scalar>(
    enc_top: &Tensor<T>,
    d_t: &Tensor<T>,
    t: usize,
    params: &AttentionParams<T>,
) -> Result<AttentionStep<T>> {
    if t == 0 {
        return Err(G2pError::Contract("decoder steps are numbered from 1".into()));
    }
    let mut p = params.clone();
    p.kind = AttentionKind::LocalM;
    attend_single(enc_top, d_t, &p, t)
}

/// Local-p attention; `params` must carry position-prediction weights.
pub fn local_p_attend<T: Scalar>(
    enc_top: &Tensor<T>,
    d_t: &Tensor<T>,
    params: &AttentionParams<T>,
) -> Result<AttentionStep<T>> {
    let mut p = params.clone();
    p.kind = AttentionKind::LocalP;
    attend_single(enc_top, d_t, &p, 1)
}
