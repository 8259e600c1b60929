//! The encoder-decoder transducer: grapheme embedding, bidirectional (or
//! reversed unidirectional) stacked LSTM encoder, per-layer state bridge, and
//! a stacked LSTM decoder with optional attention and input feeding.
//!
//! All batch operations take padded [`Batch`]-style id rows. Encoder states are
//! always indexed by original grapheme position, in both encoder modes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionKind, AttentionOutput, AttentionParams, BoundAttention, Memory};
use crate::data::{Batch, LexiconEntry, Vocabulary, BOS, EOS, PAD};
use crate::error::{G2pError, Result};
use crate::layers::{
    self, embed, run_stack, stack_step, uniform, BoundLinear, BoundLstm, BoundStack, EmbeddingTable, LayerState,
    Linear, ParamGroup, StackedLstm,
};
use crate::rng::{Purpose, SeedStreams};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    Bidirectional,
    /// One stack reading the word right to left.
    ReverseUnidirectional,
}

impl EncoderMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderMode::Bidirectional => "bidirectional",
            EncoderMode::ReverseUnidirectional => "reverse_unidirectional",
        }
    }
}

impl std::str::FromStr for EncoderMode {
    type Err = G2pError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "bidirectional" | "bi" => Ok(EncoderMode::Bidirectional),
            "reverse_unidirectional" | "reverse" => Ok(EncoderMode::ReverseUnidirectional),
            other => Err(G2pError::Config(format!("unknown encoder mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderMode,
    pub attention: AttentionKind,
    pub layers: usize,
    pub units: usize,
    pub embed_dim: usize,
    /// Local attention half-width `D`.
    pub window: usize,
    pub input_feeding: bool,
    pub p_drop: f64,
    /// Attention hidden size; `None` means `units`.
    pub attention_size: Option<usize>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderMode::Bidirectional,
            attention: AttentionKind::Global,
            layers: 3,
            units: 512,
            embed_dim: 512,
            window: 3,
            input_feeding: true,
            p_drop: 0.2,
            attention_size: None,
            seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("units", self.units),
            ("embed_dim", self.embed_dim),
            ("window", self.window),
            ("attention_size", self.attention_size.unwrap_or(1)),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(G2pError::Config(format!("{name} must be at least 1")));
        }
        layers::check_dropout(self.p_drop)
    }

    pub fn attention_size(&self) -> usize {
        self.attention_size.unwrap_or(self.units)
    }

    /// Width of one encoder state.
    pub fn encoder_dim(&self) -> usize {
        match self.encoder {
            EncoderMode::Bidirectional => 2 * self.units,
            EncoderMode::ReverseUnidirectional => self.units,
        }
    }

    pub fn has_attention(&self) -> bool {
        self.attention != AttentionKind::None
    }

    /// Input feeding only exists alongside attention.
    pub fn feeds_context(&self) -> bool {
        self.input_feeding && self.has_attention()
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.embed_dim + if self.feeds_context() { self.encoder_dim() } else { 0 }
    }
}

/// `W_f fwd + W_b bwd + b` for one state kind of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeGate<T> {
    pub w_forward: Tensor<T>,
    pub w_backward: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> BridgeGate<T> {
    fn new<R: Rng + ?Sized>(units: usize, rng: &mut R) -> Self {
        BridgeGate {
            w_forward: uniform(&[units, units], rng),
            w_backward: uniform(&[units, units], rng),
            bias: uniform(&[units], rng),
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(format!("{prefix}.w_forward"), &self.w_forward);
        f(format!("{prefix}.w_backward"), &self.w_backward);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w_forward"), &mut self.w_forward);
        f(format!("{prefix}.w_backward"), &mut self.w_backward);
        f(format!("{prefix}.bias"), &mut self.bias);
    }

    fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> [Var; 3] {
        [
            tape.param(&self.w_forward),
            tape.param(&self.w_backward),
            tape.param(&self.bias),
        ]
    }
}

/// Bridge weights for one layer: hidden state and cell state.
#[derive(Clone, Debug, PartialEq)]
pub struct BridgeLayer<T> {
    pub h: BridgeGate<T>,
    pub c: BridgeGate<T>,
}

/// Every learned tensor of a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T> {
    pub grapheme_embedding: EmbeddingTable<T>,
    pub phoneme_embedding: EmbeddingTable<T>,
    /// Left-to-right stack, or the only stack in reverse mode.
    pub encoder_forward: StackedLstm<T>,
    pub encoder_backward: Option<StackedLstm<T>>,
    pub bridge: Vec<BridgeLayer<T>>,
    pub decoder: StackedLstm<T>,
    pub attention: Option<AttentionParams<T>>,
    pub output: Linear<T>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Draws every tensor from `rng` in visiting order.
    pub fn new<R: Rng + ?Sized>(
        config: &ModelConfig,
        graphemes: usize,
        phonemes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let u = config.units;
        let bi = config.encoder == EncoderMode::Bidirectional;
        let grapheme_embedding = EmbeddingTable::new(graphemes, config.embed_dim, rng);
        let phoneme_embedding = EmbeddingTable::new(phonemes, config.embed_dim, rng);
        let encoder_forward = StackedLstm::new(config.embed_dim, u, config.layers, config.p_drop, rng);
        let encoder_backward =
            bi.then(|| StackedLstm::new(config.embed_dim, u, config.layers, config.p_drop, rng));
        let bridge = if bi {
            (0..config.layers)
                .map(|_| BridgeLayer {
                    h: BridgeGate::new(u, rng),
                    c: BridgeGate::new(u, rng),
                })
                .collect()
        } else {
            Vec::new()
        };
        let decoder = StackedLstm::new(config.decoder_input_dim(), u, config.layers, config.p_drop, rng);
        let attention = if config.has_attention() {
            Some(AttentionParams::new(
                config.attention,
                config.window,
                config.encoder_dim(),
                u,
                config.attention_size(),
                rng,
            )?)
        } else {
            None
        };
        let out_in = if config.has_attention() { config.encoder_dim() + u } else { u };
        let output = Linear::new(out_in, phonemes, rng);
        Ok(ParameterSet {
            grapheme_embedding,
            phoneme_embedding,
            encoder_forward,
            encoder_backward,
            bridge,
            decoder,
            attention,
            output,
        })
    }

    fn forward_prefix(&self) -> &'static str {
        if self.encoder_backward.is_some() {
            "encoder.forward"
        } else {
            "encoder.reverse"
        }
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundModel {
        let grapheme_embedding = tape.param(&self.grapheme_embedding.table);
        let phoneme_embedding = tape.param(&self.phoneme_embedding.table);
        let encoder_forward = self.encoder_forward.bind(tape);
        let encoder_backward = self.encoder_backward.as_ref().map(|s| s.bind(tape));
        let bridge = self
            .bridge
            .iter()
            .map(|l| (l.h.bind(tape), l.c.bind(tape)))
            .collect();
        let decoder = self.decoder.bind(tape);
        let attention = self.attention.as_ref().map(|a| a.bind(tape));
        let output = self.output.bind(tape);
        BoundModel {
            grapheme_embedding,
            phoneme_embedding,
            encoder_forward,
            encoder_backward,
            bridge,
            decoder,
            attention,
            output,
        }
    }

    /// Rebuilds bound handles from externally created leaves, one per tensor
    /// in canonical order.
    pub fn bound_from_vars(&self, vars: &[Var]) -> Result<BoundModel> {
        let expected = self.named().len();
        if vars.len() != expected {
            return Err(G2pError::Contract(format!(
                "{} vars for {expected} parameter tensors",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut next = || it.next().expect("length checked");
        let stack = |s: &StackedLstm<T>, next: &mut dyn FnMut() -> Var| BoundStack {
            layers: s
                .layers
                .iter()
                .map(|l| BoundLstm {
                    w_input: next(),
                    w_hidden: next(),
                    bias: next(),
                    units: l.units(),
                })
                .collect(),
            dropout: s.dropout,
        };
        let grapheme_embedding = next();
        let phoneme_embedding = next();
        let encoder_forward = stack(&self.encoder_forward, &mut next);
        let encoder_backward = self.encoder_backward.as_ref().map(|s| stack(s, &mut next));
        let bridge = self
            .bridge
            .iter()
            .map(|_| ([next(), next(), next()], [next(), next(), next()]))
            .collect();
        let decoder = stack(&self.decoder, &mut next);
        let attention = self.attention.as_ref().map(|a| BoundAttention {
            kind: a.kind,
            window: a.window,
            w_enc: next(),
            w_dec: next(),
            bias: next(),
            v: next(),
            predictive: a.predictive.as_ref().map(|_| (next(), next())),
        });
        let output = BoundLinear {
            weight: next(),
            bias: next(),
        };
        Ok(BoundModel {
            grapheme_embedding,
            phoneme_embedding,
            encoder_forward,
            encoder_backward,
            bridge,
            decoder,
            attention,
            output,
        })
    }

    /// `(name, tensor)` pairs in the canonical order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, t| out.push((n, t)));
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T: Scalar> ParamGroup<T> for ParameterSet<T> {
    fn visit<'a>(&'a self, _prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.grapheme_embedding.visit("grapheme_embedding", f);
        self.phoneme_embedding.visit("phoneme_embedding", f);
        self.encoder_forward.visit(self.forward_prefix(), f);
        if let Some(s) = &self.encoder_backward {
            s.visit("encoder.backward", f);
        }
        for (l, layer) in self.bridge.iter().enumerate() {
            layer.h.visit(&format!("bridge.layer{l}.h"), f);
            layer.c.visit(&format!("bridge.layer{l}.c"), f);
        }
        self.decoder.visit("decoder", f);
        if let Some(a) = &self.attention {
            a.visit("attention", f);
        }
        self.output.visit("output", f);
    }

    fn visit_mut(&mut self, _prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        let forward_prefix = self.forward_prefix();
        self.grapheme_embedding.visit_mut("grapheme_embedding", f);
        self.phoneme_embedding.visit_mut("phoneme_embedding", f);
        self.encoder_forward.visit_mut(forward_prefix, f);
        if let Some(s) = &mut self.encoder_backward {
            s.visit_mut("encoder.backward", f);
        }
        for (l, layer) in self.bridge.iter_mut().enumerate() {
            layer.h.visit_mut(&format!("bridge.layer{l}.h"), f);
            layer.c.visit_mut(&format!("bridge.layer{l}.c"), f);
        }
        self.decoder.visit_mut("decoder", f);
        if let Some(a) = &mut self.attention {
            a.visit_mut("attention", f);
        }
        self.output.visit_mut("output", f);
    }
}

/// Tape handles for a bound [`ParameterSet`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub grapheme_embedding: Var,
    pub phoneme_embedding: Var,
    pub encoder_forward: BoundStack,
    pub encoder_backward: Option<BoundStack>,
    /// `([w_f, w_b, b] for h, same for c)` per layer.
    pub bridge: Vec<([Var; 3], [Var; 3])>,
    pub decoder: BoundStack,
    pub attention: Option<BoundAttention>,
    pub output: BoundLinear,
}

fn stack_vars(s: &BoundStack, out: &mut Vec<Var>) {
    for l in &s.layers {
        out.extend([l.w_input, l.w_hidden, l.bias]);
    }
}

impl BoundModel {
    /// Parameter handles in the same order as [`ParameterSet::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.grapheme_embedding, self.phoneme_embedding];
        stack_vars(&self.encoder_forward, &mut out);
        if let Some(s) = &self.encoder_backward {
            stack_vars(s, &mut out);
        }
        for (h, c) in &self.bridge {
            out.extend(h);
            out.extend(c);
        }
        stack_vars(&self.decoder, &mut out);
        if let Some(a) = &self.attention {
            out.extend([a.w_enc, a.w_dec, a.bias, a.v]);
            if let Some((w, v)) = a.predictive {
                out.extend([w, v]);
            }
        }
        out.extend([self.output.weight, self.output.bias]);
        out
    }
}

/// Decoder recurrent state plus the previous context for input feeding.
#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<LayerState>,
    pub context: Option<Var>,
}

/// Encoder output for a batch.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// One `[B x H]` node per grapheme position.
    pub states: Vec<Var>,
    pub lengths: Vec<usize>,
    pub memory: Option<Memory>,
    pub init: DecoderState,
}

/// One decoder step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    /// `[B x |phonemes|]`
    pub logits: Var,
    pub state: DecoderState,
    pub attention: Option<AttentionOutput>,
}

/// Highest-scoring phoneme id, never PAD or BOS; ties go to the lower id.
pub fn argmax_phoneme<T: Scalar>(row: &[T]) -> usize {
    let mut best = EOS;
    for (i, &v) in row.iter().enumerate().skip(EOS + 1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn keep_masks<T: Scalar>(lengths: &[usize], steps: usize) -> Vec<Vec<T>> {
    (0..steps)
        .map(|t| {
            lengths
                .iter()
                .map(|&l| if t < l { T::one() } else { T::zero() })
                .collect()
        })
        .collect()
}

/// A complete model: configuration, vocabularies and parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub graphemes: Vocabulary,
    pub phonemes: Vocabulary,
    pub params: ParameterSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh model initialized from the `Init` stream of `config.seed`.
    pub fn new(config: ModelConfig, graphemes: Vocabulary, phonemes: Vocabulary) -> Result<Self> {
        let mut rng = SeedStreams::new(config.seed).stream(Purpose::Init);
        let params = ParameterSet::new(&config, graphemes.len(), phonemes.len(), &mut rng)?;
        Ok(Model {
            config,
            graphemes,
            phonemes,
            params,
        })
    }

    /// Same model in another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Model<U>> {
        let mut out = Model::<U>::new(self.config.clone(), self.graphemes.clone(), self.phonemes.clone())?;
        let src = self.params.named();
        let mut k = 0;
        out.params.visit_mut("", &mut |_, t| {
            *t = src[k].1.cast::<U>().with_requires_grad();
            k += 1;
        });
        Ok(out)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p, T>) -> BoundModel {
        self.params.bind(tape)
    }

    /// Gradients for every parameter in canonical order; unreached tensors get zeros.
    pub fn collect_grads(&self, bound: &BoundModel, grads: &Gradients<T>) -> Vec<Vec<T>> {
        bound
            .vars()
            .into_iter()
            .zip(self.params.named())
            .map(|(v, (_, t))| match grads.get(v) {
                Some(g) => g.to_vec(),
                None => vec![T::zero(); t.numel()],
            })
            .collect()
    }

    /// Runs the encoder over padded `sources` and prepares the decoder's initial state.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &BoundModel,
        sources: &[Vec<usize>],
        lengths: &[usize],
        mut rng: Option<&mut R>,
    ) -> Result<Encoded> {
        if sources.is_empty() || lengths.len() != sources.len() {
            return Err(G2pError::Input("empty batch".into()));
        }
        if lengths.contains(&0) {
            return Err(G2pError::Input("empty word".into()));
        }
        let steps = sources[0].len();
        if sources.iter().any(|r| r.len() != steps) || lengths.iter().any(|&l| l > steps) {
            return Err(G2pError::Contract("sources must be padded to a common length".into()));
        }
        let b = sources.len();
        let u = self.config.units;
        let inputs = (0..steps)
            .map(|t| {
                let ids: Vec<usize> = sources.iter().map(|r| r[t]).collect();
                embed(tape, bound.grapheme_embedding, &ids)
            })
            .collect::<Result<Vec<_>>>()?;
        let keep = keep_masks::<T>(lengths, steps);
        let zero_init = |tape: &mut Tape<'_, T>| -> Vec<LayerState> {
            (0..self.config.layers)
                .map(|_| (tape.zeros(&[b, u]), tape.zeros(&[b, u])))
                .collect()
        };

        // Right-to-left pass over padded time: padding comes first, so masked
        // rows stay at the zero state until their last real grapheme.
        let rev_inputs: Vec<Var> = inputs.iter().rev().copied().collect();
        let rev_keep: Vec<Vec<T>> = keep.iter().rev().cloned().collect();

        let (states, init_layers) = match &bound.encoder_backward {
            Some(backward) => {
                let init = zero_init(tape);
                let (fwd, fwd_final) =
                    run_stack(tape, &inputs, &bound.encoder_forward, &init, Some(&keep), rng.as_deref_mut())?;
                let init = zero_init(tape);
                let (mut bwd, bwd_final) =
                    run_stack(tape, &rev_inputs, backward, &init, Some(&rev_keep), rng.as_deref_mut())?;
                bwd.reverse();
                let states = fwd
                    .iter()
                    .zip(&bwd)
                    .map(|(&f, &r)| tape.concat(&[f, r]))
                    .collect::<Result<Vec<_>>>()?;
                let mut init = Vec::with_capacity(self.config.layers);
                for (l, (gh, gc)) in bound.bridge.iter().enumerate() {
                    let h = bridge_apply(tape, gh, fwd_final[l].0, bwd_final[l].0)?;
                    let c = bridge_apply(tape, gc, fwd_final[l].1, bwd_final[l].1)?;
                    init.push((h, c));
                }
                (states, init)
            }
            None => {
                let init = zero_init(tape);
                let (mut out, finals) =
                    run_stack(tape, &rev_inputs, &bound.encoder_forward, &init, Some(&rev_keep), rng)?;
                out.reverse();
                (out, finals)
            }
        };

        let memory = match &bound.attention {
            Some(att) => Some(Memory::new(tape, states.clone(), lengths.to_vec(), att)?),
            None => None,
        };
        let context = self
            .config
            .feeds_context()
            .then(|| tape.zeros(&[b, self.config.encoder_dim()]));
        Ok(Encoded {
            states,
            lengths: lengths.to_vec(),
            memory,
            init: DecoderState {
                layers: init_layers,
                context,
            },
        })
    }

    /// Decoder step `t` (1-based) consuming the previous phoneme ids.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_step<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &BoundModel,
        encoded: &Encoded,
        state: &DecoderState,
        prev: &[usize],
        t: usize,
        rng: Option<&mut R>,
    ) -> Result<StepOutput> {
        let e = embed(tape, bound.phoneme_embedding, prev)?;
        let x = match state.context {
            Some(ctx) => attention::input_feed(tape, e, ctx)?,
            None => e,
        };
        let (d, layers) = stack_step(tape, x, &bound.decoder, &state.layers, rng)?;
        match (&bound.attention, &encoded.memory) {
            (Some(att), Some(memory)) => {
                let a = attention::attend(tape, att, memory, d, t)?;
                let logits = attention::combine_output(tape, a.context, d, &bound.output)?;
                Ok(StepOutput {
                    logits,
                    state: DecoderState {
                        layers,
                        context: state.context.map(|_| a.context),
                    },
                    attention: Some(a),
                })
            }
            _ => Ok(StepOutput {
                logits: layers::linear(tape, d, bound.output.weight, bound.output.bias)?,
                state: DecoderState { layers, context: None },
                attention: None,
            }),
        }
    }

    /// Summed negative log-likelihood of a batch's targets (shape `[1]`).
    ///
    /// Each step feeds the gold previous phoneme with probability
    /// `sampling_prob`, otherwise the argmax of the previous step's logits.
    /// `dropout` enables training-mode dropout.
    pub fn batch_nll<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_, T>,
        bound: &BoundModel,
        batch: &Batch,
        sampling_prob: f64,
        mut dropout: Option<&mut R>,
        sampling: &mut R,
    ) -> Result<Var> {
        if batch.target_lengths.iter().any(|&l| l < 2) {
            return Err(G2pError::Input("empty pronunciation".into()));
        }
        let encoded = self.encode(tape, bound, &batch.sources, &batch.source_lengths, dropout.as_deref_mut())?;
        let v = self.phonemes.len();
        let mut state = encoded.init.clone();
        let mut prev = vec![BOS; batch.len()];
        let mut total: Option<Var> = None;
        for t in 0..batch.max_target_len() {
            let out = self.decode_step(tape, bound, &encoded, &state, &prev, t + 1, dropout.as_deref_mut())?;
            let lsm = tape.log_softmax(out.logits)?;
            let gold = batch.target_column(t);
            let picked = tape.pick(lsm, &gold)?;
            let mask: Vec<T> = batch
                .target_mask(t)
                .iter()
                .map(|&m| if m { T::one() } else { T::zero() })
                .collect();
            let picked = tape.mul_const(picked, mask)?;
            let s = tape.sum(picked)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
            prev = if sampling_prob >= 1.0 {
                gold
            } else {
                let logits = tape.value(out.logits);
                gold.iter()
                    .enumerate()
                    .map(|(r, &g)| {
                        if sampling.random::<f64>() < sampling_prob {
                            g
                        } else {
                            argmax_phoneme(&logits[r * v..(r + 1) * v])
                        }
                    })
                    .collect()
            };
            state = out.state;
        }
        let total = total.ok_or_else(|| G2pError::Input("empty target batch".into()))?;
        tape.scale(total, -T::one())
    }

    /// Mean per-token loss of one entry's first pronunciation, without dropout.
    pub fn sequence_loss<R: Rng + ?Sized>(
        &self,
        entry: &LexiconEntry,
        sampling_prob: f64,
        rng: &mut R,
    ) -> Result<T> {
        let batch = Batch::from_entries(&[entry], &self.graphemes, &self.phonemes)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let nll = self.batch_nll(&mut tape, &bound, &batch, sampling_prob, None, rng)?;
        Ok(tape.value(nll)[0] / T::of(batch.target_tokens() as f64))
    }

    pub fn encoder_dim(&self) -> usize {
        self.config.encoder_dim()
    }

    /// The phoneme embedding row for every non-reserved phoneme.
    pub fn phoneme_embeddings(&self) -> Vec<(String, Vec<T>)> {
        let table = &self.params.phoneme_embedding.table;
        (0..self.phonemes.len())
            .filter(|&id| !Vocabulary::is_reserved(id))
            .map(|id| {
                (
                    self.phonemes.symbol(id).unwrap_or_default().to_string(),
                    table.row(id).to_vec(),
                )
            })
            .collect()
    }
}

fn bridge_apply<T: Scalar>(tape: &mut Tape<'_, T>, gate: &[Var; 3], fwd: Var, bwd: Var) -> Result<Var> {
    let a = tape.matmul_nt(fwd, gate[0])?;
    let b = tape.matmul_nt(bwd, gate[1])?;
    let s = tape.add(a, b)?;
    tape.add_row(s, gate[2])
}

/// Small helper for reserved-id checks in tests and decoding.
pub fn is_special(id: usize) -> bool {
    id == PAD || id == BOS || id == EOS
}
