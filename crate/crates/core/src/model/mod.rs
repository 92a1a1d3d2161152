//! The fusion transformer: one memory-augmented encoder stack per visual
//! modality and a decoder that mixes per-modality cross-attention through
//! learned sigmoid gates.
//!
//! All activations are batched as `[batch, length, d_model]`. A forward pass
//! binds the parameters onto a [`Tape`] through [`Forward`]; binding with
//! [`WaftmModel::bind`] makes them differentiable, [`WaftmModel::bind_frozen`]
//! treats them as constants for inference.

mod config;
mod params;

use std::cell::RefCell;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use params::{
    AttentionParams, DecoderLayerParams, EncoderLayerParams, EncoderParams, FeatureEmbedParams,
    FeedForwardParams, FusionGateParams, LayerNormParams, Layout, MemoryAttentionParams,
    MemorySlots, ParamId, ParamSet,
};

use crate::error::{Error, Result};
use crate::tensor::{concat, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct WaftmModel {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl WaftmModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, layout) = params::build(&config, params::Init::Random(&mut rng));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Rebuilds a model from named tensors, e.g. read from a checkpoint.
    pub fn from_named(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (mut params, layout) = params::build(&config, params::Init::Zeros);
        params::assign(&mut params, named)?;
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Dropout is a training setting, not part of the architecture, so it
    /// may change between runs of the same weights.
    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        let mut config = self.config.clone();
        config.dropout_rate = rate;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Binds parameters as differentiable leaves.
    pub fn bind<'t, 'm>(&'m self, tape: &'t Tape) -> Forward<'t, 'm> {
        self.bind_with(tape, true)
    }

    /// Binds parameters as constants.
    pub fn bind_frozen<'t, 'm>(&'m self, tape: &'t Tape) -> Forward<'t, 'm> {
        self.bind_with(tape, false)
    }

    /// Uses caller-supplied vars (one per parameter, in [`ParamSet`] order)
    /// in place of the stored parameters.
    pub fn bind_vars<'t, 'm>(
        &'m self,
        tape: &'t Tape,
        vars: Vec<Var<'t>>,
    ) -> Result<Forward<'t, 'm>> {
        if vars.len() != self.params.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.params.len()),
            ));
        }
        for (v, id) in vars.iter().zip(self.params.ids()) {
            if v.shape() != self.params.get(id).shape() {
                return Err(Error::shape(
                    "bind_vars",
                    format!(
                        "{}: {:?} vs {:?}",
                        self.params.name(id),
                        v.shape(),
                        self.params.get(id).shape()
                    ),
                ));
            }
        }
        Ok(Forward {
            tape,
            model: self,
            vars,
            dropout: None,
        })
    }

    fn bind_with<'t, 'm>(&'m self, tape: &'t Tape, grad: bool) -> Forward<'t, 'm> {
        let vars = self
            .params
            .ids()
            .map(|id| tape.leaf_shared(self.params.shared(id), grad))
            .collect();
        Forward {
            tape,
            model: self,
            vars,
            dropout: None,
        }
    }
}

/// Per-modality encoder input: `[batch, frames, input_dim]` plus an optional
/// per-frame validity mask (`true` = real frame).
#[derive(Clone, Debug)]
pub struct EncoderInput {
    pub features: Tensor,
    pub mask: Option<Vec<Vec<bool>>>,
}

impl EncoderInput {
    /// One unpadded sequence given as `[frames, input_dim]`.
    pub fn single(features: Tensor) -> Result<Self> {
        let s = features.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::shape(
                "encoder input",
                format!("expected [m, dim], got {s:?}"),
            ));
        }
        Ok(Self {
            features: features.reshape([1, s[0], s[1]])?,
            mask: None,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.features.shape()[0]
    }

    /// The same input repeated `times` along the batch axis.
    pub fn repeat(&self, times: usize) -> Result<Self> {
        let s = self.features.shape();
        let mut data = Vec::with_capacity(self.features.numel() * times);
        for _ in 0..times {
            data.extend_from_slice(self.features.data());
        }
        let mask = self.mask.as_ref().map(|m| {
            let mut out = Vec::with_capacity(m.len() * times);
            for _ in 0..times {
                out.extend(m.iter().cloned());
            }
            out
        });
        Ok(Self {
            features: Tensor::new([s[0] * times, s[1], s[2]], data)?,
            mask,
        })
    }
}

/// Per decoder layer, per modality.
#[derive(Clone, Debug, Default)]
pub struct DecoderTrace<'t> {
    /// Gate values `[B, l, D]`.
    pub gates: Vec<Vec<Var<'t>>>,
    /// Cross-attention weights `[B, heads, l, frames]`.
    pub cross_weights: Vec<Vec<Var<'t>>>,
}

/// Encoder output for one modality, carrying the key mask along.
#[derive(Clone, Debug)]
pub struct EncodedModality<'t> {
    pub states: Var<'t>,
    pub mask: Option<Vec<Vec<bool>>>,
}

/// Sinusoidal positions, `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros([len, d]);
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64 * 2.0;
            let angle = pos as f64 / 10000f64.powf(pair / d as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(&[pos, i], v);
        }
    }
    t
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

/// A model bound to one tape.
pub struct Forward<'t, 'm> {
    tape: &'t Tape,
    model: &'m WaftmModel,
    vars: Vec<Var<'t>>,
    dropout: Option<RefCell<Dropout>>,
}

impl<'t, 'm> Forward<'t, 'm> {
    /// Enables dropout with masks drawn from `seed`.
    pub fn with_dropout(mut self, seed: u64) -> Self {
        let rate = self.model.config.dropout_rate;
        if rate > 0.0 {
            self.dropout = Some(RefCell::new(Dropout {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            }));
        }
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn model(&self) -> &'m WaftmModel {
        self.model
    }

    pub fn param(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    /// Gradients for every parameter in [`ParamSet`] order (zeros where no
    /// gradient reached).
    pub fn param_grads(&self) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.shape())))
            .collect()
    }

    fn config(&self) -> &'m ModelConfig {
        &self.model.config
    }

    fn layout(&self) -> &'m Layout {
        &self.model.layout
    }

    fn dropout(&self, x: Var<'t>) -> Result<Var<'t>> {
        let Some(cell) = &self.dropout else {
            return Ok(x);
        };
        let mut d = cell.borrow_mut();
        let keep = 1.0 - d.rate;
        let shape = x.shape();
        let mask = Tensor::from_fn(shape, |_| {
            if d.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.mul(self.tape.constant(mask))
    }

    fn linear(&self, x: Var<'t>, w: ParamId, b: Option<ParamId>) -> Result<Var<'t>> {
        let y = x.matmul(self.param(w))?;
        match b {
            Some(b) => y.add(self.param(b)),
            None => Ok(y),
        }
    }

    fn norm(&self, x: Var<'t>, p: &LayerNormParams) -> Result<Var<'t>> {
        x.layer_norm(self.param(p.gamma), self.param(p.beta), LAYER_NORM_EPS)
    }

    fn feed_forward(&self, x: Var<'t>, p: &FeedForwardParams) -> Result<Var<'t>> {
        let h = self.linear(x, p.w1, Some(p.b1))?.relu();
        self.linear(h, p.w2, Some(p.b2))
    }

    /// `[B, L, H·dh] -> [B, H, L, dh]`
    fn split_heads(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let c = self.config();
        x.reshape([s[0], s[1], c.n_heads, c.d_head])?
            .permute(&[0, 2, 1, 3])
    }

    fn merge_heads(&self, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        x.permute(&[0, 2, 1, 3])?.reshape([s[0], s[2], s[1] * s[3]])
    }

    /// Multi-head scaled dot-product attention. Memory rows, when given, are
    /// appended after the projected keys/values and are never masked.
    /// Returns the projected output and the attention weights
    /// `[B, H, lq, lk + slots]`.
    pub fn attention(
        &self,
        queries: Var<'t>,
        keys: Var<'t>,
        p: &AttentionParams,
        memory: Option<&MemorySlots>,
        key_mask: Option<&[Vec<bool>]>,
        causal: bool,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (qs, ks) = (queries.shape(), keys.shape());
        let d = self.config().d_model;
        if qs.len() != 3 || ks.len() != 3 || qs[0] != ks[0] || qs[2] != d || ks[2] != d {
            return Err(Error::shape(
                "attention",
                format!("queries {qs:?}, keys {ks:?}"),
            ));
        }
        let (batch, lq, lk) = (qs[0], qs[1], ks[1]);
        let q = self.linear(queries, p.wq, None)?;
        let mut k = self.linear(keys, p.wk, None)?;
        let mut v = self.linear(keys, p.wv, None)?;
        let mut total = lk;
        if let Some(mem) = memory {
            let mk = self.param(mem.keys).expand(batch)?;
            let mv = self.param(mem.values).expand(batch)?;
            total += mk.shape()[1];
            k = concat(&[k, mk], 1)?;
            v = concat(&[v, mv], 1)?;
        }
        let q = self.split_heads(q)?;
        let k = self.split_heads(k)?.transpose()?;
        let v = self.split_heads(v)?;
        let scale = 1.0 / (self.config().d_head as f64).sqrt();
        let mut scores = q.matmul(k)?.scale(scale);
        if key_mask.is_some() || causal {
            if let Some(m) = key_mask {
                if m.len() != batch || m.iter().any(|r| r.len() != lk) {
                    return Err(Error::shape("attention", "key mask does not match keys"));
                }
            }
            let heads = self.config().n_heads;
            let mut mask = Tensor::zeros([batch, heads, lq, total]);
            let data = mask.data_mut();
            for b in 0..batch {
                for h in 0..heads {
                    for i in 0..lq {
                        let row = ((b * heads + h) * lq + i) * total;
                        for j in 0..lk {
                            let padded = key_mask.is_some_and(|m| !m[b][j]);
                            if padded || (causal && j > i) {
                                data[row + j] = f64::NEG_INFINITY;
                            }
                        }
                    }
                }
            }
            scores = scores.add(self.tape.constant(mask))?;
        }
        let weights = scores.softmax(3)?;
        let context = self.merge_heads(weights.matmul(v)?)?;
        Ok((self.linear(context, p.wo, None)?, weights))
    }

    /// `X' = X·W_e + b_e` for modality `k`, plus sinusoidal positions when
    /// enabled.
    pub fn embed_features(&self, x: Var<'t>, k: usize) -> Result<Var<'t>> {
        let c = self.config();
        let enc = self
            .layout()
            .encoders
            .get(k)
            .ok_or(Error::ModalityMismatch {
                expected: c.n_modalities,
                got: k + 1,
            })?;
        let s = x.shape();
        if s.len() != 3 || s[2] != c.modality_input_dims[k] {
            return Err(Error::shape(
                "embed_features",
                format!(
                    "modality {k} expects width {}, got {s:?}",
                    c.modality_input_dims[k]
                ),
            ));
        }
        let e = self.linear(x, enc.embed.w, Some(enc.embed.b))?;
        if c.encoder_positions {
            e.add(self.tape.constant(positional_encoding(s[1], c.d_model)))
        } else {
            Ok(e)
        }
    }

    /// Self-attention whose keys/values are extended with the layer's memory
    /// slots.
    pub fn memory_attention(
        &self,
        x: Var<'t>,
        p: &MemoryAttentionParams,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Result<Var<'t>> {
        Ok(self.memory_attention_weights(x, p, key_mask)?.0)
    }

    pub fn memory_attention_weights(
        &self,
        x: Var<'t>,
        p: &MemoryAttentionParams,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.attention(x, x, &p.attn, p.memory.as_ref(), key_mask, false)
    }

    /// Plain self-attention with the same projections and no memory.
    pub fn standard_attention(
        &self,
        x: Var<'t>,
        p: &AttentionParams,
        key_mask: Option<&[Vec<bool>]>,
    ) -> Result<Var<'t>> {
        Ok(self.attention(x, x, p, None, key_mask, false)?.0)
    }

    pub fn encoder_forward(&self, input: &EncoderInput, k: usize) -> Result<EncodedModality<'t>> {
        let s = input.features.shape();
        if s.len() != 3 {
            return Err(Error::shape("encoder_forward", format!("features {s:?}")));
        }
        if s[1] == 0 {
            return Err(Error::EmptySequence(k));
        }
        let mask = input.mask.clone();
        let mut x = self.embed_features(self.tape.constant(input.features.clone()), k)?;
        for layer in &self.layout().encoders[k].layers {
            let a = self.memory_attention(x, &layer.attn, mask.as_deref())?;
            x = self.norm(x.add(self.dropout(a)?)?, &layer.norm1)?;
            let f = self.feed_forward(x, &layer.ffn)?;
            x = self.norm(x.add(self.dropout(f)?)?, &layer.norm2)?;
        }
        Ok(EncodedModality { states: x, mask })
    }

    /// Decoder-to-encoder attention for modality `k` in decoder `layer`.
    pub fn cross_attention(
        &self,
        y: Var<'t>,
        encoded: &EncodedModality<'t>,
        layer: usize,
        k: usize,
    ) -> Result<Var<'t>> {
        let p = &self.layout().decoder[layer].cross[k];
        Ok(self
            .attention(y, encoded.states, p, None, encoded.mask.as_deref(), false)?
            .0)
    }

    /// `α_k = σ([Y ‖ Φ_k]·W_i + b_i)`
    pub fn fusion_gate(&self, y: Var<'t>, phi: Var<'t>, layer: usize, k: usize) -> Result<Var<'t>> {
        let g = &self.layout().decoder[layer].gates[k];
        let joined = concat(&[y, phi], 2)?;
        Ok(self.linear(joined, g.w, Some(g.b))?.sigmoid())
    }

    /// `Σ_k α_k ⊙ Φ_k`
    pub fn fuse(&self, phis: &[Var<'t>], alphas: &[Var<'t>]) -> Result<Var<'t>> {
        fuse(phis, alphas)
    }

    /// Token ids `[B][l]` (rectangular) to logits `[B, l, |V|]`.
    pub fn decoder_forward(
        &self,
        tokens: &[Vec<u32>],
        encoded: &[EncodedModality<'t>],
    ) -> Result<Var<'t>> {
        self.decoder_inner(tokens, encoded, None)
    }

    /// [`Forward::decoder_forward`] that also records every gate and
    /// cross-attention map.
    pub fn decoder_forward_traced(
        &self,
        tokens: &[Vec<u32>],
        encoded: &[EncodedModality<'t>],
    ) -> Result<(Var<'t>, DecoderTrace<'t>)> {
        let mut trace = DecoderTrace::default();
        let logits = self.decoder_inner(tokens, encoded, Some(&mut trace))?;
        Ok((logits, trace))
    }

    fn decoder_inner(
        &self,
        tokens: &[Vec<u32>],
        encoded: &[EncodedModality<'t>],
        mut trace: Option<&mut DecoderTrace<'t>>,
    ) -> Result<Var<'t>> {
        let c = self.config();
        if encoded.len() != c.n_modalities {
            return Err(Error::ModalityMismatch {
                expected: c.n_modalities,
                got: encoded.len(),
            });
        }
        let batch = tokens.len();
        let len = tokens.first().map_or(0, Vec::len);
        if batch == 0 || len == 0 || tokens.iter().any(|t| t.len() != len) {
            return Err(Error::shape(
                "decoder_forward",
                "token batch must be non-empty and rectangular",
            ));
        }
        if len > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: c.max_seq_len,
            });
        }
        let mut flat = Vec::with_capacity(batch * len);
        for &t in tokens.iter().flatten() {
            if t as usize >= c.vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    size: c.vocab_size,
                });
            }
            flat.push(t as usize);
        }
        for e in encoded {
            if e.states.shape()[0] != batch {
                return Err(Error::shape(
                    "decoder_forward",
                    "encoder batch differs from token batch",
                ));
            }
        }

        let layout = self.layout();
        let mut y = self
            .param(layout.token_embedding)
            .gather_rows(&flat)?
            .reshape([batch, len, c.d_model])?
            .scale((c.d_model as f64).sqrt())
            .add(self.tape.constant(positional_encoding(len, c.d_model)))?;

        for (i, layer) in layout.decoder.iter().enumerate() {
            let (s, _) = self.attention(y, y, &layer.self_attn, None, None, true)?;
            y = self.norm(y.add(self.dropout(s)?)?, &layer.norm1)?;

            let mut phis = Vec::with_capacity(encoded.len());
            let mut alphas = Vec::with_capacity(encoded.len());
            let mut weights = Vec::with_capacity(encoded.len());
            for (k, enc) in encoded.iter().enumerate() {
                let p = &layer.cross[k];
                let (phi, w) =
                    self.attention(y, enc.states, p, None, enc.mask.as_deref(), false)?;
                alphas.push(self.fusion_gate(y, phi, i, k)?);
                phis.push(phi);
                weights.push(w);
            }
            let fused = self.fuse(&phis, &alphas)?;
            if let Some(t) = trace.as_deref_mut() {
                t.gates.push(alphas);
                t.cross_weights.push(weights);
            }
            y = self.norm(y.add(self.dropout(fused)?)?, &layer.norm2)?;

            let f = self.feed_forward(y, &layer.ffn)?;
            y = self.norm(y.add(self.dropout(f)?)?, &layer.norm3)?;
        }
        self.linear(y, layout.out_w, Some(layout.out_b))
    }

    pub fn encode_all(&self, inputs: &[EncoderInput]) -> Result<Vec<EncodedModality<'t>>> {
        let c = self.config();
        if inputs.len() != c.n_modalities {
            return Err(Error::ModalityMismatch {
                expected: c.n_modalities,
                got: inputs.len(),
            });
        }
        inputs
            .iter()
            .enumerate()
            .map(|(k, x)| self.encoder_forward(x, k))
            .collect()
    }

    /// Encoders once, then the decoder over `tokens`.
    pub fn model_forward(&self, inputs: &[EncoderInput], tokens: &[Vec<u32>]) -> Result<Var<'t>> {
        let encoded = self.encode_all(inputs)?;
        self.decoder_forward(tokens, &encoded)
    }
}

/// `Σ_k α_k ⊙ Φ_k`
pub fn fuse<'t>(phis: &[Var<'t>], alphas: &[Var<'t>]) -> Result<Var<'t>> {
    if phis.is_empty() || phis.len() != alphas.len() {
        return Err(Error::ModalityMismatch {
            expected: phis.len(),
            got: alphas.len(),
        });
    }
    let mut acc = alphas[0].mul(phis[0])?;
    for (a, p) in alphas.iter().zip(phis).skip(1) {
        acc = acc.add(a.mul(*p)?)?;
    }
    Ok(acc)
}
