use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.values.iter().map(|v| &**v))
    }

    fn push(&mut self, name: String, value: Tensor) -> ParamId {
        self.names.push(name);
        self.values.push(Arc::new(value));
        ParamId(self.values.len() - 1)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Debug)]
pub struct MemorySlots {
    pub keys: ParamId,
    pub values: ParamId,
}

#[derive(Clone, Debug)]
pub struct MemoryAttentionParams {
    pub attn: AttentionParams,
    /// Absent when the model has zero memory slots.
    pub memory: Option<MemorySlots>,
}

#[derive(Clone, Debug)]
pub struct FeatureEmbedParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerParams {
    pub attn: MemoryAttentionParams,
    pub norm1: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm2: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub embed: FeatureEmbedParams,
    pub layers: Vec<EncoderLayerParams>,
}

/// Gate weights over `[Y ‖ Φ]`, so `w` is `2D × D`.
#[derive(Clone, Debug)]
pub struct FusionGateParams {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerParams {
    pub self_attn: AttentionParams,
    pub norm1: LayerNormParams,
    /// One cross-attention per modality.
    pub cross: Vec<AttentionParams>,
    /// One gate per modality.
    pub gates: Vec<FusionGateParams>,
    pub norm2: LayerNormParams,
    pub ffn: FeedForwardParams,
    pub norm3: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub token_embedding: ParamId,
    pub encoders: Vec<EncoderParams>,
    pub decoder: Vec<DecoderLayerParams>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

pub(crate) enum Init<'a> {
    Random(&'a mut ChaCha8Rng),
    Zeros,
}

struct Builder<'a> {
    set: ParamSet,
    init: Init<'a>,
}

impl Builder<'_> {
    fn xavier(&mut self, name: String, fan_in: usize, fan_out: usize) -> ParamId {
        let t = match &mut self.init {
            Init::Random(rng) => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn([fan_in, fan_out], |_| rng.random_range(-bound..=bound))
            }
            Init::Zeros => Tensor::zeros([fan_in, fan_out]),
        };
        self.set.push(name, t)
    }

    fn normal(&mut self, name: String, rows: usize, cols: usize, std: f64) -> ParamId {
        let t = match &mut self.init {
            Init::Random(rng) => {
                let dist = Normal::new(0.0, std).expect("positive std");
                Tensor::from_fn([rows, cols], |_| dist.sample(*rng))
            }
            Init::Zeros => Tensor::zeros([rows, cols]),
        };
        self.set.push(name, t)
    }

    fn constant(&mut self, name: String, len: usize, value: f64) -> ParamId {
        self.set.push(name, Tensor::full([len], value))
    }

    fn attention(&mut self, prefix: &str, d: usize) -> AttentionParams {
        AttentionParams {
            wq: self.xavier(format!("{prefix}.wq"), d, d),
            wk: self.xavier(format!("{prefix}.wk"), d, d),
            wv: self.xavier(format!("{prefix}.wv"), d, d),
            wo: self.xavier(format!("{prefix}.wo"), d, d),
        }
    }

    fn norm(&mut self, prefix: &str, d: usize) -> LayerNormParams {
        LayerNormParams {
            gamma: self.constant(format!("{prefix}.gamma"), d, 1.0),
            beta: self.constant(format!("{prefix}.beta"), d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FeedForwardParams {
        FeedForwardParams {
            w1: self.xavier(format!("{prefix}.w1"), d, hidden),
            b1: self.constant(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.xavier(format!("{prefix}.w2"), hidden, d),
            b2: self.constant(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

pub(crate) fn build(config: &ModelConfig, init: Init<'_>) -> (ParamSet, Layout) {
    let d = config.d_model;
    let mut b = Builder {
        set: ParamSet::default(),
        init,
    };
    let token_embedding = b.normal("tok_emb".into(), config.vocab_size, d, 0.02);

    let encoders = config
        .modality_input_dims
        .iter()
        .enumerate()
        .map(|(k, &input_dim)| {
            let embed = FeatureEmbedParams {
                w: b.xavier(format!("enc.{k}.embed.w"), input_dim, d),
                b: b.constant(format!("enc.{k}.embed.b"), d, 0.0),
            };
            let layers = (0..config.n_enc_layers)
                .map(|i| {
                    let p = format!("enc.{k}.layer.{i}");
                    let attn = b.attention(&format!("{p}.attn"), d);
                    let memory = (config.n_mem_slots > 0).then(|| MemorySlots {
                        keys: b.normal(format!("{p}.attn.mem_k"), config.n_mem_slots, d, 0.02),
                        values: b.normal(format!("{p}.attn.mem_v"), config.n_mem_slots, d, 0.02),
                    });
                    EncoderLayerParams {
                        attn: MemoryAttentionParams { attn, memory },
                        norm1: b.norm(&format!("{p}.norm1"), d),
                        ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                        norm2: b.norm(&format!("{p}.norm2"), d),
                    }
                })
                .collect();
            EncoderParams { embed, layers }
        })
        .collect();

    let decoder = (0..config.n_dec_layers)
        .map(|i| {
            let p = format!("dec.layer.{i}");
            let self_attn = b.attention(&format!("{p}.self"), d);
            let norm1 = b.norm(&format!("{p}.norm1"), d);
            let cross = (0..config.n_modalities)
                .map(|k| b.attention(&format!("{p}.cross.{k}"), d))
                .collect();
            let gates = (0..config.n_modalities)
                .map(|k| FusionGateParams {
                    w: b.xavier(format!("{p}.gate.{k}.w"), 2 * d, d),
                    b: b.constant(format!("{p}.gate.{k}.b"), d, 0.0),
                })
                .collect();
            DecoderLayerParams {
                self_attn,
                norm1,
                cross,
                gates,
                norm2: b.norm(&format!("{p}.norm2"), d),
                ffn: b.ffn(&format!("{p}.ffn"), d, config.d_ff),
                norm3: b.norm(&format!("{p}.norm3"), d),
            }
        })
        .collect();

    let out_w = b.xavier("out.w".into(), d, config.vocab_size);
    let out_b = b.constant("out.b".into(), config.vocab_size, 0.0);
    (
        b.set,
        Layout {
            token_embedding,
            encoders,
            decoder,
            out_w,
            out_b,
        },
    )
}

/// Overwrites every tensor of `set` from `named`, which must list exactly
/// the same names in the same order with the same shapes.
pub(crate) fn assign(set: &mut ParamSet, named: Vec<(String, Tensor)>) -> Result<()> {
    if named.len() != set.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter tensors, found {}",
            set.len(),
            named.len()
        )));
    }
    for (i, (name, tensor)) in named.into_iter().enumerate() {
        if set.names[i] != name {
            return Err(Error::Checkpoint(format!(
                "parameter {i}: expected {:?}, found {name:?}",
                set.names[i]
            )));
        }
        if set.values[i].shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?}: expected shape {:?}, found {:?}",
                set.values[i].shape(),
                tensor.shape()
            )));
        }
        set.values[i] = Arc::new(tensor);
    }
    Ok(())
}
