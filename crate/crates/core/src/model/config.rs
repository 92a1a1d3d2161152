use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    /// Learnable key/value rows appended inside every encoder attention.
    pub n_mem_slots: usize,
    pub n_modalities: usize,
    pub modality_input_dims: Vec<usize>,
    pub vocab_size: usize,
    /// Longest decoder input, `[BOS]` included.
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// Add sinusoidal positions to embedded encoder features.
    pub encoder_positions: bool,
}

impl ModelConfig {
    /// Full-size settings: D=512, 8×64 heads, d_ff=2048, 3 encoder and 4
    /// decoder layers, 40 memory slots.
    pub fn paper(modality_input_dims: Vec<usize>, vocab_size: usize) -> Self {
        Self {
            d_model: 512,
            n_heads: 8,
            d_head: 64,
            d_ff: 2048,
            n_enc_layers: 3,
            n_dec_layers: 4,
            n_mem_slots: 40,
            n_modalities: modality_input_dims.len(),
            modality_input_dims,
            vocab_size,
            max_seq_len: 32,
            dropout_rate: 0.1,
            encoder_positions: true,
        }
    }

    /// Desk-scale settings used by the synthetic tasks.
    pub fn toy(modality_input_dims: Vec<usize>, vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            d_ff: 128,
            n_enc_layers: 1,
            n_dec_layers: 2,
            n_mem_slots: 8,
            n_modalities: modality_input_dims.len(),
            modality_input_dims,
            vocab_size,
            max_seq_len: 16,
            dropout_rate: 0.1,
            encoder_positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_modalities", self.n_modalities),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} × d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.modality_input_dims.len() != self.n_modalities {
            return Err(Error::Config(format!(
                "n_modalities {} but {} input dims",
                self.n_modalities,
                self.modality_input_dims.len()
            )));
        }
        if self.modality_input_dims.contains(&0) {
            return Err(Error::Config(
                "modality input dims must be at least 1".into(),
            ));
        }
        if self.vocab_size <= crate::tokenizer::EOS as usize {
            return Err(Error::Config(
                "vocab_size must exceed the 4 special tokens".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}
