use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use waftm::decoding::{score_sequence, Hypothesis};
use waftm::model::{EncoderInput, ModelConfig, WaftmModel};
use waftm::tensor::Tensor;
use waftm::tokenizer::{BOS, EOS, PAD};

pub fn tiny_model(seed: u64, vocab: usize, max_len: usize) -> (WaftmModel, Vec<EncoderInput>) {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_head: 4,
        d_ff: 8,
        n_enc_layers: 1,
        n_dec_layers: 1,
        n_mem_slots: 2,
        n_modalities: 2,
        modality_input_dims: vec![3, 2],
        vocab_size: vocab,
        max_seq_len: max_len,
        dropout_rate: 0.0,
        encoder_positions: true,
    };
    let mut model = WaftmModel::new(config, seed).unwrap();
    // widen the output distribution so rankings are not near-uniform
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let out_b = model.layout().out_b;
    for v in model.params_mut().get_mut(out_b).data_mut() {
        *v = rng.random_range(-2.0..2.0);
    }
    let x = [3usize, 2]
        .iter()
        .map(|&d| {
            let m = rng.random_range(1..4);
            EncoderInput::single(Tensor::from_fn([m, d], |_| rng.random_range(-1.0..1.0))).unwrap()
        })
        .collect();
    (model, x)
}

/// Every sequence of at most `max_len` tokens that either ends at its first
/// `[EOS]` or reaches `max_len`, scored independently by teacher forcing.
pub fn enumerate(
    model: &WaftmModel,
    x: &[EncoderInput],
    vocab: u32,
    max_len: usize,
) -> Vec<Hypothesis> {
    let tokens: Vec<u32> = (0..vocab).filter(|&t| t != PAD && t != BOS).collect();
    let mut out = Vec::new();
    let mut frontier = vec![Vec::<u32>::new()];
    while let Some(prefix) = frontier.pop() {
        for &t in &tokens {
            let mut seq = prefix.clone();
            seq.push(t);
            let finished = t == EOS;
            if finished || seq.len() == max_len {
                let log_prob = score_sequence(model, x, &seq).unwrap();
                out.push(Hypothesis {
                    tokens: seq,
                    log_prob,
                    finished,
                });
            } else {
                frontier.push(seq);
            }
        }
    }
    out.sort_by(|a, b| {
        b.log_prob
            .total_cmp(&a.log_prob)
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    out
}
