use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use waftm::metrics::{self, build_idf};
use waftm::model::{EncoderInput, ModelConfig, WaftmModel};
use waftm::tensor::{Tape, Tensor};
use waftm::tokenizer::{self, Vocabulary, BOS};
use waftm::{Error, Result};

pub fn tokenize(vocab: &str, text: &str) -> Result<Value> {
    let vocab = Vocabulary::parse(vocab)?;
    let ids = tokenizer::encode_pieces(text, &vocab);
    let pieces: Vec<&str> = ids
        .iter()
        .map(|&id| vocab.token(id).unwrap_or("?"))
        .collect();
    Ok(json!({
        "words": tokenizer::basic_split(text),
        "pieces": pieces,
        "ids": ids,
        "decoded": tokenizer::decode(&ids, &vocab)?,
    }))
}

/// Other videos' references, so CIDEr-D has a document frequency to work
/// with when only one video is typed in.
const BACKGROUND: [&[&str]; 4] = [
    &[
        "a man is playing a guitar",
        "someone plays the guitar on stage",
    ],
    &[
        "a dog runs across the grass",
        "a puppy is running in a park",
    ],
    &[
        "a woman is slicing an onion",
        "someone cuts vegetables in a kitchen",
    ],
    &["two people are dancing", "a couple dances in a room"],
];

pub fn score(candidate: &str, references: &str) -> Result<Value> {
    let refs: Vec<String> = references
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_owned)
        .collect();
    if refs.is_empty() {
        return Err(Error::NoReferences { index: 0 });
    }
    let mut corpus: Vec<(String, Vec<String>)> = vec![("input".into(), refs.clone())];
    for (i, b) in BACKGROUND.iter().enumerate() {
        corpus.push((
            format!("background{i}"),
            b.iter().map(|s| s.to_string()).collect(),
        ));
    }
    let idf = build_idf(&corpus)?;
    let cands = [candidate];
    let grouped = [refs.clone()];
    Ok(json!({
        "B@4": metrics::bleu4(&cands, &grouped)?,
        "R": metrics::rouge_l(&cands, &grouped)?,
        "C": idf.score("input", candidate, &refs)?,
        "candidate_tokens": metrics::tokenize(candidate),
    }))
}

pub struct ExploreParams {
    pub seed: u64,
    pub frames: [usize; 2],
    /// Feature magnitude per modality.
    pub scales: [f64; 2],
}

pub const MAX_FRAMES: usize = 32;
const EXPLORE_TOKENS: [u32; 5] = [BOS, 4, 5, 6, 7];

fn explore_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_head: 8,
        d_ff: 32,
        n_enc_layers: 1,
        n_dec_layers: 2,
        n_mem_slots: 4,
        n_modalities: 2,
        modality_input_dims: vec![8, 8],
        vocab_size: 12,
        max_seq_len: 8,
        dropout_rate: 0.0,
        encoder_positions: true,
    }
}

/// `[1, heads, q, k]` to a `[q][k]` head average.
fn head_mean(w: &Tensor) -> Vec<Vec<f64>> {
    let s = w.shape();
    let (heads, q, k) = (s[1], s[2], s[3]);
    (0..q)
        .map(|i| {
            (0..k)
                .map(|j| (0..heads).map(|h| w.at(&[0, h, i, j])).sum::<f64>() / heads as f64)
                .collect()
        })
        .collect()
}

/// Channel mean of a `[1, l, D]` gate per position.
fn position_means(g: &Tensor) -> Vec<f64> {
    g.rows()
        .map(|r| r.iter().sum::<f64>() / r.len() as f64)
        .collect()
}

pub fn explore(p: &ExploreParams) -> Result<Value> {
    if p.frames.iter().any(|&m| m == 0 || m > MAX_FRAMES) {
        return Err(Error::Config(format!("frames must be in 1..={MAX_FRAMES}")));
    }
    if p.scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
        return Err(Error::Config(
            "scales must be finite and non-negative".into(),
        ));
    }
    let config = explore_config();
    let model = WaftmModel::new(config.clone(), p.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5eed);
    let inputs = (0..2)
        .map(|k| {
            let shape = [p.frames[k], config.modality_input_dims[k]];
            let t = Tensor::from_fn(shape, |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * p.scales[k]
            });
            EncoderInput::single(t)
        })
        .collect::<Result<Vec<_>>>()?;

    let tape = Tape::new();
    let f = model.bind_frozen(&tape);
    let mut memory = Vec::new();
    for (k, x) in inputs.iter().enumerate() {
        let embedded = f.embed_features(tape.constant(x.features.clone()), k)?;
        let layer = &model.layout().encoders[k].layers[0].attn;
        let (_, w) = f.memory_attention_weights(embedded, layer, None)?;
        let weights = head_mean(&w.value());
        let frames = p.frames[k];
        let share = weights
            .iter()
            .map(|r| r[frames..].iter().sum::<f64>())
            .sum::<f64>()
            / frames as f64;
        memory.push(json!({ "weights": weights, "frames": frames, "slots": config.n_mem_slots, "memory_share": share }));
    }

    let encoded = f.encode_all(&inputs)?;
    let (logits, trace) = f.decoder_forward_traced(&[EXPLORE_TOKENS.to_vec()], &encoded)?;
    let gates: Vec<Vec<Vec<f64>>> = trace
        .gates
        .iter()
        .map(|layer| layer.iter().map(|g| position_means(&g.value())).collect())
        .collect();
    let last = trace
        .cross_weights
        .last()
        .expect("at least one decoder layer");
    let cross: Vec<Vec<Vec<f64>>> = last.iter().map(|w| head_mean(&w.value())).collect();
    let next = logits.log_softmax(2)?.value();
    let last_row = next.row(EXPLORE_TOKENS.len() - 1);
    let best = (0..last_row.len())
        .max_by(|&a, &b| last_row[a].total_cmp(&last_row[b]))
        .unwrap_or(0);
    Ok(json!({
        "tokens": EXPLORE_TOKENS,
        "memory_attention": memory,
        "cross_attention": cross,
        "gates": gates,
        "next_token": best,
        "next_log_prob": last_row[best],
    }))
}
