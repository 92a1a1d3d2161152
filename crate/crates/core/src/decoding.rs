//! Greedy and beam-search caption generation.
//!
//! Generated sequences exclude the leading `[BOS]`; a finished sequence ends
//! with `[EOS]`. `max_len` bounds the number of generated tokens, so the
//! decoder never sees more than `max_len` input positions.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EncodedModality, EncoderInput, WaftmModel};
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

/// A scored token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    /// Sum of per-step log-softmax values of `tokens`.
    pub log_prob: f64,
    pub finished: bool,
}

/// Encoder outputs computed once and reused for every decoding step.
#[derive(Clone, Debug)]
pub struct EncodedVideo {
    states: Vec<Tensor>,
    masks: Vec<Option<Vec<Vec<bool>>>>,
}

impl EncodedVideo {
    /// Runs every encoder on one video's features (batch size 1).
    pub fn new(model: &WaftmModel, features: &[EncoderInput]) -> Result<Self> {
        if let Some(x) = features.iter().find(|x| x.batch_size() != 1) {
            return Err(Error::shape(
                "decode",
                format!("expected one video, got batch {}", x.batch_size()),
            ));
        }
        let tape = Tape::new();
        let encoded = model.bind_frozen(&tape).encode_all(features)?;
        Ok(Self {
            states: encoded.iter().map(|e| e.states.value()).collect(),
            masks: encoded.into_iter().map(|e| e.mask).collect(),
        })
    }

    fn bind<'t>(&self, tape: &'t Tape, times: usize) -> Result<Vec<EncodedModality<'t>>> {
        self.states
            .iter()
            .zip(&self.masks)
            .map(|(s, m)| {
                let mut data = Vec::with_capacity(s.numel() * times);
                for _ in 0..times {
                    data.extend_from_slice(s.data());
                }
                let shape = s.shape();
                Ok(EncodedModality {
                    states: tape.constant(Tensor::new([times, shape[1], shape[2]], data)?),
                    mask: m.as_ref().map(|m| vec![m[0].clone(); times]),
                })
            })
            .collect()
    }

    /// Next-token log-probabilities `[prefixes.len()][|V|]`; every prefix
    /// starts with `[BOS]` and all have equal length.
    pub fn next_log_probs(
        &self,
        model: &WaftmModel,
        prefixes: &[Vec<u32>],
    ) -> Result<Vec<Vec<f64>>> {
        let tape = Tape::new();
        let f = model.bind_frozen(&tape);
        let encoded = self.bind(&tape, prefixes.len())?;
        let logits = f.decoder_forward(prefixes, &encoded)?;
        let s = logits.shape();
        let last = logits.slice(1, s[1] - 1, 1)?.log_softmax(2)?.value();
        Ok(last.rows().map(<[f64]>::to_vec).collect())
    }
}

fn check_len(model: &WaftmModel, max_len: usize) -> Result<()> {
    let max = model.config().max_seq_len;
    if max_len > max {
        return Err(Error::SequenceTooLong { len: max_len, max });
    }
    Ok(())
}

fn expandable(token: u32) -> bool {
    token != PAD && token != BOS
}

fn with_bos(tokens: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.push(BOS);
    v.extend_from_slice(tokens);
    v
}

/// Ranking used by both decoders: higher score first, then the
/// lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob
        .total_cmp(&a.log_prob)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Argmax decoding; ties go to the lowest token id.
pub fn greedy_decode(
    model: &WaftmModel,
    features: &[EncoderInput],
    max_len: usize,
) -> Result<Hypothesis> {
    check_len(model, max_len)?;
    let video = EncodedVideo::new(model, features)?;
    greedy_from(model, &video, max_len)
}

pub fn greedy_from(model: &WaftmModel, video: &EncodedVideo, max_len: usize) -> Result<Hypothesis> {
    let mut h = Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    while h.tokens.len() < max_len {
        let lp = &video.next_log_probs(model, &[with_bos(&h.tokens)])?[0];
        let mut best: Option<(u32, f64)> = None;
        for (t, &v) in lp.iter().enumerate() {
            let t = t as u32;
            if !expandable(t) {
                continue;
            }
            let score = h.log_prob + v;
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((t, score));
            }
        }
        let (t, score) = best.expect("vocabulary has expandable tokens");
        h.tokens.push(t);
        h.log_prob = score;
        if t == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search without length normalization. Returns up to `beam`
/// hypotheses, best first.
pub fn beam_search(
    model: &WaftmModel,
    features: &[EncoderInput],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidBeam);
    }
    check_len(model, max_len)?;
    let video = EncodedVideo::new(model, features)?;
    beam_from(model, &video, beam, max_len)
}

pub fn beam_from(
    model: &WaftmModel,
    video: &EncodedVideo,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidBeam);
    }
    let mut pool = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];
    for _ in 0..max_len {
        let live: Vec<&Hypothesis> = pool.iter().filter(|h| !h.finished).collect();
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| with_bos(&h.tokens)).collect();
        let lps = video.next_log_probs(model, &prefixes)?;
        let mut next: Vec<Hypothesis> = pool.iter().filter(|h| h.finished).cloned().collect();
        for (h, lp) in live.iter().zip(&lps) {
            for (t, &v) in lp.iter().enumerate() {
                let t = t as u32;
                if !expandable(t) {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                next.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + v,
                    finished: t == EOS,
                });
            }
        }
        next.sort_by(rank);
        next.truncate(beam);
        pool = next;
    }
    pool.sort_by(rank);
    Ok(pool)
}

/// Teacher-forced log-probability of `tokens` (without `[BOS]`).
pub fn score_sequence(
    model: &WaftmModel,
    features: &[EncoderInput],
    tokens: &[u32],
) -> Result<f64> {
    if tokens.is_empty() {
        return Ok(0.0);
    }
    let input = with_bos(&tokens[..tokens.len() - 1]);
    let tape = Tape::new();
    let logits = model.bind_frozen(&tape).model_forward(features, &[input])?;
    let lp = logits.log_softmax(2)?.value();
    let v = model.config().vocab_size;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(j, &t)| lp.data()[j * v + t as usize])
        .sum())
}
