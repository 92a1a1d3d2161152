//! Self-critical sequence training with a mean-of-beams baseline.

use super::adam::AdamState;
use crate::data::{video_inputs, VideoRecord};
use crate::decoding::{beam_from, EncodedVideo, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::IdfTable;
use crate::model::{EncodedModality, EncoderInput, WaftmModel};
use crate::parallel;
use crate::tensor::{concat, Tape, Tensor};
use crate::tokenizer::{self, Vocabulary, BOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub struct ScstBatchResult {
    pub video_ids: Vec<String>,
    pub sequences: Vec<Vec<Hypothesis>>,
    pub captions: Vec<Vec<String>>,
    pub rewards: Vec<Vec<f64>>,
    pub baselines: Vec<f64>,
    pub advantages: Vec<Vec<f64>>,
    pub loss: f64,
    /// Mean reward over every beam in the batch.
    pub mean_reward: f64,
}

/// Beams of one video with their captions and rewards.
type Searched = (Vec<Hypothesis>, Vec<String>, Vec<f64>);

/// Arithmetic mean written as an offset from the first reward, so a set of
/// equal rewards gives that reward back exactly.
pub fn baseline(rewards: &[f64]) -> f64 {
    match rewards.split_first() {
        None => 0.0,
        Some((&r0, rest)) => r0 + rest.iter().map(|r| r - r0).sum::<f64>() / rewards.len() as f64,
    }
}

/// Zero-pads one modality across videos, `[n, max m, dim]` with a mask.
fn stack(inputs: &[Vec<EncoderInput>], k: usize) -> Result<EncoderInput> {
    let dim = inputs[0][k].features.shape()[2];
    let max_m = inputs
        .iter()
        .map(|x| x[k].features.shape()[1])
        .max()
        .unwrap_or(0);
    let mut data = Vec::with_capacity(inputs.len() * max_m * dim);
    let mut mask = Vec::with_capacity(inputs.len());
    let mut padded = false;
    for x in inputs {
        let t = &x[k].features;
        let m = t.shape()[1];
        data.extend_from_slice(t.data());
        data.resize(data.len() + (max_m - m) * dim, 0.0);
        let mut row = vec![true; m];
        row.resize(max_m, false);
        padded |= m < max_m;
        mask.push(row);
    }
    Ok(EncoderInput {
        features: Tensor::new([inputs.len(), max_m, dim], data)?,
        mask: padded.then_some(mask),
    })
}

/// Loss `−(1/ΣL) Σ_i a_i · log p(sequence_i)` and its gradients, where
/// `sequences[v]` are token lists (no `[BOS]`) for video `v` and
/// `advantages` matches that shape.
pub fn policy_gradients(
    model: &WaftmModel,
    inputs: &[Vec<EncoderInput>],
    sequences: &[Vec<Vec<u32>>],
    advantages: &[Vec<f64>],
) -> Result<(f64, Vec<Tensor>)> {
    let n_videos = inputs.len();
    if n_videos == 0 || sequences.iter().any(Vec::is_empty) {
        return Err(Error::EmptyCorpus);
    }
    if sequences.len() != n_videos
        || advantages.len() != n_videos
        || sequences
            .iter()
            .zip(advantages)
            .any(|(s, a)| s.len() != a.len())
    {
        return Err(Error::shape(
            "policy_gradients",
            "sequences and advantages must align per video",
        ));
    }
    let counts: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let n_seqs: usize = counts.iter().sum();
    let total_tokens: usize = sequences.iter().flatten().map(Vec::len).sum();
    if total_tokens == 0 {
        return Err(Error::NoContributingPositions);
    }
    let len = sequences.iter().flatten().map(Vec::len).max().unwrap_or(0);

    let mut tokens = Vec::with_capacity(n_seqs);
    let mut picks = Vec::with_capacity(n_seqs * len);
    let mut weights = Vec::with_capacity(n_seqs * len);
    for (seqs, advs) in sequences.iter().zip(advantages) {
        for (s, &a) in seqs.iter().zip(advs) {
            let mut input = vec![BOS];
            input.extend_from_slice(&s[..s.len().saturating_sub(1)]);
            input.resize(len, PAD);
            tokens.push(input);
            for j in 0..len {
                match s.get(j) {
                    Some(&t) => {
                        picks.push(t as usize);
                        weights.push(-a / total_tokens as f64);
                    }
                    None => {
                        picks.push(PAD as usize);
                        weights.push(0.0);
                    }
                }
            }
        }
    }

    let tape = Tape::new();
    let f = model.bind(&tape);
    let n_mod = model.config().n_modalities;
    let stacked = (0..n_mod)
        .map(|k| stack(inputs, k))
        .collect::<Result<Vec<_>>>()?;
    let encoded = f.encode_all(&stacked)?;
    // repeat each video's encoding once per sequence, video-major
    let repeated = encoded
        .into_iter()
        .map(|e| {
            let s = e.states.shape();
            let parts = counts
                .iter()
                .enumerate()
                .map(|(v, &c)| e.states.slice(0, v, 1)?.expand(c)?.reshape([c, s[1], s[2]]))
                .collect::<Result<Vec<_>>>()?;
            let states = concat(&parts, 0)?;
            let mask = e.mask.map(|m| {
                m.iter()
                    .zip(&counts)
                    .flat_map(|(row, &c)| std::iter::repeat_n(row.clone(), c))
                    .collect()
            });
            Ok(EncodedModality { states, mask })
        })
        .collect::<Result<Vec<_>>>()?;
    let logits = f.decoder_forward(&tokens, &repeated)?;
    let log_probs = logits.log_softmax(2)?.pick(&picks)?;
    let loss = log_probs
        .mul(tape.constant(Tensor::new([weights.len()], weights)?))?
        .sum();
    tape.backward(loss)?;
    Ok((loss.value().item(), f.param_grads()))
}

/// Beam search per video, CIDEr-D rewards, and the policy-gradient loss.
pub fn scst_gradients(
    model: &WaftmModel,
    records: &[&VideoRecord],
    vocab: &Vocabulary,
    idf: &IdfTable,
    beam: usize,
    max_len: usize,
) -> Result<(ScstBatchResult, Vec<Tensor>)> {
    if beam == 0 {
        return Err(Error::InvalidBeam);
    }
    if let Some(r) = records.iter().find(|r| !idf.contains(&r.id)) {
        return Err(Error::UnknownVideo(r.id.clone()));
    }
    let inputs: Vec<Vec<EncoderInput>> = records
        .iter()
        .map(|r| video_inputs(r))
        .collect::<Result<_>>()?;
    let searched: Vec<Result<Searched>> = parallel::map(
        &records.iter().zip(&inputs).collect::<Vec<_>>(),
        |(r, x)| {
            let video = EncodedVideo::new(model, x)?;
            let hyps = beam_from(model, &video, beam, max_len)?;
            let caps = hyps
                .iter()
                .map(|h| tokenizer::decode(&h.tokens, vocab))
                .collect::<Result<Vec<_>>>()?;
            let rewards = caps
                .iter()
                .map(|c| idf.score(&r.id, c, &r.captions))
                .collect::<Result<Vec<_>>>()?;
            Ok((hyps, caps, rewards))
        },
    );
    let mut result = ScstBatchResult {
        video_ids: records.iter().map(|r| r.id.clone()).collect(),
        sequences: Vec::new(),
        captions: Vec::new(),
        rewards: Vec::new(),
        baselines: Vec::new(),
        advantages: Vec::new(),
        loss: 0.0,
        mean_reward: 0.0,
    };
    for s in searched {
        let (hyps, caps, rewards) = s?;
        let b = baseline(&rewards);
        result
            .advantages
            .push(rewards.iter().map(|r| r - b).collect());
        result.baselines.push(b);
        result.rewards.push(rewards);
        result.captions.push(caps);
        result.sequences.push(hyps);
    }
    let all: Vec<f64> = result.rewards.iter().flatten().copied().collect();
    result.mean_reward = all.iter().sum::<f64>() / all.len() as f64;
    let seqs: Vec<Vec<Vec<u32>>> = result
        .sequences
        .iter()
        .map(|hs| hs.iter().map(|h| h.tokens.clone()).collect())
        .collect();
    let (loss, grads) = policy_gradients(model, &inputs, &seqs, &result.advantages)?;
    result.loss = loss;
    Ok((result, grads))
}

pub fn scst_step(
    model: &mut WaftmModel,
    records: &[&VideoRecord],
    vocab: &Vocabulary,
    idf: &IdfTable,
    beam: usize,
    max_len: usize,
    adam: &mut AdamState,
) -> Result<ScstBatchResult> {
    let (result, mut grads) = scst_gradients(model, records, vocab, idf, beam, max_len)?;
    adam.step(model.params_mut(), &mut grads)?;
    Ok(result)
}
