//! Cross-entropy training and self-critical fine-tuning.

mod adam;
mod checkpoint;
mod scst;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use adam::{clip_grad_norm, global_norm, AdamState, BETA1, BETA2, EPS};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
    TrainState, MAGIC, VERSION,
};
pub use scst::{baseline, policy_gradients, scst_gradients, scst_step, ScstBatchResult};

use crate::data::{make_batch, video_inputs, Batch, VideoRecord};
use crate::decoding::greedy_decode;
use crate::error::{Error, Result};
use crate::metrics::{self, build_idf, IdfTable, Scores};
use crate::model::WaftmModel;
use crate::parallel;
use crate::tensor::{Tape, Tensor};
use crate::tokenizer::{self, TokenSeq, Vocabulary, PAD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Xe,
    Scst,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Xe => "xe",
            Mode::Scst => "scst",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub max_epochs: u64,
    /// Stop once the global step counter reaches this value.
    pub max_steps: Option<u64>,
    pub lr: f64,
    pub grad_clip: f64,
    pub seed: u64,
    /// Save every this many steps; 0 saves only the final checkpoint.
    pub checkpoint_every: u64,
    /// Validate every this many steps; 0 disables validation.
    pub val_every: u64,
    /// Beams per video in SCST.
    pub beam_size: usize,
}

impl TrainConfig {
    /// Desk-scale cross-entropy defaults.
    pub fn toy_xe(seed: u64) -> Self {
        Self {
            mode: Mode::Xe,
            batch_size: 16,
            max_epochs: 40,
            max_steps: None,
            lr: 3e-4,
            grad_clip: 1.0,
            seed,
            checkpoint_every: 0,
            val_every: 0,
            beam_size: 3,
        }
    }

    /// Desk-scale SCST defaults.
    pub fn toy_scst(seed: u64) -> Self {
        Self {
            mode: Mode::Scst,
            lr: 5e-5,
            max_epochs: 1000,
            max_steps: None,
            ..Self::toy_xe(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train config: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.grad_clip.is_nan() || self.grad_clip <= 0.0 {
            return bad("grad_clip must be positive");
        }
        if self.mode == Mode::Scst && self.beam_size == 0 {
            return bad("beam_size must be at least 1");
        }
        Ok(())
    }
}

/// Deterministic 64-bit mixing of a seed with stream coordinates.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Teacher forcing: decoder inputs drop the last position, targets drop
/// `[BOS]`. Sequences are trimmed to the longest real caption.
pub fn shift_targets(captions: &[TokenSeq]) -> Result<(Vec<Vec<u32>>, Vec<u32>)> {
    let len = captions.iter().map(|c| c.len).max().unwrap_or(0);
    if len < 2 {
        return Err(Error::NoContributingPositions);
    }
    let inputs = captions.iter().map(|c| c.ids[..len - 1].to_vec()).collect();
    let targets = captions
        .iter()
        .flat_map(|c| c.ids[1..len].iter().copied())
        .collect();
    Ok((inputs, targets))
}

/// Mean token cross-entropy and its parameter gradients.
pub fn xe_gradients(
    model: &WaftmModel,
    batch: &Batch,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor>)> {
    let (inputs, targets) = shift_targets(&batch.captions)?;
    let tape = Tape::new();
    let mut f = model.bind(&tape);
    if let Some(seed) = dropout_seed {
        f = f.with_dropout(seed);
    }
    let logits = f.model_forward(&batch.inputs, &inputs)?;
    let v = model.config().vocab_size;
    let rows = targets.len();
    let loss = logits.reshape([rows, v])?.cross_entropy(&targets, PAD)?;
    tape.backward(loss)?;
    Ok((loss.value().item(), f.param_grads()))
}

pub fn xe_step(
    model: &mut WaftmModel,
    batch: &Batch,
    adam: &mut AdamState,
    dropout_seed: Option<u64>,
) -> Result<f64> {
    let (loss, mut grads) = xe_gradients(model, batch, dropout_seed)?;
    adam.step(model.params_mut(), &mut grads)?;
    Ok(loss)
}

/// Caption length limit for encoding references: `[BOS]` plus at most
/// `max_seq_len` generated tokens.
pub fn caption_len(model: &WaftmModel) -> usize {
    model.config().max_seq_len + 1
}

/// Greedy captions for `records`, decoded to text.
pub fn caption_videos(
    model: &WaftmModel,
    vocab: &Vocabulary,
    records: &[&VideoRecord],
) -> Result<Vec<String>> {
    let max_len = model.config().max_seq_len;
    parallel::map(records, |r| {
        let h = greedy_decode(model, &video_inputs(r)?, max_len)?;
        tokenizer::decode(&h.tokens, vocab)
    })
    .into_iter()
    .collect()
}

/// Greedy-decodes `records` and scores against their references. CIDEr-D
/// uses idf from these same references and is 0 with fewer than 2 videos.
pub fn evaluate(
    model: &WaftmModel,
    vocab: &Vocabulary,
    records: &[&VideoRecord],
) -> Result<Scores> {
    let captions = caption_videos(model, vocab, records)?;
    let ids: Vec<&str> = records.iter().map(|r| r.id.as_str()).collect();
    let refs: Vec<Vec<String>> = records.iter().map(|r| r.captions.clone()).collect();
    let cider = if records.len() >= 2 {
        let corpus: Vec<(&str, Vec<String>)> =
            ids.iter().copied().zip(refs.iter().cloned()).collect();
        metrics::cider_d(&ids, &captions, &refs, &build_idf(&corpus)?)?
    } else {
        0.0
    };
    Ok(Scores {
        bleu4: metrics::bleu4(&captions, &refs)?,
        rouge_l: metrics::rouge_l(&captions, &refs)?,
        cider_d: cider,
    })
}

impl TrainState {
    pub fn fresh(config: &TrainConfig, model: &WaftmModel) -> Self {
        Self {
            mode: config.mode,
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
            seed: config.seed,
            adam: AdamState::new(model.params(), config.lr, Some(config.grad_clip)),
        }
    }

    /// Continues from a saved state. Switching mode keeps the step counter
    /// but starts a new optimizer and epoch count.
    pub fn resume(previous: Option<TrainState>, config: &TrainConfig, model: &WaftmModel) -> Self {
        match previous {
            Some(s) if s.mode == config.mode => s,
            Some(s) => Self {
                step: s.step,
                ..Self::fresh(config, model)
            },
            None => Self::fresh(config, model),
        }
    }
}

pub struct TrainData<'a> {
    pub vocab: &'a Vocabulary,
    pub train: Vec<&'a VideoRecord>,
    pub val: Vec<&'a VideoRecord>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: u64,
    pub last_loss: f64,
    pub last_reward: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}

/// Runs epochs until `max_epochs` or `max_steps`, writing one JSON line per
/// step to `log` and checkpoints under `checkpoint_dir`.
pub fn train_loop(
    config: &TrainConfig,
    model: &mut WaftmModel,
    state: &mut TrainState,
    data: &TrainData<'_>,
    log: &mut dyn Write,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let idf = match config.mode {
        Mode::Scst => Some(train_idf(&data.train)?),
        Mode::Xe => None,
    };
    let batch_size = config.batch_size as u64;
    let n_batches = (data.train.len() as u64).div_ceil(batch_size);
    let mut summary = TrainSummary::default();
    let save = |model: &WaftmModel,
                state: &TrainState,
                name: String,
                summary: &mut TrainSummary|
     -> Result<()> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
            let path = dir.join(name);
            save_checkpoint(&path, model, Some(state))?;
            summary.checkpoints.push(path);
        }
        Ok(())
    };

    'epochs: while state.epoch < config.max_epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            state.seed,
            state.epoch,
            config.mode as u64,
        )));
        while state.batch_in_epoch < n_batches {
            if config.max_steps.is_some_and(|m| state.step >= m) {
                break 'epochs;
            }
            let start = (state.batch_in_epoch * batch_size) as usize;
            let end = (start + config.batch_size).min(order.len());
            let records: Vec<&VideoRecord> =
                order[start..end].iter().map(|&i| data.train[i]).collect();
            let step = state.step + 1;
            let (loss, reward) = match config.mode {
                Mode::Xe => {
                    let batch = make_batch(
                        &records,
                        data.vocab,
                        caption_len(model),
                        mix_seed(state.seed, step, 0),
                    )?;
                    let loss = xe_step(
                        model,
                        &batch,
                        &mut state.adam,
                        Some(mix_seed(state.seed, step, 1)),
                    )?;
                    (loss, None)
                }
                Mode::Scst => {
                    let idf = idf.as_ref().expect("built for scst");
                    let max_len = model.config().max_seq_len;
                    let r = scst_step(
                        model,
                        &records,
                        data.vocab,
                        idf,
                        config.beam_size,
                        max_len,
                        &mut state.adam,
                    )?;
                    (r.loss, Some(r.mean_reward))
                }
            };
            state.step = step;
            state.batch_in_epoch += 1;
            if state.batch_in_epoch == n_batches {
                state.batch_in_epoch = 0;
                state.epoch += 1;
            }

            let mut line = json!({
                "step": step,
                "epoch": state.epoch,
                "mode": config.mode.as_str(),
                "loss": loss,
                "lr": state.adam.lr,
            });
            if let Some(r) = reward {
                line["reward"] = json!(r);
            }
            if config.val_every > 0 && step.is_multiple_of(config.val_every) && !data.val.is_empty()
            {
                line["val_metrics"] = evaluate(model, data.vocab, &data.val)?.to_json();
            }
            writeln!(log, "{line}")?;
            summary.steps += 1;
            summary.last_loss = loss;
            summary.last_reward = reward;
            if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
                save(model, state, format!("step_{step:06}.ckpt"), &mut summary)?;
            }
            if state.batch_in_epoch == 0 {
                continue 'epochs;
            }
        }
    }
    log.flush()?;
    save(model, state, "final.ckpt".into(), &mut summary)?;
    Ok(summary)
}

/// Idf over the training references (one document per video).
pub fn train_idf(records: &[&VideoRecord]) -> Result<IdfTable> {
    let corpus: Vec<(&str, Vec<String>)> = records
        .iter()
        .map(|r| (r.id.as_str(), r.captions.clone()))
        .collect();
    build_idf(&corpus)
}
