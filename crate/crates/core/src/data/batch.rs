use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::VideoRecord;
use crate::error::{Error, Result};
use crate::model::EncoderInput;
use crate::tensor::Tensor;
use crate::tokenizer::{self, TokenSeq, Vocabulary};

/// A padded training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub video_ids: Vec<String>,
    /// One input per modality, `[B, max frames, dim]`; masks are present
    /// only when some video was padded.
    pub inputs: Vec<EncoderInput>,
    /// The sampled reference of each video, encoded and padded.
    pub captions: Vec<TokenSeq>,
    /// All references of each video.
    pub references: Vec<Vec<String>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.video_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video_ids.is_empty()
    }
}

fn pad_modality(records: &[&VideoRecord], k: usize) -> Result<EncoderInput> {
    let dim = records[0].features[k].shape()[1];
    let max_m = records
        .iter()
        .map(|r| r.features[k].shape()[0])
        .max()
        .unwrap_or(0);
    let mut data = Vec::with_capacity(records.len() * max_m * dim);
    let mut mask = Vec::with_capacity(records.len());
    let mut padded = false;
    for r in records {
        let t = &r.features[k];
        if t.shape()[1] != dim {
            return Err(Error::shape(
                "make_batch",
                format!(
                    "video {:?} modality {k} has width {}, expected {dim}",
                    r.id,
                    t.shape()[1]
                ),
            ));
        }
        let m = t.shape()[0];
        data.extend_from_slice(t.data());
        data.resize(data.len() + (max_m - m) * dim, 0.0);
        let mut row = vec![true; m];
        row.resize(max_m, false);
        padded |= m < max_m;
        mask.push(row);
    }
    Ok(EncoderInput {
        features: Tensor::new([records.len(), max_m, dim], data)?,
        mask: padded.then_some(mask),
    })
}

/// Zero-pads features per modality and encodes one uniformly sampled
/// reference per video (drawn from `seed`). Captions are encoded to
/// `max_len` tokens including `[BOS]` and `[EOS]`.
pub fn make_batch(
    records: &[&VideoRecord],
    vocab: &Vocabulary,
    max_len: usize,
    seed: u64,
) -> Result<Batch> {
    let first = records.first().ok_or(Error::EmptyCorpus)?;
    let n_mod = first.features.len();
    if let Some(r) = records.iter().find(|r| r.features.len() != n_mod) {
        return Err(Error::ModalityMismatch {
            expected: n_mod,
            got: r.features.len(),
        });
    }
    let inputs = (0..n_mod)
        .map(|k| pad_modality(records, k))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let captions = records
        .iter()
        .map(|r| {
            if r.captions.is_empty() {
                return Err(Error::NoReferences { index: 0 });
            }
            let pick = rng.random_range(0..r.captions.len());
            Ok(tokenizer::encode(&r.captions[pick], vocab, max_len))
        })
        .collect::<Result<_>>()?;
    Ok(Batch {
        video_ids: records.iter().map(|r| r.id.clone()).collect(),
        inputs,
        captions,
        references: records.iter().map(|r| r.captions.clone()).collect(),
    })
}

/// Unpadded single-video encoder inputs.
pub fn video_inputs(record: &VideoRecord) -> Result<Vec<EncoderInput>> {
    record
        .features
        .iter()
        .map(|t| EncoderInput::single(t.clone()))
        .collect()
}
