//! A desk-scale captioning task with a known solution.
//!
//! Every video is a short sentence over a small word list with one frame per
//! word. Each modality has its own fixed random embedding table; a frame is
//! the embedding of its word plus gaussian noise. In
//! [`SyntheticMode::SplitPositions`] the first modality carries words only
//! at odd positions and the second only at even positions. Its other frames
//! are empty (zero plus noise), so neither modality alone determines the
//! caption.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::features::write_features;
use super::manifest::{Manifest, ManifestDoc, ModalitySpec, Split, VideoEntry, VideoRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokenizer::Vocabulary;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticMode {
    /// Every modality sees every word.
    #[default]
    Redundant,
    /// Modality 0 sees odd positions, modality 1 even positions.
    SplitPositions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_videos: usize,
    /// Held out as the `test` split (the last videos).
    pub n_test: usize,
    #[serde(default)]
    pub n_val: usize,
    pub n_words: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub dims: Vec<usize>,
    pub noise: f64,
    #[serde(default)]
    pub mode: SyntheticMode,
}

impl SyntheticSpec {
    /// 500 videos, 50 held out, 50 words, 3–8 words per caption, two
    /// modalities of width 32, noise 0.1.
    pub fn standard(seed: u64) -> Self {
        Self {
            seed,
            n_videos: 500,
            n_test: 50,
            n_val: 0,
            n_words: 50,
            min_len: 3,
            max_len: 8,
            dims: vec![32, 32],
            noise: 0.1,
            mode: SyntheticMode::Redundant,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_videos < 2 {
            return bad("n_videos must be at least 2");
        }
        if self.n_test + self.n_val >= self.n_videos {
            return bad("n_test + n_val must leave training videos");
        }
        if self.n_words == 0 || self.n_words > MAX_WORDS {
            return bad(&format!("n_words must be in 1..={MAX_WORDS}"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad("need 1 <= min_len <= max_len");
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return bad("dims must be non-empty and positive");
        }
        if self.mode == SyntheticMode::SplitPositions && self.dims.len() != 2 {
            return bad("split_positions needs exactly two modalities");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        Ok(())
    }
}

const ONSETS: [&str; 16] = [
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh",
];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const MAX_WORDS: usize = 2000;

/// In-memory corpus plus the generator's hidden state, for oracles.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub words: Vec<String>,
    /// Per modality, `[n_words, dim]`.
    pub embeddings: Vec<Tensor>,
    /// Word indices of each video's caption.
    pub sentences: Vec<Vec<usize>>,
    pub records: Vec<VideoRecord>,
}

impl SyntheticCorpus {
    /// Specials followed by every word, so each word is one token.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::with_specials(self.words.iter().cloned()).expect("distinct generated words")
    }

    pub fn modality_names(&self) -> Vec<String> {
        (0..self.embeddings.len())
            .map(|k| format!("m{k}"))
            .collect()
    }
}

fn make_words(rng: &mut ChaCha8Rng, n: usize) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .map(|_| {
                format!(
                    "{}{}",
                    ONSETS[rng.random_range(0..ONSETS.len())],
                    VOWELS[rng.random_range(0..VOWELS.len())]
                )
            })
            .collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let words = make_words(&mut rng, spec.n_words);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let embeddings: Vec<Tensor> = spec
        .dims
        .iter()
        .map(|&d| Tensor::from_fn([spec.n_words, d], |_| unit.sample(&mut rng)))
        .collect();
    let noise = (spec.noise > 0.0).then(|| Normal::new(0.0, spec.noise).expect("positive noise"));

    let n_train = spec.n_videos - spec.n_test - spec.n_val;
    let mut sentences = Vec::with_capacity(spec.n_videos);
    let mut records = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let sentence: Vec<usize> = (0..len)
            .map(|_| rng.random_range(0..spec.n_words))
            .collect();
        let features = embeddings
            .iter()
            .enumerate()
            .map(|(k, table)| {
                let d = table.shape()[1];
                let mut t = Tensor::zeros([len, d]);
                for (pos, &w) in sentence.iter().enumerate() {
                    let informative = match spec.mode {
                        SyntheticMode::Redundant => true,
                        // 1-based odd positions are 0-based even ones
                        SyntheticMode::SplitPositions => (pos % 2 == 0) == (k == 0),
                    };
                    for j in 0..d {
                        let base = if informative { table.at(&[w, j]) } else { 0.0 };
                        let eps = noise.map_or(0.0, |n| n.sample(&mut rng));
                        t.set(&[pos, j], base + eps);
                    }
                }
                t
            })
            .collect();
        let split = if v < n_train {
            Split::Train
        } else if v < n_train + spec.n_val {
            Split::Val
        } else {
            Split::Test
        };
        let caption = sentence
            .iter()
            .map(|&w| words[w].as_str())
            .collect::<Vec<_>>()
            .join(" ");
        records.push(VideoRecord {
            id: format!("vid{v:04}"),
            features,
            captions: vec![caption],
            split,
        });
        sentences.push(sentence);
    }
    Ok(SyntheticCorpus {
        words,
        embeddings,
        sentences,
        records,
    })
}

/// Writes `manifest.json`, `vocab.txt` and `features/*.wftf` under `out`.
pub fn write_corpus(
    corpus: &SyntheticCorpus,
    out: impl AsRef<Path>,
    name: &str,
) -> Result<Manifest> {
    let out = out.as_ref();
    fs::create_dir_all(out.join("features"))?;
    let names = corpus.modality_names();
    let mut videos = Vec::with_capacity(corpus.records.len());
    for r in &corpus.records {
        let mut features = BTreeMap::new();
        for (name, t) in names.iter().zip(&r.features) {
            let rel = format!("features/{}.{name}.wftf", r.id);
            write_features(out.join(&rel), t)?;
            features.insert(name.clone(), rel);
        }
        videos.push(VideoEntry {
            id: r.id.clone(),
            features,
            captions: r.captions.clone(),
            split: Some(r.split),
        });
    }
    let manifest = Manifest {
        doc: ManifestDoc {
            name: Some(name.to_owned()),
            modalities: names
                .iter()
                .zip(&corpus.embeddings)
                .map(|(n, e)| ModalitySpec {
                    name: n.clone(),
                    dim: e.shape()[1],
                })
                .collect(),
            videos,
        },
        base_dir: out.to_path_buf(),
    };
    manifest.save(out.join("manifest.json"))?;
    fs::write(out.join("vocab.txt"), corpus.vocabulary().to_file_string())?;
    Ok(manifest)
}

/// [`generate`] followed by [`write_corpus`].
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    out: impl AsRef<Path>,
) -> Result<(SyntheticCorpus, Manifest)> {
    let corpus = generate(spec)?;
    let manifest = write_corpus(&corpus, out, "synthetic")?;
    Ok((corpus, manifest))
}
