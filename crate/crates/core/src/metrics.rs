//! Caption metrics: corpus BLEU-4, ROUGE-L and CIDEr-D.
//!
//! Text is lowercased, punctuation becomes whitespace, and words are split on
//! whitespace. Candidates and references are parallel slices; CIDEr-D also
//! takes a video id per candidate so that it can be checked against the idf
//! table.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;

pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .to_lowercase()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// n-gram counts for n = 1..=4, keyed by the space-joined words.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NGramStats {
    pub counts: [BTreeMap<String, usize>; MAX_N],
    pub len: usize,
}

impl NGramStats {
    pub fn new(words: &[String]) -> Self {
        let mut counts: [BTreeMap<String, usize>; MAX_N] = Default::default();
        for (i, map) in counts.iter_mut().enumerate() {
            for w in words.windows(i + 1) {
                *map.entry(w.join(" ")).or_default() += 1;
            }
        }
        Self {
            counts,
            len: words.len(),
        }
    }

    pub fn from_text(text: &str) -> Self {
        Self::new(&tokenize(text))
    }
}

fn check_corpus<C: AsRef<str>>(candidates: &[C], references: &[Vec<String>]) -> Result<()> {
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(Error::shape(
            "metrics",
            format!(
                "{} candidates but {} reference sets",
                candidates.len(),
                references.len()
            ),
        ));
    }
    if let Some(index) = references.iter().position(Vec::is_empty) {
        return Err(Error::NoReferences { index });
    }
    Ok(())
}

/// Corpus-level BLEU-4 with clipped precisions and the closest-reference
/// brevity penalty.
pub fn bleu4<C: AsRef<str>>(candidates: &[C], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = NGramStats::from_text(cand.as_ref());
        let rs: Vec<NGramStats> = refs.iter().map(|r| NGramStats::from_text(r)).collect();
        cand_len += c.len;
        ref_len += rs
            .iter()
            .map(|r| r.len)
            .min_by_key(|&l| (l.abs_diff(c.len), l))
            .expect("non-empty references");
        for n in 0..MAX_N {
            total[n] += c.len.saturating_sub(n);
            for (gram, &count) in &c.counts[n] {
                let max_ref = rs
                    .iter()
                    .map(|r| r.counts[n].get(gram).copied().unwrap_or(0))
                    .max()
                    .unwrap_or(0);
                matched[n] += count.min(max_ref);
            }
        }
    }
    if cand_len == 0 || matched.contains(&0) {
        return Ok(0.0);
    }
    let log_mean = (0..MAX_N)
        .map(|n| (matched[n] as f64 / total[n] as f64).ln())
        .sum::<f64>()
        / MAX_N as f64;
    let bp = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(bp * log_mean.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair; 0 when either side is empty.
pub fn rouge_l_pair(candidate: &str, reference: &str) -> f64 {
    let (c, r) = (tokenize(candidate), tokenize(reference));
    let lcs = lcs_len(&c, &r);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / c.len() as f64;
    let rec = lcs as f64 / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rec / (rec + b2 * p)
}

/// Mean over candidates of the best pair score over that candidate's
/// references.
pub fn rouge_l<C: AsRef<str>>(candidates: &[C], references: &[Vec<String>]) -> Result<f64> {
    check_corpus(candidates, references)?;
    let sum: f64 = candidates
        .iter()
        .zip(references)
        .map(|(c, refs)| {
            refs.iter()
                .map(|r| rouge_l_pair(c.as_ref(), r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / candidates.len() as f64)
}

/// Document frequencies where each video's reference set is one document.
#[derive(Clone, Debug, PartialEq)]
pub struct IdfTable {
    n_docs: usize,
    df: BTreeMap<String, usize>,
    videos: BTreeSet<String>,
}

/// `corpus` pairs a video id with its reference captions.
pub fn build_idf<S: AsRef<str>>(corpus: &[(S, Vec<String>)]) -> Result<IdfTable> {
    if corpus.len() < 2 {
        return Err(Error::DegenerateIdf(corpus.len()));
    }
    let mut df: BTreeMap<String, usize> = BTreeMap::new();
    let mut videos = BTreeSet::new();
    for (id, refs) in corpus {
        if !videos.insert(id.as_ref().to_owned()) {
            return Err(Error::Config(format!(
                "duplicate video id {:?} in idf corpus",
                id.as_ref()
            )));
        }
        let mut seen = BTreeSet::new();
        for r in refs {
            let stats = NGramStats::from_text(r);
            for map in &stats.counts {
                seen.extend(map.keys().cloned());
            }
        }
        for g in seen {
            *df.entry(g).or_default() += 1;
        }
    }
    Ok(IdfTable {
        n_docs: corpus.len(),
        df,
        videos,
    })
}

impl IdfTable {
    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn df(&self, ngram: &str) -> usize {
        self.df.get(ngram).copied().unwrap_or(0)
    }

    /// `log(N / max(1, df))`
    pub fn idf(&self, ngram: &str) -> f64 {
        (self.n_docs as f64).ln() - (self.df(ngram).max(1) as f64).ln()
    }

    pub fn contains(&self, video_id: &str) -> bool {
        self.videos.contains(video_id)
    }

    fn vector(&self, stats: &NGramStats) -> ([BTreeMap<String, f64>; MAX_N], [f64; MAX_N]) {
        let mut vec: [BTreeMap<String, f64>; MAX_N] = Default::default();
        let mut norms = [0.0; MAX_N];
        for n in 0..MAX_N {
            for (g, &tf) in &stats.counts[n] {
                let w = tf as f64 * self.idf(g);
                norms[n] += w * w;
                vec[n].insert(g.clone(), w);
            }
            norms[n] = norms[n].sqrt();
        }
        (vec, norms)
    }

    /// CIDEr-D of one candidate against one video's references.
    pub fn score(&self, video_id: &str, candidate: &str, references: &[String]) -> Result<f64> {
        if !self.contains(video_id) {
            return Err(Error::UnknownVideo(video_id.to_owned()));
        }
        if references.is_empty() {
            return Err(Error::NoReferences { index: 0 });
        }
        let cand = NGramStats::from_text(candidate);
        let (cv, cn) = self.vector(&cand);
        let mut total = 0.0;
        for r in references {
            let rs = NGramStats::from_text(r);
            let (rv, rn) = self.vector(&rs);
            let delta = cand.len as f64 - rs.len as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_N {
                if cn[n] == 0.0 || rn[n] == 0.0 {
                    continue;
                }
                let dot: f64 = cv[n]
                    .iter()
                    .filter_map(|(g, &h)| rv[n].get(g).map(|&r| h.min(r) * r))
                    .sum();
                total += penalty * dot / (cn[n] * rn[n]);
            }
        }
        Ok(total / MAX_N as f64 / references.len() as f64 * 10.0)
    }
}

/// Per-candidate CIDEr-D.
pub fn cider_d_scores<I: AsRef<str>, C: AsRef<str>>(
    video_ids: &[I],
    candidates: &[C],
    references: &[Vec<String>],
    idf: &IdfTable,
) -> Result<Vec<f64>> {
    check_corpus(candidates, references)?;
    if video_ids.len() != candidates.len() {
        return Err(Error::shape(
            "cider_d",
            format!(
                "{} ids for {} candidates",
                video_ids.len(),
                candidates.len()
            ),
        ));
    }
    video_ids
        .iter()
        .zip(candidates)
        .zip(references)
        .map(|((id, c), refs)| idf.score(id.as_ref(), c.as_ref(), refs))
        .collect()
}

/// Corpus CIDEr-D: the mean of per-candidate scores.
pub fn cider_d<I: AsRef<str>, C: AsRef<str>>(
    video_ids: &[I],
    candidates: &[C],
    references: &[Vec<String>],
    idf: &IdfTable,
) -> Result<f64> {
    let s = cider_d_scores(video_ids, candidates, references, idf)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Every supported metric; METEOR is not computed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
}

impl Scores {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "B@4": self.bleu4,
            "R": self.rouge_l,
            "C": self.cider_d,
            "M": "n/a",
        })
    }
}

pub fn score_all<I: AsRef<str>, C: AsRef<str>>(
    video_ids: &[I],
    candidates: &[C],
    references: &[Vec<String>],
    idf: &IdfTable,
) -> Result<Scores> {
    Ok(Scores {
        bleu4: bleu4(candidates, references)?,
        rouge_l: rouge_l(candidates, references)?,
        cider_d: cider_d(video_ids, candidates, references, idf)?,
    })
}
