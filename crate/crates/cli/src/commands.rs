use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufWriter, Write};
use std::path::Path;

use serde::Deserialize;
use serde_json::json;
use waftm::data::synthetic::{generate_synthetic, SyntheticSpec};
use waftm::data::{load_manifest, video_inputs, Manifest, Split, VideoRecord};
use waftm::decoding::beam_search;
use waftm::metrics::{self, build_idf};
use waftm::model::{ModelConfig, WaftmModel};
use waftm::tokenizer::{self, Vocabulary};
use waftm::training::{load_checkpoint, load_checkpoint_for, train_loop, TrainData, TrainState};
use waftm::{parallel, Error};

use crate::config::RunConfig;
use crate::CliError;

const LOG_FILE: &str = "train_log.jsonl";

/// Model and data must agree on vocabulary size and modality widths.
fn check_compatible(
    model: &ModelConfig,
    manifest: &Manifest,
    vocab: &Vocabulary,
) -> Result<(), CliError> {
    if model.vocab_size != vocab.len() {
        return Err(CliError::Usage(format!(
            "model expects {} vocabulary entries but the vocabulary has {}",
            model.vocab_size,
            vocab.len()
        )));
    }
    let mods = manifest.modalities();
    if mods.len() != model.n_modalities {
        return Err(CliError::Usage(format!(
            "model expects {} modalities but the manifest declares {}",
            model.n_modalities,
            mods.len()
        )));
    }
    for (m, &dim) in mods.iter().zip(&model.modality_input_dims) {
        if m.dim != dim {
            return Err(CliError::Usage(format!(
                "modality '{}' has dim {} but the model expects {dim}",
                m.name, m.dim
            )));
        }
    }
    Ok(())
}

pub fn train(
    config_path: &Path,
    resume: Option<&Path>,
    print_config: bool,
) -> Result<(), CliError> {
    let config = RunConfig::load(config_path)?;
    if print_config {
        println!(
            "{}",
            serde_json::to_string_pretty(&config).expect("config serializes")
        );
        return Ok(());
    }
    let manifest = load_manifest(&config.paths.manifest)?;
    let vocab = Vocabulary::load(&config.paths.vocab)?;
    check_compatible(&config.model, &manifest, &vocab)?;
    let records = manifest.load_all()?;

    let (mut model, state) = match resume {
        Some(path) => {
            let (model, saved) = load_checkpoint_for(path, &config.model)?;
            let state = TrainState::resume(saved, &config.train, &model);
            (model, state)
        }
        None => {
            let model = WaftmModel::new(config.model.clone(), config.train.seed)?;
            let state = TrainState::fresh(&config.train, &model);
            (model, state)
        }
    };
    let mut state = state;
    let data = TrainData {
        vocab: &vocab,
        train: records.iter().filter(|r| r.split == Split::Train).collect(),
        val: records.iter().filter(|r| r.split == Split::Val).collect(),
    };

    let out = &config.paths.output_dir;
    fs::create_dir_all(out)?;
    let log_file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(out.join(LOG_FILE))?;
    let mut log = BufWriter::new(log_file);
    let summary = train_loop(
        &config.train,
        &mut model,
        &mut state,
        &data,
        &mut log,
        Some(out),
    )?;
    println!(
        "{}",
        json!({
            "steps_run": summary.steps,
            "step": state.step,
            "epoch": state.epoch,
            "last_loss": summary.last_loss,
            "last_reward": summary.last_reward,
            "checkpoint": summary.checkpoints.last(),
            "log": out.join(LOG_FILE),
        })
    );
    Ok(())
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    serde_json::from_value(json!(name))
        .map_err(|_| CliError::Usage(format!("unknown split '{name}'")))
}

pub fn caption(
    checkpoint: &Path,
    manifest_path: &Path,
    vocab_path: Option<&Path>,
    beam: usize,
    split: Option<&str>,
) -> Result<(), CliError> {
    if beam == 0 {
        return Err(CliError::Usage("--beam must be at least 1".into()));
    }
    let split = split.map(parse_split).transpose()?;
    let manifest = load_manifest(manifest_path)?;
    let vocab = match vocab_path {
        Some(p) => Vocabulary::load(p)?,
        None => {
            let p = manifest_path
                .parent()
                .unwrap_or(Path::new(""))
                .join("vocab.txt");
            if !p.is_file() {
                return Err(CliError::Run(Error::MissingFile(p)));
            }
            Vocabulary::load(p)?
        }
    };
    let (model, _) = load_checkpoint(checkpoint)?;
    check_compatible(model.config(), &manifest, &vocab)?;
    let records: Vec<VideoRecord> = manifest
        .videos()
        .iter()
        .filter(|v| split.is_none_or(|s| v.split() == s))
        .map(|v| manifest.load_video(v))
        .collect::<Result<_, _>>()?;
    let max_len = model.config().max_seq_len;
    let results = parallel::map(&records, |r| -> Result<(String, f64), Error> {
        let best = beam_search(&model, &video_inputs(r)?, beam, max_len)?
            .into_iter()
            .next()
            .ok_or(Error::InvalidBeam)?;
        Ok((tokenizer::decode(&best.tokens, &vocab)?, best.log_prob))
    });
    let stdout = io::stdout();
    let mut out = stdout.lock();
    for (r, res) in records.iter().zip(results) {
        let (caption, log_prob) = res?;
        writeln!(
            out,
            "{}",
            json!({"video_id": r.id, "caption": caption, "log_prob": log_prob})
        )?;
    }
    Ok(())
}

#[derive(Deserialize)]
struct Candidate {
    video_id: String,
    caption: String,
}

/// A JSON array of `{video_id, caption}` or one such object per line.
fn read_candidates(path: &Path) -> Result<Vec<Candidate>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let bad = |e: serde_json::Error| CliError::Usage(format!("candidates {}: {e}", path.display()));
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text).map_err(bad);
    }
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(bad))
        .collect()
}

pub fn eval(candidates: &Path, references: &Path) -> Result<(), CliError> {
    let cands = read_candidates(candidates)?;
    let text = fs::read_to_string(references)
        .map_err(|e| CliError::Usage(format!("{}: {e}", references.display())))?;
    let refs: BTreeMap<String, Vec<String>> = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("references {}: {e}", references.display())))?;

    let mut seen = BTreeSet::new();
    for c in &cands {
        if !seen.insert(c.video_id.as_str()) {
            return Err(CliError::Usage(format!(
                "video '{}' has more than one candidate",
                c.video_id
            )));
        }
        if !refs.contains_key(&c.video_id) {
            return Err(CliError::Run(Error::UnknownVideo(c.video_id.clone())));
        }
    }
    let ids: Vec<&str> = cands.iter().map(|c| c.video_id.as_str()).collect();
    let texts: Vec<&str> = cands.iter().map(|c| c.caption.as_str()).collect();
    let matched: Vec<Vec<String>> = ids.iter().map(|id| refs[*id].clone()).collect();
    let out = if refs.len() >= 2 {
        let corpus: Vec<(&str, Vec<String>)> =
            refs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        metrics::score_all(&ids, &texts, &matched, &build_idf(&corpus)?)?.to_json()
    } else {
        // idf is undefined over a single document
        json!({
            "B@4": metrics::bleu4(&texts, &matched)?,
            "R": metrics::rouge_l(&texts, &matched)?,
            "C": null,
            "M": "n/a",
        })
    };
    println!("{out}");
    Ok(())
}

pub fn gen_synth(spec_path: &Path, out: &Path) -> Result<(), CliError> {
    let text = fs::read_to_string(spec_path)
        .map_err(|e| CliError::Usage(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("spec {}: {e}", spec_path.display())))?;
    spec.validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let (corpus, _) = generate_synthetic(&spec, out)?;
    println!(
        "{}",
        json!({
            "videos": corpus.records.len(),
            "vocab_size": corpus.vocabulary().len(),
            "modality_dims": spec.dims,
            "manifest": out.join("manifest.json"),
            "vocab": out.join("vocab.txt"),
        })
    );
    Ok(())
}

pub fn tokenize(vocab_path: &Path, decode: bool, max_len: usize) -> Result<(), CliError> {
    let vocab = Vocabulary::load(vocab_path)?;
    let stdin = io::stdin();
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for line in stdin.lock().lines() {
        let line = line?;
        if decode {
            let ids = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<u32>()
                        .map_err(|_| CliError::Usage(format!("'{t}' is not a token id")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            writeln!(out, "{}", tokenizer::decode(&ids, &vocab)?)?;
        } else {
            let seq = tokenizer::encode(&line, &vocab, max_len);
            let ids: Vec<String> = seq.tokens().iter().map(u32::to_string).collect();
            writeln!(out, "{}", ids.join(" "))?;
        }
    }
    out.flush()?;
    Ok(())
}
