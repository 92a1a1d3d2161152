use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use waftm::data::synthetic::{generate, generate_synthetic, SyntheticMode, SyntheticSpec};
use waftm::data::{
    self, load_manifest, make_batch, read_features, write_features, Split, VideoRecord,
};
use waftm::model::{ModelConfig, WaftmModel};
use waftm::tensor::{Tape, Tensor};
use waftm::tokenizer::{Vocabulary, BOS};
use waftm::Error;

fn write_manifest(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("manifest.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn minimal_manifest_loads() {
    let dir = tempfile::tempdir().unwrap();
    write_features(dir.path().join("a.wftf"), &Tensor::ones([1, 3])).unwrap();
    let p = write_manifest(
        dir.path(),
        r#"{"modalities":[{"name":"rgb","dim":3}],"videos":[{"id":"v","features":{"rgb":"a.wftf"},"captions":["a cat"]}]}"#,
    );
    let m = load_manifest(&p).unwrap();
    assert_eq!(m.videos().len(), 1);
    assert_eq!(m.videos()[0].split(), Split::Train);
    let rec = m.load_video(&m.videos()[0]).unwrap();
    assert_eq!(rec.features[0], Tensor::ones([1, 3]));
}

#[test]
fn manifest_errors_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_manifest(
        dir.path(),
        r#"{"modalities":[{"name":"rgb","dim":3}],"videos":[{"id":"v","features":{"rgb":"gone.wftf"},"captions":["x"]}]}"#,
    );
    match load_manifest(&p) {
        Err(Error::MissingFile(path)) => assert!(path.ends_with("gone.wftf")),
        other => panic!("{other:?}"),
    }

    write_features(dir.path().join("a.wftf"), &Tensor::ones([2, 32])).unwrap();
    let p = write_manifest(
        dir.path(),
        r#"{"modalities":[{"name":"rgb","dim":64}],"videos":[{"id":"clip7","features":{"rgb":"a.wftf"},"captions":["x"]}]}"#,
    );
    match load_manifest(&p) {
        Err(e @ Error::Dimension { .. }) => {
            let msg = e.to_string();
            assert!(
                msg.contains("clip7") && msg.contains("64") && msg.contains("32"),
                "{msg}"
            );
        }
        other => panic!("{other:?}"),
    }

    let p = write_manifest(
        dir.path(),
        r#"{"modalities":[{"name":"rgb","dim":32}],"videos":[{"id":"v","features":{"rgb":"a.wftf","flow":"a.wftf"},"captions":["x"]}]}"#,
    );
    assert!(matches!(load_manifest(&p), Err(Error::UnknownModality(m)) if m == "flow"));

    let p = write_manifest(dir.path(), r#"{"modalities":[],"videos":[],"extra":1}"#);
    assert!(matches!(load_manifest(&p), Err(Error::Manifest(_))));
}

#[test]
fn manifest_save_load_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SyntheticSpec::standard(3);
    spec.n_videos = 12;
    spec.n_test = 2;
    spec.n_val = 2;
    let (_, m) = generate_synthetic(&spec, dir.path()).unwrap();
    let a = load_manifest(dir.path().join("manifest.json")).unwrap();
    assert_eq!(a, m);
    a.save(dir.path().join("again.json")).unwrap();
    let b = load_manifest(dir.path().join("again.json")).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("manifest.json")).unwrap(),
        fs::read(dir.path().join("again.json")).unwrap()
    );
    let splits: Vec<Split> = a.videos().iter().map(|v| v.split()).collect();
    assert_eq!(splits.iter().filter(|s| **s == Split::Val).count(), 2);
    assert_eq!(splits.iter().filter(|s| **s == Split::Test).count(), 2);
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

#[test]
fn synthetic_generation_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut spec = SyntheticSpec::standard(11);
    spec.n_videos = 20;
    spec.n_test = 5;
    generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert_eq!(ta.len(), 2 + 20 * 2);
    assert_eq!(ta, tb);

    let vocab = Vocabulary::load(a.path().join("vocab.txt")).unwrap();
    assert_eq!(vocab.len(), 4 + 50);
    spec.seed = 12;
    let c = tempfile::tempdir().unwrap();
    generate_synthetic(&spec, c.path()).unwrap();
    assert_ne!(tree(c.path()), ta);
}

/// Decodes each frame as the word whose embedding is nearest.
fn nearest_word(frame: &[f64], table: &Tensor) -> usize {
    (0..table.shape()[0])
        .map(|w| {
            let d: f64 = table
                .row(w)
                .iter()
                .zip(frame)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (w, d)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
        .0
}

fn recovery(spec: &SyntheticSpec) -> f64 {
    let corpus = generate(spec).unwrap();
    let (mut right, mut total) = (0, 0);
    for (rec, sentence) in corpus.records.iter().zip(&corpus.sentences) {
        let f = &rec.features[0];
        for (pos, &w) in sentence.iter().enumerate() {
            right += usize::from(nearest_word(f.row(pos), &corpus.embeddings[0]) == w);
            total += 1;
        }
        let words: Vec<&str> = sentence.iter().map(|&w| corpus.words[w].as_str()).collect();
        assert_eq!(rec.captions, vec![words.join(" ")]);
    }
    right as f64 / total as f64
}

#[test]
fn nearest_neighbor_oracle_solves_the_task() {
    let mut spec = SyntheticSpec::standard(5);
    spec.noise = 0.0;
    assert_eq!(recovery(&spec), 1.0);
    spec.noise = 0.1;
    assert!(recovery(&spec) >= 0.99);
}

#[test]
fn split_positions_hide_half_the_words() {
    let mut spec = SyntheticSpec::standard(6);
    spec.noise = 0.0;
    spec.mode = SyntheticMode::SplitPositions;
    let corpus = generate(&spec).unwrap();
    for (rec, sentence) in corpus.records.iter().zip(&corpus.sentences).take(50) {
        for (pos, &w) in sentence.iter().enumerate() {
            let k = if pos % 2 == 0 { 0 } else { 1 };
            assert_eq!(rec.features[k].row(pos), corpus.embeddings[k].row(w));
            assert_ne!(
                rec.features[1 - k].row(pos),
                corpus.embeddings[1 - k].row(w)
            );
        }
    }
}

fn record(id: &str, frames: &[usize], captions: &[&str]) -> VideoRecord {
    VideoRecord {
        id: id.into(),
        features: frames
            .iter()
            .enumerate()
            .map(|(k, &m)| Tensor::from_fn([m, 2 + k], |i| 1.0 + i as f64))
            .collect(),
        captions: captions.iter().map(|s| s.to_string()).collect(),
        split: Split::Train,
    }
}

#[test]
fn batching_pads_masks_and_samples() {
    let vocab = Vocabulary::with_specials(["a", "b", "c", "d"]).unwrap();
    let one = record("x", &[3, 2], &["a b"]);
    let b = make_batch(&[&one], &vocab, 6, 0).unwrap();
    assert!(b.inputs.iter().all(|i| i.mask.is_none()));
    assert_eq!(b.inputs[0].features.shape(), &[1, 3, 2]);
    assert_eq!(b.captions[0].ids[0], BOS);

    let two = record("y", &[5, 1], &["a", "b", "c", "d", "a b", "c d"]);
    let b = make_batch(&[&one, &two], &vocab, 6, 9).unwrap();
    let x0 = &b.inputs[0];
    assert_eq!(x0.features.shape(), &[2, 5, 2]);
    assert_eq!(
        &x0.mask.as_ref().unwrap()[0],
        &[true, true, true, false, false]
    );
    assert!(x0.features.data()[6..10].iter().all(|v| *v == 0.0));
    let x1 = &b.inputs[1];
    assert_eq!(&x1.mask.as_ref().unwrap()[1], &[true, false]);

    // same seed, same references; other seeds eventually differ
    let again = make_batch(&[&one, &two], &vocab, 6, 9).unwrap();
    assert_eq!(again.captions, b.captions);
    assert!(
        (0..20).any(|s| make_batch(&[&one, &two], &vocab, 6, s).unwrap().captions != b.captions)
    );

    // masked keys receive exactly zero attention weight
    let mut cfg = ModelConfig::toy(vec![2, 3], vocab.len());
    cfg.dropout_rate = 0.0;
    let model = WaftmModel::new(cfg, 0).unwrap();
    let tape = Tape::new();
    let f = model.bind_frozen(&tape);
    let p = &model.layout().encoders[0].layers[0].attn;
    let x = f
        .embed_features(tape.constant(x0.features.clone()), 0)
        .unwrap();
    let (_, w) = f
        .attention(x, x, &p.attn, p.memory.as_ref(), x0.mask.as_deref(), false)
        .unwrap();
    let w = w.value();
    let total = w.shape()[3];
    for (r, row) in w.rows().enumerate() {
        let b = r / (w.shape()[1] * w.shape()[2]);
        for (j, &v) in row.iter().enumerate().take(5) {
            if !x0.mask.as_ref().unwrap()[b][j] {
                assert_eq!(v, 0.0);
            }
        }
        assert_eq!(row.len(), total);
    }
}

#[test]
fn feature_files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn([4, 3], |i| (i as f64).exp() * 1e-3);
    let p = dir.path().join("f.wftf");
    write_features(&p, &t).unwrap();
    assert_eq!(read_features(&p).unwrap(), t);
    let bytes = fs::read(&p).unwrap();
    fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_features(&p), Err(Error::Truncated { .. })));
    assert_eq!(data::subsample(&t, 2).shape(), &[2, 3]);
}
