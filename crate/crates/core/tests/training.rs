use waftm::data::synthetic::{generate, SyntheticSpec};
use waftm::data::{make_batch, video_inputs, VideoRecord};
use waftm::model::{ModelConfig, WaftmModel};
use waftm::tensor::Tensor;
use waftm::tokenizer::{TokenSeq, BOS, EOS, PAD};
use waftm::training::{
    baseline, caption_len, clip_grad_norm, decode_checkpoint, encode_checkpoint, global_norm,
    load_checkpoint_for, policy_gradients, save_checkpoint, scst_gradients, shift_targets,
    train_idf, train_loop, xe_gradients, xe_step, AdamState, Mode, TrainConfig, TrainData,
    TrainState,
};
use waftm::Error;

fn tiny_config(vocab: usize) -> ModelConfig {
    let mut cfg = ModelConfig::toy(vec![6, 5], vocab);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.d_head = 8;
    cfg.d_ff = 24;
    cfg.n_mem_slots = 2;
    cfg.max_seq_len = 9;
    cfg.dropout_rate = 0.0;
    cfg
}

fn small_corpus(seed: u64, n: usize) -> waftm::data::synthetic::SyntheticCorpus {
    let mut spec = SyntheticSpec::standard(seed);
    spec.n_videos = n;
    spec.n_test = 2;
    spec.n_words = 10;
    spec.dims = vec![6, 5];
    generate(&spec).unwrap()
}

fn zero_grads(model: &WaftmModel) -> Vec<Tensor> {
    model
        .params()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect()
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut model = WaftmModel::new(tiny_config(8), 1).unwrap();
    let before = model.params().clone();
    let mut adam = AdamState::new(model.params(), 1e-2, Some(1.0));
    for _ in 0..3 {
        let mut g = zero_grads(&model);
        adam.step(model.params_mut(), &mut g).unwrap();
    }
    assert_eq!(model.params(), &before);
}

#[test]
fn adam_matches_a_hand_recurrence() {
    let mut model = WaftmModel::new(tiny_config(8), 2).unwrap();
    let id = model.params().find("out.b").unwrap();
    let lr = 1e-3;
    let mut adam = AdamState::new(model.params(), lr, None);
    let trace = [0.5, -2.0, 0.25];
    let start = model.params().get(id).data()[0];
    let (mut m, mut v, mut p) = (0.0f64, 0.0f64, start);
    for (t, &g) in trace.iter().enumerate() {
        let mut grads = zero_grads(&model);
        grads[id.index()].data_mut()[0] = g;
        adam.step(model.params_mut(), &mut grads).unwrap();
        m = 0.9 * m + 0.1 * g;
        v = 0.999 * v + 0.001 * g * g;
        let k = t as i32 + 1;
        p -= lr * (m / (1.0 - 0.9f64.powi(k))) / ((v / (1.0 - 0.999f64.powi(k))).sqrt() + 1e-8);
        if t == 0 {
            // the first bias-corrected step has magnitude lr and opposes g
            assert!(((start - model.params().get(id).data()[0]) - lr).abs() < 1e-9);
        }
        assert!((model.params().get(id).data()[0] - p).abs() < 1e-15);
    }
    assert_eq!(adam.t, 3);
}

#[test]
fn clipping_bounds_the_norm_and_non_finite_gradients_abort() {
    let mut grads = vec![Tensor::full([3], 4.0), Tensor::full([2, 2], -3.0)];
    let pre = clip_grad_norm(&mut grads, 1.0);
    assert!((pre - (48.0f64 + 36.0).sqrt()).abs() < 1e-12);
    assert!(global_norm(&grads) <= 1.0 + 1e-12);
    let mut small = vec![Tensor::full([2], 0.1)];
    clip_grad_norm(&mut small, 1.0);
    assert_eq!(small[0], Tensor::full([2], 0.1));

    let mut model = WaftmModel::new(tiny_config(8), 3).unwrap();
    let before = model.params().clone();
    let mut adam = AdamState::new(model.params(), 1e-2, Some(1.0));
    let mut g = zero_grads(&model);
    g[4].data_mut()[0] = f64::NAN;
    assert!(matches!(
        adam.step(model.params_mut(), &mut g),
        Err(Error::NonFiniteGradient(_))
    ));
    assert_eq!(model.params(), &before);
    assert_eq!(adam.t, 0);
}

#[test]
fn teacher_forcing_shifts_by_one() {
    let caps = vec![
        TokenSeq {
            ids: vec![BOS, 7, 8, EOS, PAD, PAD],
            len: 4,
        },
        TokenSeq {
            ids: vec![BOS, 9, EOS, PAD, PAD, PAD],
            len: 3,
        },
    ];
    let (inputs, targets) = shift_targets(&caps).unwrap();
    assert_eq!(inputs, vec![vec![BOS, 7, 8], vec![BOS, 9, EOS]]);
    assert_eq!(targets, vec![7, 8, EOS, 9, EOS, PAD]);
}

#[test]
fn uniform_logits_cost_ln_vocab() {
    let corpus = small_corpus(4, 24);
    let vocab = corpus.vocabulary();
    let mut model = WaftmModel::new(tiny_config(vocab.len()), 5).unwrap();
    for name in ["out.w", "out.b"] {
        let id = model.params().find(name).unwrap();
        model.params_mut().get_mut(id).data_mut().fill(0.0);
    }
    let recs: Vec<&VideoRecord> = corpus.records.iter().take(16).collect();
    let batch = make_batch(&recs, &vocab, caption_len(&model), 0).unwrap();
    let (loss, _) = xe_gradients(&model, &batch, None).unwrap();
    let uniform = (vocab.len() as f64).ln();
    assert!((loss / uniform - 1.0).abs() < 0.05, "{loss} vs {uniform}");
}

#[test]
fn repeated_steps_on_one_batch_reduce_the_loss() {
    let corpus = small_corpus(16, 12);
    let vocab = corpus.vocabulary();
    let mut model = WaftmModel::new(tiny_config(vocab.len()), 17).unwrap();
    let recs: Vec<&VideoRecord> = corpus.records.iter().take(4).collect();
    let batch = make_batch(&recs, &vocab, caption_len(&model), 0).unwrap();
    let mut adam = AdamState::new(model.params(), 3e-3, Some(1.0));
    let losses: Vec<f64> = (0..50)
        .map(|_| xe_step(&mut model, &batch, &mut adam, None).unwrap())
        .collect();
    let smooth = |w: &[f64]| w.iter().sum::<f64>() / w.len() as f64;
    let windows: Vec<f64> = losses.chunks(10).map(smooth).collect();
    assert!(windows.windows(2).all(|p| p[1] < p[0]), "{windows:?}");
}

#[test]
fn xe_gradients_are_deterministic() {
    let corpus = small_corpus(6, 12);
    let vocab = corpus.vocabulary();
    let model = WaftmModel::new(tiny_config(vocab.len()), 7).unwrap();
    let recs: Vec<&VideoRecord> = corpus.records.iter().take(4).collect();
    let batch = make_batch(&recs, &vocab, caption_len(&model), 1).unwrap();
    let a = xe_gradients(&model, &batch, Some(9)).unwrap();
    let b = xe_gradients(&model, &batch, Some(9)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn scst_baseline_and_consensus() {
    assert_eq!(baseline(&[0.3, 0.3, 0.3]), 0.3);
    assert!((baseline(&[1.0, 2.0, 6.0]) - 3.0).abs() < 1e-15);

    let corpus = small_corpus(8, 6);
    let model = WaftmModel::new(tiny_config(corpus.vocabulary().len()), 9).unwrap();
    let inputs: Vec<_> = corpus.records[..2]
        .iter()
        .map(|r| video_inputs(r).unwrap())
        .collect();
    let seqs = vec![
        vec![vec![5, 6, EOS], vec![7, EOS], vec![5, 5, 5, EOS]],
        vec![vec![8, EOS], vec![9, 4, EOS]],
    ];
    // equal rewards give exactly zero advantages, so nothing moves
    let rewards = [vec![0.7; 3], vec![1.3; 2]];
    let adv: Vec<Vec<f64>> = rewards
        .iter()
        .map(|r| {
            let b = baseline(r);
            r.iter().map(|x| x - b).collect()
        })
        .collect();
    assert!(adv.iter().flatten().all(|a| *a == 0.0));
    let (loss, grads) = policy_gradients(&model, &inputs, &seqs, &adv).unwrap();
    assert_eq!(loss, 0.0);
    assert!(grads.iter().all(|g| g.data().iter().all(|x| *x == 0.0)));

    // a single beam is its own baseline, so the loss is always zero
    assert_eq!(baseline(&[0.42]), 0.42);
    let recs: Vec<&VideoRecord> = corpus.records.iter().collect();
    let idf = train_idf(&recs).unwrap();
    let (r, grads) = scst_gradients(&model, &recs[..2], &corpus.vocabulary(), &idf, 1, 6).unwrap();
    assert_eq!(r.loss, 0.0);
    assert!(r.advantages.iter().flatten().all(|a| *a == 0.0));
    assert_eq!(global_norm(&grads), 0.0);

    // non-zero advantages do produce a gradient
    let adv = vec![vec![1.0, -0.5, -0.5], vec![0.2, -0.2]];
    let (_, grads) = policy_gradients(&model, &inputs, &seqs, &adv).unwrap();
    assert!(global_norm(&grads) > 0.0);
}

#[test]
fn checkpoints_round_trip_exactly_and_reject_damage() {
    let corpus = small_corpus(10, 10);
    let vocab = corpus.vocabulary();
    let mut model = WaftmModel::new(tiny_config(vocab.len()), 11).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        max_steps: Some(3),
        ..TrainConfig::toy_xe(12)
    };
    let mut state = TrainState::fresh(&cfg, &model);
    let data = TrainData {
        vocab: &vocab,
        train: corpus.records.iter().take(8).collect(),
        val: vec![],
    };
    train_loop(
        &cfg,
        &mut model,
        &mut state,
        &data,
        &mut std::io::sink(),
        None,
    )
    .unwrap();

    let bytes = encode_checkpoint(&model, Some(&state)).unwrap();
    let (m2, s2) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(m2.params(), model.params());
    assert_eq!(m2.config(), model.config());
    assert_eq!(s2.as_ref(), Some(&state));
    assert_eq!(encode_checkpoint(&m2, s2.as_ref()).unwrap(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(
        decode_checkpoint(&bad),
        Err(Error::BadMagic { .. })
    ));
    assert!(matches!(
        decode_checkpoint(&bytes[..bytes.len() - 5]),
        Err(Error::Truncated { .. })
    ));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_checkpoint(&long).is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &model, None).unwrap();
    let mut other = model.config().clone();
    other.d_ff = 32;
    assert!(matches!(
        load_checkpoint_for(&path, &other),
        Err(Error::Checkpoint(_))
    ));
    assert!(load_checkpoint_for(&path, model.config())
        .unwrap()
        .1
        .is_none());

    let mut no_dropout = model.config().clone();
    no_dropout.dropout_rate = 0.0;
    let (loaded, _) = load_checkpoint_for(&path, &no_dropout).unwrap();
    assert_eq!(loaded.config(), &no_dropout);
    assert_eq!(loaded.params(), model.params());
}

fn log_lines(buf: &[u8]) -> Vec<serde_json::Value> {
    std::str::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let corpus = small_corpus(13, 12);
    let vocab = corpus.vocabulary();
    let data = TrainData {
        vocab: &vocab,
        train: corpus.records.iter().take(10).collect(),
        val: vec![],
    };
    let cfg = |steps| TrainConfig {
        batch_size: 3,
        max_steps: Some(steps),
        ..TrainConfig::toy_xe(14)
    };

    let mut full = WaftmModel::new(tiny_config(vocab.len()), 15).unwrap();
    let mut st = TrainState::fresh(&cfg(6), &full);
    let mut full_log = Vec::new();
    train_loop(&cfg(6), &mut full, &mut st, &data, &mut full_log, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let mut part = WaftmModel::new(tiny_config(vocab.len()), 15).unwrap();
    let mut st1 = TrainState::fresh(&cfg(4), &part);
    let mut log = Vec::new();
    train_loop(
        &cfg(4),
        &mut part,
        &mut st1,
        &data,
        &mut log,
        Some(dir.path()),
    )
    .unwrap();
    let (mut resumed, saved) =
        load_checkpoint_for(dir.path().join("final.ckpt"), part.config()).unwrap();
    let mut st2 = TrainState::resume(saved, &cfg(6), &resumed);
    assert_eq!(st2.step, 4);
    train_loop(&cfg(6), &mut resumed, &mut st2, &data, &mut log, None).unwrap();

    assert_eq!(resumed.params(), full.params());
    assert_eq!(log, full_log);
    let lines = log_lines(&log);
    let steps: Vec<u64> = lines.iter().map(|l| l["step"].as_u64().unwrap()).collect();
    assert_eq!(steps, (1..=6).collect::<Vec<_>>());

    // switching to SCST keeps the step counter and starts a new optimizer
    let scst = TrainConfig {
        batch_size: 3,
        max_steps: Some(7),
        ..TrainConfig::toy_scst(14)
    };
    let (mut m, saved) = load_checkpoint_for(dir.path().join("final.ckpt"), part.config()).unwrap();
    let mut st3 = TrainState::resume(saved, &scst, &m);
    assert_eq!(
        (st3.mode, st3.step, st3.epoch, st3.adam.t),
        (Mode::Scst, 4, 0, 0)
    );
    let mut log = Vec::new();
    train_loop(&scst, &mut m, &mut st3, &data, &mut log, None).unwrap();
    let lines = log_lines(&log);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["step"], 5);
    assert_eq!(lines[0]["mode"], "scst");
    assert!(lines[0]["reward"].is_number());
}
