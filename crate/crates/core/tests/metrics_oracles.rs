mod common;

use common::oracles;
use proptest::prelude::*;
use waftm::metrics::{self, build_idf, IdfTable};

fn owned(refs: &[Vec<&str>]) -> Vec<Vec<String>> {
    refs.iter()
        .map(|r| r.iter().map(|s| s.to_string()).collect())
        .collect()
}

fn idf_for(ids: &[&str], refs: &[Vec<&str>]) -> IdfTable {
    let corpus: Vec<(&str, Vec<String>)> = ids.iter().copied().zip(owned(refs)).collect();
    build_idf(&corpus).unwrap()
}

#[test]
fn bleu_hand_example() {
    // p1 = 5/6, p2 = 3/5, p3 = 2/4, p4 = 1/3, equal lengths so BP = 1
    let expect = (5.0f64 / 6.0 * 3.0 / 5.0 * 2.0 / 4.0 * 1.0 / 3.0).powf(0.25);
    let got = metrics::bleu4(
        &["the cat sat on the mat"],
        &owned(&[vec!["the cat sat on a mat"]]),
    )
    .unwrap();
    assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    assert!((got - 0.537_284_965_911_771).abs() < 1e-12);
}

#[test]
fn bleu_identity_and_no_overlap() {
    let refs = owned(&[vec!["a b c d e"], vec!["f g h i"]]);
    assert_eq!(
        metrics::bleu4(&["a b c d e", "f g h i"], &refs).unwrap(),
        1.0
    );
    assert_eq!(
        metrics::bleu4(&["a b c x e", "f g y i"], &refs).unwrap(),
        0.0
    );
}

#[test]
fn bleu_brevity_penalty() {
    let got = metrics::bleu4(&["a b c d"], &owned(&[vec!["a b c d e f g h"]])).unwrap();
    assert!((got - (1.0f64 - 8.0 / 4.0).exp()).abs() < 1e-15);
}

#[test]
fn rouge_hand_example() {
    let (p, r, b2) = (1.0, 2.0 / 3.0, 1.2f64 * 1.2);
    let expect = (1.0 + b2) * p * r / (r + b2 * p);
    let got = metrics::rouge_l(&["the cat"], &owned(&[vec!["the cat sat"]])).unwrap();
    assert!((got - expect).abs() < 1e-15);
    assert_eq!(
        metrics::rouge_l(&["a b"], &owned(&[vec!["a b"]])).unwrap(),
        1.0
    );
    assert_eq!(
        metrics::rouge_l(&["a b"], &owned(&[vec!["c d"]])).unwrap(),
        0.0
    );
    assert_eq!(
        metrics::rouge_l(&[""], &owned(&[vec!["c d"]])).unwrap(),
        0.0
    );
}

#[test]
fn idf_edges_and_recount() {
    let (ids, _, refs) = oracles::toy_corpus();
    let idf = idf_for(&ids, &refs);
    assert_eq!(idf.n_docs(), 3);
    // "a" appears in every video
    assert_eq!(idf.idf("a"), 0.0);
    assert!((idf.idf("guitar") - 3f64.ln()).abs() < 1e-15);
    for (gram, df) in oracles::document_frequency(&refs) {
        let key = gram.join(" ");
        assert_eq!(idf.df(&key), df, "{key}");
        assert!(idf.idf(&key) >= 0.0);
    }
}

#[test]
fn toy_corpus_matches_oracles() {
    let (ids, cands, refs) = oracles::toy_corpus();
    let r = owned(&refs);
    let idf = idf_for(&ids, &refs);
    let bleu = metrics::bleu4(&cands, &r).unwrap();
    assert!((bleu - oracles::bleu4(&cands, &refs)).abs() < 1e-9);
    assert!(bleu > 0.0 && bleu < 1.0);
    let rouge = metrics::rouge_l(&cands, &r).unwrap();
    assert!((rouge - oracles::rouge_l(&cands, &refs)).abs() < 1e-9);
    let per = metrics::cider_d_scores(&ids, &cands, &r, &idf).unwrap();
    let expect = oracles::cider_d(&cands, &refs, &refs);
    for (a, b) in per.iter().zip(&expect) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        assert!(*a > 0.0 && *a <= 10.0);
    }
    let all = metrics::score_all(&ids, &cands, &r, &idf).unwrap();
    assert_eq!(all.bleu4, bleu);
    assert_eq!(all.rouge_l, rouge);
    assert_eq!(all.cider_d, per.iter().sum::<f64>() / 3.0);
    let json = all.to_json();
    assert_eq!(json["M"], "n/a");
}

#[test]
fn identity_corpus_scores() {
    let ids = ["a", "b"];
    let refs = owned(&[vec!["a dog barks"], vec!["two cats sleep"]]);
    let idf = idf_for(&ids, &[vec!["a dog barks"], vec!["two cats sleep"]]);
    let cands = ["a dog barks", "two cats sleep"];
    let s = metrics::score_all(&ids, &cands, &refs, &idf).unwrap();
    assert_eq!(s.rouge_l, 1.0);
    // three-word sentences have no 4-grams, so BLEU needs the longer pair below
    assert!(s.cider_d > 0.0);
    let long = owned(&[
        vec!["a dog barks at the mailman"],
        vec!["two cats sleep on a warm sofa"],
    ]);
    let cands = [
        "a dog barks at the mailman",
        "two cats sleep on a warm sofa",
    ];
    let idf = idf_for(
        &ids,
        &[
            vec!["a dog barks at the mailman"],
            vec!["two cats sleep on a warm sofa"],
        ],
    );
    let s = metrics::score_all(&ids, &cands, &long, &idf).unwrap();
    assert_eq!(s.bleu4, 1.0);
    assert_eq!(s.rouge_l, 1.0);
    assert!(metrics::score_all::<&str, &str>(&[], &[], &[], &idf).is_err());
}

#[test]
fn cider_zero_for_disjoint_candidate() {
    let (ids, _, refs) = oracles::toy_corpus();
    let idf = idf_for(&ids, &refs);
    let s = metrics::cider_d(&["v0"], &["zebra xylophone"], &owned(&refs[..1]), &idf).unwrap();
    assert_eq!(s, 0.0);
    assert!(metrics::cider_d(&["nope"], &["a man"], &owned(&refs[..1]), &idf).is_err());
}

#[test]
fn cider_prefers_the_exact_reference() {
    // among all 3-word candidates over a tiny vocabulary, copying the
    // 3-word reference scores highest
    let vocab = ["a", "b", "c", "d"];
    let corpus = vec![vec!["a b c", "a a d c"], vec!["d d b", "c b"], vec!["b a"]];
    let ids = ["x", "y", "z"];
    let idf = idf_for(&ids, &corpus);
    let refs = vec!["a b c".to_string()];
    let target = idf.score("x", "a b c", &refs).unwrap();
    for i in 0..64 {
        let cand = format!("{} {} {}", vocab[i / 16], vocab[(i / 4) % 4], vocab[i % 4]);
        let s = idf.score("x", &cand, &refs).unwrap();
        assert!(s <= target + 1e-12, "{cand}: {s} > {target}");
    }
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 0..7)
        .prop_map(|w| w.join(" "))
}

proptest! {
    #[test]
    fn metric_bounds_and_oracle_agreement(
        items in prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 2..5)
    ) {
        let ids: Vec<String> = (0..items.len()).map(|i| format!("v{i}")).collect();
        let cands: Vec<&str> = items.iter().map(|(c, _)| c.as_str()).collect();
        let refs_ref: Vec<Vec<&str>> = items.iter().map(|(_, r)| r.iter().map(String::as_str).collect()).collect();
        let refs = owned(&refs_ref);
        let corpus: Vec<(String, Vec<String>)> = ids.iter().cloned().zip(refs.clone()).collect();
        let idf = build_idf(&corpus).unwrap();

        let b = metrics::bleu4(&cands, &refs).unwrap();
        let r = metrics::rouge_l(&cands, &refs).unwrap();
        prop_assert!((0.0..=1.0).contains(&b) && (0.0..=1.0).contains(&r));
        prop_assert!((b - oracles::bleu4(&cands, &refs_ref)).abs() < 1e-9);
        prop_assert!((r - oracles::rouge_l(&cands, &refs_ref)).abs() < 1e-9);
        let per = metrics::cider_d_scores(&ids, &cands, &refs, &idf).unwrap();
        let expect = oracles::cider_d(&cands, &refs_ref, &refs_ref);
        for (a, e) in per.iter().zip(&expect) {
            prop_assert!(*a >= 0.0 && *a <= 10.0 + 1e-12);
            prop_assert!((a - e).abs() < 1e-9);
        }

        // reordering the corpus leaves every metric unchanged
        let mut perm: Vec<usize> = (0..items.len()).collect();
        perm.reverse();
        let pc: Vec<&str> = perm.iter().map(|&i| cands[i]).collect();
        let pr: Vec<Vec<String>> = perm.iter().map(|&i| refs[i].clone()).collect();
        let pi: Vec<&str> = perm.iter().map(|&i| ids[i].as_str()).collect();
        prop_assert_eq!(metrics::bleu4(&pc, &pr).unwrap(), b);
        prop_assert!((metrics::rouge_l(&pc, &pr).unwrap() - r).abs() < 1e-15);
        let c0 = metrics::cider_d(&ids, &cands, &refs, &idf).unwrap();
        prop_assert!((metrics::cider_d(&pi, &pc, &pr, &idf).unwrap() - c0).abs() < 1e-12);
    }

    #[test]
    fn extra_reference_never_lowers_rouge(c in sentence(), rs in prop::collection::vec(sentence(), 1..4), extra in sentence()) {
        let before = metrics::rouge_l(&[c.as_str()], std::slice::from_ref(&rs)).unwrap();
        let mut more = rs;
        more.push(extra);
        prop_assert!(metrics::rouge_l(&[c.as_str()], &[more]).unwrap() >= before);
    }
}
