//! Straight-line reimplementations of the caption metrics, written from the
//! definitions with plain vectors and no shared code.

#![allow(dead_code)]

pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else if !cur.is_empty() {
            out.push(std::mem::take(&mut cur));
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn grams(w: &[String], n: usize) -> Vec<Vec<String>> {
    if w.len() < n {
        return Vec::new();
    }
    (0..=w.len() - n).map(|i| w[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu4(cands: &[&str], refs: &[Vec<&str>]) -> f64 {
    let mut num = [0f64; 4];
    let mut den = [0f64; 4];
    let mut c_total = 0f64;
    let mut r_total = 0f64;
    for (c, rs) in cands.iter().zip(refs) {
        let cw = words(c);
        let rws: Vec<Vec<String>> = rs.iter().map(|r| words(r)).collect();
        c_total += cw.len() as f64;
        let mut best = rws[0].len();
        for r in &rws {
            let (d, bd) = (r.len().abs_diff(cw.len()), best.abs_diff(cw.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_total += best as f64;
        for n in 1..=4 {
            let cg = grams(&cw, n);
            den[n - 1] += cg.len() as f64;
            for g in distinct(&cg) {
                let mut clip = 0;
                for r in &rws {
                    clip = clip.max(count(&grams(r, n), &g));
                }
                num[n - 1] += count(&cg, &g).min(clip) as f64;
            }
        }
    }
    if num.contains(&0.0) {
        return 0.0;
    }
    let mut prod = 1.0;
    for n in 0..4 {
        prod *= num[n] / den[n];
    }
    let bp = if c_total > r_total {
        1.0
    } else {
        (1.0 - r_total / c_total).exp()
    };
    bp * prod.powf(0.25)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            t[i][j] = if a[i - 1] == b[j - 1] {
                t[i - 1][j - 1] + 1
            } else {
                t[i - 1][j].max(t[i][j - 1])
            };
        }
    }
    t[a.len()][b.len()]
}

pub fn rouge_l(cands: &[&str], refs: &[Vec<&str>]) -> f64 {
    let beta = 1.2f64;
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let cw = words(c);
        let mut best = 0.0f64;
        for r in rs {
            let rw = words(r);
            let l = lcs(&cw, &rw) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / cw.len() as f64;
            let rec = l / rw.len() as f64;
            let f = (1.0 + beta * beta) * p * rec / (rec + beta * beta * p);
            best = best.max(f);
        }
        total += best;
    }
    total / cands.len() as f64
}

/// df over reference sets, as a list of (n-gram, df).
pub fn document_frequency(corpus: &[Vec<&str>]) -> Vec<(Vec<String>, usize)> {
    let mut table: Vec<(Vec<String>, usize)> = Vec::new();
    for refs in corpus {
        let mut in_doc: Vec<Vec<String>> = Vec::new();
        for r in refs {
            for n in 1..=4 {
                in_doc.extend(grams(&words(r), n));
            }
        }
        for g in distinct(&in_doc) {
            match table.iter_mut().find(|(k, _)| *k == g) {
                Some(e) => e.1 += 1,
                None => table.push((g, 1)),
            }
        }
    }
    table
}

/// Per-candidate CIDEr-D with df taken from `corpus`.
pub fn cider_d(cands: &[&str], refs: &[Vec<&str>], corpus: &[Vec<&str>]) -> Vec<f64> {
    let df = document_frequency(corpus);
    let n_docs = corpus.len() as f64;
    let idf = |g: &[String]| -> f64 {
        let d = df
            .iter()
            .find(|(k, _)| k.as_slice() == g)
            .map_or(0, |e| e.1);
        n_docs.ln() - (d.max(1) as f64).ln()
    };
    let sigma = 6.0f64;
    cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let cw = words(c);
            let mut sum = 0.0;
            for r in rs {
                let rw = words(r);
                let delta = cw.len() as f64 - rw.len() as f64;
                let pen = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
                for n in 1..=4 {
                    let (cg, rg) = (grams(&cw, n), grams(&rw, n));
                    let cd = distinct(&cg);
                    let rd = distinct(&rg);
                    let wc: Vec<f64> = cd.iter().map(|g| count(&cg, g) as f64 * idf(g)).collect();
                    let wr: Vec<f64> = rd.iter().map(|g| count(&rg, g) as f64 * idf(g)).collect();
                    let nc = wc.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nr = wr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    if nc == 0.0 || nr == 0.0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for (i, g) in cd.iter().enumerate() {
                        if let Some(j) = rd.iter().position(|x| x == g) {
                            dot += wc[i].min(wr[j]) * wr[j];
                        }
                    }
                    sum += pen * dot / (nc * nr);
                }
            }
            10.0 * sum / 4.0 / rs.len() as f64
        })
        .collect()
}

/// A hand-built three-video corpus with partial overlaps.
pub fn toy_corpus() -> (Vec<&'static str>, Vec<&'static str>, Vec<Vec<&'static str>>) {
    let ids = vec!["v0", "v1", "v2"];
    let cands = vec![
        "a man is playing a guitar",
        "a woman slices an onion",
        "the dog runs in the park",
    ];
    let refs = vec![
        vec![
            "a man is playing a guitar on stage",
            "a man plays guitar",
            "someone plays an instrument",
        ],
        vec![
            "a woman is slicing an onion",
            "a lady cuts an onion",
            "a woman is cooking",
        ],
        vec![
            "a dog is running in a park",
            "the dog runs around the grass",
        ],
    ];
    (ids, cands, refs)
}
