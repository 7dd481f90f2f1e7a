//! Caption evaluation: corpus BLEU-1 with brevity penalty, LCS-based
//! ROUGE-L, plain CIDEr over 1..4-grams, an exact-match METEOR variant,
//! aspect-capture recall, and unique-n-gram diversity counts.
//!
//! All metrics consume pre-tokenized sequences with `<sos>`/`<eos>`/`<pad>`
//! already stripped, and are pure functions of the corpus. Count maps are
//! ordered so float reductions are reproducible run to run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// One evaluation triple: generated tokens, the reference tokens, and the
/// input aspect tokens of the same video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    #[serde(default)]
    pub video_id: String,
    pub candidate: Vec<String>,
    pub reference: Vec<String>,
    pub aspects: Vec<String>,
}

/// Scores over one corpus. `cider` lives in `[0, 10]`, everything else in
/// `[0, 1]`; the n-gram fields are raw distinct counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu1: f64,
    pub meteor_lite: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub aspect_capture: f64,
    pub unique_4grams: u64,
    pub unique_5grams: u64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        format!(
            "metric          value\n\
             bleu1           {:.4}\n\
             meteor_lite     {:.4}\n\
             rouge_l         {:.4}\n\
             cider           {:.4}\n\
             aspect_capture  {:.4}\n\
             unique_4grams   {}\n\
             unique_5grams   {}\n",
            self.bleu1,
            self.meteor_lite,
            self.rouge_l,
            self.cider,
            self.aspect_capture,
            self.unique_4grams,
            self.unique_5grams
        )
    }
}

/// Runs the full suite over the corpus.
pub fn evaluate(corpus: &[CorpusEntry]) -> EvalReport {
    let candidates: Vec<&[String]> = corpus.iter().map(|e| e.candidate.as_slice()).collect();
    EvalReport {
        bleu1: bleu1(corpus),
        meteor_lite: meteor_lite(corpus),
        rouge_l: rouge_l(corpus),
        cider: cider(corpus),
        aspect_capture: aspect_capture(corpus),
        unique_4grams: unique_ngrams(&candidates, 4),
        unique_5grams: unique_ngrams(&candidates, 5),
    }
}

fn counts<'a>(tokens: &'a [String]) -> BTreeMap<&'a str, usize> {
    let mut m = BTreeMap::new();
    for t in tokens {
        *m.entry(t.as_str()).or_insert(0) += 1;
    }
    m
}

/// Corpus-level modified unigram precision with brevity penalty.
pub fn bleu1(corpus: &[CorpusEntry]) -> f64 {
    let mut matched = 0usize;
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for e in corpus {
        cand_len += e.candidate.len();
        ref_len += e.reference.len();
        let ref_counts = counts(&e.reference);
        for (tok, c) in counts(&e.candidate) {
            matched += c.min(ref_counts.get(tok).copied().unwrap_or(0));
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let precision = matched as f64 / cand_len as f64;
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * precision
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
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

/// Mean per-pair LCS F-measure with the original metric's beta = 1.2.
pub fn rouge_l(corpus: &[CorpusEntry]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let beta_sq = 1.2f64 * 1.2;
    let mut total = 0.0;
    for e in corpus {
        if e.candidate.is_empty() || e.reference.is_empty() {
            continue;
        }
        let lcs = lcs_len(&e.candidate, &e.reference) as f64;
        let p = lcs / e.candidate.len() as f64;
        let r = lcs / e.reference.len() as f64;
        if p + r > 0.0 {
            total += (1.0 + beta_sq) * r * p / (r + beta_sq * p);
        }
    }
    total / corpus.len() as f64
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<Vec<&str>, usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(String::as_str).collect();
            *m.entry(key).or_insert(0) += 1;
        }
    }
    m
}

/// Plain CIDEr: TF-IDF n-gram vectors for n = 1..4, cosine similarity per
/// order averaged and scaled by 10. IDF comes from the reference side of the
/// corpus (one reference per video); n-grams never seen in any reference get
/// the maximal IDF `ln(corpus size)`.
pub fn cider(corpus: &[CorpusEntry]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let n_docs = corpus.len() as f64;
    let mut total = 0.0;
    for n in 1..=4usize {
        let mut df: BTreeMap<Vec<&str>, usize> = BTreeMap::new();
        for e in corpus {
            for key in ngram_counts(&e.reference, n).into_keys() {
                *df.entry(key).or_insert(0) += 1;
            }
        }
        let idf = |key: &Vec<&str>| -> f64 {
            let d = df.get(key).copied().unwrap_or(0).max(1);
            (n_docs / d as f64).ln()
        };
        let mut order_total = 0.0;
        for e in corpus {
            let cvec = ngram_counts(&e.candidate, n);
            let rvec = ngram_counts(&e.reference, n);
            let mut dot = 0.0;
            let mut c_norm = 0.0;
            let mut r_norm = 0.0;
            for (key, &c) in &cvec {
                let w = c as f64 * idf(key);
                c_norm += w * w;
                if let Some(&r) = rvec.get(key) {
                    dot += w * (r as f64 * idf(key));
                }
            }
            for (key, &r) in &rvec {
                let w = r as f64 * idf(key);
                r_norm += w * w;
            }
            if c_norm > 0.0 && r_norm > 0.0 {
                order_total += dot / (c_norm.sqrt() * r_norm.sqrt());
            }
        }
        total += order_total / n_docs;
    }
    10.0 * total / 4.0
}

/// Exact-match METEOR: greedy leftmost unigram alignment, harmonic mean
/// weighted toward recall, and a cubic fragmentation penalty.
pub fn meteor_lite(corpus: &[CorpusEntry]) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for e in corpus {
        total += meteor_pair(&e.candidate, &e.reference);
    }
    total / corpus.len() as f64
}

fn meteor_pair(candidate: &[String], reference: &[String]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    // leftmost unmatched reference occurrence per candidate token
    let mut positions: BTreeMap<&str, std::collections::VecDeque<usize>> = BTreeMap::new();
    for (j, tok) in reference.iter().enumerate() {
        positions.entry(tok.as_str()).or_default().push_back(j);
    }
    let mut alignment: Vec<(usize, usize)> = Vec::new();
    for (i, tok) in candidate.iter().enumerate() {
        if let Some(q) = positions.get_mut(tok.as_str()) {
            if let Some(j) = q.pop_front() {
                alignment.push((i, j));
            }
        }
    }
    let m = alignment.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1usize;
    for w in alignment.windows(2) {
        if w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1 {
            chunks += 1;
        }
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    f_mean * (1.0 - penalty)
}

/// Mean fraction of each pair's distinct aspect tokens that appear in its
/// candidate. Pairs with no aspects are skipped.
pub fn aspect_capture(corpus: &[CorpusEntry]) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for e in corpus {
        let mut aspects: Vec<&str> = e.aspects.iter().map(String::as_str).collect();
        aspects.sort_unstable();
        aspects.dedup();
        if aspects.is_empty() {
            continue;
        }
        let hit = aspects
            .iter()
            .filter(|a| e.candidate.iter().any(|c| c == *a))
            .count();
        total += hit as f64 / aspects.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}

/// Distinct n-grams across all candidate sentences; n-grams never span
/// sentence boundaries.
pub fn unique_ngrams(candidates: &[&[String]], n: usize) -> u64 {
    let mut set: std::collections::BTreeSet<Vec<&str>> = std::collections::BTreeSet::new();
    for c in candidates {
        if c.len() >= n {
            for w in c.windows(n) {
                set.insert(w.iter().map(String::as_str).collect());
            }
        }
    }
    set.len() as u64
}
